#include "darts/ops.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>

namespace darts {

namespace {

using Node = std::shared_ptr<detail::TensorNode>;

bool want_grad(std::initializer_list<const Tensor*> inputs) {
    if (!Tape::recording()) return false;
    for (const Tensor* t : inputs) {
        if (t->requires_grad()) return true;
    }
    return false;
}

std::vector<double>& grad_of(const Node& n) {
    if (n->grad.empty()) n->grad.assign(n->data.size(), 0.0);
    return n->grad;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(str(op, ": shape mismatch ", shape_str(a.shape()), " vs ", shape_str(b.shape())));
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise / structural
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    Tensor out(a.shape());
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
    if (want_grad({&a, &b})) {
        out.set_requires_grad(true);
        Node an = a.node(), bn = b.node(), on = out.node();
        Tape::current()->record("add", on, [an, bn, on] {
            auto& go = grad_of(on);
            auto& ga = grad_of(an);
            auto& gb = grad_of(bn);
            for (std::size_t i = 0; i < go.size(); ++i) {
                ga[i] += go[i];
                gb[i] += go[i];
            }
        });
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    Tensor out(a.shape());
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
    if (want_grad({&a, &b})) {
        out.set_requires_grad(true);
        Node an = a.node(), bn = b.node(), on = out.node();
        Tape::current()->record("mul", on, [an, bn, on] {
            auto& go = grad_of(on);
            auto& ga = grad_of(an);
            auto& gb = grad_of(bn);
            for (std::size_t i = 0; i < go.size(); ++i) {
                ga[i] += go[i] * bn->data[i];
                gb[i] += go[i] * an->data[i];
            }
        });
    }
    return out;
}

Tensor scale(const Tensor& a, double factor) {
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * factor;
    if (want_grad({&a})) {
        out.set_requires_grad(true);
        Node an = a.node(), on = out.node();
        Tape::current()->record("scale", on, [an, on, factor] {
            auto& go = grad_of(on);
            auto& ga = grad_of(an);
            for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * factor;
        });
    }
    return out;
}

Tensor scale_by_index(const Tensor& x, const Tensor& w, std::size_t index) {
    if (w.rank() != 1 || index >= w.dim(0)) {
        throw ShapeError(str("scale_by_index: need 1-d weight with index < ", w.defined() ? w.dim(0) : 0));
    }
    const double f = w[index];
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] * f;
    if (want_grad({&x, &w})) {
        out.set_requires_grad(true);
        Node xn = x.node(), wn = w.node(), on = out.node();
        Tape::current()->record("scale_by_index", on, [xn, wn, on, index, f] {
            auto& go = grad_of(on);
            auto& gx = grad_of(xn);
            auto& gw = grad_of(wn);
            double acc = 0.0;
            for (std::size_t i = 0; i < go.size(); ++i) {
                gx[i] += go[i] * f;
                acc += go[i] * xn->data[i];
            }
            gw[index] += acc;
        });
    }
    return out;
}

Tensor rowscale(const Tensor& x, const std::vector<double>& row_factors) {
    if (x.rank() < 1 || x.dim(0) != row_factors.size()) {
        throw ShapeError(str("rowscale: leading dim ", x.dim(0), " vs ", row_factors.size(), " factors"));
    }
    const std::size_t rows = x.dim(0);
    const std::size_t cols = x.numel() / rows;
    Tensor out(x.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const double f = row_factors[r];
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = x[r * cols + c] * f;
    }
    if (want_grad({&x})) {
        out.set_requires_grad(true);
        Node xn = x.node(), on = out.node();
        auto factors = row_factors;
        Tape::current()->record("rowscale", on, [xn, on, factors, rows, cols] {
            auto& go = grad_of(on);
            auto& gx = grad_of(xn);
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += go[r * cols + c] * factors[r];
            }
        });
    }
    return out;
}

Tensor sum_all(const Tensor& x) {
    double acc = 0.0;
    for (std::size_t i = 0; i < x.numel(); ++i) acc += x[i];
    Tensor out = Tensor::scalar(acc);
    if (want_grad({&x})) {
        out.set_requires_grad(true);
        Node xn = x.node(), on = out.node();
        Tape::current()->record("sum_all", on, [xn, on] {
            const double g = grad_of(on)[0];
            auto& gx = grad_of(xn);
            for (double& v : gx) v += g;
        });
    }
    return out;
}

Tensor mean_scalars(const std::vector<Tensor>& xs) {
    if (xs.empty()) throw ShapeError("mean_scalars: empty input list");
    double acc = 0.0;
    bool rg = false;
    for (const Tensor& t : xs) {
        acc += t.value();
        rg = rg || t.requires_grad();
    }
    const double inv = 1.0 / static_cast<double>(xs.size());
    Tensor out = Tensor::scalar(acc * inv);
    if (Tape::recording() && rg) {
        out.set_requires_grad(true);
        std::vector<Node> nodes;
        nodes.reserve(xs.size());
        for (const Tensor& t : xs) nodes.push_back(t.node());
        Node on = out.node();
        Tape::current()->record("mean_scalars", on, [nodes, on, inv] {
            const double g = grad_of(on)[0] * inv;
            for (const Node& n : nodes) grad_of(n)[0] += g;
        });
    }
    return out;
}

Tensor slice_last(const Tensor& x, std::size_t lo, std::size_t hi) {
    const std::size_t last = x.dim(x.rank() - 1);
    if (lo >= hi || hi > last) throw ShapeError(str("slice_last: bad range [", lo, ",", hi, ") for last dim ", last));
    Shape out_shape = x.shape();
    out_shape.back() = hi - lo;
    const std::size_t rows = x.numel() / last;
    const std::size_t width = hi - lo;
    Tensor out(out_shape);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < width; ++c) out[r * width + c] = x[r * last + lo + c];
    }
    if (want_grad({&x})) {
        out.set_requires_grad(true);
        Node xn = x.node(), on = out.node();
        Tape::current()->record("slice_last", on, [xn, on, rows, width, last, lo] {
            auto& go = grad_of(on);
            auto& gx = grad_of(xn);
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t c = 0; c < width; ++c) gx[r * last + lo + c] += go[r * width + c];
            }
        });
    }
    return out;
}

Tensor time_slice(const Tensor& x, std::size_t t) {
    if (x.rank() != 3) throw ShapeError(str("time_slice: need [N,T,F], got ", shape_str(x.shape())));
    const std::size_t N = x.dim(0), T = x.dim(1), F = x.dim(2);
    if (t >= T) throw ShapeError(str("time_slice: t=", t, " out of range T=", T));
    Tensor out({N, F});
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t f = 0; f < F; ++f) out[n * F + f] = x[(n * T + t) * F + f];
    }
    if (want_grad({&x})) {
        out.set_requires_grad(true);
        Node xn = x.node(), on = out.node();
        Tape::current()->record("time_slice", on, [xn, on, N, T, F, t] {
            auto& go = grad_of(on);
            auto& gx = grad_of(xn);
            for (std::size_t n = 0; n < N; ++n) {
                for (std::size_t f = 0; f < F; ++f) gx[(n * T + t) * F + f] += go[n * F + f];
            }
        });
    }
    return out;
}

Tensor slice_frames(const Tensor& x, std::size_t n, std::size_t t_len) {
    if (x.rank() != 3) throw ShapeError(str("slice_frames: need [N,T,F], got ", shape_str(x.shape())));
    const std::size_t N = x.dim(0), T = x.dim(1), F = x.dim(2);
    if (n >= N || t_len == 0 || t_len > T) {
        throw ShapeError(str("slice_frames: n=", n, " t_len=", t_len, " out of range for ", shape_str(x.shape())));
    }
    Tensor out({t_len, F});
    for (std::size_t t = 0; t < t_len; ++t) {
        for (std::size_t f = 0; f < F; ++f) out[t * F + f] = x[(n * T + t) * F + f];
    }
    if (want_grad({&x})) {
        out.set_requires_grad(true);
        Node xn = x.node(), on = out.node();
        Tape::current()->record("slice_frames", on, [xn, on, n, T, F, t_len] {
            auto& go = grad_of(on);
            auto& gx = grad_of(xn);
            for (std::size_t t = 0; t < t_len; ++t) {
                for (std::size_t f = 0; f < F; ++f) gx[(n * T + t) * F + f] += go[t * F + f];
            }
        });
    }
    return out;
}

Tensor stack_time(const std::vector<Tensor>& frames) {
    if (frames.empty()) throw ShapeError("stack_time: empty frame list");
    const std::size_t N = frames[0].dim(0), F = frames[0].dim(1), T = frames.size();
    bool rg = false;
    for (const Tensor& f : frames) {
        if (f.rank() != 2 || f.dim(0) != N || f.dim(1) != F) {
            throw ShapeError(str("stack_time: frame shape ", shape_str(f.shape()), " != [", N, ",", F, "]"));
        }
        rg = rg || f.requires_grad();
    }
    Tensor out({N, T, F});
    for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t n = 0; n < N; ++n) {
            for (std::size_t f = 0; f < F; ++f) out[(n * T + t) * F + f] = frames[t][n * F + f];
        }
    }
    if (Tape::recording() && rg) {
        out.set_requires_grad(true);
        std::vector<Node> nodes;
        for (const Tensor& f : frames) nodes.push_back(f.node());
        Node on = out.node();
        Tape::current()->record("stack_time", on, [nodes, on, N, T, F] {
            auto& go = grad_of(on);
            for (std::size_t t = 0; t < T; ++t) {
                auto& gf = grad_of(nodes[t]);
                for (std::size_t n = 0; n < N; ++n) {
                    for (std::size_t f = 0; f < F; ++f) gf[n * F + f] += go[(n * T + t) * F + f];
                }
            }
        });
    }
    return out;
}

Tensor concat_last(const Tensor& a, const Tensor& b) {
    if (a.rank() != b.rank() || a.rank() < 1) {
        throw ShapeError(str("concat_last: rank mismatch ", shape_str(a.shape()), " vs ", shape_str(b.shape())));
    }
    for (std::size_t i = 0; i + 1 < a.rank(); ++i) {
        if (a.dim(i) != b.dim(i)) {
            throw ShapeError(str("concat_last: dim mismatch ", shape_str(a.shape()), " vs ", shape_str(b.shape())));
        }
    }
    const std::size_t Fa = a.dim(a.rank() - 1), Fb = b.dim(b.rank() - 1);
    const std::size_t rows = a.numel() / Fa;
    Shape out_shape = a.shape();
    out_shape.back() = Fa + Fb;
    Tensor out(out_shape);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t f = 0; f < Fa; ++f) out[r * (Fa + Fb) + f] = a[r * Fa + f];
        for (std::size_t f = 0; f < Fb; ++f) out[r * (Fa + Fb) + Fa + f] = b[r * Fb + f];
    }
    if (want_grad({&a, &b})) {
        out.set_requires_grad(true);
        Node an = a.node(), bn = b.node(), on = out.node();
        Tape::current()->record("concat_last", on, [an, bn, on, rows, Fa, Fb] {
            auto& go = grad_of(on);
            auto& ga = grad_of(an);
            auto& gb = grad_of(bn);
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t f = 0; f < Fa; ++f) ga[r * Fa + f] += go[r * (Fa + Fb) + f];
                for (std::size_t f = 0; f < Fb; ++f) gb[r * Fb + f] += go[r * (Fa + Fb) + Fa + f];
            }
        });
    }
    return out;
}

Tensor channels_to_features(const Tensor& x) {
    if (x.rank() != 4) throw ShapeError(str("channels_to_features: need [N,C,T,D], got ", shape_str(x.shape())));
    const std::size_t N = x.dim(0), C = x.dim(1), T = x.dim(2), D = x.dim(3);
    Tensor out({N, T, C * D});
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t t = 0; t < T; ++t) {
            for (std::size_t c = 0; c < C; ++c) {
                for (std::size_t d = 0; d < D; ++d) {
                    out[(n * T + t) * C * D + c * D + d] = x.at4(n, c, t, d);
                }
            }
        }
    }
    if (want_grad({&x})) {
        out.set_requires_grad(true);
        Node xn = x.node(), on = out.node();
        Tape::current()->record("channels_to_features", on, [xn, on, N, C, T, D] {
            auto& go = grad_of(on);
            auto& gx = grad_of(xn);
            for (std::size_t n = 0; n < N; ++n) {
                for (std::size_t t = 0; t < T; ++t) {
                    for (std::size_t c = 0; c < C; ++c) {
                        for (std::size_t d = 0; d < D; ++d) {
                            gx[((n * C + c) * T + t) * D + d] += go[(n * T + t) * C * D + c * D + d];
                        }
                    }
                }
            }
        });
    }
    return out;
}

Tensor concat_channels(const std::vector<Tensor>& xs) {
    if (xs.empty()) throw ShapeError("concat_channels: empty input list");
    const std::size_t N = xs[0].dim(0), H = xs[0].dim(2), W = xs[0].dim(3);
    std::size_t total_c = 0;
    bool rg = false;
    for (const Tensor& t : xs) {
        if (t.rank() != 4 || t.dim(0) != N || t.dim(2) != H || t.dim(3) != W) {
            throw ShapeError(str("concat_channels: non-channel dims differ: ", shape_str(t.shape()), " vs ",
                                 shape_str(xs[0].shape())));
        }
        total_c += t.dim(1);
        rg = rg || t.requires_grad();
    }
    Tensor out({N, total_c, H, W});
    std::size_t c_off = 0;
    for (const Tensor& t : xs) {
        const std::size_t C = t.dim(1);
        for (std::size_t n = 0; n < N; ++n) {
            for (std::size_t c = 0; c < C; ++c) {
                for (std::size_t h = 0; h < H; ++h) {
                    for (std::size_t w = 0; w < W; ++w) out.at4(n, c_off + c, h, w) = t.at4(n, c, h, w);
                }
            }
        }
        c_off += C;
    }
    if (Tape::recording() && rg) {
        out.set_requires_grad(true);
        std::vector<Node> nodes;
        std::vector<std::size_t> channels;
        for (const Tensor& t : xs) {
            nodes.push_back(t.node());
            channels.push_back(t.dim(1));
        }
        Node on = out.node();
        Tape::current()->record("concat_channels", on, [nodes, channels, on, N, H, W, total_c] {
            auto& go = grad_of(on);
            std::size_t off = 0;
            for (std::size_t b = 0; b < nodes.size(); ++b) {
                auto& gx = grad_of(nodes[b]);
                const std::size_t C = channels[b];
                for (std::size_t n = 0; n < N; ++n) {
                    for (std::size_t c = 0; c < C; ++c) {
                        for (std::size_t h = 0; h < H; ++h) {
                            for (std::size_t w = 0; w < W; ++w) {
                                gx[((n * C + c) * H + h) * W + w] +=
                                    go[((n * total_c + off + c) * H + h) * W + w];
                            }
                        }
                    }
                }
                off += C;
            }
        });
    }
    return out;
}

Tensor mask_time(const Tensor& x, const std::vector<std::size_t>& lengths) {
    if (x.rank() != 4) throw ShapeError(str("mask_time: need [N,C,T,D], got ", shape_str(x.shape())));
    const std::size_t N = x.dim(0), C = x.dim(1), T = x.dim(2), D = x.dim(3);
    if (lengths.size() != N) throw ShapeError(str("mask_time: ", lengths.size(), " lengths for batch ", N));
    bool any_padded = false;
    for (std::size_t len : lengths) any_padded = any_padded || len < T;
    if (!any_padded) return x;
    Tensor out(x.shape());
    for (std::size_t n = 0; n < N; ++n) {
        const std::size_t len = std::min(lengths[n], T);
        for (std::size_t c = 0; c < C; ++c) {
            for (std::size_t t = 0; t < T; ++t) {
                for (std::size_t d = 0; d < D; ++d) out.at4(n, c, t, d) = t < len ? x.at4(n, c, t, d) : 0.0;
            }
        }
    }
    if (want_grad({&x})) {
        out.set_requires_grad(true);
        Node xn = x.node(), on = out.node();
        auto lens = lengths;
        Tape::current()->record("mask_time", on, [xn, on, lens, N, C, T, D] {
            auto& go = grad_of(on);
            auto& gx = grad_of(xn);
            for (std::size_t n = 0; n < N; ++n) {
                const std::size_t len = std::min(lens[n], T);
                for (std::size_t c = 0; c < C; ++c) {
                    for (std::size_t t = 0; t < len; ++t) {
                        for (std::size_t d = 0; d < D; ++d) {
                            const std::size_t i = ((n * C + c) * T + t) * D + d;
                            gx[i] += go[i];
                        }
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Activations and softmax
// ---------------------------------------------------------------------------

Tensor activation(Act kind, const Tensor& x) {
    Tensor out(x.shape());
    const std::size_t n = x.numel();
    switch (kind) {
        case Act::Relu:
            for (std::size_t i = 0; i < n; ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
            break;
        case Act::Sigmoid:
            for (std::size_t i = 0; i < n; ++i) out[i] = 1.0 / (1.0 + std::exp(-x[i]));
            break;
        case Act::Tanh:
            for (std::size_t i = 0; i < n; ++i) out[i] = std::tanh(x[i]);
            break;
    }
    if (want_grad({&x})) {
        out.set_requires_grad(true);
        Node xn = x.node(), on = out.node();
        Tape::current()->record("activation", on, [xn, on, kind] {
            auto& go = grad_of(on);
            auto& gx = grad_of(xn);
            switch (kind) {
                case Act::Relu:
                    for (std::size_t i = 0; i < go.size(); ++i) {
                        if (xn->data[i] > 0.0) gx[i] += go[i];
                    }
                    break;
                case Act::Sigmoid:
                    for (std::size_t i = 0; i < go.size(); ++i) {
                        const double y = on->data[i];
                        gx[i] += go[i] * y * (1.0 - y);
                    }
                    break;
                case Act::Tanh:
                    for (std::size_t i = 0; i < go.size(); ++i) {
                        const double y = on->data[i];
                        gx[i] += go[i] * (1.0 - y * y);
                    }
                    break;
            }
        });
    }
    return out;
}

namespace {

// Shared row-softmax kernel with max subtraction.
void softmax_rows(const double* x, double* y, std::size_t rows, std::size_t width, bool log_domain) {
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x + r * width;
        double* yr = y + r * width;
        double mx = xr[0];
        for (std::size_t i = 1; i < width; ++i) mx = std::max(mx, xr[i]);
        double denom = 0.0;
        for (std::size_t i = 0; i < width; ++i) denom += std::exp(xr[i] - mx);
        if (log_domain) {
            const double log_denom = std::log(denom);
            for (std::size_t i = 0; i < width; ++i) yr[i] = xr[i] - mx - log_denom;
        } else {
            for (std::size_t i = 0; i < width; ++i) yr[i] = std::exp(xr[i] - mx) / denom;
        }
    }
}

}  // namespace

Tensor softmax_last(const Tensor& x) {
    const std::size_t width = x.dim(x.rank() - 1);
    const std::size_t rows = x.numel() / width;
    Tensor out(x.shape());
    softmax_rows(x.data().data(), out.data().data(), rows, width, false);
    if (want_grad({&x})) {
        out.set_requires_grad(true);
        Node xn = x.node(), on = out.node();
        Tape::current()->record("softmax", on, [xn, on, rows, width] {
            auto& go = grad_of(on);
            auto& gx = grad_of(xn);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* y = on->data.data() + r * width;
                const double* g = go.data() + r * width;
                double dot = 0.0;
                for (std::size_t i = 0; i < width; ++i) dot += g[i] * y[i];
                for (std::size_t i = 0; i < width; ++i) gx[r * width + i] += y[i] * (g[i] - dot);
            }
        });
    }
    return out;
}

Tensor log_softmax_last(const Tensor& x) {
    const std::size_t width = x.dim(x.rank() - 1);
    const std::size_t rows = x.numel() / width;
    Tensor out(x.shape());
    softmax_rows(x.data().data(), out.data().data(), rows, width, true);
    if (want_grad({&x})) {
        out.set_requires_grad(true);
        Node xn = x.node(), on = out.node();
        Tape::current()->record("log_softmax", on, [xn, on, rows, width] {
            auto& go = grad_of(on);
            auto& gx = grad_of(xn);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* y = on->data.data() + r * width;
                const double* g = go.data() + r * width;
                double gsum = 0.0;
                for (std::size_t i = 0; i < width; ++i) gsum += g[i];
                for (std::size_t i = 0; i < width; ++i) gx[r * width + i] += g[i] - std::exp(y[i]) * gsum;
            }
        });
    }
    return out;
}

Tensor masked_softmax(const Tensor& alpha, const std::vector<std::uint8_t>& keep) {
    if (alpha.rank() != 1) throw ShapeError(str("masked_softmax: need rank-1 alphas, got ", shape_str(alpha.shape())));
    const std::size_t n = alpha.dim(0);
    if (keep.size() != n) throw ShapeError(str("masked_softmax: mask size ", keep.size(), " vs ", n));
    std::size_t kept = 0;
    for (std::uint8_t k : keep) kept += k ? 1 : 0;
    if (kept == 0) throw Error("masked_softmax: mask eliminates every entry");
    Tensor out(alpha.shape());
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
        if (keep[i]) mx = std::max(mx, alpha[i]);
    }
    double denom = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (keep[i]) denom += std::exp(alpha[i] - mx);
    }
    for (std::size_t i = 0; i < n; ++i) out[i] = keep[i] ? std::exp(alpha[i] - mx) / denom : 0.0;
    if (want_grad({&alpha})) {
        out.set_requires_grad(true);
        Node an = alpha.node(), on = out.node();
        auto mask = keep;
        Tape::current()->record("masked_softmax", on, [an, on, mask, n] {
            auto& go = grad_of(on);
            auto& ga = grad_of(an);
            double dot = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                if (mask[i]) dot += go[i] * on->data[i];
            }
            for (std::size_t i = 0; i < n; ++i) {
                if (mask[i]) ga[i] += on->data[i] * (go[i] - dot);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Convolution: direct reference path plus an im2col/GEMM path. Both
// accumulate taps in (ci, kh, kw) order per output element so the results
// are bitwise identical at float64.
// ---------------------------------------------------------------------------

namespace {

std::atomic<ConvBackend> g_conv_backend{ConvBackend::Im2col};

struct ConvDims {
    std::size_t N, Cin, H, W, Cout, k;
    int dil, pad;
};

inline std::ptrdiff_t tap_index(std::size_t o, int pad, std::size_t kk, int dil) {
    return static_cast<std::ptrdiff_t>(o) - pad + static_cast<std::ptrdiff_t>(kk) * dil;
}

void conv_forward_naive(const double* x, const double* kern, const double* bias, double* y,
                        const ConvDims& d) {
    const std::size_t HW = d.H * d.W;
    parallel_for(d.N, [&](std::size_t n0, std::size_t n1) {
        for (std::size_t n = n0; n < n1; ++n) {
            const double* xn = x + n * d.Cin * HW;
            double* yn = y + n * d.Cout * HW;
            for (std::size_t co = 0; co < d.Cout; ++co) {
                for (std::size_t oh = 0; oh < d.H; ++oh) {
                    for (std::size_t ow = 0; ow < d.W; ++ow) {
                        double acc = bias[co];
                        for (std::size_t ci = 0; ci < d.Cin; ++ci) {
                            for (std::size_t kh = 0; kh < d.k; ++kh) {
                                const std::ptrdiff_t ih = tap_index(oh, d.pad, kh, d.dil);
                                for (std::size_t kw = 0; kw < d.k; ++kw) {
                                    const std::ptrdiff_t iw = tap_index(ow, d.pad, kw, d.dil);
                                    const bool in = ih >= 0 && ih < static_cast<std::ptrdiff_t>(d.H) &&
                                                    iw >= 0 && iw < static_cast<std::ptrdiff_t>(d.W);
                                    const double xv = in ? xn[ci * HW + ih * d.W + iw] : 0.0;
                                    acc += kern[((co * d.Cin + ci) * d.k + kh) * d.k + kw] * xv;
                                }
                            }
                        }
                        yn[co * HW + oh * d.W + ow] = acc;
                    }
                }
            }
        }
    });
}

// cols: [Cin*k*k][H*W], zero-filled outside bounds.
void im2col(const double* xn, const ConvDims& d, double* cols) {
    const std::size_t HW = d.H * d.W;
    std::size_t row = 0;
    for (std::size_t ci = 0; ci < d.Cin; ++ci) {
        for (std::size_t kh = 0; kh < d.k; ++kh) {
            for (std::size_t kw = 0; kw < d.k; ++kw, ++row) {
                double* dst = cols + row * HW;
                for (std::size_t oh = 0; oh < d.H; ++oh) {
                    const std::ptrdiff_t ih = tap_index(oh, d.pad, kh, d.dil);
                    if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(d.H)) {
                        for (std::size_t ow = 0; ow < d.W; ++ow) dst[oh * d.W + ow] = 0.0;
                        continue;
                    }
                    for (std::size_t ow = 0; ow < d.W; ++ow) {
                        const std::ptrdiff_t iw = tap_index(ow, d.pad, kw, d.dil);
                        dst[oh * d.W + ow] = (iw >= 0 && iw < static_cast<std::ptrdiff_t>(d.W))
                                                 ? xn[ci * HW + ih * d.W + iw]
                                                 : 0.0;
                    }
                }
            }
        }
    }
}

void conv_forward_fast(const double* x, const double* kern, const double* bias, double* y,
                       const ConvDims& d) {
    const std::size_t HW = d.H * d.W;
    const std::size_t K = d.Cin * d.k * d.k;
    parallel_for(d.N, [&](std::size_t n0, std::size_t n1) {
        std::vector<double> cols(K * HW);
        for (std::size_t n = n0; n < n1; ++n) {
            im2col(x + n * d.Cin * HW, d, cols.data());
            double* yn = y + n * d.Cout * HW;
            for (std::size_t co = 0; co < d.Cout; ++co) {
                double* yrow = yn + co * HW;
                const double b = bias[co];
                for (std::size_t j = 0; j < HW; ++j) yrow[j] = b;
                const double* krow = kern + co * K;
                for (std::size_t kk = 0; kk < K; ++kk) {
                    const double a = krow[kk];
                    const double* brow = cols.data() + kk * HW;
                    for (std::size_t j = 0; j < HW; ++j) yrow[j] += a * brow[j];
                }
            }
        }
    });
}

void conv_backward_naive(const double* x, const double* kern, const double* go, double* gx,
                         double* gk, double* gb, const ConvDims& d) {
    const std::size_t HW = d.H * d.W;
    for (std::size_t n = 0; n < d.N; ++n) {
        const double* xn = x + n * d.Cin * HW;
        const double* gon = go + n * d.Cout * HW;
        double* gxn = gx + n * d.Cin * HW;
        // bias: sum over spatial positions, n outer.
        for (std::size_t co = 0; co < d.Cout; ++co) {
            double acc = 0.0;
            for (std::size_t j = 0; j < HW; ++j) acc += gon[co * HW + j];
            gb[co] += acc;
        }
        // kernel: per (co, ci, kh, kw), accumulate over (oh, ow) ascending.
        for (std::size_t co = 0; co < d.Cout; ++co) {
            for (std::size_t ci = 0; ci < d.Cin; ++ci) {
                for (std::size_t kh = 0; kh < d.k; ++kh) {
                    for (std::size_t kw = 0; kw < d.k; ++kw) {
                        double acc = 0.0;
                        for (std::size_t oh = 0; oh < d.H; ++oh) {
                            const std::ptrdiff_t ih = tap_index(oh, d.pad, kh, d.dil);
                            for (std::size_t ow = 0; ow < d.W; ++ow) {
                                const std::ptrdiff_t iw = tap_index(ow, d.pad, kw, d.dil);
                                const bool in = ih >= 0 && ih < static_cast<std::ptrdiff_t>(d.H) &&
                                                iw >= 0 && iw < static_cast<std::ptrdiff_t>(d.W);
                                const double xv = in ? xn[ci * HW + ih * d.W + iw] : 0.0;
                                acc += gon[co * HW + oh * d.W + ow] * xv;
                            }
                        }
                        gk[((co * d.Cin + ci) * d.k + kh) * d.k + kw] += acc;
                    }
                }
            }
        }
        // input: per (ci, kh, kw) then (oh, ow), inner sum over co ascending.
        for (std::size_t ci = 0; ci < d.Cin; ++ci) {
            for (std::size_t kh = 0; kh < d.k; ++kh) {
                for (std::size_t kw = 0; kw < d.k; ++kw) {
                    for (std::size_t oh = 0; oh < d.H; ++oh) {
                        const std::ptrdiff_t ih = tap_index(oh, d.pad, kh, d.dil);
                        if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(d.H)) continue;
                        for (std::size_t ow = 0; ow < d.W; ++ow) {
                            const std::ptrdiff_t iw = tap_index(ow, d.pad, kw, d.dil);
                            if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(d.W)) continue;
                            double s = 0.0;
                            for (std::size_t co = 0; co < d.Cout; ++co) {
                                s += kern[((co * d.Cin + ci) * d.k + kh) * d.k + kw] *
                                     gon[co * HW + oh * d.W + ow];
                            }
                            gxn[ci * HW + ih * d.W + iw] += s;
                        }
                    }
                }
            }
        }
    }
}

void conv_backward_fast(const double* x, const double* kern, const double* go, double* gx,
                        double* gk, double* gb, const ConvDims& d) {
    const std::size_t HW = d.H * d.W;
    const std::size_t K = d.Cin * d.k * d.k;
    std::vector<double> cols(K * HW);
    std::vector<double> kern_t(K * d.Cout);  // [cikhkw][co]
    for (std::size_t co = 0; co < d.Cout; ++co) {
        for (std::size_t kk = 0; kk < K; ++kk) kern_t[kk * d.Cout + co] = kern[co * K + kk];
    }
    std::vector<double> col_grad(K * HW);
    for (std::size_t n = 0; n < d.N; ++n) {
        const double* gon = go + n * d.Cout * HW;
        double* gxn = gx + n * d.Cin * HW;
        for (std::size_t co = 0; co < d.Cout; ++co) {
            double acc = 0.0;
            for (std::size_t j = 0; j < HW; ++j) acc += gon[co * HW + j];
            gb[co] += acc;
        }
        // gk[co][kk] += dot(go[co][:], cols[kk][:])
        im2col(x + n * d.Cin * HW, d, cols.data());
        for (std::size_t co = 0; co < d.Cout; ++co) {
            const double* grow = gon + co * HW;
            for (std::size_t kk = 0; kk < K; ++kk) {
                const double* crow = cols.data() + kk * HW;
                double acc = 0.0;
                for (std::size_t j = 0; j < HW; ++j) acc += grow[j] * crow[j];
                gk[co * K + kk] += acc;
            }
        }
        // col_grad = kern^T * go, co ascending per element.
        for (std::size_t kk = 0; kk < K; ++kk) {
            const double* krow = kern_t.data() + kk * d.Cout;
            double* crow = col_grad.data() + kk * HW;
            for (std::size_t j = 0; j < HW; ++j) {
                double s = 0.0;
                for (std::size_t co = 0; co < d.Cout; ++co) s += krow[co] * gon[co * HW + j];
                crow[j] = s;
            }
        }
        // col2im scatter, (ci, kh, kw) rows ascending then (oh, ow) ascending.
        std::size_t row = 0;
        for (std::size_t ci = 0; ci < d.Cin; ++ci) {
            for (std::size_t kh = 0; kh < d.k; ++kh) {
                for (std::size_t kw = 0; kw < d.k; ++kw, ++row) {
                    const double* crow = col_grad.data() + row * HW;
                    for (std::size_t oh = 0; oh < d.H; ++oh) {
                        const std::ptrdiff_t ih = tap_index(oh, d.pad, kh, d.dil);
                        if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(d.H)) continue;
                        for (std::size_t ow = 0; ow < d.W; ++ow) {
                            const std::ptrdiff_t iw = tap_index(ow, d.pad, kw, d.dil);
                            if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(d.W)) continue;
                            gxn[ci * HW + ih * d.W + iw] += crow[oh * d.W + ow];
                        }
                    }
                }
            }
        }
    }
}

}  // namespace

ConvBackend conv_backend() { return g_conv_backend.load(std::memory_order_relaxed); }
void set_conv_backend(ConvBackend b) { g_conv_backend.store(b, std::memory_order_relaxed); }

Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias, int dilation, int padding) {
    if (x.rank() != 4) throw ShapeError(str("conv2d: input must be [N,Cin,H,W], got ", shape_str(x.shape())));
    if (kernel.rank() != 4) {
        throw ShapeError(str("conv2d: kernel must be [Cout,Cin,k,k], got ", shape_str(kernel.shape())));
    }
    const ConvDims d{x.dim(0), x.dim(1), x.dim(2), x.dim(3), kernel.dim(0), kernel.dim(2), dilation, padding};
    if (kernel.dim(2) != kernel.dim(3)) {
        throw ShapeError(str("conv2d: kernel must be square, got ", shape_str(kernel.shape())));
    }
    if (d.k % 2 == 0) throw ShapeError(str("conv2d: even kernel size ", d.k, " rejected"));
    if (kernel.dim(1) != d.Cin) {
        throw ShapeError(str("conv2d: input channels ", d.Cin, " do not match kernel channels ", kernel.dim(1),
                             " (input ", shape_str(x.shape()), ", kernel ", shape_str(kernel.shape()), ")"));
    }
    if (bias.rank() != 1 || bias.dim(0) != d.Cout) {
        throw ShapeError(str("conv2d: bias must be [", d.Cout, "], got ", shape_str(bias.shape())));
    }
    if (dilation < 1) throw ShapeError(str("conv2d: dilation must be >= 1, got ", dilation));
    if (padding != dilation * static_cast<int>(d.k - 1) / 2) {
        throw ShapeError(str("conv2d: padding ", padding, " does not preserve spatial dims (need ",
                             dilation * static_cast<int>(d.k - 1) / 2, " for k=", d.k, " dil=", dilation, ")"));
    }

    Tensor out({d.N, d.Cout, d.H, d.W});
    const ConvBackend backend = conv_backend();
    if (backend == ConvBackend::Naive) {
        conv_forward_naive(x.data().data(), kernel.data().data(), bias.data().data(), out.data().data(), d);
    } else {
        conv_forward_fast(x.data().data(), kernel.data().data(), bias.data().data(), out.data().data(), d);
    }

    if (want_grad({&x, &kernel, &bias})) {
        out.set_requires_grad(true);
        Node xn = x.node(), kn = kernel.node(), bn = bias.node(), on = out.node();
        Tape::current()->record("conv2d", on, [xn, kn, bn, on, d, backend] {
            auto& go = grad_of(on);
            auto& gx = grad_of(xn);
            auto& gk = grad_of(kn);
            auto& gb = grad_of(bn);
            if (backend == ConvBackend::Naive) {
                conv_backward_naive(xn->data.data(), kn->data.data(), go.data(), gx.data(), gk.data(),
                                    gb.data(), d);
            } else {
                conv_backward_fast(xn->data.data(), kn->data.data(), go.data(), gx.data(), gk.data(),
                                   gb.data(), d);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

namespace {

struct PoolSpec {
    std::size_t window;
    std::size_t stride;
    int pad;
    bool ceil_mode;
    PoolKind kind;
};

std::size_t pool_out_dim(std::size_t in, const PoolSpec& s) {
    const std::ptrdiff_t span = static_cast<std::ptrdiff_t>(in) + 2 * s.pad - static_cast<std::ptrdiff_t>(s.window);
    if (span < 0) return 1;  // single clipped window
    if (s.ceil_mode) return static_cast<std::size_t>((span + s.stride - 1) / s.stride) + 1;
    return static_cast<std::size_t>(span / s.stride) + 1;
}

Tensor pool_general(const Tensor& x, const PoolSpec& s, const std::vector<std::size_t>* time_lengths) {
    if (x.rank() != 4) throw ShapeError(str("pool2d: input must be [N,C,H,W], got ", shape_str(x.shape())));
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (time_lengths && time_lengths->size() != N) {
        throw ShapeError(str("pool2d: ", time_lengths->size(), " lengths for batch ", N));
    }
    const std::size_t Ho = pool_out_dim(H, s), Wo = pool_out_dim(W, s);
    Tensor out({N, C, Ho, Wo});
    // For max pooling, remember the winning input index per output element.
    std::vector<std::ptrdiff_t> argmax;
    if (s.kind == PoolKind::Max) argmax.assign(N * C * Ho * Wo, -1);

    for (std::size_t n = 0; n < N; ++n) {
        const std::size_t h_limit = time_lengths ? std::min((*time_lengths)[n], H) : H;
        for (std::size_t c = 0; c < C; ++c) {
            for (std::size_t oh = 0; oh < Ho; ++oh) {
                for (std::size_t ow = 0; ow < Wo; ++ow) {
                    const std::ptrdiff_t h0 = static_cast<std::ptrdiff_t>(oh * s.stride) - s.pad;
                    const std::ptrdiff_t w0 = static_cast<std::ptrdiff_t>(ow * s.stride) - s.pad;
                    double best = -std::numeric_limits<double>::infinity();
                    std::ptrdiff_t best_idx = -1;
                    double acc = 0.0;
                    std::size_t count = 0;
                    for (std::size_t dh = 0; dh < s.window; ++dh) {
                        const std::ptrdiff_t h = h0 + static_cast<std::ptrdiff_t>(dh);
                        if (h < 0 || h >= static_cast<std::ptrdiff_t>(h_limit)) continue;
                        for (std::size_t dw = 0; dw < s.window; ++dw) {
                            const std::ptrdiff_t w = w0 + static_cast<std::ptrdiff_t>(dw);
                            if (w < 0 || w >= static_cast<std::ptrdiff_t>(W)) continue;
                            const double v = x.at4(n, c, h, w);
                            if (s.kind == PoolKind::Max) {
                                if (v > best) {
                                    best = v;
                                    best_idx = ((static_cast<std::ptrdiff_t>(n) * C + c) * H + h) * W + w;
                                }
                            } else {
                                acc += v;
                            }
                            ++count;
                        }
                    }
                    const std::size_t oi = ((n * C + c) * Ho + oh) * Wo + ow;
                    if (s.kind == PoolKind::Max) {
                        out[oi] = count > 0 ? best : 0.0;  // fully masked window
                        argmax[oi] = best_idx;
                    } else {
                        out[oi] = count > 0 ? acc / static_cast<double>(count) : 0.0;
                    }
                }
            }
        }
    }

    if (want_grad({&x})) {
        out.set_requires_grad(true);
        Node xn = x.node(), on = out.node();
        std::vector<std::size_t> lens;
        if (time_lengths) lens = *time_lengths;
        const bool has_lens = time_lengths != nullptr;
        Tape::current()->record("pool2d", on, [xn, on, s, argmax, lens, has_lens, N, C, H, W, Ho, Wo] {
            auto& go = grad_of(on);
            auto& gx = grad_of(xn);
            if (s.kind == PoolKind::Max) {
                for (std::size_t i = 0; i < go.size(); ++i) {
                    if (argmax[i] >= 0) gx[static_cast<std::size_t>(argmax[i])] += go[i];
                }
                return;
            }
            for (std::size_t n = 0; n < N; ++n) {
                const std::size_t h_limit = has_lens ? std::min(lens[n], H) : H;
                for (std::size_t c = 0; c < C; ++c) {
                    for (std::size_t oh = 0; oh < Ho; ++oh) {
                        for (std::size_t ow = 0; ow < Wo; ++ow) {
                            const std::ptrdiff_t h0 = static_cast<std::ptrdiff_t>(oh * s.stride) - s.pad;
                            const std::ptrdiff_t w0 = static_cast<std::ptrdiff_t>(ow * s.stride) - s.pad;
                            std::size_t count = 0;
                            for (std::size_t dh = 0; dh < s.window; ++dh) {
                                const std::ptrdiff_t h = h0 + static_cast<std::ptrdiff_t>(dh);
                                if (h < 0 || h >= static_cast<std::ptrdiff_t>(h_limit)) continue;
                                for (std::size_t dw = 0; dw < s.window; ++dw) {
                                    const std::ptrdiff_t w = w0 + static_cast<std::ptrdiff_t>(dw);
                                    if (w >= 0 && w < static_cast<std::ptrdiff_t>(W)) ++count;
                                }
                            }
                            if (count == 0) continue;
                            const double g =
                                go[((n * C + c) * Ho + oh) * Wo + ow] / static_cast<double>(count);
                            for (std::size_t dh = 0; dh < s.window; ++dh) {
                                const std::ptrdiff_t h = h0 + static_cast<std::ptrdiff_t>(dh);
                                if (h < 0 || h >= static_cast<std::ptrdiff_t>(h_limit)) continue;
                                for (std::size_t dw = 0; dw < s.window; ++dw) {
                                    const std::ptrdiff_t w = w0 + static_cast<std::ptrdiff_t>(dw);
                                    if (w < 0 || w >= static_cast<std::ptrdiff_t>(W)) continue;
                                    gx[((n * C + c) * H + h) * W + w] += g;
                                }
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

}  // namespace

Tensor pool2d(const Tensor& x, PoolKind kind, const std::vector<std::size_t>* time_lengths) {
    return pool_general(x, PoolSpec{3, 1, 1, false, kind}, time_lengths);
}

Tensor pool2d_vgg(const Tensor& x, const std::vector<std::size_t>* time_lengths) {
    return pool_general(x, PoolSpec{2, 2, 0, true, PoolKind::Max}, time_lengths);
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                  Tensor& running_var, Mode mode, double momentum, double eps) {
    if (x.rank() != 4) throw ShapeError(str("batch_norm: input must be [N,C,H,W], got ", shape_str(x.shape())));
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (gamma.numel() != C || beta.numel() != C || running_mean.numel() != C || running_var.numel() != C) {
        throw ShapeError(str("batch_norm: per-channel params must have ", C, " entries"));
    }
    const std::size_t m = N * H * W;
    Tensor out(x.shape());

    std::vector<double> mean(C), inv_std(C);
    if (mode == Mode::Train) {
        if (m < 2) {
            throw NumericError(str("batch_norm: train mode needs N*H*W >= 2 (got ", m,
                                   "); batch variance is undefined"));
        }
        for (std::size_t c = 0; c < C; ++c) {
            double acc = 0.0;
            for (std::size_t n = 0; n < N; ++n) {
                for (std::size_t h = 0; h < H; ++h) {
                    for (std::size_t w = 0; w < W; ++w) acc += x.at4(n, c, h, w);
                }
            }
            const double mu = acc / static_cast<double>(m);
            double var_acc = 0.0;
            for (std::size_t n = 0; n < N; ++n) {
                for (std::size_t h = 0; h < H; ++h) {
                    for (std::size_t w = 0; w < W; ++w) {
                        const double dlt = x.at4(n, c, h, w) - mu;
                        var_acc += dlt * dlt;
                    }
                }
            }
            const double var = var_acc / static_cast<double>(m);
            mean[c] = mu;
            inv_std[c] = 1.0 / std::sqrt(var + eps);
            running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * mu;
            const double var_unbiased = var_acc / static_cast<double>(m - 1);
            running_var[c] = (1.0 - momentum) * running_var[c] + momentum * var_unbiased;
        }
    } else {
        for (std::size_t c = 0; c < C; ++c) {
            mean[c] = running_mean[c];
            inv_std[c] = 1.0 / std::sqrt(running_var[c] + eps);
        }
    }

    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t c = 0; c < C; ++c) {
            const double g = gamma[c], b = beta[c], mu = mean[c], is = inv_std[c];
            for (std::size_t h = 0; h < H; ++h) {
                for (std::size_t w = 0; w < W; ++w) {
                    out.at4(n, c, h, w) = g * (x.at4(n, c, h, w) - mu) * is + b;
                }
            }
        }
    }

    if (want_grad({&x, &gamma, &beta})) {
        out.set_requires_grad(true);
        Node xn = x.node(), gn = gamma.node(), bn = beta.node(), on = out.node();
        const bool train = mode == Mode::Train;
        Tape::current()->record("batch_norm", on, [xn, gn, bn, on, mean, inv_std, train, N, C, H, W, m] {
            auto& go = grad_of(on);
            auto& gx = grad_of(xn);
            auto& gg = grad_of(gn);
            auto& gb = grad_of(bn);
            const double inv_m = 1.0 / static_cast<double>(m);
            for (std::size_t c = 0; c < C; ++c) {
                const double mu = mean[c], is = inv_std[c], gamma_c = gn->data[c];
                double sum_g = 0.0, sum_gx = 0.0;
                for (std::size_t n = 0; n < N; ++n) {
                    for (std::size_t h = 0; h < H; ++h) {
                        for (std::size_t w = 0; w < W; ++w) {
                            const std::size_t i = ((n * C + c) * H + h) * W + w;
                            const double xhat = (xn->data[i] - mu) * is;
                            sum_g += go[i];
                            sum_gx += go[i] * xhat;
                        }
                    }
                }
                gb[c] += sum_g;
                gg[c] += sum_gx;
                for (std::size_t n = 0; n < N; ++n) {
                    for (std::size_t h = 0; h < H; ++h) {
                        for (std::size_t w = 0; w < W; ++w) {
                            const std::size_t i = ((n * C + c) * H + h) * W + w;
                            if (train) {
                                const double xhat = (xn->data[i] - mu) * is;
                                gx[i] += gamma_c * is * (go[i] - sum_g * inv_m - xhat * sum_gx * inv_m);
                            } else {
                                gx[i] += gamma_c * is * go[i];
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Linear and LSTM
// ---------------------------------------------------------------------------

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    if (x.rank() < 1) throw ShapeError("linear: input must have at least one axis");
    if (weight.rank() != 2) throw ShapeError(str("linear: weight must be [Dout,Din], got ", shape_str(weight.shape())));
    const std::size_t din = x.dim(x.rank() - 1);
    const std::size_t dout = weight.dim(0);
    if (weight.dim(1) != din) {
        throw ShapeError(str("linear: inner dims differ: input ", shape_str(x.shape()), " vs weight ",
                             shape_str(weight.shape())));
    }
    if (bias.rank() != 1 || bias.dim(0) != dout) {
        throw ShapeError(str("linear: bias must be [", dout, "], got ", shape_str(bias.shape())));
    }
    const std::size_t rows = x.numel() / din;
    Shape out_shape = x.shape();
    out_shape.back() = dout;
    Tensor out(out_shape);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.data().data() + r * din;
        double* yr = out.data().data() + r * dout;
        for (std::size_t o = 0; o < dout; ++o) {
            const double* wr = weight.data().data() + o * din;
            double acc = bias[o];
            for (std::size_t i = 0; i < din; ++i) acc += wr[i] * xr[i];
            yr[o] = acc;
        }
    }
    if (want_grad({&x, &weight, &bias})) {
        out.set_requires_grad(true);
        Node xn = x.node(), wn = weight.node(), bn = bias.node(), on = out.node();
        Tape::current()->record("linear", on, [xn, wn, bn, on, rows, din, dout] {
            auto& go = grad_of(on);
            auto& gx = grad_of(xn);
            auto& gw = grad_of(wn);
            auto& gb = grad_of(bn);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* gr = go.data() + r * dout;
                const double* xr = xn->data.data() + r * din;
                double* gxr = gx.data() + r * din;
                for (std::size_t o = 0; o < dout; ++o) {
                    const double g = gr[o];
                    gb[o] += g;
                    const double* wr = wn->data.data() + o * din;
                    double* gwr = gw.data() + o * din;
                    for (std::size_t i = 0; i < din; ++i) {
                        gxr[i] += g * wr[i];
                        gwr[i] += g * xr[i];
                    }
                }
            }
        });
    }
    return out;
}

LstmParams make_lstm_params(std::size_t input_dim, std::size_t hidden, Rng& rng) {
    const double b_ih = 1.0 / std::sqrt(static_cast<double>(input_dim));
    const double b_hh = 1.0 / std::sqrt(static_cast<double>(hidden));
    LstmParams p;
    p.w_ih = Tensor::uniform({4 * hidden, input_dim}, rng, -b_ih, b_ih, true);
    p.w_hh = Tensor::uniform({4 * hidden, hidden}, rng, -b_hh, b_hh, true);
    p.b_ih = Tensor({4 * hidden}, 0.0, true);
    p.b_hh = Tensor({4 * hidden}, 0.0, true);
    return p;
}

std::pair<Tensor, Tensor> lstm_cell(const Tensor& x, const Tensor& h, const Tensor& c,
                                    const LstmParams& p) {
    if (x.rank() != 2 || h.rank() != 2 || c.rank() != 2) {
        throw ShapeError("lstm_cell: x, h, c must all be rank-2 [N, dim]");
    }
    const std::size_t hidden = h.dim(1);
    if (c.dim(1) != hidden || h.dim(0) != x.dim(0) || c.dim(0) != x.dim(0)) {
        throw ShapeError(str("lstm_cell: inconsistent state shapes x=", shape_str(x.shape()), " h=",
                             shape_str(h.shape()), " c=", shape_str(c.shape())));
    }
    if (p.w_ih.dim(0) != 4 * hidden || p.w_hh.dim(0) != 4 * hidden) {
        throw ShapeError(str("lstm_cell: weights sized for hidden ", p.w_ih.dim(0) / 4, ", state has ", hidden));
    }
    Tensor gates = add(linear(x, p.w_ih, p.b_ih), linear(h, p.w_hh, p.b_hh));
    Tensor gi = sigmoid(slice_last(gates, 0, hidden));
    Tensor gf = sigmoid(slice_last(gates, hidden, 2 * hidden));
    Tensor gg = tanh_act(slice_last(gates, 2 * hidden, 3 * hidden));
    Tensor go = sigmoid(slice_last(gates, 3 * hidden, 4 * hidden));
    Tensor c_next = add(mul(gf, c), mul(gi, gg));
    Tensor h_next = mul(go, tanh_act(c_next));
    return {h_next, c_next};
}

}  // namespace darts
