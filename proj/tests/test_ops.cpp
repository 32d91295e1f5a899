#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "darts/gradcheck.hpp"
#include "darts/ops.hpp"

using namespace darts;

namespace {

Tensor randn(Shape shape, Rng& rng, double scale = 1.0, bool rg = true) {
    Tensor t(std::move(shape), 0.0, rg);
    for (double& v : t.data()) v = scale * rng.gaussian();
    return t;
}

// Independent direct-summation convolution, written against the definition
// rather than sharing any code with conv2d.
Tensor conv_reference(const Tensor& x, const Tensor& k, const Tensor& b, int dil, int pad) {
    const std::size_t N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t Cout = k.dim(0), K = k.dim(2);
    Tensor y({N, Cout, H, W});
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t co = 0; co < Cout; ++co) {
            for (std::size_t oh = 0; oh < H; ++oh) {
                for (std::size_t ow = 0; ow < W; ++ow) {
                    double acc = b[co];
                    for (std::size_t ci = 0; ci < Cin; ++ci) {
                        for (std::size_t kh = 0; kh < K; ++kh) {
                            for (std::size_t kw = 0; kw < K; ++kw) {
                                const long ih = static_cast<long>(oh) - pad + static_cast<long>(kh) * dil;
                                const long iw = static_cast<long>(ow) - pad + static_cast<long>(kw) * dil;
                                if (ih < 0 || ih >= static_cast<long>(H) || iw < 0 ||
                                    iw >= static_cast<long>(W)) {
                                    continue;
                                }
                                acc += x.at4(n, ci, ih, iw) *
                                       k[((co * Cin + ci) * K + kh) * K + kw];
                            }
                        }
                    }
                    y.at4(n, co, oh, ow) = acc;
                }
            }
        }
    }
    return y;
}

// Nested-loop pooling oracle (3x3, stride 1, pad 1, exclude-pad average).
Tensor pool_reference(const Tensor& x, PoolKind kind) {
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor y(x.shape());
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t c = 0; c < C; ++c) {
            for (std::size_t h = 0; h < H; ++h) {
                for (std::size_t w = 0; w < W; ++w) {
                    double best = -1e300, acc = 0.0;
                    int cnt = 0;
                    for (long dh = -1; dh <= 1; ++dh) {
                        for (long dw = -1; dw <= 1; ++dw) {
                            const long hh = static_cast<long>(h) + dh;
                            const long ww = static_cast<long>(w) + dw;
                            if (hh < 0 || hh >= static_cast<long>(H) || ww < 0 ||
                                ww >= static_cast<long>(W)) {
                                continue;
                            }
                            const double v = x.at4(n, c, hh, ww);
                            best = std::max(best, v);
                            acc += v;
                            ++cnt;
                        }
                    }
                    y.at4(n, c, h, w) = kind == PoolKind::Max ? best : acc / cnt;
                }
            }
        }
    }
    return y;
}

}  // namespace

TEST_CASE("conv2d: 1x1 identity kernel reproduces the input exactly") {
    Rng rng(1);
    Tensor x = randn({2, 1, 4, 5}, rng);
    Tensor k = Tensor::from_data({1, 1, 1, 1}, {1.0}, true);
    Tensor b({1}, 0.0, true);
    Tensor y = conv2d(x, k, b, 1, 0);
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y[i] == x[i]);
}

TEST_CASE("conv2d: all-ones 3x3 on all-ones 3x3 input counts the overlap") {
    Tensor x({1, 1, 3, 3}, 1.0);
    Tensor k({1, 1, 3, 3}, 1.0, true);
    Tensor b({1}, 0.0, true);
    Tensor y = conv2d(x, k, b, 1, 1);
    CHECK(y.at4(0, 0, 1, 1) == 9.0);
    CHECK(y.at4(0, 0, 0, 0) == 4.0);
    CHECK(y.at4(0, 0, 0, 2) == 4.0);
    CHECK(y.at4(0, 0, 2, 0) == 4.0);
    CHECK(y.at4(0, 0, 2, 2) == 4.0);
    CHECK(y.at4(0, 0, 0, 1) == 6.0);
}

TEST_CASE("conv2d: dilated kernel on one-hot inputs matches the direct-summation oracle") {
    Rng rng(7);
    Tensor k = randn({2, 1, 3, 3}, rng, 0.7);
    Tensor b = randn({2}, rng, 0.1);
    for (int hot = 0; hot < 49; hot += 5) {
        Tensor x({1, 1, 7, 7}, 0.0);
        x.data()[hot] = 1.0;
        Tensor y = conv2d(x, k, b, 2, 2);
        Tensor ref = conv_reference(x, k, b, 2, 2);
        for (std::size_t i = 0; i < y.numel(); ++i) {
            CHECK(y[i] == doctest::Approx(ref[i]).epsilon(1e-14));
        }
    }
}

TEST_CASE("conv2d: random cases match the oracle for every kernel/dilation combo") {
    Rng rng(42);
    for (const auto& [k, dil] : std::vector<std::pair<int, int>>{{1, 1}, {3, 1}, {3, 2}, {5, 1}, {5, 2}}) {
        Tensor x = randn({2, 3, 6, 5}, rng);
        Tensor kern = randn({2, 3, static_cast<std::size_t>(k), static_cast<std::size_t>(k)}, rng, 0.5);
        Tensor b = randn({2}, rng, 0.2);
        const int pad = dil * (k - 1) / 2;
        Tensor y = conv2d(x, kern, b, dil, pad);
        Tensor ref = conv_reference(x, kern, b, dil, pad);
        CHECK(y.dim(2) == x.dim(2));
        CHECK(y.dim(3) == x.dim(3));
        double max_err = 0.0;
        for (std::size_t i = 0; i < y.numel(); ++i) max_err = std::max(max_err, std::abs(y[i] - ref[i]));
        CHECK(max_err < 1e-12);
    }
}

TEST_CASE("conv2d: naive and im2col paths are bitwise identical, forward and backward") {
    Rng rng(11);
    for (int trial = 0; trial < 6; ++trial) {
        Tensor x = randn({2, 3, 5, 7}, rng);
        Tensor k = randn({4, 3, 3, 3}, rng, 0.5);
        Tensor b = randn({4}, rng, 0.2);
        const int dil = trial % 2 + 1;
        const int pad = dil;

        auto run = [&](ConvBackend backend) {
            set_conv_backend(backend);
            x.zero_grad();
            k.zero_grad();
            b.zero_grad();
            Tape tape;
            Tensor y = conv2d(x, k, b, dil, pad);
            Tensor loss = sum_all(mul(y, y));
            backward(loss);
            return std::make_tuple(y.data(), x.grad(), k.grad(), b.grad());
        };
        auto [y_n, gx_n, gk_n, gb_n] = run(ConvBackend::Naive);
        auto [y_f, gx_f, gk_f, gb_f] = run(ConvBackend::Im2col);
        set_conv_backend(ConvBackend::Im2col);

        CHECK(y_n == y_f);    // bitwise
        CHECK(gx_n == gx_f);
        CHECK(gk_n == gk_f);
        CHECK(gb_n == gb_f);
    }
}

TEST_CASE("conv2d: results identical under internal parallelism") {
    Rng rng(13);
    Tensor x = randn({4, 2, 6, 6}, rng);
    Tensor k = randn({3, 2, 3, 3}, rng, 0.5);
    Tensor b = randn({3}, rng, 0.1);
    Tensor serial = conv2d(x, k, b, 1, 1);
    set_max_threads(3);
    Tensor parallel = conv2d(x, k, b, 1, 1);
    set_max_threads(1);
    CHECK(serial.data() == parallel.data());
}

TEST_CASE("conv2d: rejects channel mismatch and even kernels with diagnostics") {
    Tensor x({1, 2, 4, 4});
    Tensor k({1, 3, 3, 3}, 0.0, true);
    Tensor b({1}, 0.0, true);
    CHECK_THROWS_WITH_AS(conv2d(x, k, b, 1, 1), doctest::Contains("channels"), ShapeError);
    Tensor k_even({1, 2, 4, 4}, 0.0, true);
    CHECK_THROWS_AS(conv2d(x, k_even, b, 1, 1), ShapeError);
    Tensor k_ok({1, 2, 3, 3}, 0.0, true);
    CHECK_THROWS_AS(conv2d(x, k_ok, b, 1, 2), ShapeError);  // padding breaks preservation
}

TEST_CASE("pool2d: average of a constant input is the constant (exclude-pad)") {
    Tensor x({1, 1, 4, 6}, 2.5);
    Tensor y = pool2d(x, PoolKind::Avg);
    for (std::size_t i = 0; i < y.numel(); ++i) CHECK(y[i] == doctest::Approx(2.5).epsilon(1e-15));
}

TEST_CASE("pool2d: max of one-hot input lights the 3x3 neighborhood") {
    Tensor x({1, 1, 5, 5}, 0.0);
    x.at4(0, 0, 2, 2) = 1.0;
    Tensor y = pool2d(x, PoolKind::Max);
    for (std::size_t h = 0; h < 5; ++h) {
        for (std::size_t w = 0; w < 5; ++w) {
            const bool inside = h >= 1 && h <= 3 && w >= 1 && w <= 3;
            CHECK(y.at4(0, 0, h, w) == (inside ? 1.0 : 0.0));
        }
    }
}

TEST_CASE("pool2d: random 5x5 inputs match the nested-loop oracle for both kinds") {
    Rng rng(21);
    for (int trial = 0; trial < 10; ++trial) {
        Tensor x = randn({1, 2, 5, 5}, rng);
        for (PoolKind kind : {PoolKind::Max, PoolKind::Avg}) {
            Tensor y = pool2d(x, kind);
            Tensor ref = pool_reference(x, kind);
            CHECK(y.shape() == x.shape());
            for (std::size_t i = 0; i < y.numel(); ++i) {
                CHECK(y[i] == doctest::Approx(ref[i]).epsilon(1e-14));
            }
        }
    }
}

TEST_CASE("pool2d_vgg halves odd and even time axes with ceil") {
    Tensor x({1, 1, 5, 7}, 1.0);
    Tensor y = pool2d_vgg(x);
    CHECK(y.dim(2) == 3);
    CHECK(y.dim(3) == 4);
}

TEST_CASE("activations: trivial values") {
    Tensor x = Tensor::from_data({3}, {-1.0, 0.0, 2.0});
    Tensor r = relu(x);
    CHECK(r[0] == 0.0);
    CHECK(r[1] == 0.0);
    CHECK(r[2] == 2.0);
    CHECK(sigmoid(Tensor::scalar(0.0))[0] == 0.5);
    CHECK(tanh_act(Tensor::scalar(0.0))[0] == 0.0);
}

TEST_CASE("activations: gradients match finite differences tightly") {
    Rng rng(5);
    for (Act kind : {Act::Relu, Act::Sigmoid, Act::Tanh}) {
        Tensor x = randn({30}, rng);
        if (kind == Act::Relu) {
            for (double& v : x.data()) {
                if (std::abs(v) < 1e-3) v = 0.3;  // keep clear of the kink
            }
        }
        auto report = grad_check([&] { return sum_all(mul(activation(kind, x), activation(kind, x))); },
                                 {{"x", x}}, 1e-5, 1e-6);
        CHECK(report.pass);
    }
}

TEST_CASE("batch_norm: normalizes to zero mean unit variance in train mode") {
    Rng rng(31);
    Tensor x = randn({4, 3, 5, 5}, rng, 2.0);
    for (double& v : x.data()) v += 1.7;
    Tensor gamma({3}, 1.0, true), beta({3}, 0.0, true);
    Tensor mean({3}, 0.0), var({3}, 1.0);
    Tensor y = batch_norm(x, gamma, beta, mean, var, Mode::Train);
    const std::size_t m = 4 * 5 * 5;
    for (std::size_t c = 0; c < 3; ++c) {
        double mu = 0.0, ss = 0.0;
        for (std::size_t n = 0; n < 4; ++n) {
            for (std::size_t h = 0; h < 5; ++h) {
                for (std::size_t w = 0; w < 5; ++w) mu += y.at4(n, c, h, w);
            }
        }
        mu /= m;
        for (std::size_t n = 0; n < 4; ++n) {
            for (std::size_t h = 0; h < 5; ++h) {
                for (std::size_t w = 0; w < 5; ++w) {
                    const double d = y.at4(n, c, h, w) - mu;
                    ss += d * d;
                }
            }
        }
        CHECK(std::abs(mu) < 1e-12);
        CHECK(ss / m == doctest::Approx(1.0).epsilon(1e-4));  // eps pulls variance slightly below 1
    }
}

TEST_CASE("batch_norm: affine rescale lands on beta/gamma moments") {
    Rng rng(32);
    Tensor x = randn({4, 2, 4, 4}, rng);
    Tensor gamma({2}, 2.0, true), beta({2}, 3.0, true);
    Tensor mean({2}, 0.0), var({2}, 1.0);
    Tensor y = batch_norm(x, gamma, beta, mean, var, Mode::Train);
    const std::size_t m = 4 * 4 * 4;
    for (std::size_t c = 0; c < 2; ++c) {
        double mu = 0.0;
        for (std::size_t n = 0; n < 4; ++n) {
            for (std::size_t h = 0; h < 4; ++h) {
                for (std::size_t w = 0; w < 4; ++w) mu += y.at4(n, c, h, w);
            }
        }
        mu /= m;
        double ss = 0.0;
        for (std::size_t n = 0; n < 4; ++n) {
            for (std::size_t h = 0; h < 4; ++h) {
                for (std::size_t w = 0; w < 4; ++w) {
                    const double d = y.at4(n, c, h, w) - mu;
                    ss += d * d;
                }
            }
        }
        CHECK(mu == doctest::Approx(3.0).epsilon(1e-10));
        CHECK(std::sqrt(ss / m) == doctest::Approx(2.0).epsilon(1e-4));
    }
}

TEST_CASE("batch_norm: full backward matches finite differences on 2x3x4x4") {
    // The probe loss is a generic linear functional: a squared-norm loss is
    // almost invariant to the input (normalization), leaving only O(eps)
    // gradients that finite differences cannot resolve.
    Rng rng(33);
    Tensor x = randn({2, 3, 4, 4}, rng);
    Tensor gamma = randn({3}, rng, 0.3);
    for (double& g : gamma.data()) g += 1.0;
    Tensor beta = randn({3}, rng, 0.3);
    Tensor probe = randn({2, 3, 4, 4}, rng, 1.0, false);
    auto report = grad_check(
        [&] {
            Tensor mean({3}, 0.0), var({3}, 1.0);
            Tensor y = batch_norm(x, gamma, beta, mean, var, Mode::Train);
            return sum_all(mul(y, probe));
        },
        {{"x", x}, {"gamma", gamma}, {"beta", beta}}, 1e-5, 1e-4, 30);
    CHECK(report.pass);
    CHECK(report.worst() < 1e-4);
}

TEST_CASE("batch_norm: train mode rejects a single spatial-batch element") {
    Tensor x({1, 3, 1, 1}, 1.0);
    Tensor gamma({3}, 1.0, true), beta({3}, 0.0, true);
    Tensor mean({3}, 0.0), var({3}, 1.0);
    CHECK_THROWS_AS(batch_norm(x, gamma, beta, mean, var, Mode::Train), NumericError);
    CHECK_NOTHROW(batch_norm(x, gamma, beta, mean, var, Mode::Eval));
}

TEST_CASE("linear: identity weight and zero bias pass the input through") {
    Tensor x = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor w({3, 3}, 0.0, true);
    for (int i = 0; i < 3; ++i) w[i * 3 + i] = 1.0;
    Tensor b({3}, 0.0, true);
    Tensor y = linear(x, w, b);
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y[i] == x[i]);
}

TEST_CASE("linear: zero weight broadcasts the bias") {
    Tensor x = Tensor::from_data({2, 2, 3}, std::vector<double>(12, 7.0));
    Tensor w({4, 3}, 0.0, true);
    Tensor b = Tensor::from_data({4}, {1, 2, 3, 4}, true);
    Tensor y = linear(x, w, b);
    for (std::size_t r = 0; r < 4; ++r) {
        for (std::size_t o = 0; o < 4; ++o) CHECK(y[r * 4 + o] == b[o]);
    }
}

TEST_CASE("linear: gradient check and inner-dimension mismatch") {
    Rng rng(41);
    Tensor x = randn({3, 5}, rng);
    Tensor w = randn({4, 5}, rng, 0.5);
    Tensor b = randn({4}, rng, 0.1);
    auto report = grad_check([&] { return sum_all(mul(linear(x, w, b), linear(x, w, b))); },
                             {{"x", x}, {"w", w}, {"b", b}});
    CHECK(report.pass);
    Tensor bad({4, 6}, 0.0, true);
    CHECK_THROWS_AS(linear(x, bad, b), ShapeError);
}

TEST_CASE("softmax: zero vector of length 7 is uniform") {
    Tensor x({7}, 0.0);
    Tensor y = softmax_last(x);
    for (std::size_t i = 0; i < 7; ++i) CHECK(y[i] == doctest::Approx(1.0 / 7.0).epsilon(1e-15));
}

TEST_CASE("softmax: shift invariance after max subtraction") {
    // Dyadic inputs and shift, so x + c is exact and max subtraction cancels
    // the shift bit-for-bit.
    Rng rng(51);
    Tensor x({5, 9}, 0.0);
    for (double& v : x.data()) v = std::floor(rng.uniform(-3.0, 3.0) * 1048576.0) / 1048576.0;
    const double c = 123.5;
    Tensor shifted(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) shifted[i] = x[i] + c;
    Tensor a = softmax_last(x);
    Tensor b = softmax_last(shifted);
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(std::abs(a[i] - b[i]) <= 1e-15);
}

TEST_CASE("softmax: [1,2,3] matches direct exp normalization") {
    Tensor x = Tensor::from_data({3}, {1.0, 2.0, 3.0});
    Tensor y = softmax_last(x);
    const double denom = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
    for (int i = 0; i < 3; ++i) {
        CHECK(std::abs(y[i] - std::exp(1.0 + i) / denom) < 1e-12);
    }
}

TEST_CASE("softmax: outputs strictly positive and summing to one") {
    Rng rng(52);
    Tensor x = randn({20, 7}, rng, 10.0);
    Tensor y = softmax_last(x);
    for (std::size_t r = 0; r < 20; ++r) {
        double sum = 0.0;
        for (std::size_t i = 0; i < 7; ++i) {
            CHECK(y[r * 7 + i] > 0.0);
            sum += y[r * 7 + i];
        }
        CHECK(std::abs(sum - 1.0) <= 1e-12);
    }
}

TEST_CASE("log_softmax rows exp-sum to one and match softmax logs") {
    Rng rng(53);
    Tensor x = randn({4, 6}, rng, 2.0);
    Tensor ls = log_softmax_last(x);
    Tensor s = softmax_last(x);
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(std::exp(ls[i]) == doctest::Approx(s[i]).epsilon(1e-12));
}

TEST_CASE("concat: single input is identity, channel blocks keep order") {
    Rng rng(61);
    Tensor a = randn({2, 32, 3, 3}, rng);
    Tensor b = randn({2, 32, 3, 3}, rng);
    Tensor only = concat_channels({a});
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(only[i] == a[i]);
    Tensor both = concat_channels({a, b});
    CHECK(both.dim(1) == 64);
    CHECK(both.at4(1, 0, 2, 2) == a.at4(1, 0, 2, 2));
    CHECK(both.at4(1, 32, 1, 1) == b.at4(1, 0, 1, 1));
    Tensor bad({2, 32, 4, 3}, 0.0);
    CHECK_THROWS_AS(concat_channels({a, bad}), ShapeError);
}

TEST_CASE("concat: gradient routes to the right source block") {
    Rng rng(62);
    Tensor a = randn({1, 2, 2, 2}, rng);
    Tensor b = randn({1, 3, 2, 2}, rng);
    auto report = grad_check(
        [&] {
            Tensor y = concat_channels({a, b});
            return sum_all(mul(y, y));
        },
        {{"a", a}, {"b", b}});
    CHECK(report.pass);
}

TEST_CASE("lstm_cell: zero weights and zero state give zero outputs") {
    LstmParams p;
    p.w_ih = Tensor({12, 4}, 0.0, true);
    p.w_hh = Tensor({12, 3}, 0.0, true);
    p.b_ih = Tensor({12}, 0.0, true);
    p.b_hh = Tensor({12}, 0.0, true);
    Tensor x({2, 4}, 1.0);
    Tensor h({2, 3}, 0.0), c({2, 3}, 0.0);
    auto [h2, c2] = lstm_cell(x, h, c, p);
    for (std::size_t i = 0; i < h2.numel(); ++i) {
        CHECK(h2[i] == 0.0);
        CHECK(c2[i] == 0.0);
    }
}

TEST_CASE("lstm_cell: saturated forget gate with closed input gate carries the cell state") {
    Rng rng(71);
    LstmParams p = make_lstm_params(4, 3, rng);
    for (double& v : p.w_ih.data()) v = 0.0;
    for (double& v : p.w_hh.data()) v = 0.0;
    for (std::size_t i = 0; i < 3; ++i) p.b_ih[i] = -40.0;      // input gate shut
    for (std::size_t i = 3; i < 6; ++i) p.b_ih[i] = 40.0;       // forget gate open
    Tensor x({1, 4}, 0.5);
    Tensor h({1, 3}, 0.0);
    Tensor c = Tensor::from_data({1, 3}, {0.3, -0.7, 1.1});
    auto [h2, c2] = lstm_cell(x, h, c, p);
    for (std::size_t i = 0; i < 3; ++i) CHECK(c2[i] == doctest::Approx(c[i]).epsilon(1e-12));
}

TEST_CASE("lstm_cell: gradients through three steps match finite differences") {
    Rng rng(72);
    LstmParams p = make_lstm_params(3, 2, rng);
    Tensor x0 = randn({2, 3}, rng, 0.5);
    Tensor x1 = randn({2, 3}, rng, 0.5);
    Tensor x2 = randn({2, 3}, rng, 0.5);
    auto report = grad_check(
        [&] {
            Tensor h({2, 2}, 0.0), c({2, 2}, 0.0);
            for (const Tensor* x : {&x0, &x1, &x2}) {
                auto [h2, c2] = lstm_cell(*x, h, c, p);
                h = h2;
                c = c2;
            }
            return sum_all(mul(h, h));
        },
        {{"x0", x0}, {"x1", x1}, {"x2", x2}, {"w_ih", p.w_ih}, {"w_hh", p.w_hh}, {"b_ih", p.b_ih}},
        1e-5, 1e-4, 20);
    CHECK(report.pass);
    CHECK(report.worst() < 1e-4);
}

TEST_CASE("composite conv->bn->relu->pool chain passes the finite-difference check") {
    Rng rng(81);
    Tensor x = randn({2, 2, 5, 5}, rng);
    Tensor k = randn({2, 2, 3, 3}, rng, 0.4);
    Tensor b = randn({2}, rng, 0.1);
    Tensor gamma({2}, 1.0, true), beta({2}, 0.0, true);
    Tensor probe = randn({2, 2, 5, 5}, rng, 1.0, false);
    auto report = grad_check(
        [&] {
            Tensor mean({2}, 0.0), var({2}, 1.0);
            Tensor y = conv2d(x, k, b, 1, 1);
            y = batch_norm(y, gamma, beta, mean, var, Mode::Train);
            y = relu(y);
            y = pool2d(y, PoolKind::Avg);
            return sum_all(mul(y, probe));
        },
        {{"x", x}, {"kernel", k}, {"bias", b}, {"gamma", gamma}, {"beta", beta}}, 1e-5, 1e-4, 20);
    CHECK(report.pass);
}

TEST_CASE("grad_check flags a deliberately corrupted backward rule") {
    Tensor x = Tensor::from_data({4}, {0.5, -1.0, 2.0, 0.25}, true);
    auto sabotaged_square = [](const Tensor& in) {
        Tensor out(in.shape());
        for (std::size_t i = 0; i < in.numel(); ++i) out[i] = in[i] * in[i];
        if (Tape::recording() && in.requires_grad()) {
            out.set_requires_grad(true);
            auto xn = in.node();
            auto on = out.node();
            Tape::current()->record("bad_square", on, [xn, on] {
                for (std::size_t i = 0; i < xn->data.size(); ++i) {
                    if (xn->grad.empty()) xn->grad.assign(xn->data.size(), 0.0);
                    xn->grad[i] += on->grad[i] * xn->data[i];  // missing factor 2
                }
            });
        }
        return out;
    };
    auto report = grad_check([&] { return sum_all(sabotaged_square(x)); }, {{"x", x}});
    CHECK(!report.pass);
}

TEST_CASE("mask_time zeroes trailing frames and passes gradient only to valid ones") {
    Rng rng(91);
    Tensor x = randn({2, 1, 4, 2}, rng);
    std::vector<std::size_t> lens = {4, 2};
    Tensor y = mask_time(x, lens);
    CHECK(y.at4(1, 0, 2, 0) == 0.0);
    CHECK(y.at4(1, 0, 3, 1) == 0.0);
    CHECK(y.at4(1, 0, 1, 1) == x.at4(1, 0, 1, 1));
    Tape tape;
    Tensor z = mask_time(x, lens);
    backward(sum_all(z));
    CHECK(x.grad()[x.numel() - 1] == 0.0);
    CHECK(x.grad()[0] == 1.0);
}
