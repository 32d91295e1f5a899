#include "darts/ctc.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace darts {

namespace {

constexpr double kLogZero = -std::numeric_limits<double>::infinity();

inline double log_add(double a, double b) {
    if (a == kLogZero) return b;
    if (b == kLogZero) return a;
    const double m = std::max(a, b);
    return m + std::log(std::exp(a - m) + std::exp(b - m));
}

std::vector<int> extend_with_blanks(const LabelSequence& target) {
    std::vector<int> ext(2 * target.size() + 1, kCtcBlank);
    for (std::size_t i = 0; i < target.size(); ++i) ext[2 * i + 1] = target[i];
    return ext;
}

void validate_target(const Tensor& logprobs, const LabelSequence& target) {
    if (logprobs.rank() != 2) {
        throw ShapeError(str("ctc_loss: logprobs must be [T,V], got ", shape_str(logprobs.shape())));
    }
    const std::size_t V = logprobs.dim(1);
    if (V < 2) throw ShapeError("ctc_loss: vocabulary must hold blank plus at least one label");
    for (int c : target) {
        if (c <= 0 || static_cast<std::size_t>(c) >= V) {
            throw ShapeError(str("ctc_loss: label ", c, " outside [1, ", V - 1, "]"));
        }
    }
}

}  // namespace

std::size_t ctc_min_frames(const LabelSequence& target) {
    std::size_t repeats = 0;
    for (std::size_t i = 1; i < target.size(); ++i) {
        if (target[i] == target[i - 1]) ++repeats;
    }
    return target.size() + repeats;
}

Tensor ctc_loss(const Tensor& logprobs, const LabelSequence& target) {
    validate_target(logprobs, target);
    const std::size_t T = logprobs.dim(0);
    const std::size_t V = logprobs.dim(1);
    if (T < ctc_min_frames(target)) {
        throw NumericError(str("ctc_loss: target infeasible: needs at least ", ctc_min_frames(target),
                               " frames, got ", T));
    }

    const std::vector<int> ext = extend_with_blanks(target);
    const std::size_t S = ext.size();
    const double* lp = logprobs.data().data();

    // alpha[t][s] includes the emission at t; beta[t][s] covers emissions
    // strictly after t.
    std::vector<double> alpha(T * S, kLogZero);
    alpha[0 * S + 0] = lp[0 * V + ext[0]];
    if (S > 1) alpha[0 * S + 1] = lp[0 * V + ext[1]];
    for (std::size_t t = 1; t < T; ++t) {
        for (std::size_t s = 0; s < S; ++s) {
            double acc = alpha[(t - 1) * S + s];
            if (s >= 1) acc = log_add(acc, alpha[(t - 1) * S + s - 1]);
            if (s >= 2 && ext[s] != kCtcBlank && ext[s] != ext[s - 2]) {
                acc = log_add(acc, alpha[(t - 1) * S + s - 2]);
            }
            alpha[t * S + s] = acc == kLogZero ? kLogZero : acc + lp[t * V + ext[s]];
        }
    }
    double log_p = alpha[(T - 1) * S + S - 1];
    if (S > 1) log_p = log_add(log_p, alpha[(T - 1) * S + S - 2]);
    if (log_p == kLogZero) throw NumericError("ctc_loss: no feasible alignment has nonzero probability");

    Tensor loss = Tensor::scalar(-log_p);

    if (Tape::recording() && logprobs.requires_grad()) {
        loss.set_requires_grad(true);
        // Backward lattice pass, then d(-logP)/d lp[t][v] =
        //   -exp(logsumexp_{s: ext[s]=v} (alpha[t][s] + beta[t][s]) - logP).
        std::vector<double> beta(T * S, kLogZero);
        beta[(T - 1) * S + S - 1] = 0.0;
        if (S > 1) beta[(T - 1) * S + S - 2] = 0.0;
        for (std::size_t t = T - 1; t-- > 0;) {
            for (std::size_t s = 0; s < S; ++s) {
                double acc = beta[(t + 1) * S + s] == kLogZero
                                 ? kLogZero
                                 : beta[(t + 1) * S + s] + lp[(t + 1) * V + ext[s]];
                if (s + 1 < S && beta[(t + 1) * S + s + 1] != kLogZero) {
                    acc = log_add(acc, beta[(t + 1) * S + s + 1] + lp[(t + 1) * V + ext[s + 1]]);
                }
                if (s + 2 < S && ext[s + 2] != kCtcBlank && ext[s + 2] != ext[s] &&
                    beta[(t + 1) * S + s + 2] != kLogZero) {
                    acc = log_add(acc, beta[(t + 1) * S + s + 2] + lp[(t + 1) * V + ext[s + 2]]);
                }
                beta[t * S + s] = acc;
            }
        }

        auto ln = logprobs.node();
        auto on = loss.node();
        auto ext_copy = ext;
        auto alpha_copy = alpha;
        auto beta_copy = beta;
        Tape::current()->record("ctc_loss", on, [ln, on, ext_copy, alpha_copy, beta_copy, T, S, V, log_p] {
            if (ln->grad.empty()) ln->grad.assign(ln->data.size(), 0.0);
            const double g = on->grad.empty() ? 0.0 : on->grad[0];
            for (std::size_t t = 0; t < T; ++t) {
                std::vector<double> occ(V, kLogZero);
                for (std::size_t s = 0; s < S; ++s) {
                    const double a = alpha_copy[t * S + s];
                    const double b = beta_copy[t * S + s];
                    if (a == kLogZero || b == kLogZero) continue;
                    occ[ext_copy[s]] = log_add(occ[ext_copy[s]], a + b);
                }
                for (std::size_t v = 0; v < V; ++v) {
                    if (occ[v] == kLogZero) continue;
                    ln->grad[t * V + v] += g * -std::exp(occ[v] - log_p);
                }
            }
        });
    }
    return loss;
}

double ctc_bruteforce(const Tensor& logprobs, const LabelSequence& target) {
    validate_target(logprobs, target);
    const std::size_t T = logprobs.dim(0);
    const std::size_t V = logprobs.dim(1);
    if (T > 12) throw Error(str("ctc_bruteforce: V^T enumeration infeasible for T=", T));

    double total = kLogZero;
    std::vector<int> frames(T, 0);
    while (true) {
        const LabelSequence collapsed = collapse_ctc(frames);
        if (collapsed == target) {
            double lp = 0.0;
            for (std::size_t t = 0; t < T; ++t) lp += logprobs[t * V + frames[t]];
            total = log_add(total, lp);
        }
        // Odometer over V^T label strings.
        std::size_t pos = 0;
        while (pos < T) {
            if (++frames[pos] < static_cast<int>(V)) break;
            frames[pos] = 0;
            ++pos;
        }
        if (pos == T) break;
    }
    return -total;  // +inf when no alignment exists
}

LabelSequence collapse_ctc(const std::vector<int>& frame_labels) {
    LabelSequence out;
    int prev = -1;
    for (int c : frame_labels) {
        if (c != prev && c != kCtcBlank) out.push_back(c);
        prev = c;
    }
    return out;
}

LabelSequence greedy_decode(const Tensor& logprobs) {
    if (logprobs.rank() != 2) {
        throw ShapeError(str("greedy_decode: logprobs must be [T,V], got ", shape_str(logprobs.shape())));
    }
    const std::size_t T = logprobs.dim(0), V = logprobs.dim(1);
    std::vector<int> frames(T);
    for (std::size_t t = 0; t < T; ++t) {
        std::size_t best = 0;
        for (std::size_t v = 1; v < V; ++v) {
            if (logprobs[t * V + v] > logprobs[t * V + best]) best = v;
        }
        frames[t] = static_cast<int>(best);
    }
    return collapse_ctc(frames);
}

std::size_t edit_distance(const LabelSequence& a, const LabelSequence& b) {
    const std::size_t n = a.size(), m = b.size();
    std::vector<std::size_t> prev(m + 1), cur(m + 1);
    for (std::size_t j = 0; j <= m; ++j) prev[j] = j;
    for (std::size_t i = 1; i <= n; ++i) {
        cur[0] = i;
        for (std::size_t j = 1; j <= m; ++j) {
            const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
            cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
        }
        std::swap(prev, cur);
    }
    return prev[m];
}

double cer(const LabelSequence& hyp, const LabelSequence& ref) {
    if (ref.empty()) throw Error("cer: reference is empty, rate undefined");
    return 100.0 * static_cast<double>(edit_distance(hyp, ref)) / static_cast<double>(ref.size());
}

}  // namespace darts
