#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "darts/ctc.hpp"
#include "darts/gradcheck.hpp"
#include "darts/ops.hpp"

using namespace darts;

namespace {

Tensor random_logprobs(std::size_t t, std::size_t v, Rng& rng, bool rg = false) {
    Tensor raw({t, v}, 0.0);
    for (double& x : raw.data()) x = rng.gaussian();
    NoGradGuard guard;
    Tensor lp = log_softmax_last(raw);
    return Tensor::from_data({t, v}, lp.data(), rg);
}

// Independent two-pass greedy reference: argmax pass, then collapse pass.
LabelSequence greedy_reference(const Tensor& lp) {
    const std::size_t T = lp.dim(0), V = lp.dim(1);
    std::vector<int> arg(T);
    for (std::size_t t = 0; t < T; ++t) {
        int best = 0;
        for (std::size_t v = 1; v < V; ++v) {
            if (lp[t * V + v] > lp[t * V + best]) best = static_cast<int>(v);
        }
        arg[t] = best;
    }
    LabelSequence out;
    for (std::size_t t = 0; t < T; ++t) {
        const bool repeat = t > 0 && arg[t] == arg[t - 1];
        if (arg[t] != 0 && !repeat) out.push_back(arg[t]);
    }
    return out;
}

// Full-matrix Levenshtein with backtrace, the classic O(nm) construction.
std::size_t edit_distance_reference(const LabelSequence& a, const LabelSequence& b) {
    const std::size_t n = a.size(), m = b.size();
    std::vector<std::vector<std::size_t>> dp(n + 1, std::vector<std::size_t>(m + 1));
    for (std::size_t i = 0; i <= n; ++i) dp[i][0] = i;
    for (std::size_t j = 0; j <= m; ++j) dp[0][j] = j;
    for (std::size_t i = 1; i <= n; ++i) {
        for (std::size_t j = 1; j <= m; ++j) {
            dp[i][j] = std::min({dp[i - 1][j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1), dp[i - 1][j] + 1,
                                 dp[i][j - 1] + 1});
        }
    }
    std::size_t i = n, j = m;
    while (i > 0 || j > 0) {
        if (i > 0 && j > 0 && dp[i][j] == dp[i - 1][j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)) {
            --i;
            --j;
        } else if (i > 0 && dp[i][j] == dp[i - 1][j] + 1) {
            --i;
        } else {
            --j;
        }
    }
    return dp[n][m];
}

}  // namespace

TEST_CASE("ctc_loss: single frame, single label") {
    Tensor raw = Tensor::from_data({1, 3}, {0.2, 1.4, -0.7});
    NoGradGuard g;
    Tensor lp = log_softmax_last(raw);
    Tensor lp2 = Tensor::from_data({1, 3}, lp.data());
    const double loss = ctc_loss(lp2, {1}).value();
    CHECK(loss == doctest::Approx(-lp[1]).epsilon(1e-14));
}

TEST_CASE("ctc_loss: two frames, one label sums the three alignments") {
    Rng rng(2);
    Tensor lp = random_logprobs(2, 3, rng);
    auto p = [&](std::size_t t, std::size_t v) { return std::exp(lp[t * 3 + v]); };
    const double expected = -std::log(p(0, 1) * p(1, 1) + p(0, 1) * p(1, 0) + p(0, 0) * p(1, 1));
    CHECK(ctc_loss(lp, {1}).value() == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("ctc_bruteforce: empty target keeps only the all-blank string") {
    Rng rng(3);
    Tensor lp = random_logprobs(2, 3, rng);
    const double expected = -(lp[0 * 3 + 0] + lp[1 * 3 + 0]);
    CHECK(ctc_bruteforce(lp, {}) == doctest::Approx(expected).epsilon(1e-12));
    CHECK(ctc_loss(lp, {}).value() == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("ctc_bruteforce: uniform rows give 3/4 mass for T=2, V=2, target [a]") {
    Tensor lp({2, 2}, std::log(0.5));
    const double loss = ctc_bruteforce(lp, {1});
    CHECK(std::exp(-loss) == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("ctc_loss equals ctc_bruteforce on every enumerable random case") {
    Rng rng(7);
    int cases = 0;
    for (int trial = 0; trial < 600; ++trial) {
        const std::size_t T = 1 + rng.uniform_index(8);
        const std::size_t V = 2 + rng.uniform_index(3);
        const std::size_t L = rng.uniform_index(4);
        LabelSequence target(L);
        for (auto& c : target) c = 1 + static_cast<int>(rng.uniform_index(V - 1));
        Tensor lp = random_logprobs(T, V, rng);
        if (T < ctc_min_frames(target)) {
            CHECK_THROWS_AS(ctc_loss(lp, target), NumericError);
            continue;
        }
        const double dp = ctc_loss(lp, target).value();
        const double bf = ctc_bruteforce(lp, target);
        CHECK(std::abs(dp - bf) < 1e-10);
        CHECK(dp >= 0.0);
        ++cases;
    }
    CHECK(cases > 400);
}

TEST_CASE("ctc_loss: infeasible target raises instead of returning +inf") {
    Rng rng(8);
    Tensor lp = random_logprobs(2, 4, rng);
    CHECK_THROWS_WITH_AS(ctc_loss(lp, {1, 2, 3}), doctest::Contains("infeasible"), NumericError);
    CHECK_THROWS_AS(ctc_loss(lp, {1, 1}), NumericError);  // repeat needs a separating blank
    CHECK_THROWS_AS(ctc_loss(lp, {0}), ShapeError);       // blank is not a valid target label
}

TEST_CASE("ctc_loss gradient matches finite differences") {
    Rng rng(9);
    for (int trial = 0; trial < 5; ++trial) {
        Tensor lp = random_logprobs(6, 4, rng, true);
        const LabelSequence target = {1, 3, 1};
        auto report = grad_check([&] { return ctc_loss(lp, target); }, {{"logprobs", lp}}, 1e-6, 1e-4, 24,
                                 100 + trial);
        CHECK(report.pass);
    }
}

TEST_CASE("ctc_loss is permutation-equivariant in the vocabulary") {
    Rng rng(10);
    Tensor lp = random_logprobs(6, 4, rng);
    const LabelSequence target = {1, 2};
    const double base = ctc_loss(lp, target).value();
    // swap labels 1 <-> 3 (blank fixed)
    Tensor perm(lp.shape());
    for (std::size_t t = 0; t < 6; ++t) {
        perm[t * 4 + 0] = lp[t * 4 + 0];
        perm[t * 4 + 1] = lp[t * 4 + 3];
        perm[t * 4 + 2] = lp[t * 4 + 2];
        perm[t * 4 + 3] = lp[t * 4 + 1];
    }
    const LabelSequence permuted_target = {3, 2};
    CHECK(ctc_loss(perm, permuted_target).value() == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("greedy_decode: collapse then delete blanks") {
    // frames argmax to [a, a, -, a]
    Tensor lp = Tensor::from_data({4, 2},
                                  {
                                      -2.0, -0.1,  // a
                                      -2.0, -0.1,  // a
                                      -0.1, -2.0,  // blank
                                      -2.0, -0.1,  // a
                                  });
    CHECK(greedy_decode(lp) == LabelSequence{1, 1});
}

TEST_CASE("greedy_decode: all blank decodes to empty") {
    Tensor lp = Tensor::from_data({3, 3}, {0, -1, -1, 0, -1, -1, 0, -1, -1});
    CHECK(greedy_decode(lp).empty());
}

TEST_CASE("greedy_decode: ties break toward the lowest index") {
    Tensor lp({2, 3}, -1.0);
    CHECK(greedy_decode(lp).empty());  // all equal, blank (index 0) wins
}

TEST_CASE("greedy_decode matches an independent reference on random lattices") {
    Rng rng(11);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t T = 1 + rng.uniform_index(12);
        const std::size_t V = 2 + rng.uniform_index(5);
        Tensor lp = random_logprobs(T, V, rng);
        CHECK(greedy_decode(lp) == greedy_reference(lp));
    }
}

TEST_CASE("a perfect one-hot lattice decodes to its target") {
    const LabelSequence target = {2, 2, 1, 3};
    // frame string with a separating blank at the repeat
    const std::vector<int> frames = {2, 0, 2, 1, 3};
    Tensor lp({frames.size(), 4}, std::log(1e-6));
    for (std::size_t t = 0; t < frames.size(); ++t) lp[t * 4 + frames[t]] = std::log(1.0 - 3e-6);
    CHECK(greedy_decode(lp) == target);
}

TEST_CASE("cer: trivial values and the empty-reference error") {
    CHECK(cer({1, 2, 3}, {1, 2, 3}) == 0.0);
    CHECK(cer({}, {1, 2, 3, 4}) == 100.0);
    CHECK(cer({1, 2}, {1, 3}) == 50.0);
    CHECK_THROWS_AS(cer({1}, {}), Error);
}

TEST_CASE("edit_distance matches the full-matrix DP oracle on random pairs") {
    Rng rng(12);
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t n = rng.uniform_index(10);
        const std::size_t m = rng.uniform_index(10);
        LabelSequence a(n), b(m);
        for (auto& c : a) c = 1 + static_cast<int>(rng.uniform_index(4));
        for (auto& c : b) c = 1 + static_cast<int>(rng.uniform_index(4));
        CHECK(edit_distance(a, b) == edit_distance_reference(a, b));
    }
}

TEST_CASE("ctc_min_frames counts labels plus separating blanks") {
    CHECK(ctc_min_frames({}) == 0);
    CHECK(ctc_min_frames({1, 2, 3}) == 3);
    CHECK(ctc_min_frames({1, 1}) == 3);
    CHECK(ctc_min_frames({2, 2, 2}) == 5);
}
