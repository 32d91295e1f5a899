#include "darts/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "darts/rng.hpp"

namespace darts {

double GradCheckReport::worst() const {
    double w = 0.0;
    for (const auto& e : inputs) w = std::max(w, e.max_rel_err);
    return w;
}

GradCheckReport grad_check(const std::function<Tensor()>& f, const std::vector<NamedTensor>& inputs,
                           double eps, double tol, std::size_t max_coords, std::uint64_t seed) {
    GradCheckReport report;
    report.eps = eps;
    report.tol = tol;

    // Analytic pass.
    std::vector<std::vector<double>> analytic;
    {
        for (const auto& in : inputs) const_cast<Tensor&>(in.tensor).zero_grad();
        Tape tape;
        Tensor loss = f();
        backward(loss);
        for (const auto& in : inputs) analytic.push_back(in.tensor.grad());
    }

    // Numeric pass: no tape, just forward evaluations.
    Rng rng(seed);
    for (std::size_t t = 0; t < inputs.size(); ++t) {
        Tensor tensor = inputs[t].tensor;
        GradCheckEntry entry;
        entry.name = inputs[t].name;

        std::vector<std::size_t> coords;
        const std::size_t n = tensor.numel();
        if (n <= max_coords) {
            coords.resize(n);
            for (std::size_t i = 0; i < n; ++i) coords[i] = i;
        } else {
            for (std::size_t i = 0; i < max_coords; ++i) coords.push_back(rng.uniform_index(n));
            std::sort(coords.begin(), coords.end());
            coords.erase(std::unique(coords.begin(), coords.end()), coords.end());
        }

        for (std::size_t i : coords) {
            const double orig = tensor[i];
            double plus, minus;
            {
                NoGradGuard guard;
                tensor[i] = orig + eps;
                plus = f().value();
                tensor[i] = orig - eps;
                minus = f().value();
                tensor[i] = orig;
            }
            const double numeric = (plus - minus) / (2.0 * eps);
            const double a = analytic[t][i];
            const double denom = std::max({std::abs(a), std::abs(numeric), 1e-6});
            const double rel = std::abs(a - numeric) / denom;
            entry.max_rel_err = std::max(entry.max_rel_err, rel);
            ++entry.coords_checked;
        }
        entry.pass = entry.max_rel_err < tol;
        report.pass = report.pass && entry.pass;
        report.inputs.push_back(std::move(entry));
    }
    return report;
}

}  // namespace darts
