#pragma once

#include <functional>
#include <string>
#include <vector>

#include "darts/tensor.hpp"

namespace darts {

struct GradCheckEntry {
    std::string name;
    double max_rel_err = 0.0;
    std::size_t coords_checked = 0;
    bool pass = true;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> inputs;
    double eps = 0.0;
    double tol = 0.0;
    bool pass = true;
    double worst() const;
};

// Compares the tape's analytic gradients against central finite differences.
// f must be a deterministic function of the listed inputs. For tensors with
// more than max_coords entries a seeded random coordinate subset is probed.
GradCheckReport grad_check(const std::function<Tensor()>& f, const std::vector<NamedTensor>& inputs,
                           double eps = 1e-5, double tol = 1e-4, std::size_t max_coords = 24,
                           std::uint64_t seed = 20240601);

}  // namespace darts
