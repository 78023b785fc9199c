#pragma once

#include <functional>
#include <string>
#include <vector>

#include "slim/ops.hpp"

namespace slim {

// Builds a scalar loss from leaf Vars registered for each parameter tensor.
// Must be a pure deterministic function of the parameter values.
using LossBuilder = std::function<Var(Tape&, const std::vector<Var>&)>;

// Compares tape gradients of `f` against central finite differences at every
// parameter element. Relative error uses max(|g_tape|, |g_fd|, 1e-8) as the
// denominator. h must lie in [1e-7, 1e-3].
double finite_diff_check(const LossBuilder& f, std::vector<Tensor> params, double h = 1e-5);

struct GradCheckCase {
    std::string name;
    double max_rel_err = 0.0;
};

// The named finite-difference suite behind the gradcheck CLI command: tensor
// ops, baseline layers, and the full mixture layer with fixed masks.
std::vector<GradCheckCase> run_gradcheck_suite(uint64_t seed);

}  // namespace slim
