#pragma once

#include <functional>
#include <string>

#include "eduvqa/autodiff.hpp"

namespace eduvqa::numerics {

struct GradCheckEntry {
    std::string parameter;
    std::size_t index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_error = 0.0;
};

struct GradCheckReport {
    std::size_t checked = 0;
    double max_rel_error = 0.0;
    GradCheckEntry worst;

    bool passed(double tolerance) const { return max_rel_error < tolerance; }
};

/// Relative error |a - n| / max(|a|, |n|, floor). The floor keeps entries whose
/// true gradient is (numerically) zero from dividing by round-off.
double relative_error(double analytic, double numeric, double floor);

/// Compares `analytic` against central differences of `loss` for every scalar of
/// every parameter. `params` is perturbed in place and restored entry by entry.
GradCheckReport check_gradients(ParameterSet& params,
                                const std::function<double(const ParameterSet&)>& loss,
                                const Gradients& analytic, double step = 1e-4,
                                double floor = 1e-6);

}  // namespace eduvqa::numerics
