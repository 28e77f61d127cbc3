#include "eduvqa/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "eduvqa/errors.hpp"

namespace eduvqa::numerics {

double relative_error(double analytic, double numeric, double floor) {
    const double scale = std::max({std::abs(analytic), std::abs(numeric), floor});
    return std::abs(analytic - numeric) / scale;
}

GradCheckReport check_gradients(ParameterSet& params,
                                const std::function<double(const ParameterSet&)>& loss,
                                const Gradients& analytic, double step, double floor) {
    GradCheckReport report;
    for (const std::string& name : params.names()) {
        auto it = analytic.find(name);
        if (it == analytic.end()) throw UsageError("no analytic gradient for '" + name + "'");
        for (std::size_t i = 0; i < params.at(name).size(); ++i) {
            const double original = params.at(name)[i];
            params.at(name)[i] = original + step;
            const double up = loss(params);
            params.at(name)[i] = original - step;
            const double down = loss(params);
            params.at(name)[i] = original;
            const double numeric = (up - down) / (2.0 * step);
            const double a = it->second[i];
            const double err = relative_error(a, numeric, floor);
            ++report.checked;
            if (err > report.max_rel_error || report.checked == 1) {
                report.max_rel_error = std::max(report.max_rel_error, err);
                if (err >= report.max_rel_error) report.worst = {name, i, a, numeric, err};
            }
        }
    }
    return report;
}

}  // namespace eduvqa::numerics
