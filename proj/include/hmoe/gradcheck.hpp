#pragma once

#include <functional>
#include <string>
#include <vector>

#include "hmoe/tensor.hpp"

namespace hmoe {

// Loss evaluation used by finite differences. The callable must rebuild the
// forward pass from scratch on the current parameter values and, when the
// signature pointer is non-null, fill it with every discrete selection made
// (top-k indices, argmax statistics) so stability can be verified.
using LossFn = std::function<double(std::vector<int>* signature_out)>;

struct GradCheckReport {
    double max_rel_err = 0.0;
    int checked = 0;
    int skipped = 0;  // selection-unstable coordinates
    std::string worst_param;
    int worst_index = -1;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::vector<std::string> failures;  // coordinates above tolerance

    bool passed(double tolerance) const { return max_rel_err < tolerance; }
};

// Central-difference check of every coordinate of every param against the
// analytic gradient already stored in Param::grad. Relative error uses
// |fd - ad| / max(1, |fd|, |ad|) so zero-gradient coordinates compare
// absolutely. Coordinates whose +/-epsilon evaluations change any recorded
// selection are skipped, not failed.
GradCheckReport finite_diff_check(const LossFn& loss, const std::vector<Param*>& params,
                                  double epsilon, double tolerance);

}  // namespace hmoe
