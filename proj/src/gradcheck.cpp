#include "hmoe/gradcheck.hpp"

#include <cmath>
#include <cstdio>

namespace hmoe {

GradCheckReport finite_diff_check(const LossFn& loss, const std::vector<Param*>& params,
                                  double epsilon, double tolerance) {
    if (!(epsilon >= 1e-7 && epsilon <= 1e-4)) {
        throw ConfigError("finite_diff_check epsilon must lie in [1e-7, 1e-4]");
    }
    std::vector<int> base_sig;
    double base = loss(&base_sig);
    if (!std::isfinite(base)) throw NumericError("finite_diff_check: loss is non-finite at base point");

    GradCheckReport report;
    std::vector<int> sig;
    for (Param* p : params) {
        for (std::size_t i = 0; i < p->value.data.size(); ++i) {
            double saved = p->value.data[i];

            p->value.data[i] = saved + epsilon;
            sig.clear();
            double up = loss(&sig);
            bool stable = (sig == base_sig);

            p->value.data[i] = saved - epsilon;
            sig.clear();
            double down = loss(&sig);
            stable = stable && (sig == base_sig);

            p->value.data[i] = saved;
            if (!std::isfinite(up) || !std::isfinite(down)) {
                throw NumericError("finite_diff_check: perturbed loss non-finite at " + p->name +
                                   "[" + std::to_string(i) + "]");
            }
            if (!stable) {
                ++report.skipped;
                continue;
            }

            double fd = (up - down) / (2.0 * epsilon);
            double ad = p->grad.data[i];
            double rel = std::fabs(fd - ad) / std::max({1.0, std::fabs(fd), std::fabs(ad)});
            ++report.checked;
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst_param = p->name;
                report.worst_index = static_cast<int>(i);
                report.worst_analytic = ad;
                report.worst_numeric = fd;
            }
            if (rel >= tolerance) {
                char buf[256];
                std::snprintf(buf, sizeof(buf), "%s[%zu]: analytic %.12g vs numeric %.12g (rel %.3g)",
                              p->name.c_str(), i, ad, fd, rel);
                report.failures.push_back(buf);
            }
        }
    }
    return report;
}

}  // namespace hmoe
