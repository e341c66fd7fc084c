#include "hmoe/optim.hpp"

#include <cmath>

namespace hmoe {

AdamState adam_init(const std::vector<Param*>& params) {
    AdamState state;
    state.m.reserve(params.size());
    state.v.reserve(params.size());
    for (Param* p : params) {
        state.m.push_back(Tensor::zeros(p->value.shape));
        state.v.push_back(Tensor::zeros(p->value.shape));
    }
    return state;
}

void adam_step(const std::vector<Param*>& params, AdamState& state, const AdamConfig& cfg) {
    if (state.m.size() != params.size()) throw ConfigError("adam state does not match param list");
    if (!(cfg.lr > 0.0)) throw ConfigError("learning rate must be positive");
    for (Param* p : params) {
        if (!p->grad.all_finite()) {
            throw NumericError("non-finite gradient in " + p->name + "; step aborted");
        }
        if (!p->grad.same_shape(p->value)) throw DimError("grad shape mismatch in " + p->name);
    }
    state.t += 1;
    double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
    double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Param* p = params[i];
        Tensor& m = state.m[i];
        Tensor& v = state.v[i];
        for (std::size_t j = 0; j < p->value.data.size(); ++j) {
            double g = p->grad.data[j];
            m.data[j] = cfg.beta1 * m.data[j] + (1.0 - cfg.beta1) * g;
            v.data[j] = cfg.beta2 * v.data[j] + (1.0 - cfg.beta2) * g * g;
            double mhat = m.data[j] / bc1;
            double vhat = v.data[j] / bc2;
            p->value.data[j] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
        }
    }
}

void zero_grads(const std::vector<Param*>& params) {
    for (Param* p : params) p->zero_grad();
}

}  // namespace hmoe
