#pragma once

#include <vector>

#include "hmoe/tensor.hpp"

namespace hmoe {

// Adam with bias correction. State tensors are aligned one-to-one with the
// parameter list given at init; updates are single-threaded and deterministic.
struct AdamState {
    std::vector<Tensor> m;
    std::vector<Tensor> v;
    std::int64_t t = 0;
};

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

AdamState adam_init(const std::vector<Param*>& params);

// One update from the gradients currently held in the params. Throws
// NumericError naming the parameter if any gradient is non-finite; parameters
// are untouched in that case.
void adam_step(const std::vector<Param*>& params, AdamState& state, const AdamConfig& cfg);

void zero_grads(const std::vector<Param*>& params);

}  // namespace hmoe
