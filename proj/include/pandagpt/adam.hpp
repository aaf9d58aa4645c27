#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "pandagpt/tensor.hpp"

namespace pgpt {

// Named parameter collection. std::map keeps iteration order canonical
// (sorted by name), which the checkpoint format and determinism rely on.
using ParamMap = std::map<std::string, Tensor>;

int64_t param_count(const ParamMap& params);

// Adam with bias correction. Moments are stored in 32-bit like everything
// else; the update arithmetic runs in 64-bit. The effective learning rate is
// supplied per step by the caller (decay schedules live in the trainers);
// `lr` here records the base rate.
struct AdamState {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int64_t t = 0;
    ParamMap m;
    ParamMap v;
};

// One optimizer step over every entry of `params`. Parameters without a
// matching entry in `grads` see a zero gradient. Shape mismatches between a
// parameter and its gradient are rejected.
void adam_step(ParamMap& params, const ParamMap& grads, AdamState& state, double step_lr);

}  // namespace pgpt
