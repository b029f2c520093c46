#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "oncokit/params.hpp"
#include "oncokit/tensor.hpp"

namespace oncokit {

/// Warm-restart cosine schedule: starts each period at base_lr and decays to floor_lr.
struct CosineSchedule {
    double base_lr = 1e-3;
    double floor_lr = 1e-5;
    double period = 25.0;  // epochs

    double operator()(double epoch) const;
};

/// AdamW hyperparameters plus per-parameter moment accumulators.
struct OptimState {
    double lr = 1e-3;
    double weight_decay = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    CosineSchedule schedule{};
    std::int64_t step = 0;

    struct Moments {
        Tensor m;
        Tensor v;
    };
    std::map<std::string, Moments> moments;
};

/// One decoupled-weight-decay Adam update of every parameter that has a gradient.
/// Uses state.lr as the step size; callers set it from the schedule per epoch.
void adamw_step(ParamStore& params, const std::map<std::string, Tensor>& grads, OptimState& state);

/// lr for `epoch` under state.schedule.
double cosine_lr(double epoch, const OptimState& state);

}  // namespace oncokit
