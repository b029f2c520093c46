#include "oncokit/optim.hpp"

#include <cmath>
#include <numbers>

#include "oncokit/error.hpp"

namespace oncokit {

double CosineSchedule::operator()(double epoch) const {
    if (epoch < 0.0) throw ContractError("cosine schedule: epoch must be >= 0");
    const double phase = std::fmod(epoch, period) / period;
    return floor_lr + 0.5 * (base_lr - floor_lr) * (1.0 + std::cos(std::numbers::pi * phase));
}

double cosine_lr(double epoch, const OptimState& state) { return state.schedule(epoch); }

void adamw_step(ParamStore& params, const std::map<std::string, Tensor>& grads, OptimState& state) {
    for (const auto& [name, g] : grads) {
        if (!all_finite(g)) throw NumericError("non-finite gradient for parameter " + name);
        if (g.shape() != params.get(name).shape())
            throw ShapeError("gradient for " + name + " has shape " + shape_str(g.shape()));
        const auto it = state.moments.find(name);
        if (it != state.moments.end() && it->second.m.shape() != g.shape())
            throw ContractError("optimizer state for " + name + " was built for shape " +
                                shape_str(it->second.m.shape()) + ", parameter has " + shape_str(g.shape()));
    }
    ++state.step;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (const auto& [name, g] : grads) {
        Tensor& p = params.get(name);
        auto it = state.moments.find(name);
        if (it == state.moments.end())
            it = state.moments.emplace(name, OptimState::Moments{Tensor::zeros(p.shape()), Tensor::zeros(p.shape())}).first;
        auto& [m, v] = it->second;
        const double decay = 1.0 - state.lr * state.weight_decay;
        for (std::size_t i = 0; i < p.size(); ++i) {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            p[i] = p[i] * decay - state.lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
}

}  // namespace oncokit
