#pragma once

// Central finite-difference oracle. Independent of the tape: it only ever
// evaluates the forward function on perturbed copies of the inputs.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "oncokit/autodiff.hpp"

namespace oncokit::testing {

/// Builds a scalar loss from leaf Vars on the supplied tape.
using LossFn = std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)>;

struct GradCheckResult {
    double max_rel_err = 0.0;
    double max_abs_err = 0.0;
};

inline double eval_loss(const LossFn& f, const std::vector<Tensor>& inputs) {
    ad::Tape tape;
    std::vector<ad::Var> vars;
    for (const auto& t : inputs) vars.push_back(tape.leaf(t, false));
    return f(tape, vars).value().item();
}

/// Compares tape gradients with central differences. The relative error of
/// each input is norm-wise, ||analytic - numeric|| / max(||analytic||, ||numeric||),
/// and the result reports the worst input.
inline GradCheckResult gradcheck(const LossFn& f, std::vector<Tensor> inputs, double h = 1e-5) {
    ad::Tape tape;
    std::vector<ad::Var> vars;
    for (const auto& t : inputs) vars.push_back(tape.leaf(t, true));
    tape.backward(f(tape, vars));
    GradCheckResult r;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        const Tensor analytic = tape.grad(vars[k]);
        double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
        for (std::size_t i = 0; i < inputs[k].size(); ++i) {
            const double orig = inputs[k][i];
            inputs[k][i] = orig + h;
            const double fp = eval_loss(f, inputs);
            inputs[k][i] = orig - h;
            const double fm = eval_loss(f, inputs);
            inputs[k][i] = orig;
            const double numeric = (fp - fm) / (2.0 * h);
            const double d = analytic[i] - numeric;
            diff2 += d * d;
            a2 += analytic[i] * analytic[i];
            n2 += numeric * numeric;
            r.max_abs_err = std::max(r.max_abs_err, std::abs(d));
        }
        const double denom = std::max({std::sqrt(a2), std::sqrt(n2), 1e-300});
        if (a2 + n2 > 0.0) r.max_rel_err = std::max(r.max_rel_err, std::sqrt(diff2) / denom);
    }
    return r;
}

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    std::uniform_real_distribution<double> ud(lo, hi);
    for (auto& v : t.data()) v = ud(rng);
    return t;
}

}  // namespace oncokit::testing
