#include "oncokit/losses.hpp"

#include <algorithm>
#include <cmath>

#include "oncokit/error.hpp"

namespace oncokit {

namespace {

constexpr double kClampLo = 1e-7;
constexpr double kClampHi = 1.0 - 1e-7;

void check_shapes(const char* op, const Tensor& pred, const Tensor& target) {
    if (pred.shape() != target.shape())
        throw ShapeError(std::string(op) + ": prediction " + shape_str(pred.shape()) + " vs target " +
                         shape_str(target.shape()));
}

struct DiceTerms {
    double num, den;
};

DiceTerms dice_terms(const Tensor& p, const Tensor& y, double smooth) {
    double py = 0.0, pp = 0.0, yy = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        py += p[i] * y[i];
        pp += p[i] * p[i];
        yy += y[i] * y[i];
    }
    return {2.0 * py + smooth, pp + yy + smooth};
}

double focal_element(double p, double y, const FocalConfig& cfg) {
    const double c = std::clamp(p, kClampLo, kClampHi);
    return -(cfg.alpha * y * std::pow(1.0 - c, cfg.gamma) * std::log(c) +
             (1.0 - y) * std::pow(c, cfg.gamma) * std::log(1.0 - c));
}

double focal_element_grad(double p, double y, const FocalConfig& cfg) {
    if (p < kClampLo || p > kClampHi) return 0.0;
    const double g = cfg.gamma;
    const double pos = g == 0.0 ? 1.0 / p
                                : -g * std::pow(1.0 - p, g - 1.0) * std::log(p) + std::pow(1.0 - p, g) / p;
    const double neg = g == 0.0 ? -1.0 / (1.0 - p)
                                : g * std::pow(p, g - 1.0) * std::log(1.0 - p) - std::pow(p, g) / (1.0 - p);
    return -(cfg.alpha * y * pos + (1.0 - y) * neg);
}

}  // namespace

double dice_loss_value(const Tensor& pred, const Tensor& target, double smooth) {
    check_shapes("dice_loss", pred, target);
    const auto t = dice_terms(pred, target, smooth);
    return 1.0 - t.num / t.den;
}

double focal_loss_value(const Tensor& pred, const Tensor& target, FocalConfig cfg) {
    check_shapes("focal_loss", pred, target);
    if (cfg.gamma < 0.0) throw ContractError("focal_loss: gamma must be >= 0");
    double s = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) s += focal_element(pred[i], target[i], cfg);
    return s / static_cast<double>(pred.size());
}

ad::Var dice_loss(ad::Var pred, const Tensor& target, double smooth) {
    const double value = dice_loss_value(pred.value(), target, smooth);
    return pred.tape->record("dice_loss", {pred.id}, Tensor::scalar(value),
                             [pred, target, smooth](ad::Tape& tp, const Tensor& g) {
                                 const Tensor& p = tp.value(pred.id);
                                 const auto t = dice_terms(p, target, smooth);
                                 const double scale = g[0] / (t.den * t.den);
                                 Tensor gp(p.shape());
                                 for (std::size_t i = 0; i < p.size(); ++i)
                                     gp[i] = -scale * (2.0 * target[i] * t.den - 2.0 * p[i] * t.num);
                                 tp.accumulate(pred.id, std::move(gp));
                             });
}

ad::Var focal_loss(ad::Var pred, const Tensor& target, FocalConfig cfg) {
    const double value = focal_loss_value(pred.value(), target, cfg);
    return pred.tape->record("focal_loss", {pred.id}, Tensor::scalar(value),
                             [pred, target, cfg](ad::Tape& tp, const Tensor& g) {
                                 const Tensor& p = tp.value(pred.id);
                                 const double scale = g[0] / static_cast<double>(p.size());
                                 Tensor gp(p.shape());
                                 for (std::size_t i = 0; i < p.size(); ++i)
                                     gp[i] = scale * focal_element_grad(p[i], target[i], cfg);
                                 tp.accumulate(pred.id, std::move(gp));
                             });
}

ad::Var combined_loss(ad::Var pred, const Tensor& target, FocalConfig cfg, double smooth) {
    return ad::add(dice_loss(pred, target, smooth), focal_loss(pred, target, cfg));
}

}  // namespace oncokit
