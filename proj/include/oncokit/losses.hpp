#pragma once

#include "oncokit/autodiff.hpp"

namespace oncokit {

struct FocalConfig {
    double alpha = 1.0;
    double gamma = 2.0;
};

/// 1 - (2 sum(p y) + smooth) / (sum(p^2) + sum(y^2) + smooth). `pred` holds
/// probabilities; `target` has the same shape.
ad::Var dice_loss(ad::Var pred, const Tensor& target, double smooth = 1e-5);

/// Mean over elements of -[alpha y (1-p)^g log p + (1-y) p^g log(1-p)], with p
/// clamped to [1e-7, 1 - 1e-7].
ad::Var focal_loss(ad::Var pred, const Tensor& target, FocalConfig cfg = {});

/// dice_loss + focal_loss.
ad::Var combined_loss(ad::Var pred, const Tensor& target, FocalConfig cfg = {}, double smooth = 1e-5);

// Plain evaluations of the same formulas.
double dice_loss_value(const Tensor& pred, const Tensor& target, double smooth = 1e-5);
double focal_loss_value(const Tensor& pred, const Tensor& target, FocalConfig cfg = {});

}  // namespace oncokit
