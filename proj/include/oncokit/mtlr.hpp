#pragma once

#include <cstdint>
#include <vector>

#include <nlohmann/json.hpp>

#include "oncokit/autodiff.hpp"
#include "oncokit/ehr.hpp"
#include "oncokit/params.hpp"

namespace oncokit {

// Time axis: boundaries 0 = tau_0 < tau_1 < ... < tau_m split time into m + 1
// intervals; interval k (1-based) is (tau_{k-1}, tau_k], interval m + 1 is
// (tau_m, inf). An event in interval k corresponds to the label sequence
// y_j = 1[j >= k], j = 1..m, with score f(k) = sum_{j >= k} a_j where
// a_j = theta_j . x + b_j.

/// Default grid: m = ceil(sqrt(#events)) boundaries at event-time quantiles
/// (the last one is the largest event time); duplicates are dropped.
std::vector<double> default_time_grid(const std::vector<double>& times, const std::vector<int>& events,
                                      std::size_t m = 0);

/// 1-based interval of `t` on grid `tau` (tau_1..tau_m): m + 1 past the end.
std::size_t time_interval(const std::vector<double>& tau, double t);

/// Summed negative log-likelihood over subjects for scores a[n, m]. Uncensored
/// subjects score their own sequence; censored subjects score the log-sum of
/// all sequences with event interval >= their censoring interval. Intervals are
/// 1..m+1.
ad::Var mtlr_nll(ad::Var scores, const std::vector<std::size_t>& intervals, const std::vector<int>& events);

/// Interval probabilities [n, m+1] for scores a[n, m].
Tensor mtlr_interval_probs(const Tensor& scores);

struct MtlrConfig {
    std::size_t m = 0;            // grid size; 0 = ceil(sqrt(#events))
    double C = 1.0;               // smoothness penalty C/2 * sum ||theta_j||^2
    std::vector<std::size_t> hidden;  // N-MTLR hidden widths; empty = linear MTLR
    double lr = 0.05;
    std::size_t max_iter = 2000;
    double grad_tol = 1e-6;
    std::uint64_t seed = 0;
};

struct MtlrModel {
    std::vector<double> grid;  // tau_1..tau_m
    std::vector<std::size_t> hidden;
    std::size_t n_features = 0;
    double C = 1.0;
    ParamStore params;  // "mlp.<l>.w/.b", "theta" [p', m], "bias" [m]
    std::vector<double> loss_history;
    std::size_t iterations = 0;

    std::size_t m() const noexcept { return grid.size(); }

    nlohmann::json to_json() const;
    static MtlrModel from_json(const nlohmann::json& j);
};

/// Fresh model with zero MTLR head and randomly initialized hidden layers.
MtlrModel mtlr_init(std::size_t n_features, std::vector<double> grid, const MtlrConfig& cfg);

/// Scores a[n, m] for inputs x[n, p] recorded on `tape` through `bind`.
ad::Var mtlr_scores(const MtlrModel& model, const ParamBinding& bind, ad::Var x);

/// Full objective on cohort rows: summed NLL + C/2 * ||weights||^2, where the
/// penalty covers theta and every hidden weight matrix. Throws ContractError if
/// an event time lies beyond the grid.
ad::Var mtlr_loss(const MtlrModel& model, const ParamBinding& bind, ad::Var x, const std::vector<double>& times,
                  const std::vector<int>& events);

/// Full-batch AdamW to gradient norm <= grad_tol or max_iter iterations, with
/// a cosine learning-rate decay from lr to lr / 1000.
MtlrModel mtlr_fit(const Tensor& x, const std::vector<double>& times, const std::vector<int>& events,
                   const MtlrConfig& cfg);
MtlrModel mtlr_fit(const Cohort& cohort, const MtlrConfig& cfg);

/// N-MTLR: covariates pass through ReLU layers of the given widths before the
/// MTLR head; trained end to end on the same objective (empty widths = MTLR).
MtlrModel nmtlr_fit(const Tensor& x, const std::vector<double>& times, const std::vector<int>& events,
                    std::vector<std::size_t> hidden, MtlrConfig cfg);

struct SurvivalCurve {
    std::vector<double> times;     // tau_0 = 0, tau_1..tau_m
    std::vector<double> survival;  // S(tau_k)
};

SurvivalCurve mtlr_survival(const MtlrModel& model, const std::vector<double>& x);
/// sum_k (1 - S(tau_k)); larger means an earlier expected event.
double mtlr_risk(const MtlrModel& model, const std::vector<double>& x);
std::vector<double> mtlr_risk(const MtlrModel& model, const Tensor& x);

/// Survival curve and risk straight from one row of scores.
SurvivalCurve survival_from_scores(const std::vector<double>& grid, const double* scores);
double risk_from_scores(std::size_t m, const double* scores);

/// Row-major design matrix [n, p] of a cohort.
Tensor design_matrix(const Cohort& cohort);

}  // namespace oncokit
