#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "oncokit/ehr.hpp"
#include "oncokit/tensor.hpp"

namespace oncokit {

struct CoxConfig {
    std::size_t max_iter = 100;
    double tol = 1e-8;               // on max |score|
    double ridge = 0.0;              // penalty ridge/2 * ||w||^2
    double separation_bound = 50.0;  // |w_k| beyond this aborts as separation
};

struct CoxModel {
    std::vector<double> coef;
    std::vector<std::string> feature_names;
    // Breslow cumulative baseline hazard at the distinct event times.
    std::vector<double> baseline_times;
    std::vector<double> baseline_cumhaz;
    std::size_t iterations = 0;
    bool converged = false;
    std::vector<double> loglik_history;  // partial log-likelihood per accepted iterate, starting at w = 0

    nlohmann::json to_json() const;
    static CoxModel from_json(const nlohmann::json& j);
};

struct CoxDerivatives {
    double loglik = 0.0;
    std::vector<double> score;             // gradient
    std::vector<double> neg_hessian;       // p x p, row-major
};

/// Breslow partial log-likelihood of rows `x` (n x p, row-major), plus its
/// gradient and negated Hessian, at coefficients `w`.
CoxDerivatives cox_derivatives(const std::vector<double>& x, std::size_t p, const std::vector<double>& times,
                               const std::vector<int>& events, const std::vector<double>& w);

/// Newton-Raphson with step-halving on the Breslow partial likelihood.
CoxModel cox_fit(const std::vector<std::vector<double>>& x, const std::vector<double>& times,
                 const std::vector<int>& events, const CoxConfig& cfg = {},
                 const std::vector<std::string>& feature_names = {});
CoxModel cox_fit(const Cohort& cohort, const CoxConfig& cfg = {});

/// exp(w' x) per row.
std::vector<double> cox_risk(const CoxModel& m, const std::vector<std::vector<double>>& x);
double cox_risk(const CoxModel& m, const std::vector<double>& x);
std::vector<double> cox_risk(const CoxModel& m, const Cohort& cohort);

/// S(t | x) = exp(-H0(t) exp(w' x)).
double cox_survival(const CoxModel& m, const std::vector<double>& x, double t);

}  // namespace oncokit
