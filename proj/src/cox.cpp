#include "oncokit/cox.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <Eigen/Dense>

#include "oncokit/error.hpp"

namespace oncokit {

namespace {

std::vector<std::size_t> order_by_time_desc(const std::vector<double>& times) {
    std::vector<std::size_t> order(times.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return times[a] > times[b]; });
    return order;
}

std::string feature_label(const std::vector<std::string>& names, std::size_t k) {
    return k < names.size() ? "'" + names[k] + "'" : "#" + std::to_string(k);
}

}  // namespace

CoxDerivatives cox_derivatives(const std::vector<double>& x, std::size_t p, const std::vector<double>& times,
                               const std::vector<int>& events, const std::vector<double>& w) {
    const std::size_t n = times.size();
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> X(x.data(), n, p);
    const Eigen::Map<const Eigen::VectorXd> W(w.data(), p);
    Eigen::VectorXd eta = X * W;
    const double shift = eta.maxCoeff();  // exp stabilization; cancels in every ratio below

    CoxDerivatives d;
    Eigen::VectorXd score = Eigen::VectorXd::Zero(p);
    Eigen::MatrixXd info = Eigen::MatrixXd::Zero(p, p);
    // Risk-set sums accumulated from the latest time backwards; subjects with
    // equal times enter together before any of their events is scored (Breslow).
    double s0 = 0.0;
    Eigen::VectorXd s1 = Eigen::VectorXd::Zero(p);
    Eigen::MatrixXd s2 = Eigen::MatrixXd::Zero(p, p);
    const auto order = order_by_time_desc(times);
    for (std::size_t g = 0; g < n;) {
        std::size_t e = g;
        while (e < n && times[order[e]] == times[order[g]]) ++e;
        for (std::size_t k = g; k < e; ++k) {
            const std::size_t i = order[k];
            const double r = std::exp(eta[i] - shift);
            const auto xi = X.row(i).transpose();
            s0 += r;
            s1 += r * xi;
            s2.noalias() += r * xi * xi.transpose();
        }
        for (std::size_t k = g; k < e; ++k) {
            const std::size_t i = order[k];
            if (!events[i]) continue;
            const Eigen::VectorXd mean = s1 / s0;
            d.loglik += eta[i] - (std::log(s0) + shift);
            score += X.row(i).transpose() - mean;
            info += s2 / s0 - mean * mean.transpose();
        }
        g = e;
    }
    d.score.assign(score.data(), score.data() + p);
    d.neg_hessian.resize(p * p);
    for (std::size_t a = 0; a < p; ++a)
        for (std::size_t b = 0; b < p; ++b) d.neg_hessian[a * p + b] = info(a, b);
    return d;
}

CoxModel cox_fit(const std::vector<std::vector<double>>& rows, const std::vector<double>& times,
                 const std::vector<int>& events, const CoxConfig& cfg, const std::vector<std::string>& names) {
    const std::size_t n = rows.size();
    if (n == 0 || times.size() != n || events.size() != n) throw ShapeError("cox_fit: inconsistent cohort arrays");
    const std::size_t p = rows[0].size();
    if (p == 0) throw ContractError("cox_fit: no covariates");
    std::vector<double> x(n * p);
    for (std::size_t i = 0; i < n; ++i) {
        if (rows[i].size() != p) throw ShapeError("cox_fit: ragged covariate rows");
        std::copy(rows[i].begin(), rows[i].end(), x.begin() + static_cast<std::ptrdiff_t>(i * p));
    }
    if (std::none_of(events.begin(), events.end(), [](int e) { return e == 1; }))
        throw DataError("cox_fit: cohort has no events");
    for (std::size_t k = 0; k < p; ++k) {
        double lo = x[k], hi = x[k];
        for (std::size_t i = 0; i < n; ++i) lo = std::min(lo, x[i * p + k]), hi = std::max(hi, x[i * p + k]);
        if (lo == hi) throw DataError("cox_fit: feature " + feature_label(names, k) + " has zero variance");
    }

    auto penalized = [&](const std::vector<double>& w) {
        CoxDerivatives d = cox_derivatives(x, p, times, events, w);
        if (cfg.ridge > 0.0)
            for (std::size_t k = 0; k < p; ++k) {
                d.loglik -= 0.5 * cfg.ridge * w[k] * w[k];
                d.score[k] -= cfg.ridge * w[k];
                d.neg_hessian[k * p + k] += cfg.ridge;
            }
        return d;
    };

    CoxModel m;
    m.feature_names = names;
    std::vector<double> w(p, 0.0);
    CoxDerivatives d = penalized(w);
    m.loglik_history.push_back(d.loglik);
    for (std::size_t it = 0; it < cfg.max_iter; ++it) {
        const double max_score =
            std::abs(*std::max_element(d.score.begin(), d.score.end(), [](double a, double b) { return std::abs(a) < std::abs(b); }));
        if (max_score <= cfg.tol) {
            m.converged = true;
            break;
        }
        const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> I(
            d.neg_hessian.data(), p, p);
        const Eigen::Map<const Eigen::VectorXd> U(d.score.data(), p);
        Eigen::LDLT<Eigen::MatrixXd> ldlt(I);
        const auto diag = ldlt.vectorD();
        const double scale = std::max(diag.cwiseAbs().maxCoeff(), 1e-300);
        if (ldlt.info() != Eigen::Success || diag.minCoeff() <= 1e-12 * scale)
            throw DivergenceError("cox_fit: singular Hessian (collinear or degenerate features); set a ridge penalty");
        const Eigen::VectorXd step = ldlt.solve(U);

        // Step-halving: accept the first trial step that does not decrease the
        // log-likelihood. Near the optimum a Newton step gains less than the
        // rounding resolution of the likelihood sum, so equality is judged to
        // 1e-12 relative.
        const double resolution = 1e-12 * std::max(1.0, std::abs(d.loglik));
        double t = 1.0;
        std::vector<double> trial(p);
        CoxDerivatives dt;
        bool accepted = false;
        for (int half = 0; half < 40; ++half, t *= 0.5) {
            for (std::size_t k = 0; k < p; ++k) trial[k] = w[k] + t * step[static_cast<Eigen::Index>(k)];
            dt = penalized(trial);
            if (std::isfinite(dt.loglik) && dt.loglik >= d.loglik - resolution) {
                accepted = true;
                break;
            }
        }
        if (!accepted) break;  // at the optimum to working precision
        w = trial;
        d = std::move(dt);
        m.iterations = it + 1;
        m.loglik_history.push_back(d.loglik);
        for (std::size_t k = 0; k < p; ++k)
            if (std::abs(w[k]) > cfg.separation_bound)
                throw DivergenceError("cox_fit: coefficient of feature " + feature_label(names, k) + " exceeded " +
                                      std::to_string(cfg.separation_bound) + " (separation); set a ridge penalty");
    }
    if (!m.converged) {
        const double max_score =
            std::abs(*std::max_element(d.score.begin(), d.score.end(), [](double a, double b) { return std::abs(a) < std::abs(b); }));
        m.converged = max_score <= cfg.tol;
    }
    m.coef = w;

    // Breslow baseline cumulative hazard at distinct event times.
    std::vector<double> eta(n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < p; ++k) eta[i] += x[i * p + k] * w[k];
    const auto order = order_by_time_desc(times);
    std::vector<std::pair<double, double>> increments;  // (time, d / risk-set sum), descending time
    double s0 = 0.0;
    for (std::size_t g = 0; g < n;) {
        std::size_t e = g;
        std::size_t deaths = 0;
        while (e < n && times[order[e]] == times[order[g]]) {
            s0 += std::exp(eta[order[e]]);
            deaths += events[order[e]] ? 1 : 0;
            ++e;
        }
        if (deaths) increments.emplace_back(times[order[g]], static_cast<double>(deaths) / s0);
        g = e;
    }
    std::reverse(increments.begin(), increments.end());
    double cum = 0.0;
    for (const auto& [t, inc] : increments) {
        cum += inc;
        m.baseline_times.push_back(t);
        m.baseline_cumhaz.push_back(cum);
    }
    return m;
}

CoxModel cox_fit(const Cohort& cohort, const CoxConfig& cfg) {
    std::vector<std::vector<double>> x;
    x.reserve(cohort.size());
    for (const auto& s : cohort.subjects) x.push_back(s.covariates);
    return cox_fit(x, cohort.times(), cohort.events(), cfg, cohort.feature_names);
}

double cox_risk(const CoxModel& m, const std::vector<double>& x) {
    if (x.size() != m.coef.size())
        throw ShapeError("cox_risk: expected " + std::to_string(m.coef.size()) + " covariates, got " +
                         std::to_string(x.size()));
    double eta = 0.0;
    for (std::size_t k = 0; k < x.size(); ++k) eta += m.coef[k] * x[k];
    return std::exp(eta);
}

std::vector<double> cox_risk(const CoxModel& m, const std::vector<std::vector<double>>& x) {
    std::vector<double> r;
    r.reserve(x.size());
    for (const auto& row : x) r.push_back(cox_risk(m, row));
    return r;
}

std::vector<double> cox_risk(const CoxModel& m, const Cohort& cohort) {
    std::vector<double> r;
    r.reserve(cohort.size());
    for (const auto& s : cohort.subjects) r.push_back(cox_risk(m, s.covariates));
    return r;
}

double cox_survival(const CoxModel& m, const std::vector<double>& x, double t) {
    const auto it = std::upper_bound(m.baseline_times.begin(), m.baseline_times.end(), t);
    const double h0 = it == m.baseline_times.begin() ? 0.0 : m.baseline_cumhaz[static_cast<std::size_t>(it - m.baseline_times.begin()) - 1];
    return std::exp(-h0 * cox_risk(m, x));
}

nlohmann::json CoxModel::to_json() const {
    return {{"type", "cox"},
            {"coefficients", coef},
            {"feature_names", feature_names},
            {"baseline", {{"times", baseline_times}, {"cumulative_hazard", baseline_cumhaz}}},
            {"iterations", iterations},
            {"converged", converged},
            {"loglik_history", loglik_history}};
}

CoxModel CoxModel::from_json(const nlohmann::json& j) {
    if (j.value("type", "") != "cox") throw ConfigError("model JSON is not a Cox model");
    CoxModel m;
    m.coef = j.at("coefficients").get<std::vector<double>>();
    m.feature_names = j.value("feature_names", std::vector<std::string>{});
    m.baseline_times = j.at("baseline").at("times").get<std::vector<double>>();
    m.baseline_cumhaz = j.at("baseline").at("cumulative_hazard").get<std::vector<double>>();
    m.iterations = j.value("iterations", std::size_t{0});
    m.converged = j.value("converged", false);
    m.loglik_history = j.value("loglik_history", std::vector<double>{});
    return m;
}

}  // namespace oncokit
