#include "oncokit/mtlr.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>

#include "oncokit/error.hpp"
#include "oncokit/optim.hpp"

namespace oncokit {

namespace {

// f(k) for k = 1..m+1 (stored at index k-1) from one row of scores a_1..a_m.
void sequence_scores(const double* a, std::size_t m, std::vector<double>& f) {
    f.assign(m + 1, 0.0);
    for (std::size_t k = m; k-- > 0;) f[k] = f[k + 1] + a[k];
}

double log_sum_exp(const std::vector<double>& f, std::size_t begin) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = begin; k < f.size(); ++k) mx = std::max(mx, f[k]);
    double s = 0.0;
    for (std::size_t k = begin; k < f.size(); ++k) s += std::exp(f[k] - mx);
    return mx + std::log(s);
}

std::string layer_w(std::size_t l) { return "mlp." + std::to_string(l) + ".w"; }
std::string layer_b(std::size_t l) { return "mlp." + std::to_string(l) + ".b"; }

}  // namespace

std::vector<double> default_time_grid(const std::vector<double>& times, const std::vector<int>& events, std::size_t m) {
    std::vector<double> ev;
    for (std::size_t i = 0; i < times.size(); ++i)
        if (events[i]) ev.push_back(times[i]);
    if (ev.empty()) throw DataError("time grid: no events");
    std::sort(ev.begin(), ev.end());
    if (m == 0) m = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(ev.size()))));
    std::vector<double> grid;
    for (std::size_t k = 1; k <= m; ++k) {
        const auto idx = static_cast<std::size_t>(std::ceil(static_cast<double>(k) * ev.size() / m)) - 1;
        const double t = ev[std::min(idx, ev.size() - 1)];
        if (grid.empty() || t > grid.back()) grid.push_back(t);
    }
    return grid;
}

std::size_t time_interval(const std::vector<double>& tau, double t) {
    return static_cast<std::size_t>(std::lower_bound(tau.begin(), tau.end(), t) - tau.begin()) + 1;
}

ad::Var mtlr_nll(ad::Var scores, const std::vector<std::size_t>& intervals, const std::vector<int>& events) {
    const Tensor& a = scores.value();
    if (a.rank() != 2) throw ShapeError("mtlr_nll: scores must be [n, m], got " + shape_str(a.shape()));
    const std::size_t n = a.dim(0), m = a.dim(1);
    if (intervals.size() != n || events.size() != n) throw ShapeError("mtlr_nll: label count differs from score rows");
    for (std::size_t i = 0; i < n; ++i)
        if (intervals[i] < 1 || intervals[i] > m + 1)
            throw ContractError("mtlr_nll: interval " + std::to_string(intervals[i]) + " outside 1.." +
                                std::to_string(m + 1));
    double total = 0.0;
    std::vector<double> f;
    for (std::size_t i = 0; i < n; ++i) {
        sequence_scores(a.data().data() + i * m, m, f);
        const std::size_t k = intervals[i] - 1;
        total += log_sum_exp(f, 0) - (events[i] ? f[k] : log_sum_exp(f, k));
    }
    return scores.tape->record(
        "mtlr_nll", {scores.id}, Tensor::scalar(total), [scores, intervals, events](ad::Tape& tp, const Tensor& g) {
            const Tensor& a = tp.value(scores.id);
            const std::size_t n = a.dim(0), m = a.dim(1);
            Tensor ga(a.shape());
            std::vector<double> f;
            for (std::size_t i = 0; i < n; ++i) {
                sequence_scores(a.data().data() + i * m, m, f);
                const std::size_t k0 = intervals[i] - 1;
                const double lz = log_sum_exp(f, 0);
                const double lzc = events[i] ? 0.0 : log_sum_exp(f, k0);
                // d/da_j of log Z is P(k <= j); of the observed term 1[j >= k0] or Q(k0 <= k <= j).
                double cum_p = 0.0, cum_q = 0.0;
                for (std::size_t j = 0; j < m; ++j) {
                    cum_p += std::exp(f[j] - lz);
                    double observed;
                    if (events[i]) {
                        observed = j >= k0 ? 1.0 : 0.0;
                    } else {
                        if (j >= k0) cum_q += std::exp(f[j] - lzc);
                        observed = cum_q;
                    }
                    ga[i * m + j] = g[0] * (cum_p - observed);
                }
            }
            tp.accumulate(scores.id, std::move(ga));
        });
}

Tensor mtlr_interval_probs(const Tensor& scores) {
    if (scores.rank() != 2) throw ShapeError("mtlr_interval_probs: scores must be [n, m]");
    const std::size_t n = scores.dim(0), m = scores.dim(1);
    Tensor p({n, m + 1});
    std::vector<double> f;
    for (std::size_t i = 0; i < n; ++i) {
        sequence_scores(scores.data().data() + i * m, m, f);
        const double lz = log_sum_exp(f, 0);
        for (std::size_t k = 0; k <= m; ++k) p[i * (m + 1) + k] = std::exp(f[k] - lz);
    }
    return p;
}

SurvivalCurve survival_from_scores(const std::vector<double>& grid, const double* scores) {
    const std::size_t m = grid.size();
    std::vector<double> f;
    sequence_scores(scores, m, f);
    const double lz = log_sum_exp(f, 0);
    SurvivalCurve c;
    c.times.push_back(0.0);
    c.times.insert(c.times.end(), grid.begin(), grid.end());
    c.survival.assign(m + 1, 0.0);
    // S(tau_k) = sum_{j > k} p_j, accumulated from the last interval backwards.
    double tail = 0.0;
    for (std::size_t k = m; k >= 1; --k) {
        tail += std::exp(f[k] - lz);
        c.survival[k] = std::min(tail, 1.0);
    }
    c.survival[0] = 1.0;
    return c;
}

double risk_from_scores(std::size_t m, const double* scores) {
    std::vector<double> grid(m);
    for (std::size_t k = 0; k < m; ++k) grid[k] = static_cast<double>(k + 1);
    const auto c = survival_from_scores(grid, scores);
    double r = 0.0;
    for (std::size_t k = 1; k <= m; ++k) r += 1.0 - c.survival[k];
    return r;
}

MtlrModel mtlr_init(std::size_t n_features, std::vector<double> grid, const MtlrConfig& cfg) {
    if (grid.empty()) throw ContractError("mtlr: empty time grid");
    for (std::size_t k = 0; k < grid.size(); ++k)
        if (!(grid[k] > 0.0) || (k > 0 && !(grid[k] > grid[k - 1])))
            throw ContractError("mtlr: time grid must be positive and strictly increasing");
    MtlrModel model;
    model.grid = std::move(grid);
    model.hidden = cfg.hidden;
    model.n_features = n_features;
    model.C = cfg.C;
    std::mt19937_64 rng(cfg.seed);
    std::size_t width = n_features;
    for (std::size_t l = 0; l < cfg.hidden.size(); ++l) {
        model.params.add(layer_w(l), fan_in_uniform({width, cfg.hidden[l]}, width, rng));
        model.params.add(layer_b(l), Tensor::zeros({cfg.hidden[l]}));
        width = cfg.hidden[l];
    }
    model.params.add("theta", Tensor::zeros({width, model.m()}));
    model.params.add("bias", Tensor::zeros({model.m()}));
    return model;
}

ad::Var mtlr_scores(const MtlrModel& model, const ParamBinding& bind, ad::Var x) {
    if (x.value().rank() != 2 || x.value().dim(1) != model.n_features)
        throw ShapeError("mtlr: expected inputs [n, " + std::to_string(model.n_features) + "], got " +
                         shape_str(x.value().shape()));
    ad::Var h = x;
    for (std::size_t l = 0; l < model.hidden.size(); ++l)
        h = ad::relu(ad::add_row_bias(ad::matmul(h, bind[layer_w(l)]), bind[layer_b(l)]));
    return ad::add_row_bias(ad::matmul(h, bind["theta"]), bind["bias"]);
}

ad::Var mtlr_loss(const MtlrModel& model, const ParamBinding& bind, ad::Var x, const std::vector<double>& times,
                  const std::vector<int>& events) {
    std::vector<std::size_t> intervals(times.size());
    for (std::size_t i = 0; i < times.size(); ++i) {
        intervals[i] = time_interval(model.grid, times[i]);
        if (events[i] && intervals[i] > model.m())
            throw ContractError("mtlr_loss: event time " + std::to_string(times[i]) + " lies beyond the last grid boundary " +
                                std::to_string(model.grid.back()));
    }
    ad::Var loss = mtlr_nll(mtlr_scores(model, bind, x), intervals, events);
    if (model.C != 0.0) {
        ad::Var theta = bind["theta"];
        ad::Var reg = ad::sum(ad::mul(theta, theta));
        for (std::size_t l = 0; l < model.hidden.size(); ++l) {
            ad::Var w = bind[layer_w(l)];
            reg = ad::add(reg, ad::sum(ad::mul(w, w)));
        }
        loss = ad::add(loss, ad::scale(reg, 0.5 * model.C));
    }
    return loss;
}

MtlrModel mtlr_fit(const Tensor& x, const std::vector<double>& times, const std::vector<int>& events,
                   const MtlrConfig& cfg) {
    if (x.rank() != 2 || x.dim(0) != times.size() || events.size() != times.size())
        throw ShapeError("mtlr_fit: design matrix and labels disagree");
    MtlrModel model = mtlr_init(x.dim(1), default_time_grid(times, events, cfg.m), cfg);
    OptimState opt;
    opt.weight_decay = 0.0;  // the C penalty is the regularizer
    const double floor = cfg.lr * 1e-3;
    for (std::size_t it = 0; it < cfg.max_iter; ++it) {
        ad::Tape tape;
        ParamBinding bind(tape, model.params);
        const ad::Var loss = mtlr_loss(model, bind, tape.constant(x), times, events);
        tape.backward(loss);
        const auto grads = bind.grads();
        double g2 = 0.0;
        for (const auto& [name, g] : grads) g2 += dot(g, g);
        model.loss_history.push_back(loss.value().item());
        model.iterations = it;
        if (std::sqrt(g2) <= cfg.grad_tol) break;
        opt.lr = floor + 0.5 * (cfg.lr - floor) *
                             (1.0 + std::cos(std::numbers::pi * static_cast<double>(it) / static_cast<double>(cfg.max_iter)));
        adamw_step(model.params, grads, opt);
        model.iterations = it + 1;
    }
    return model;
}

Tensor design_matrix(const Cohort& cohort) {
    if (cohort.size() == 0 || cohort.width() == 0) throw DataError("design matrix: empty cohort or no features");
    Tensor x({cohort.size(), cohort.width()});
    for (std::size_t i = 0; i < cohort.size(); ++i)
        for (std::size_t k = 0; k < cohort.width(); ++k) x[i * cohort.width() + k] = cohort.subjects[i].covariates[k];
    return x;
}

MtlrModel mtlr_fit(const Cohort& cohort, const MtlrConfig& cfg) {
    return mtlr_fit(design_matrix(cohort), cohort.times(), cohort.events(), cfg);
}

MtlrModel nmtlr_fit(const Tensor& x, const std::vector<double>& times, const std::vector<int>& events,
                    std::vector<std::size_t> hidden, MtlrConfig cfg) {
    cfg.hidden = std::move(hidden);
    return mtlr_fit(x, times, events, cfg);
}

namespace {

Tensor scores_of(const MtlrModel& model, const Tensor& x) {
    ad::Tape tape;
    ParamBinding bind(tape, model.params);
    return mtlr_scores(model, bind, tape.constant(x)).value();
}

}  // namespace

SurvivalCurve mtlr_survival(const MtlrModel& model, const std::vector<double>& x) {
    const Tensor s = scores_of(model, Tensor({1, x.size()}, x));
    return survival_from_scores(model.grid, s.data().data());
}

double mtlr_risk(const MtlrModel& model, const std::vector<double>& x) {
    const Tensor s = scores_of(model, Tensor({1, x.size()}, x));
    return risk_from_scores(model.m(), s.data().data());
}

std::vector<double> mtlr_risk(const MtlrModel& model, const Tensor& x) {
    const Tensor s = scores_of(model, x);
    std::vector<double> r(x.dim(0));
    for (std::size_t i = 0; i < r.size(); ++i) r[i] = risk_from_scores(model.m(), s.data().data() + i * model.m());
    return r;
}

nlohmann::json MtlrModel::to_json() const {
    nlohmann::json p = nlohmann::json::object();
    for (const auto& [name, t] : params.entries())
        p[name] = {{"shape", t.shape()}, {"data", std::vector<double>(t.data().begin(), t.data().end())}};
    return {{"type", "mtlr"}, {"grid", grid}, {"hidden", hidden}, {"n_features", n_features},
            {"C", C},         {"iterations", iterations}, {"params", p}};
}

MtlrModel MtlrModel::from_json(const nlohmann::json& j) {
    if (j.value("type", "") != "mtlr") throw ConfigError("model JSON is not an MTLR model");
    MtlrModel m;
    m.grid = j.at("grid").get<std::vector<double>>();
    m.hidden = j.at("hidden").get<std::vector<std::size_t>>();
    m.n_features = j.at("n_features").get<std::size_t>();
    m.C = j.at("C").get<double>();
    m.iterations = j.value("iterations", std::size_t{0});
    // Rebuild in canonical order so parameter layout matches mtlr_init.
    auto take = [&](const std::string& name) {
        const auto& e = j.at("params").at(name);
        m.params.add(name, Tensor(e.at("shape").get<Shape>(), e.at("data").get<std::vector<double>>()));
    };
    for (std::size_t l = 0; l < m.hidden.size(); ++l) {
        take(layer_w(l));
        take(layer_b(l));
    }
    take("theta");
    take("bias");
    return m;
}

}  // namespace oncokit
