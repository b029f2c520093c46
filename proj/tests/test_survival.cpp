#include <doctest/doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "oncokit/cox.hpp"
#include "oncokit/error.hpp"
#include "oncokit/fusion.hpp"
#include "oncokit/metrics.hpp"
#include "oncokit/mtlr.hpp"
#include "oncokit/synthetic.hpp"
#include "support/gradcheck.hpp"

using namespace oncokit;
using oncokit::testing::gradcheck;
using oncokit::testing::random_tensor;

namespace {

std::vector<std::vector<double>> rows_of(const Cohort& c) {
    std::vector<std::vector<double>> x;
    for (const auto& s : c.subjects) x.push_back(s.covariates);
    return x;
}

std::vector<std::size_t> argsort(const std::vector<double>& v) {
    std::vector<std::size_t> o(v.size());
    std::iota(o.begin(), o.end(), 0);
    std::stable_sort(o.begin(), o.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    return o;
}

}  // namespace

TEST_CASE("Cox score at zero, hand example") {
    const std::vector<double> x{1.0, 0.0}, t{1.0, 2.0};
    const std::vector<int> e{1, 1};
    const auto d = cox_derivatives(x, 1, t, e, {0.0});
    CHECK(d.score[0] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(d.loglik == doctest::Approx(-std::log(2.0)).epsilon(1e-15));
}

TEST_CASE("Cox derivatives match finite differences") {
    std::mt19937_64 rng(3);
    const std::size_t n = 40, p = 3;
    std::vector<double> x(n * p), t(n);
    std::vector<int> e(n);
    std::normal_distribution<double> g;
    for (auto& v : x) v = g(rng);
    for (std::size_t i = 0; i < n; ++i) {
        t[i] = static_cast<double>(1 + rng() % 10);  // ties
        e[i] = rng() % 4 ? 1 : 0;
    }
    const std::vector<double> w{0.3, -0.2, 0.1};
    const auto d = cox_derivatives(x, p, t, e, w);
    const double h = 1e-5;
    for (std::size_t k = 0; k < p; ++k) {
        auto wp = w, wm = w;
        wp[k] += h;
        wm[k] -= h;
        const auto dp = cox_derivatives(x, p, t, e, wp), dm = cox_derivatives(x, p, t, e, wm);
        CHECK(d.score[k] == doctest::Approx((dp.loglik - dm.loglik) / (2 * h)).epsilon(1e-6));
        for (std::size_t l = 0; l < p; ++l)
            CHECK(d.neg_hessian[k * p + l] == doctest::Approx(-(dp.score[l] - dm.score[l]) / (2 * h)).epsilon(1e-5));
    }
}

TEST_CASE("Cox risk") {
    CoxModel m;
    m.coef = {0.0, 0.0};
    CHECK(cox_risk(m, std::vector<double>{3.0, -1.0}) == 1.0);
    m.coef = {std::log(2.0)};
    CHECK(cox_risk(m, std::vector<double>{1.0}) == doctest::Approx(2.0).epsilon(1e-15));
    m.coef = {0.7, 0.0};
    CHECK(cox_risk(m, std::vector<double>{1.0, 5.0}) == cox_risk(m, std::vector<double>{1.0, 10.0}));
    CHECK_THROWS_AS(cox_risk(m, std::vector<double>{1.0}), ShapeError);
}

TEST_CASE("Cox recovery on Weibull-Cox data") {
    SyntheticConfig cfg;
    cfg.n = 500;
    cfg.seed = 2024;
    cfg.beta = {1.0, -0.5};
    cfg.censor_frac = 0.2;
    const auto data = gen_synthetic_cohort(cfg);
    const auto m = cox_fit(data.cohort);
    CHECK(m.converged);
    CHECK(m.iterations <= 20);
    CHECK(std::abs(m.coef[0] - 1.0) <= 0.15);
    CHECK(std::abs(m.coef[1] + 0.5) <= 0.15);
    // monotone up to the rounding resolution of the likelihood sum
    for (std::size_t i = 1; i < m.loglik_history.size(); ++i)
        CHECK(m.loglik_history[i] >= m.loglik_history[i - 1] - 1e-12 * std::abs(m.loglik_history[i - 1]));
    for (std::size_t i = 1; i < m.baseline_cumhaz.size(); ++i) CHECK(m.baseline_cumhaz[i] >= m.baseline_cumhaz[i - 1]);
    CHECK(cox_survival(m, {0.0, 0.0}, 0.0) == 1.0);
    CHECK(cox_survival(m, {0.0, 0.0}, 10.0) > cox_survival(m, {0.0, 0.0}, 20.0));

    // ranking invariance under shifting one feature
    auto shifted = data.cohort;
    for (auto& s : shifted.subjects) s.covariates[1] += 3.0;
    const auto m2 = cox_fit(shifted);
    CHECK(argsort(cox_risk(m, data.cohort)) == argsort(cox_risk(m2, shifted)));

    const auto back = CoxModel::from_json(m.to_json());
    CHECK(back.coef == m.coef);
    CHECK(back.baseline_cumhaz == m.baseline_cumhaz);
}

TEST_CASE("Cox without signal") {
    SyntheticConfig cfg;
    cfg.n = 500;
    cfg.seed = 99;
    cfg.beta = {0.0, 0.0};
    const auto m = cox_fit(gen_synthetic_cohort(cfg).cohort);
    CHECK(std::abs(m.coef[0]) <= 0.1);
    CHECK(std::abs(m.coef[1]) <= 0.1);
}

TEST_CASE("Cox failure modes") {
    const std::vector<double> t{1, 2, 3, 4};
    const std::vector<int> e{1, 1, 1, 1};
    CHECK_THROWS_AS(cox_fit({{1, 0}, {1, 1}, {1, 2}, {1, 3}}, t, e), DataError);
    // perfectly ordered risk: the likelihood grows without bound
    try {
        cox_fit({{0.4}, {0.3}, {0.2}, {0.1}}, t, e);
        FAIL("expected divergence");
    } catch (const DivergenceError& err) {
        CHECK(std::string(err.what()).find("#0") != std::string::npos);
    }
    const std::vector<std::vector<double>> dup{{1, 1}, {0, 0}, {2, 2}, {1, 1}};
    CHECK_THROWS_AS(cox_fit(dup, t, {1, 0, 1, 1}), DivergenceError);
    CoxConfig ridge;
    ridge.ridge = 0.1;
    CHECK_NOTHROW(cox_fit(dup, t, {1, 0, 1, 1}, ridge));
    CHECK_THROWS_AS(cox_fit({{1}, {2}}, {1, 2}, {0, 0}), DataError);
}

TEST_CASE("MTLR loss oracles") {
    ad::Tape tape;
    SUBCASE("zero parameters give log(m+1) per uncensored subject") {
        const auto a = tape.leaf(Tensor::zeros({1, 2}));
        CHECK(mtlr_nll(a, {1}, {1}).value().item() == std::log(3.0));
        const auto b = tape.leaf(Tensor::zeros({4, 5}));
        CHECK(mtlr_nll(b, {1, 2, 5, 6}, {1, 1, 1, 1}).value().item() == doctest::Approx(4 * std::log(6.0)).epsilon(1e-15));
    }
    SUBCASE("m = 1 is logistic regression") {
        std::mt19937_64 rng(8);
        const Tensor s = random_tensor({20, 1}, rng, -3, 3);
        std::vector<std::size_t> k(20);
        std::vector<int> ev(20, 1);
        double ref = 0.0;
        for (std::size_t i = 0; i < 20; ++i) {
            k[i] = 1 + rng() % 2;  // 1: event before tau_1 (label 1), 2: after (label 0)
            const double y = k[i] == 1 ? 1.0 : 0.0;
            const double pr = 1.0 / (1.0 + std::exp(-s[i]));
            ref -= y * std::log(pr) + (1 - y) * std::log(1 - pr);
        }
        CHECK(std::abs(mtlr_nll(tape.leaf(s), k, ev).value().item() - ref) <= 1e-10);
    }
    SUBCASE("censored subject marginalizes later sequences") {
        // m = 2, zero scores, censored in interval 2: log 3 - log 2
        const auto a = tape.leaf(Tensor::zeros({1, 2}));
        CHECK(mtlr_nll(a, {2}, {0}).value().item() == doctest::Approx(std::log(1.5)).epsilon(1e-15));
        CHECK(mtlr_nll(a, {1}, {0}).value().item() == doctest::Approx(0.0));
        CHECK_THROWS_AS(mtlr_nll(a, {4}, {1}), ContractError);
    }
}

TEST_CASE("MTLR gradients") {
    std::mt19937_64 rng(21);
    const std::size_t n = 10, p = 3, m = 4;
    const Tensor x = random_tensor({n, p}, rng);
    std::vector<std::size_t> k(n);
    std::vector<int> ev(n);
    for (std::size_t i = 0; i < n; ++i) {
        k[i] = 1 + rng() % (m + 1);
        ev[i] = i % 3 == 0 ? 0 : 1;
    }
    const double C = 0.7;
    SUBCASE("linear head with penalty, mixed censoring") {
        const auto r = gradcheck(
            [&](ad::Tape& t, const std::vector<ad::Var>& v) {
                const auto a = ad::add_row_bias(ad::matmul(t.constant(x), v[0]), v[1]);
                return ad::add(mtlr_nll(a, k, ev), ad::scale(ad::sum(ad::mul(v[0], v[0])), 0.5 * C));
            },
            {random_tensor({p, m}, rng), random_tensor({m}, rng)});
        CHECK(r.max_rel_err <= 1e-5);
    }
    SUBCASE("through a hidden layer") {
        const auto r = gradcheck(
            [&](ad::Tape& t, const std::vector<ad::Var>& v) {
                const auto h = ad::relu(ad::add_row_bias(ad::matmul(t.constant(x), v[0]), v[1]));
                return mtlr_nll(ad::add_row_bias(ad::matmul(h, v[2]), v[3]), k, ev);
            },
            {random_tensor({p, 5}, rng), random_tensor({5}, rng, 0.1, 0.5), random_tensor({5, m}, rng),
             random_tensor({m}, rng)});
        CHECK(r.max_rel_err <= 1e-4);
    }
    SUBCASE("model-level loss, C = 0 drops the penalty exactly") {
        MtlrConfig cfg;
        cfg.C = 0.0;
        auto model = mtlr_init(p, {1.0, 2.0, 3.0, 4.0}, cfg);
        model.params.get("theta") = random_tensor({p, m}, rng);
        const std::vector<double> times{0.5, 1.5, 2.5, 3.5, 4.0, 0.2, 5.0, 1.0, 2.0, 3.0};
        ad::Tape t1;
        ParamBinding b1(t1, model.params);
        const double without = mtlr_loss(model, b1, t1.constant(x), times, ev).value().item();
        ad::Tape t2;
        ParamBinding b2(t2, model.params);
        std::vector<std::size_t> iv;
        for (double tt : times) iv.push_back(time_interval(model.grid, tt));
        CHECK(without == mtlr_nll(mtlr_scores(model, b2, t2.constant(x)), iv, ev).value().item());
        auto late = times;
        late[1] = 9.0;  // event (ev[1] = 1) beyond the grid
        ad::Tape t3;
        ParamBinding b3(t3, model.params);
        CHECK_THROWS_AS(mtlr_loss(model, b3, t3.constant(x), late, ev), ContractError);
    }
}

TEST_CASE("MTLR survival curves") {
    const std::vector<double> grid{1, 2, 3};
    const std::vector<double> zero(3, 0.0);
    const auto c = survival_from_scores(grid, zero.data());
    CHECK(c.times == std::vector<double>{0, 1, 2, 3});
    for (std::size_t k = 0; k <= 3; ++k) CHECK(c.survival[k] == doctest::Approx(1.0 - 0.25 * k).epsilon(1e-14));

    std::mt19937_64 rng(4);
    std::normal_distribution<double> g(0.0, 3.0);
    for (int model = 0; model < 1000; ++model) {
        const std::size_t m = 1 + rng() % 12;
        std::vector<double> s(m), gr(m);
        for (std::size_t j = 0; j < m; ++j) s[j] = g(rng), gr[j] = static_cast<double>(j + 1);
        const auto cv = survival_from_scores(gr, s.data());
        for (std::size_t k = 1; k <= m; ++k) {
            CHECK(cv.survival[k] <= cv.survival[k - 1]);
            CHECK(cv.survival[k] >= 0.0);
        }
        const Tensor probs = mtlr_interval_probs(Tensor({1, m}, s));
        CHECK(std::abs(sum(probs) - 1.0) <= 1e-12);
    }
    // moving probability mass to earlier intervals raises the risk
    const std::vector<double> later{-2.0, 0.0, 0.0}, earlier{2.0, 0.0, 0.0};
    CHECK(risk_from_scores(3, earlier.data()) > risk_from_scores(3, zero.data()));
    CHECK(risk_from_scores(3, zero.data()) > risk_from_scores(3, later.data()));
}

TEST_CASE("default time grid") {
    const std::vector<double> t{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
    const std::vector<int> e{1, 1, 1, 1, 0, 1, 1, 1, 1, 0};
    const auto grid = default_time_grid(t, e);
    CHECK(grid.size() == 3);  // ceil(sqrt(8))
    CHECK(grid.back() == 9.0);
    CHECK(std::is_sorted(grid.begin(), grid.end()));
    CHECK(time_interval(grid, 0.5) == 1);
    CHECK(time_interval(grid, grid[0]) == 1);
    CHECK(time_interval(grid, 100.0) == 4);
}

TEST_CASE("MTLR fitting") {
    SyntheticConfig sc;
    sc.n = 1000;
    sc.seed = 5;
    sc.beta = {2.0};
    sc.censor_frac = 0.2;
    const auto data = gen_synthetic_cohort(sc);
    std::vector<std::size_t> tr(500), te(500);
    std::iota(tr.begin(), tr.end(), 0);
    std::iota(te.begin(), te.end(), 500);
    const auto train = data.cohort.subset(tr), test = data.cohort.subset(te);
    MtlrConfig cfg;
    cfg.max_iter = 600;
    const auto model = mtlr_fit(train, cfg);
    const auto risk = mtlr_risk(model, design_matrix(test));
    const auto ci = c_index(test.times(), risk, test.events(), {Orientation::shorter_time, false});
    CHECK(ci.c_index >= 0.8);
    CHECK(model.loss_history.back() < model.loss_history.front());

    const auto again = mtlr_fit(train, cfg);
    CHECK(again.params.get("theta") == model.params.get("theta"));
    CHECK(again.loss_history == model.loss_history);
    const auto nm = nmtlr_fit(design_matrix(train), train.times(), train.events(), {}, cfg);
    CHECK(nm.loss_history == model.loss_history);

    auto heavy = cfg;
    heavy.C = 1e6;
    const auto flat = mtlr_fit(train, heavy);
    const Tensor& th = flat.params.get("theta");
    CHECK(std::sqrt(dot(th, th)) <= 1e-3);

    const auto back = MtlrModel::from_json(model.to_json());
    CHECK(mtlr_risk(back, design_matrix(test)) == risk);
}

TEST_CASE("N-MTLR captures a nonlinear hazard") {
    // hazard depends on the sign agreement of two covariates (XOR structure)
    std::mt19937_64 rng(77);
    std::normal_distribution<double> g;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const std::size_t n = 2000;
    Tensor x({n, 2});
    std::vector<double> t(n);
    std::vector<int> ev(n);
    for (std::size_t i = 0; i < n; ++i) {
        x[2 * i] = g(rng);
        x[2 * i + 1] = g(rng);
        const double eta = x[2 * i] * x[2 * i + 1] > 0 ? 1.5 : -1.5;
        t[i] = -std::log(1.0 - u(rng)) / (0.1 * std::exp(eta));
        const double c = 40.0 * u(rng);
        ev[i] = t[i] <= c ? 1 : 0;
        t[i] = std::min(t[i], c) + 1e-6;
    }
    auto half = [&](std::size_t begin) {
        Tensor h({n / 2, 2});
        for (std::size_t i = 0; i < n; ++i)
            if (i >= begin && i < begin + n / 2) h[2 * (i - begin)] = x[2 * i], h[2 * (i - begin) + 1] = x[2 * i + 1];
        return h;
    };
    const Tensor xtr = half(0), xte = half(n / 2);
    const std::vector<double> ttr(t.begin(), t.begin() + n / 2), tte(t.begin() + n / 2, t.end());
    const std::vector<int> etr(ev.begin(), ev.begin() + n / 2), ete(ev.begin() + n / 2, ev.end());
    MtlrConfig cfg;
    cfg.max_iter = 800;
    cfg.lr = 0.02;
    cfg.seed = 1;
    const auto lin = mtlr_fit(xtr, ttr, etr, cfg);
    const auto deep = nmtlr_fit(xtr, ttr, etr, {16, 16}, cfg);
    const Orientation o = Orientation::shorter_time;
    const double c_lin = c_index(tte, mtlr_risk(lin, xte), ete, {o, false}).c_index;
    const double c_deep = c_index(tte, mtlr_risk(deep, xte), ete, {o, false}).c_index;
    MESSAGE("linear c-index " << c_lin << ", N-MTLR c-index " << c_deep);
    CHECK(c_deep >= c_lin + 0.05);
}

TEST_CASE("deep fusion") {
    const std::vector<double> a{1, 2, 3, 4};
    const auto za = zscore(a);
    CHECK(deep_fusion_risk(za, za) == za);
    const std::vector<double> b{0.3, 0.1, 0.9, 0.5};
    std::vector<double> a2(a.size()), b2(b.size());
    for (std::size_t i = 0; i < a.size(); ++i) a2[i] = 7.0 * a[i] + 3.0, b2[i] = 0.01 * b[i] - 4.0;
    const auto f1 = deep_fusion_risk(a, b), f2 = deep_fusion_risk(a2, b2);
    CHECK(argsort(f1) == argsort(f2));
    for (std::size_t i = 0; i < f1.size(); ++i) CHECK(f1[i] == doctest::Approx(f2[i]).epsilon(1e-12));
    const auto raw = deep_fusion_risk(a, b, FusionMode::raw);
    CHECK(raw[0] == 0.5 * (1 + 0.3));
    CHECK_THROWS_AS(deep_fusion_risk(a, std::vector<double>{1.0}), ShapeError);
}
