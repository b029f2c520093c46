// Acceptance suite: one PASS/FAIL line per criterion.
//
//   acceptance            run all criteria
//   acceptance 3 7        run the listed criteria
//
// Exit status is 0 when every selected criterion passes.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "oncokit/cox.hpp"
#include "oncokit/error.hpp"
#include "oncokit/experiment.hpp"
#include "oncokit/losses.hpp"
#include "oncokit/metrics.hpp"
#include "oncokit/mtlr.hpp"
#include "oncokit/segnet.hpp"
#include "oncokit/superimage.hpp"
#include "oncokit/synthetic.hpp"
#include "oncokit/vit.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"
#include "support/param_gradcheck.hpp"

using namespace oncokit;
using oncokit::testing::gradcheck;
using oncokit::testing::param_gradcheck;
using oncokit::testing::ParamLossFn;
using oncokit::testing::random_tensor;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

/// Collects sub-check outcomes and a short human-readable summary.
class Outcome {
public:
    void check(bool ok, const std::string& what) {
        if (!ok) {
            pass_ = false;
            failures_.push_back(what);
        }
    }
    void note(const std::string& s) { notes_.push_back(s); }
    bool passed() const { return pass_; }
    std::string summary() const {
        std::string s;
        for (const auto& n : notes_) s += (s.empty() ? "" : "; ") + n;
        for (const auto& f : failures_) s += (s.empty() ? "" : "; ") + std::string("failed: ") + f;
        return s;
    }

private:
    bool pass_ = true;
    std::vector<std::string> notes_, failures_;
};

std::string fmt(double v, int precision = 4) {
    std::ostringstream os;
    os.precision(precision);
    os << v;
    return os.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

/// Scratch directory for experiment runs, removed afterwards.
struct Scratch {
    fs::path path;
    explicit Scratch(const std::string& tag) {
        path = fs::temp_directory_path() / ("oncokit_acceptance_" + tag + "_" + std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~Scratch() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// ---------------------------------------------------------------------------
// 1. Gradient suite

constexpr double kGradTol = 1e-4;
constexpr double kH = 1e-5;

void criterion_gradients(Outcome& out) {
    std::mt19937_64 rng(101);
    double worst = 0.0;
    auto record = [&](const std::string& name, double err) {
        worst = std::max(worst, err);
        out.check(err <= kGradTol, name + " rel err " + fmt(err));
    };
    auto probe_loss = [](ad::Tape& tp, ad::Var y, const Tensor& probe) { return ad::sum(ad::mul(y, tp.constant(probe))); };

    for (int rank : {2, 3})
        for (std::size_t stride : {1u, 2u}) {
            const Tensor x = random_tensor(rank == 2 ? Shape{2, 5, 5} : Shape{2, 5, 4, 4}, rng);
            const Tensor w = random_tensor(rank == 2 ? Shape{3, 2, 3, 3} : Shape{3, 2, 3, 3, 3}, rng);
            const Tensor b = random_tensor({3}, rng);
            const Tensor probe = random_tensor(ad::conv_forward(x, w, &b, {rank, stride, 1}).shape(), rng);
            record("conv rank " + std::to_string(rank),
                   gradcheck([&](ad::Tape& tp, const std::vector<ad::Var>& v) {
                       return probe_loss(tp, ad::conv(v[0], v[1], v[2], {rank, stride, 1}), probe);
                   }, {x, w, b}, kH).max_rel_err);
        }
    for (int rank : {2, 3}) {
        const Tensor x = random_tensor(rank == 2 ? Shape{2, 3, 3} : Shape{2, 3, 3, 2}, rng);
        const Tensor w = random_tensor(rank == 2 ? Shape{2, 3, 2, 2} : Shape{2, 3, 2, 2, 2}, rng);
        const Tensor b = random_tensor({3}, rng);
        const Tensor probe = random_tensor(ad::conv_transpose_forward(x, w, &b, {rank, 2, 0}).shape(), rng);
        record("transposed conv rank " + std::to_string(rank),
               gradcheck([&](ad::Tape& tp, const std::vector<ad::Var>& v) {
                   return probe_loss(tp, ad::conv_transpose(v[0], v[1], v[2], {rank, 2, 0}), probe);
               }, {x, w, b}, kH).max_rel_err);
    }
    {
        const Tensor z = random_tensor({4, 6}, rng), g = random_tensor({6}, rng), b = random_tensor({6}, rng);
        const Tensor probe = random_tensor({4, 6}, rng);
        record("layer norm", gradcheck([&](ad::Tape& tp, const std::vector<ad::Var>& v) {
                   return probe_loss(tp, ad::layer_norm(v[0], v[1], v[2]), probe);
               }, {z, g, b}, kH).max_rel_err);
    }
    {
        const Tensor q = random_tensor({5, 4}, rng, -2, 2), k = random_tensor({5, 4}, rng, -2, 2),
                     v = random_tensor({5, 4}, rng);
        const Tensor probe = random_tensor({5, 4}, rng);
        record("attention", gradcheck([&](ad::Tape& tp, const std::vector<ad::Var>& a) {
                   return probe_loss(tp, self_attention(a[0], a[1], a[2]), probe);
               }, {q, k, v}, kH).max_rel_err);
    }
    {
        VitConfig c;
        c.embed = 8;
        c.heads = 2;
        c.layers = 4;  // only block 0 runs; the others' parameters get zero gradients
        c.max_tokens = 8;
        ParamStore store;
        vit_init(store, c, rng);
        // Larger weights so that attention and GELU are far from linear.
        for (auto& [name, t] : store.entries())
            if (name.find(".w") != std::string::npos)
                for (auto& x : t.data()) x *= 15.0;
        store.add("input", random_tensor({6, 8}, rng));
        const Tensor probe = random_tensor({6, 8}, rng);
        const ParamLossFn loss = [&](ad::Tape& tp, const ParamBinding& bind) {
            return probe_loss(tp, transformer_block(bind, c, 0, bind["input"]), probe);
        };
        // The key bias adds a constant to each softmax row, so its exact
        // gradient is zero and a relative error is undefined; it is checked
        // for a vanishing analytic gradient instead.
        record("transformer block", param_gradcheck(store, loss, kH, {"attn.k.b"}).max_rel_err);
        ad::Tape tape;
        ParamBinding bind(tape, store);
        tape.backward(loss(tape, bind));
        double kb = 0.0;
        for (const auto& [name, g] : bind.grads())
            if (name.find("attn.k.b") != std::string::npos) kb = std::max(kb, std::sqrt(dot(g, g)));
        out.check(kb <= 1e-12, "key-bias gradient " + fmt(kb));
    }
    {
        Tensor y({2, 4, 3});
        for (auto& v : y.data()) v = rng() % 2 ? 1.0 : 0.0;
        const Tensor p = random_tensor({2, 4, 3}, rng, 0.05, 0.95);
        record("dice", gradcheck([&](ad::Tape&, const std::vector<ad::Var>& v) { return dice_loss(v[0], y); }, {p}, kH)
                           .max_rel_err);
        for (double gamma : {0.0, 2.0})
            record("focal", gradcheck([&](ad::Tape&, const std::vector<ad::Var>& v) {
                       return focal_loss(v[0], y, {0.75, gamma});
                   }, {p}, kH).max_rel_err);
    }
    {
        const std::size_t n = 12, p = 3, m = 4;
        const Tensor x = random_tensor({n, p}, rng);
        std::vector<std::size_t> k(n);
        std::vector<int> ev(n);
        for (std::size_t i = 0; i < n; ++i) {
            k[i] = 1 + i % (m + 1);
            ev[i] = i % 3 == 0 ? 0 : 1;  // a third censored
        }
        record("MTLR (censored and uncensored)",
               gradcheck([&](ad::Tape& t, const std::vector<ad::Var>& v) {
                   const auto a = ad::add_row_bias(ad::matmul(t.constant(x), v[0]), v[1]);
                   return ad::add(mtlr_nll(a, k, ev), ad::scale(ad::sum(ad::mul(v[0], v[0])), 0.35));
               }, {random_tensor({p, m}, rng), random_tensor({m}, rng)}, kH).max_rel_err);

        MtlrConfig cfg;
        cfg.C = 0.5;
        cfg.hidden = {5};
        cfg.seed = 4;
        MtlrModel model = mtlr_init(p, {1.0, 2.0, 3.0, 4.5}, cfg);
        for (auto& [name, t] : model.params.entries())
            for (auto& v : t.data()) v += std::uniform_real_distribution<double>(-0.5, 0.5)(rng);
        std::vector<double> times;
        for (std::size_t i = 0; i < n; ++i) times.push_back(0.5 + static_cast<double>(i % 5) * 0.9);
        record("N-MTLR", param_gradcheck(model.params, [&](ad::Tape& t, const ParamBinding& bind) {
                   return mtlr_loss(model, bind, t.constant(x), times, ev);
               }, kH).max_rel_err);
    }
    out.note("worst rel err " + fmt(worst));
}

// ---------------------------------------------------------------------------
// 2. Super-image bijectivity

void criterion_superimage(Outcome& out) {
    std::mt19937_64 rng(202);
    std::uniform_real_distribution<double> ud(-1.0, 1.0);
    std::size_t cases = 0, failures = 0;
    for (std::size_t C = 1; C <= 2; ++C)
        for (std::size_t H = 1; H <= 16; ++H)
            for (std::size_t W = 1; W <= 16; ++W)
                for (std::size_t D = 1; D <= 32; ++D) {
                    Tensor v({C, H, W, D});
                    for (auto& x : v.data()) x = ud(rng);
                    const SuperImageLayout l = make_layout(H, W, D, C);
                    const Tensor si = to_super_image(v, l);
                    if (si.shape() != Shape{C, H * l.sh, W * l.sw} || !(from_super_image(si, l) == v)) ++failures;
                    ++cases;
                }
    out.check(failures == 0, std::to_string(failures) + " of " + std::to_string(cases) + " layouts not bit-exact");
    const SuperImageLayout l = make_layout(80, 80, 48, 2);
    Tensor v({2, 80, 80, 48});
    for (auto& x : v.data()) x = ud(rng);
    const Tensor si = to_super_image(v, l);
    out.check(l.sh == 6 && l.sw == 8 && si.shape() == Shape{2, 480, 640}, "80x80x48 did not map to 480x640");
    out.check(from_super_image(si, l) == v, "80x80x48 round trip not exact");
    out.note(std::to_string(cases) + " layouts bit-exact; 80x80x48 -> " + std::to_string(l.out_h()) + "x" +
             std::to_string(l.out_w()));
}

// ---------------------------------------------------------------------------
// 3. C-index oracle

void criterion_cindex(Outcome& out) {
    std::mt19937_64 rng(303);
    std::size_t mismatches = 0;
    for (int inst = 0; inst < 1000; ++inst) {
        const std::size_t n = 2 + rng() % 199;
        std::vector<double> t(n), eta(n);
        std::vector<int> ev(n);
        for (std::size_t i = 0; i < n; ++i) {
            t[i] = static_cast<double>(1 + rng() % 40);  // time ties
            eta[i] = static_cast<double>(rng() % 25);    // score ties
            ev[i] = rng() % 4 ? 1 : 0;
        }
        ev[0] = 1;
        t[1] = t[0] + 1;  // guarantees a comparable pair
        const auto ref = oncokit::testing::c_index_pairs(t, eta, ev);
        const auto fast = c_index(t, eta, ev);
        if (fast.comparable_pairs != ref.comparable ||
            fast.c_index != ref.concordant / static_cast<double>(ref.comparable))
            ++mismatches;
    }
    out.check(mismatches == 0, std::to_string(mismatches) + " of 1000 instances differ from enumeration");

    std::vector<double> t(100);
    std::iota(t.begin(), t.end(), 1.0);
    std::vector<double> rev(t.rbegin(), t.rend());
    const std::vector<int> all(100, 1);
    const double perfect = c_index(t, t, all).c_index, reversed = c_index(t, rev, all).c_index;
    out.check(perfect == 1.0, "perfect ranking gave " + fmt(perfect));
    out.check(reversed == 0.0, "reversed ranking gave " + fmt(reversed));

    const std::size_t n = 10000;
    std::vector<double> tt(n), eta(n);
    std::vector<int> ev(n);
    std::exponential_distribution<double> ex(1.0);
    std::normal_distribution<double> g;
    for (std::size_t i = 0; i < n; ++i) {
        tt[i] = ex(rng);
        eta[i] = g(rng);
        ev[i] = rng() % 5 ? 1 : 0;
    }
    const double indep = c_index(tt, eta, ev).c_index;
    out.check(std::abs(indep - 0.5) <= 0.02, "independent scores gave " + fmt(indep));
    out.note("1000/1000 match enumeration; perfect " + fmt(perfect) + ", reversed " + fmt(reversed) +
             ", independent " + fmt(indep));
}

// ---------------------------------------------------------------------------
// 4. Cox recovery

void criterion_cox(Outcome& out) {
    SyntheticConfig cfg;
    cfg.n = 500;
    cfg.seed = 404;
    cfg.beta = {1.0, -0.5};
    cfg.censor_frac = 0.2;
    const auto data = gen_synthetic_cohort(cfg);
    std::size_t censored = 0;
    for (const auto& s : data.cohort.subjects) censored += s.event == 0;
    const CoxModel m = cox_fit(data.cohort);
    out.check(m.converged, "Newton did not converge");
    out.check(m.iterations <= 20, std::to_string(m.iterations) + " iterations");
    out.check(std::abs(m.coef[0] - 1.0) <= 0.15, "beta_1 = " + fmt(m.coef[0]));
    out.check(std::abs(m.coef[1] + 0.5) <= 0.15, "beta_2 = " + fmt(m.coef[1]));
    // Monotone up to the rounding resolution of the log-likelihood sum.
    bool monotone = true;
    for (std::size_t i = 1; i < m.loglik_history.size(); ++i)
        monotone = monotone &&
                   m.loglik_history[i] >= m.loglik_history[i - 1] - 1e-12 * std::abs(m.loglik_history[i - 1]);
    out.check(monotone, "log-likelihood decreased");
    out.note("beta_hat = [" + fmt(m.coef[0]) + ", " + fmt(m.coef[1]) + "], " + std::to_string(m.iterations) +
             " iterations, " + fmt(100.0 * static_cast<double>(censored) / 500.0, 3) + "% censored");
}

// ---------------------------------------------------------------------------
// 5. MTLR correctness

void criterion_mtlr(Outcome& out) {
    std::mt19937_64 rng(505);
    bool exact = true;
    for (std::size_t m = 1; m <= 12; ++m) {
        ad::Tape tape;
        const std::size_t n = 7;
        std::vector<std::size_t> k(n);
        std::vector<int> ev(n, 1);
        for (std::size_t i = 0; i < n; ++i) k[i] = 1 + rng() % (m + 1);
        const double loss = mtlr_nll(tape.leaf(Tensor::zeros({n, m})), k, ev).value().item();
        const double per = std::log(static_cast<double>(m + 1));
        double expect = 0.0;
        for (std::size_t i = 0; i < n; ++i) expect += per;
        exact = exact && loss == expect;
    }
    out.check(exact, "zero-parameter loss differs from log(m+1) per subject");

    double worst_lr = 0.0;
    for (int rep = 0; rep < 20; ++rep) {
        const std::size_t n = 30;
        const Tensor s = random_tensor({n, 1}, rng, -4, 4);
        std::vector<std::size_t> k(n);
        std::vector<int> ev(n, 1);
        double ref = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            k[i] = 1 + rng() % 2;
            const double y = k[i] == 1 ? 1.0 : 0.0;
            const double pr = 1.0 / (1.0 + std::exp(-s[i]));
            ref -= y * std::log(pr) + (1.0 - y) * std::log(1.0 - pr);
        }
        ad::Tape tape;
        worst_lr = std::max(worst_lr, std::abs(mtlr_nll(tape.leaf(s), k, ev).value().item() - ref));
    }
    out.check(worst_lr <= 1e-10, "m=1 differs from logistic NLL by " + fmt(worst_lr));

    std::size_t bad_curves = 0;
    std::normal_distribution<double> g(0.0, 2.0);
    for (int model = 0; model < 1000; ++model) {
        const std::size_t m = 1 + rng() % 12, p = 1 + rng() % 4;
        std::vector<double> grid(m);
        for (std::size_t j = 0; j < m; ++j) grid[j] = static_cast<double>(j + 1);
        MtlrConfig cfg;
        if (model % 2) cfg.hidden = {3};
        cfg.seed = static_cast<std::uint64_t>(model);
        MtlrModel mdl = mtlr_init(p, grid, cfg);
        for (auto& [name, t] : mdl.params.entries())
            for (auto& v : t.data()) v = g(rng);
        std::vector<double> x(p);
        for (auto& v : x) v = g(rng);
        const SurvivalCurve c = mtlr_survival(mdl, x);
        for (std::size_t j = 1; j < c.survival.size(); ++j)
            if (c.survival[j] > c.survival[j - 1] || c.survival[j] < 0.0) {
                ++bad_curves;
                break;
            }
    }
    out.check(bad_curves == 0, std::to_string(bad_curves) + " of 1000 curves increase");
    out.note("log(m+1) exact for m=1..12; logistic max diff " + fmt(worst_lr) + "; 1000 curves nonincreasing");
}

// ---------------------------------------------------------------------------
// 6. Toy segmentation comparability

json run_task(const fs::path& ehr, const fs::path& out, const std::string& task, std::uint64_t seed,
              const json& extra = json::object()) {
    json j{{"task", task}, {"seed", seed}, {"data", {{"ehr", ehr.string()}}}, {"output", out.string()},
           {"cv", {{"scheme", "kfold"}, {"k", 5}, {"max_folds", 1}}}};
    j.merge_patch(extra);
    const RunReport r = run_experiment(ExperimentConfig::from_json(j));
    if (r.any_fold_failed()) {
        const auto& e = *r.folds.front().error;
        throw Error(task + " fold failed in " + e.stage + ": " + e.type + ": " + e.message);
    }
    return r.folds.front().metrics;
}

void criterion_segmentation(Outcome& out) {
    const auto t0 = std::chrono::steady_clock::now();
    Scratch dir("seg");
    SyntheticConfig sc;
    sc.n = 200;
    sc.seed = 606;
    sc.with_volumes = true;
    sc.volume_shape = {32, 32, 16};
    write_synthetic_dataset(gen_synthetic_cohort(sc), dir.path / "data");
    const fs::path ehr = dir.path / "data" / "cohort.csv";
    // Toy preset: 20 epochs; one 160/40 split of a 5-fold partition.
    const double d2 = run_task(ehr, dir.path / "seg2d", "seg2d-si", 6).at("dsc").get<double>();
    const double d3 = run_task(ehr, dir.path / "seg3d", "seg3d", 6).at("dsc").get<double>();
    const double secs = seconds_since(t0);
    out.check(d2 >= 0.85, "2D super-image DSC " + fmt(d2));
    out.check(d3 >= 0.85, "3D DSC " + fmt(d3));
    out.check(std::abs(d2 - d3) <= 0.05, "|DSC gap| " + fmt(std::abs(d2 - d3)));
    out.check(secs <= 15 * 60, "runtime " + fmt(secs) + " s");
    out.note("DSC 2D-SI " + fmt(d2) + ", 3D " + fmt(d3) + ", gap " + fmt(std::abs(d2 - d3)));
}

// ---------------------------------------------------------------------------
// 7. Model stats

std::uint64_t closed_form_params(const LayerSpec& l) {
    const std::uint64_t taps = l.rank == 3 ? l.kernel * l.kernel * l.kernel : l.kernel * l.kernel;
    switch (l.kind) {
        case LayerKind::conv:
        case LayerKind::transposed_conv: return taps * l.c_in * l.c_out + l.c_out;
        case LayerKind::norm: return 2 * l.c_out;
        case LayerKind::linear: return l.c_in * l.c_out + l.c_out;
        default: return 0;
    }
}

// Multiplications of a naive loop: every output voxel, kernel tap and channel pair.
std::uint64_t brute_conv_macs(std::size_t cin, std::size_t cout, std::size_t k, std::size_t stride, std::size_t pad,
                              const Shape& in) {
    std::uint64_t count = 0;
    Shape o;
    for (std::size_t e : in) o.push_back((e + 2 * pad - k) / stride + 1);
    const bool r3 = in.size() == 3;
    for (std::size_t co = 0; co < cout; ++co)
        for (std::size_t a = 0; a < o[0]; ++a)
            for (std::size_t b = 0; b < o[1]; ++b)
                for (std::size_t c = 0; c < (r3 ? o[2] : 1); ++c)
                    for (std::size_t ci = 0; ci < cin; ++ci)
                        for (std::size_t i = 0; i < k; ++i)
                            for (std::size_t j = 0; j < k; ++j)
                                for (std::size_t l = 0; l < (r3 ? k : 1); ++l) ++count;
    return count;
}

// Scatter-style transposed convolution: each input voxel adds one kernel per channel pair.
std::uint64_t brute_tconv_macs(std::size_t cin, std::size_t cout, std::size_t k, const Shape& in) {
    std::uint64_t count = 0;
    const bool r3 = in.size() == 3;
    for (std::size_t ci = 0; ci < cin; ++ci)
        for (std::size_t a = 0; a < in[0]; ++a)
            for (std::size_t b = 0; b < in[1]; ++b)
                for (std::size_t c = 0; c < (r3 ? in[2] : 1); ++c)
                    for (std::size_t co = 0; co < cout; ++co)
                        for (std::size_t i = 0; i < k; ++i)
                            for (std::size_t j = 0; j < k; ++j)
                                for (std::size_t l = 0; l < (r3 ? k : 1); ++l) ++count;
    return count;
}

LayerSpec layer(LayerKind kind, int rank, std::size_t cin, std::size_t cout, std::size_t k = 1, std::size_t stride = 1,
                std::size_t pad = 0) {
    LayerSpec l;
    l.kind = kind;
    l.rank = rank;
    l.c_in = cin;
    l.c_out = cout;
    l.kernel = k;
    l.stride = stride;
    l.padding = pad;
    l.name = "probe";
    return l;
}

void criterion_model_stats(Outcome& out) {
    std::size_t layers_checked = 0;
    for (int rank : {2, 3}) {
        for (const UNetConfig& base : {UNetConfig::toy(rank), UNetConfig{}}) {
            UNetConfig c = base;
            c.rank = rank;
            const SegNet net = make_unet(c, 1);
            std::uint64_t expect = 0;
            for (const auto& l : net.layers) {
                out.check(l.param_count() == closed_form_params(l), "layer " + l.name + " param count");
                expect += closed_form_params(l);
                ++layers_checked;
            }
            out.check(model_stats(net, Shape(static_cast<std::size_t>(rank), 32)).params == expect,
                      "network total differs from the per-layer sum");
            out.check(net.params.scalar_count() == expect, "stored parameters differ from the closed form");
        }
    }
    UNetConfig c3, c2;
    c2.rank = 2;
    const double p3 = static_cast<double>(model_stats(make_unet(c3, 1), {64, 64, 64}).params);
    const double p2 = static_cast<double>(model_stats(make_unet(c2, 1), {64, 64}).params);
    const double ratio = p3 / p2;
    out.check(ratio >= 2.5 && ratio <= 3.5, "3D/2D parameter ratio " + fmt(ratio));

    std::size_t probes = 0;
    for (int rank : {2, 3}) {
        const Shape probe(static_cast<std::size_t>(rank), 7);
        struct Case {
            std::size_t cin, cout, k, stride, pad;
        };
        for (const Case c : {Case{1, 8, 3, 1, 0}, Case{3, 4, 3, 1, 1}, Case{2, 5, 3, 2, 1}, Case{4, 2, 1, 1, 0},
                             Case{2, 3, 2, 2, 0}}) {
            const std::vector<LayerSpec> net{layer(LayerKind::input, rank, c.cin, c.cin),
                                             layer(LayerKind::conv, rank, c.cin, c.cout, c.k, c.stride, c.pad)};
            out.check(model_stats(net, {probe}).macs == brute_conv_macs(c.cin, c.cout, c.k, c.stride, c.pad, probe),
                      "conv MACs on a probe");
            ++probes;
        }
        const std::vector<LayerSpec> up{layer(LayerKind::input, rank, 3, 3),
                                        layer(LayerKind::transposed_conv, rank, 3, 4, 2, 2, 0)};
        out.check(model_stats(up, {probe}).macs == brute_tconv_macs(3, 4, 2, probe), "transposed conv MACs");
        ++probes;
    }
    out.note(std::to_string(layers_checked) + " layers match closed forms; 3D/2D param ratio " + fmt(ratio) + " (" +
             fmt(p3 / 1e6, 3) + "M vs " + fmt(p2 / 1e6, 3) + "M); " + std::to_string(probes) + " MAC probes exact");
}

// ---------------------------------------------------------------------------
// 8. Transformer invariants

Tensor permute_rows(const Tensor& t, const std::vector<std::size_t>& perm) {
    const std::size_t k = t.dim(1);
    Tensor out(t.shape());
    for (std::size_t i = 0; i < perm.size(); ++i)
        for (std::size_t j = 0; j < k; ++j) out[i * k + j] = t[perm[i] * k + j];
    return out;
}

void criterion_transformer(Outcome& out) {
    std::mt19937_64 rng(808);
    VitConfig c;
    c.embed = 32;
    c.heads = 4;
    c.layers = 4;
    c.max_tokens = 40;
    ParamStore store;
    vit_init(store, c, rng);
    for (auto& [name, t] : store.entries())
        if (name.find(".w") != std::string::npos)
            for (auto& v : t.data()) v *= 10.0;

    double worst_row = 0.0;
    for (int rep = 0; rep < 50; ++rep) {
        const std::size_t n = 1 + rng() % 40;
        ad::Tape tape;
        const Tensor a = attention_probs(tape.constant(random_tensor({n, 8}, rng, -4, 4)),
                                         tape.constant(random_tensor({n, 8}, rng, -4, 4)))
                             .value();
        for (std::size_t i = 0; i < n; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) s += a[i * n + j];
            worst_row = std::max(worst_row, std::abs(s - 1.0));
        }
    }
    out.check(worst_row <= 1e-12, "attention row sum off by " + fmt(worst_row));

    VitConfig nopos = c;
    nopos.positional = false;
    const Tensor z0 = random_tensor({40, 32}, rng);
    std::vector<std::size_t> perm(40);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    double equiv = 0.0;
    {
        ad::Tape tape;
        ParamBinding bind(tape, store);
        const EncoderOutput a = encode(bind, nopos, tape.constant(z0));
        const EncoderOutput b = encode(bind, nopos, tape.constant(permute_rows(z0, perm)));
        equiv = max_abs_diff(b.final.value(), permute_rows(a.final.value(), perm));
    }
    out.check(equiv <= 1e-9, "permutation equivariance error " + fmt(equiv));

    ParamStore zeroed = store;
    for (const char* n : {"attn.o.w", "attn.o.b", "mlp.2.w", "mlp.2.b"})
        for (auto& v : zeroed.get(std::string("vit.block0.") + n).data()) v = 0.0;
    ad::Tape tape;
    ParamBinding bind(tape, zeroed);
    const Tensor z = random_tensor({17, 32}, rng);
    const bool identity = transformer_block(bind, c, 0, tape.constant(z)).value() == z;
    out.check(identity, "zero-output-projection block is not the identity");
    out.note("row sums within " + fmt(worst_row) + "; equivariance error " + fmt(equiv) + "; identity exact");
}

// ---------------------------------------------------------------------------
// 9. Joint TMSS toy run

void criterion_tmss(Outcome& out) {
    const auto t0 = std::chrono::steady_clock::now();
    Scratch dir("tmss");
    SyntheticConfig sc;
    sc.n = 200;
    sc.seed = 909;
    sc.beta = {1.0, 0.5};        // tumour size and one EHR covariate drive the hazard
    sc.size_covariate = 0;
    sc.hide_size_covariate = true;  // size reaches the model only through the images
    sc.with_volumes = true;
    write_synthetic_dataset(gen_synthetic_cohort(sc), dir.path / "data");
    const json m = run_task(dir.path / "data" / "cohort.csv", dir.path / "run", "tmss", 9);
    const double secs = seconds_since(t0);
    const double tmss = m.at("c_index").get<double>();
    if (!m.contains("c_index_cox_ehr")) {
        out.check(false, "EHR-only Cox baseline missing");
        return;
    }
    const double cox = m.at("c_index_cox_ehr").get<double>();
    out.check(tmss >= cox, "TMSS c-index " + fmt(tmss) + " below Cox " + fmt(cox));
    out.check(secs <= 20 * 60, "runtime " + fmt(secs) + " s");
    out.note("c-index TMSS " + fmt(tmss) + " vs EHR-only Cox " + fmt(cox) + "; DSC " + fmt(m.at("dsc").get<double>()));
}

// ---------------------------------------------------------------------------
// 10. Determinism

void criterion_determinism(Outcome& out) {
    Scratch dir("det");
    SyntheticConfig sc;
    sc.n = 60;
    sc.seed = 1010;
    sc.with_volumes = true;
    sc.volume_shape = {16, 16, 8};
    write_synthetic_dataset(gen_synthetic_cohort(sc), dir.path / "data");
    const fs::path ehr = dir.path / "data" / "cohort.csv";
    std::size_t runs = 0;
    for (const char* task : {"surv-cox", "surv-mtlr", "surv-nmtlr", "fusion", "seg2d-si", "seg3d", "unetr", "tmss"}) {
        json j{{"task", task},
               {"seed", 10},
               {"data", {{"ehr", ehr.string()}}},
               {"output", (dir.path / task).string()},
               {"cv", {{"k", 3}}}};
        if (is_imaging_task(parse_task(task))) j["optimizer"] = {{"epochs", 2}, {"batch", 2}};
        ExperimentConfig cfg = ExperimentConfig::from_json(j);
        // The rerun uses another worker count: per-sample gradients are summed
        // in a fixed order, so the thread layout must not show in the report.
        cfg.optimizer.workers = 1;
        run_experiment(cfg);
        const std::string first = slurp(dir.path / task / "report.json");
        cfg.optimizer.workers = 3;
        run_experiment(cfg);
        const std::string second = slurp(dir.path / task / "report.json");
        out.check(!first.empty() && first == second, std::string(task) + " report differs between runs");
        ++runs;
    }
    out.note(std::to_string(runs) + " tasks rerun (1 vs 3 workers): reports byte-identical");
}

struct Criterion {
    int id;
    const char* title;
    std::function<void(Outcome&)> run;
};

}  // namespace

int main(int argc, char** argv) {
    const std::vector<Criterion> all{
        {1, "gradient suite", criterion_gradients},
        {2, "super-image bijectivity", criterion_superimage},
        {3, "c-index oracle", criterion_cindex},
        {4, "Cox recovery", criterion_cox},
        {5, "MTLR correctness", criterion_mtlr},
        {6, "toy segmentation comparability", criterion_segmentation},
        {7, "model stats", criterion_model_stats},
        {8, "transformer invariants", criterion_transformer},
        {9, "joint TMSS toy run", criterion_tmss},
        {10, "determinism", criterion_determinism},
    };
    // Runtime budgets in seconds (0 = none stated).
    const double budget[11] = {0, 60, 30, 0, 5, 0, 15 * 60, 0, 0, 20 * 60, 0};

    std::vector<int> selected;
    for (int i = 1; i < argc; ++i) {
        const int id = std::atoi(argv[i]);
        if (id < 1 || id > 10) {
            std::cerr << "usage: acceptance [criterion 1-10 ...]\n";
            return 2;
        }
        selected.push_back(id);
    }
    if (selected.empty())
        for (const auto& c : all) selected.push_back(c.id);

    int failed = 0;
    for (int id : selected) {
        const Criterion& c = all[static_cast<std::size_t>(id - 1)];
        Outcome out;
        const auto t0 = std::chrono::steady_clock::now();
        try {
            c.run(out);
        } catch (const std::exception& e) {
            out.check(false, std::string("exception: ") + e.what());
        }
        const double secs = seconds_since(t0);
        if (budget[id] > 0.0) out.check(secs <= budget[id], "over the " + fmt(budget[id]) + " s budget");
        failed += out.passed() ? 0 : 1;
        std::printf("%s criterion %d (%s): %s [%.1f s]\n", out.passed() ? "PASS" : "FAIL", id, c.title,
                    out.summary().c_str(), secs);
        std::fflush(stdout);
    }
    return failed == 0 ? 0 : 1;
}
