#include "oncokit/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "oncokit/error.hpp"

namespace oncokit {

void SyntheticConfig::validate() const {
    if (n < 2) throw ConfigError("synthetic cohort needs n >= 2");
    if (!(censor_frac >= 0.0 && censor_frac < 1.0)) throw ConfigError("censor_frac must lie in [0, 1)");
    if (!(weibull_lambda > 0.0) || !(weibull_rho > 0.0)) throw ConfigError("Weibull parameters must be positive");
    if (n_centers == 0) throw ConfigError("n_centers must be >= 1");
    if (with_volumes) {
        if (beta.empty() || size_covariate >= beta.size())
            throw ConfigError("size_covariate must index a covariate of beta");
        for (auto e : volume_shape)
            if (e < 4) throw ConfigError("synthetic volumes need extents >= 4");
    }
    if (hide_size_covariate && size_covariate >= beta.size()) throw ConfigError("size_covariate out of range");
}

double synthetic_radius(double x, const Extents3& shape) {
    // Logistic map of the covariate onto [15%, 35%] of the in-plane extent.
    const double lo = 0.15, hi = 0.35;
    const double frac = lo + (hi - lo) / (1.0 + std::exp(-x));
    return frac * static_cast<double>(std::min(shape[0], shape[1]));
}

SyntheticCohort gen_synthetic_cohort(const SyntheticConfig& cfg) {
    cfg.validate();
    std::mt19937_64 rng(cfg.seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const std::size_t p = cfg.beta.size();

    SyntheticCohort out;
    out.latent.assign(cfg.n, std::vector<double>(p));
    for (auto& row : out.latent)
        for (auto& x : row) x = gauss(rng);

    out.true_risk.resize(cfg.n);
    out.event_times.resize(cfg.n);
    for (std::size_t i = 0; i < cfg.n; ++i) {
        double eta = 0.0;
        for (std::size_t k = 0; k < p; ++k) eta += cfg.beta[k] * out.latent[i][k];
        out.true_risk[i] = eta;
        // 1 - U keeps the argument of the log in (0, 1].
        const double u = 1.0 - unit(rng);
        out.event_times[i] = std::pow(-std::log(u) / (cfg.weibull_lambda * std::exp(eta)), 1.0 / cfg.weibull_rho);
        out.event_times[i] = std::max(out.event_times[i], 1e-6);
    }

    // Uniform censoring on [0, c]: P(censored | T) = min(T / c, 1). Choose c by
    // bisection so the mean over the drawn T equals censor_frac.
    double c_max = std::numeric_limits<double>::infinity();
    if (cfg.censor_frac > 0.0) {
        auto frac = [&](double c) {
            double s = 0.0;
            for (double t : out.event_times) s += std::min(t / c, 1.0);
            return s / static_cast<double>(cfg.n);
        };
        double lo = 1e-12, hi = *std::max_element(out.event_times.begin(), out.event_times.end());
        while (frac(hi) > cfg.censor_frac) hi *= 2.0;
        for (int it = 0; it < 200; ++it) {
            const double mid = 0.5 * (lo + hi);
            (frac(mid) > cfg.censor_frac ? lo : hi) = mid;
        }
        c_max = 0.5 * (lo + hi);
    }

    auto& cohort = out.cohort;
    for (std::size_t k = 0; k < p; ++k)
        if (!(cfg.hide_size_covariate && k == cfg.size_covariate)) cohort.feature_names.push_back("x" + std::to_string(k));
    for (std::size_t i = 0; i < cfg.n; ++i) {
        Subject s;
        char buf[32];
        std::snprintf(buf, sizeof buf, "S%05zu", i);
        s.id = buf;
        const double c = std::isinf(c_max) ? c_max : c_max * unit(rng);
        const double t = out.event_times[i];
        s.event = t <= c ? 1 : 0;
        s.time = std::max(s.event ? t : c, 1e-6);
        s.center = "C" + std::to_string(i % cfg.n_centers);
        for (std::size_t k = 0; k < p; ++k)
            if (!(cfg.hide_size_covariate && k == cfg.size_covariate)) s.covariates.push_back(out.latent[i][k]);
        cohort.subjects.push_back(std::move(s));
    }

    if (cfg.with_volumes) {
        const auto& sh = cfg.volume_shape;
        const Spacing3 sp{1.0f, 1.0f, 1.0f};
        for (std::size_t i = 0; i < cfg.n; ++i) {
            const double r = synthetic_radius(out.latent[i][cfg.size_covariate], sh);
            const double rd = r * static_cast<double>(sh[2]) / static_cast<double>(std::min(sh[0], sh[1]));
            double centre[3];
            for (int a = 0; a < 3; ++a) {
                const double jitter = 0.1 * static_cast<double>(sh[a]);
                centre[a] = (sh[a] - 1) / 2.0 + jitter * (2.0 * unit(rng) - 1.0);
            }
            const double radii[3] = {r, r, std::max(rd, 1.0)};
            Volume ct(sh, sp, Modality::CT), pet(sh, sp, Modality::PET), mask(sh, sp, Modality::MASK);
            // Smooth CT-like background: a broad tissue blob plus noise, tumour slightly denser.
            for (std::size_t h = 0; h < sh[0]; ++h)
                for (std::size_t w = 0; w < sh[1]; ++w)
                    for (std::size_t d = 0; d < sh[2]; ++d) {
                        const double q[3] = {static_cast<double>(h), static_cast<double>(w), static_cast<double>(d)};
                        double e = 0.0, body = 0.0;
                        for (int a = 0; a < 3; ++a) {
                            const double z = (q[a] - centre[a]) / radii[a];
                            e += z * z;
                            const double y = (q[a] - (sh[a] - 1) / 2.0) / (0.45 * sh[a]);
                            body += y * y;
                        }
                        const bool inside = e <= 1.0;
                        mask.at(h, w, d) = inside ? 1.0f : 0.0f;
                        const double tissue = body <= 1.0 ? 0.05 : -0.9;
                        ct.at(h, w, d) = static_cast<float>(
                            std::clamp(tissue + (inside ? 0.1 : 0.0) + cfg.ct_noise * gauss(rng), -1.0, 1.0));
                        const double uptake = 1.0 + 2.0 * std::exp(-0.5 * std::max(0.0, e - 1.0) * 4.0) *
                                                        (inside ? 1.0 : 0.6);
                        pet.at(h, w, d) = static_cast<float>(uptake + cfg.pet_noise * gauss(rng));
                    }
            ct.set_normalized(true);
            // PET is z-scored per subject, like real inputs.
            double mean = 0.0, var = 0.0;
            for (float x : pet.data()) mean += x;
            mean /= static_cast<double>(pet.size());
            for (float x : pet.data()) var += (x - mean) * (x - mean);
            const double sd = std::sqrt(var / static_cast<double>(pet.size())) + 1e-8;
            for (auto& x : pet.data()) x = static_cast<float>((x - mean) / sd);
            pet.set_normalized(true);
            out.ct.push_back(std::move(ct));
            out.pet.push_back(std::move(pet));
            out.mask.push_back(std::move(mask));
        }
    }
    return out;
}

}  // namespace oncokit
