#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "oncokit/ehr.hpp"
#include "oncokit/volume.hpp"

namespace oncokit {

struct SyntheticConfig {
    std::size_t n = 200;
    std::uint64_t seed = 0;
    /// One coefficient per latent covariate; covariates are iid N(0, 1).
    std::vector<double> beta{1.0, -0.5};
    double weibull_lambda = 0.02;  // scale
    double weibull_rho = 1.5;      // shape
    /// Expected fraction of censored subjects, in [0, 1). 0 means none.
    double censor_frac = 0.2;
    std::size_t n_centers = 3;

    bool with_volumes = false;
    Extents3 volume_shape{32, 32, 16};
    /// Covariate that sets the tumour size (radius increases with it).
    std::size_t size_covariate = 0;
    /// Drop the size covariate from the EHR table, so that it is only visible
    /// through the images.
    bool hide_size_covariate = false;
    double pet_noise = 0.35;
    double ct_noise = 0.1;

    void validate() const;
};

struct SyntheticCohort {
    Cohort cohort;
    /// All latent covariates, including a hidden size covariate ([n][p]).
    std::vector<std::vector<double>> latent;
    /// True linear predictor beta' x per subject.
    std::vector<double> true_risk;
    /// Uncensored event times.
    std::vector<double> event_times;
    // Per-subject volumes when requested (CT normalized to [-1, 1], PET z-scored).
    std::vector<Volume> ct;
    std::vector<Volume> pet;
    std::vector<Volume> mask;
};

/// Weibull-Cox cohort: T = (-ln U / (lambda exp(beta' x)))^(1/rho) with
/// independent uniform censoring on [0, c] and c calibrated so that the expected
/// censored fraction equals censor_frac for the drawn event times.
SyntheticCohort gen_synthetic_cohort(const SyntheticConfig& cfg);

/// Tumour radius (voxels along H and W) for a size covariate value; increasing.
double synthetic_radius(double size_covariate, const Extents3& shape);

}  // namespace oncokit
