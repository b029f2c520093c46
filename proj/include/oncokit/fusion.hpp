#pragma once

#include <span>
#include <vector>

namespace oncokit {

enum class FusionMode { normalized, raw };

/// Averages two risk lists subject by subject. Both inputs must increase with
/// earlier expected events (Cox exp(w'x), MTLR cumulative-incidence mass). In
/// `normalized` mode each list is z-scored across the cohort first (a list with
/// zero spread becomes all zeros).
std::vector<double> deep_fusion_risk(std::span<const double> cox_risk, std::span<const double> mtlr_risk,
                                     FusionMode mode = FusionMode::normalized);

/// (x - mean) / std with the population std; zeros when std == 0.
std::vector<double> zscore(std::span<const double> x);

}  // namespace oncokit
