#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace oncokit {

struct Subject {
    std::string id;
    std::vector<double> covariates;
    double time = 0.0;  // months
    int event = 0;      // 1 = event observed, 0 = censored
    std::string center;
    std::optional<std::string> ct_path;
    std::optional<std::string> pet_path;
    std::optional<std::string> mask_path;
};

struct FeatureStats {
    double mean = 0.0;
    double std = 1.0;
};

/// feature name -> {mean, std}; serialized as the JSON sidecar.
using NormStats = std::map<std::string, FeatureStats>;

nlohmann::json stats_to_json(const NormStats& s);
NormStats stats_from_json(const nlohmann::json& j);

struct Cohort {
    std::vector<Subject> subjects;
    std::vector<std::string> feature_names;
    std::string time_unit = "months";

    std::size_t size() const noexcept { return subjects.size(); }
    std::size_t width() const noexcept { return feature_names.size(); }
    /// Unique ids and constant covariate width; throws DataError otherwise.
    void validate() const;
    std::vector<double> times() const;
    std::vector<int> events() const;
    /// Sub-cohort with the listed subject indices, in that order.
    Cohort subset(const std::vector<std::size_t>& idx) const;
};

struct EhrOptions {
    /// z-score the numeric (non one-hot) features.
    bool zscore = false;
    /// Reuse stored statistics (predict time) instead of fitting new ones.
    std::optional<NormStats> stats;
};

struct EhrTable {
    Cohort cohort;
    NormStats stats;  // fitted or reused statistics; empty when zscore is off
};

/// Reads `id,time,event,center,<features...>`. Optional columns named
/// ct_path, pet_path and mask_path are taken as volume references, not
/// features. A feature column holding any non-numeric value is categorical and
/// is one-hot expanded in place (levels sorted, named "column=level").
EhrTable load_ehr(const std::filesystem::path& path, const EhrOptions& opt = {});
EhrTable parse_ehr(const std::string& csv_text, const EhrOptions& opt = {});

/// Writes a cohort back as CSV with purely numeric features.
void write_ehr(const Cohort& c, const std::filesystem::path& path);

/// Z-scores covariates in place by name; features absent from `stats` are untouched.
void apply_stats(Cohort& c, const NormStats& stats);
/// Population statistics of every covariate column.
NormStats fit_stats(const Cohort& c);

}  // namespace oncokit
