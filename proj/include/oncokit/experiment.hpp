#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "oncokit/ehr.hpp"
#include "oncokit/fusion.hpp"
#include "oncokit/preprocess.hpp"
#include "oncokit/synthetic.hpp"
#include "oncokit/train.hpp"

namespace oncokit {

enum class Task { seg2d_si, seg3d, unetr, surv_cox, surv_mtlr, surv_nmtlr, fusion, tmss };

/// "seg2d-si", "seg3d", "unetr", "surv-cox", "surv-mtlr", "surv-nmtlr", "fusion", "tmss".
std::string task_name(Task t);
/// Inverse of task_name; ConfigError on an unknown name.
Task parse_task(const std::string& name);
bool is_segmentation_task(Task t);
/// Tasks that read CT/PET/mask volumes.
bool is_imaging_task(Task t);

struct CvScheme {
    enum class Kind { kfold, leave_one_center_out };
    Kind kind = Kind::kfold;
    std::size_t k = 5;          // kfold only
    std::size_t max_folds = 0;  // evaluate only the first folds; 0 = all
};

/// One held-out fold: subject indices into the cohort.
struct Fold {
    std::string name;  // "fold0", ... or the held-out center
    std::vector<std::size_t> train;
    std::vector<std::size_t> test;
};

/// Deterministic partition of the cohort. k-fold shuffles subject indices with
/// `seed` and deals them into k folds whose sizes differ by at most one;
/// leave-one-center-out yields one fold per center (sorted by center name)
/// holding exactly that center's subjects. Throws ConfigError for k < 2,
/// k > n, or fewer than two centers.
std::vector<Fold> cv_split(const Cohort& cohort, const CvScheme& scheme, std::uint64_t seed);

/// Fully resolved experiment configuration. Every field appears in to_json(),
/// so reports echo the complete configuration.
struct ExperimentConfig {
    Task task = Task::seg3d;
    std::uint64_t seed = 0;
    std::string preset = "toy";  // "toy" | "paper": network sizes and optimizer defaults
    std::filesystem::path ehr;   // cohort CSV; volume paths in it are relative to data_root
    std::filesystem::path data_root;  // defaults to the CSV's directory
    std::filesystem::path output;
    TrainOptions optimizer;
    bool augment = false;
    AugmentConfig augment_config = AugmentConfig::identity();
    CvScheme cv;
    bool resume = false;

    // Task settings.
    bool ehr_zscore = true;         // z-score covariates with training-fold statistics
    std::string si_grid = "auto";   // seg2d-si mosaic
    double threshold = 0.5;         // mask threshold on sigmoid outputs
    double tmss_beta = 0.3;
    double mtlr_C = 1.0;
    std::size_t mtlr_m = 0;
    std::vector<std::size_t> nmtlr_hidden{16};
    double cox_ridge = 0.0;
    FusionMode fusion_mode = FusionMode::normalized;
    bool save_predictions = true;

    /// Network description for the imaging tasks under the chosen preset.
    nlohmann::json network() const;

    nlohmann::json to_json() const;
    /// Reads a configuration. Keys absent from `j` take the defaults of the
    /// preset named in `j` (toy when absent). Unknown keys, a missing seed and
    /// malformed values throw ConfigError.
    static ExperimentConfig from_json(const nlohmann::json& j);
    /// Range checks plus existence of the referenced input paths.
    void validate() const;
};

/// Applies `key=value` overrides to a configuration document. Keys are dotted
/// paths ("optimizer.lr"); values are parsed as JSON when possible and taken as
/// strings otherwise. Throws ConfigError on a malformed override.
void apply_overrides(nlohmann::json& config, const std::vector<std::string>& overrides);

/// Reads a JSON configuration file and applies overrides.
ExperimentConfig load_experiment_config(const std::filesystem::path& path, const std::vector<std::string>& overrides);

/// Why a fold aborted: exception class, the stage it was in, and its message.
struct FoldError {
    std::string type;
    std::string stage;
    std::string message;
};

struct FoldResult {
    std::string name;
    std::size_t n_train = 0;
    std::size_t n_test = 0;
    std::vector<std::string> test_ids;
    nlohmann::json metrics = nlohmann::json::object();  // metric name -> value
    nlohmann::json model = nlohmann::json::object();    // small model summary (e.g. Cox coefficients)
    std::optional<FoldError> error;                    // set when the fold aborted
    bool resumed = false;                              // loaded from a previous run

    nlohmann::json to_json() const;
    static FoldResult from_json(const nlohmann::json& j);
};

struct RunReport {
    nlohmann::json config;
    std::vector<FoldResult> folds;
    nlohmann::json aggregate = nlohmann::json::object();  // metric -> {mean, std, n}
    nlohmann::json versions = nlohmann::json::object();
    double wall_clock_seconds = 0.0;
    std::vector<double> fold_seconds;

    /// Deterministic part of the report: everything except wall-clock timings,
    /// which go to timing_json() so that reruns produce identical reports.
    nlohmann::json to_json() const;
    nlohmann::json timing_json() const;
    bool any_fold_failed() const;
};

/// Library versions recorded in reports.
nlohmann::json version_info();

/// Trains and evaluates every fold, writing under cfg.output:
///   report.json              the RunReport (deterministic)
///   timing.json              wall-clock seconds per fold and in total
///   <fold>/result.json       fold metrics with the configuration used (resume marker)
///   <fold>/model.*           checkpoint (.okpt networks, .json survival models)
///   <fold>/predictions.csv   survival tasks: id,risk
///   <fold>/pred/<id>.mvol    segmentation tasks: predicted masks
/// An error inside a fold aborts that fold only; it is recorded in the report
/// and the remaining folds continue. With cfg.resume, folds whose result.json
/// holds the same configuration are loaded instead of retrained.
RunReport run_experiment(const ExperimentConfig& cfg);

/// Per-case and aggregate metrics of predictions against ground truth.
struct EvalReport {
    nlohmann::json report;
    std::vector<std::string> missing;  // truth cases without a prediction
};

/// Segmentation tasks: every *.mvol in `truth` is matched by file name in
/// `pred` (DSC, precision, recall per case). Survival tasks: `pred` is an
/// `id,risk` CSV (or a directory holding predictions.csv) and `truth` a cohort
/// CSV; reports the c-index over matched ids. Missing counterparts are listed
/// and skipped.
EvalReport evaluate(const std::filesystem::path& pred, const std::filesystem::path& truth, Task task);

/// Writes every *.mvol of `in` as a super image (depth 1) to `out`, with a
/// sidecar <name>.si.json recording the grid and source extents. Files that
/// fail are reported and skipped. Returns the per-file error messages.
std::vector<std::string> convert_si(const std::filesystem::path& in, const std::filesystem::path& out,
                                    const std::string& grid = "auto");
/// Inverse of convert_si using the sidecars.
std::vector<std::string> invert_si(const std::filesystem::path& in, const std::filesystem::path& out);

struct PrepOptions {
    double spacing = 1.0;           // isotropic target spacing in mm
    std::optional<Extents3> crop;   // crop extent; none keeps the resampled extent
};

/// Preprocesses every subject of a cohort CSV: isotropic resampling, CT
/// windowing, PET z-scoring, and an optional crop centred on the mask's
/// bounding box (the volume centre when the mask is empty). Writes
/// ct/, pet/, mask/<id>.mvol and cohort.csv under `out`. Subjects that fail are
/// reported and left out of the written cohort. Returns per-subject errors.
std::vector<std::string> prep_cohort(const std::filesystem::path& ehr, const std::filesystem::path& data_root,
                                     const std::filesystem::path& out, const PrepOptions& options = {});

/// Writes a synthetic cohort as cohort.csv plus per-subject CT/PET/mask MVOL
/// files (when it has volumes) under `dir`.
void write_synthetic_dataset(const SyntheticCohort& data, const std::filesystem::path& dir);

/// Applies a saved model to every subject of a cohort CSV and writes the
/// results to `out`: survival models (Cox / MTLR JSON) write predictions.csv,
/// segmentation and TMSS checkpoints write <id>.mvol masks (and TMSS also
/// predictions.csv). Returns the number of subjects processed.
std::size_t predict_cohort(const std::filesystem::path& model, const std::filesystem::path& ehr,
                           const std::filesystem::path& out, const std::filesystem::path& data_root = {},
                           double threshold = 0.5);

/// Reads an `id,risk` CSV.
std::vector<std::pair<std::string, double>> read_predictions(const std::filesystem::path& path);
void write_predictions(const std::filesystem::path& path, const std::vector<std::pair<std::string, double>>& rows);

}  // namespace oncokit
