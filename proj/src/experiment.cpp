#include "oncokit/experiment.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <mutex>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "oncokit/cox.hpp"
#include "oncokit/error.hpp"
#include "oncokit/metrics.hpp"
#include "oncokit/mtlr.hpp"
#include "oncokit/segnet.hpp"
#include "oncokit/superimage.hpp"
#include "oncokit/tmss.hpp"
#include "oncokit/volume.hpp"

namespace oncokit {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Tasks

namespace {

const std::vector<std::pair<Task, std::string>>& task_table() {
    static const std::vector<std::pair<Task, std::string>> t{
        {Task::seg2d_si, "seg2d-si"},     {Task::seg3d, "seg3d"},           {Task::unetr, "unetr"},
        {Task::surv_cox, "surv-cox"},     {Task::surv_mtlr, "surv-mtlr"},   {Task::surv_nmtlr, "surv-nmtlr"},
        {Task::fusion, "fusion"},         {Task::tmss, "tmss"}};
    return t;
}

}  // namespace

std::string task_name(Task t) {
    for (const auto& [task, name] : task_table())
        if (task == t) return name;
    throw ContractError("unknown task enumerator");
}

Task parse_task(const std::string& name) {
    for (const auto& [task, n] : task_table())
        if (n == name) return task;
    std::string known;
    for (const auto& [task, n] : task_table()) known += (known.empty() ? "" : ", ") + n;
    throw ConfigError("unknown task '" + name + "' (expected one of " + known + ")");
}

bool is_segmentation_task(Task t) { return t == Task::seg2d_si || t == Task::seg3d || t == Task::unetr; }

bool is_imaging_task(Task t) { return is_segmentation_task(t) || t == Task::tmss; }

// ---------------------------------------------------------------------------
// Cross-validation

std::vector<Fold> cv_split(const Cohort& cohort, const CvScheme& scheme, std::uint64_t seed) {
    const std::size_t n = cohort.size();
    std::vector<Fold> folds;
    if (scheme.kind == CvScheme::Kind::kfold) {
        if (scheme.k < 2) throw ConfigError("cv: k-fold needs k >= 2, got " + std::to_string(scheme.k));
        if (scheme.k > n)
            throw ConfigError("cv: k = " + std::to_string(scheme.k) + " exceeds the " + std::to_string(n) +
                              " subjects");
        // Fold assignment from a seeded shuffle (shared with the trainer's
        // explicit Fisher-Yates, so it is identical across standard libraries).
        const std::vector<std::size_t> order = epoch_order(n, seed, 0x63760000u);
        folds.resize(scheme.k);
        for (std::size_t f = 0; f < scheme.k; ++f) folds[f].name = "fold" + std::to_string(f);
        for (std::size_t pos = 0; pos < n; ++pos) folds[pos % scheme.k].test.push_back(order[pos]);
    } else {
        std::map<std::string, std::vector<std::size_t>> by_center;
        for (std::size_t i = 0; i < n; ++i) by_center[cohort.subjects[i].center].push_back(i);
        if (by_center.size() < 2)
            throw ConfigError("cv: leave-one-center-out needs at least two centers, found " +
                              std::to_string(by_center.size()));
        for (auto& [center, idx] : by_center) folds.push_back(Fold{"center-" + center, {}, idx});
    }
    for (auto& f : folds) {
        std::sort(f.test.begin(), f.test.end());
        std::vector<bool> held(n, false);
        for (std::size_t i : f.test) held[i] = true;
        for (std::size_t i = 0; i < n; ++i)
            if (!held[i]) f.train.push_back(i);
    }
    return folds;
}

// ---------------------------------------------------------------------------
// Configuration

namespace {

json augment_to_json(const AugmentConfig& a) {
    return {{"mirror_axes", a.mirror_axes},       {"rotation_min_deg", a.rotation_min_deg},
            {"rotation_max_deg", a.rotation_max_deg}, {"zoom_max", a.zoom_max},
            {"gamma_min", a.gamma_min},           {"gamma_max", a.gamma_max},
            {"elastic_grid", a.elastic_grid},     {"elastic_max_disp", a.elastic_max_disp}};
}

// Reads `key` of object `j` into `out` when present, reporting type errors as
// ConfigError with the dotted path.
template <class T>
void read_key(const json& j, const std::string& key, T& out, const std::string& path) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError("config: '" + path + key + "' has the wrong type (" + j.at(key).dump() + ")");
    }
}

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& path) {
    if (!j.is_object()) throw ConfigError("config: '" + (path.empty() ? std::string("<root>") : path) + "' must be an object");
    for (const auto& [k, v] : j.items())
        if (!allowed.contains(k)) throw ConfigError("config: unknown key '" + path + k + "'");
}

std::string fusion_mode_name(FusionMode m) { return m == FusionMode::normalized ? "normalized" : "raw"; }

}  // namespace

json ExperimentConfig::network() const {
    const bool toy = preset == "toy";
    switch (task) {
        case Task::seg2d_si: {
            UNetConfig c = toy ? UNetConfig::toy(2) : UNetConfig{};
            c.rank = 2;
            return {{"arch", "unet2d"}, {"unet", c.to_json()}};
        }
        case Task::seg3d: {
            UNetConfig c = toy ? UNetConfig::toy(3) : UNetConfig{};
            c.rank = 3;
            return {{"arch", "unet3d"}, {"unet", c.to_json()}};
        }
        case Task::unetr:
        case Task::tmss: {
            UnetrConfig c = UnetrConfig::toy();
            if (!toy) {
                c.vit = VitConfig::vit_b16();
                c.base = 16;
            }
            return {{"arch", task == Task::tmss ? "tmss" : "unetr"}, {"unetr", c.to_json()}};
        }
        default: return json::object();
    }
}

json ExperimentConfig::to_json() const {
    json cv_j{{"scheme", cv.kind == CvScheme::Kind::kfold ? "kfold" : "leave-one-center-out"},
              {"k", cv.k},
              {"max_folds", cv.max_folds}};
    json opt = optimizer.to_json();
    json aug = augment_to_json(augment_config);
    aug["enabled"] = augment;
    return {{"task", task_name(task)},
            {"seed", seed},
            {"preset", preset},
            {"data", {{"ehr", ehr.generic_string()}, {"root", data_root.generic_string()}}},
            {"output", output.generic_string()},
            {"optimizer", opt},
            {"augment", aug},
            {"cv", cv_j},
            {"resume", resume},
            {"model",
             {{"ehr_zscore", ehr_zscore},
              {"si_grid", si_grid},
              {"threshold", threshold},
              {"tmss_beta", tmss_beta},
              {"mtlr_C", mtlr_C},
              {"mtlr_m", mtlr_m},
              {"nmtlr_hidden", nmtlr_hidden},
              {"cox_ridge", cox_ridge},
              {"fusion_mode", fusion_mode_name(fusion_mode)},
              {"save_predictions", save_predictions}}},
            {"network", network()}};
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
    check_keys(j, {"task", "seed", "preset", "data", "output", "optimizer", "augment", "cv", "resume", "model", "network"},
               "");
    ExperimentConfig c;
    if (!j.contains("task")) throw ConfigError("config: 'task' is required");
    std::string task;
    read_key(j, "task", task, "");
    c.task = parse_task(task);
    if (!j.contains("seed") || j.at("seed").is_null()) throw ConfigError("config: 'seed' is required");
    read_key(j, "seed", c.seed, "");
    read_key(j, "preset", c.preset, "");
    if (c.preset != "toy" && c.preset != "paper")
        throw ConfigError("config: preset must be 'toy' or 'paper', got '" + c.preset + "'");
    if (c.preset == "paper") {
        c.optimizer.epochs = 800;
        c.optimizer.batch = 8;
        c.augment = true;
        c.augment_config = AugmentConfig{};
    }
    if (j.contains("data")) {
        const json& d = j.at("data");
        check_keys(d, {"ehr", "root"}, "data.");
        std::string ehr, root;
        read_key(d, "ehr", ehr, "data.");
        read_key(d, "root", root, "data.");
        c.ehr = ehr;
        c.data_root = root;
    }
    std::string out;
    read_key(j, "output", out, "");
    c.output = out;
    if (j.contains("optimizer")) {
        const json& o = j.at("optimizer");
        check_keys(o, {"epochs", "batch", "lr", "weight_decay", "period", "floor_lr", "seed"}, "optimizer.");
        read_key(o, "epochs", c.optimizer.epochs, "optimizer.");
        read_key(o, "batch", c.optimizer.batch, "optimizer.");
        read_key(o, "lr", c.optimizer.lr, "optimizer.");
        read_key(o, "weight_decay", c.optimizer.weight_decay, "optimizer.");
        read_key(o, "period", c.optimizer.period, "optimizer.");
        read_key(o, "floor_lr", c.optimizer.floor_lr, "optimizer.");
        if (o.contains("seed")) read_key(o, "seed", c.optimizer.seed, "optimizer.");
    }
    if (!(j.contains("optimizer") && j.at("optimizer").contains("seed"))) c.optimizer.seed = c.seed;
    if (j.contains("augment")) {
        const json& a = j.at("augment");
        check_keys(a, {"enabled", "mirror_axes", "rotation_min_deg", "rotation_max_deg", "zoom_max", "gamma_min",
                       "gamma_max", "elastic_grid", "elastic_max_disp"},
                   "augment.");
        read_key(a, "enabled", c.augment, "augment.");
        if (c.augment && c.augment_config.zoom_max == AugmentConfig::identity().zoom_max &&
            c.augment_config.rotation_max_deg == AugmentConfig::identity().rotation_max_deg)
            c.augment_config = AugmentConfig{};
        read_key(a, "mirror_axes", c.augment_config.mirror_axes, "augment.");
        read_key(a, "rotation_min_deg", c.augment_config.rotation_min_deg, "augment.");
        read_key(a, "rotation_max_deg", c.augment_config.rotation_max_deg, "augment.");
        read_key(a, "zoom_max", c.augment_config.zoom_max, "augment.");
        read_key(a, "gamma_min", c.augment_config.gamma_min, "augment.");
        read_key(a, "gamma_max", c.augment_config.gamma_max, "augment.");
        read_key(a, "elastic_grid", c.augment_config.elastic_grid, "augment.");
        read_key(a, "elastic_max_disp", c.augment_config.elastic_max_disp, "augment.");
    }
    if (j.contains("cv")) {
        const json& v = j.at("cv");
        check_keys(v, {"scheme", "k", "max_folds"}, "cv.");
        std::string scheme = "kfold";
        read_key(v, "scheme", scheme, "cv.");
        if (scheme == "kfold")
            c.cv.kind = CvScheme::Kind::kfold;
        else if (scheme == "leave-one-center-out")
            c.cv.kind = CvScheme::Kind::leave_one_center_out;
        else
            throw ConfigError("config: cv.scheme must be 'kfold' or 'leave-one-center-out', got '" + scheme + "'");
        read_key(v, "k", c.cv.k, "cv.");
        read_key(v, "max_folds", c.cv.max_folds, "cv.");
    }
    read_key(j, "resume", c.resume, "");
    if (j.contains("model")) {
        const json& m = j.at("model");
        check_keys(m, {"ehr_zscore", "si_grid", "threshold", "tmss_beta", "mtlr_C", "mtlr_m", "nmtlr_hidden",
                       "cox_ridge", "fusion_mode", "save_predictions"},
                   "model.");
        read_key(m, "ehr_zscore", c.ehr_zscore, "model.");
        read_key(m, "si_grid", c.si_grid, "model.");
        read_key(m, "threshold", c.threshold, "model.");
        read_key(m, "tmss_beta", c.tmss_beta, "model.");
        read_key(m, "mtlr_C", c.mtlr_C, "model.");
        read_key(m, "mtlr_m", c.mtlr_m, "model.");
        read_key(m, "nmtlr_hidden", c.nmtlr_hidden, "model.");
        read_key(m, "cox_ridge", c.cox_ridge, "model.");
        read_key(m, "save_predictions", c.save_predictions, "model.");
        std::string mode = fusion_mode_name(c.fusion_mode);
        read_key(m, "fusion_mode", mode, "model.");
        if (mode == "normalized")
            c.fusion_mode = FusionMode::normalized;
        else if (mode == "raw")
            c.fusion_mode = FusionMode::raw;
        else
            throw ConfigError("config: model.fusion_mode must be 'normalized' or 'raw', got '" + mode + "'");
    }
    // "network" is derived from task and preset; an echoed copy must agree.
    if (j.contains("network") && j.at("network") != c.network())
        throw ConfigError("config: 'network' is derived from task and preset and cannot be set directly");
    if (c.data_root.empty() && !c.ehr.empty()) c.data_root = c.ehr.parent_path();
    return c;
}

void ExperimentConfig::validate() const {
    optimizer.validate();
    if (augment) augment_config.validate();
    if (cv.kind == CvScheme::Kind::kfold && cv.k < 2) throw ConfigError("config: cv.k must be >= 2");
    if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("config: model.threshold must lie in (0, 1)");
    if (!(tmss_beta >= 0.0)) throw ConfigError("config: model.tmss_beta must be >= 0");
    if (!(mtlr_C >= 0.0)) throw ConfigError("config: model.mtlr_C must be >= 0");
    if (!(cox_ridge >= 0.0)) throw ConfigError("config: model.cox_ridge must be >= 0");
    if (task == Task::seg2d_si && si_grid != "auto" && si_grid.find('x') == std::string::npos)
        throw ConfigError("config: model.si_grid must be 'auto' or 'SHxSW', got '" + si_grid + "'");
    if (output.empty()) throw ConfigError("config: 'output' is required");
    if (ehr.empty()) throw ConfigError("config: 'data.ehr' is required");
    if (!fs::is_regular_file(ehr)) throw ConfigError("config: data.ehr '" + ehr.string() + "' does not exist");
    if (is_imaging_task(task) && !fs::is_directory(data_root))
        throw ConfigError("config: data.root '" + data_root.string() + "' is not a directory");
}

void apply_overrides(json& config, const std::vector<std::string>& overrides) {
    for (const std::string& o : overrides) {
        const auto eq = o.find('=');
        if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + o + "' is not of the form key=value");
        const std::string key = o.substr(0, eq), text = o.substr(eq + 1);
        json value = json::parse(text, nullptr, false);
        if (value.is_discarded()) value = text;
        json* node = &config;
        std::size_t start = 0;
        while (true) {
            const auto dot = key.find('.', start);
            const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
            if (part.empty()) throw ConfigError("override '" + o + "' has an empty key component");
            if (!node->is_object()) throw ConfigError("override '" + o + "': '" + key.substr(0, start) + "' is not an object");
            if (dot == std::string::npos) {
                (*node)[part] = value;
                break;
            }
            node = &(*node)[part];
            if (node->is_null()) *node = json::object();
            start = dot + 1;
        }
    }
}

ExperimentConfig load_experiment_config(const fs::path& path, const std::vector<std::string>& overrides) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config '" + path.string() + "'");
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw ConfigError("config '" + path.string() + "' is not valid JSON");
    apply_overrides(j, overrides);
    return ExperimentConfig::from_json(j);
}

// ---------------------------------------------------------------------------
// Reports

json FoldResult::to_json() const {
    json j{{"name", name}, {"n_train", n_train}, {"n_test", n_test}, {"test_ids", test_ids},
           {"metrics", metrics}, {"model", model}};
    if (error) j["error"] = {{"type", error->type}, {"stage", error->stage}, {"message", error->message}};
    return j;
}

FoldResult FoldResult::from_json(const json& j) {
    FoldResult f;
    f.name = j.at("name").get<std::string>();
    f.n_train = j.at("n_train").get<std::size_t>();
    f.n_test = j.at("n_test").get<std::size_t>();
    f.test_ids = j.at("test_ids").get<std::vector<std::string>>();
    f.metrics = j.at("metrics");
    f.model = j.at("model");
    if (j.contains("error")) {
        const json& e = j.at("error");
        f.error = FoldError{e.at("type").get<std::string>(), e.at("stage").get<std::string>(),
                            e.at("message").get<std::string>()};
    }
    return f;
}

json RunReport::to_json() const {
    json folds_j = json::array();
    for (const auto& f : folds) folds_j.push_back(f.to_json());
    return {{"config", config}, {"folds", folds_j}, {"aggregate", aggregate}, {"versions", versions}};
}

json RunReport::timing_json() const {
    json per = json::array();
    for (std::size_t i = 0; i < folds.size(); ++i)
        per.push_back({{"name", folds[i].name},
                       {"seconds", i < fold_seconds.size() ? fold_seconds[i] : 0.0},
                       {"resumed", folds[i].resumed}});
    return {{"wall_clock_seconds", wall_clock_seconds}, {"folds", per}};
}

bool RunReport::any_fold_failed() const {
    return std::any_of(folds.begin(), folds.end(), [](const FoldResult& f) { return f.error.has_value(); });
}

json version_info() {
    return {{"oncokit", ONCOKIT_VERSION},
            {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                          std::to_string(EIGEN_MINOR_VERSION)},
            {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                  std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                  std::to_string(NLOHMANN_JSON_VERSION_PATCH)}};
}

namespace {

void write_json(const fs::path& path, const json& j) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write '" + path.string() + "'");
    out << j.dump(2) << '\n';
    if (!out) throw DataError("failed writing '" + path.string() + "'");
}

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot read '" + path.string() + "'");
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw DataError("'" + path.string() + "' is not valid JSON");
    return j;
}

std::string error_type_name(const std::exception& e) {
    if (dynamic_cast<const ShapeError*>(&e)) return "ShapeError";
    if (dynamic_cast<const ContractError*>(&e)) return "ContractError";
    if (dynamic_cast<const NumericError*>(&e)) return "NumericError";
    if (dynamic_cast<const FormatError*>(&e)) return "FormatError";
    if (dynamic_cast<const ParseError*>(&e)) return "ParseError";
    if (dynamic_cast<const ConfigError*>(&e)) return "ConfigError";
    if (dynamic_cast<const DataError*>(&e)) return "DataError";
    if (dynamic_cast<const EvaluationError*>(&e)) return "EvaluationError";
    if (dynamic_cast<const DivergenceError*>(&e)) return "DivergenceError";
    if (dynamic_cast<const Error*>(&e)) return "Error";
    return "std::exception";
}

// ---------------------------------------------------------------------------
// Data

struct SubjectImages {
    Volume ct, pet, mask;
};

fs::path resolve(const fs::path& root, const std::string& p) {
    const fs::path q(p);
    return q.is_absolute() || root.empty() ? q : root / q;
}

/// Loads subject volumes on first use; shapes must agree across the cohort.
class ImageCache {
public:
    ImageCache(const Cohort& c, fs::path root) : cohort_(c), root_(std::move(root)) {}

    const SubjectImages& get(std::size_t i) {
        std::lock_guard lock(mu_);
        auto it = cache_.find(i);
        if (it != cache_.end()) return *it->second;
        const Subject& s = cohort_.subjects.at(i);
        if (!s.ct_path || !s.pet_path || !s.mask_path)
            throw DataError("subject " + s.id + " lacks ct_path, pet_path or mask_path");
        auto img = std::make_unique<SubjectImages>(SubjectImages{read_volume(resolve(root_, *s.ct_path)),
                                                                 read_volume(resolve(root_, *s.pet_path)),
                                                                 read_volume(resolve(root_, *s.mask_path))});
        if (img->ct.shape() != img->pet.shape() || img->ct.shape() != img->mask.shape())
            throw DataError("subject " + s.id + ": CT, PET and mask extents differ");
        if (shape_ && *shape_ != img->ct.shape())
            throw DataError("subject " + s.id + ": volume extents differ from the rest of the cohort");
        shape_ = img->ct.shape();
        return *cache_.emplace(i, std::move(img)).first->second;
    }

private:
    const Cohort& cohort_;
    fs::path root_;
    std::mutex mu_;
    std::map<std::size_t, std::unique_ptr<SubjectImages>> cache_;
    std::optional<Extents3> shape_;
};

Tensor image_tensor(const Volume& ct, const Volume& pet) {
    const Volume* ch[2] = {&ct, &pet};
    return to_tensor(std::span<const Volume* const>(ch, 2));
}

/// Network input and target for one subject, after optional augmentation,
/// in the layout the task consumes (super images for seg2d-si).
struct Example {
    Tensor x;     // [2, s...]
    Tensor mask;  // [1, s...]
};

struct ImagingPipeline {
    Task task;
    std::optional<SuperImageLayout> layout2, layout1;  // seg2d-si: 2-channel and 1-channel layouts

    ImagingPipeline(Task t, const Extents3& shape, const std::string& grid) : task(t) {
        if (t == Task::seg2d_si) {
            const auto g = parse_grid(grid, shape[2]);
            layout2 = make_layout(shape[0], shape[1], shape[2], 2, g);
            layout1 = make_layout(shape[0], shape[1], shape[2], 1, g);
        }
    }

    Example make(const Volume& ct, const Volume& pet, const Volume& mask) const {
        Example e{image_tensor(ct, pet), to_tensor(mask)};
        if (layout2) {
            e.x = to_super_image(e.x, *layout2);
            e.mask = to_super_image(e.mask, *layout1);
        }
        return e;
    }

    Shape spatial(const Extents3& shape) const {
        if (layout2) return {layout2->out_h(), layout2->out_w()};
        return {shape[0], shape[1], shape[2]};
    }

    /// Binary prediction mapped back to the subject's [1, H, W, D] grid.
    Tensor to_volume_mask(const Tensor& logits, double threshold) const {
        Tensor m = predict_mask(logits, threshold);
        return layout1 ? from_super_image(m, *layout1) : m;
    }
};

std::uint64_t epoch_seed(std::uint64_t seed, std::size_t epoch) {
    return seed ^ (0x9e3779b97f4a7c15ULL * (static_cast<std::uint64_t>(epoch) + 1));
}

Cohort fold_cohort(const Cohort& all, const std::vector<std::size_t>& idx, const NormStats* stats) {
    Cohort c = all.subset(idx);
    if (stats) apply_stats(c, *stats);
    return c;
}

json seg_case_metrics(const Tensor& pred, const Tensor& truth) {
    const ConfusionCounts cc = confusion(pred, truth);
    const PrecisionRecall pr = precision_recall(cc);
    return {{"dsc", dsc(pred, truth)}, {"precision", pr.precision}, {"recall", pr.recall}};
}

double risk_c_index(const Cohort& c, const std::vector<double>& risk) {
    const auto times = c.times();
    const auto events = c.events();
    CIndexOptions opt;
    opt.orientation = Orientation::shorter_time;
    return c_index(times, risk, events, opt).c_index;
}

void write_subject_predictions(const fs::path& path, const Cohort& c, const std::vector<double>& risk) {
    std::vector<std::pair<std::string, double>> rows;
    for (std::size_t i = 0; i < c.size(); ++i) rows.emplace_back(c.subjects[i].id, risk[i]);
    write_predictions(path, rows);
}

json mean_of(const std::vector<json>& cases, const std::string& key) {
    std::vector<double> v;
    for (const auto& c : cases) v.push_back(c.at(key).get<double>());
    return mean_std(v).mean;
}

/// Image descriptor used by the fusion task's MTLR branch when volumes exist:
/// log(1 + number of PET voxels above 1 standard deviation).
double pet_burden(const Volume& pet) {
    std::size_t count = 0;
    for (float v : pet.data()) count += v > 1.0f ? 1 : 0;
    return std::log1p(static_cast<double>(count));
}

// ---------------------------------------------------------------------------
// Fold runners

struct FoldContext {
    const ExperimentConfig& cfg;
    const Cohort& cohort;
    ImageCache* images;
    const Fold& fold;
    fs::path dir;
    std::string* stage;
};

void run_segmentation_fold(FoldContext& ctx, FoldResult& res) {
    const ExperimentConfig& cfg = ctx.cfg;
    *ctx.stage = "load volumes";
    const Extents3 shape = ctx.images->get(ctx.fold.train.front()).ct.shape();
    for (std::size_t i : ctx.fold.train) ctx.images->get(i);
    for (std::size_t i : ctx.fold.test) ctx.images->get(i);
    const ImagingPipeline pipe(cfg.task, shape, cfg.si_grid);
    const Shape spatial = pipe.spatial(shape);

    *ctx.stage = "build model";
    const json net_j = cfg.network();
    SegNet net = cfg.task == Task::unetr
                     ? make_unetr(UnetrConfig::from_json(net_j.at("unetr")), spatial, cfg.seed)
                     : make_unet(UNetConfig::from_json(net_j.at("unet")), cfg.seed);

    std::vector<Example> cached;
    if (!cfg.augment)
        for (std::size_t i : ctx.fold.train) {
            const SubjectImages& s = ctx.images->get(i);
            cached.push_back(pipe.make(s.ct, s.pet, s.mask));
        }
    auto example = [&](std::size_t k, std::size_t epoch) -> Example {
        if (!cfg.augment) return cached[k];
        const std::size_t i = ctx.fold.train[k];
        const SubjectImages& s = ctx.images->get(i);
        std::mt19937_64 rng(subject_seed(epoch_seed(cfg.seed, epoch), ctx.cohort.subjects[i].id));
        const Augmented a = augment(s.ct, s.pet, s.mask, cfg.augment_config, rng);
        return pipe.make(a.ct, a.pet, a.mask);
    };

    *ctx.stage = "train";
    OptimState state = cfg.optimizer.make_state();
    const auto history = train_samples(
        net.params, state, ctx.fold.train.size(),
        [&](ad::Tape& tape, const ParamBinding& bind, std::size_t k, std::size_t epoch) {
            const Example e = example(k, epoch);
            return combined_loss(ad::sigmoid(segnet_forward(net, bind, tape.constant(e.x))), e.mask);
        },
        cfg.optimizer);
    res.model["final_train_loss"] = history.empty() ? 0.0 : history.back();
    const ModelStats st = model_stats(net, spatial);
    res.model["params"] = st.params;
    res.model["macs"] = st.macs;
    if (pipe.layout2)
        save_checkpoint(ctx.dir / "model.okpt", net.params,
                        {{"arch", net.arch},
                         {"config", net.config},
                         {"si_grid", std::to_string(pipe.layout2->sh) + "x" + std::to_string(pipe.layout2->sw)}});
    else
        save_segnet((ctx.dir / "model.okpt").string(), net);

    *ctx.stage = "evaluate";
    std::vector<json> cases;
    if (cfg.save_predictions) fs::create_directories(ctx.dir / "pred");
    for (std::size_t i : ctx.fold.test) {
        const SubjectImages& s = ctx.images->get(i);
        const Example e = pipe.make(s.ct, s.pet, s.mask);
        const Tensor pred = pipe.to_volume_mask(segnet_predict(net, e.x), cfg.threshold);
        const Tensor truth = to_tensor(s.mask);
        cases.push_back(seg_case_metrics(pred, truth));
        if (cfg.save_predictions)
            write_volume(from_tensor(pred, 0, s.mask.spacing(), Modality::MASK),
                         ctx.dir / "pred" / (ctx.cohort.subjects[i].id + ".mvol"));
    }
    res.metrics["dsc"] = mean_of(cases, "dsc");
    res.metrics["precision"] = mean_of(cases, "precision");
    res.metrics["recall"] = mean_of(cases, "recall");
}

std::optional<NormStats> training_stats(const ExperimentConfig& cfg, const Cohort& cohort, const Fold& fold) {
    if (!cfg.ehr_zscore || cohort.width() == 0) return std::nullopt;
    return fit_stats(cohort.subset(fold.train));
}

void run_survival_fold(FoldContext& ctx, FoldResult& res) {
    const ExperimentConfig& cfg = ctx.cfg;
    *ctx.stage = "prepare covariates";
    const auto stats = training_stats(cfg, ctx.cohort, ctx.fold);
    if (stats) write_json(ctx.dir / "ehr_stats.json", stats_to_json(*stats));
    const Cohort train = fold_cohort(ctx.cohort, ctx.fold.train, stats ? &*stats : nullptr);
    const Cohort test = fold_cohort(ctx.cohort, ctx.fold.test, stats ? &*stats : nullptr);

    std::vector<double> risk;
    if (cfg.task == Task::surv_cox) {
        *ctx.stage = "fit cox";
        CoxConfig cc;
        cc.ridge = cfg.cox_ridge;
        const CoxModel m = cox_fit(train, cc);
        write_json(ctx.dir / "model.json", m.to_json());
        for (std::size_t k = 0; k < m.coef.size(); ++k) res.model["coef"][m.feature_names.at(k)] = m.coef[k];
        res.model["iterations"] = m.iterations;
        res.model["converged"] = m.converged;
        *ctx.stage = "evaluate";
        risk = cox_risk(m, test);
    } else {
        *ctx.stage = "fit mtlr";
        MtlrConfig mc;
        mc.m = cfg.mtlr_m;
        mc.C = cfg.mtlr_C;
        mc.seed = cfg.seed;
        MtlrModel m;
        if (cfg.task == Task::surv_mtlr) {
            m = mtlr_fit(train, mc);
        } else {
            m = nmtlr_fit(design_matrix(train), train.times(), train.events(), cfg.nmtlr_hidden, mc);
        }
        write_json(ctx.dir / "model.json", m.to_json());
        res.model["grid_size"] = m.m();
        res.model["iterations"] = m.iterations;
        *ctx.stage = "evaluate";
        risk = mtlr_risk(m, design_matrix(test));
    }
    res.metrics["c_index"] = risk_c_index(test, risk);
    if (cfg.save_predictions) write_subject_predictions(ctx.dir / "predictions.csv", test, risk);
}

/// Design matrix of a cohort, optionally extended by the PET burden column.
Tensor fusion_features(const Cohort& c, const std::vector<std::size_t>& idx, ImageCache* images,
                       std::optional<std::pair<double, double>>& burden_stats, bool fit) {
    const Tensor base = design_matrix(c);
    if (!images) return base;
    const std::size_t n = c.size(), p = c.width();
    std::vector<double> b(n);
    for (std::size_t r = 0; r < n; ++r) b[r] = pet_burden(images->get(idx[r]).pet);
    if (fit) {
        const MeanStd ms = mean_std(b);
        burden_stats = std::make_pair(ms.mean, ms.std > 0.0 ? ms.std : 1.0);
    }
    Tensor x({n, p + 1});
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t k = 0; k < p; ++k) x[r * (p + 1) + k] = base[r * p + k];
        x[r * (p + 1) + p] = (b[r] - burden_stats->first) / burden_stats->second;
    }
    return x;
}

void run_fusion_fold(FoldContext& ctx, FoldResult& res) {
    const ExperimentConfig& cfg = ctx.cfg;
    *ctx.stage = "prepare covariates";
    const auto stats = training_stats(cfg, ctx.cohort, ctx.fold);
    if (stats) write_json(ctx.dir / "ehr_stats.json", stats_to_json(*stats));
    const Cohort train = fold_cohort(ctx.cohort, ctx.fold.train, stats ? &*stats : nullptr);
    const Cohort test = fold_cohort(ctx.cohort, ctx.fold.test, stats ? &*stats : nullptr);

    *ctx.stage = "fit cox";
    CoxConfig cc;
    cc.ridge = cfg.cox_ridge;
    const CoxModel cox = cox_fit(train, cc);
    write_json(ctx.dir / "cox.json", cox.to_json());

    *ctx.stage = "fit mtlr";
    std::optional<std::pair<double, double>> burden;
    const Tensor xtr = fusion_features(train, ctx.fold.train, ctx.images, burden, true);
    const Tensor xte = fusion_features(test, ctx.fold.test, ctx.images, burden, false);
    MtlrConfig mc;
    mc.m = cfg.mtlr_m;
    mc.C = cfg.mtlr_C;
    mc.seed = cfg.seed;
    const MtlrModel mtlr = mtlr_fit(xtr, train.times(), train.events(), mc);
    write_json(ctx.dir / "mtlr.json", mtlr.to_json());
    res.model["image_feature"] = ctx.images != nullptr;

    *ctx.stage = "evaluate";
    const std::vector<double> rc = cox_risk(cox, test);
    const std::vector<double> rm = mtlr_risk(mtlr, xte);
    const std::vector<double> fused = deep_fusion_risk(rc, rm, cfg.fusion_mode);
    res.metrics["c_index"] = risk_c_index(test, fused);
    res.metrics["c_index_cox"] = risk_c_index(test, rc);
    res.metrics["c_index_mtlr"] = risk_c_index(test, rm);
    if (cfg.save_predictions) write_subject_predictions(ctx.dir / "predictions.csv", test, fused);
}

void run_tmss_fold(FoldContext& ctx, FoldResult& res) {
    const ExperimentConfig& cfg = ctx.cfg;
    *ctx.stage = "prepare covariates";
    const auto stats = training_stats(cfg, ctx.cohort, ctx.fold);
    if (stats) write_json(ctx.dir / "ehr_stats.json", stats_to_json(*stats));
    const Cohort train = fold_cohort(ctx.cohort, ctx.fold.train, stats ? &*stats : nullptr);
    const Cohort test = fold_cohort(ctx.cohort, ctx.fold.test, stats ? &*stats : nullptr);
    if (train.width() == 0) throw DataError("tmss needs at least one EHR covariate");

    *ctx.stage = "load volumes";
    const Extents3 shape = ctx.images->get(ctx.fold.train.front()).ct.shape();
    std::vector<TmssSample> samples;
    for (std::size_t r = 0; r < train.size(); ++r) {
        const SubjectImages& s = ctx.images->get(ctx.fold.train[r]);
        const Subject& subj = train.subjects[r];
        samples.push_back({image_tensor(s.ct, s.pet), to_tensor(s.mask), subj.covariates, subj.time, subj.event});
    }

    *ctx.stage = "build model";
    TmssConfig tc;
    tc.unetr = UnetrConfig::from_json(cfg.network().at("unetr"));
    tc.beta = cfg.tmss_beta;
    tc.C = cfg.mtlr_C;
    TmssModel model = make_tmss(tc, train.width(), {shape[0], shape[1], shape[2]},
                                default_time_grid(train.times(), train.events(), cfg.mtlr_m), cfg.seed);

    *ctx.stage = "train";
    OptimState state = cfg.optimizer.make_state();
    const std::size_t n = samples.size();
    const auto history = train_samples(
        model.net.params, state, n,
        [&](ad::Tape&, const ParamBinding& bind, std::size_t k, std::size_t epoch) {
            if (!cfg.augment) return tmss_sample_loss(model, bind, samples[k], n);
            const std::size_t i = ctx.fold.train[k];
            const SubjectImages& s = ctx.images->get(i);
            std::mt19937_64 rng(subject_seed(epoch_seed(cfg.seed, epoch), ctx.cohort.subjects[i].id));
            const Augmented a = augment(s.ct, s.pet, s.mask, cfg.augment_config, rng);
            TmssSample aug = samples[k];
            aug.image = image_tensor(a.ct, a.pet);
            aug.mask = to_tensor(a.mask);
            return tmss_sample_loss(model, bind, aug, n);
        },
        cfg.optimizer);
    res.model["final_train_loss"] = history.empty() ? 0.0 : history.back();
    res.model["grid_size"] = model.m();
    save_tmss((ctx.dir / "model.okpt").string(), model);

    *ctx.stage = "evaluate";
    std::vector<json> cases;
    std::vector<double> risk;
    if (cfg.save_predictions) fs::create_directories(ctx.dir / "pred");
    for (std::size_t r = 0; r < test.size(); ++r) {
        const std::size_t i = ctx.fold.test[r];
        const SubjectImages& s = ctx.images->get(i);
        const TmssPrediction p = tmss_predict(model, image_tensor(s.ct, s.pet), test.subjects[r].covariates);
        risk.push_back(p.risk);
        const Tensor pred = predict_mask(p.logits, cfg.threshold);
        cases.push_back(seg_case_metrics(pred, to_tensor(s.mask)));
        if (cfg.save_predictions)
            write_volume(from_tensor(pred, 0, s.mask.spacing(), Modality::MASK),
                         ctx.dir / "pred" / (test.subjects[r].id + ".mvol"));
    }
    res.metrics["c_index"] = risk_c_index(test, risk);
    res.metrics["dsc"] = mean_of(cases, "dsc");
    if (cfg.save_predictions) write_subject_predictions(ctx.dir / "predictions.csv", test, risk);

    // EHR-only Cox reference on the same fold.
    *ctx.stage = "cox baseline";
    // A reference only: when it cannot be fitted (e.g. separation in a tiny
    // fold) the reason is recorded and the TMSS results stand.
    try {
        CoxConfig cc;
        cc.ridge = cfg.cox_ridge;
        const CoxModel cox = cox_fit(train, cc);
        res.metrics["c_index_cox_ehr"] = risk_c_index(test, cox_risk(cox, test));
    } catch (const DivergenceError& e) {
        res.model["cox_ehr_error"] = e.what();
    } catch (const EvaluationError& e) {
        res.model["cox_ehr_error"] = e.what();
    }
}

json aggregate_metrics(const std::vector<FoldResult>& folds) {
    std::map<std::string, std::vector<double>> values;
    for (const auto& f : folds) {
        if (f.error) continue;
        for (const auto& [k, v] : f.metrics.items())
            if (v.is_number()) values[k].push_back(v.get<double>());
    }
    json agg = json::object();
    for (const auto& [k, v] : values) {
        const MeanStd ms = mean_std(v);
        agg[k] = {{"mean", ms.mean}, {"std", ms.std}, {"n", v.size()}};
    }
    return agg;
}

// Configuration compared for resumption: "resume" itself does not matter.
json resume_key(const ExperimentConfig& cfg) {
    json j = cfg.to_json();
    j.erase("resume");
    return j;
}

}  // namespace

RunReport run_experiment(const ExperimentConfig& cfg) {
    cfg.validate();
    const auto t0 = std::chrono::steady_clock::now();
    EhrTable table = load_ehr(cfg.ehr);
    const Cohort& cohort = table.cohort;
    if (cohort.size() < 2) throw DataError("cohort '" + cfg.ehr.string() + "' has fewer than two subjects");
    std::vector<Fold> folds = cv_split(cohort, cfg.cv, cfg.seed);
    if (cfg.cv.max_folds > 0 && folds.size() > cfg.cv.max_folds) folds.resize(cfg.cv.max_folds);

    const bool uses_images = is_imaging_task(cfg.task) ||
                             (cfg.task == Task::fusion &&
                              std::all_of(cohort.subjects.begin(), cohort.subjects.end(),
                                          [](const Subject& s) { return s.pet_path.has_value(); }));
    std::unique_ptr<ImageCache> images;
    if (uses_images) images = std::make_unique<ImageCache>(cohort, cfg.data_root);

    fs::create_directories(cfg.output);
    RunReport report;
    report.config = cfg.to_json();
    report.versions = version_info();
    const json key = resume_key(cfg);

    for (const Fold& fold : folds) {
        const auto f0 = std::chrono::steady_clock::now();
        const fs::path dir = cfg.output / fold.name;
        const fs::path marker = dir / "result.json";
        FoldResult res;
        if (cfg.resume && fs::is_regular_file(marker)) {
            try {
                const json saved = read_json(marker);
                if (saved.at("config") == key && !saved.at("fold").contains("error")) {
                    res = FoldResult::from_json(saved.at("fold"));
                    res.resumed = true;
                }
            } catch (const std::exception&) {
                res = FoldResult{};  // unreadable marker: retrain the fold
            }
        }
        if (!res.resumed) {
            res.name = fold.name;
            res.n_train = fold.train.size();
            res.n_test = fold.test.size();
            for (std::size_t i : fold.test) res.test_ids.push_back(cohort.subjects[i].id);
            std::string stage = "setup";
            try {
                fs::create_directories(dir);
                if (fold.train.empty() || fold.test.empty()) throw ConfigError("fold has an empty train or test set");
                FoldContext ctx{cfg, cohort, images.get(), fold, dir, &stage};
                if (is_segmentation_task(cfg.task))
                    run_segmentation_fold(ctx, res);
                else if (cfg.task == Task::tmss)
                    run_tmss_fold(ctx, res);
                else if (cfg.task == Task::fusion)
                    run_fusion_fold(ctx, res);
                else
                    run_survival_fold(ctx, res);
            } catch (const std::exception& e) {
                res.metrics = json::object();
                res.error = FoldError{error_type_name(e), stage, e.what()};
            }
            if (fs::is_directory(dir)) write_json(marker, {{"config", key}, {"fold", res.to_json()}});
        }
        report.folds.push_back(std::move(res));
        report.fold_seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - f0).count());
    }
    report.aggregate = aggregate_metrics(report.folds);
    report.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_json(cfg.output / "report.json", report.to_json());
    write_json(cfg.output / "timing.json", report.timing_json());
    return report;
}

// ---------------------------------------------------------------------------
// Evaluation

std::vector<std::pair<std::string, double>> read_predictions(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot read predictions '" + path.string() + "'");
    std::string line;
    if (!std::getline(in, line)) throw ParseError("empty predictions file '" + path.string() + "'", 0);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != "id,risk") throw ParseError("predictions header must be 'id,risk', got '" + line + "'", 0);
    std::vector<std::pair<std::string, double>> rows;
    std::set<std::string> seen;
    std::size_t row = 0;
    while (std::getline(in, line)) {
        ++row;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos) throw ParseError("expected 'id,risk'", row);
        const std::string id = line.substr(0, comma), val = line.substr(comma + 1);
        std::size_t used = 0;
        double v = 0.0;
        try {
            v = std::stod(val, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != val.size() || val.empty()) throw ParseError("risk '" + val + "' is not a number", row);
        if (!seen.insert(id).second) throw ParseError("duplicate id '" + id + "'", row);
        rows.emplace_back(id, v);
    }
    return rows;
}

void write_predictions(const fs::path& path, const std::vector<std::pair<std::string, double>>& rows) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write predictions '" + path.string() + "'");
    out << "id,risk\n";
    out.precision(17);
    for (const auto& [id, r] : rows) out << id << ',' << r << '\n';
    if (!out) throw DataError("failed writing predictions '" + path.string() + "'");
}

namespace {

std::vector<fs::path> files_with_suffix(const fs::path& dir, const std::string& suffix) {
    if (!fs::is_directory(dir)) throw DataError("'" + dir.string() + "' is not a directory");
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir)) {
        const std::string name = e.path().filename().string();
        if (e.is_regular_file() && name.size() > suffix.size() &&
            name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0)
            out.push_back(e.path());
    }
    std::sort(out.begin(), out.end());
    return out;
}

Tensor mask_tensor(const Volume& v) {
    Tensor t = to_tensor(v);
    for (double x : t.data())
        if (x != 0.0 && x != 1.0) throw DataError("mask holds a non-binary value " + std::to_string(x));
    return t;
}

}  // namespace

EvalReport evaluate(const fs::path& pred, const fs::path& truth, Task task) {
    EvalReport out;
    json& r = out.report;
    r["task"] = task_name(task);
    if (is_segmentation_task(task) || task == Task::tmss) {
        json cases = json::array();
        std::vector<double> d, p, rc;
        for (const fs::path& t : files_with_suffix(truth, ".mvol")) {
            const fs::path candidate = pred / t.filename();
            if (!fs::is_regular_file(candidate)) {
                out.missing.push_back(t.filename().string());
                continue;
            }
            const Tensor a = mask_tensor(read_volume(candidate)), b = mask_tensor(read_volume(t));
            if (a.shape() != b.shape())
                throw DataError("prediction " + candidate.string() + " has extents " + shape_str(a.shape()) +
                                ", truth has " + shape_str(b.shape()));
            json c = seg_case_metrics(a, b);
            c["case"] = t.filename().string();
            d.push_back(c["dsc"]);
            p.push_back(c["precision"]);
            rc.push_back(c["recall"]);
            cases.push_back(c);
        }
        r["cases"] = cases;
        json agg = json::object();
        if (!d.empty()) {
            for (auto [name, v] : {std::pair{"dsc", &d}, std::pair{"precision", &p}, std::pair{"recall", &rc}}) {
                const MeanStd ms = mean_std(*v);
                agg[name] = {{"mean", ms.mean}, {"std", ms.std}, {"n", v->size()}};
            }
        }
        r["aggregate"] = agg;
    } else {
        const fs::path file = fs::is_directory(pred) ? pred / "predictions.csv" : pred;
        const auto rows = read_predictions(file);
        std::map<std::string, double> risk(rows.begin(), rows.end());
        const Cohort c = load_ehr(truth).cohort;
        std::vector<double> times, scores;
        std::vector<int> events;
        for (const Subject& s : c.subjects) {
            auto it = risk.find(s.id);
            if (it == risk.end()) {
                out.missing.push_back(s.id);
                continue;
            }
            times.push_back(s.time);
            events.push_back(s.event);
            scores.push_back(it->second);
        }
        CIndexOptions opt;
        opt.orientation = Orientation::shorter_time;
        const CIndexResult ci = c_index(times, scores, events, opt);
        r["aggregate"] = {{"c_index", ci.c_index}, {"comparable_pairs", ci.comparable_pairs}, {"n", scores.size()}};
    }
    r["missing"] = out.missing;
    return out;
}

// ---------------------------------------------------------------------------
// Super-image conversion

std::vector<std::string> convert_si(const fs::path& in, const fs::path& out, const std::string& grid) {
    std::vector<std::string> errors;
    const auto files = files_with_suffix(in, ".mvol");
    fs::create_directories(out);
    for (const fs::path& f : files) {
        try {
            const Volume v = read_volume(f);
            const auto& s = v.shape();
            const SuperImageLayout layout = make_layout(s[0], s[1], s[2], 1, parse_grid(grid, s[2]));
            write_volume(to_super_image(v, layout), out / f.filename());
            write_json(out / (f.stem().string() + ".si.json"),
                       {{"source", f.filename().string()},
                        {"sh", layout.sh},
                        {"sw", layout.sw},
                        {"H", layout.H},
                        {"W", layout.W},
                        {"D", layout.D}});
        } catch (const std::exception& e) {
            errors.push_back(f.filename().string() + ": " + e.what());
        }
    }
    return errors;
}

std::vector<std::string> invert_si(const fs::path& in, const fs::path& out) {
    std::vector<std::string> errors;
    const auto sidecars = files_with_suffix(in, ".si.json");
    fs::create_directories(out);
    for (const fs::path& sc : sidecars) {
        try {
            const json j = read_json(sc);
            const std::string source = j.at("source").get<std::string>();
            const Volume s = read_volume(in / source);
            const SuperImageLayout layout =
                make_layout(j.at("H").get<std::size_t>(), j.at("W").get<std::size_t>(), j.at("D").get<std::size_t>(), 1,
                            {j.at("sh").get<std::size_t>(), j.at("sw").get<std::size_t>()});
            write_volume(from_super_image(s, layout), out / source);
        } catch (const std::exception& e) {
            errors.push_back(sc.filename().string() + ": " + e.what());
        }
    }
    return errors;
}

// ---------------------------------------------------------------------------
// Preprocessing

namespace {

Origin3 crop_origin(const Volume& mask, const Extents3& size) {
    const Extents3& s = mask.shape();
    std::array<std::size_t, 3> lo{s[0], s[1], s[2]}, hi{0, 0, 0};
    const auto data = mask.data();
    for (std::size_t i = 0; i < s[0]; ++i)
        for (std::size_t j = 0; j < s[1]; ++j)
            for (std::size_t k = 0; k < s[2]; ++k)
                if (data[(i * s[1] + j) * s[2] + k] != 0.0f) {
                    const std::array<std::size_t, 3> p{i, j, k};
                    for (int a = 0; a < 3; ++a) {
                        lo[a] = std::min(lo[a], p[a]);
                        hi[a] = std::max(hi[a], p[a] + 1);
                    }
                }
    Origin3 origin{};
    for (int a = 0; a < 3; ++a) {
        // Twice the centre, so that odd sums stay exact.
        const std::int64_t centre2 = lo[a] < hi[a] ? static_cast<std::int64_t>(lo[a] + hi[a])
                                                   : static_cast<std::int64_t>(s[a]);
        origin[a] = (centre2 - static_cast<std::int64_t>(size[a])) / 2;
    }
    return origin;
}

}  // namespace

std::vector<std::string> prep_cohort(const fs::path& ehr, const fs::path& data_root, const fs::path& out,
                                     const PrepOptions& options) {
    if (!(options.spacing > 0.0)) throw ConfigError("prep: spacing must be positive");
    const Cohort cohort = load_ehr(ehr).cohort;
    const fs::path root = data_root.empty() ? ehr.parent_path() : data_root;
    for (const char* sub : {"ct", "pet", "mask"}) fs::create_directories(out / sub);
    std::vector<std::string> errors;
    Cohort written = cohort;
    written.subjects.clear();
    for (Subject s : cohort.subjects) {
        try {
            if (!s.ct_path || !s.pet_path || !s.mask_path)
                throw DataError("lacks ct_path, pet_path or mask_path");
            Volume ct = ct_window_normalize(resample_isotropic(read_volume(resolve(root, *s.ct_path)), options.spacing));
            Volume pet = pet_zscore(resample_isotropic(read_volume(resolve(root, *s.pet_path)), options.spacing));
            Volume mask = resample_isotropic(read_volume(resolve(root, *s.mask_path)), options.spacing);
            if (ct.shape() != pet.shape() || ct.shape() != mask.shape())
                throw DataError("CT, PET and mask extents differ after resampling");
            if (options.crop) {
                const Origin3 origin = crop_origin(mask, *options.crop);
                ct = crop_to_bbox(ct, origin, *options.crop);
                pet = crop_to_bbox(pet, origin, *options.crop);
                mask = crop_to_bbox(mask, origin, *options.crop);
            }
            s.ct_path = "ct/" + s.id + ".mvol";
            s.pet_path = "pet/" + s.id + ".mvol";
            s.mask_path = "mask/" + s.id + ".mvol";
            write_volume(ct, out / *s.ct_path);
            write_volume(pet, out / *s.pet_path);
            write_volume(mask, out / *s.mask_path);
            written.subjects.push_back(std::move(s));
        } catch (const std::exception& e) {
            errors.push_back(s.id + ": " + e.what());
        }
    }
    write_ehr(written, out / "cohort.csv");
    return errors;
}

// ---------------------------------------------------------------------------
// Synthetic data on disk

void write_synthetic_dataset(const SyntheticCohort& data, const fs::path& dir) {
    fs::create_directories(dir);
    Cohort c = data.cohort;
    if (!data.ct.empty()) {
        for (const char* sub : {"ct", "pet", "mask"}) fs::create_directories(dir / sub);
        for (std::size_t i = 0; i < c.size(); ++i) {
            Subject& s = c.subjects[i];
            s.ct_path = "ct/" + s.id + ".mvol";
            s.pet_path = "pet/" + s.id + ".mvol";
            s.mask_path = "mask/" + s.id + ".mvol";
            write_volume(data.ct[i], dir / *s.ct_path);
            write_volume(data.pet[i], dir / *s.pet_path);
            write_volume(data.mask[i], dir / *s.mask_path);
        }
    }
    write_ehr(c, dir / "cohort.csv");
}

// ---------------------------------------------------------------------------
// Prediction with saved models

std::size_t predict_cohort(const fs::path& model, const fs::path& ehr, const fs::path& out, const fs::path& data_root,
                           double threshold) {
    Cohort cohort = load_ehr(ehr).cohort;
    const fs::path stats_path = model.parent_path() / "ehr_stats.json";
    if (fs::is_regular_file(stats_path)) apply_stats(cohort, stats_from_json(read_json(stats_path)));
    const fs::path root = data_root.empty() ? ehr.parent_path() : data_root;
    fs::create_directories(out);
    auto load_pair = [&](const Subject& s) {
        if (!s.ct_path || !s.pet_path) throw DataError("subject " + s.id + " lacks ct_path or pet_path");
        return std::make_pair(read_volume(resolve(root, *s.ct_path)), read_volume(resolve(root, *s.pet_path)));
    };

    if (model.extension() == ".json") {
        const json j = read_json(model);
        std::vector<double> risk;
        if (j.value("type", std::string{}) == "cox") {
            risk = cox_risk(CoxModel::from_json(j), cohort);
        } else {
            const MtlrModel m = MtlrModel::from_json(j);
            if (m.n_features != cohort.width())
                throw DataError("model expects " + std::to_string(m.n_features) + " covariates, cohort has " +
                                std::to_string(cohort.width()));
            risk = mtlr_risk(m, design_matrix(cohort));
        }
        write_subject_predictions(out / "predictions.csv", cohort, risk);
        return cohort.size();
    }

    const Checkpoint probe = load_checkpoint(model);
    const std::string arch = probe.manifest.value("arch", std::string{});
    if (arch == "tmss") {
        const TmssModel m = load_tmss(model.string());
        std::vector<double> risk;
        for (const Subject& s : cohort.subjects) {
            const auto [ct, pet] = load_pair(s);
            const TmssPrediction p = tmss_predict(m, image_tensor(ct, pet), s.covariates);
            risk.push_back(p.risk);
            write_volume(from_tensor(predict_mask(p.logits, threshold), 0, ct.spacing(), Modality::MASK),
                         out / (s.id + ".mvol"));
        }
        write_subject_predictions(out / "predictions.csv", cohort, risk);
        return cohort.size();
    }
    const SegNet net = load_segnet(model.string());
    for (const Subject& s : cohort.subjects) {
        const auto [ct, pet] = load_pair(s);
        Tensor mask;
        if (net.arch == "unet2d") {
            const json& grid = probe.manifest.contains("si_grid") ? probe.manifest.at("si_grid") : json("auto");
            const ImagingPipeline pipe(Task::seg2d_si, ct.shape(), grid.get<std::string>());
            const Tensor x = to_super_image(image_tensor(ct, pet), *pipe.layout2);
            mask = pipe.to_volume_mask(segnet_predict(net, x), threshold);
        } else {
            mask = predict_mask(segnet_predict(net, image_tensor(ct, pet)), threshold);
        }
        write_volume(from_tensor(mask, 0, ct.spacing(), Modality::MASK), out / (s.id + ".mvol"));
    }
    return cohort.size();
}

}  // namespace oncokit
