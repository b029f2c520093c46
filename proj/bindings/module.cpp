// Python bindings for the main oncokit operations. Arrays cross the boundary
// as NumPy float64 (volumes as float32); model and report objects as plain
// Python dicts.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "oncokit/cox.hpp"
#include "oncokit/error.hpp"
#include "oncokit/experiment.hpp"
#include "oncokit/fusion.hpp"
#include "oncokit/metrics.hpp"
#include "oncokit/mtlr.hpp"
#include "oncokit/segnet.hpp"
#include "oncokit/superimage.hpp"
#include "oncokit/synthetic.hpp"
#include "oncokit/volume.hpp"

namespace py = pybind11;
namespace fs = std::filesystem;
using nlohmann::json;
using namespace oncokit;

namespace {

using F64Array = py::array_t<double, py::array::c_style | py::array::forcecast>;
using F32Array = py::array_t<float, py::array::c_style | py::array::forcecast>;
using I32Array = py::array_t<int, py::array::c_style | py::array::forcecast>;

py::object to_py(const json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

json from_py(const py::handle& o) {
    const std::string text = py::module_::import("json").attr("dumps")(o).cast<std::string>();
    return json::parse(text);
}

Tensor tensor_from(const F64Array& a) {
    Shape shape(a.shape(), a.shape() + a.ndim());
    return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

F64Array array_from(const Tensor& t) {
    std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
    F64Array out(shape);
    const auto src = t.data();
    std::copy(src.begin(), src.end(), out.mutable_data());
    return out;
}

std::vector<double> vec(const F64Array& a) { return {a.data(), a.data() + a.size()}; }
std::vector<int> ivec(const I32Array& a) { return {a.data(), a.data() + a.size()}; }

std::vector<std::vector<double>> rows(const F64Array& x) {
    if (x.ndim() != 2) throw ShapeError("expected a 2-D covariate matrix [n, p]");
    const std::size_t n = x.shape(0), p = x.shape(1);
    std::vector<std::vector<double>> r(n, std::vector<double>(p));
    for (std::size_t i = 0; i < n; ++i) std::copy(x.data() + i * p, x.data() + (i + 1) * p, r[i].begin());
    return r;
}

Orientation parse_orientation(const std::string& s) {
    if (s == "longer_time") return Orientation::longer_time;
    if (s == "shorter_time") return Orientation::shorter_time;
    throw ConfigError("orientation must be 'longer_time' or 'shorter_time', got '" + s + "'");
}

Modality parse_modality(const std::string& s) {
    if (s == "CT") return Modality::CT;
    if (s == "PET") return Modality::PET;
    if (s == "MASK") return Modality::MASK;
    if (s == "MR") return Modality::MR;
    throw ConfigError("unknown modality '" + s + "'");
}

std::string modality_str(Modality m) {
    switch (m) {
        case Modality::CT: return "CT";
        case Modality::PET: return "PET";
        case Modality::MASK: return "MASK";
        case Modality::MR: return "MR";
    }
    return "?";
}

F32Array volume_array(const Volume& v) {
    const auto& s = v.shape();
    F32Array out({s[0], s[1], s[2]});
    const auto src = v.data();
    std::copy(src.begin(), src.end(), out.mutable_data());
    return out;
}

Volume volume_from(const F32Array& a, Spacing3 spacing, Modality m) {
    if (a.ndim() != 3) throw ShapeError("a volume must be a 3-D array [H, W, D]");
    return Volume({static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)),
                   static_cast<std::size_t>(a.shape(2))},
                  spacing, m, std::vector<float>(a.data(), a.data() + a.size()));
}

SuperImageLayout layout_for(const F64Array& volume, const std::string& grid) {
    if (volume.ndim() != 4) throw ShapeError("expected a [C, H, W, D] array");
    const std::size_t C = volume.shape(0), H = volume.shape(1), W = volume.shape(2), D = volume.shape(3);
    return make_layout(H, W, D, C, parse_grid(grid, D));
}

}  // namespace

PYBIND11_MODULE(_oncokit, m) {
    m.doc() = "oncokit: PET/CT tumour segmentation and survival modelling";
    m.attr("__version__") = ONCOKIT_VERSION;

    static py::exception<Error> base(m, "Error");
    py::register_exception<ShapeError>(m, "ShapeError", base);
    py::register_exception<ContractError>(m, "ContractError", base);
    py::register_exception<NumericError>(m, "NumericError", base);
    py::register_exception<FormatError>(m, "FormatError", base);
    py::register_exception<ParseError>(m, "ParseError", base);
    py::register_exception<ConfigError>(m, "ConfigError", base);
    py::register_exception<DataError>(m, "DataError", base);
    py::register_exception<EvaluationError>(m, "EvaluationError", base);
    py::register_exception<DivergenceError>(m, "DivergenceError", base);

    // Metrics -----------------------------------------------------------------
    m.def(
        "c_index",
        [](const F64Array& times, const F64Array& scores, const I32Array& events, const std::string& orientation,
           bool harrell_ties) {
            CIndexOptions opt;
            opt.orientation = parse_orientation(orientation);
            opt.harrell_ties = harrell_ties;
            const auto t = vec(times), s = vec(scores);
            const auto e = ivec(events);
            const CIndexResult r = c_index(t, s, e, opt);
            return py::dict(py::arg("c_index") = r.c_index, py::arg("comparable_pairs") = r.comparable_pairs,
                            py::arg("concordant") = r.concordant, py::arg("tied_scores") = r.tied_scores);
        },
        py::arg("times"), py::arg("scores"), py::arg("events"), py::arg("orientation") = "longer_time",
        py::arg("harrell_ties") = false,
        "Concordance index. Use orientation='shorter_time' for risk scores (higher = earlier event).");
    m.def(
        "dsc", [](const F64Array& a, const F64Array& b) { return dsc(tensor_from(a), tensor_from(b)); },
        py::arg("pred"), py::arg("truth"), "Dice similarity coefficient of two binary arrays.");
    m.def(
        "precision_recall",
        [](const F64Array& pred, const F64Array& truth) {
            const PrecisionRecall pr = precision_recall(confusion(tensor_from(pred), tensor_from(truth)));
            return py::make_tuple(pr.precision, pr.recall);
        },
        py::arg("pred"), py::arg("truth"));

    // Super images ------------------------------------------------------------
    m.def(
        "choose_grid", [](std::size_t depth) { return choose_grid(depth); }, py::arg("depth"),
        "Most square (rows, cols) mosaic for a stack of `depth` slices.");
    m.def(
        "to_super_image",
        [](const F64Array& volume, const std::string& grid) {
            return array_from(to_super_image(tensor_from(volume), layout_for(volume, grid)));
        },
        py::arg("volume"), py::arg("grid") = "auto", "[C, H, W, D] -> [C, H*rows, W*cols].");
    m.def(
        "from_super_image",
        [](const F64Array& image, std::size_t depth, const std::string& grid) {
            if (image.ndim() != 3) throw ShapeError("expected a [C, H*rows, W*cols] array");
            const auto g = parse_grid(grid, depth);
            const std::size_t C = image.shape(0), Hs = image.shape(1), Ws = image.shape(2);
            if (Hs % g.first != 0 || Ws % g.second != 0)
                throw ShapeError("image extents are not divisible by the grid");
            const SuperImageLayout l = make_layout(Hs / g.first, Ws / g.second, depth, C, g);
            return array_from(from_super_image(tensor_from(image), l));
        },
        py::arg("image"), py::arg("depth"), py::arg("grid") = "auto");

    // Volumes -----------------------------------------------------------------
    m.def(
        "read_volume",
        [](const fs::path& path) {
            const Volume v = read_volume(path);
            return py::make_tuple(volume_array(v), v.spacing(), modality_str(v.modality()));
        },
        py::arg("path"), "Returns (float32 array [H, W, D], spacing, modality).");
    m.def(
        "write_volume",
        [](const fs::path& path, const F32Array& data, Spacing3 spacing, const std::string& modality) {
            write_volume(volume_from(data, spacing, parse_modality(modality)), path);
        },
        py::arg("path"), py::arg("data"), py::arg("spacing") = Spacing3{1.0f, 1.0f, 1.0f},
        py::arg("modality") = "CT");

    // Survival models ---------------------------------------------------------
    m.def(
        "cox_fit",
        [](const F64Array& x, const F64Array& times, const I32Array& events, double ridge,
           const std::vector<std::string>& names) {
            CoxConfig cfg;
            cfg.ridge = ridge;
            return to_py(cox_fit(rows(x), vec(times), ivec(events), cfg, names).to_json());
        },
        py::arg("x"), py::arg("times"), py::arg("events"), py::arg("ridge") = 0.0,
        py::arg("feature_names") = std::vector<std::string>{}, "Cox proportional hazards fit; returns the model dict.");
    m.def(
        "cox_risk",
        [](const py::dict& model, const F64Array& x) { return cox_risk(CoxModel::from_json(from_py(model)), rows(x)); },
        py::arg("model"), py::arg("x"), "exp(w'x) per row.");
    m.def(
        "mtlr_fit",
        [](const F64Array& x, const F64Array& times, const I32Array& events, std::size_t grid_size, double C,
           const std::vector<std::size_t>& hidden, std::uint64_t seed) {
            if (x.ndim() != 2) throw ShapeError("expected a 2-D covariate matrix [n, p]");
            MtlrConfig cfg;
            cfg.m = grid_size;
            cfg.C = C;
            cfg.seed = seed;
            const MtlrModel mdl = hidden.empty() ? mtlr_fit(tensor_from(x), vec(times), ivec(events), cfg)
                                                 : nmtlr_fit(tensor_from(x), vec(times), ivec(events), hidden, cfg);
            return to_py(mdl.to_json());
        },
        py::arg("x"), py::arg("times"), py::arg("events"), py::arg("grid_size") = 0, py::arg("C") = 1.0,
        py::arg("hidden") = std::vector<std::size_t>{}, py::arg("seed") = 0,
        "MTLR fit (N-MTLR when `hidden` lists layer widths); returns the model dict.");
    m.def(
        "mtlr_risk",
        [](const py::dict& model, const F64Array& x) {
            return mtlr_risk(MtlrModel::from_json(from_py(model)), tensor_from(x));
        },
        py::arg("model"), py::arg("x"));
    m.def(
        "mtlr_survival",
        [](const py::dict& model, const std::vector<double>& x) {
            const SurvivalCurve c = mtlr_survival(MtlrModel::from_json(from_py(model)), x);
            return py::make_tuple(c.times, c.survival);
        },
        py::arg("model"), py::arg("x"), "Survival curve (times, S(t)) for one covariate row.");
    m.def(
        "deep_fusion_risk",
        [](const F64Array& cox, const F64Array& mtlr, bool normalized) {
            const auto a = vec(cox), b = vec(mtlr);
            return deep_fusion_risk(a, b, normalized ? FusionMode::normalized : FusionMode::raw);
        },
        py::arg("cox_risk"), py::arg("mtlr_risk"), py::arg("normalized") = true);

    // Synthetic data ----------------------------------------------------------
    m.def(
        "synthetic_cohort",
        [](std::size_t n, std::uint64_t seed, std::vector<double> beta, double censor_frac, std::size_t n_centers) {
            SyntheticConfig sc;
            sc.n = n;
            sc.seed = seed;
            sc.beta = std::move(beta);
            sc.censor_frac = censor_frac;
            sc.n_centers = n_centers;
            const SyntheticCohort s = gen_synthetic_cohort(sc);
            const Cohort& c = s.cohort;
            F64Array x({c.size(), c.width()});
            std::vector<std::string> ids, centers;
            for (std::size_t i = 0; i < c.size(); ++i) {
                std::copy(c.subjects[i].covariates.begin(), c.subjects[i].covariates.end(),
                          x.mutable_data() + i * c.width());
                ids.push_back(c.subjects[i].id);
                centers.push_back(c.subjects[i].center);
            }
            py::dict d;
            d["ids"] = ids;
            d["x"] = x;
            d["feature_names"] = c.feature_names;
            d["times"] = c.times();
            d["events"] = c.events();
            d["centers"] = centers;
            d["true_risk"] = s.true_risk;
            return d;
        },
        py::arg("n") = 200, py::arg("seed") = 0, py::arg("beta") = std::vector<double>{1.0, -0.5},
        py::arg("censor_frac") = 0.2, py::arg("n_centers") = 3,
        "Weibull-Cox cohort with planted coefficients (tabular part only).");
    m.def(
        "write_synthetic_dataset",
        [](const fs::path& dir, std::size_t n, std::uint64_t seed, bool volumes, std::array<std::size_t, 3> shape) {
            SyntheticConfig sc;
            sc.n = n;
            sc.seed = seed;
            sc.with_volumes = volumes;
            sc.volume_shape = shape;
            write_synthetic_dataset(gen_synthetic_cohort(sc), dir);
            return dir / "cohort.csv";
        },
        py::arg("dir"), py::arg("n") = 200, py::arg("seed") = 0, py::arg("volumes") = false,
        py::arg("shape") = std::array<std::size_t, 3>{32, 32, 16});

    // Experiments -------------------------------------------------------------
    m.def(
        "run_experiment",
        [](const py::dict& config, const std::vector<std::string>& overrides) {
            json j = from_py(config);
            apply_overrides(j, overrides);
            const ExperimentConfig cfg = ExperimentConfig::from_json(j);
            RunReport r;
            {
                py::gil_scoped_release release;
                r = run_experiment(cfg);
            }
            return to_py(r.to_json());
        },
        py::arg("config"), py::arg("overrides") = std::vector<std::string>{},
        "Cross-validated experiment; returns the report dict (also written to config['output']).");
    m.def(
        "cv_split",
        [](const std::vector<std::string>& centers, std::size_t k, std::uint64_t seed, bool by_center) {
            Cohort c;
            for (std::size_t i = 0; i < centers.size(); ++i) {
                Subject s;
                s.id = std::to_string(i);
                s.center = centers[i];
                c.subjects.push_back(s);
            }
            CvScheme scheme;
            scheme.kind = by_center ? CvScheme::Kind::leave_one_center_out : CvScheme::Kind::kfold;
            scheme.k = k;
            py::list out;
            for (const Fold& f : cv_split(c, scheme, seed))
                out.append(py::dict(py::arg("name") = f.name, py::arg("train") = f.train, py::arg("test") = f.test));
            return out;
        },
        py::arg("centers"), py::arg("k") = 5, py::arg("seed") = 0, py::arg("by_center") = false,
        "Fold indices for a cohort given each subject's center.");
    m.def(
        "evaluate",
        [](const fs::path& pred, const fs::path& truth, const std::string& task) {
            const EvalReport r = evaluate(pred, truth, parse_task(task));
            return to_py(r.report);
        },
        py::arg("pred"), py::arg("truth"), py::arg("task"));
    m.def("convert_si", &convert_si, py::arg("src"), py::arg("dst"), py::arg("grid") = "auto",
          "Writes super images with sidecars; returns per-file error messages.");
    m.def("invert_si", &invert_si, py::arg("src"), py::arg("dst"));
    m.def(
        "model_stats",
        [](const std::string& task, const std::string& preset, std::array<std::size_t, 3> shape) {
            const ExperimentConfig cfg = ExperimentConfig::from_json({{"task", task}, {"seed", 0}, {"preset", preset}});
            const json net = cfg.network();
            if (net.contains("unet")) {
                const UNetConfig uc = UNetConfig::from_json(net.at("unet"));
                Shape spatial{shape[0], shape[1], shape[2]};
                if (uc.rank == 2) {
                    const auto l = make_layout(shape[0], shape[1], shape[2], 2, parse_grid(cfg.si_grid, shape[2]));
                    spatial = {l.out_h(), l.out_w()};
                }
                const ModelStats s = model_stats(unet_layers(uc), {spatial});
                return py::make_tuple(s.params, s.macs);
            }
            if (net.contains("unetr")) {
                const Shape spatial{shape[0], shape[1], shape[2]};
                const ModelStats s = model_stats(make_unetr(UnetrConfig::from_json(net.at("unetr")), spatial, 0), spatial);
                return py::make_tuple(s.params, s.macs);
            }
            throw ConfigError("task '" + task + "' has no network");
        },
        py::arg("task"), py::arg("preset") = "toy", py::arg("shape") = std::array<std::size_t, 3>{32, 32, 16},
        "(parameters, multiply-accumulates) of a task's network for one input volume.");
}
