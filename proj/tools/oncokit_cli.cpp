// oncokit command-line tool.
//
//   oncokit synth       --out DIR [--n N] [--seed S] [--volumes] [--shape HxWxD] [--hide-size]
//   oncokit prep        --ehr CSV --out DIR [--data-root DIR] [--spacing MM] [--crop HxWxD]
//   oncokit convert si  --in DIR --out DIR [--grid auto|SHxSW] [--invert]
//   oncokit train       CONFIG [--set key=value]...
//   oncokit eval        --pred PATH --truth PATH --task TASK [--out FILE]
//   oncokit predict     --model FILE --ehr CSV --out DIR [--data-root DIR] [--threshold T]
//   oncokit stats model (--task TASK [--preset toy|paper] | --model FILE) [--shape HxWxD]
//
// Exit codes: 0 success, 1 other failure, 2 configuration error, 3 data error,
// 4 numeric divergence.

#include <CLI11.hpp>

#include <charconv>
#include <fstream>
#include <iostream>

#include "oncokit/error.hpp"
#include "oncokit/experiment.hpp"
#include "oncokit/segnet.hpp"
#include "oncokit/superimage.hpp"
#include "oncokit/tmss.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace oncokit;

namespace {

enum Exit : int { ok = 0, other = 1, config = 2, data = 3, numeric = 4 };

int exit_code_for(const std::string& type) {
    if (type == "ConfigError") return Exit::config;
    if (type == "DataError" || type == "ParseError" || type == "FormatError" || type == "ShapeError")
        return Exit::data;
    if (type == "NumericError" || type == "DivergenceError") return Exit::numeric;
    return Exit::other;
}

int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e)) return Exit::config;
    if (dynamic_cast<const DataError*>(&e) || dynamic_cast<const ParseError*>(&e) ||
        dynamic_cast<const FormatError*>(&e) || dynamic_cast<const ShapeError*>(&e))
        return Exit::data;
    if (dynamic_cast<const NumericError*>(&e) || dynamic_cast<const DivergenceError*>(&e)) return Exit::numeric;
    return Exit::other;
}

Extents3 parse_extents(const std::string& text) {
    Extents3 e{};
    const char* p = text.data();
    const char* end = p + text.size();
    for (std::size_t a = 0; a < 3; ++a) {
        const auto [next, ec] = std::from_chars(p, end, e[a]);
        if (ec != std::errc{} || e[a] == 0) throw ConfigError("'" + text + "' is not of the form HxWxD");
        p = next;
        if (a < 2) {
            if (p == end || *p != 'x') throw ConfigError("'" + text + "' is not of the form HxWxD");
            ++p;
        }
    }
    if (p != end) throw ConfigError("'" + text + "' is not of the form HxWxD");
    return e;
}

void print_errors(const std::vector<std::string>& errors) {
    for (const auto& e : errors) std::cerr << "error: " << e << '\n';
}

json stats_json(const ModelStats& s) { return {{"params", s.params}, {"macs", s.macs}}; }

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"oncokit: PET/CT tumour segmentation and survival modelling"};
    app.require_subcommand(1);

    // synth
    auto* synth = app.add_subcommand("synth", "Write a synthetic cohort (CSV plus optional volumes)");
    fs::path synth_out;
    SyntheticConfig synth_cfg;
    std::string synth_shape = "32x32x16";
    synth->add_option("--out", synth_out, "Output directory")->required();
    synth->add_option("--n", synth_cfg.n, "Number of subjects")->capture_default_str();
    synth->add_option("--seed", synth_cfg.seed, "Random seed")->capture_default_str();
    synth->add_option("--censor", synth_cfg.censor_frac, "Expected censored fraction")->capture_default_str();
    synth->add_option("--centers", synth_cfg.n_centers, "Number of acquisition centers")->capture_default_str();
    synth->add_flag("--volumes", synth_cfg.with_volumes, "Also write CT/PET/mask volumes");
    synth->add_option("--shape", synth_shape, "Volume extents HxWxD")->capture_default_str();
    synth->add_flag("--hide-size", synth_cfg.hide_size_covariate,
                    "Drop the tumour-size covariate from the EHR table");

    // prep
    auto* prep = app.add_subcommand("prep", "Resample, normalise and crop a cohort's volumes");
    fs::path prep_ehr, prep_root, prep_out;
    PrepOptions prep_opt;
    std::string prep_crop;
    prep->add_option("--ehr", prep_ehr, "Cohort CSV")->required()->check(CLI::ExistingFile);
    prep->add_option("--data-root", prep_root, "Directory volume paths are relative to (default: CSV directory)");
    prep->add_option("--out", prep_out, "Output directory")->required();
    prep->add_option("--spacing", prep_opt.spacing, "Isotropic spacing in mm")->capture_default_str();
    prep->add_option("--crop", prep_crop, "Crop extent HxWxD centred on the tumour");

    // convert si
    auto* convert = app.add_subcommand("convert", "Format conversions");
    convert->require_subcommand(1);
    auto* si = convert->add_subcommand("si", "Volumes to super images (or back with --invert)");
    fs::path si_in, si_out;
    std::string si_grid = "auto";
    bool si_invert = false;
    si->add_option("--in", si_in, "Input directory of .mvol files")->required()->check(CLI::ExistingDirectory);
    si->add_option("--out", si_out, "Output directory")->required();
    si->add_option("--grid", si_grid, "Mosaic grid: auto or SHxSW")->capture_default_str();
    si->add_flag("--invert", si_invert, "Restore volumes from super images and their sidecars");

    // train
    auto* train = app.add_subcommand("train", "Run a cross-validated experiment from a JSON config");
    fs::path train_config;
    std::vector<std::string> train_sets;
    train->add_option("config", train_config, "Experiment config (JSON)")->required();
    train->add_option("--set", train_sets, "Override a config value: key.path=value")->take_all();

    // eval
    auto* eval = app.add_subcommand("eval", "Score predictions against ground truth");
    fs::path eval_pred, eval_truth, eval_out;
    std::string eval_task;
    eval->add_option("--pred", eval_pred, "Prediction directory or id,risk CSV")->required()->check(CLI::ExistingPath);
    eval->add_option("--truth", eval_truth, "Mask directory or cohort CSV")->required()->check(CLI::ExistingPath);
    eval->add_option("--task", eval_task, "Task name")->required();
    eval->add_option("--out", eval_out, "Write the report here instead of stdout");

    // predict
    auto* predict = app.add_subcommand("predict", "Apply a saved model to a cohort");
    fs::path pred_model, pred_ehr, pred_out, pred_root;
    double pred_threshold = 0.5;
    predict->add_option("--model", pred_model, "Model file (.okpt or .json)")->required()->check(CLI::ExistingFile);
    predict->add_option("--ehr", pred_ehr, "Cohort CSV")->required()->check(CLI::ExistingFile);
    predict->add_option("--out", pred_out, "Output directory")->required();
    predict->add_option("--data-root", pred_root, "Directory volume paths are relative to");
    predict->add_option("--threshold", pred_threshold, "Mask threshold")->capture_default_str();

    // stats model
    auto* stats = app.add_subcommand("stats", "Model statistics");
    stats->require_subcommand(1);
    auto* stats_model = stats->add_subcommand("model", "Parameter and MAC counts");
    std::string st_task, st_preset = "toy", st_shape;
    fs::path st_model;
    auto* st_task_opt = stats_model->add_option("--task", st_task, "Task whose network to describe");
    stats_model->add_option("--preset", st_preset, "toy or paper")->capture_default_str();
    auto* st_model_opt =
        stats_model->add_option("--model", st_model, "Checkpoint to describe")->check(CLI::ExistingFile);
    st_task_opt->excludes(st_model_opt);
    stats_model->add_option("--shape", st_shape, "Input volume extents HxWxD (default 32x32x16 toy, 144x144x144 paper)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (synth->parsed()) {
            synth_cfg.volume_shape = parse_extents(synth_shape);
            write_synthetic_dataset(gen_synthetic_cohort(synth_cfg), synth_out);
            std::cout << "wrote " << synth_cfg.n << " subjects to " << (synth_out / "cohort.csv").string() << '\n';
            return Exit::ok;
        }
        if (prep->parsed()) {
            if (!prep_crop.empty()) prep_opt.crop = parse_extents(prep_crop);
            const auto errors = prep_cohort(prep_ehr, prep_root, prep_out, prep_opt);
            print_errors(errors);
            return errors.empty() ? Exit::ok : Exit::data;
        }
        if (si->parsed()) {
            const auto errors = si_invert ? invert_si(si_in, si_out) : convert_si(si_in, si_out, si_grid);
            print_errors(errors);
            return errors.empty() ? Exit::ok : Exit::data;
        }
        if (train->parsed()) {
            const ExperimentConfig cfg = load_experiment_config(train_config, train_sets);
            const RunReport report = run_experiment(cfg);
            std::cout << report.aggregate.dump(2) << '\n';
            int code = Exit::ok;
            for (const auto& f : report.folds) {
                if (!f.error) continue;
                std::cerr << "fold " << f.name << " failed in " << f.error->stage << ": " << f.error->type << ": "
                          << f.error->message << '\n';
                if (code == Exit::ok) code = exit_code_for(f.error->type);
            }
            return code;
        }
        if (eval->parsed()) {
            const EvalReport r = evaluate(eval_pred, eval_truth, parse_task(eval_task));
            if (eval_out.empty()) {
                std::cout << r.report.dump(2) << '\n';
            } else {
                std::ofstream out(eval_out);
                out << r.report.dump(2) << '\n';
                if (!out) throw DataError("cannot write '" + eval_out.string() + "'");
            }
            for (const auto& m : r.missing) std::cerr << "missing prediction: " << m << '\n';
            return r.missing.empty() ? Exit::ok : Exit::data;
        }
        if (predict->parsed()) {
            const std::size_t n = predict_cohort(pred_model, pred_ehr, pred_out, pred_root, pred_threshold);
            std::cout << "predicted " << n << " subjects into " << pred_out.string() << '\n';
            return Exit::ok;
        }
        if (stats_model->parsed()) {
            json out;
            if (!st_model.empty()) {
                if (st_shape.empty()) throw ConfigError("stats model --model needs --shape");
                const Extents3 e = parse_extents(st_shape);
                const Checkpoint ck = load_checkpoint(st_model);
                const std::string arch = ck.manifest.value("arch", std::string{});
                if (arch == "tmss") {
                    const TmssModel m = load_tmss(st_model.string());
                    ModelStats s = model_stats(m.net, {e[0], e[1], e[2]});
                    for (const char* name : {"surv.theta", "surv.bias"}) s.params += m.net.params.get(name).size();
                    out = stats_json(s);
                } else {
                    const SegNet net = load_segnet(st_model.string());
                    Shape spatial{e[0], e[1], e[2]};
                    if (net.rank == 2) {
                        const auto grid = ck.manifest.value("si_grid", std::string("auto"));
                        const SuperImageLayout l = make_layout(e[0], e[1], e[2], 2, parse_grid(grid, e[2]));
                        spatial = {l.out_h(), l.out_w()};
                    }
                    out = stats_json(model_stats(net, spatial));
                }
                out["arch"] = arch;
            } else {
                if (st_task.empty()) throw ConfigError("stats model needs --task or --model");
                json cj{{"task", st_task}, {"seed", 0}, {"preset", st_preset}};
                const ExperimentConfig cfg = ExperimentConfig::from_json(cj);
                if (!is_imaging_task(cfg.task)) throw ConfigError("task '" + st_task + "' has no network");
                const Extents3 e = parse_extents(st_shape.empty() ? (st_preset == "toy" ? "32x32x16" : "144x144x144")
                                                                  : st_shape);
                const json net = cfg.network();
                if (net.contains("unet")) {
                    const UNetConfig uc = UNetConfig::from_json(net.at("unet"));
                    Shape spatial{e[0], e[1], e[2]};
                    if (uc.rank == 2) {
                        const SuperImageLayout l = make_layout(e[0], e[1], e[2], 2, parse_grid(cfg.si_grid, e[2]));
                        spatial = {l.out_h(), l.out_w()};
                    }
                    out = stats_json(model_stats(unet_layers(uc), {spatial}));
                    out["input"] = spatial;
                } else {
                    const SegNet n = make_unetr(UnetrConfig::from_json(net.at("unetr")), {e[0], e[1], e[2]}, 0);
                    out = stats_json(model_stats(n, {e[0], e[1], e[2]}));
                }
                out["network"] = net;
            }
            std::cout << out.dump(2) << '\n';
            return Exit::ok;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return exit_code_for(e);
    }
    return Exit::other;
}
