#include "oncokit/tmss.hpp"

#include <random>

#include "oncokit/error.hpp"
#include "oncokit/mtlr.hpp"

namespace oncokit {

void TmssConfig::validate() const {
    unetr.validate();
    if (!(beta >= 0.0)) throw ConfigError("tmss: beta must be >= 0");
    if (!(C >= 0.0)) throw ConfigError("tmss: C must be >= 0");
}

nlohmann::json TmssConfig::to_json() const {
    return {{"unetr", unetr.to_json()}, {"m", m},          {"beta", beta},
            {"C", C},                   {"focal_alpha", focal.alpha}, {"focal_gamma", focal.gamma}};
}

TmssConfig TmssConfig::from_json(const nlohmann::json& j) {
    TmssConfig c;
    if (j.contains("unetr")) c.unetr = UnetrConfig::from_json(j.at("unetr"));
    c.m = j.value("m", c.m);
    c.beta = j.value("beta", c.beta);
    c.C = j.value("C", c.C);
    c.focal.alpha = j.value("focal_alpha", c.focal.alpha);
    c.focal.gamma = j.value("focal_gamma", c.focal.gamma);
    return c;
}

TmssModel make_tmss(const TmssConfig& cfg_in, std::size_t ehr_features, const Shape& spatial, std::vector<double> grid,
                    std::uint64_t seed) {
    if (ehr_features == 0) throw ContractError("tmss: at least one EHR covariate is required");
    if (grid.empty()) throw ContractError("tmss: empty MTLR grid");
    TmssModel model;
    model.config = cfg_in;
    model.config.unetr.vit.ehr_features = ehr_features;
    model.config.validate();
    model.net = make_unetr(model.config.unetr, spatial, seed);
    // make_unetr fixes the positional table size; keep the resolved encoder config.
    model.config.unetr = UnetrConfig::from_json(model.net.config);
    model.config.m = grid.size();
    model.grid = std::move(grid);
    const std::size_t k = model.config.unetr.vit.embed;
    model.net.params.add("surv.theta", Tensor({k, model.m()}));
    model.net.params.add("surv.bias", Tensor({model.m()}));
    return model;
}

TmssOutput tmss_forward(const TmssModel& model, const ParamBinding& bind, ad::Var x, ad::Var covariates) {
    const VitConfig& vit = model.config.unetr.vit;
    const EncoderOutput enc = encode(bind, vit, vit_tokens(bind, vit, x, covariates, "vit."), "vit.");
    TmssOutput out;
    out.logits = unetr_decode(model.net, bind, enc, x, 1);
    const ad::Var ehr_row = ad::slice_rows(enc.final, 0, 1);
    out.scores = ad::add_row_bias(ad::matmul(ehr_row, bind["surv.theta"]), bind["surv.bias"]);
    return out;
}

ad::Var tmss_loss(ad::Var seg_logits, const Tensor& mask, ad::Var scores, const std::vector<std::size_t>& intervals,
                  const std::vector<int>& events, double beta, FocalConfig focal) {
    ad::Var seg = combined_loss(ad::sigmoid(seg_logits), mask, focal);
    if (beta == 0.0) return seg;
    return ad::add(seg, ad::scale(mtlr_nll(scores, intervals, events), beta));
}

ad::Var tmss_sample_loss(const TmssModel& model, const ParamBinding& bind, const TmssSample& s, std::size_t n) {
    if (n == 0) throw ContractError("tmss: cohort size must be >= 1");
    ad::Tape& tape = bind.tape();
    Tensor cov({1, s.covariates.size()});
    std::copy(s.covariates.begin(), s.covariates.end(), cov.data().begin());
    const TmssOutput out = tmss_forward(model, bind, tape.constant(s.image), tape.constant(cov));
    const std::size_t k = time_interval(model.grid, s.time);
    if (s.event && k > model.m())
        throw ContractError("tmss: event time " + std::to_string(s.time) + " lies beyond the last grid boundary " +
                            std::to_string(model.grid.back()));
    ad::Var loss = tmss_loss(out.logits, s.mask, out.scores, {k}, {s.event}, model.config.beta, model.config.focal);
    if (model.config.beta != 0.0 && model.config.C != 0.0) {
        ad::Var theta = bind["surv.theta"];
        const double w = model.config.beta * 0.5 * model.config.C / static_cast<double>(n);
        loss = ad::add(loss, ad::scale(ad::sum(ad::mul(theta, theta)), w));
    }
    return loss;
}

std::vector<double> tmss_fit(TmssModel& model, const std::vector<TmssSample>& samples, const TrainOptions& options) {
    OptimState state = options.make_state();
    const std::size_t n = samples.size();
    return train_samples(
        model.net.params, state, n,
        [&](ad::Tape&, const ParamBinding& bind, std::size_t i, std::size_t) { return tmss_sample_loss(model, bind, samples[i], n); },
        options);
}

TmssPrediction tmss_predict(const TmssModel& model, const Tensor& image, const std::vector<double>& covariates) {
    ad::Tape tape;
    std::vector<std::pair<std::string, ad::Var>> vars;
    for (const auto& [name, t] : model.net.params.entries()) vars.emplace_back(name, tape.constant(t));
    ParamBinding bind(tape, std::move(vars));
    Tensor cov({1, covariates.size()});
    std::copy(covariates.begin(), covariates.end(), cov.data().begin());
    const TmssOutput out = tmss_forward(model, bind, tape.constant(image), tape.constant(cov));
    TmssPrediction p;
    p.logits = out.logits.value();
    const Tensor s = out.scores.value();
    p.scores.assign(s.data().begin(), s.data().end());
    p.risk = risk_from_scores(model.m(), p.scores.data());
    return p;
}

void save_tmss(const std::string& path, const TmssModel& model) {
    nlohmann::json manifest{{"arch", "tmss"}, {"config", model.config.to_json()}, {"grid", model.grid}};
    save_checkpoint(path, model.net.params, manifest);
}

TmssModel load_tmss(const std::string& path) {
    Checkpoint ck = load_checkpoint(path);
    if (ck.manifest.value("arch", std::string{}) != "tmss")
        throw DataError("checkpoint " + path + " does not hold a tmss model");
    TmssModel model;
    model.config = TmssConfig::from_json(ck.manifest.at("config"));
    model.grid = ck.manifest.at("grid").get<std::vector<double>>();
    model.net.arch = "unetr";
    model.net.rank = model.config.unetr.vit.rank;
    model.net.layers = unetr_decoder_layers(model.config.unetr);
    model.net.config = model.config.unetr.to_json();
    model.net.params = std::move(ck.params);
    return model;
}

}  // namespace oncokit
