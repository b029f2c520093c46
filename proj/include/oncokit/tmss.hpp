#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "oncokit/autodiff.hpp"
#include "oncokit/losses.hpp"
#include "oncokit/params.hpp"
#include "oncokit/segnet.hpp"
#include "oncokit/train.hpp"

namespace oncokit {

/// Joint segmentation + prognosis model: one ViT encoder over
/// [EHR token; image tokens] feeding a UNETR decoder (segmentation) and an
/// MTLR head on the final-layer EHR-token row (prognosis).
struct TmssConfig {
    UnetrConfig unetr;   // vit.ehr_features is set from the covariate width
    std::size_t m = 0;   // MTLR grid size; 0 = ceil(sqrt(#events))
    double beta = 0.3;   // weight of the prognosis term
    double C = 1.0;      // MTLR smoothness penalty C/2 ||theta||^2 over the cohort
    FocalConfig focal{};

    void validate() const;
    nlohmann::json to_json() const;
    static TmssConfig from_json(const nlohmann::json& j);
};

struct TmssModel {
    TmssConfig config;
    SegNet net;                // UNETR parameters plus "surv.theta" [K, m] and "surv.bias" [m]
    std::vector<double> grid;  // MTLR boundaries tau_1..tau_m

    std::size_t m() const noexcept { return grid.size(); }
};

/// Builds the model for covariate width `ehr_features` and image extents
/// `spatial`, with a zero MTLR head.
TmssModel make_tmss(const TmssConfig& cfg, std::size_t ehr_features, const Shape& spatial, std::vector<double> grid,
                    std::uint64_t seed);

struct TmssOutput {
    ad::Var logits;  // [1, s...]
    ad::Var scores;  // MTLR scores [1, m]
};

/// One forward pass for image x[C, s...] and covariates [1, F].
TmssOutput tmss_forward(const TmssModel& model, const ParamBinding& bind, ad::Var x, ad::Var covariates);

/// combined_loss(sigmoid(seg_logits), mask) + beta * mtlr_nll(scores, labels);
/// labels are 1-based grid intervals and event indicators, one per score row.
ad::Var tmss_loss(ad::Var seg_logits, const Tensor& mask, ad::Var scores, const std::vector<std::size_t>& intervals,
                  const std::vector<int>& events, double beta, FocalConfig focal = {});

/// One training sample.
struct TmssSample {
    Tensor image;                    // [C, s...]
    Tensor mask;                     // [1, s...]
    std::vector<double> covariates;  // F values
    double time = 0.0;
    int event = 0;
};

/// Per-sample objective used in training: tmss_loss plus beta times this
/// sample's 1/n share of the MTLR penalty, so that the sum over a cohort of n
/// equals the summed segmentation loss plus beta times the full MTLR objective.
/// Throws ContractError when an event time lies beyond the grid.
ad::Var tmss_sample_loss(const TmssModel& model, const ParamBinding& bind, const TmssSample& s, std::size_t n);

/// Trains all parameters jointly. Returns the mean loss per epoch.
std::vector<double> tmss_fit(TmssModel& model, const std::vector<TmssSample>& samples, const TrainOptions& options);

struct TmssPrediction {
    Tensor logits;                // [1, s...]
    std::vector<double> scores;   // m MTLR scores
    double risk = 0.0;            // sum_k (1 - S(tau_k))
};

TmssPrediction tmss_predict(const TmssModel& model, const Tensor& image, const std::vector<double>& covariates);

void save_tmss(const std::string& path, const TmssModel& model);
TmssModel load_tmss(const std::string& path);

}  // namespace oncokit
