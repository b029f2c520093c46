#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "oncokit/tensor.hpp"
#include "oncokit/volume.hpp"

namespace oncokit {

struct ConfusionCounts {
    std::uint64_t tp = 0, fn = 0, fp = 0, tn = 0;
    std::uint64_t total() const noexcept { return tp + fn + fp + tn; }
};

/// 2|A and B| / (|A| + |B|); 1.0 when both masks are empty. Inputs must be binary.
double dsc(std::span<const double> a, std::span<const double> b);
double dsc(const Tensor& a, const Tensor& b);
double dsc(const Volume& a, const Volume& b);

/// `pred` against `truth`, both binary.
ConfusionCounts confusion(std::span<const double> pred, std::span<const double> truth);
ConfusionCounts confusion(const Tensor& pred, const Tensor& truth);

struct PrecisionRecall {
    double precision = 1.0;
    double recall = 1.0;
    bool precision_undefined = false;  // tp + fp == 0; precision reported as 1.0
    bool recall_undefined = false;     // tp + fn == 0; recall reported as 1.0
};
PrecisionRecall precision_recall(const ConfusionCounts& c);

/// How risk scores relate to time. `longer_time` is the literal concordance
/// definition (a pair is concordant when the subject with the longer time has
/// the larger score); `shorter_time` negates the scores first, the usual hazard
/// convention where higher risk means an earlier event.
enum class Orientation { longer_time, shorter_time };

std::string orientation_name(Orientation o);

struct CIndexOptions {
    Orientation orientation = Orientation::longer_time;
    /// Score ties among comparable pairs earn half credit (Harrell); off by
    /// default, where only strict agreement counts.
    bool harrell_ties = false;
};

struct CIndexResult {
    double c_index = 0.0;
    std::uint64_t comparable_pairs = 0;
    double concordant = 0.0;  // may hold halves with harrell_ties
    std::uint64_t tied_scores = 0;
};

/// Pairs (i, j) with T_i > T_j and event_j = 1 are comparable; concordant when
/// score_i > score_j. O(n log n). Throws EvaluationError when no pair is comparable.
CIndexResult c_index(std::span<const double> times, std::span<const double> scores, std::span<const int> events,
                     CIndexOptions opt = {});

struct MeanStd {
    double mean = 0.0;
    double std = 0.0;  // population
};
MeanStd mean_std(std::span<const double> v);

}  // namespace oncokit
