#include "oncokit/fusion.hpp"

#include <cmath>

#include "oncokit/error.hpp"

namespace oncokit {

std::vector<double> zscore(std::span<const double> x) {
    std::vector<double> out(x.size(), 0.0);
    if (x.empty()) return out;
    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= static_cast<double>(x.size());
    double var = 0.0;
    for (double v : x) var += (v - mean) * (v - mean);
    const double sd = std::sqrt(var / static_cast<double>(x.size()));
    if (sd == 0.0) return out;
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - mean) / sd;
    return out;
}

std::vector<double> deep_fusion_risk(std::span<const double> cox_risk, std::span<const double> mtlr_risk,
                                     FusionMode mode) {
    if (cox_risk.size() != mtlr_risk.size())
        throw ShapeError("deep_fusion_risk: " + std::to_string(cox_risk.size()) + " Cox risks vs " +
                         std::to_string(mtlr_risk.size()) + " MTLR risks");
    std::vector<double> a(cox_risk.begin(), cox_risk.end()), b(mtlr_risk.begin(), mtlr_risk.end());
    if (mode == FusionMode::normalized) {
        a = zscore(a);
        b = zscore(b);
    }
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = 0.5 * (a[i] + b[i]);
    return out;
}

}  // namespace oncokit
