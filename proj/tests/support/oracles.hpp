#pragma once

// Definitional reference implementations used to cross-check the fast code.

#include <cstdint>
#include <vector>

namespace oncokit::testing {

struct PairCount {
    std::uint64_t comparable = 0;
    double concordant = 0.0;
};

/// O(n^2) enumeration of the concordance definition: pair (i, j) is comparable
/// when T_i > T_j and event_j = 1, concordant when eta_i > eta_j (ties earn
/// half credit only when `half_ties`).
inline PairCount c_index_pairs(const std::vector<double>& t, const std::vector<double>& eta,
                               const std::vector<int>& ev, bool half_ties = false) {
    PairCount pc;
    for (std::size_t i = 0; i < t.size(); ++i)
        for (std::size_t j = 0; j < t.size(); ++j) {
            if (!(t[i] > t[j]) || ev[j] != 1) continue;
            ++pc.comparable;
            if (eta[i] > eta[j]) pc.concordant += 1.0;
            else if (half_ties && eta[i] == eta[j]) pc.concordant += 0.5;
        }
    return pc;
}

}  // namespace oncokit::testing
