#include "oncokit/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "oncokit/error.hpp"

namespace oncokit {

namespace {

void check_binary(std::span<const double> v, const char* op) {
    for (double x : v)
        if (x != 0.0 && x != 1.0) throw ContractError(std::string(op) + ": mask holds non-binary value " + std::to_string(x));
}

std::vector<double> to_doubles(std::span<const float> v) { return {v.begin(), v.end()}; }

// Fenwick tree of counts over score ranks.
class Fenwick {
public:
    explicit Fenwick(std::size_t n) : tree_(n + 1, 0) {}
    void add(std::size_t i) {
        for (++i; i < tree_.size(); i += i & (~i + 1)) ++tree_[i];
    }
    // count of inserted ranks < i
    std::uint64_t prefix(std::size_t i) const {
        std::uint64_t s = 0;
        for (; i > 0; i -= i & (~i + 1)) s += tree_[i];
        return s;
    }

private:
    std::vector<std::uint64_t> tree_;
};

}  // namespace

double dsc(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ShapeError("dsc: mask sizes differ");
    check_binary(a, "dsc");
    check_binary(b, "dsc");
    double inter = 0.0, sa = 0.0, sb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        inter += a[i] * b[i];
        sa += a[i];
        sb += b[i];
    }
    if (sa + sb == 0.0) return 1.0;
    return 2.0 * inter / (sa + sb);
}

double dsc(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw ShapeError("dsc: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    return dsc(a.data(), b.data());
}

double dsc(const Volume& a, const Volume& b) {
    if (a.shape() != b.shape()) throw ShapeError("dsc: volume extents differ");
    const auto da = to_doubles(a.data()), db = to_doubles(b.data());
    return dsc(da, db);
}

ConfusionCounts confusion(std::span<const double> pred, std::span<const double> truth) {
    if (pred.size() != truth.size()) throw ShapeError("confusion: mask sizes differ");
    check_binary(pred, "confusion");
    check_binary(truth, "confusion");
    ConfusionCounts c;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred[i] != 0.0, t = truth[i] != 0.0;
        if (p && t) ++c.tp;
        else if (!p && t) ++c.fn;
        else if (p && !t) ++c.fp;
        else ++c.tn;
    }
    return c;
}

ConfusionCounts confusion(const Tensor& pred, const Tensor& truth) {
    if (pred.shape() != truth.shape())
        throw ShapeError("confusion: " + shape_str(pred.shape()) + " vs " + shape_str(truth.shape()));
    return confusion(pred.data(), truth.data());
}

PrecisionRecall precision_recall(const ConfusionCounts& c) {
    PrecisionRecall r;
    if (c.tp + c.fp == 0) r.precision_undefined = true;
    else r.precision = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
    if (c.tp + c.fn == 0) r.recall_undefined = true;
    else r.recall = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
    return r;
}

std::string orientation_name(Orientation o) {
    return o == Orientation::longer_time ? "longer_time" : "shorter_time";
}

CIndexResult c_index(std::span<const double> times, std::span<const double> scores, std::span<const int> events,
                     CIndexOptions opt) {
    const std::size_t n = times.size();
    if (scores.size() != n || events.size() != n) throw ShapeError("c_index: times, scores and events differ in length");
    if (n < 2) throw EvaluationError("c_index: need at least two subjects");
    std::vector<double> eta(scores.begin(), scores.end());
    for (std::size_t i = 0; i < n; ++i) {
        if (!std::isfinite(times[i]) || !std::isfinite(eta[i])) throw EvaluationError("c_index: non-finite input");
        if (events[i] != 0 && events[i] != 1) throw EvaluationError("c_index: event flags must be 0 or 1");
        if (opt.orientation == Orientation::shorter_time) eta[i] = -eta[i];
    }
    // Dense ranks of the scores.
    std::vector<double> sorted = eta;
    std::sort(sorted.begin(), sorted.end());
    sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
    std::vector<std::size_t> rank(n);
    for (std::size_t i = 0; i < n; ++i)
        rank[i] = static_cast<std::size_t>(std::lower_bound(sorted.begin(), sorted.end(), eta[i]) - sorted.begin());

    // Sweep subjects by decreasing time; each time-group first queries against
    // the strictly later subjects already inserted, then joins them.
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return times[a] > times[b]; });
    Fenwick fw(sorted.size());
    std::uint64_t inserted = 0, comparable = 0, strict = 0, ties = 0;
    for (std::size_t g = 0; g < n;) {
        std::size_t e = g;
        while (e < n && times[order[e]] == times[order[g]]) ++e;
        for (std::size_t k = g; k < e; ++k) {
            const std::size_t j = order[k];
            if (!events[j]) continue;
            const std::uint64_t below_or_equal = fw.prefix(rank[j] + 1);
            const std::uint64_t below = fw.prefix(rank[j]);
            comparable += inserted;
            strict += inserted - below_or_equal;
            ties += below_or_equal - below;
        }
        for (std::size_t k = g; k < e; ++k) fw.add(rank[order[k]]);
        inserted += e - g;
        g = e;
    }
    if (comparable == 0) throw EvaluationError("c_index: no comparable pairs");
    CIndexResult r;
    r.comparable_pairs = comparable;
    r.tied_scores = ties;
    r.concordant = static_cast<double>(strict) + (opt.harrell_ties ? 0.5 * static_cast<double>(ties) : 0.0);
    r.c_index = r.concordant / static_cast<double>(comparable);
    return r;
}

MeanStd mean_std(std::span<const double> v) {
    MeanStd m;
    if (v.empty()) return m;
    for (double x : v) m.mean += x;
    m.mean /= static_cast<double>(v.size());
    for (double x : v) m.std += (x - m.mean) * (x - m.mean);
    m.std = std::sqrt(m.std / static_cast<double>(v.size()));
    return m;
}

}  // namespace oncokit
