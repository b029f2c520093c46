#include "oncokit/autodiff.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <memory>
#include <numbers>

#include "conv_kernels.hpp"
#include "oncokit/error.hpp"

namespace oncokit::ad {

const Tensor& Var::value() const { return tape->value(id); }

Var Tape::leaf(Tensor value, bool requires_grad) {
    nodes_.push_back(Node{"leaf", {}, std::move(value), requires_grad, {}});
    return Var{this, nodes_.size() - 1};
}

Var Tape::record(std::string_view op, std::vector<NodeId> inputs, Tensor value, Backward backward) {
    bool rg = false;
    for (auto id : inputs) rg = rg || nodes_.at(id).requires_grad;
    if (!rg) backward = nullptr;
    nodes_.push_back(Node{std::string(op), std::move(inputs), std::move(value), rg, std::move(backward)});
    return Var{this, nodes_.size() - 1};
}

void Tape::backward(Var loss) {
    if (loss.tape != this) throw ContractError("backward: loss belongs to another tape");
    const auto& lv = nodes_.at(loss.id).value;
    if (lv.size() != 1) throw ContractError("backward: loss must be scalar, got shape " + shape_str(lv.shape()));
    grads_.assign(nodes_.size(), std::nullopt);
    grads_[loss.id] = Tensor(lv.shape(), 1.0);
    for (NodeId id = loss.id + 1; id-- > 0;) {
        auto& node = nodes_[id];
        if (!node.requires_grad || !grads_[id] || !node.backward) continue;
        node.backward(*this, *grads_[id]);
    }
}

Tensor Tape::grad(Var v) const {
    if (v.id < grads_.size() && grads_[v.id]) return *grads_[v.id];
    return Tensor::zeros(nodes_.at(v.id).value.shape());
}

void Tape::accumulate(NodeId id, const Tensor& g) {
    if (!nodes_[id].requires_grad) return;
    auto& slot = grads_[id];
    if (!slot) {
        slot = g;
        return;
    }
    if (slot->size() != g.size()) throw ShapeError("gradient shape mismatch at node " + nodes_[id].op);
    auto dst = slot->data();
    auto src = g.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void Tape::accumulate(NodeId id, Tensor&& g) {
    if (!nodes_[id].requires_grad) return;
    auto& slot = grads_[id];
    if (!slot) {
        slot = std::move(g);
        return;
    }
    accumulate(id, static_cast<const Tensor&>(g));
}

namespace {

Tape& same_tape(std::initializer_list<Var> vars) {
    Tape* t = vars.begin()->tape;
    for (const auto& v : vars)
        if (v.tape != t) throw ContractError("operands recorded on different tapes");
    return *t;
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shapes differ: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

void require_rank(const char* op, const Tensor& a, std::size_t rank) {
    if (a.rank() != rank)
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(a.shape()));
}

template <class F>
Tensor map_unary(const Tensor& x, F f) {
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
    return out;
}

}  // namespace

Var add(Var a, Var b) {
    Tape& t = same_tape({a, b});
    require_same_shape("add", a.value(), b.value());
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
    return t.record("add", {a.id, b.id}, std::move(out), [a, b](Tape& tp, const Tensor& g) {
        tp.accumulate(a.id, g);
        tp.accumulate(b.id, g);
    });
}

Var sub(Var a, Var b) {
    Tape& t = same_tape({a, b});
    require_same_shape("sub", a.value(), b.value());
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
    return t.record("sub", {a.id, b.id}, std::move(out), [a, b](Tape& tp, const Tensor& g) {
        tp.accumulate(a.id, g);
        tp.accumulate(b.id, map_unary(g, [](double v) { return -v; }));
    });
}

Var mul(Var a, Var b) {
    Tape& t = same_tape({a, b});
    require_same_shape("mul", a.value(), b.value());
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
    return t.record("mul", {a.id, b.id}, std::move(out), [a, b](Tape& tp, const Tensor& g) {
        const Tensor& av = tp.value(a.id);
        const Tensor& bv = tp.value(b.id);
        if (tp.requires_grad(a.id)) {
            Tensor ga(g.shape());
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * bv[i];
            tp.accumulate(a.id, std::move(ga));
        }
        if (tp.requires_grad(b.id)) {
            Tensor gb(g.shape());
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] = g[i] * av[i];
            tp.accumulate(b.id, std::move(gb));
        }
    });
}

Var scale(Var a, double s) {
    return a.tape->record("scale", {a.id}, map_unary(a.value(), [s](double v) { return v * s; }),
                          [a, s](Tape& tp, const Tensor& g) {
                              tp.accumulate(a.id, map_unary(g, [s](double v) { return v * s; }));
                          });
}

Var add_scalar(Var a, double s) {
    return a.tape->record("add_scalar", {a.id}, map_unary(a.value(), [s](double v) { return v + s; }),
                          [a](Tape& tp, const Tensor& g) { tp.accumulate(a.id, g); });
}

Var sum(Var a) {
    return a.tape->record("sum", {a.id}, Tensor::scalar(oncokit::sum(a.value())), [a](Tape& tp, const Tensor& g) {
        tp.accumulate(a.id, Tensor(tp.value(a.id).shape(), g[0]));
    });
}

Var mean(Var a) {
    const double n = static_cast<double>(a.value().size());
    return a.tape->record("mean", {a.id}, Tensor::scalar(oncokit::sum(a.value()) / n),
                          [a, n](Tape& tp, const Tensor& g) {
                              tp.accumulate(a.id, Tensor(tp.value(a.id).shape(), g[0] / n));
                          });
}

namespace {

struct MatmulPlan {
    std::size_t m, k, n;
    Shape out_shape;
    // For every output batch index, the batch offsets into a and b.
    std::vector<std::size_t> a_batch, b_batch;
    std::size_t a_batches, b_batches;
};

MatmulPlan plan_matmul(const Shape& as, const Shape& bs) {
    if (as.size() < 2 || bs.size() < 2)
        throw ShapeError("matmul: operands need rank >= 2, got " + shape_str(as) + " x " + shape_str(bs));
    MatmulPlan p;
    p.m = as[as.size() - 2];
    p.k = as.back();
    p.n = bs.back();
    if (bs[bs.size() - 2] != p.k)
        throw ShapeError("matmul: inner extents differ: " + shape_str(as) + " x " + shape_str(bs));
    const Shape ab(as.begin(), as.end() - 2);
    const Shape bb(bs.begin(), bs.end() - 2);
    const std::size_t rank = std::max(ab.size(), bb.size());
    Shape ob(rank, 1), ap(rank, 1), bp(rank, 1);
    std::copy(ab.begin(), ab.end(), ap.begin() + static_cast<std::ptrdiff_t>(rank - ab.size()));
    std::copy(bb.begin(), bb.end(), bp.begin() + static_cast<std::ptrdiff_t>(rank - bb.size()));
    for (std::size_t i = 0; i < rank; ++i) {
        if (ap[i] != bp[i] && ap[i] != 1 && bp[i] != 1)
            throw ShapeError("matmul: batch extents not broadcastable: " + shape_str(as) + " x " + shape_str(bs));
        ob[i] = std::max(ap[i], bp[i]);
    }
    const std::size_t nb = shape_numel(ob);
    p.a_batches = shape_numel(ap);
    p.b_batches = shape_numel(bp);
    for (std::size_t lin = 0; lin < nb; ++lin) {
        std::size_t rem = lin, ai = 0, bi = 0, astride = 1, bstride = 1;
        for (std::size_t d = rank; d-- > 0;) {
            const std::size_t idx = rem % ob[d];
            rem /= ob[d];
            ai += (ap[d] == 1 ? 0 : idx) * astride;
            bi += (bp[d] == 1 ? 0 : idx) * bstride;
            astride *= ap[d];
            bstride *= bp[d];
        }
        p.a_batch.push_back(ai);
        p.b_batch.push_back(bi);
    }
    p.out_shape = ob;
    if (rank == 0) p.out_shape.clear();
    p.out_shape.push_back(p.m);
    p.out_shape.push_back(p.n);
    return p;
}

}  // namespace

Var matmul(Var a, Var b) {
    Tape& t = same_tape({a, b});
    auto plan = plan_matmul(a.shape(), b.shape());
    Tensor out(plan.out_shape);
    const std::size_t mk = plan.m * plan.k, kn = plan.k * plan.n, mn = plan.m * plan.n;
    for (std::size_t i = 0; i < plan.a_batch.size(); ++i)
        detail::gemm(a.value().data().data() + plan.a_batch[i] * mk, b.value().data().data() + plan.b_batch[i] * kn,
                     out.data().data() + i * mn, plan.m, plan.k, plan.n);
    return t.record("matmul", {a.id, b.id}, std::move(out),
                    [a, b, plan = std::move(plan), mk, kn, mn](Tape& tp, const Tensor& g) {
                        const Tensor& av = tp.value(a.id);
                        const Tensor& bv = tp.value(b.id);
                        if (tp.requires_grad(a.id)) {
                            Tensor ga(av.shape());
                            for (std::size_t i = 0; i < plan.a_batch.size(); ++i)
                                detail::gemm_nt(g.data().data() + i * mn, bv.data().data() + plan.b_batch[i] * kn,
                                                ga.data().data() + plan.a_batch[i] * mk, plan.m, plan.n, plan.k,
                                                true);
                            tp.accumulate(a.id, std::move(ga));
                        }
                        if (tp.requires_grad(b.id)) {
                            Tensor gb(bv.shape());
                            for (std::size_t i = 0; i < plan.b_batch.size(); ++i)
                                detail::gemm_tn(av.data().data() + plan.a_batch[i] * mk, g.data().data() + i * mn,
                                                gb.data().data() + plan.b_batch[i] * kn, plan.k, plan.m, plan.n,
                                                true);
                            tp.accumulate(b.id, std::move(gb));
                        }
                    });
}

namespace {

Tensor transpose2d(const Tensor& x) {
    const std::size_t r = x.dim(0), c = x.dim(1);
    Tensor out({c, r});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
    return out;
}

}  // namespace

Var transpose(Var a) {
    require_rank("transpose", a.value(), 2);
    return a.tape->record("transpose", {a.id}, transpose2d(a.value()),
                          [a](Tape& tp, const Tensor& g) { tp.accumulate(a.id, transpose2d(g)); });
}

Var reshape(Var a, Shape shape) {
    Tensor out = a.value().reshaped(std::move(shape));
    return a.tape->record("reshape", {a.id}, std::move(out), [a](Tape& tp, const Tensor& g) {
        tp.accumulate(a.id, g.reshaped(tp.value(a.id).shape()));
    });
}

Var slice_cols(Var a, std::size_t begin, std::size_t count) {
    require_rank("slice_cols", a.value(), 2);
    const std::size_t r = a.value().dim(0), c = a.value().dim(1);
    if (count == 0 || begin + count > c) throw ShapeError("slice_cols: range out of bounds for " + shape_str(a.shape()));
    Tensor out({r, count});
    for (std::size_t i = 0; i < r; ++i)
        std::copy_n(a.value().data().data() + i * c + begin, count, out.data().data() + i * count);
    return a.tape->record("slice_cols", {a.id}, std::move(out), [a, r, c, begin, count](Tape& tp, const Tensor& g) {
        Tensor ga({r, c});
        for (std::size_t i = 0; i < r; ++i)
            std::copy_n(g.data().data() + i * count, count, ga.data().data() + i * c + begin);
        tp.accumulate(a.id, std::move(ga));
    });
}

Var concat_cols(std::span<const Var> parts) {
    if (parts.empty()) throw ContractError("concat_cols: no operands");
    Tape& t = *parts[0].tape;
    const std::size_t r = parts[0].value().dim(0);
    std::size_t total = 0;
    std::vector<NodeId> ids;
    std::vector<std::size_t> widths;
    for (const auto& p : parts) {
        require_rank("concat_cols", p.value(), 2);
        if (p.tape != &t) throw ContractError("operands recorded on different tapes");
        if (p.value().dim(0) != r) throw ShapeError("concat_cols: row counts differ");
        ids.push_back(p.id);
        widths.push_back(p.value().dim(1));
        total += p.value().dim(1);
    }
    Tensor out({r, total});
    std::size_t off = 0;
    for (const auto& p : parts) {
        const std::size_t w = p.value().dim(1);
        for (std::size_t i = 0; i < r; ++i)
            std::copy_n(p.value().data().data() + i * w, w, out.data().data() + i * total + off);
        off += w;
    }
    return t.record("concat_cols", ids, std::move(out), [ids, widths, r, total](Tape& tp, const Tensor& g) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
            const std::size_t w = widths[k];
            if (tp.requires_grad(ids[k])) {
                Tensor gk({r, w});
                for (std::size_t i = 0; i < r; ++i)
                    std::copy_n(g.data().data() + i * total + off, w, gk.data().data() + i * w);
                tp.accumulate(ids[k], std::move(gk));
            }
            off += w;
        }
    });
}

Var slice_rows(Var a, std::size_t begin, std::size_t count) {
    require_rank("slice_rows", a.value(), 2);
    const std::size_t r = a.value().dim(0), c = a.value().dim(1);
    if (count == 0 || begin + count > r) throw ShapeError("slice_rows: range out of bounds for " + shape_str(a.shape()));
    std::vector<double> data(a.value().data().begin() + static_cast<std::ptrdiff_t>(begin * c),
                             a.value().data().begin() + static_cast<std::ptrdiff_t>((begin + count) * c));
    return a.tape->record("slice_rows", {a.id}, Tensor({count, c}, std::move(data)),
                          [a, r, c, begin](Tape& tp, const Tensor& g) {
                              Tensor ga({r, c});
                              std::copy(g.data().begin(), g.data().end(), ga.data().begin() + static_cast<std::ptrdiff_t>(begin * c));
                              tp.accumulate(a.id, std::move(ga));
                          });
}

namespace {

Var concat_leading(const char* op, std::span<const Var> parts) {
    if (parts.empty()) throw ContractError(std::string(op) + ": no operands");
    Tape& t = *parts[0].tape;
    Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
    std::size_t lead = 0;
    std::vector<NodeId> ids;
    std::vector<std::size_t> sizes;
    std::vector<double> data;
    for (const auto& p : parts) {
        if (p.tape != &t) throw ContractError("operands recorded on different tapes");
        if (Shape(p.shape().begin() + 1, p.shape().end()) != tail)
            throw ShapeError(std::string(op) + ": trailing extents differ: " + shape_str(parts[0].shape()) + " vs " +
                             shape_str(p.shape()));
        lead += p.shape()[0];
        ids.push_back(p.id);
        sizes.push_back(p.value().size());
        data.insert(data.end(), p.value().data().begin(), p.value().data().end());
    }
    Shape shape{lead};
    shape.insert(shape.end(), tail.begin(), tail.end());
    return t.record(op, ids, Tensor(shape, std::move(data)), [ids, sizes](Tape& tp, const Tensor& g) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
            if (tp.requires_grad(ids[k])) {
                std::vector<double> gk(g.data().begin() + static_cast<std::ptrdiff_t>(off),
                                       g.data().begin() + static_cast<std::ptrdiff_t>(off + sizes[k]));
                tp.accumulate(ids[k], Tensor(tp.value(ids[k]).shape(), std::move(gk)));
            }
            off += sizes[k];
        }
    });
}

}  // namespace

Var concat_rows(std::span<const Var> parts) {
    for (const auto& p : parts) require_rank("concat_rows", p.value(), 2);
    return concat_leading("concat_rows", parts);
}

Var concat_channels(std::span<const Var> parts) { return concat_leading("concat_channels", parts); }

Var mean_rows(Var a) {
    require_rank("mean_rows", a.value(), 2);
    const std::size_t r = a.value().dim(0), c = a.value().dim(1);
    Tensor out({1, c});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j] += a.value()[i * c + j];
    for (std::size_t j = 0; j < c; ++j) out[j] /= static_cast<double>(r);
    return a.tape->record("mean_rows", {a.id}, std::move(out), [a, r, c](Tape& tp, const Tensor& g) {
        Tensor ga({r, c});
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) ga[i * c + j] = g[j] / static_cast<double>(r);
        tp.accumulate(a.id, std::move(ga));
    });
}

Var add_row_bias(Var x, Var b) {
    Tape& t = same_tape({x, b});
    require_rank("add_row_bias", x.value(), 2);
    const std::size_t r = x.value().dim(0), c = x.value().dim(1);
    if (b.value().size() != c)
        throw ShapeError("add_row_bias: bias " + shape_str(b.shape()) + " for rows of " + shape_str(x.shape()));
    Tensor out = x.value();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] += b.value()[j];
    return t.record("add_row_bias", {x.id, b.id}, std::move(out), [x, b, r, c](Tape& tp, const Tensor& g) {
        tp.accumulate(x.id, g);
        if (tp.requires_grad(b.id)) {
            Tensor gb(tp.value(b.id).shape());
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
            tp.accumulate(b.id, std::move(gb));
        }
    });
}

Var activation(Var x, Activation kind) {
    const Tensor& xv = x.value();
    Tensor out(xv.shape());
    switch (kind) {
        case Activation::relu:
            for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
            break;
        case Activation::gelu:
            for (std::size_t i = 0; i < xv.size(); ++i)
                out[i] = 0.5 * xv[i] * (1.0 + std::erf(xv[i] / std::numbers::sqrt2));
            break;
        case Activation::sigmoid:
            for (std::size_t i = 0; i < xv.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-xv[i]));
            break;
    }
    const char* name = kind == Activation::relu ? "relu" : kind == Activation::gelu ? "gelu" : "sigmoid";
    return x.tape->record(name, {x.id}, std::move(out), [x, kind](Tape& tp, const Tensor& g) {
        const Tensor& xv = tp.value(x.id);
        Tensor gx(xv.shape());
        switch (kind) {
            case Activation::relu:
                for (std::size_t i = 0; i < xv.size(); ++i) gx[i] = xv[i] > 0.0 ? g[i] : 0.0;
                break;
            case Activation::gelu: {
                const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
                for (std::size_t i = 0; i < xv.size(); ++i) {
                    const double cdf = 0.5 * (1.0 + std::erf(xv[i] / std::numbers::sqrt2));
                    const double pdf = inv_sqrt_2pi * std::exp(-0.5 * xv[i] * xv[i]);
                    gx[i] = g[i] * (cdf + xv[i] * pdf);
                }
                break;
            }
            case Activation::sigmoid:
                for (std::size_t i = 0; i < xv.size(); ++i) {
                    const double s = 1.0 / (1.0 + std::exp(-xv[i]));
                    gx[i] = g[i] * s * (1.0 - s);
                }
                break;
        }
        tp.accumulate(x.id, std::move(gx));
    });
}

Var exp(Var x) {
    Tensor out = map_unary(x.value(), [](double v) { return std::exp(v); });
    return x.tape->record("exp", {x.id}, std::move(out), [x](Tape& tp, const Tensor& g) {
        const Tensor& xv = tp.value(x.id);
        Tensor gx(xv.shape());
        for (std::size_t i = 0; i < xv.size(); ++i) gx[i] = g[i] * std::exp(xv[i]);
        tp.accumulate(x.id, std::move(gx));
    });
}

Var log(Var x) {
    for (double v : x.value().data())
        if (!(v > 0.0)) throw NumericError("log of non-positive value " + std::to_string(v));
    Tensor out = map_unary(x.value(), [](double v) { return std::log(v); });
    return x.tape->record("log", {x.id}, std::move(out), [x](Tape& tp, const Tensor& g) {
        const Tensor& xv = tp.value(x.id);
        Tensor gx(xv.shape());
        for (std::size_t i = 0; i < xv.size(); ++i) gx[i] = g[i] / xv[i];
        tp.accumulate(x.id, std::move(gx));
    });
}

namespace {

struct AxisSplit {
    std::size_t outer, len, inner;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
    if (axis >= s.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
    AxisSplit r{1, s[axis], 1};
    for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
    return r;
}

}  // namespace

Var softmax(Var x, std::size_t axis) {
    const Tensor& xv = x.value();
    for (double v : xv.data())
        if (std::isnan(v)) throw NumericError("softmax: NaN input");
    const auto sp = split_axis(xv.shape(), axis);
    Tensor out(xv.shape());
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t in = 0; in < sp.inner; ++in) {
            const std::size_t base = o * sp.len * sp.inner + in;
            double mx = -INFINITY;
            for (std::size_t l = 0; l < sp.len; ++l) mx = std::max(mx, xv[base + l * sp.inner]);
            double z = 0.0;
            for (std::size_t l = 0; l < sp.len; ++l) {
                const double e = std::exp(xv[base + l * sp.inner] - mx);
                out[base + l * sp.inner] = e;
                z += e;
            }
            for (std::size_t l = 0; l < sp.len; ++l) out[base + l * sp.inner] /= z;
        }
    const NodeId self = x.tape->size();
    return x.tape->record("softmax", {x.id}, std::move(out), [x, sp, self](Tape& tp, const Tensor& g) {
        const Tensor& y = tp.value(self);
        Tensor gx(y.shape());
        for (std::size_t o = 0; o < sp.outer; ++o)
            for (std::size_t in = 0; in < sp.inner; ++in) {
                const std::size_t base = o * sp.len * sp.inner + in;
                double s = 0.0;
                for (std::size_t l = 0; l < sp.len; ++l) s += g[base + l * sp.inner] * y[base + l * sp.inner];
                for (std::size_t l = 0; l < sp.len; ++l) {
                    const std::size_t i = base + l * sp.inner;
                    gx[i] = y[i] * (g[i] - s);
                }
            }
        tp.accumulate(x.id, std::move(gx));
    });
}

namespace {

// Normalize `groups` contiguous blocks of length `len` (stride 1) or, for the
// channel case, blocks laid out as [C, spatial]. Both reduce to contiguous runs.
struct NormSaved {
    std::vector<double> xhat;
    std::vector<double> inv_std;
};

Var normalize_blocks(const char* op, Var x, Var gain, Var bias, double eps, std::size_t groups, std::size_t len,
                     bool param_per_position) {
    // param_per_position: layer norm (gain indexed by position within block);
    // otherwise instance norm (gain indexed by block).
    Tape& t = same_tape({x, gain, bias});
    const std::size_t nparam = param_per_position ? len : groups;
    if (gain.value().size() != nparam || bias.value().size() != nparam)
        throw ShapeError(std::string(op) + ": gain/bias must have " + std::to_string(nparam) + " elements");
    const Tensor& xv = x.value();
    Tensor out(xv.shape());
    auto saved = std::make_shared<NormSaved>();
    saved->xhat.resize(xv.size());
    saved->inv_std.resize(groups);
    for (std::size_t gi = 0; gi < groups; ++gi) {
        const double* src = xv.data().data() + gi * len;
        double mu = 0.0;
        for (std::size_t i = 0; i < len; ++i) mu += src[i];
        mu /= static_cast<double>(len);
        double var = 0.0;
        for (std::size_t i = 0; i < len; ++i) var += (src[i] - mu) * (src[i] - mu);
        var /= static_cast<double>(len);
        const double inv = 1.0 / std::sqrt(var + eps);
        saved->inv_std[gi] = inv;
        for (std::size_t i = 0; i < len; ++i) {
            const double xh = (src[i] - mu) * inv;
            saved->xhat[gi * len + i] = xh;
            const std::size_t p = param_per_position ? i : gi;
            out[gi * len + i] = xh * gain.value()[p] + bias.value()[p];
        }
    }
    return t.record(op, {x.id, gain.id, bias.id}, std::move(out),
                    [x, gain, bias, groups, len, param_per_position, saved](Tape& tp, const Tensor& g) {
                        const Tensor& gv = tp.value(gain.id);
                        Tensor gx(tp.value(x.id).shape());
                        Tensor gg(gv.shape()), gb(gv.shape());
                        std::vector<double> dxh(len);
                        for (std::size_t gi = 0; gi < groups; ++gi) {
                            double m1 = 0.0, m2 = 0.0;
                            for (std::size_t i = 0; i < len; ++i) {
                                const std::size_t idx = gi * len + i;
                                const std::size_t p = param_per_position ? i : gi;
                                dxh[i] = g[idx] * gv[p];
                                m1 += dxh[i];
                                m2 += dxh[i] * saved->xhat[idx];
                                gg[p] += g[idx] * saved->xhat[idx];
                                gb[p] += g[idx];
                            }
                            m1 /= static_cast<double>(len);
                            m2 /= static_cast<double>(len);
                            for (std::size_t i = 0; i < len; ++i) {
                                const std::size_t idx = gi * len + i;
                                gx[idx] = saved->inv_std[gi] * (dxh[i] - m1 - saved->xhat[idx] * m2);
                            }
                        }
                        tp.accumulate(x.id, std::move(gx));
                        tp.accumulate(gain.id, std::move(gg));
                        tp.accumulate(bias.id, std::move(gb));
                    });
}

}  // namespace

Var layer_norm(Var z, Var gain, Var bias, double eps) {
    if (!(eps > 0.0)) throw ContractError("layer_norm: eps must be positive");
    const std::size_t k = z.shape().back();
    return normalize_blocks("layer_norm", z, gain, bias, eps, z.value().size() / k, k, true);
}

Var instance_norm(Var x, Var gain, Var bias, double eps) {
    if (!(eps > 0.0)) throw ContractError("instance_norm: eps must be positive");
    if (x.value().rank() < 2) throw ShapeError("instance_norm: expected [C, spatial...], got " + shape_str(x.shape()));
    const std::size_t c = x.shape()[0];
    return normalize_blocks("instance_norm", x, gain, bias, eps, c, x.value().size() / c, false);
}

namespace {

std::size_t check_spatial_rank(const char* op, const Tensor& x, int rank) {
    if (rank != 2 && rank != 3) throw ShapeError(std::string(op) + ": rank must be 2 or 3");
    if (x.rank() != static_cast<std::size_t>(rank) + 1)
        throw ShapeError(std::string(op) + ": rank-" + std::to_string(rank) + " op needs input [C, spatial x" +
                         std::to_string(rank) + "], got " + shape_str(x.shape()));
    return static_cast<std::size_t>(rank);
}

// Geometry of conv from x[C_in, s...] with kernel extents taken from w's trailing axes.
detail::ConvGeometry conv_geometry(const char* op, const Shape& xs, const Shape& ws, const ConvOptions& opt) {
    const std::size_t r = static_cast<std::size_t>(opt.rank);
    if (ws.size() != r + 2)
        throw ShapeError(std::string(op) + ": weight " + shape_str(ws) + " does not match rank " + std::to_string(r));
    if (opt.stride == 0) throw ContractError(std::string(op) + ": stride must be >= 1");
    detail::ConvGeometry g;
    g.channels = xs[0];
    for (std::size_t d = 0; d < r; ++d) {
        g.in[d] = xs[d + 1];
        g.kernel[d] = ws[d + 2];
        g.stride[d] = opt.stride;
        g.pad[d] = opt.padding;
        const std::size_t span = g.in[d] + 2 * opt.padding;
        if (span < g.kernel[d])
            throw ShapeError(std::string(op) + ": non-positive output extent on spatial axis " + std::to_string(d) +
                             " (input " + std::to_string(g.in[d]) + ", kernel " + std::to_string(g.kernel[d]) +
                             ", padding " + std::to_string(opt.padding) + ")");
        g.out[d] = (span - g.kernel[d]) / opt.stride + 1;
    }
    return g;
}

Shape spatial_shape(std::size_t channels, const detail::ConvGeometry& g, std::size_t rank, bool use_out) {
    Shape s{channels};
    for (std::size_t d = 0; d < rank; ++d) s.push_back(use_out ? g.out[d] : g.in[d]);
    return s;
}

void add_channel_bias(Tensor& out, const Tensor& b) {
    const std::size_t c = out.dim(0), n = out.size() / c;
    if (b.size() != c) throw ShapeError("bias has " + std::to_string(b.size()) + " elements for " + std::to_string(c) + " channels");
    for (std::size_t i = 0; i < c; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] += b[i];
}

Tensor channel_sums(const Tensor& g) {
    const std::size_t c = g.dim(0), n = g.size() / c;
    Tensor s({c});
    for (std::size_t i = 0; i < c; ++i)
        for (std::size_t j = 0; j < n; ++j) s[i] += g[i * n + j];
    return s;
}

}  // namespace

Tensor conv_forward(const Tensor& x, const Tensor& w, const Tensor* b, ConvOptions opt) {
    const std::size_t r = check_spatial_rank("conv", x, opt.rank);
    const auto g = conv_geometry("conv", x.shape(), w.shape(), opt);
    if (w.dim(1) != g.channels)
        throw ShapeError("conv: weight " + shape_str(w.shape()) + " expects " + std::to_string(w.dim(1)) +
                         " input channels, input is " + shape_str(x.shape()));
    const std::size_t cout = w.dim(0), rows = g.col_rows(), plane = g.plane(), out_n = g.out_numel();
    Tensor out(spatial_shape(cout, g, r, true));
    const std::size_t step = detail::planes_per_chunk(g);
    for (std::size_t ob = 0; ob < g.out[0]; ob += step) {
        const std::size_t oe = std::min(ob + step, g.out[0]), n = (oe - ob) * plane;
        double* buf = detail::scratch(rows * n);
        detail::im2col(x.data().data(), g, buf, ob, oe);
        detail::gemm(w.data().data(), rows, buf, n, out.data().data() + ob * plane, out_n, cout, rows, n);
    }
    if (b) add_channel_bias(out, *b);
    return out;
}

Tensor conv_transpose_forward(const Tensor& x, const Tensor& w, const Tensor* b, ConvOptions opt) {
    const std::size_t r = check_spatial_rank("conv_transpose", x, opt.rank);
    if (w.rank() != r + 2 || w.dim(0) != x.dim(0))
        throw ShapeError("conv_transpose: weight " + shape_str(w.shape()) + " incompatible with input " +
                         shape_str(x.shape()));
    const std::size_t cin = x.dim(0), cout = w.dim(1);
    // Output extent is the conv input extent that maps back onto x.
    Shape os{cout};
    for (std::size_t d = 0; d < r; ++d) {
        const long long e = static_cast<long long>((x.dim(d + 1) - 1) * opt.stride) + static_cast<long long>(w.dim(d + 2)) -
                            2 * static_cast<long long>(opt.padding);
        if (e < 1) throw ShapeError("conv_transpose: non-positive output extent on spatial axis " + std::to_string(d));
        os.push_back(static_cast<std::size_t>(e));
    }
    const auto g = conv_geometry("conv_transpose", os, w.shape(), opt);
    const std::size_t rows = g.col_rows(), plane = g.plane(), x_n = g.out_numel();
    Tensor out(os);
    const std::size_t step = detail::planes_per_chunk(g);
    for (std::size_t ob = 0; ob < g.out[0]; ob += step) {
        const std::size_t oe = std::min(ob + step, g.out[0]), n = (oe - ob) * plane;
        double* buf = detail::scratch(rows * n);
        detail::gemm_tn(w.data().data(), rows, x.data().data() + ob * plane, x_n, buf, n, rows, cin, n);
        detail::col2im(buf, g, out.data().data(), ob, oe);
    }
    if (b) add_channel_bias(out, *b);
    return out;
}

Var conv(Var x, Var w, std::optional<Var> b, ConvOptions opt) {
    Tape& t = same_tape({x, w});
    if (b && b->tape != &t) throw ContractError("operands recorded on different tapes");
    Tensor out = conv_forward(x.value(), w.value(), b ? &b->value() : nullptr, opt);
    std::vector<NodeId> ids{x.id, w.id};
    if (b) ids.push_back(b->id);
    return t.record("conv", ids, std::move(out), [x, w, b, opt](Tape& tp, const Tensor& gout) {
        const Tensor& xv = tp.value(x.id);
        const Tensor& wv = tp.value(w.id);
        const auto g = conv_geometry("conv", xv.shape(), wv.shape(), opt);
        const std::size_t cout = wv.dim(0), rows = g.col_rows(), plane = g.plane(), out_n = g.out_numel();
        const bool need_w = tp.requires_grad(w.id), need_x = tp.requires_grad(x.id);
        std::optional<Tensor> gw, gx;
        if (need_w) gw.emplace(wv.shape());
        if (need_x) gx.emplace(xv.shape());
        const std::size_t step = detail::planes_per_chunk(g);
        for (std::size_t ob = 0; (need_w || need_x) && ob < g.out[0]; ob += step) {
            const std::size_t oe = std::min(ob + step, g.out[0]), n = (oe - ob) * plane;
            double* buf = detail::scratch(rows * n);
            const double* go = gout.data().data() + ob * plane;
            if (need_w) {
                detail::im2col(xv.data().data(), g, buf, ob, oe);
                detail::gemm_nt(go, out_n, buf, n, gw->data().data(), rows, cout, n, rows, ob > 0);
            }
            if (need_x) {
                detail::gemm_tn(wv.data().data(), rows, go, out_n, buf, n, rows, cout, n);
                detail::col2im(buf, g, gx->data().data(), ob, oe);
            }
        }
        if (gw) tp.accumulate(w.id, std::move(*gw));
        if (gx) tp.accumulate(x.id, std::move(*gx));
        if (b) tp.accumulate(b->id, channel_sums(gout));
    });
}

Var conv_transpose(Var x, Var w, std::optional<Var> b, ConvOptions opt) {
    Tape& t = same_tape({x, w});
    if (b && b->tape != &t) throw ContractError("operands recorded on different tapes");
    Tensor out = conv_transpose_forward(x.value(), w.value(), b ? &b->value() : nullptr, opt);
    std::vector<NodeId> ids{x.id, w.id};
    if (b) ids.push_back(b->id);
    const Shape os = out.shape();
    return t.record("conv_transpose", ids, std::move(out), [x, w, b, opt, os](Tape& tp, const Tensor& gout) {
        const Tensor& xv = tp.value(x.id);
        const Tensor& wv = tp.value(w.id);
        const auto g = conv_geometry("conv_transpose", os, wv.shape(), opt);
        const std::size_t cin = xv.dim(0), rows = g.col_rows(), plane = g.plane(), x_n = g.out_numel();
        const bool need_w = tp.requires_grad(w.id), need_x = tp.requires_grad(x.id);
        std::optional<Tensor> gw, gx;
        if (need_w) gw.emplace(wv.shape());
        if (need_x) gx.emplace(xv.shape());
        const std::size_t step = detail::planes_per_chunk(g);
        for (std::size_t ob = 0; (need_w || need_x) && ob < g.out[0]; ob += step) {
            const std::size_t oe = std::min(ob + step, g.out[0]), n = (oe - ob) * plane;
            double* buf = detail::scratch(rows * n);
            detail::im2col(gout.data().data(), g, buf, ob, oe);
            if (need_x)
                detail::gemm(wv.data().data(), rows, buf, n, gx->data().data() + ob * plane, x_n, cin, rows, n);
            if (need_w)
                detail::gemm_nt(xv.data().data() + ob * plane, x_n, buf, n, gw->data().data(), rows, cin, n, rows,
                                ob > 0);
        }
        if (gx) tp.accumulate(x.id, std::move(*gx));
        if (gw) tp.accumulate(w.id, std::move(*gw));
        if (b) tp.accumulate(b->id, channel_sums(gout));
    });
}

Var max_pool(Var x, std::size_t factor, int rank) {
    const std::size_t r = check_spatial_rank("max_pool", x.value(), rank);
    if (factor == 0) throw ContractError("max_pool: factor must be >= 1");
    const Tensor& xv = x.value();
    std::array<std::size_t, 3> in{1, 1, 1}, out{1, 1, 1}, f{1, 1, 1};
    Shape os{xv.dim(0)};
    for (std::size_t d = 0; d < r; ++d) {
        in[d] = xv.dim(d + 1);
        f[d] = factor;
        if (in[d] % factor != 0)
            throw ShapeError("max_pool: spatial axis " + std::to_string(d) + " extent " + std::to_string(in[d]) +
                             " not divisible by " + std::to_string(factor));
        out[d] = in[d] / factor;
        os.push_back(out[d]);
    }
    Tensor y(os);
    std::vector<std::size_t> argmax(y.size());
    const std::size_t c = xv.dim(0);
    std::size_t oi = 0;
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t a = 0; a < out[0]; ++a)
            for (std::size_t b = 0; b < out[1]; ++b)
                for (std::size_t e = 0; e < out[2]; ++e, ++oi) {
                    double best = -INFINITY;
                    std::size_t best_i = 0;
                    for (std::size_t i = 0; i < f[0]; ++i)
                        for (std::size_t j = 0; j < f[1]; ++j)
                            for (std::size_t k = 0; k < f[2]; ++k) {
                                const std::size_t idx =
                                    ((ch * in[0] + a * f[0] + i) * in[1] + b * f[1] + j) * in[2] + e * f[2] + k;
                                if (xv[idx] > best) {
                                    best = xv[idx];
                                    best_i = idx;
                                }
                            }
                    y[oi] = best;
                    argmax[oi] = best_i;
                }
    return x.tape->record("max_pool", {x.id}, std::move(y), [x, argmax = std::move(argmax)](Tape& tp, const Tensor& g) {
        Tensor gx(tp.value(x.id).shape());
        for (std::size_t i = 0; i < argmax.size(); ++i) gx[argmax[i]] += g[i];
        tp.accumulate(x.id, std::move(gx));
    });
}

Var patchify(Var x, std::size_t patch, int rank) {
    const std::size_t r = check_spatial_rank("patchify", x.value(), rank);
    if (patch == 0) throw ContractError("patchify: patch size must be >= 1");
    const Tensor& xv = x.value();
    static constexpr const char* axis_names[] = {"H", "W", "D"};
    std::array<std::size_t, 3> in{1, 1, 1}, grid{1, 1, 1}, p{1, 1, 1};
    for (std::size_t d = 0; d < r; ++d) {
        in[d] = xv.dim(d + 1);
        p[d] = patch;
        if (in[d] % patch != 0)
            throw ShapeError(std::string("patchify: extent of axis ") + axis_names[d] + " (" + std::to_string(in[d]) +
                             ") not divisible by patch size " + std::to_string(patch));
        grid[d] = in[d] / patch;
    }
    const std::size_t c = xv.dim(0);
    const std::size_t n = grid[0] * grid[1] * grid[2];
    const std::size_t vol = p[0] * p[1] * p[2];
    const std::size_t width = vol * c;
    std::vector<std::size_t> src(n * width);
    std::size_t o = 0;
    for (std::size_t g0 = 0; g0 < grid[0]; ++g0)
        for (std::size_t g1 = 0; g1 < grid[1]; ++g1)
            for (std::size_t g2 = 0; g2 < grid[2]; ++g2)
                for (std::size_t ch = 0; ch < c; ++ch)
                    for (std::size_t i = 0; i < p[0]; ++i)
                        for (std::size_t j = 0; j < p[1]; ++j)
                            for (std::size_t k = 0; k < p[2]; ++k)
                                src[o++] = ((ch * in[0] + g0 * p[0] + i) * in[1] + g1 * p[1] + j) * in[2] +
                                           g2 * p[2] + k;
    Tensor out({n, width});
    for (std::size_t i = 0; i < src.size(); ++i) out[i] = xv[src[i]];
    return x.tape->record("patchify", {x.id}, std::move(out), [x, src = std::move(src)](Tape& tp, const Tensor& g) {
        Tensor gx(tp.value(x.id).shape());
        for (std::size_t i = 0; i < src.size(); ++i) gx[src[i]] += g[i];
        tp.accumulate(x.id, std::move(gx));
    });
}

}  // namespace oncokit::ad
