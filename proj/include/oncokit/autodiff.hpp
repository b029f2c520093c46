#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "oncokit/tensor.hpp"

namespace oncokit::ad {

using NodeId = std::size_t;

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
struct Var {
    Tape* tape = nullptr;
    NodeId id = 0;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
};

/// Reverse-mode recording of one forward pass.
///
/// Nodes are appended in evaluation order, so the node vector is already a
/// topological order and backward() is a single reverse sweep. A tape belongs
/// to one thread; build a fresh tape per training step.
class Tape {
public:
    using Backward = std::function<void(Tape&, const Tensor& grad_out)>;

    struct Node {
        std::string op;
        std::vector<NodeId> inputs;
        Tensor value;
        bool requires_grad = false;
        Backward backward;
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var leaf(Tensor value, bool requires_grad = true);
    Var constant(Tensor value) { return leaf(std::move(value), false); }

    /// Appends an op node. `backward` is dropped when no input requires grad.
    Var record(std::string_view op, std::vector<NodeId> inputs, Tensor value, Backward backward);

    /// Reverse sweep from a scalar node; seeds d(loss)/d(loss) = 1.
    void backward(Var loss);

    /// Gradient of the last backward() w.r.t. `v`; zeros when `v` had no influence.
    Tensor grad(Var v) const;

    void accumulate(NodeId id, const Tensor& g);
    void accumulate(NodeId id, Tensor&& g);

    const Node& node(NodeId id) const { return nodes_.at(id); }
    const Tensor& value(NodeId id) const { return nodes_[id].value; }
    bool requires_grad(NodeId id) const { return nodes_[id].requires_grad; }
    std::size_t size() const noexcept { return nodes_.size(); }

private:
    std::vector<Node> nodes_;
    std::vector<std::optional<Tensor>> grads_;
};

// Elementwise arithmetic. Shapes must match exactly.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);

// Reductions to a scalar (shape {1}).
Var sum(Var a);
Var mean(Var a);

/// Product over the last two axes; leading (batch) axes broadcast numpy-style.
Var matmul(Var a, Var b);
/// Swap of the two axes of a matrix.
Var transpose(Var a);
Var reshape(Var a, Shape shape);

Var slice_cols(Var a, std::size_t begin, std::size_t count);
Var concat_cols(std::span<const Var> parts);
Var slice_rows(Var a, std::size_t begin, std::size_t count);
Var concat_rows(std::span<const Var> parts);
/// [N, K] -> [1, K]
Var mean_rows(Var a);
/// x[N, K] + b[K] broadcast over rows.
Var add_row_bias(Var x, Var b);

/// Concatenation along axis 0 (the channel axis of feature maps).
Var concat_channels(std::span<const Var> parts);

enum class Activation { relu, gelu, sigmoid };
Var activation(Var x, Activation kind);
inline Var relu(Var x) { return activation(x, Activation::relu); }
inline Var gelu(Var x) { return activation(x, Activation::gelu); }
inline Var sigmoid(Var x) { return activation(x, Activation::sigmoid); }

Var exp(Var x);
Var log(Var x);

/// Max-subtracted softmax along `axis`. NaN input raises NumericError.
Var softmax(Var x, std::size_t axis);

/// Normalizes over the last axis, then applies gain/bias of that extent.
Var layer_norm(Var z, Var gain, Var bias, double eps = 1e-5);

/// Per-channel normalization over the spatial extent of x[C, ...].
Var instance_norm(Var x, Var gain, Var bias, double eps = 1e-5);

struct ConvOptions {
    int rank = 3;
    std::size_t stride = 1;
    std::size_t padding = 0;
};

/// Cross-correlation. x[C_in, s...], w[C_out, C_in, k...], optional b[C_out].
Var conv(Var x, Var w, std::optional<Var> b, ConvOptions opt);

/// Adjoint of conv with the same options. x[C_in, s...], w[C_in, C_out, k...], b[C_out].
Var conv_transpose(Var x, Var w, std::optional<Var> b, ConvOptions opt = {3, 2, 0});

/// Non-overlapping max pooling by `factor` on every spatial axis.
Var max_pool(Var x, std::size_t factor, int rank);

/// x[C, H, W(, D)] -> [N, P^rank * C]. Patches in row-major grid order, each
/// flattened channel-major then by in-patch position.
Var patchify(Var x, std::size_t patch, int rank);

// Plain (non-recording) helpers shared with oracles and inference code.
Tensor conv_forward(const Tensor& x, const Tensor& w, const Tensor* b, ConvOptions opt);
Tensor conv_transpose_forward(const Tensor& x, const Tensor& w, const Tensor* b, ConvOptions opt);

}  // namespace oncokit::ad
