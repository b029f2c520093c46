#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "oncokit/autodiff.hpp"
#include "oncokit/params.hpp"
#include "oncokit/vit.hpp"

namespace oncokit {

enum class LayerKind { input, conv, transposed_conv, norm, activation, pool, linear };

std::string layer_kind_name(LayerKind k);

/// One node of a segmentation network graph. Layers run in list order; each
/// consumes the channel-wise concatenation of its `inputs` (indices of earlier
/// layers; empty = the previous layer).
struct LayerSpec {
    LayerKind kind = LayerKind::conv;
    int rank = 3;
    std::size_t c_in = 0;
    std::size_t c_out = 0;
    std::size_t kernel = 1;  // conv / transposed conv kernel, pool factor
    std::size_t stride = 1;
    std::size_t padding = 0;
    bool bias = true;
    ad::Activation activation = ad::Activation::relu;
    std::size_t port = 0;        // input layers: index of the network input
    std::string name;            // parameter prefix ("<name>.w", "<name>.b" / ".g")
    std::vector<std::size_t> inputs;

    std::uint64_t param_count() const;
};

struct ModelStats {
    std::uint64_t params = 0;
    std::uint64_t macs = 0;
    bool operator==(const ModelStats&) const = default;
};

/// Parameter and multiply-accumulate totals. Conv MACs = k^rank * C_in * C_out *
/// prod(output extents); transposed conv MACs = k^rank * C_in * C_out * prod(input
/// extents) (each input voxel scatters one kernel); linear MACs = in * out; norms
/// carry 2 C parameters and no MACs. `inputs` holds the spatial extents of each
/// input port. Throws ShapeError naming the layer index when an extent cannot
/// be resolved.
ModelStats model_stats(const std::vector<LayerSpec>& layers, const std::vector<Shape>& inputs);

/// Spatial extents of every layer's output, with the same checks as model_stats.
std::vector<Shape> resolve_extents(const std::vector<LayerSpec>& layers, const std::vector<Shape>& inputs);

struct UNetConfig {
    int rank = 3;
    std::size_t in_channels = 2;
    std::size_t depth = 4;  // number of 2x poolings
    std::size_t base = 16;  // width of the first stage; doubled per stage

    /// Small network used by the toy experiments: depth 3, base 8.
    static UNetConfig toy(int rank);
    void validate() const;
    nlohmann::json to_json() const;
    static UNetConfig from_json(const nlohmann::json& j);
};

/// Decoder widths and tap wiring of the UNETR-style decoder.
struct UnetrConfig {
    VitConfig vit;            // encoder; patch must be a power of two >= 8
    std::size_t base = 8;     // decoder width at full resolution; doubled per level

    static UnetrConfig toy();
    void validate() const;
    nlohmann::json to_json() const;
    static UnetrConfig from_json(const nlohmann::json& j);
};

/// A segmentation network: its layer graph plus the learnable parameters.
struct SegNet {
    std::string arch;  // "unet2d" | "unet3d" | "unetr"
    int rank = 3;
    std::vector<LayerSpec> layers;
    ParamStore params;
    nlohmann::json config;

    std::size_t ports() const;
};

/// Encoder-decoder with skip concatenation: per stage two (conv 3, norm, relu)
/// units, 2x max pooling down, 2x2(x2) stride-2 transposed conv up, final 1x1
/// conv to one logit channel.
std::vector<LayerSpec> unet_layers(const UNetConfig& cfg);
SegNet make_unet(const UNetConfig& cfg, std::uint64_t seed);

/// Decoder graph of the UNETR wiring. Ports: 0 = image [C, s...], 1..4 = tap
/// grids [K, s/P...] of z_{L/4}, z_{L/2}, z_{3L/4}, z_L. The deepest tap climbs
/// log2(P) doublings to full resolution; the tap after block jL/4 joins the
/// ladder at level log2(P) - 4 + j after 4 - j transposed-conv stages, and the
/// image enters at full resolution through one conv unit. Ends in a 1x1 conv.
std::vector<LayerSpec> unetr_decoder_layers(const UnetrConfig& cfg);
/// Encoder parameters (prefix "vit.") plus the decoder graph. `spatial` fixes
/// the positional table size.
SegNet make_unetr(const UnetrConfig& cfg, const Shape& spatial, std::uint64_t seed);

/// Runs the layer graph; returns the last layer's output.
ad::Var run_layers(const std::vector<LayerSpec>& layers, const ParamBinding& bind, std::span<const ad::Var> inputs);

/// Logits [1, s...] of input x[C, s...]. Throws ShapeError on extents not
/// divisible by 2^depth (U-Net) or P (UNETR).
ad::Var unet_forward(const SegNet& net, const ParamBinding& bind, ad::Var x);
/// UNETR decode from an encoder run over the image tokens of x.
ad::Var unetr_decode(const SegNet& net, const ParamBinding& bind, const EncoderOutput& enc, ad::Var x,
                     std::size_t token_offset = 0);
/// Dispatches on net.arch; for "unetr" runs the encoder too.
ad::Var segnet_forward(const SegNet& net, const ParamBinding& bind, ad::Var x);

/// Inference without gradients.
Tensor segnet_predict(const SegNet& net, const Tensor& x);

/// 1 where sigmoid(logit) > threshold, else 0.
Tensor predict_mask(const Tensor& logits, double threshold = 0.5);

/// Parameters and MACs of a network for input spatial extents `spatial`
/// (UNETR includes the encoder).
ModelStats model_stats(const SegNet& net, const Shape& spatial);

/// Checkpoint round trip (weights plus arch/config manifest).
void save_segnet(const std::string& path, const SegNet& net);
SegNet load_segnet(const std::string& path);

}  // namespace oncokit
