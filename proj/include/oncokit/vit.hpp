#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "oncokit/autodiff.hpp"
#include "oncokit/params.hpp"

namespace oncokit {

/// Transformer encoder over non-overlapping patches, with an optional
/// projected EHR token prepended to the image tokens.
struct VitConfig {
    int rank = 3;                  // 3: volumes [C, H, W, D]; 2: images [C, H, W]
    std::size_t patch = 8;         // P, per axis
    std::size_t channels = 2;      // C
    std::size_t embed = 64;        // K
    std::size_t heads = 4;         // n; K_h = K / n
    std::size_t layers = 4;        // L
    std::size_t mlp_ratio = 4;
    std::size_t max_tokens = 0;    // rows of the image positional table (N_max)
    bool positional = true;        // add E_pos; false gives a permutation-equivariant encoder
    std::size_t ehr_features = 0;  // width of the EHR covariate vector; 0 = no EHR token
    double init_std = 0.02;

    /// Desk-scale preset used by tests and toy experiments: K=64, n=4, L=4, P=8.
    static VitConfig toy();
    /// ViT-B/16: K=768, n=12, L=12, P=16.
    static VitConfig vit_b16();

    std::size_t head_dim() const { return embed / heads; }
    /// Blocks after which skip taps are recorded: L/4, L/2, 3L/4, L (1-based).
    std::vector<std::size_t> tap_layers() const;
    /// Number of image tokens for spatial extents `spatial` (H, W[, D]).
    std::size_t tokens_for(const Shape& spatial) const;
    /// Rows of E_pos: N_max, plus row 0 reserved for the EHR token when enabled.
    std::size_t positional_rows() const { return max_tokens + (ehr_features > 0 ? 1 : 0); }
    void validate() const;

    nlohmann::json to_json() const;
    static VitConfig from_json(const nlohmann::json& j);
};

/// Adds the encoder parameters under `prefix` (default "vit."): truncated
/// normal(0, init_std) for projections and E_pos, zeros for biases, unit/zero
/// layer-norm gain/bias.
void vit_init(ParamStore& store, const VitConfig& cfg, std::mt19937_64& rng, const std::string& prefix = "vit.");

/// z_0 = [x^1 E; ...; x^N E] + bias + E_pos rows for x[C, H, W(, D)].
/// Throws ShapeError naming the axis when an extent is not divisible by P.
ad::Var patch_embed(const ParamBinding& bind, const VitConfig& cfg, ad::Var x, const std::string& prefix = "vit.");

/// softmax(q k^T / sqrt(K_h)) for q, k [N, K_h]; every row is a probability vector.
ad::Var attention_probs(ad::Var q, ad::Var k);
/// Single-head self-attention softmax(q k^T / sqrt(K_h)) v.
ad::Var self_attention(ad::Var q, ad::Var k, ad::Var v);

/// Multi-head self-attention of the (already normalized) tokens z [N, K]:
/// heads are concatenated, then projected by W_msa.
ad::Var multi_head_attention(const ParamBinding& bind, const VitConfig& cfg, std::size_t block, ad::Var z,
                             const std::string& prefix = "vit.");

/// Pre-norm block: z' = MSA(LN(z)) + z; z'' = MLP(LN(z')) + z'.
ad::Var transformer_block(const ParamBinding& bind, const VitConfig& cfg, std::size_t block, ad::Var z,
                          const std::string& prefix = "vit.");

struct EncoderOutput {
    ad::Var final;                  // z_L [N, K]
    std::vector<ad::Var> taps;      // after blocks tap_layers()
};

/// Runs the L blocks in order and records the skip taps.
EncoderOutput encode(const ParamBinding& bind, const VitConfig& cfg, ad::Var z0, const std::string& prefix = "vit.");

/// covariates [1, F] -> [1, K] = covariates W_ehr + b_ehr (+ E_pos row 0).
/// Throws ContractError on a width mismatch.
ad::Var ehr_token(const ParamBinding& bind, const VitConfig& cfg, ad::Var covariates, const std::string& prefix = "vit.");

/// Joint input sequence: [EHR token; image tokens] when `covariates` is
/// given (N + 1 rows), otherwise the image tokens alone.
ad::Var vit_tokens(const ParamBinding& bind, const VitConfig& cfg, ad::Var x, std::optional<ad::Var> covariates,
                   const std::string& prefix = "vit.");

/// Reshapes tokens [N, K] (image tokens only) into the feature grid
/// [K, H/P, W/P(, D/P)] matching the patch order.
ad::Var tokens_to_grid(ad::Var tokens, const VitConfig& cfg, const Shape& spatial);

/// Multiply-accumulate count of one encoder forward pass over `tokens` tokens.
std::uint64_t vit_macs(const VitConfig& cfg, std::size_t tokens);

}  // namespace oncokit
