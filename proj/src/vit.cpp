#include "oncokit/vit.hpp"

#include <cmath>

#include "oncokit/error.hpp"

namespace oncokit {

namespace {

std::string block_prefix(const std::string& prefix, std::size_t block) {
    return prefix + "block" + std::to_string(block) + ".";
}

std::size_t patch_volume(const VitConfig& cfg) {
    std::size_t v = cfg.channels;
    for (int d = 0; d < cfg.rank; ++d) v *= cfg.patch;
    return v;
}

ad::Var linear(const ParamBinding& bind, const std::string& name, ad::Var x) {
    return ad::add_row_bias(ad::matmul(x, bind[name + ".w"]), bind[name + ".b"]);
}

}  // namespace

VitConfig VitConfig::toy() { return VitConfig{}; }

VitConfig VitConfig::vit_b16() {
    VitConfig c;
    c.patch = 16;
    c.embed = 768;
    c.heads = 12;
    c.layers = 12;
    return c;
}

std::vector<std::size_t> VitConfig::tap_layers() const {
    return {layers / 4, layers / 2, 3 * layers / 4, layers};
}

std::size_t VitConfig::tokens_for(const Shape& spatial) const {
    if (spatial.size() != static_cast<std::size_t>(rank))
        throw ContractError("vit: expected " + std::to_string(rank) + " spatial extents, got " + shape_str(spatial));
    static constexpr const char* axis_names[] = {"H", "W", "D"};
    std::size_t n = 1;
    for (std::size_t d = 0; d < spatial.size(); ++d) {
        if (spatial[d] % patch != 0)
            throw ShapeError(std::string("vit: extent of axis ") + axis_names[d] + " (" + std::to_string(spatial[d]) +
                             ") not divisible by patch size " + std::to_string(patch));
        n *= spatial[d] / patch;
    }
    return n;
}

void VitConfig::validate() const {
    if (rank != 2 && rank != 3) throw ConfigError("vit: rank must be 2 or 3");
    if (patch == 0 || channels == 0 || embed == 0 || heads == 0 || layers == 0 || mlp_ratio == 0)
        throw ConfigError("vit: patch, channels, embed, heads, layers and mlp_ratio must be positive");
    if (embed % heads != 0)
        throw ConfigError("vit: heads (" + std::to_string(heads) + ") must divide embed (" + std::to_string(embed) + ")");
    if (layers % 4 != 0) throw ConfigError("vit: layers must be a multiple of 4 (taps at L/4, L/2, 3L/4, L)");
    if (max_tokens == 0) throw ConfigError("vit: max_tokens must be set (use tokens_for on the input extents)");
}

nlohmann::json VitConfig::to_json() const {
    return {{"rank", rank},           {"patch", patch},         {"channels", channels},
            {"embed", embed},         {"heads", heads},         {"layers", layers},
            {"mlp_ratio", mlp_ratio}, {"max_tokens", max_tokens}, {"positional", positional},
            {"ehr_features", ehr_features}, {"init_std", init_std}};
}

VitConfig VitConfig::from_json(const nlohmann::json& j) {
    VitConfig c;
    c.rank = j.value("rank", c.rank);
    c.patch = j.value("patch", c.patch);
    c.channels = j.value("channels", c.channels);
    c.embed = j.value("embed", c.embed);
    c.heads = j.value("heads", c.heads);
    c.layers = j.value("layers", c.layers);
    c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
    c.max_tokens = j.value("max_tokens", c.max_tokens);
    c.positional = j.value("positional", c.positional);
    c.ehr_features = j.value("ehr_features", c.ehr_features);
    c.init_std = j.value("init_std", c.init_std);
    return c;
}

void vit_init(ParamStore& store, const VitConfig& cfg, std::mt19937_64& rng, const std::string& prefix) {
    cfg.validate();
    const std::size_t K = cfg.embed;
    const std::size_t hidden = K * cfg.mlp_ratio;
    const double sd = cfg.init_std;
    store.add(prefix + "embed.w", trunc_normal({patch_volume(cfg), K}, sd, rng));
    store.add(prefix + "embed.b", Tensor::zeros({K}));
    store.add(prefix + "pos", trunc_normal({cfg.positional_rows(), K}, sd, rng));
    if (cfg.ehr_features > 0) {
        store.add(prefix + "ehr.w", trunc_normal({cfg.ehr_features, K}, sd, rng));
        store.add(prefix + "ehr.b", Tensor::zeros({K}));
    }
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        const std::string b = block_prefix(prefix, l);
        store.add(b + "ln1.g", Tensor::ones({K}));
        store.add(b + "ln1.b", Tensor::zeros({K}));
        for (const char* m : {"q", "k", "v", "o"}) {
            store.add(b + "attn." + m + ".w", trunc_normal({K, K}, sd, rng));
            store.add(b + "attn." + m + ".b", Tensor::zeros({K}));
        }
        store.add(b + "ln2.g", Tensor::ones({K}));
        store.add(b + "ln2.b", Tensor::zeros({K}));
        store.add(b + "mlp.1.w", trunc_normal({K, hidden}, sd, rng));
        store.add(b + "mlp.1.b", Tensor::zeros({hidden}));
        store.add(b + "mlp.2.w", trunc_normal({hidden, K}, sd, rng));
        store.add(b + "mlp.2.b", Tensor::zeros({K}));
    }
}

ad::Var patch_embed(const ParamBinding& bind, const VitConfig& cfg, ad::Var x, const std::string& prefix) {
    const Shape& s = x.shape();
    if (s.size() != static_cast<std::size_t>(cfg.rank) + 1)
        throw ShapeError("patch_embed: expected input of rank " + std::to_string(cfg.rank + 1) + ", got " + shape_str(s));
    if (s[0] != cfg.channels)
        throw ShapeError("patch_embed: expected " + std::to_string(cfg.channels) + " channels, got " +
                         std::to_string(s[0]));
    const std::size_t n = cfg.tokens_for(Shape(s.begin() + 1, s.end()));
    if (n > cfg.max_tokens)
        throw ShapeError("patch_embed: " + std::to_string(n) + " tokens exceed the positional table (" +
                         std::to_string(cfg.max_tokens) + ")");
    ad::Var z = linear(bind, prefix + "embed", ad::patchify(x, cfg.patch, cfg.rank));
    if (cfg.positional) {
        const std::size_t first = cfg.ehr_features > 0 ? 1 : 0;
        z = ad::add(z, ad::slice_rows(bind[prefix + "pos"], first, n));
    }
    return z;
}

ad::Var attention_probs(ad::Var q, ad::Var k) {
    const double inv = 1.0 / std::sqrt(static_cast<double>(q.shape().back()));
    return ad::softmax(ad::scale(ad::matmul(q, ad::transpose(k)), inv), 1);
}

ad::Var self_attention(ad::Var q, ad::Var k, ad::Var v) { return ad::matmul(attention_probs(q, k), v); }

ad::Var multi_head_attention(const ParamBinding& bind, const VitConfig& cfg, std::size_t block, ad::Var z,
                             const std::string& prefix) {
    const std::string b = block_prefix(prefix, block) + "attn.";
    const ad::Var q = linear(bind, b + "q", z);
    const ad::Var k = linear(bind, b + "k", z);
    const ad::Var v = linear(bind, b + "v", z);
    const std::size_t dh = cfg.head_dim();
    std::vector<ad::Var> heads;
    heads.reserve(cfg.heads);
    for (std::size_t h = 0; h < cfg.heads; ++h)
        heads.push_back(self_attention(ad::slice_cols(q, h * dh, dh), ad::slice_cols(k, h * dh, dh),
                                       ad::slice_cols(v, h * dh, dh)));
    const ad::Var cat = cfg.heads == 1 ? heads.front() : ad::concat_cols(heads);
    return linear(bind, b + "o", cat);
}

ad::Var transformer_block(const ParamBinding& bind, const VitConfig& cfg, std::size_t block, ad::Var z,
                          const std::string& prefix) {
    const std::string b = block_prefix(prefix, block);
    const ad::Var n1 = ad::layer_norm(z, bind[b + "ln1.g"], bind[b + "ln1.b"]);
    const ad::Var z1 = ad::add(multi_head_attention(bind, cfg, block, n1, prefix), z);
    const ad::Var n2 = ad::layer_norm(z1, bind[b + "ln2.g"], bind[b + "ln2.b"]);
    const ad::Var h = ad::gelu(linear(bind, b + "mlp.1", n2));
    return ad::add(linear(bind, b + "mlp.2", h), z1);
}

EncoderOutput encode(const ParamBinding& bind, const VitConfig& cfg, ad::Var z0, const std::string& prefix) {
    const auto taps = cfg.tap_layers();
    EncoderOutput out{z0, {}};
    ad::Var z = z0;
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        z = transformer_block(bind, cfg, l, z, prefix);
        for (std::size_t t : taps)
            if (t == l + 1) out.taps.push_back(z);
    }
    out.final = z;
    return out;
}

ad::Var ehr_token(const ParamBinding& bind, const VitConfig& cfg, ad::Var covariates, const std::string& prefix) {
    if (cfg.ehr_features == 0) throw ContractError("ehr_token: the encoder was configured without an EHR token");
    const Shape& s = covariates.shape();
    if (s.size() != 2 || s[0] != 1 || s[1] != cfg.ehr_features)
        throw ContractError("ehr_token: expected covariates [1, " + std::to_string(cfg.ehr_features) + "], got " +
                            shape_str(s));
    ad::Var t = linear(bind, prefix + "ehr", covariates);
    if (cfg.positional) t = ad::add(t, ad::slice_rows(bind[prefix + "pos"], 0, 1));
    return t;
}

ad::Var vit_tokens(const ParamBinding& bind, const VitConfig& cfg, ad::Var x, std::optional<ad::Var> covariates,
                   const std::string& prefix) {
    const ad::Var img = patch_embed(bind, cfg, x, prefix);
    if (!covariates) return img;
    const std::vector<ad::Var> parts{ehr_token(bind, cfg, *covariates, prefix), img};
    return ad::concat_rows(parts);
}

ad::Var tokens_to_grid(ad::Var tokens, const VitConfig& cfg, const Shape& spatial) {
    const std::size_t n = cfg.tokens_for(spatial);
    const Shape& s = tokens.shape();
    if (s.size() != 2 || s[0] != n || s[1] != cfg.embed)
        throw ContractError("tokens_to_grid: expected tokens [" + std::to_string(n) + ", " + std::to_string(cfg.embed) +
                            "], got " + shape_str(s));
    Shape grid{cfg.embed};
    for (std::size_t e : spatial) grid.push_back(e / cfg.patch);
    return ad::reshape(ad::transpose(tokens), grid);
}

std::uint64_t vit_macs(const VitConfig& cfg, std::size_t tokens) {
    const std::uint64_t N = tokens, K = cfg.embed, H = K * cfg.mlp_ratio;
    const std::uint64_t embed = N * patch_volume(cfg) * K;
    // q, k, v, o projections; q k^T and attention-weighted v over all heads; MLP.
    const std::uint64_t block = 4 * N * K * K + 2 * N * N * K + 2 * N * K * H;
    return embed + cfg.layers * block;
}

}  // namespace oncokit
