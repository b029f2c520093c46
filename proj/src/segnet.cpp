#include "oncokit/segnet.hpp"

#include <bit>
#include <cmath>

#include "oncokit/error.hpp"

namespace oncokit {

namespace {

std::uint64_t ipow(std::uint64_t b, int e) {
    std::uint64_t r = 1;
    for (int i = 0; i < e; ++i) r *= b;
    return r;
}

std::string layer_label(std::size_t i, const LayerSpec& l) {
    std::string s = "layer " + std::to_string(i) + " (" + layer_kind_name(l.kind);
    if (!l.name.empty()) s += " " + l.name;
    return s + ")";
}

// Builder for layer graphs.
struct Graph {
    std::vector<LayerSpec> layers;
    int rank;

    std::size_t last() const { return layers.size() - 1; }

    std::size_t push(LayerSpec l) {
        l.rank = rank;
        layers.push_back(std::move(l));
        return last();
    }
    std::size_t input(std::size_t port, std::size_t channels) {
        LayerSpec l;
        l.kind = LayerKind::input;
        l.port = port;
        l.c_in = l.c_out = channels;
        l.name = "input" + std::to_string(port);
        return push(l);
    }
    std::size_t conv(const std::string& name, std::vector<std::size_t> inputs, std::size_t cin, std::size_t cout,
                     std::size_t k, std::size_t pad) {
        LayerSpec l;
        l.kind = LayerKind::conv;
        l.c_in = cin;
        l.c_out = cout;
        l.kernel = k;
        l.padding = pad;
        l.name = name;
        l.inputs = std::move(inputs);
        return push(l);
    }
    std::size_t up(const std::string& name, std::vector<std::size_t> inputs, std::size_t cin, std::size_t cout) {
        LayerSpec l;
        l.kind = LayerKind::transposed_conv;
        l.c_in = cin;
        l.c_out = cout;
        l.kernel = 2;
        l.stride = 2;
        l.name = name;
        l.inputs = std::move(inputs);
        return push(l);
    }
    std::size_t pool(std::size_t factor) {
        LayerSpec l;
        l.kind = LayerKind::pool;
        l.kernel = factor;
        l.stride = factor;
        return push(l);
    }
    // conv 3 (padding 1) -> instance norm -> relu
    std::size_t unit(const std::string& name, std::vector<std::size_t> inputs, std::size_t cin, std::size_t cout) {
        conv(name + ".conv", std::move(inputs), cin, cout, 3, 1);
        LayerSpec n;
        n.kind = LayerKind::norm;
        n.c_in = n.c_out = cout;
        n.name = name + ".norm";
        push(n);
        LayerSpec a;
        a.kind = LayerKind::activation;
        a.c_in = a.c_out = cout;
        return push(a);
    }
};

void init_params(ParamStore& store, const std::vector<LayerSpec>& layers, std::mt19937_64& rng) {
    for (const auto& l : layers) {
        const std::uint64_t kv = ipow(l.kernel, l.rank);
        Shape ks(static_cast<std::size_t>(l.rank), l.kernel);
        switch (l.kind) {
            case LayerKind::conv: {
                Shape s{l.c_out, l.c_in};
                s.insert(s.end(), ks.begin(), ks.end());
                store.add(l.name + ".w", fan_in_uniform(s, l.c_in * kv, rng));
                if (l.bias) store.add(l.name + ".b", Tensor::zeros({l.c_out}));
                break;
            }
            case LayerKind::transposed_conv: {
                Shape s{l.c_in, l.c_out};
                s.insert(s.end(), ks.begin(), ks.end());
                // each output voxel receives c_in * (k / stride)^rank taps
                const std::uint64_t taps = l.c_in * kv / ipow(std::max<std::size_t>(l.stride, 1), l.rank);
                store.add(l.name + ".w", fan_in_uniform(s, std::max<std::uint64_t>(taps, 1), rng));
                if (l.bias) store.add(l.name + ".b", Tensor::zeros({l.c_out}));
                break;
            }
            case LayerKind::norm:
                store.add(l.name + ".g", Tensor::ones({l.c_out}));
                store.add(l.name + ".b", Tensor::zeros({l.c_out}));
                break;
            case LayerKind::linear:
                store.add(l.name + ".w", fan_in_uniform({l.c_in, l.c_out}, l.c_in, rng));
                if (l.bias) store.add(l.name + ".b", Tensor::zeros({l.c_out}));
                break;
            default:
                break;
        }
    }
}

std::vector<Shape> tap_extents(const Shape& spatial, std::size_t patch) {
    Shape g;
    for (std::size_t e : spatial) g.push_back(e / patch);
    return {spatial, g, g, g, g};
}

}  // namespace

std::string layer_kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::input: return "input";
        case LayerKind::conv: return "conv";
        case LayerKind::transposed_conv: return "transposed_conv";
        case LayerKind::norm: return "norm";
        case LayerKind::activation: return "activation";
        case LayerKind::pool: return "pool";
        case LayerKind::linear: return "linear";
    }
    return "?";
}

std::uint64_t LayerSpec::param_count() const {
    const std::uint64_t b = bias ? c_out : 0;
    switch (kind) {
        case LayerKind::conv:
        case LayerKind::transposed_conv: return ipow(kernel, rank) * c_in * c_out + b;
        case LayerKind::norm: return 2 * c_out;
        case LayerKind::linear: return c_in * c_out + b;
        default: return 0;
    }
}

std::vector<Shape> resolve_extents(const std::vector<LayerSpec>& layers, const std::vector<Shape>& inputs) {
    std::vector<Shape> ext(layers.size());
    std::vector<std::size_t> chans(layers.size(), 0);
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const LayerSpec& l = layers[i];
        const std::string label = layer_label(i, l);
        if (l.rank != 2 && l.rank != 3) throw ShapeError(label + ": rank must be 2 or 3");
        const std::size_t r = static_cast<std::size_t>(l.rank);
        if (l.kind == LayerKind::input) {
            if (l.port >= inputs.size())
                throw ShapeError(label + ": no extents supplied for input port " + std::to_string(l.port));
            if (inputs[l.port].size() != r)
                throw ShapeError(label + ": input port extents " + shape_str(inputs[l.port]) + " do not have rank " +
                                 std::to_string(r));
            ext[i] = inputs[l.port];
            chans[i] = l.c_out;
            continue;
        }
        std::vector<std::size_t> src = l.inputs;
        if (src.empty()) {
            if (i == 0) throw ShapeError(label + ": first layer has no input");
            src.push_back(i - 1);
        }
        std::size_t cin = 0;
        for (std::size_t s : src) {
            if (s >= i) throw ShapeError(label + ": input " + std::to_string(s) + " is not an earlier layer");
            if (ext[s] != ext[src.front()])
                throw ShapeError(label + ": concatenated inputs have extents " + shape_str(ext[src.front()]) + " and " +
                                 shape_str(ext[s]));
            cin += chans[s];
        }
        const Shape& in = ext[src.front()];
        Shape out = in;
        switch (l.kind) {
            case LayerKind::conv:
                for (std::size_t d = 0; d < r; ++d) {
                    const std::size_t span = in[d] + 2 * l.padding;
                    if (l.stride == 0 || span < l.kernel)
                        throw ShapeError(label + ": input extent " + std::to_string(in[d]) + " smaller than kernel " +
                                         std::to_string(l.kernel));
                    out[d] = (span - l.kernel) / l.stride + 1;
                }
                break;
            case LayerKind::transposed_conv:
                for (std::size_t d = 0; d < r; ++d) {
                    const long long e = static_cast<long long>((in[d] - 1) * l.stride + l.kernel) -
                                        2 * static_cast<long long>(l.padding);
                    if (e < 1) throw ShapeError(label + ": non-positive output extent");
                    out[d] = static_cast<std::size_t>(e);
                }
                break;
            case LayerKind::pool:
                for (std::size_t d = 0; d < r; ++d) {
                    if (l.kernel == 0 || in[d] % l.kernel != 0)
                        throw ShapeError(label + ": extent " + std::to_string(in[d]) + " not divisible by pool factor " +
                                         std::to_string(l.kernel));
                    out[d] = in[d] / l.kernel;
                }
                break;
            default:
                break;
        }
        const bool passthrough = l.kind == LayerKind::activation || l.kind == LayerKind::pool;
        if (!passthrough && cin != l.c_in)
            throw ShapeError(label + ": declares " + std::to_string(l.c_in) + " input channels but receives " +
                             std::to_string(cin));
        ext[i] = out;
        chans[i] = passthrough ? cin : l.c_out;
    }
    return ext;
}

ModelStats model_stats(const std::vector<LayerSpec>& layers, const std::vector<Shape>& inputs) {
    const auto ext = resolve_extents(layers, inputs);
    ModelStats st;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const LayerSpec& l = layers[i];
        st.params += l.param_count();
        const std::uint64_t kv = ipow(l.kernel, l.rank);
        switch (l.kind) {
            case LayerKind::conv: st.macs += kv * l.c_in * l.c_out * shape_numel(ext[i]); break;
            case LayerKind::transposed_conv: {
                const std::size_t src = l.inputs.empty() ? i - 1 : l.inputs.front();
                st.macs += kv * l.c_in * l.c_out * shape_numel(ext[src]);
                break;
            }
            case LayerKind::linear: st.macs += static_cast<std::uint64_t>(l.c_in) * l.c_out; break;
            default: break;
        }
    }
    return st;
}

// ---------------------------------------------------------------- configs

UNetConfig UNetConfig::toy(int rank) {
    UNetConfig c;
    c.rank = rank;
    c.depth = 3;
    c.base = 8;
    return c;
}

void UNetConfig::validate() const {
    if (rank != 2 && rank != 3) throw ConfigError("unet: rank must be 2 or 3");
    if (in_channels == 0 || base == 0) throw ConfigError("unet: in_channels and base must be positive");
    if (depth > 8) throw ConfigError("unet: depth must be at most 8");
}

nlohmann::json UNetConfig::to_json() const {
    return {{"rank", rank}, {"in_channels", in_channels}, {"depth", depth}, {"base", base}};
}

UNetConfig UNetConfig::from_json(const nlohmann::json& j) {
    UNetConfig c;
    c.rank = j.value("rank", c.rank);
    c.in_channels = j.value("in_channels", c.in_channels);
    c.depth = j.value("depth", c.depth);
    c.base = j.value("base", c.base);
    return c;
}

UnetrConfig UnetrConfig::toy() { return UnetrConfig{}; }

void UnetrConfig::validate() const {
    if (vit.patch < 8 || !std::has_single_bit(vit.patch))
        throw ConfigError("unetr: patch size must be a power of two >= 8, got " + std::to_string(vit.patch));
    if (base == 0) throw ConfigError("unetr: decoder base width must be positive");
}

nlohmann::json UnetrConfig::to_json() const { return {{"vit", vit.to_json()}, {"base", base}}; }

UnetrConfig UnetrConfig::from_json(const nlohmann::json& j) {
    UnetrConfig c;
    if (j.contains("vit")) c.vit = VitConfig::from_json(j.at("vit"));
    c.base = j.value("base", c.base);
    return c;
}

std::size_t SegNet::ports() const {
    std::size_t p = 0;
    for (const auto& l : layers)
        if (l.kind == LayerKind::input) p = std::max(p, l.port + 1);
    return p;
}

// ---------------------------------------------------------------- builders

std::vector<LayerSpec> unet_layers(const UNetConfig& cfg) {
    cfg.validate();
    Graph g{{}, cfg.rank};
    auto width = [&](std::size_t l) { return cfg.base << l; };
    std::size_t cur = g.input(0, cfg.in_channels);
    std::size_t ch = cfg.in_channels;
    std::vector<std::size_t> skips;
    for (std::size_t l = 0; l <= cfg.depth; ++l) {
        const std::string n = "enc" + std::to_string(l);
        g.unit(n + ".a", {cur}, ch, width(l));
        cur = g.unit(n + ".b", {}, width(l), width(l));
        ch = width(l);
        if (l < cfg.depth) {
            skips.push_back(cur);
            cur = g.pool(2);
        }
    }
    for (std::size_t l = cfg.depth; l-- > 0;) {
        const std::string n = "dec" + std::to_string(l);
        const std::size_t up = g.up(n + ".up", {cur}, ch, width(l));
        g.unit(n + ".a", {up, skips[l]}, 2 * width(l), width(l));
        cur = g.unit(n + ".b", {}, width(l), width(l));
        ch = width(l);
    }
    g.conv("head", {cur}, ch, 1, 1, 0);
    return g.layers;
}

SegNet make_unet(const UNetConfig& cfg, std::uint64_t seed) {
    SegNet net;
    net.arch = cfg.rank == 2 ? "unet2d" : "unet3d";
    net.rank = cfg.rank;
    net.layers = unet_layers(cfg);
    net.config = cfg.to_json();
    std::mt19937_64 rng(seed);
    init_params(net.params, net.layers, rng);
    return net;
}

std::vector<LayerSpec> unetr_decoder_layers(const UnetrConfig& cfg) {
    cfg.validate();
    const int rank = cfg.vit.rank;
    Graph g{{}, rank};
    const std::size_t levels = static_cast<std::size_t>(std::countr_zero(cfg.vit.patch));  // log2 P
    const std::size_t K = cfg.vit.embed;
    auto width = [&](std::size_t level) { return cfg.base << level; };

    const std::size_t image = g.input(0, cfg.vit.channels);
    std::vector<std::size_t> tap(5);
    for (std::size_t p = 1; p <= 4; ++p) tap[p] = g.input(p, K);

    // Shallower taps climb more transposed-conv stages before joining.
    std::vector<std::vector<std::size_t>> joins(levels);
    for (std::size_t j = 1; j <= 3; ++j) {
        const std::size_t join = levels - 4 + j;
        std::size_t cur = tap[j], ch = K;
        for (std::size_t level = levels; level-- > join;) {
            const std::string n = "tap" + std::to_string(j) + ".l" + std::to_string(level);
            const std::size_t up = g.up(n + ".up", {cur}, ch, width(level));
            cur = g.unit(n, {up}, width(level), width(level));
            ch = width(level);
        }
        joins[join].push_back(cur);
    }
    joins[0].push_back(g.unit("image", {image}, cfg.vit.channels, width(0)));

    std::size_t cur = tap[4], ch = K;
    for (std::size_t level = levels; level-- > 0;) {
        const std::string n = "dec" + std::to_string(level);
        std::vector<std::size_t> parts{g.up(n + ".up", {cur}, ch, width(level))};
        parts.insert(parts.end(), joins[level].begin(), joins[level].end());
        g.unit(n + ".a", parts, width(level) * parts.size(), width(level));
        cur = g.unit(n + ".b", {}, width(level), width(level));
        ch = width(level);
    }
    g.conv("head", {cur}, ch, 1, 1, 0);
    return g.layers;
}

SegNet make_unetr(const UnetrConfig& cfg_in, const Shape& spatial, std::uint64_t seed) {
    UnetrConfig cfg = cfg_in;
    cfg.vit.max_tokens = std::max(cfg.vit.max_tokens, cfg.vit.tokens_for(spatial));
    SegNet net;
    net.arch = "unetr";
    net.rank = cfg.vit.rank;
    net.layers = unetr_decoder_layers(cfg);
    net.config = cfg.to_json();
    std::mt19937_64 rng(seed);
    vit_init(net.params, cfg.vit, rng, "vit.");
    init_params(net.params, net.layers, rng);
    return net;
}

// ---------------------------------------------------------------- forward

ad::Var run_layers(const std::vector<LayerSpec>& layers, const ParamBinding& bind, std::span<const ad::Var> inputs) {
    if (layers.empty()) throw ContractError("run_layers: empty network");
    std::vector<ad::Var> out(layers.size());
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const LayerSpec& l = layers[i];
        if (l.kind == LayerKind::input) {
            if (l.port >= inputs.size()) throw ContractError(layer_label(i, l) + ": input port not supplied");
            out[i] = inputs[l.port];
            continue;
        }
        ad::Var x;
        if (l.inputs.empty()) {
            x = out.at(i - 1);
        } else if (l.inputs.size() == 1) {
            x = out[l.inputs.front()];
        } else {
            std::vector<ad::Var> parts;
            for (std::size_t s : l.inputs) parts.push_back(out[s]);
            x = ad::concat_channels(parts);
        }
        auto bias = [&]() -> std::optional<ad::Var> {
            if (!l.bias) return std::nullopt;
            return bind[l.name + ".b"];
        };
        switch (l.kind) {
            case LayerKind::conv:
                out[i] = ad::conv(x, bind[l.name + ".w"], bias(), {l.rank, l.stride, l.padding});
                break;
            case LayerKind::transposed_conv:
                out[i] = ad::conv_transpose(x, bind[l.name + ".w"], bias(), {l.rank, l.stride, l.padding});
                break;
            case LayerKind::norm: out[i] = ad::instance_norm(x, bind[l.name + ".g"], bind[l.name + ".b"]); break;
            case LayerKind::activation: out[i] = ad::activation(x, l.activation); break;
            case LayerKind::pool: out[i] = ad::max_pool(x, l.kernel, l.rank); break;
            case LayerKind::linear:
                out[i] = ad::add_row_bias(ad::matmul(ad::reshape(x, {1, x.value().size()}), bind[l.name + ".w"]),
                                          bind[l.name + ".b"]);
                break;
            case LayerKind::input: break;
        }
    }
    return out.back();
}

ad::Var unet_forward(const SegNet& net, const ParamBinding& bind, ad::Var x) {
    const UNetConfig cfg = UNetConfig::from_json(net.config);
    const Shape& s = x.shape();
    if (s.size() != static_cast<std::size_t>(cfg.rank) + 1)
        throw ShapeError("unet: expected input [C, spatial x" + std::to_string(cfg.rank) + "], got " + shape_str(s));
    const std::size_t f = std::size_t{1} << cfg.depth;
    for (std::size_t d = 1; d < s.size(); ++d)
        if (s[d] % f != 0)
            throw ShapeError("unet: spatial axis " + std::to_string(d - 1) + " extent " + std::to_string(s[d]) +
                             " not divisible by 2^depth = " + std::to_string(f));
    const ad::Var in[] = {x};
    return run_layers(net.layers, bind, in);
}

ad::Var unetr_decode(const SegNet& net, const ParamBinding& bind, const EncoderOutput& enc, ad::Var x,
                     std::size_t token_offset) {
    const UnetrConfig cfg = UnetrConfig::from_json(net.config);
    if (enc.taps.size() != 4)
        throw ContractError("unetr_decode: expected 4 encoder taps, got " + std::to_string(enc.taps.size()));
    const Shape spatial(x.shape().begin() + 1, x.shape().end());
    const std::size_t n = cfg.vit.tokens_for(spatial);
    std::vector<ad::Var> in{x};
    for (const ad::Var& t : enc.taps) {
        if (t.shape().size() != 2 || t.shape()[0] != n + token_offset)
            throw ContractError("unetr_decode: tap " + shape_str(t.shape()) + " does not hold " + std::to_string(n) +
                                " image tokens after offset " + std::to_string(token_offset));
        const ad::Var img = token_offset == 0 ? t : ad::slice_rows(t, token_offset, n);
        in.push_back(tokens_to_grid(img, cfg.vit, spatial));
    }
    return run_layers(net.layers, bind, in);
}

ad::Var segnet_forward(const SegNet& net, const ParamBinding& bind, ad::Var x) {
    if (net.arch == "unetr") {
        const UnetrConfig cfg = UnetrConfig::from_json(net.config);
        const EncoderOutput enc = encode(bind, cfg.vit, patch_embed(bind, cfg.vit, x, "vit."), "vit.");
        return unetr_decode(net, bind, enc, x);
    }
    return unet_forward(net, bind, x);
}

Tensor segnet_predict(const SegNet& net, const Tensor& x) {
    ad::Tape tape;
    ParamBinding bind(tape, net.params);
    return segnet_forward(net, bind, tape.constant(x)).value();
}

Tensor predict_mask(const Tensor& logits, double threshold) {
    Tensor m(logits.shape());
    for (std::size_t i = 0; i < logits.size(); ++i) {
        const double p = 1.0 / (1.0 + std::exp(-logits[i]));
        m[i] = p > threshold ? 1.0 : 0.0;
    }
    return m;
}

ModelStats model_stats(const SegNet& net, const Shape& spatial) {
    if (net.arch != "unetr") return model_stats(net.layers, {spatial});
    const UnetrConfig cfg = UnetrConfig::from_json(net.config);
    ModelStats st = model_stats(net.layers, tap_extents(spatial, cfg.vit.patch));
    for (const auto& [name, t] : net.params.entries())
        if (name.starts_with("vit.")) st.params += t.size();
    st.macs += vit_macs(cfg.vit, cfg.vit.tokens_for(spatial));
    return st;
}

void save_segnet(const std::string& path, const SegNet& net) {
    save_checkpoint(path, net.params, {{"arch", net.arch}, {"config", net.config}});
}

SegNet load_segnet(const std::string& path) {
    Checkpoint ck = load_checkpoint(path);
    SegNet net;
    net.arch = ck.manifest.at("arch").get<std::string>();
    net.config = ck.manifest.at("config");
    if (net.arch == "unetr") {
        const UnetrConfig cfg = UnetrConfig::from_json(net.config);
        net.rank = cfg.vit.rank;
        net.layers = unetr_decoder_layers(cfg);
    } else if (net.arch == "unet2d" || net.arch == "unet3d") {
        const UNetConfig cfg = UNetConfig::from_json(net.config);
        net.rank = cfg.rank;
        net.layers = unet_layers(cfg);
    } else {
        throw FormatError("unknown network architecture '" + net.arch + "'", 0);
    }
    net.params = std::move(ck.params);
    return net;
}

}  // namespace oncokit
