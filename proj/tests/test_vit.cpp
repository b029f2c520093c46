#include <doctest/doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "oncokit/error.hpp"
#include "oncokit/vit.hpp"
#include "support/gradcheck.hpp"
#include "support/param_gradcheck.hpp"

using namespace oncokit;
using oncokit::testing::param_gradcheck;
using oncokit::testing::ParamLossFn;
using oncokit::testing::random_tensor;

namespace {

VitConfig small_config(std::size_t K, std::size_t heads, std::size_t layers, std::size_t max_tokens) {
    VitConfig c;
    c.embed = K;
    c.heads = heads;
    c.layers = layers;
    c.max_tokens = max_tokens;
    return c;
}

Tensor permute_rows(const Tensor& t, const std::vector<std::size_t>& perm) {
    const std::size_t k = t.dim(1);
    Tensor out(t.shape());
    for (std::size_t i = 0; i < perm.size(); ++i)
        for (std::size_t j = 0; j < k; ++j) out[i * k + j] = t[perm[i] * k + j];
    return out;
}

void zero_block_outputs(ParamStore& store, std::size_t block) {
    const std::string b = "vit.block" + std::to_string(block) + ".";
    for (const char* n : {"attn.o.w", "attn.o.b", "mlp.2.w", "mlp.2.b"})
        for (auto& v : store.get(b + n).data()) v = 0.0;
}

// Largest analytic gradient norm over the key biases.
double key_bias_grad_norm(const ParamStore& store, const ParamLossFn& loss) {
    ad::Tape tape;
    ParamBinding bind(tape, store);
    tape.backward(loss(tape, bind));
    double worst = 0.0;
    for (const auto& [name, g] : bind.grads())
        if (name.find("attn.k.b") != std::string::npos) worst = std::max(worst, std::sqrt(dot(g, g)));
    return worst;
}

}  // namespace

TEST_CASE("patch embedding token counts and errors") {
    VitConfig b16 = VitConfig::vit_b16();
    CHECK(b16.tokens_for({144, 144, 144}) == 729);
    CHECK(b16.tap_layers() == std::vector<std::size_t>{3, 6, 9, 12});

    VitConfig c = VitConfig::toy();
    c.max_tokens = c.tokens_for({32, 32, 16});
    CHECK(c.max_tokens == 32);
    std::mt19937_64 rng(3);
    ParamStore store;
    vit_init(store, c, rng);
    ad::Tape tape;
    ParamBinding bind(tape, store);
    const ad::Var z = patch_embed(bind, c, tape.constant(random_tensor({2, 32, 32, 16}, rng)));
    CHECK(z.shape() == Shape{32, 64});

    try {
        patch_embed(bind, c, tape.constant(Tensor({2, 32, 20, 16})));
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        CHECK(std::string(e.what()).find("axis W") != std::string::npos);
    }
}

TEST_CASE("zero input and zero positional table give zero tokens") {
    VitConfig c = VitConfig::toy();
    c.max_tokens = 8;
    std::mt19937_64 rng(4);
    ParamStore store;
    vit_init(store, c, rng);
    for (auto& v : store.get("vit.pos").data()) v = 0.0;
    ad::Tape tape;
    ParamBinding bind(tape, store);
    const ad::Var z = patch_embed(bind, c, tape.constant(Tensor({2, 16, 16, 16})));
    for (double v : z.value().data()) CHECK(v == 0.0);
}

TEST_CASE("permuting patches permutes projections after removing positional rows") {
    VitConfig c = VitConfig::toy();
    c.embed = 16;
    c.heads = 2;
    c.max_tokens = 8;  // 16^3 volume, P = 8
    std::mt19937_64 rng(5);
    ParamStore store;
    vit_init(store, c, rng);
    const Tensor x = random_tensor({2, 16, 16, 16}, rng);
    // Patch grid 2x2x2; permutation of patch positions.
    const std::vector<std::size_t> perm{5, 2, 7, 0, 3, 6, 1, 4};
    Tensor xp(x.shape());
    const std::size_t P = 8;
    for (std::size_t i = 0; i < 8; ++i) {
        const std::size_t src = perm[i];
        const std::size_t di[3] = {i / 4, (i / 2) % 2, i % 2}, si[3] = {src / 4, (src / 2) % 2, src % 2};
        for (std::size_t ch = 0; ch < 2; ++ch)
            for (std::size_t a = 0; a < P; ++a)
                for (std::size_t b = 0; b < P; ++b)
                    for (std::size_t d = 0; d < P; ++d)
                        xp.at({ch, di[0] * P + a, di[1] * P + b, di[2] * P + d}) =
                            x.at({ch, si[0] * P + a, si[1] * P + b, si[2] * P + d});
    }
    ad::Tape tape;
    ParamBinding bind(tape, store);
    const Tensor& pos = store.get("vit.pos");
    auto strip = [&](const Tensor& z) {
        Tensor out = z;
        for (std::size_t i = 0; i < out.size(); ++i) out[i] -= pos[i];
        return out;
    };
    const Tensor z = strip(patch_embed(bind, c, tape.constant(x)).value());
    const Tensor zp = strip(patch_embed(bind, c, tape.constant(xp)).value());
    CHECK(max_abs_diff(zp, permute_rows(z, perm)) <= 1e-12);
}

TEST_CASE("self-attention closed forms") {
    ad::Tape tape;
    // N = 1: the only weight is 1 and the output is v.
    const ad::Var q1 = tape.constant(Tensor::matrix({{0.3, -1.2}}));
    const ad::Var k1 = tape.constant(Tensor::matrix({{2.0, 0.5}}));
    const ad::Var v1 = tape.constant(Tensor::matrix({{7.0, -3.0}}));
    CHECK(attention_probs(q1, k1).value()[0] == 1.0);
    const Tensor sa = self_attention(q1, k1, v1).value();
    CHECK(sa == v1.value());

    // Identical tokens: uniform weights 1/N.
    Tensor same({5, 3});
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 3; ++j) same[i * 3 + j] = 0.1 * static_cast<double>(j + 1);
    const Tensor a = attention_probs(tape.constant(same), tape.constant(same)).value();
    for (double v : a.data()) CHECK(v == doctest::Approx(0.2).epsilon(1e-15));

    // Two tokens, K_h = 1: softmax over q_i k_j, by hand.
    const double q[2] = {0.7, -0.4}, k[2] = {1.5, -2.0}, v[2] = {3.0, -1.0};
    const Tensor out = self_attention(tape.constant(Tensor::matrix({{q[0]}, {q[1]}})),
                                      tape.constant(Tensor::matrix({{k[0]}, {k[1]}})),
                                      tape.constant(Tensor::matrix({{v[0]}, {v[1]}})))
                           .value();
    for (int i = 0; i < 2; ++i) {
        const double e0 = std::exp(q[i] * k[0]), e1 = std::exp(q[i] * k[1]);
        CHECK(std::abs(out[static_cast<std::size_t>(i)] - (e0 * v[0] + e1 * v[1]) / (e0 + e1)) <= 1e-12);
    }
}

TEST_CASE("multi-head attention rows are probability vectors") {
    std::mt19937_64 rng(6);
    ad::Tape tape;
    for (int rep = 0; rep < 20; ++rep) {
        const std::size_t n = 1 + rng() % 40;
        const Tensor a = attention_probs(tape.constant(random_tensor({n, 16}, rng, -3, 3)),
                                         tape.constant(random_tensor({n, 16}, rng, -3, 3)))
                             .value();
        for (std::size_t i = 0; i < n; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                CHECK(a[i * n + j] >= 0.0);
                s += a[i * n + j];
            }
            CHECK(std::abs(s - 1.0) <= 1e-12);
        }
    }
}

TEST_CASE("transformer block shape contract and residual identity") {
    VitConfig c = small_config(16, 4, 4, 64);
    std::mt19937_64 rng(7);
    ParamStore store;
    vit_init(store, c, rng);
    for (int rep = 0; rep < 10; ++rep) {
        const std::size_t n = 1 + rng() % 64;
        ad::Tape tape;
        ParamBinding bind(tape, store);
        const ad::Var z = tape.constant(random_tensor({n, 16}, rng));
        CHECK(transformer_block(bind, c, 0, z).shape() == Shape{n, 16});
    }
    zero_block_outputs(store, 1);
    ad::Tape tape;
    ParamBinding bind(tape, store);
    const Tensor z = random_tensor({9, 16}, rng);
    CHECK(transformer_block(bind, c, 1, tape.constant(z)).value() == z);
}

TEST_CASE("transformer block matches finite differences") {
    VitConfig c = small_config(8, 2, 4, 8);
    std::mt19937_64 rng(8);
    ParamStore store;
    vit_init(store, c, rng);
    // Larger weights so that attention and gelu are far from linear.
    for (auto& [name, t] : store.entries())
        if (name.find(".w") != std::string::npos)
            for (auto& v : t.data()) v *= 15.0;
    store.add("input", random_tensor({6, 8}, rng));
    const Tensor proj = random_tensor({6, 8}, rng);
    const ParamLossFn loss = [&](ad::Tape& tape, const ParamBinding& bind) {
        const ad::Var out = transformer_block(bind, c, 0, bind["input"]);
        return ad::sum(ad::mul(out, tape.constant(proj)));
    };
    // The key bias shifts every score of a softmax row by the same amount, so
    // its true gradient is identically zero and a relative error is undefined:
    // it is checked for a vanishing analytic gradient instead.
    const auto r = param_gradcheck(store, loss, 1e-5, {"attn.k.b"});
    CHECK(r.max_rel_err <= 1e-4);
    CHECK(key_bias_grad_norm(store, loss) <= 1e-12);
}

TEST_CASE("two-block encoder matches finite differences end to end") {
    VitConfig c = small_config(8, 2, 4, 8);
    c.layers = 4;
    std::mt19937_64 rng(9);
    ParamStore store;
    vit_init(store, c, rng);
    // Keep only two blocks' parameters varying through the check by running L = 2.
    VitConfig two = c;
    two.layers = 2;
    ParamStore used;
    for (const auto& [name, t] : store.entries())
        if (name.find("block2") == std::string::npos && name.find("block3") == std::string::npos) {
            Tensor v = t;
            if (name.find(".w") != std::string::npos)
                for (auto& x : v.data()) x *= 10.0;
            used.add(name, v);
        }
    used.add("z0", random_tensor({8, 8}, rng));
    const Tensor proj = random_tensor({8, 8}, rng);
    const ParamLossFn loss = [&](ad::Tape& tape, const ParamBinding& bind) {
        ad::Var z = bind["z0"];
        for (std::size_t l = 0; l < two.layers; ++l) z = transformer_block(bind, two, l, z);
        return ad::sum(ad::mul(z, tape.constant(proj)));
    };
    const auto r = param_gradcheck(used, loss, 1e-5, {"attn.k.b"});
    CHECK(r.max_rel_err <= 1e-4);
    CHECK(key_bias_grad_norm(used, loss) <= 1e-12);
}

TEST_CASE("encoder taps") {
    VitConfig c = small_config(16, 4, 12, 16);
    std::mt19937_64 rng(10);
    ParamStore store;
    vit_init(store, c, rng);
    {
        ad::Tape tape;
        ParamBinding bind(tape, store);
        const EncoderOutput out = encode(bind, c, tape.constant(random_tensor({16, 16}, rng)));
        CHECK(out.taps.size() == 4);
        for (const auto& t : out.taps) CHECK(t.shape() == Shape{16, 16});
        CHECK(out.final.value() == out.taps.back().value());
    }
    for (std::size_t l = 0; l < c.layers; ++l) zero_block_outputs(store, l);
    ad::Tape tape;
    ParamBinding bind(tape, store);
    const Tensor z0 = random_tensor({16, 16}, rng);
    const EncoderOutput out = encode(bind, c, tape.constant(z0));
    for (const auto& t : out.taps) CHECK(t.value() == z0);
}

TEST_CASE("encoder without positional encoding is permutation equivariant") {
    VitConfig c = small_config(32, 4, 4, 24);
    c.positional = false;
    std::mt19937_64 rng(11);
    ParamStore store;
    vit_init(store, c, rng);
    for (auto& [name, t] : store.entries())
        if (name.find(".w") != std::string::npos)
            for (auto& v : t.data()) v *= 10.0;
    const Tensor z0 = random_tensor({24, 32}, rng);
    std::vector<std::size_t> perm(24);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    ad::Tape tape;
    ParamBinding bind(tape, store);
    const EncoderOutput a = encode(bind, c, tape.constant(z0));
    const EncoderOutput b = encode(bind, c, tape.constant(permute_rows(z0, perm)));
    CHECK(max_abs_diff(b.final.value(), permute_rows(a.final.value(), perm)) <= 1e-9);
    for (std::size_t t = 0; t < 4; ++t)
        CHECK(max_abs_diff(b.taps[t].value(), permute_rows(a.taps[t].value(), perm)) <= 1e-9);
}

TEST_CASE("EHR token") {
    VitConfig c = VitConfig::toy();
    c.embed = 16;
    c.heads = 2;
    c.max_tokens = 8;
    c.ehr_features = 3;
    std::mt19937_64 rng(12);
    ParamStore store;
    vit_init(store, c, rng);
    CHECK(store.get("vit.pos").dim(0) == 9);
    {
        VitConfig nopos = c;
        nopos.positional = false;
        ad::Tape tape;
        ParamBinding bind(tape, store);
        const ad::Var t = ehr_token(bind, nopos, tape.constant(Tensor({1, 3})));
        for (double v : t.value().data()) CHECK(v == 0.0);
        CHECK_THROWS_AS(ehr_token(bind, c, tape.constant(Tensor({1, 4}))), ContractError);
    }
    ad::Tape tape;
    ParamBinding bind(tape, store);
    const ad::Var x = tape.constant(random_tensor({2, 16, 16, 16}, rng));
    const ad::Var cov = tape.constant(random_tensor({1, 3}, rng));
    const ad::Var seq = vit_tokens(bind, c, x, cov);
    CHECK(seq.shape() == Shape{9, 16});
    const EncoderOutput enc = encode(bind, c, seq);
    const ad::Var loss = ad::sum(ad::mul(enc.final, enc.final));
    tape.backward(loss);
    const auto g = bind.grads();
    double ge = 0.0, gp = 0.0;
    for (double v : g.at("vit.ehr.w").data()) ge += std::abs(v);
    for (double v : g.at("vit.embed.w").data()) gp += std::abs(v);
    CHECK(ge > 0.0);
    CHECK(gp > 0.0);
}

TEST_CASE("tokens map back onto the patch grid") {
    VitConfig c = VitConfig::toy();
    c.embed = 4;
    c.heads = 1;
    c.max_tokens = 8;
    ad::Tape tape;
    Tensor tok({8, 4});
    for (std::size_t i = 0; i < 8; ++i)
        for (std::size_t k = 0; k < 4; ++k) tok[i * 4 + k] = static_cast<double>(100 * k + i);
    const Tensor g = tokens_to_grid(tape.constant(tok), c, {16, 16, 16}).value();
    CHECK(g.shape() == Shape{4, 2, 2, 2});
    // token 5 = grid cell (1, 0, 1)
    CHECK(g.at({3, 1, 0, 1}) == 305.0);
}
