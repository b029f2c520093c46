#include "oncokit/superimage.hpp"

#include <cstdlib>

#include "oncokit/error.hpp"

namespace oncokit {

void SuperImageLayout::validate() const {
    if (sh == 0 || sw == 0 || H == 0 || W == 0 || D == 0 || C == 0)
        throw ContractError("super-image layout extents must be >= 1");
    if (sh * sw < D)
        throw ContractError("super-image grid " + std::to_string(sh) + "x" + std::to_string(sw) + " holds fewer than " +
                            std::to_string(D) + " slices");
}

namespace {

bool is_prime(std::size_t n) {
    if (n < 2) return false;
    for (std::size_t f = 2; f * f <= n; ++f)
        if (n % f == 0) return false;
    return true;
}

}  // namespace

std::pair<std::size_t, std::size_t> choose_grid(std::size_t D) {
    if (D == 0) throw ContractError("choose_grid: D must be >= 1");
    const std::size_t padded = (D <= 3 || !is_prime(D)) ? D : D + 1;
    std::size_t a = 1;
    for (std::size_t f = 1; f * f <= padded; ++f)
        if (padded % f == 0) a = f;
    return {a, padded / a};
}

std::pair<std::size_t, std::size_t> parse_grid(const std::string& spec, std::size_t D) {
    if (spec == "auto") return choose_grid(D);
    const auto x = spec.find('x');
    if (x == std::string::npos) throw ConfigError("grid must be 'auto' or SHxSW, got '" + spec + "'");
    char* end = nullptr;
    const auto sh = std::strtoul(spec.c_str(), &end, 10);
    if (end != spec.c_str() + x || sh == 0) throw ConfigError("bad grid rows in '" + spec + "'");
    const auto sw = std::strtoul(spec.c_str() + x + 1, &end, 10);
    if (*end != '\0' || sw == 0) throw ConfigError("bad grid columns in '" + spec + "'");
    return {sh, sw};
}

SuperImageLayout make_layout(std::size_t H, std::size_t W, std::size_t D, std::size_t C,
                             std::pair<std::size_t, std::size_t> grid) {
    SuperImageLayout l{grid.first, grid.second, H, W, D, C};
    l.validate();
    return l;
}

SuperImageLayout make_layout(std::size_t H, std::size_t W, std::size_t D, std::size_t C) {
    return make_layout(H, W, D, C, choose_grid(D));
}

Tensor to_super_image(const Tensor& v, const SuperImageLayout& l) {
    l.validate();
    if (v.rank() != 4 || v.dim(0) != l.C || v.dim(1) != l.H || v.dim(2) != l.W || v.dim(3) != l.D)
        throw ContractError("to_super_image: volume " + shape_str(v.shape()) + " does not match layout [" +
                            std::to_string(l.C) + ", " + std::to_string(l.H) + ", " + std::to_string(l.W) + ", " +
                            std::to_string(l.D) + "]");
    const std::size_t OH = l.out_h(), OW = l.out_w();
    Tensor out = Tensor::zeros({l.C, OH, OW});
    const auto src = v.data();
    auto dst = out.data();
    for (std::size_t c = 0; c < l.C; ++c)
        for (std::size_t h = 0; h < l.H; ++h)
            for (std::size_t w = 0; w < l.W; ++w) {
                const std::size_t base = ((c * l.H + h) * l.W + w) * l.D;
                for (std::size_t d = 0; d < l.D; ++d) {
                    const std::size_t row = h + l.H * (d / l.sw), col = w + l.W * (d % l.sw);
                    dst[(c * OH + row) * OW + col] = src[base + d];
                }
            }
    return out;
}

Tensor from_super_image(const Tensor& s, const SuperImageLayout& l) {
    l.validate();
    if (s.rank() != 3 || s.dim(0) != l.C || s.dim(1) != l.out_h() || s.dim(2) != l.out_w())
        throw ContractError("from_super_image: image " + shape_str(s.shape()) + " does not match layout extents [" +
                            std::to_string(l.C) + ", " + std::to_string(l.out_h()) + ", " + std::to_string(l.out_w()) +
                            "]");
    const std::size_t OH = l.out_h(), OW = l.out_w();
    Tensor out = Tensor::zeros({l.C, l.H, l.W, l.D});
    const auto src = s.data();
    auto dst = out.data();
    for (std::size_t c = 0; c < l.C; ++c)
        for (std::size_t h = 0; h < l.H; ++h)
            for (std::size_t w = 0; w < l.W; ++w) {
                const std::size_t base = ((c * l.H + h) * l.W + w) * l.D;
                for (std::size_t d = 0; d < l.D; ++d) {
                    const std::size_t row = h + l.H * (d / l.sw), col = w + l.W * (d % l.sw);
                    dst[base + d] = src[(c * OH + row) * OW + col];
                }
            }
    return out;
}

Volume to_super_image(const Volume& v, const SuperImageLayout& l) {
    if (l.C != 1) throw ContractError("to_super_image: volume form needs a single-channel layout");
    const Tensor t = to_super_image(to_tensor(v), l);
    std::vector<float> data(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) data[i] = static_cast<float>(t[i]);
    Volume out({l.out_h(), l.out_w(), 1}, v.spacing(), v.modality(), std::move(data));
    out.set_normalized(v.normalized());
    return out;
}

Volume from_super_image(const Volume& s, const SuperImageLayout& l) {
    if (l.C != 1) throw ContractError("from_super_image: volume form needs a single-channel layout");
    if (s.shape()[2] != 1) throw ContractError("from_super_image: super image must have depth 1");
    Tensor t({1, s.shape()[0], s.shape()[1]});
    for (std::size_t i = 0; i < s.size(); ++i) t[i] = s.data()[i];
    Volume out = from_tensor(from_super_image(t, l), 0, s.spacing(), s.modality());
    out.set_normalized(s.normalized());
    return out;
}

Tensor pad_depth(const Tensor& v, std::size_t target) {
    if (v.rank() != 4) throw ShapeError("pad_depth: expected [C, H, W, D], got " + shape_str(v.shape()));
    const std::size_t D = v.dim(3);
    if (target < D)
        throw ContractError("pad_depth: target depth " + std::to_string(target) + " is below current depth " +
                            std::to_string(D) + " (crop explicitly instead)");
    const std::size_t front = (target - D) / 2;
    Tensor out = Tensor::zeros({v.dim(0), v.dim(1), v.dim(2), target});
    const std::size_t rows = v.dim(0) * v.dim(1) * v.dim(2);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t d = 0; d < D; ++d) out[r * target + front + d] = v[r * D + d];
    return out;
}

Volume pad_depth(const Volume& v, std::size_t target) {
    Volume out = from_tensor(pad_depth(to_tensor(v), target), 0, v.spacing(), v.modality());
    out.set_normalized(v.normalized());
    return out;
}

}  // namespace oncokit
