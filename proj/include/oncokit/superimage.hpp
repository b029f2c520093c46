#pragma once

#include <string>
#include <utility>

#include "oncokit/tensor.hpp"
#include "oncokit/volume.hpp"

namespace oncokit {

/// Tiling of the depth slices of a volume into an sh x sw mosaic.
struct SuperImageLayout {
    std::size_t sh = 1;
    std::size_t sw = 1;
    // source extents
    std::size_t H = 1, W = 1, D = 1, C = 1;

    std::size_t padded_depth() const noexcept { return sh * sw; }
    std::size_t out_h() const noexcept { return H * sh; }
    std::size_t out_w() const noexcept { return W * sw; }
    void validate() const;
};

/// Most square grid: D' = D when D is composite or D <= 3, otherwise D + 1
/// (the next integer, which is even and therefore composite); returns the
/// factor pair (a, b) of D' with a <= b and b - a minimal.
std::pair<std::size_t, std::size_t> choose_grid(std::size_t D);

/// "auto" or "SHxSW" (e.g. "6x8").
std::pair<std::size_t, std::size_t> parse_grid(const std::string& spec, std::size_t D);

SuperImageLayout make_layout(std::size_t H, std::size_t W, std::size_t D, std::size_t C);
SuperImageLayout make_layout(std::size_t H, std::size_t W, std::size_t D, std::size_t C,
                             std::pair<std::size_t, std::size_t> grid);

/// [C, H, W, D] -> [C, H*sh, W*sw]. Slice d goes to grid cell (d / sw, d % sw),
/// so voxel (h, w, d) lands on pixel (h + H*(d / sw), w + W*(d % sw)).
/// Cells of padding slices (d >= D) are zero.
Tensor to_super_image(const Tensor& volume, const SuperImageLayout& layout);
/// Exact left inverse of to_super_image; padding cells are discarded.
Tensor from_super_image(const Tensor& image, const SuperImageLayout& layout);

/// Single-channel volume form: the result has depth 1.
Volume to_super_image(const Volume& v, const SuperImageLayout& layout);
Volume from_super_image(const Volume& s, const SuperImageLayout& layout);

/// Appends zero slices to depth `target`: (target - D) / 2 in front, the rest behind.
Volume pad_depth(const Volume& v, std::size_t target);
Tensor pad_depth(const Tensor& v, std::size_t target);

}  // namespace oncokit
