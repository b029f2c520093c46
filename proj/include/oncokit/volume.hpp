#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "oncokit/tensor.hpp"

namespace oncokit {

enum class Modality : std::uint8_t { CT = 0, PET = 1, MASK = 2, MR = 3 };

std::string modality_name(Modality m);

using Extents3 = std::array<std::size_t, 3>;
using Spacing3 = std::array<float, 3>;

/// 3D scalar grid (H, W, D), row-major with D fastest, plus voxel spacing in mm.
class Volume {
public:
    Volume(Extents3 shape, Spacing3 spacing, Modality modality, float fill = 0.0f);
    Volume(Extents3 shape, Spacing3 spacing, Modality modality, std::vector<float> data);

    const Extents3& shape() const noexcept { return shape_; }
    const Spacing3& spacing() const noexcept { return spacing_; }
    Modality modality() const noexcept { return modality_; }
    std::size_t size() const noexcept { return data_.size(); }

    std::span<float> data() noexcept { return data_; }
    std::span<const float> data() const noexcept { return data_; }

    float& at(std::size_t h, std::size_t w, std::size_t d) { return data_[index(h, w, d)]; }
    float at(std::size_t h, std::size_t w, std::size_t d) const { return data_[index(h, w, d)]; }
    std::size_t index(std::size_t h, std::size_t w, std::size_t d) const {
        return (h * shape_[1] + w) * shape_[2] + d;
    }

    void set_spacing(Spacing3 s);
    void set_modality(Modality m);

    /// True once intensity normalization has been applied; makes the
    /// normalization ops idempotent. Persisted in bit 0 of the first MVOL
    /// reserved byte.
    bool normalized() const noexcept { return normalized_; }
    void set_normalized(bool n) noexcept { normalized_ = n; }

    bool operator==(const Volume&) const = default;

private:
    void validate() const;

    Extents3 shape_;
    Spacing3 spacing_;
    Modality modality_;
    std::vector<float> data_;
    bool normalized_ = false;
};

/// Stacks volumes of equal shape as channels: [C, H, W, D] doubles.
Tensor to_tensor(std::span<const Volume* const> channels);
Tensor to_tensor(const Volume& v);
/// Channel `c` of a [C, H, W, D] tensor as a volume.
Volume from_tensor(const Tensor& t, std::size_t channel, Spacing3 spacing, Modality modality);

// MVOL file: "MVOL", u32 version=1, u32 H, W, D, f32 spacing x3, u8 modality,
// 3 reserved bytes (bit 0 of the first = normalized flag), then H*W*D little-endian f32 voxels.
void write_volume(const Volume& v, const std::filesystem::path& path);
Volume read_volume(const std::filesystem::path& path);

std::vector<unsigned char> encode_volume(const Volume& v);
Volume decode_volume(const std::vector<unsigned char>& bytes);

}  // namespace oncokit
