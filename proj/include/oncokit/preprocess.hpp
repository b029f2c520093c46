#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <tuple>

#include "oncokit/volume.hpp"

namespace oncokit {

/// clamp(x, -1024, 1024) / 1024. CT only.
Volume ct_window_normalize(const Volume& v);

/// (x - mean) / (std + eps) with the population standard deviation. PET only.
Volume pet_zscore(const Volume& v, double eps = 1e-8);

/// Resamples to isotropic spacing. New extent = round(old * spacing / target).
/// Images are interpolated trilinearly with grid corners aligned (the first and
/// last voxel centres map onto each other); masks use nearest neighbour.
Volume resample_isotropic(const Volume& v, double target_spacing = 1.0);

using Origin3 = std::array<std::int64_t, 3>;

struct CropProvenance {
    Origin3 origin{};
    Extents3 size{};
    Extents3 pad_before{};  // zero voxels added below index 0, per axis
    Extents3 pad_after{};   // zero voxels added past the last index, per axis
};

/// Copies the box [origin, origin + size) out of `v`. Voxels of the box that
/// fall outside the volume are zero and counted in the provenance. A box that
/// does not intersect the volume, or whose size exceeds twice the volume
/// extent on some axis (more padding than data), is rejected.
Volume crop_to_bbox(const Volume& v, Origin3 origin, Extents3 size = {144, 144, 144},
                    CropProvenance* provenance = nullptr);

/// Crop of `size` centred on the volume centre.
Volume center_crop(const Volume& v, Extents3 size, CropProvenance* provenance = nullptr);

/// Reverses the voxel order along `axis` (0 = H, 1 = W, 2 = D).
Volume mirror(const Volume& v, std::size_t axis);

struct AugmentConfig {
    std::array<bool, 3> mirror_axes{true, true, true};  // each flipped with probability 0.5
    double rotation_min_deg = -45.0;                     // axial (H-W plane) rotation range
    double rotation_max_deg = 45.0;
    double zoom_max = 1.25;                              // zoom drawn uniformly in [1, zoom_max]
    double gamma_min = 0.5;                              // PET gamma, log-uniform in range
    double gamma_max = 2.0;
    std::size_t elastic_grid = 16;                       // control-point spacing in voxels
    double elastic_max_disp = 4.0;                       // 0 disables elastic deformation
    std::uint64_t seed = 0;

    void validate() const;
    /// Every transform switched off.
    static AugmentConfig identity();
};

/// What one call drew; for logging and tests.
struct AugmentDraw {
    std::array<bool, 3> mirrored{};
    double rotation_deg = 0.0;
    double zoom = 1.0;
    double gamma = 1.0;
};

struct Augmented {
    Volume ct;
    Volume pet;
    Volume mask;
    AugmentDraw draw;
};

/// One random geometric transform shared by all three volumes (mask warped with
/// nearest neighbour) followed by gamma correction of PET only.
Augmented augment(const Volume& ct, const Volume& pet, const Volume& mask, const AugmentConfig& cfg,
                  std::mt19937_64& rng);
/// Same, seeded from cfg.seed.
Augmented augment(const Volume& ct, const Volume& pet, const Volume& mask, const AugmentConfig& cfg);

/// Per-worker seed derived from a base seed and a subject id, so results do not
/// depend on which worker processes which subject.
std::uint64_t subject_seed(std::uint64_t base, const std::string& subject_id);

}  // namespace oncokit
