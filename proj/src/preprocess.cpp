#include "oncokit/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "oncokit/error.hpp"

namespace oncokit {

namespace {

// Trilinear sample at a continuous voxel coordinate; coordinates are clamped to
// the grid so border voxels extend outward. Exact at integer coordinates.
float sample_trilinear(const Volume& v, double ch, double cw, double cd) {
    const auto& s = v.shape();
    const double c[3] = {ch, cw, cd};
    std::size_t i0[3], i1[3];
    double f[3];
    for (int a = 0; a < 3; ++a) {
        const double hi = static_cast<double>(s[a] - 1);
        const double x = std::clamp(c[a], 0.0, hi);
        const double fl = std::floor(x);
        i0[a] = static_cast<std::size_t>(fl);
        i1[a] = std::min(i0[a] + 1, s[a] - 1);
        f[a] = x - fl;
    }
    double out = 0.0;
    for (int corner = 0; corner < 8; ++corner) {
        double w = 1.0;
        std::size_t idx[3];
        for (int a = 0; a < 3; ++a) {
            const bool up = (corner >> (2 - a)) & 1;
            w *= up ? f[a] : 1.0 - f[a];
            idx[a] = up ? i1[a] : i0[a];
        }
        if (w != 0.0) out += w * v.at(idx[0], idx[1], idx[2]);
    }
    return static_cast<float>(out);
}

float sample_nearest(const Volume& v, double ch, double cw, double cd) {
    const auto& s = v.shape();
    const double c[3] = {ch, cw, cd};
    std::size_t idx[3];
    for (int a = 0; a < 3; ++a) {
        const double x = std::clamp(std::round(c[a]), 0.0, static_cast<double>(s[a] - 1));
        idx[a] = static_cast<std::size_t>(x);
    }
    return v.at(idx[0], idx[1], idx[2]);
}

void require_modality(const Volume& v, Modality m, const char* op) {
    if (v.modality() != m)
        throw ContractError(std::string(op) + ": expected " + modality_name(m) + " volume, got " +
                            modality_name(v.modality()));
}

}  // namespace

Volume ct_window_normalize(const Volume& v) {
    require_modality(v, Modality::CT, "ct_window_normalize");
    Volume out = v;
    if (v.normalized()) return out;
    for (auto& x : out.data()) x = static_cast<float>(std::clamp(static_cast<double>(x), -1024.0, 1024.0) / 1024.0);
    out.set_normalized(true);
    return out;
}

Volume pet_zscore(const Volume& v, double eps) {
    require_modality(v, Modality::PET, "pet_zscore");
    Volume out = v;
    if (v.normalized()) return out;
    const auto d = v.data();
    double mean = 0.0;
    for (float x : d) mean += x;
    mean /= static_cast<double>(d.size());
    double var = 0.0;
    for (float x : d) var += (x - mean) * (x - mean);
    var /= static_cast<double>(d.size());
    const double denom = std::sqrt(var) + eps;
    for (auto& x : out.data()) x = static_cast<float>((x - mean) / denom);
    out.set_normalized(true);
    return out;
}

Volume resample_isotropic(const Volume& v, double target_spacing) {
    if (!(target_spacing > 0.0)) throw ContractError("resample_isotropic: target spacing must be positive");
    Extents3 ext{};
    std::array<double, 3> step{};
    for (int a = 0; a < 3; ++a) {
        const double n = std::round(static_cast<double>(v.shape()[a]) * v.spacing()[a] / target_spacing);
        if (n < 1.0)
            throw ShapeError("resample_isotropic: axis " + std::to_string(a) + " collapses to zero voxels");
        ext[a] = static_cast<std::size_t>(n);
        step[a] = ext[a] > 1 ? static_cast<double>(v.shape()[a] - 1) / static_cast<double>(ext[a] - 1) : 0.0;
    }
    const float t = static_cast<float>(target_spacing);
    Volume out(ext, {t, t, t}, v.modality());
    out.set_normalized(v.normalized());
    const bool mask = v.modality() == Modality::MASK;
    auto coord = [&](int a, std::size_t i) {
        return ext[a] > 1 ? static_cast<double>(i) * step[a] : static_cast<double>(v.shape()[a] - 1) / 2.0;
    };
    for (std::size_t h = 0; h < ext[0]; ++h)
        for (std::size_t w = 0; w < ext[1]; ++w)
            for (std::size_t d = 0; d < ext[2]; ++d) {
                const double ch = coord(0, h), cw = coord(1, w), cd = coord(2, d);
                out.at(h, w, d) = mask ? sample_nearest(v, ch, cw, cd) : sample_trilinear(v, ch, cw, cd);
            }
    return out;
}

Volume crop_to_bbox(const Volume& v, Origin3 origin, Extents3 size, CropProvenance* provenance) {
    CropProvenance prov{origin, size, {}, {}};
    for (int a = 0; a < 3; ++a) {
        const auto n = static_cast<std::int64_t>(v.shape()[a]);
        const auto sz = static_cast<std::int64_t>(size[a]);
        if (sz < 1) throw ShapeError("crop_to_bbox: box size must be >= 1");
        if (sz > 2 * n)
            throw ShapeError("crop_to_bbox: box size " + std::to_string(sz) + " on axis " + std::to_string(a) +
                             " exceeds the padded maximum " + std::to_string(2 * n));
        if (origin[a] >= n || origin[a] + sz <= 0)
            throw ShapeError("crop_to_bbox: box does not intersect the volume on axis " + std::to_string(a));
        prov.pad_before[a] = static_cast<std::size_t>(std::max<std::int64_t>(0, -origin[a]));
        prov.pad_after[a] = static_cast<std::size_t>(std::max<std::int64_t>(0, origin[a] + sz - n));
    }
    Volume out(size, v.spacing(), v.modality());
    out.set_normalized(v.normalized());
    for (std::size_t h = 0; h < size[0]; ++h) {
        const std::int64_t sh = origin[0] + static_cast<std::int64_t>(h);
        if (sh < 0 || sh >= static_cast<std::int64_t>(v.shape()[0])) continue;
        for (std::size_t w = 0; w < size[1]; ++w) {
            const std::int64_t sw = origin[1] + static_cast<std::int64_t>(w);
            if (sw < 0 || sw >= static_cast<std::int64_t>(v.shape()[1])) continue;
            for (std::size_t d = 0; d < size[2]; ++d) {
                const std::int64_t sd = origin[2] + static_cast<std::int64_t>(d);
                if (sd < 0 || sd >= static_cast<std::int64_t>(v.shape()[2])) continue;
                out.at(h, w, d) = v.at(static_cast<std::size_t>(sh), static_cast<std::size_t>(sw),
                                       static_cast<std::size_t>(sd));
            }
        }
    }
    if (provenance) *provenance = prov;
    return out;
}

Volume center_crop(const Volume& v, Extents3 size, CropProvenance* provenance) {
    Origin3 origin{};
    for (int a = 0; a < 3; ++a) {
        const auto diff = static_cast<std::int64_t>(v.shape()[a]) - static_cast<std::int64_t>(size[a]);
        // floor division so that padding, like cropping, puts the extra voxel at the end
        origin[a] = diff >= 0 ? diff / 2 : -((-diff) / 2);
    }
    return crop_to_bbox(v, origin, size, provenance);
}

Volume mirror(const Volume& v, std::size_t axis) {
    if (axis > 2) throw ContractError("mirror: axis must be 0, 1 or 2");
    Volume out = v;
    const auto& s = v.shape();
    for (std::size_t h = 0; h < s[0]; ++h)
        for (std::size_t w = 0; w < s[1]; ++w)
            for (std::size_t d = 0; d < s[2]; ++d) {
                std::size_t src[3] = {h, w, d};
                src[axis] = s[axis] - 1 - src[axis];
                out.at(h, w, d) = v.at(src[0], src[1], src[2]);
            }
    return out;
}

void AugmentConfig::validate() const {
    if (!(gamma_min > 0.0) || !(gamma_max >= gamma_min)) throw ConfigError("augment: gamma bounds must be positive and ordered");
    if (!(zoom_max > 0.0)) throw ConfigError("augment: zoom must be positive");
    if (rotation_max_deg < rotation_min_deg) throw ConfigError("augment: rotation range is reversed");
    if (elastic_grid == 0) throw ConfigError("augment: elastic grid spacing must be >= 1");
    if (elastic_max_disp < 0.0) throw ConfigError("augment: elastic displacement must be >= 0");
}

AugmentConfig AugmentConfig::identity() {
    AugmentConfig c;
    c.mirror_axes = {false, false, false};
    c.rotation_min_deg = c.rotation_max_deg = 0.0;
    c.zoom_max = 1.0;
    c.gamma_min = c.gamma_max = 1.0;
    c.elastic_max_disp = 0.0;
    return c;
}

Augmented augment(const Volume& ct, const Volume& pet, const Volume& mask, const AugmentConfig& cfg,
                  std::mt19937_64& rng) {
    cfg.validate();
    if (ct.shape() != pet.shape() || ct.shape() != mask.shape())
        throw ContractError("augment: CT, PET and mask extents differ");
    const auto& s = ct.shape();
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    AugmentDraw draw;
    for (int a = 0; a < 3; ++a) draw.mirrored[a] = cfg.mirror_axes[a] && unit(rng) < 0.5;
    if (cfg.rotation_max_deg > cfg.rotation_min_deg)
        draw.rotation_deg = cfg.rotation_min_deg + (cfg.rotation_max_deg - cfg.rotation_min_deg) * unit(rng);
    if (cfg.zoom_max != 1.0) draw.zoom = 1.0 + (cfg.zoom_max - 1.0) * unit(rng);
    if (cfg.gamma_max > cfg.gamma_min) {
        const double lo = std::log(cfg.gamma_min), hi = std::log(cfg.gamma_max);
        draw.gamma = std::exp(lo + (hi - lo) * unit(rng));
    } else {
        draw.gamma = cfg.gamma_min;
    }

    // Coarse displacement lattice for the elastic warp, one 3-vector per node.
    std::array<std::size_t, 3> nodes{};
    std::vector<double> lattice;
    const bool elastic = cfg.elastic_max_disp > 0.0;
    if (elastic) {
        for (int a = 0; a < 3; ++a) nodes[a] = (s[a] - 1 + cfg.elastic_grid - 1) / cfg.elastic_grid + 1 + (s[a] == 1 ? 1 : 0);
        lattice.resize(nodes[0] * nodes[1] * nodes[2] * 3);
        for (auto& x : lattice) x = cfg.elastic_max_disp * (2.0 * unit(rng) - 1.0);
    }
    auto displacement = [&](std::size_t h, std::size_t w, std::size_t d, int comp) {
        const double g[3] = {static_cast<double>(h) / cfg.elastic_grid, static_cast<double>(w) / cfg.elastic_grid,
                             static_cast<double>(d) / cfg.elastic_grid};
        std::size_t i0[3];
        double f[3];
        for (int a = 0; a < 3; ++a) {
            i0[a] = std::min(static_cast<std::size_t>(g[a]), nodes[a] - 2);
            f[a] = g[a] - static_cast<double>(i0[a]);
        }
        double out = 0.0;
        for (int corner = 0; corner < 8; ++corner) {
            double wgt = 1.0;
            std::size_t idx[3];
            for (int a = 0; a < 3; ++a) {
                const bool up = (corner >> (2 - a)) & 1;
                wgt *= up ? f[a] : 1.0 - f[a];
                idx[a] = i0[a] + (up ? 1 : 0);
            }
            out += wgt * lattice[((idx[0] * nodes[1] + idx[1]) * nodes[2] + idx[2]) * 3 + comp];
        }
        return out;
    };

    const double centre[3] = {(s[0] - 1) / 2.0, (s[1] - 1) / 2.0, (s[2] - 1) / 2.0};
    const double theta = draw.rotation_deg * std::numbers::pi / 180.0;
    const double cs = std::cos(theta), sn = std::sin(theta);
    const bool rotate = draw.rotation_deg != 0.0;

    Volume out_ct(s, ct.spacing(), ct.modality()), out_pet(s, pet.spacing(), pet.modality()),
        out_mask(s, mask.spacing(), mask.modality());
    out_ct.set_normalized(ct.normalized());
    out_pet.set_normalized(pet.normalized());
    for (std::size_t h = 0; h < s[0]; ++h)
        for (std::size_t w = 0; w < s[1]; ++w)
            for (std::size_t d = 0; d < s[2]; ++d) {
                // output voxel -> source coordinate: elastic, zoom, axial rotation, mirror
                double p[3] = {static_cast<double>(h), static_cast<double>(w), static_cast<double>(d)};
                if (elastic)
                    for (int a = 0; a < 3; ++a) p[a] += displacement(h, w, d, a);
                double r[3];
                for (int a = 0; a < 3; ++a) r[a] = (p[a] - centre[a]) / draw.zoom;
                if (rotate) {
                    const double rh = cs * r[0] - sn * r[1];
                    const double rw = sn * r[0] + cs * r[1];
                    r[0] = rh;
                    r[1] = rw;
                }
                double q[3];
                for (int a = 0; a < 3; ++a) q[a] = draw.mirrored[a] ? centre[a] - r[a] : centre[a] + r[a];
                out_ct.at(h, w, d) = sample_trilinear(ct, q[0], q[1], q[2]);
                out_pet.at(h, w, d) = sample_trilinear(pet, q[0], q[1], q[2]);
                out_mask.at(h, w, d) = mask.modality() == Modality::MASK ? sample_nearest(mask, q[0], q[1], q[2])
                                                                         : sample_trilinear(mask, q[0], q[1], q[2]);
            }

    if (draw.gamma != 1.0) {
        auto data = out_pet.data();
        const auto [mn, mx] = std::minmax_element(data.begin(), data.end());
        const double lo = *mn, range = *mx - *mn;
        if (range > 0.0)
            for (auto& x : data) x = static_cast<float>(lo + range * std::pow((x - lo) / range, draw.gamma));
    }
    return {std::move(out_ct), std::move(out_pet), std::move(out_mask), draw};
}

Augmented augment(const Volume& ct, const Volume& pet, const Volume& mask, const AugmentConfig& cfg) {
    std::mt19937_64 rng(cfg.seed);
    return augment(ct, pet, mask, cfg, rng);
}

std::uint64_t subject_seed(std::uint64_t base, const std::string& subject_id) {
    // FNV-1a over the id, mixed with the base seed through splitmix64.
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : subject_id) {
        h ^= c;
        h *= 1099511628211ull;
    }
    std::uint64_t z = base ^ (h + 0x9e3779b97f4a7c15ull + (base << 6) + (base >> 2));
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

}  // namespace oncokit
