#include "conv_kernels.hpp"

#include <Eigen/Core>
#include <algorithm>

namespace oncokit::detail {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
using MutMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;

ConstMap cmap(const double* p, std::size_t rows, std::size_t cols, std::size_t ld) {
    return ConstMap(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols),
                    Eigen::OuterStride<>(static_cast<Eigen::Index>(ld)));
}

MutMap mmap(double* p, std::size_t rows, std::size_t cols, std::size_t ld) {
    return MutMap(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols),
                  Eigen::OuterStride<>(static_cast<Eigen::Index>(ld)));
}

// Output positions o in [lo, hi) whose input index o * stride + tap - pad lies in [0, n).
void valid_range(std::size_t tap, std::size_t stride, std::size_t pad, std::size_t n, std::size_t out_n,
                 std::size_t& lo, std::size_t& hi) {
    if (n + pad <= tap) {
        lo = hi = 0;
        return;
    }
    lo = tap >= pad ? 0 : (pad - tap + stride - 1) / stride;
    hi = std::min(out_n, (n - 1 + pad - tap) / stride + 1);
    if (lo > hi) lo = hi;
}

// Signed offset of input index o * stride + tap - pad along a contiguous axis.
inline std::ptrdiff_t shift(std::size_t tap, std::size_t pad) {
    return static_cast<std::ptrdiff_t>(tap) - static_cast<std::ptrdiff_t>(pad);
}

// Rank-2 problems arrive as [H, W, 1]; the identical memory layout [H, 1, W]
// makes W the contiguous innermost run.
ConvGeometry canonical(const ConvGeometry& g) {
    if (g.in[2] != 1 || g.kernel[2] != 1 || g.out[2] != 1 || g.pad[2] != 0) return g;
    ConvGeometry c = g;
    for (auto* arr : {&c.in, &c.kernel, &c.out, &c.stride, &c.pad}) std::swap((*arr)[1], (*arr)[2]);
    return c;
}

}  // namespace

void im2col(const double* x, const ConvGeometry& geometry, double* cols, std::size_t ob, std::size_t oe) {
    const ConvGeometry g = canonical(geometry);
    const auto [k0, k1, k2] = g.kernel;
    const auto [s0, s1, s2] = g.stride;
    const std::size_t o1n = g.out[1], o2n = g.out[2], plane = g.plane();
    const std::size_t n = (oe - ob) * plane;
    std::size_t row = 0;
    for (std::size_t c = 0; c < g.channels; ++c) {
        const double* xc = x + c * g.in_numel();
        for (std::size_t a = 0; a < k0; ++a) {
            std::size_t lo0, hi0;
            valid_range(a, s0, g.pad[0], g.in[0], g.out[0], lo0, hi0);
            lo0 = std::clamp(lo0, ob, oe);
            hi0 = std::clamp(hi0, lo0, oe);
            for (std::size_t b = 0; b < k1; ++b) {
                std::size_t lo1, hi1;
                valid_range(b, s1, g.pad[1], g.in[1], o1n, lo1, hi1);
                for (std::size_t e = 0; e < k2; ++e, ++row) {
                    std::size_t lo2, hi2;
                    valid_range(e, s2, g.pad[2], g.in[2], o2n, lo2, hi2);
                    double* dst = cols + row * n;
                    std::fill(dst, dst + (lo0 - ob) * plane, 0.0);
                    std::fill(dst + (hi0 - ob) * plane, dst + n, 0.0);
                    for (std::size_t o0 = lo0; o0 < hi0; ++o0) {
                        const std::size_t i0 = o0 * s0 + a - g.pad[0];
                        double* d0 = dst + (o0 - ob) * plane;
                        std::fill(d0, d0 + lo1 * o2n, 0.0);
                        std::fill(d0 + hi1 * o2n, d0 + plane, 0.0);
                        for (std::size_t o1 = lo1; o1 < hi1; ++o1) {
                            const std::size_t i1 = o1 * s1 + b - g.pad[1];
                            double* d1 = d0 + o1 * o2n;
                            const double* src = xc + static_cast<std::ptrdiff_t>((i0 * g.in[1] + i1) * g.in[2]) +
                                                shift(e, g.pad[2]);
                            std::fill(d1, d1 + lo2, 0.0);
                            std::fill(d1 + hi2, d1 + o2n, 0.0);
                            if (s2 == 1) {
                                std::copy(src + lo2, src + hi2, d1 + lo2);
                            } else {
                                for (std::size_t o2 = lo2; o2 < hi2; ++o2)
                                    d1[o2] = src[static_cast<std::ptrdiff_t>(o2 * s2)];
                            }
                        }
                    }
                }
            }
        }
    }
}

void col2im(const double* cols, const ConvGeometry& geometry, double* x, std::size_t ob, std::size_t oe) {
    const ConvGeometry g = canonical(geometry);
    const auto [k0, k1, k2] = g.kernel;
    const auto [s0, s1, s2] = g.stride;
    const std::size_t o1n = g.out[1], o2n = g.out[2], plane = g.plane();
    const std::size_t n = (oe - ob) * plane;
    std::size_t row = 0;
    for (std::size_t c = 0; c < g.channels; ++c) {
        double* xc = x + c * g.in_numel();
        for (std::size_t a = 0; a < k0; ++a) {
            std::size_t lo0, hi0;
            valid_range(a, s0, g.pad[0], g.in[0], g.out[0], lo0, hi0);
            lo0 = std::clamp(lo0, ob, oe);
            hi0 = std::clamp(hi0, lo0, oe);
            for (std::size_t b = 0; b < k1; ++b) {
                std::size_t lo1, hi1;
                valid_range(b, s1, g.pad[1], g.in[1], o1n, lo1, hi1);
                for (std::size_t e = 0; e < k2; ++e, ++row) {
                    std::size_t lo2, hi2;
                    valid_range(e, s2, g.pad[2], g.in[2], o2n, lo2, hi2);
                    const double* src = cols + row * n;
                    for (std::size_t o0 = lo0; o0 < hi0; ++o0) {
                        const std::size_t i0 = o0 * s0 + a - g.pad[0];
                        for (std::size_t o1 = lo1; o1 < hi1; ++o1) {
                            const std::size_t i1 = o1 * s1 + b - g.pad[1];
                            double* dst = xc + static_cast<std::ptrdiff_t>((i0 * g.in[1] + i1) * g.in[2]) +
                                          shift(e, g.pad[2]);
                            const double* sp = src + (o0 - ob) * plane + o1 * o2n;
                            if (s2 == 1) {
                                for (std::size_t o2 = lo2; o2 < hi2; ++o2) dst[o2] += sp[o2];
                            } else {
                                for (std::size_t o2 = lo2; o2 < hi2; ++o2)
                                    dst[static_cast<std::ptrdiff_t>(o2 * s2)] += sp[o2];
                            }
                        }
                    }
                }
            }
        }
    }
}

std::size_t planes_per_chunk(const ConvGeometry& g, std::size_t budget) {
    const std::size_t per_plane = std::max<std::size_t>(1, g.col_rows() * g.plane());
    return std::clamp<std::size_t>(budget / per_plane, 1, std::max<std::size_t>(g.out[0], 1));
}

double* scratch(std::size_t n) {
    thread_local std::vector<double> buf;
    if (buf.size() < n) buf.resize(n);
    return buf.data();
}

void gemm(const double* a, std::size_t lda, const double* b, std::size_t ldb, double* c, std::size_t ldc,
          std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
    auto C = mmap(c, m, n, ldc);
    if (accumulate)
        C.noalias() += cmap(a, m, k, lda) * cmap(b, k, n, ldb);
    else
        C.noalias() = cmap(a, m, k, lda) * cmap(b, k, n, ldb);
}

void gemm_nt(const double* a, std::size_t lda, const double* b, std::size_t ldb, double* c, std::size_t ldc,
             std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
    auto C = mmap(c, m, n, ldc);
    if (accumulate)
        C.noalias() += cmap(a, m, k, lda) * cmap(b, n, k, ldb).transpose();
    else
        C.noalias() = cmap(a, m, k, lda) * cmap(b, n, k, ldb).transpose();
}

void gemm_tn(const double* a, std::size_t lda, const double* b, std::size_t ldb, double* c, std::size_t ldc,
             std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
    auto C = mmap(c, m, n, ldc);
    if (accumulate)
        C.noalias() += cmap(a, k, m, lda).transpose() * cmap(b, k, n, ldb);
    else
        C.noalias() = cmap(a, k, m, lda).transpose() * cmap(b, k, n, ldb);
}

}  // namespace oncokit::detail
