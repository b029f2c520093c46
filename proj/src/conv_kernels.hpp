#pragma once

// Internal im2col machinery shared by conv / conv_transpose and their gradients.
//
// Column matrices are built for a range of output planes (slices along the
// first spatial axis) at a time, so the working buffer stays cache-sized
// regardless of the volume size.

#include <array>
#include <cstddef>
#include <vector>

namespace oncokit::detail {

/// Geometry of a cross-correlation from `in` to `out`. Rank-2 problems use a
/// trailing axis of extent 1 with kernel 1, so one code path serves both ranks.
struct ConvGeometry {
    std::size_t channels = 0;  // channels of the correlated (input) side
    std::array<std::size_t, 3> in{1, 1, 1};
    std::array<std::size_t, 3> kernel{1, 1, 1};
    std::array<std::size_t, 3> out{1, 1, 1};
    std::array<std::size_t, 3> stride{1, 1, 1};
    std::array<std::size_t, 3> pad{0, 0, 0};

    std::size_t in_numel() const { return in[0] * in[1] * in[2]; }
    std::size_t out_numel() const { return out[0] * out[1] * out[2]; }
    std::size_t kernel_numel() const { return kernel[0] * kernel[1] * kernel[2]; }
    std::size_t col_rows() const { return channels * kernel_numel(); }
    /// Output positions per plane of the first spatial axis.
    std::size_t plane() const { return out[1] * out[2]; }
};

/// cols[channels * K, n] for output planes [o0_begin, o0_end), n = planes * plane();
/// out-of-range taps are zero.
void im2col(const double* x, const ConvGeometry& g, double* cols, std::size_t o0_begin, std::size_t o0_end);

/// Adjoint of im2col on the same plane range: x[channels, in...] += scatter(cols).
void col2im(const double* cols, const ConvGeometry& g, double* x, std::size_t o0_begin, std::size_t o0_end);

/// Number of output planes per chunk so that a column buffer holds about
/// `budget` doubles (at least one plane).
std::size_t planes_per_chunk(const ConvGeometry& g, std::size_t budget = std::size_t{1} << 18);

/// Per-thread scratch buffer of at least n doubles (contents unspecified).
double* scratch(std::size_t n);

// Row-major products with explicit row strides (ld*), C (=|+=) op(A) op(B).
/// C[m, n] = A[m, k] B[k, n]
void gemm(const double* a, std::size_t lda, const double* b, std::size_t ldb, double* c, std::size_t ldc,
          std::size_t m, std::size_t k, std::size_t n, bool accumulate = false);
/// C[m, n] = A[m, k] B[n, k]^T
void gemm_nt(const double* a, std::size_t lda, const double* b, std::size_t ldb, double* c, std::size_t ldc,
             std::size_t m, std::size_t k, std::size_t n, bool accumulate = false);
/// C[m, n] = A[k, m]^T B[k, n]
void gemm_tn(const double* a, std::size_t lda, const double* b, std::size_t ldb, double* c, std::size_t ldc,
             std::size_t m, std::size_t k, std::size_t n, bool accumulate = false);

// Densely packed operands.
inline void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
                 bool accumulate = false) {
    gemm(a, k, b, n, c, n, m, k, n, accumulate);
}
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
                    bool accumulate = false) {
    gemm_nt(a, k, b, k, c, n, m, k, n, accumulate);
}
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
                    bool accumulate = false) {
    gemm_tn(a, m, b, n, c, n, m, k, n, accumulate);
}

}  // namespace oncokit::detail
