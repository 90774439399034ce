#pragma once

// Compute kernels behind the tensor and nn ops.
//
// The top-level namespace holds the packed, OpenMP-parallel versions used at
// runtime. `reference` holds straightforward serial loops kept as test oracles
// and as the baseline of bench/bench_kernels.

#include <array>
#include <cstddef>

namespace sfc::kernels {

// C[M×N] (+)= A[M×K] · B[K×N], all row-major and contiguous.
void gemm(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
          bool accumulate);

enum class Op { None, Transpose };

// C[M×N] (+)= op(A) · op(B). A transposed operand is stored K×M (A) or N×K (B).
void gemm(std::size_t m, std::size_t n, std::size_t k, const double* a, Op op_a, const double* b,
          Op op_b, double* c, bool accumulate);

// dst[cols×rows] = src[rows×cols]ᵀ
void transpose(std::size_t rows, std::size_t cols, const double* src, double* dst);

using Triple = std::array<std::size_t, 3>;  // (t, h, w)

struct ConvGeometry {
  std::size_t c_in = 0, t_in = 0, h_in = 0, w_in = 0;
  std::size_t c_out = 0;
  Triple kernel{1, 1, 1};
  Triple stride{1, 1, 1};
  Triple padding{0, 0, 0};

  std::size_t t_out() const { return (t_in + 2 * padding[0] - kernel[0]) / stride[0] + 1; }
  std::size_t h_out() const { return (h_in + 2 * padding[1] - kernel[1]) / stride[1] + 1; }
  std::size_t w_out() const { return (w_in + 2 * padding[2] - kernel[2]) / stride[2] + 1; }
  std::size_t out_positions() const { return t_out() * h_out() * w_out(); }
  std::size_t in_positions() const { return t_in * h_in * w_in; }
  std::size_t patch_size() const { return c_in * kernel[0] * kernel[1] * kernel[2]; }
  // 1×1×1, unit stride, no padding: im2col is the identity.
  bool pointwise() const;
};

// col[patch_size × out_positions]
void im2col(const ConvGeometry& g, const double* x, double* col);
// dx += col2im(col)
void col2im(const ConvGeometry& g, const double* col, double* dx);

// One sample: x[C_in×T×H×W] → y[C_out×T'×H'×W']. `bias` may be null.
void conv3d_forward(const ConvGeometry& g, const double* x, const double* weight,
                    const double* bias, double* y);
// dx += ∂/∂x
void conv3d_backward_input(const ConvGeometry& g, const double* dy, const double* weight,
                           double* dx);
// dw += ∂/∂w, db += ∂/∂b (db may be null)
void conv3d_backward_weight(const ConvGeometry& g, const double* dy, const double* x, double* dw,
                            double* db);

namespace reference {

void gemm(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
          bool accumulate);
// Direct nested-loop cross-correlation with zero padding.
void conv3d_forward(const ConvGeometry& g, const double* x, const double* weight,
                    const double* bias, double* y);

}  // namespace reference

}  // namespace sfc::kernels
