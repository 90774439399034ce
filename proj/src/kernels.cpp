#include "sfc/kernels.hpp"

#include <algorithm>
#include <cstring>
#include <vector>

#if defined(_OPENMP)
#include <omp.h>
#endif

namespace sfc::kernels {

namespace {

constexpr std::size_t kMr = 6;     // micro-tile rows
constexpr std::size_t kNr = 16;    // micro-tile columns (two 8-wide vectors)
constexpr std::size_t kKb = 256;   // depth of a packed panel
constexpr std::size_t kNb = 1024;  // columns of a packed B panel
constexpr std::size_t kSmallGemm = 8192;

typedef double vec8 __attribute__((vector_size(64)));

inline vec8 load8(const double* p) {
  vec8 v;
  std::memcpy(&v, p, sizeof(v));
  return v;
}
inline void store8(double* p, vec8 v) { std::memcpy(p, &v, sizeof(v)); }

// C[kMr×kNr] += Ap · Bp where Ap is k-major (Ap[k*kMr + r]) and Bp is
// row-major with kNr columns.
inline void micro_kernel(std::size_t kn, const double* __restrict ap, const double* __restrict bp,
                         double* __restrict c, std::size_t ldc) {
  vec8 lo[kMr];
  vec8 hi[kMr];
  for (std::size_t r = 0; r < kMr; ++r) {
    lo[r] = load8(c + r * ldc);
    hi[r] = load8(c + r * ldc + 8);
  }
  for (std::size_t k = 0; k < kn; ++k) {
    const vec8 b0 = load8(bp + k * kNr);
    const vec8 b1 = load8(bp + k * kNr + 8);
    for (std::size_t r = 0; r < kMr; ++r) {
      const double a = ap[k * kMr + r];
      lo[r] += a * b0;
      hi[r] += a * b1;
    }
  }
  for (std::size_t r = 0; r < kMr; ++r) {
    store8(c + r * ldc, lo[r]);
    store8(c + r * ldc + 8, hi[r]);
  }
}

// Element (i, p) of A lives at a[i * as.row + p * as.col]; likewise for B.
struct Strides {
  std::size_t row, col;
};

void small_gemm(std::size_t m, std::size_t n, std::size_t k, const double* a, Strides as,
                const double* b, Strides bs, double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * as.row + p * as.col];
      const double* brow = b + p * bs.row;
      if (bs.col == 1) {
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      } else {
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j * bs.col];
      }
    }
  }
}

void gemm_panel(std::size_t m, std::size_t n, std::size_t k0, std::size_t kn, std::size_t panel,
                const double* apack, const double* b, Strides bs, double* c) {
  const std::size_t row_blocks = (m + kMr - 1) / kMr;
  const std::size_t j0 = panel * kNb;
  const std::size_t jn = std::min(kNb, n - j0);
  const std::size_t col_blocks = (jn + kNr - 1) / kNr;
  thread_local std::vector<double> bpack;
  bpack.resize(col_blocks * kNr * kn);
  for (std::size_t jb = 0; jb < col_blocks; ++jb) {
    double* dst = bpack.data() + jb * kNr * kn;
    const std::size_t jstart = j0 + jb * kNr;
    const std::size_t width = std::min(kNr, n - jstart);
    if (width < kNr) std::fill(dst, dst + kn * kNr, 0.0);
    if (bs.col == 1) {
      for (std::size_t p = 0; p < kn; ++p) {
        const double* src = b + (k0 + p) * bs.row + jstart;
        for (std::size_t c2 = 0; c2 < width; ++c2) dst[p * kNr + c2] = src[c2];
      }
    } else {
      for (std::size_t c2 = 0; c2 < width; ++c2) {
        const double* src = b + (jstart + c2) * bs.col + k0 * bs.row;
        for (std::size_t p = 0; p < kn; ++p) dst[p * kNr + c2] = src[p * bs.row];
      }
    }
  }
  double edge[kMr * kNr];
  for (std::size_t jb = 0; jb < col_blocks; ++jb) {
    const std::size_t j = j0 + jb * kNr;
    const std::size_t jm = std::min(kNr, n - j);
    const double* bp = bpack.data() + jb * kNr * kn;
    for (std::size_t ib = 0; ib < row_blocks; ++ib) {
      const std::size_t i = ib * kMr;
      const std::size_t im = std::min(kMr, m - i);
      const double* ap = apack + ib * kMr * kn;
      if (im == kMr && jm == kNr) {
        micro_kernel(kn, ap, bp, c + i * n + j, n);
        continue;
      }
      for (std::size_t r = 0; r < kMr; ++r)
        for (std::size_t q = 0; q < kNr; ++q)
          edge[r * kNr + q] = (r < im && q < jm) ? c[(i + r) * n + j + q] : 0.0;
      micro_kernel(kn, ap, bp, edge, kNr);
      for (std::size_t r = 0; r < im; ++r)
        for (std::size_t q = 0; q < jm; ++q) c[(i + r) * n + j + q] = edge[r * kNr + q];
    }
  }
}

bool use_threads(std::size_t work_items) {
#if defined(_OPENMP)
  return work_items > 1 && omp_get_max_threads() > 1;
#else
  (void)work_items;
  return false;
#endif
}

}  // namespace

namespace {

void gemm_strided(std::size_t m, std::size_t n, std::size_t k, const double* a, Strides as,
                  const double* b, Strides bs, double* c, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  if (m == 0 || n == 0 || k == 0) return;
  if (m * n * k <= kSmallGemm) {
    small_gemm(m, n, k, a, as, b, bs, c);
    return;
  }

  const std::size_t row_blocks = (m + kMr - 1) / kMr;
  thread_local std::vector<double> apack;
  apack.resize(row_blocks * kMr * std::min(k, kKb));

  for (std::size_t k0 = 0; k0 < k; k0 += kKb) {
    const std::size_t kn = std::min(kKb, k - k0);
    for (std::size_t ib = 0; ib < row_blocks; ++ib) {
      double* dst = apack.data() + ib * kMr * kn;
      for (std::size_t r = 0; r < kMr; ++r) {
        const std::size_t i = ib * kMr + r;
        if (i >= m) {
          for (std::size_t p = 0; p < kn; ++p) dst[p * kMr + r] = 0.0;
          continue;
        }
        const double* src = a + i * as.row + k0 * as.col;
        for (std::size_t p = 0; p < kn; ++p) dst[p * kMr + r] = src[p * as.col];
      }
    }

    const std::size_t col_panels = (n + kNb - 1) / kNb;
    if (use_threads(col_panels)) {
#pragma omp parallel for schedule(static)
      for (std::size_t panel = 0; panel < col_panels; ++panel)
        gemm_panel(m, n, k0, kn, panel, apack.data(), b, bs, c);
    } else {
      for (std::size_t panel = 0; panel < col_panels; ++panel)
        gemm_panel(m, n, k0, kn, panel, apack.data(), b, bs, c);
    }
  }
}

}  // namespace

void gemm(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
          bool accumulate) {
  gemm_strided(m, n, k, a, {k, 1}, b, {n, 1}, c, accumulate);
}

void gemm(std::size_t m, std::size_t n, std::size_t k, const double* a, Op op_a, const double* b,
          Op op_b, double* c, bool accumulate) {
  const Strides as = op_a == Op::Transpose ? Strides{1, m} : Strides{k, 1};
  const Strides bs = op_b == Op::Transpose ? Strides{1, k} : Strides{n, 1};
  gemm_strided(m, n, k, a, as, b, bs, c, accumulate);
}

void transpose(std::size_t rows, std::size_t cols, const double* src, double* dst) {
  constexpr std::size_t kTile = 32;
  auto tile_row = [&](std::size_t i0) {
    for (std::size_t j0 = 0; j0 < cols; j0 += kTile) {
      const std::size_t ie = std::min(rows, i0 + kTile);
      const std::size_t je = std::min(cols, j0 + kTile);
      for (std::size_t i = i0; i < ie; ++i)
        for (std::size_t j = j0; j < je; ++j) dst[j * rows + i] = src[i * cols + j];
    }
  };
  if (use_threads(rows * cols > (1u << 16) ? rows / kTile : 0)) {
#pragma omp parallel for schedule(static)
    for (std::size_t i0 = 0; i0 < rows; i0 += kTile) tile_row(i0);
  } else {
    for (std::size_t i0 = 0; i0 < rows; i0 += kTile) tile_row(i0);
  }
}

bool ConvGeometry::pointwise() const {
  return kernel == Triple{1, 1, 1} && stride == Triple{1, 1, 1} && padding == Triple{0, 0, 0};
}

namespace {

// Visits every (row, out-position, in-offset-or-invalid) triple of the
// im2col matrix for channel `ci`.
template <typename F>
void for_each_patch_row(const ConvGeometry& g, std::size_t ci, F&& f) {
  const std::size_t to_n = g.t_out(), ho_n = g.h_out(), wo_n = g.w_out();
  const auto [kt, kh, kw] = g.kernel;
  const auto [st, sh, sw] = g.stride;
  const auto [pt, ph, pw] = g.padding;
  const std::size_t plane = g.h_in * g.w_in;
  for (std::size_t dt = 0; dt < kt; ++dt) {
    for (std::size_t dh = 0; dh < kh; ++dh) {
      for (std::size_t dw = 0; dw < kw; ++dw) {
        const std::size_t row = ((ci * kt + dt) * kh + dh) * kw + dw;
        std::size_t pos = 0;
        for (std::size_t to = 0; to < to_n; ++to) {
          const long ti = static_cast<long>(to * st + dt) - static_cast<long>(pt);
          const bool t_ok = ti >= 0 && ti < static_cast<long>(g.t_in);
          for (std::size_t ho = 0; ho < ho_n; ++ho) {
            const long hi = static_cast<long>(ho * sh + dh) - static_cast<long>(ph);
            const bool h_ok = t_ok && hi >= 0 && hi < static_cast<long>(g.h_in);
            const long base = h_ok ? (ti * static_cast<long>(plane) + hi * static_cast<long>(g.w_in))
                                   : 0;
            f(row, pos, h_ok, base, wo_n, sw, dw, pw);
            pos += wo_n;
          }
        }
      }
    }
  }
}

}  // namespace

void im2col(const ConvGeometry& g, const double* x, double* col) {
  const std::size_t positions = g.out_positions();
  const std::size_t in_pos = g.in_positions();
  auto channel = [&](std::size_t ci) {
    const double* xc = x + ci * in_pos;
    for_each_patch_row(g, ci, [&](std::size_t row, std::size_t pos, bool ok, long base,
                                  std::size_t wo_n, std::size_t sw, std::size_t dw,
                                  std::size_t pw) {
      double* dst = col + row * positions + pos;
      if (!ok) {
        std::fill(dst, dst + wo_n, 0.0);
        return;
      }
      for (std::size_t wo = 0; wo < wo_n; ++wo) {
        const long wi = static_cast<long>(wo * sw + dw) - static_cast<long>(pw);
        dst[wo] = (wi >= 0 && wi < static_cast<long>(g.w_in)) ? xc[base + wi] : 0.0;
      }
    });
  };
  if (use_threads((positions * g.patch_size() > (1u << 15)) ? g.c_in : 0)) {
#pragma omp parallel for schedule(static)
    for (std::size_t ci = 0; ci < g.c_in; ++ci) channel(ci);
  } else {
    for (std::size_t ci = 0; ci < g.c_in; ++ci) channel(ci);
  }
}

void col2im(const ConvGeometry& g, const double* col, double* dx) {
  const std::size_t positions = g.out_positions();
  const std::size_t in_pos = g.in_positions();
  auto channel = [&](std::size_t ci) {
    double* dxc = dx + ci * in_pos;
    for_each_patch_row(g, ci, [&](std::size_t row, std::size_t pos, bool ok, long base,
                                  std::size_t wo_n, std::size_t sw, std::size_t dw,
                                  std::size_t pw) {
      if (!ok) return;
      const double* src = col + row * positions + pos;
      for (std::size_t wo = 0; wo < wo_n; ++wo) {
        const long wi = static_cast<long>(wo * sw + dw) - static_cast<long>(pw);
        if (wi >= 0 && wi < static_cast<long>(g.w_in)) dxc[base + wi] += src[wo];
      }
    });
  };
  if (use_threads((positions * g.patch_size() > (1u << 15)) ? g.c_in : 0)) {
#pragma omp parallel for schedule(static)
    for (std::size_t ci = 0; ci < g.c_in; ++ci) channel(ci);
  } else {
    for (std::size_t ci = 0; ci < g.c_in; ++ci) channel(ci);
  }
}

void conv3d_forward(const ConvGeometry& g, const double* x, const double* weight,
                    const double* bias, double* y) {
  const std::size_t positions = g.out_positions();
  const std::size_t patch = g.patch_size();
  if (g.pointwise()) {
    gemm(g.c_out, positions, patch, weight, x, y, false);
  } else {
    thread_local std::vector<double> col;
    col.resize(patch * positions);
    im2col(g, x, col.data());
    gemm(g.c_out, positions, patch, weight, col.data(), y, false);
  }
  if (bias != nullptr) {
    for (std::size_t co = 0; co < g.c_out; ++co) {
      double* row = y + co * positions;
      const double bv = bias[co];
      for (std::size_t p = 0; p < positions; ++p) row[p] += bv;
    }
  }
}

void conv3d_backward_input(const ConvGeometry& g, const double* dy, const double* weight,
                           double* dx) {
  const std::size_t positions = g.out_positions();
  const std::size_t patch = g.patch_size();
  if (g.pointwise()) {
    gemm(patch, positions, g.c_out, weight, Op::Transpose, dy, Op::None, dx, true);
    return;
  }
  thread_local std::vector<double> dcol;
  dcol.resize(patch * positions);
  gemm(patch, positions, g.c_out, weight, Op::Transpose, dy, Op::None, dcol.data(), false);
  col2im(g, dcol.data(), dx);
}

void conv3d_backward_weight(const ConvGeometry& g, const double* dy, const double* x, double* dw,
                            double* db) {
  const std::size_t positions = g.out_positions();
  const std::size_t patch = g.patch_size();
  if (g.pointwise()) {
    gemm(g.c_out, patch, positions, dy, Op::None, x, Op::Transpose, dw, true);
  } else {
    thread_local std::vector<double> col;
    col.resize(patch * positions);
    im2col(g, x, col.data());
    gemm(g.c_out, patch, positions, dy, Op::None, col.data(), Op::Transpose, dw, true);
  }
  if (db != nullptr) {
    for (std::size_t co = 0; co < g.c_out; ++co) {
      const double* row = dy + co * positions;
      double s = 0.0;
      for (std::size_t p = 0; p < positions; ++p) s += row[p];
      db[co] += s;
    }
  }
}

namespace reference {

void gemm(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
          bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = accumulate ? c[i * n + j] : 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
      c[i * n + j] = s;
    }
  }
}

void conv3d_forward(const ConvGeometry& g, const double* x, const double* weight,
                    const double* bias, double* y) {
  const std::size_t to_n = g.t_out(), ho_n = g.h_out(), wo_n = g.w_out();
  const auto [kt, kh, kw] = g.kernel;
  for (std::size_t co = 0; co < g.c_out; ++co) {
    for (std::size_t to = 0; to < to_n; ++to) {
      for (std::size_t ho = 0; ho < ho_n; ++ho) {
        for (std::size_t wo = 0; wo < wo_n; ++wo) {
          double s = bias != nullptr ? bias[co] : 0.0;
          for (std::size_t ci = 0; ci < g.c_in; ++ci) {
            for (std::size_t dt = 0; dt < kt; ++dt) {
              const long ti = static_cast<long>(to * g.stride[0] + dt) - static_cast<long>(g.padding[0]);
              if (ti < 0 || ti >= static_cast<long>(g.t_in)) continue;
              for (std::size_t dh = 0; dh < kh; ++dh) {
                const long hi = static_cast<long>(ho * g.stride[1] + dh) - static_cast<long>(g.padding[1]);
                if (hi < 0 || hi >= static_cast<long>(g.h_in)) continue;
                for (std::size_t dw = 0; dw < kw; ++dw) {
                  const long wi = static_cast<long>(wo * g.stride[2] + dw) - static_cast<long>(g.padding[2]);
                  if (wi < 0 || wi >= static_cast<long>(g.w_in)) continue;
                  const double xv =
                      x[((ci * g.t_in + ti) * g.h_in + hi) * g.w_in + wi];
                  const double wv = weight[(((co * g.c_in + ci) * kt + dt) * kh + dh) * kw + dw];
                  s += xv * wv;
                }
              }
            }
          }
          y[((co * to_n + to) * ho_n + ho) * wo_n + wo] = s;
        }
      }
    }
  }
}

}  // namespace reference

}  // namespace sfc::kernels
