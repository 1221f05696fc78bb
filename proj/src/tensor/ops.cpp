#include "cvt/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "parallel.hpp"

CVT_BEGIN_NAMESPACE

namespace {

using detail::parallel_for;
using GradIn = std::span<const std::span<Real>>;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

int normalize_axis(int axis, int rank, const char* op) {
  int k = axis < 0 ? axis + rank : axis;
  if (k < 0 || k >= rank) {
    throw IndexError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for rank " +
                     std::to_string(rank));
  }
  return k;
}

std::int64_t prod(const Shape& s, std::size_t begin, std::size_t end) {
  std::int64_t p = 1;
  for (std::size_t i = begin; i < end; ++i) p *= s[i];
  return p;
}

// C[M x N] += A[M x K] . B[K x N]
void gemm_nn(std::int64_t M, std::int64_t N, std::int64_t K, const Real* A, const Real* B, Real* C) {
  parallel_for(M, 16, [&](std::int64_t i0, std::int64_t i1) {
    for (std::int64_t i = i0; i < i1; ++i) {
      Real* c = C + i * N;
      const Real* a = A + i * K;
      for (std::int64_t k = 0; k < K; ++k) {
        const Real av = a[k];
        const Real* b = B + k * N;
        for (std::int64_t j = 0; j < N; ++j) c[j] += av * b[j];
      }
    }
  });
}

// C[M x N] += A[M x K] . B[N x K]^T
void gemm_nt(std::int64_t M, std::int64_t N, std::int64_t K, const Real* A, const Real* B, Real* C) {
  parallel_for(M, 16, [&](std::int64_t i0, std::int64_t i1) {
    for (std::int64_t i = i0; i < i1; ++i) {
      const Real* a = A + i * K;
      Real* c = C + i * N;
      for (std::int64_t j = 0; j < N; ++j) {
        const Real* b = B + j * K;
        Real acc = 0;
        for (std::int64_t k = 0; k < K; ++k) acc += a[k] * b[k];
        c[j] += acc;
      }
    }
  });
}

// C[M x N] += A[K x M]^T . B[K x N]
void gemm_tn(std::int64_t M, std::int64_t N, std::int64_t K, const Real* A, const Real* B, Real* C) {
  parallel_for(M, 16, [&](std::int64_t i0, std::int64_t i1) {
    for (std::int64_t k = 0; k < K; ++k) {
      const Real* a = A + k * M;
      const Real* b = B + k * N;
      for (std::int64_t i = i0; i < i1; ++i) {
        const Real av = a[i];
        Real* c = C + i * N;
        for (std::int64_t j = 0; j < N; ++j) c[j] += av * b[j];
      }
    }
  });
}

void permute_copy(const Real* src, const Shape& in_shape, const std::vector<int>& axes, Real* dst) {
  const int r = static_cast<int>(in_shape.size());
  std::vector<std::int64_t> in_stride(r, 1);
  for (int i = r - 2; i >= 0; --i) in_stride[i] = in_stride[i + 1] * in_shape[i + 1];
  Shape out_shape(r);
  std::vector<std::int64_t> step(r);
  for (int i = 0; i < r; ++i) {
    out_shape[i] = in_shape[axes[i]];
    step[i] = in_stride[axes[i]];
  }
  const std::int64_t n = numel(in_shape);
  std::vector<std::int64_t> idx(r, 0);
  std::int64_t off = 0;
  for (std::int64_t o = 0; o < n; ++o) {
    dst[o] = src[off];
    for (int d = r - 1; d >= 0; --d) {
      if (++idx[d] < out_shape[d]) {
        off += step[d];
        break;
      }
      off -= step[d] * (out_shape[d] - 1);
      idx[d] = 0;
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  auto x = a.data(), y = b.data();
  std::vector<Real> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b},
                             [](std::span<const Real> g, GradIn gin) {
                               for (auto& d : gin) {
                                 for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
                               }
                             },
                             "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  auto x = a.data(), y = b.data();
  std::vector<Real> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b},
                             [](std::span<const Real> g, GradIn gin) {
                               for (std::size_t i = 0; i < gin[0].size(); ++i) gin[0][i] += g[i];
                               for (std::size_t i = 0; i < gin[1].size(); ++i) gin[1][i] -= g[i];
                             },
                             "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  auto x = a.data(), y = b.data();
  std::vector<Real> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b},
                             [a, b](std::span<const Real> g, GradIn gin) {
                               auto x = a.data(), y = b.data();
                               for (std::size_t i = 0; i < gin[0].size(); ++i) gin[0][i] += g[i] * y[i];
                               for (std::size_t i = 0; i < gin[1].size(); ++i) gin[1][i] += g[i] * x[i];
                             },
                             "mul");
}

Tensor scale(const Tensor& a, Real factor) {
  auto x = a.data();
  std::vector<Real> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
  return Tensor::make_result(a.shape(), std::move(out), {a},
                             [factor](std::span<const Real> g, GradIn gin) {
                               for (std::size_t i = 0; i < gin[0].size(); ++i) gin[0][i] += g[i] * factor;
                             },
                             "scale");
}

Tensor sum(const Tensor& a) {
  Real s = 0;
  for (Real v : a.data()) s += v;
  return Tensor::make_result(Shape{1}, {s}, {a},
                             [](std::span<const Real> g, GradIn gin) {
                               for (auto& v : gin[0]) v += g[0];
                             },
                             "sum");
}

Tensor mean(const Tensor& a) {
  const Real inv = Real(1) / static_cast<Real>(a.numel());
  Real s = 0;
  for (Real v : a.data()) s += v;
  return Tensor::make_result(Shape{1}, {s * inv}, {a},
                             [inv](std::span<const Real> g, GradIn gin) {
                               for (auto& v : gin[0]) v += g[0] * inv;
                             },
                             "mean");
}

Tensor gelu(const Tensor& a) {
  constexpr Real kInvSqrt2 = Real(0.70710678118654752440);
  constexpr Real kInvSqrt2Pi = Real(0.39894228040143267794);
  auto x = a.data();
  std::vector<Real> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = Real(0.5) * x[i] * (Real(1) + std::erf(x[i] * kInvSqrt2));
  }
  return Tensor::make_result(
      a.shape(), std::move(out), {a},
      [a](std::span<const Real> g, GradIn gin) {
        auto x = a.data();
        for (std::size_t i = 0; i < gin[0].size(); ++i) {
          Real cdf = Real(0.5) * (Real(1) + std::erf(x[i] * kInvSqrt2));
          Real pdf = kInvSqrt2Pi * std::exp(Real(-0.5) * x[i] * x[i]);
          gin[0][i] += g[i] * (cdf + x[i] * pdf);
        }
      },
      "gelu");
}

// ---------------------------------------------------------------------------
// Layout

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<Real> out(a.data().begin(), a.data().end());
  return Tensor::make_result(std::move(shape), std::move(out), {a},
                             [](std::span<const Real> g, GradIn gin) {
                               for (std::size_t i = 0; i < gin[0].size(); ++i) gin[0][i] += g[i];
                             },
                             "reshape");
}

Tensor permute(const Tensor& a, const std::vector<int>& axes) {
  const Shape& in = a.shape();
  const int r = static_cast<int>(in.size());
  if (static_cast<int>(axes.size()) != r) {
    throw DimensionError("permute: " + std::to_string(axes.size()) + " axes for " + shape_str(in));
  }
  std::vector<int> inverse(r, -1);
  for (int i = 0; i < r; ++i) {
    int ax = axes[i];
    if (ax < 0 || ax >= r || inverse[ax] != -1) throw IndexError("permute: invalid axis order");
    inverse[ax] = i;
  }
  Shape out_shape(r);
  for (int i = 0; i < r; ++i) out_shape[i] = in[axes[i]];
  std::vector<Real> out(a.data().size());
  permute_copy(a.data().data(), in, axes, out.data());
  return Tensor::make_result(out_shape, std::move(out), {a},
                             [out_shape, inverse](std::span<const Real> g, GradIn gin) {
                               if (gin[0].empty()) return;
                               std::vector<Real> back(g.size());
                               permute_copy(g.data(), out_shape, inverse, back.data());
                               for (std::size_t i = 0; i < back.size(); ++i) gin[0][i] += back[i];
                             },
                             "permute");
}

Tensor transpose(const Tensor& a, int axis0, int axis1) {
  std::vector<int> axes(a.rank());
  std::iota(axes.begin(), axes.end(), 0);
  std::swap(axes[normalize_axis(axis0, a.rank(), "transpose")],
            axes[normalize_axis(axis1, a.rank(), "transpose")]);
  return permute(a, axes);
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  const Shape& first = parts[0].shape();
  const int k = normalize_axis(axis, static_cast<int>(first.size()), "concat");
  Shape out_shape = first;
  out_shape[k] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) {
      if (static_cast<int>(i) != k && s[i] != first[i]) ok = false;
    }
    if (!ok) {
      throw DimensionError("concat: " + shape_str(s) + " incompatible with " + shape_str(first) +
                           " along axis " + std::to_string(k));
    }
    out_shape[k] += s[k];
  }
  const std::int64_t outer = prod(first, 0, k);
  const std::int64_t inner = prod(first, k + 1, first.size());
  const std::int64_t out_row = out_shape[k] * inner;
  std::vector<Real> out(static_cast<std::size_t>(numel(out_shape)));
  std::vector<std::int64_t> offsets;
  std::int64_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::int64_t row = p.shape()[k] * inner;
    auto src = p.data();
    for (std::int64_t o = 0; o < outer; ++o) {
      std::copy_n(src.data() + o * row, row, out.data() + o * out_row + off);
    }
    off += row;
  }
  std::vector<std::int64_t> rows;
  for (const auto& p : parts) rows.push_back(p.shape()[k] * inner);
  return Tensor::make_result(out_shape, std::move(out), parts,
                             [outer, out_row, offsets, rows](std::span<const Real> g, GradIn gin) {
                               for (std::size_t p = 0; p < gin.size(); ++p) {
                                 if (gin[p].empty()) continue;
                                 for (std::int64_t o = 0; o < outer; ++o) {
                                   const Real* src = g.data() + o * out_row + offsets[p];
                                   Real* dst = gin[p].data() + o * rows[p];
                                   for (std::int64_t i = 0; i < rows[p]; ++i) dst[i] += src[i];
                                 }
                               }
                             },
                             "concat");
}

Tensor slice(const Tensor& a, int axis, std::int64_t start, std::int64_t length) {
  const Shape& in = a.shape();
  const int k = normalize_axis(axis, a.rank(), "slice");
  if (start < 0 || length < 1 || start + length > in[k]) {
    throw IndexError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") out of bounds for " + shape_str(in) + " axis " + std::to_string(k));
  }
  Shape out_shape = in;
  out_shape[k] = length;
  const std::int64_t outer = prod(in, 0, k);
  const std::int64_t inner = prod(in, k + 1, in.size());
  const std::int64_t in_row = in[k] * inner, out_row = length * inner, off = start * inner;
  std::vector<Real> out(static_cast<std::size_t>(outer * out_row));
  auto src = a.data();
  for (std::int64_t o = 0; o < outer; ++o) {
    std::copy_n(src.data() + o * in_row + off, out_row, out.data() + o * out_row);
  }
  return Tensor::make_result(out_shape, std::move(out), {a},
                             [outer, in_row, out_row, off](std::span<const Real> g, GradIn gin) {
                               if (gin[0].empty()) return;
                               for (std::int64_t o = 0; o < outer; ++o) {
                                 Real* dst = gin[0].data() + o * in_row + off;
                                 const Real* s = g.data() + o * out_row;
                                 for (std::int64_t i = 0; i < out_row; ++i) dst[i] += s[i];
                               }
                             },
                             "slice");
}

// ---------------------------------------------------------------------------
// Products

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::int64_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  std::vector<Real> out(static_cast<std::size_t>(M * N), Real(0));
  gemm_nn(M, N, K, a.data().data(), b.data().data(), out.data());
  return Tensor::make_result(Shape{M, N}, std::move(out), {a, b},
                             [a, b, M, N, K](std::span<const Real> g, GradIn gin) {
                               if (!gin[0].empty()) gemm_nt(M, K, N, g.data(), b.data().data(), gin[0].data());
                               if (!gin[1].empty()) gemm_tn(K, N, M, a.data().data(), g.data(), gin[1].data());
                             },
                             "matmul");
}

Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) ||
      a.dim(2) != (transpose_b ? b.dim(2) : b.dim(1))) {
    throw DimensionError(std::string("bmm") + (transpose_b ? " (transposed rhs)" : "") +
                         ": incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::int64_t B = a.dim(0), M = a.dim(1), K = a.dim(2);
  const std::int64_t N = transpose_b ? b.dim(1) : b.dim(2);
  std::vector<Real> out(static_cast<std::size_t>(B * M * N), Real(0));
  for (std::int64_t i = 0; i < B; ++i) {
    const Real* pa = a.data().data() + i * M * K;
    const Real* pb = b.data().data() + i * K * N;
    Real* pc = out.data() + i * M * N;
    if (transpose_b) {
      gemm_nt(M, N, K, pa, pb, pc);
    } else {
      gemm_nn(M, N, K, pa, pb, pc);
    }
  }
  return Tensor::make_result(
      Shape{B, M, N}, std::move(out), {a, b},
      [a, b, B, M, N, K, transpose_b](std::span<const Real> g, GradIn gin) {
        for (std::int64_t i = 0; i < B; ++i) {
          const Real* pa = a.data().data() + i * M * K;
          const Real* pb = b.data().data() + i * K * N;
          const Real* pg = g.data() + i * M * N;
          if (!gin[0].empty()) {
            Real* da = gin[0].data() + i * M * K;
            if (transpose_b) {
              gemm_nn(M, K, N, pg, pb, da);
            } else {
              gemm_nt(M, K, N, pg, pb, da);
            }
          }
          if (!gin[1].empty()) {
            Real* db = gin[1].data() + i * K * N;
            if (transpose_b) {
              gemm_tn(N, K, M, pg, pa, db);
            } else {
              gemm_tn(K, N, M, pa, pg, db);
            }
          }
        }
      },
      "bmm");
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (weight.rank() != 2 || x.dim(-1) != weight.dim(0)) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " vs weight " +
                         shape_str(weight.shape()));
  }
  const std::int64_t in = weight.dim(0), out_dim = weight.dim(1);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out_dim)) {
    throw DimensionError("linear: bias " + shape_str(bias.shape()) + " vs weight " +
                         shape_str(weight.shape()));
  }
  const std::int64_t rows = x.numel() / in;
  std::vector<Real> out(static_cast<std::size_t>(rows * out_dim), Real(0));
  if (bias.defined()) {
    auto bv = bias.data();
    for (std::int64_t r = 0; r < rows; ++r) std::copy(bv.begin(), bv.end(), out.begin() + r * out_dim);
  }
  gemm_nn(rows, out_dim, in, x.data().data(), weight.data().data(), out.data());
  Shape out_shape = x.shape();
  out_shape.back() = out_dim;
  std::vector<Tensor> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return Tensor::make_result(
      std::move(out_shape), std::move(out), inputs,
      [x, weight, rows, in, out_dim](std::span<const Real> g, GradIn gin) {
        if (!gin[0].empty()) gemm_nt(rows, in, out_dim, g.data(), weight.data().data(), gin[0].data());
        if (!gin[1].empty()) gemm_tn(in, out_dim, rows, x.data().data(), g.data(), gin[1].data());
        if (gin.size() > 2 && !gin[2].empty()) {
          for (std::int64_t r = 0; r < rows; ++r) {
            const Real* gr = g.data() + r * out_dim;
            for (std::int64_t j = 0; j < out_dim; ++j) gin[2][j] += gr[j];
          }
        }
      },
      "linear");
}

// ---------------------------------------------------------------------------
// Convolution

std::int64_t conv_output_extent(std::int64_t in, int kernel, int stride, int padding, const char* axis) {
  if (kernel < 1) throw ContractError("conv: kernel size must be >= 1");
  if (stride < 1) throw ContractError("conv: stride must be >= 1");
  if (padding < 0) throw ContractError("conv: padding must be >= 0");
  const std::int64_t span = in + 2 * static_cast<std::int64_t>(padding) - kernel;
  if (span < 0) {
    throw GeometryError(axis, "input extent " + std::to_string(in) + " with padding " +
                                  std::to_string(padding) + " is smaller than kernel " +
                                  std::to_string(kernel));
  }
  return span / stride + 1;
}

namespace {

// First and one-past-last output column whose input column o*stride + k - pad
// lies in [0, in).
inline void valid_range(std::int64_t out, std::int64_t in, int k, int stride, int pad,
                        std::int64_t& lo, std::int64_t& hi) {
  std::int64_t shift = static_cast<std::int64_t>(pad) - k;
  lo = shift > 0 ? (shift + stride - 1) / stride : 0;
  std::int64_t last = in - 1 + pad - k;  // o*stride <= last
  hi = last < 0 ? 0 : std::min(out, last / stride + 1);
  if (hi < lo) hi = lo;
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, const Conv2dOptions& opt) {
  if (x.rank() != 4 || weight.rank() != 4) {
    throw DimensionError("conv2d: expected 4-d input and weight, got " + shape_str(x.shape()) +
                         " and " + shape_str(weight.shape()));
  }
  const std::int64_t B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::int64_t Cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  const int G = opt.groups;
  if (G < 1 || Cin % G != 0 || Cout % G != 0) {
    throw ContractError("conv2d: channels " + std::to_string(Cin) + "->" + std::to_string(Cout) +
                        " not divisible by groups " + std::to_string(G));
  }
  const std::int64_t cin_g = Cin / G, cout_g = Cout / G;
  if (weight.dim(1) != cin_g) {
    throw DimensionError("conv2d: weight " + shape_str(weight.shape()) + " does not match input " +
                         shape_str(x.shape()) + " with groups " + std::to_string(G));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != Cout)) {
    throw DimensionError("conv2d: bias " + shape_str(bias.shape()) + " for " + std::to_string(Cout) +
                         " output channels");
  }
  const int s = opt.stride, p = opt.padding;
  const std::int64_t OH = conv_output_extent(H, static_cast<int>(kh), s, p, "height");
  const std::int64_t OW = conv_output_extent(W, static_cast<int>(kw), s, p, "width");

  std::vector<Real> out(static_cast<std::size_t>(B * Cout * OH * OW), Real(0));
  const Real* xd = x.data().data();
  const Real* wd = weight.data().data();
  parallel_for(B * Cout, 1, [&](std::int64_t i0, std::int64_t i1) {
    for (std::int64_t bo = i0; bo < i1; ++bo) {
      const std::int64_t b = bo / Cout, oc = bo % Cout, g = oc / cout_g;
      Real* o = out.data() + bo * OH * OW;
      if (bias.defined()) std::fill(o, o + OH * OW, bias.data()[oc]);
      for (std::int64_t icl = 0; icl < cin_g; ++icl) {
        const Real* xp = xd + (b * Cin + g * cin_g + icl) * H * W;
        const Real* wp = wd + (oc * cin_g + icl) * kh * kw;
        for (std::int64_t ky = 0; ky < kh; ++ky) {
          std::int64_t oy0, oy1;
          valid_range(OH, H, static_cast<int>(ky), s, p, oy0, oy1);
          for (std::int64_t kx = 0; kx < kw; ++kx) {
            std::int64_t ox0, ox1;
            valid_range(OW, W, static_cast<int>(kx), s, p, ox0, ox1);
            const Real wv = wp[ky * kw + kx];
            for (std::int64_t oy = oy0; oy < oy1; ++oy) {
              const Real* row = xp + (oy * s + ky - p) * W + kx - p;
              Real* orow = o + oy * OW;
              for (std::int64_t ox = ox0; ox < ox1; ++ox) orow[ox] += wv * row[ox * s];
            }
          }
        }
      }
    }
  });

  std::vector<Tensor> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return Tensor::make_result(
      Shape{B, Cout, OH, OW}, std::move(out), inputs,
      [=](std::span<const Real> g, GradIn gin) {
        const Real* xd = x.data().data();
        const Real* wd = weight.data().data();
        if (!gin[0].empty()) {
          Real* dx = gin[0].data();
          parallel_for(B, 1, [&](std::int64_t b0, std::int64_t b1) {
            for (std::int64_t b = b0; b < b1; ++b) {
              for (std::int64_t oc = 0; oc < Cout; ++oc) {
                const std::int64_t grp = oc / cout_g;
                const Real* go = g.data() + (b * Cout + oc) * OH * OW;
                for (std::int64_t icl = 0; icl < cin_g; ++icl) {
                  Real* dxp = dx + (b * Cin + grp * cin_g + icl) * H * W;
                  const Real* wp = wd + (oc * cin_g + icl) * kh * kw;
                  for (std::int64_t ky = 0; ky < kh; ++ky) {
                    std::int64_t oy0, oy1;
                    valid_range(OH, H, static_cast<int>(ky), s, p, oy0, oy1);
                    for (std::int64_t kx = 0; kx < kw; ++kx) {
                      std::int64_t ox0, ox1;
                      valid_range(OW, W, static_cast<int>(kx), s, p, ox0, ox1);
                      const Real wv = wp[ky * kw + kx];
                      for (std::int64_t oy = oy0; oy < oy1; ++oy) {
                        Real* row = dxp + (oy * s + ky - p) * W + kx - p;
                        const Real* grow = go + oy * OW;
                        for (std::int64_t ox = ox0; ox < ox1; ++ox) row[ox * s] += wv * grow[ox];
                      }
                    }
                  }
                }
              }
            }
          });
        }
        if (!gin[1].empty()) {
          Real* dw = gin[1].data();
          parallel_for(Cout, 1, [&](std::int64_t c0, std::int64_t c1) {
            for (std::int64_t oc = c0; oc < c1; ++oc) {
              const std::int64_t grp = oc / cout_g;
              for (std::int64_t b = 0; b < B; ++b) {
                const Real* go = g.data() + (b * Cout + oc) * OH * OW;
                for (std::int64_t icl = 0; icl < cin_g; ++icl) {
                  const Real* xp = xd + (b * Cin + grp * cin_g + icl) * H * W;
                  Real* dwp = dw + (oc * cin_g + icl) * kh * kw;
                  for (std::int64_t ky = 0; ky < kh; ++ky) {
                    std::int64_t oy0, oy1;
                    valid_range(OH, H, static_cast<int>(ky), s, p, oy0, oy1);
                    for (std::int64_t kx = 0; kx < kw; ++kx) {
                      std::int64_t ox0, ox1;
                      valid_range(OW, W, static_cast<int>(kx), s, p, ox0, ox1);
                      Real acc = 0;
                      for (std::int64_t oy = oy0; oy < oy1; ++oy) {
                        const Real* row = xp + (oy * s + ky - p) * W + kx - p;
                        const Real* grow = go + oy * OW;
                        for (std::int64_t ox = ox0; ox < ox1; ++ox) acc += grow[ox] * row[ox * s];
                      }
                      dwp[ky * kw + kx] += acc;
                    }
                  }
                }
              }
            }
          });
        }
        if (gin.size() > 2 && !gin[2].empty()) {
          for (std::int64_t b = 0; b < B; ++b) {
            for (std::int64_t oc = 0; oc < Cout; ++oc) {
              const Real* go = g.data() + (b * Cout + oc) * OH * OW;
              Real acc = 0;
              for (std::int64_t i = 0; i < OH * OW; ++i) acc += go[i];
              gin[2][oc] += acc;
            }
          }
        }
      },
      "conv2d");
}

// ---------------------------------------------------------------------------
// Normalization and softmax

Tensor softmax(const Tensor& x, int axis) {
  const Shape& s = x.shape();
  const int k = normalize_axis(axis, x.rank(), "softmax");
  const std::int64_t outer = prod(s, 0, k), n = s[k], inner = prod(s, k + 1, s.size());
  auto in = x.data();
  std::vector<Real> out(in.size());
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t i = 0; i < inner; ++i) {
      const std::int64_t base = o * n * inner + i;
      Real mx = in[base];
      for (std::int64_t j = 1; j < n; ++j) mx = std::max(mx, in[base + j * inner]);
      Real z = 0;
      for (std::int64_t j = 0; j < n; ++j) {
        Real e = std::exp(in[base + j * inner] - mx);
        out[base + j * inner] = e;
        z += e;
      }
      const Real inv = Real(1) / z;
      for (std::int64_t j = 0; j < n; ++j) out[base + j * inner] *= inv;
    }
  }
  std::vector<Real> y = out;
  return Tensor::make_result(s, std::move(out), {x},
                             [y = std::move(y), outer, n, inner](std::span<const Real> g, GradIn gin) {
                               if (gin[0].empty()) return;
                               for (std::int64_t o = 0; o < outer; ++o) {
                                 for (std::int64_t i = 0; i < inner; ++i) {
                                   const std::int64_t base = o * n * inner + i;
                                   Real dot = 0;
                                   for (std::int64_t j = 0; j < n; ++j) {
                                     dot += g[base + j * inner] * y[base + j * inner];
                                   }
                                   for (std::int64_t j = 0; j < n; ++j) {
                                     const auto idx = base + j * inner;
                                     gin[0][idx] += y[idx] * (g[idx] - dot);
                                   }
                                 }
                               }
                             },
                             "softmax");
}

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Real eps) {
  const std::int64_t C = x.dim(-1);
  if (gamma.numel() != C || beta.numel() != C) {
    throw DimensionError("layernorm: affine " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                         " for input " + shape_str(x.shape()));
  }
  const std::int64_t rows = x.numel() / C;
  auto in = x.data();
  auto ga = gamma.data(), be = beta.data();
  std::vector<Real> out(in.size()), xhat(in.size()), rstd(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    const Real* xr = in.data() + r * C;
    Real m = 0;
    for (std::int64_t c = 0; c < C; ++c) m += xr[c];
    m /= static_cast<Real>(C);
    Real v = 0;
    for (std::int64_t c = 0; c < C; ++c) v += (xr[c] - m) * (xr[c] - m);
    v /= static_cast<Real>(C);
    const Real rs = Real(1) / std::sqrt(v + eps);
    rstd[r] = rs;
    for (std::int64_t c = 0; c < C; ++c) {
      const Real h = (xr[c] - m) * rs;
      xhat[r * C + c] = h;
      out[r * C + c] = h * ga[c] + be[c];
    }
  }
  return Tensor::make_result(
      x.shape(), std::move(out), {x, gamma, beta},
      [gamma, xhat = std::move(xhat), rstd = std::move(rstd), rows, C](std::span<const Real> g, GradIn gin) {
        auto ga = gamma.data();
        std::vector<Real> dxh(static_cast<std::size_t>(C));
        for (std::int64_t r = 0; r < rows; ++r) {
          const Real* gr = g.data() + r * C;
          const Real* hr = xhat.data() + r * C;
          if (!gin[1].empty()) {
            for (std::int64_t c = 0; c < C; ++c) gin[1][c] += gr[c] * hr[c];
          }
          if (!gin[2].empty()) {
            for (std::int64_t c = 0; c < C; ++c) gin[2][c] += gr[c];
          }
          if (gin[0].empty()) continue;
          Real s1 = 0, s2 = 0;
          for (std::int64_t c = 0; c < C; ++c) {
            dxh[c] = gr[c] * ga[c];
            s1 += dxh[c];
            s2 += dxh[c] * hr[c];
          }
          s1 /= static_cast<Real>(C);
          s2 /= static_cast<Real>(C);
          Real* dx = gin[0].data() + r * C;
          for (std::int64_t c = 0; c < C; ++c) dx[c] += rstd[r] * (dxh[c] - s1 - hr[c] * s2);
        }
      },
      "layernorm");
}

Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormBuffers& buffers,
                   Mode mode, Real momentum, Real eps) {
  if (x.rank() != 4) throw DimensionError("batchnorm2d: expected 4-d input, got " + shape_str(x.shape()));
  const std::int64_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (gamma.numel() != C || beta.numel() != C || buffers.running_mean.numel() != C ||
      buffers.running_var.numel() != C) {
    throw DimensionError("batchnorm2d: parameters sized for " + std::to_string(gamma.numel()) +
                         " channels, input " + shape_str(x.shape()));
  }
  const std::int64_t n = B * HW;
  auto in = x.data();
  auto ga = gamma.data(), be = beta.data();
  std::vector<Real> mu(static_cast<std::size_t>(C)), rstd(static_cast<std::size_t>(C));
  if (mode == Mode::train) {
    auto rm = buffers.running_mean.mutable_data();
    auto rv = buffers.running_var.mutable_data();
    for (std::int64_t c = 0; c < C; ++c) {
      Real m = 0;
      for (std::int64_t b = 0; b < B; ++b) {
        const Real* p = in.data() + (b * C + c) * HW;
        for (std::int64_t i = 0; i < HW; ++i) m += p[i];
      }
      m /= static_cast<Real>(n);
      Real v = 0;
      for (std::int64_t b = 0; b < B; ++b) {
        const Real* p = in.data() + (b * C + c) * HW;
        for (std::int64_t i = 0; i < HW; ++i) v += (p[i] - m) * (p[i] - m);
      }
      const Real unbiased = n > 1 ? v / static_cast<Real>(n - 1) : v;
      v /= static_cast<Real>(n);
      mu[c] = m;
      rstd[c] = Real(1) / std::sqrt(v + eps);
      rm[c] = (Real(1) - momentum) * rm[c] + momentum * m;
      rv[c] = (Real(1) - momentum) * rv[c] + momentum * unbiased;
    }
  } else {
    auto rm = buffers.running_mean.data();
    auto rv = buffers.running_var.data();
    for (std::int64_t c = 0; c < C; ++c) {
      mu[c] = rm[c];
      rstd[c] = Real(1) / std::sqrt(rv[c] + eps);
    }
  }
  std::vector<Real> out(in.size()), xhat(in.size());
  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t c = 0; c < C; ++c) {
      const std::int64_t base = (b * C + c) * HW;
      for (std::int64_t i = 0; i < HW; ++i) {
        const Real h = (in[base + i] - mu[c]) * rstd[c];
        xhat[base + i] = h;
        out[base + i] = h * ga[c] + be[c];
      }
    }
  }
  const bool batch_stats = mode == Mode::train;
  return Tensor::make_result(
      x.shape(), std::move(out), {x, gamma, beta},
      [gamma, xhat = std::move(xhat), rstd = std::move(rstd), B, C, HW, n, batch_stats](
          std::span<const Real> g, GradIn gin) {
        auto ga = gamma.data();
        for (std::int64_t c = 0; c < C; ++c) {
          Real sg = 0, sgh = 0;
          for (std::int64_t b = 0; b < B; ++b) {
            const std::int64_t base = (b * C + c) * HW;
            for (std::int64_t i = 0; i < HW; ++i) {
              sg += g[base + i];
              sgh += g[base + i] * xhat[base + i];
            }
          }
          if (!gin[1].empty()) gin[1][c] += sgh;
          if (!gin[2].empty()) gin[2][c] += sg;
          if (gin[0].empty()) continue;
          const Real k = ga[c] * rstd[c];
          const Real mg = sg / static_cast<Real>(n), mgh = sgh / static_cast<Real>(n);
          for (std::int64_t b = 0; b < B; ++b) {
            const std::int64_t base = (b * C + c) * HW;
            for (std::int64_t i = 0; i < HW; ++i) {
              const auto idx = base + i;
              gin[0][idx] += batch_stats ? k * (g[idx] - mg - xhat[idx] * mgh) : k * g[idx];
            }
          }
        }
      },
      "batchnorm2d");
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != static_cast<std::int64_t>(labels.size())) {
    throw DimensionError("cross_entropy: logits " + shape_str(logits.shape()) + " for " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::int64_t B = logits.dim(0), K = logits.dim(1);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= K) {
      throw IndexError("cross_entropy: label " + std::to_string(labels[i]) + " at position " +
                       std::to_string(i) + " outside [0, " + std::to_string(K) + ")");
    }
  }
  auto z = logits.data();
  std::vector<Real> prob(z.size());
  Real loss = 0;
  for (std::int64_t b = 0; b < B; ++b) {
    const Real* zr = z.data() + b * K;
    Real mx = *std::max_element(zr, zr + K);
    Real s = 0;
    for (std::int64_t k = 0; k < K; ++k) s += std::exp(zr[k] - mx);
    const Real lse = mx + std::log(s);
    for (std::int64_t k = 0; k < K; ++k) prob[b * K + k] = std::exp(zr[k] - lse);
    loss += lse - zr[labels[b]];
  }
  loss /= static_cast<Real>(B);
  std::vector<int> lab(labels.begin(), labels.end());
  return Tensor::make_result(Shape{1}, {loss}, {logits},
                             [prob = std::move(prob), lab = std::move(lab), B, K](std::span<const Real> g,
                                                                                  GradIn gin) {
                               if (gin[0].empty()) return;
                               const Real f = g[0] / static_cast<Real>(B);
                               for (std::int64_t b = 0; b < B; ++b) {
                                 for (std::int64_t k = 0; k < K; ++k) {
                                   Real d = prob[b * K + k] - (k == lab[b] ? Real(1) : Real(0));
                                   gin[0][b * K + k] += f * d;
                                 }
                               }
                             },
                             "cross_entropy");
}

CVT_END_NAMESPACE
