#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "cvt/tensor.hpp"

CVT_BEGIN_NAMESPACE

// Elementwise and reductions.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, Real factor);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor gelu(const Tensor& a);

// Layout.
Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<int>& axes);
Tensor transpose(const Tensor& a, int axis0, int axis1);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& a, int axis, std::int64_t start, std::int64_t length);

/// [M x K] . [K x N] -> [M x N]
Tensor matmul(const Tensor& a, const Tensor& b);
/// Batched: [B x M x K] . [B x K x N], or [B x N x K] when transpose_b.
Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false);
/// x [... x in] . weight [in x out] (+ bias [out]) -> [... x out]
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias = {});

struct Conv2dOptions {
  int stride = 1;
  int padding = 0;
  int groups = 1;
};

/// Output extent of a convolution along one axis; throws GeometryError when
/// it would be < 1.
std::int64_t conv_output_extent(std::int64_t in, int kernel, int stride, int padding,
                                const char* axis);

/// x [B x Cin x H x W], weight [Cout x Cin/groups x kh x kw], bias [Cout] or undefined.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, const Conv2dOptions& opt);

/// Softmax along `axis` with max subtraction.
Tensor softmax(const Tensor& x, int axis = -1);

/// Normalizes over the last axis; gamma and beta have that axis' extent.
Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Real eps = 1e-5);

enum class Mode { train, eval };

struct BatchNormBuffers {
  Tensor running_mean;  // [C], no grad
  Tensor running_var;   // [C], no grad
};

/// x [B x C x H x W]. Train mode normalizes with the (biased) batch moments
/// and folds the batch mean and unbiased variance into the running buffers
/// with `momentum`; eval mode reads the buffers only.
Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   BatchNormBuffers& buffers, Mode mode, Real momentum = 0.1, Real eps = 1e-5);

/// Mean over the batch of -log softmax(logits)[label]. logits [B x K].
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

CVT_END_NAMESPACE
