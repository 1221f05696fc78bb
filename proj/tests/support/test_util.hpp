#pragma once

// Test-only helpers: random fixtures and the central finite-difference
// oracle. Nothing here calls back into autograd to produce expected values.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "cvt/ops.hpp"
#include "cvt/tensor.hpp"

namespace cvt_test {
inline namespace CVT_PRECISION_NS {

using cvt::Real;
using cvt::Shape;
using cvt::Tensor;

inline Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, bool requires_grad = false,
                            double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  std::vector<Real> v(static_cast<std::size_t>(cvt::numel(shape)));
  for (auto& x : v) x = static_cast<Real>(d(rng));
  return Tensor::from_data(shape, std::move(v), requires_grad);
}

/// Scalar probe sum(y * r) with a fixed random r, so every output element
/// contributes a distinct weight to the gradient.
inline Tensor probe(const Tensor& y, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  return cvt::sum(cvt::mul(y, random_tensor(y.shape(), rng)));
}

inline double rel_err(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

struct GradCheck {
  double max_rel_err = 0;
  std::size_t checked = 0;
};

/// Compares the autograd gradient of loss_fn w.r.t. `leaf` against central
/// differences at `coords` (all coordinates when empty).
inline GradCheck check_gradient(const std::function<Tensor()>& loss_fn, Tensor leaf,
                                std::vector<std::size_t> coords = {}, double h = 1e-5,
                                double floor = 1e-6) {
  leaf.zero_grad();
  loss_fn().backward();
  std::vector<double> analytic(leaf.grad().begin(), leaf.grad().end());
  if (coords.empty()) {
    coords.resize(static_cast<std::size_t>(leaf.numel()));
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
  }
  GradCheck out;
  auto data = leaf.mutable_data();
  for (auto i : coords) {
    const Real orig = data[i];
    data[i] = static_cast<Real>(orig + h);
    const double up = loss_fn().item();
    data[i] = static_cast<Real>(orig - h);
    const double down = loss_fn().item();
    data[i] = orig;
    const double numeric = (up - down) / (2 * h);
    out.max_rel_err = std::max(out.max_rel_err, rel_err(analytic[i], numeric, floor));
    ++out.checked;
  }
  return out;
}

inline std::vector<std::size_t> sample_coords(std::size_t n, std::size_t count, std::mt19937_64& rng) {
  std::vector<std::size_t> c;
  if (n <= count) {
    for (std::size_t i = 0; i < n; ++i) c.push_back(i);
    return c;
  }
  std::uniform_int_distribution<std::size_t> d(0, n - 1);
  for (std::size_t i = 0; i < count; ++i) c.push_back(d(rng));
  return c;
}

/// max |a - b| / max |b|
inline double max_rel_diff(std::span<const Real> a, std::span<const double> b) {
  double diff = 0, scale = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(static_cast<double>(a[i]) - b[i]));
    scale = std::max(scale, std::abs(b[i]));
  }
  return scale > 0 ? diff / scale : diff;
}

}  // namespace CVT_PRECISION_NS
}  // namespace cvt_test
