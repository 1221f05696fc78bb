#pragma once

// Scalar type selection. The library is compiled once per precision; the
// inline namespace keeps the f32 and f64 builds distinct at link time so both
// can live in one executable.

#ifdef CVT_REAL_DOUBLE
#define CVT_PRECISION_NS f64
#else
#define CVT_PRECISION_NS f32
#endif

#define CVT_BEGIN_NAMESPACE \
  namespace cvt {           \
  inline namespace CVT_PRECISION_NS {
#define CVT_END_NAMESPACE \
  }                       \
  }

CVT_BEGIN_NAMESPACE

#ifdef CVT_REAL_DOUBLE
using Real = double;
#else
using Real = float;
#endif

inline constexpr const char* kPrecisionName = sizeof(Real) == 8 ? "f64" : "f32";

CVT_END_NAMESPACE
