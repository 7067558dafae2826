#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace ulm {

/// Coordinate rows are (batch, x, y[, z], t): axis 0 is the batch index,
/// spatial axes follow, time is last. One row per active site.
using CoordMatrix =
    Eigen::Matrix<std::int32_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CoordRow = Eigen::Matrix<std::int32_t, 1, Eigen::Dynamic>;

/// Per-axis integer vectors (shape, stride, kernel size, ...). Length is the
/// full axis count including batch unless a function says otherwise.
using AxisVec = Eigen::Matrix<std::int32_t, Eigen::Dynamic, 1>;

template <typename Scalar>
using FeatureMatrix =
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

inline std::int64_t product(const AxisVec& v) {
  std::int64_t p = 1;
  for (Eigen::Index i = 0; i < v.size(); ++i) p *= v[i];
  return p;
}

inline AxisVec make_axes(std::initializer_list<std::int32_t> vals) {
  AxisVec v(static_cast<Eigen::Index>(vals.size()));
  Eigen::Index i = 0;
  for (auto x : vals) v[i++] = x;
  return v;
}

/// Row-major flat index of `idx` within bounds `shape` (same length).
inline std::int64_t flat_index(const AxisVec& idx, const AxisVec& shape) {
  std::int64_t f = 0;
  for (Eigen::Index a = 0; a < shape.size(); ++a) f = f * shape[a] + idx[a];
  return f;
}

/// Odometer over a row-major index space; returns false once exhausted.
inline bool next_index(AxisVec& idx, const AxisVec& shape) {
  for (Eigen::Index a = shape.size() - 1; a >= 0; --a) {
    if (++idx[a] < shape[a]) return true;
    idx[a] = 0;
  }
  return false;
}

}  // namespace ulm
