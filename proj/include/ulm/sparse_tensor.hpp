#pragma once

#include "ulm/io_util.hpp"
#include "ulm/types.hpp"

#include <cstdint>
#include <stdexcept>
#include <utility>
#include <vector>

namespace ulm {

/// Open-addressing hash over the rows of a coordinate matrix. Built once per
/// tensor; lookups drive kernel-map construction so they stay O(1) per probe
/// regardless of the dense volume. The table stores row indices only, so the
/// owning matrix is passed back in on every lookup and the index survives
/// moves of its owner.
class CoordIndex {
 public:
  CoordIndex() = default;

  explicit CoordIndex(const CoordMatrix& coords) { build(coords); }

  void build(const CoordMatrix& coords) {
    const std::size_t n = static_cast<std::size_t>(coords.rows());
    std::size_t cap = 16;
    while (cap < 2 * n + 1) cap <<= 1;
    mask_ = cap - 1;
    slots_.assign(cap, kEmpty);
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t slot = hash_any(coords.row(static_cast<Eigen::Index>(i))) & mask_;
      for (;;) {
        if (slots_[slot] == kEmpty) {
          slots_[slot] = static_cast<std::int64_t>(i);
          break;
        }
        if ((coords.row(slots_[slot]).array() ==
             coords.row(static_cast<Eigen::Index>(i)).array())
                .all())
          throw std::invalid_argument("duplicate coordinate in sparse tensor");
        slot = (slot + 1) & mask_;
      }
    }
  }

  /// Index of the row of `coords` equal to `row`, or -1. `coords` must be the
  /// matrix the table was built from.
  template <typename Derived>
  std::int64_t find(const CoordMatrix& coords,
                    const Eigen::MatrixBase<Derived>& row) const {
    if (slots_.empty()) return kEmpty;
    std::size_t slot = hash_any(row) & mask_;
    for (;;) {
      const std::int64_t idx = slots_[slot];
      if (idx == kEmpty) return kEmpty;
      if ((coords.row(idx).array() == row.derived().array()).all()) return idx;
      slot = (slot + 1) & mask_;
    }
  }

 private:
  static constexpr std::int64_t kEmpty = -1;

  template <typename Derived>
  static std::uint64_t hash_any(const Eigen::MatrixBase<Derived>& row) {
    std::uint64_t h = 0x243f6a8885a308d3ULL;
    for (Eigen::Index a = 0; a < row.size(); ++a) {
      h ^= static_cast<std::uint64_t>(static_cast<std::uint32_t>(row[a])) +
           0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
    }
    return h;
  }

  std::vector<std::int64_t> slots_;
  std::size_t mask_ = 0;
};

/// Dense counterpart used for conversions and oracles. Values are stored
/// channel-planar: row c of values() is the row-major flattening of channel c.
template <typename Scalar>
class DenseTensor {
 public:
  DenseTensor(AxisVec shape, Eigen::Index channels)
      : shape_(std::move(shape)),
        values_(FeatureMatrix<Scalar>::Zero(channels, product(shape_))) {}

  DenseTensor(AxisVec shape, FeatureMatrix<Scalar> values)
      : shape_(std::move(shape)), values_(std::move(values)) {
    if (values_.cols() != product(shape_))
      throw std::invalid_argument("dense value count does not match shape");
  }

  const AxisVec& shape() const { return shape_; }
  Eigen::Index channels() const { return values_.rows(); }
  const FeatureMatrix<Scalar>& values() const { return values_; }
  FeatureMatrix<Scalar>& values() { return values_; }

  Scalar& at(Eigen::Index channel, const AxisVec& idx) {
    return values_(channel, flat_index(idx, shape_));
  }
  Scalar at(Eigen::Index channel, const AxisVec& idx) const {
    return values_(channel, flat_index(idx, shape_));
  }

 private:
  AxisVec shape_;
  FeatureMatrix<Scalar> values_;
};

/// COO sparse tensor: active-site coordinates plus per-site feature rows.
/// Immutable after construction; the coordinate hash index is built eagerly
/// so consumers can share tensors across threads without synchronization.
///
/// Coordinates are absolute positions on the unit grid and every entry of a
/// row is divisible by the per-axis tensor stride (axis 0 is batch, stride 1).
template <typename Scalar>
class SparseTensor {
 public:
  SparseTensor(CoordMatrix coords, FeatureMatrix<Scalar> feats, AxisVec stride,
               AxisVec shape)
      : coords_(std::move(coords)),
        feats_(std::move(feats)),
        stride_(std::move(stride)),
        shape_(std::move(shape)) {
    validate();
    index_.build(coords_);
  }

  /// Empty tensor over the given axes.
  static SparseTensor empty(AxisVec stride, AxisVec shape, Eigen::Index channels) {
    return SparseTensor(CoordMatrix(0, shape.size()),
                        FeatureMatrix<Scalar>(0, channels), std::move(stride),
                        std::move(shape));
  }

  Eigen::Index site_count() const { return coords_.rows(); }
  Eigen::Index axes() const { return coords_.cols(); }
  Eigen::Index channels() const { return feats_.cols(); }

  const CoordMatrix& coords() const { return coords_; }
  const FeatureMatrix<Scalar>& features() const { return feats_; }
  const AxisVec& stride() const { return stride_; }
  const AxisVec& shape() const { return shape_; }

  /// Site index holding exactly this coordinate row, or -1.
  template <typename Derived>
  std::int64_t find(const Eigen::MatrixBase<Derived>& row) const {
    return index_.find(coords_, row);
  }

  /// Same coordinate list in the same order.
  bool same_coords_as(const SparseTensor& other) const {
    return coords_.rows() == other.coords_.rows() &&
           coords_.cols() == other.coords_.cols() &&
           (coords_.array() == other.coords_.array()).all();
  }

  /// Tensor with identical geometry but replaced features (same site order).
  SparseTensor with_features(FeatureMatrix<Scalar> feats) const {
    if (feats.rows() != coords_.rows())
      throw std::invalid_argument("feature row count does not match sites");
    return SparseTensor(coords_, std::move(feats), stride_, shape_);
  }

 private:
  void validate() const {
    if (feats_.rows() != coords_.rows())
      throw std::invalid_argument("feature/coordinate row count mismatch");
    if (stride_.size() != coords_.cols() || shape_.size() != coords_.cols())
      throw std::invalid_argument("stride/shape axis count mismatch");
    for (Eigen::Index a = 0; a < stride_.size(); ++a)
      if (stride_[a] < 1) throw std::invalid_argument("stride entries must be >= 1");
    for (Eigen::Index i = 0; i < coords_.rows(); ++i) {
      for (Eigen::Index a = 0; a < coords_.cols(); ++a) {
        const auto c = coords_(i, a);
        if (c < 0 || c >= shape_[a])
          throw std::out_of_range("coordinate out of bounds");
        if (c % stride_[a] != 0)
          throw std::invalid_argument("coordinate not aligned to tensor stride");
      }
    }
  }

  CoordMatrix coords_;
  FeatureMatrix<Scalar> feats_;
  AxisVec stride_;
  AxisVec shape_;
  CoordIndex index_;
};

inline AxisVec unit_stride(Eigen::Index axes) {
  return AxisVec::Ones(axes);
}

/// Collects the sites of `d` selected by `keep(coord, feature_column)`.
/// Resulting stride is all ones; feature values are copied bit-exactly.
template <typename Scalar, typename Keep>
SparseTensor<Scalar> from_dense(const DenseTensor<Scalar>& d, Keep&& keep) {
  const AxisVec& shape = d.shape();
  const Eigen::Index axes = shape.size();
  std::vector<std::int64_t> picked;
  AxisVec idx = AxisVec::Zero(axes);
  if (product(shape) > 0) {
    std::int64_t flat = 0;
    do {
      if (keep(idx, d.values().col(flat))) picked.push_back(flat);
      ++flat;
    } while (next_index(idx, shape));
  }
  CoordMatrix coords(static_cast<Eigen::Index>(picked.size()), axes);
  FeatureMatrix<Scalar> feats(static_cast<Eigen::Index>(picked.size()),
                              d.channels());
  for (std::size_t i = 0; i < picked.size(); ++i) {
    std::int64_t rem = picked[i];
    for (Eigen::Index a = axes - 1; a >= 0; --a) {
      coords(static_cast<Eigen::Index>(i), a) =
          static_cast<std::int32_t>(rem % shape[a]);
      rem /= shape[a];
    }
    feats.row(static_cast<Eigen::Index>(i)) = d.values().col(picked[i]).transpose();
  }
  return SparseTensor<Scalar>(std::move(coords), std::move(feats),
                              unit_stride(axes), shape);
}

/// Keeps sites where any channel is non-zero.
template <typename Scalar>
SparseTensor<Scalar> from_dense_nonzero(const DenseTensor<Scalar>& d) {
  return from_dense(d, [](const AxisVec&, const auto& col) {
    return (col.array() != Scalar(0)).any();
  });
}

template <typename Scalar>
DenseTensor<Scalar> to_dense(const SparseTensor<Scalar>& s) {
  DenseTensor<Scalar> d(s.shape(), s.channels());
  for (Eigen::Index i = 0; i < s.site_count(); ++i) {
    std::int64_t flat = 0;
    for (Eigen::Index a = 0; a < s.axes(); ++a) {
      const auto c = s.coords()(i, a);
      if (c < 0 || c >= s.shape()[a])
        throw std::out_of_range("coordinate out of bounds");
      flat = flat * s.shape()[a] + c;
    }
    d.values().col(flat) = s.features().row(i).transpose();
  }
  return d;
}

template <typename Scalar>
std::int64_t active_site_count(const SparseTensor<Scalar>& s) {
  return s.site_count();
}

/// Sparse tensor file format, little-endian:
///   "SPT1", u32 axes A, A*u32 shape, A*u32 stride, u32 channels C,
///   u64 site count N, N*A i32 coordinates, N*C f32 features.
inline void serialize(const SparseTensor<float>& s, BinaryWriter& w) {
  w.write_magic("SPT1");
  w.write<std::uint32_t>(static_cast<std::uint32_t>(s.axes()));
  for (Eigen::Index a = 0; a < s.axes(); ++a)
    w.write<std::uint32_t>(static_cast<std::uint32_t>(s.shape()[a]));
  for (Eigen::Index a = 0; a < s.axes(); ++a)
    w.write<std::uint32_t>(static_cast<std::uint32_t>(s.stride()[a]));
  w.write<std::uint32_t>(static_cast<std::uint32_t>(s.channels()));
  w.write<std::uint64_t>(static_cast<std::uint64_t>(s.site_count()));
  w.write_bytes(s.coords().data(),
                sizeof(std::int32_t) * static_cast<std::size_t>(s.coords().size()));
  w.write_bytes(s.features().data(),
                sizeof(float) * static_cast<std::size_t>(s.features().size()));
}

inline std::vector<char> serialize(const SparseTensor<float>& s) {
  BinaryWriter w;
  serialize(s, w);
  return w.bytes();
}

inline SparseTensor<float> deserialize_sparse(const std::vector<char>& bytes) {
  BinaryReader r(bytes, "corrupt sparse tensor file");
  r.expect_magic("SPT1");
  const auto axes = r.read<std::uint32_t>();
  if (axes == 0 || axes > 16) throw std::runtime_error("corrupt sparse tensor file");
  AxisVec shape(axes), stride(axes);
  for (std::uint32_t a = 0; a < axes; ++a)
    shape[a] = static_cast<std::int32_t>(r.read<std::uint32_t>());
  for (std::uint32_t a = 0; a < axes; ++a)
    stride[a] = static_cast<std::int32_t>(r.read<std::uint32_t>());
  const auto channels = r.read<std::uint32_t>();
  const auto n = r.read<std::uint64_t>();
  if (r.remaining() != n * (axes * sizeof(std::int32_t) + channels * sizeof(float)))
    throw std::runtime_error("corrupt sparse tensor file");
  CoordMatrix coords(static_cast<Eigen::Index>(n), axes);
  r.read_bytes(coords.data(), sizeof(std::int32_t) * static_cast<std::size_t>(coords.size()));
  FeatureMatrix<float> feats(static_cast<Eigen::Index>(n), channels);
  r.read_bytes(feats.data(), sizeof(float) * static_cast<std::size_t>(feats.size()));
  return SparseTensor<float>(std::move(coords), std::move(feats), std::move(stride),
                             std::move(shape));
}

}  // namespace ulm
