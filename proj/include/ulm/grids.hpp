#pragma once

#include "ulm/io_util.hpp"
#include "ulm/types.hpp"

#include <cstdint>
#include <stdexcept>
#include <vector>

namespace ulm {

/// Dense binary mask over the data axes, row-major, one byte per cell in
/// memory and one bit per cell on disk.
struct BinaryGrid {
  AxisVec shape;
  std::vector<std::uint8_t> cells;

  BinaryGrid() = default;
  explicit BinaryGrid(AxisVec s)
      : shape(std::move(s)), cells(static_cast<std::size_t>(product(shape)), 0) {}

  std::int64_t volume() const { return static_cast<std::int64_t>(cells.size()); }

  bool get(const AxisVec& idx) const {
    return cells[static_cast<std::size_t>(flat_index(idx, shape))] != 0;
  }
  void set(const AxisVec& idx, bool v = true) {
    cells[static_cast<std::size_t>(flat_index(idx, shape))] = v ? 1 : 0;
  }

  std::int64_t count() const {
    std::int64_t n = 0;
    for (auto c : cells) n += (c != 0);
    return n;
  }

  bool operator==(const BinaryGrid& o) const {
    return shape.size() == o.shape.size() &&
           (shape.array() == o.shape.array()).all() && cells == o.cells;
  }
};

/// Morphological dilation with the L-inf ball of the given radius,
/// implemented as one running-OR pass per axis.
inline BinaryGrid dilate(const BinaryGrid& g, int radius) {
  if (radius < 0) throw std::invalid_argument("dilation radius must be >= 0");
  if (radius == 0) return g;
  BinaryGrid cur = g;
  const Eigen::Index rank = g.shape.size();
  for (Eigen::Index axis = 0; axis < rank; ++axis) {
    BinaryGrid next(g.shape);
    std::int64_t stride = 1;
    for (Eigen::Index a = axis + 1; a < rank; ++a) stride *= g.shape[a];
    const std::int64_t extent = g.shape[axis];
    const std::int64_t volume = cur.volume();
    for (std::int64_t f = 0; f < volume; ++f) {
      if (!cur.cells[static_cast<std::size_t>(f)]) continue;
      const std::int64_t pos = (f / stride) % extent;
      const std::int64_t lo = std::max<std::int64_t>(-radius, -pos);
      const std::int64_t hi = std::min<std::int64_t>(radius, extent - 1 - pos);
      for (std::int64_t w = lo; w <= hi; ++w)
        next.cells[static_cast<std::size_t>(f + w * stride)] = 1;
    }
    cur = std::move(next);
  }
  return cur;
}

/// OR-pooling by an integer factor per axis; shape must divide evenly.
inline BinaryGrid maxpool(const BinaryGrid& g, const AxisVec& factor) {
  if (factor.size() != g.shape.size())
    throw std::invalid_argument("pool factor rank mismatch");
  AxisVec out_shape(g.shape.size());
  for (Eigen::Index a = 0; a < g.shape.size(); ++a) {
    if (factor[a] < 1 || g.shape[a] % factor[a] != 0)
      throw std::invalid_argument("pool factor must divide shape");
    out_shape[a] = g.shape[a] / factor[a];
  }
  BinaryGrid out(out_shape);
  AxisVec idx = AxisVec::Zero(g.shape.size());
  std::int64_t f = 0;
  if (g.volume() == 0) return out;
  do {
    if (g.cells[static_cast<std::size_t>(f)]) {
      AxisVec q(idx.size());
      for (Eigen::Index a = 0; a < idx.size(); ++a) q[a] = idx[a] / factor[a];
      out.set(q);
    }
    ++f;
  } while (next_index(idx, g.shape));
  return out;
}

/// Max-projection along one axis (drops that axis).
inline BinaryGrid project(const BinaryGrid& g, Eigen::Index axis) {
  if (axis < 0 || axis >= g.shape.size())
    throw std::invalid_argument("projection axis out of range");
  AxisVec out_shape(g.shape.size() - 1);
  for (Eigen::Index a = 0, o = 0; a < g.shape.size(); ++a)
    if (a != axis) out_shape[o++] = g.shape[a];
  BinaryGrid out(out_shape);
  AxisVec idx = AxisVec::Zero(g.shape.size());
  std::int64_t f = 0;
  if (g.volume() == 0) return out;
  do {
    if (g.cells[static_cast<std::size_t>(f)]) {
      AxisVec q(out_shape.size());
      for (Eigen::Index a = 0, o = 0; a < g.shape.size(); ++a)
        if (a != axis) q[o++] = idx[a];
      out.set(q);
    }
    ++f;
  } while (next_index(idx, g.shape));
  return out;
}

/// LSB-first bit packing in row-major cell order.
inline std::vector<std::uint8_t> pack_bits(const BinaryGrid& g) {
  std::vector<std::uint8_t> out((static_cast<std::size_t>(g.volume()) + 7) / 8, 0);
  for (std::int64_t f = 0; f < g.volume(); ++f)
    if (g.cells[static_cast<std::size_t>(f)])
      out[static_cast<std::size_t>(f >> 3)] |=
          static_cast<std::uint8_t>(1u << (f & 7));
  return out;
}

inline BinaryGrid unpack_bits(const AxisVec& shape,
                              const std::vector<std::uint8_t>& packed) {
  BinaryGrid g(shape);
  if (packed.size() != (static_cast<std::size_t>(g.volume()) + 7) / 8)
    throw std::runtime_error("bit-packed raster size mismatch");
  for (std::int64_t f = 0; f < g.volume(); ++f)
    g.cells[static_cast<std::size_t>(f)] =
        (packed[static_cast<std::size_t>(f >> 3)] >> (f & 7)) & 1u;
  return g;
}

/// Standalone angiogram raster file: "ULR1", u8 rank, rank*u32 shape, then
/// the same bit-packed payload the movie format embeds.
inline void save_raster(const BinaryGrid& g, const std::string& path) {
  BinaryWriter w;
  w.write_magic("ULR1");
  w.write<std::uint8_t>(static_cast<std::uint8_t>(g.shape.size()));
  for (Eigen::Index a = 0; a < g.shape.size(); ++a)
    w.write<std::uint32_t>(static_cast<std::uint32_t>(g.shape[a]));
  const auto packed = pack_bits(g);
  w.write_bytes(packed.data(), packed.size());
  w.save(path);
}

inline BinaryGrid load_raster(const std::string& path) {
  BinaryReader r(read_file(path), "corrupt raster file: " + path);
  r.expect_magic("ULR1");
  const auto rank = r.read<std::uint8_t>();
  AxisVec shape(rank);
  for (int a = 0; a < rank; ++a)
    shape[a] = static_cast<std::int32_t>(r.read<std::uint32_t>());
  std::vector<std::uint8_t> packed((static_cast<std::size_t>(product(shape)) + 7) / 8);
  r.read_bytes(packed.data(), packed.size());
  return unpack_bits(shape, packed);
}

}  // namespace ulm
