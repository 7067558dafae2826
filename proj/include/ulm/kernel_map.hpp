#pragma once

#include "ulm/sparse_tensor.hpp"
#include "ulm/types.hpp"

#include <cstdint>
#include <stdexcept>
#include <utility>
#include <vector>

namespace ulm {

/// Per-kernel-offset gather/scatter lists for sparse convolution. Offsets are
/// enumerated row-major over the data axes (last axis fastest); each list
/// holds (input site, output site) index pairs sorted by output site.
struct KernelMap {
  std::vector<std::vector<std::pair<std::int64_t, std::int64_t>>> pairs;
  std::int64_t kernel_volume = 0;

  std::int64_t pair_count() const {
    std::int64_t n = 0;
    for (const auto& p : pairs) n += static_cast<std::int64_t>(p.size());
    return n;
  }
};

/// Absolute displacement of kernel offset `k_idx` (per data axis, in unit-grid
/// cells). Odd kernels are centered; even kernels anchor at their first tap.
inline AxisVec kernel_displacement(const AxisVec& k_idx, const AxisVec& kernel_size,
                                   const AxisVec& dilation, const AxisVec& in_stride_data) {
  AxisVec rel(k_idx.size());
  for (Eigen::Index a = 0; a < k_idx.size(); ++a) {
    const std::int32_t center = (kernel_size[a] % 2 == 1) ? (kernel_size[a] - 1) / 2 : 0;
    rel[a] = (k_idx[a] - center) * dilation[a] * in_stride_data[a];
  }
  return rel;
}

/// For every kernel offset, finds the input sites feeding each output
/// coordinate via the input's coordinate hash. Cost is
/// O(out sites x kernel volume) probes, independent of the dense volume.
/// `kernel_size`, `stride`, `dilation` cover the data axes (batch excluded);
/// `stride` is the convolution stride and is only used to sanity-check that
/// the output coordinates sit on the strided lattice.
template <typename Scalar>
KernelMap build_kernel_map(const SparseTensor<Scalar>& input,
                           const CoordMatrix& out_coords, const AxisVec& kernel_size,
                           const AxisVec& stride, const AxisVec& dilation) {
  const Eigen::Index data_axes = input.axes() - 1;
  if (kernel_size.size() != data_axes || stride.size() != data_axes ||
      dilation.size() != data_axes)
    throw std::invalid_argument("kernel axes do not match input axes");
  if (out_coords.cols() != input.axes())
    throw std::invalid_argument("kernel axes do not match input axes");
  for (Eigen::Index j = 0; j < out_coords.rows(); ++j)
    for (Eigen::Index a = 0; a < data_axes; ++a)
      if (out_coords(j, a + 1) % (input.stride()[a + 1] * stride[a]) != 0)
        throw std::invalid_argument("output coordinate off the strided lattice");

  KernelMap map;
  map.kernel_volume = product(kernel_size);
  map.pairs.resize(static_cast<std::size_t>(map.kernel_volume));

  // Precompute per-offset displacements once.
  std::vector<AxisVec> rel(static_cast<std::size_t>(map.kernel_volume));
  {
    AxisVec k_idx = AxisVec::Zero(data_axes);
    std::int64_t o = 0;
    do {
      AxisVec in_stride_data(data_axes);
      for (Eigen::Index a = 0; a < data_axes; ++a)
        in_stride_data[a] = input.stride()[a + 1];
      rel[static_cast<std::size_t>(o)] =
          kernel_displacement(k_idx, kernel_size, dilation, in_stride_data);
      ++o;
    } while (next_index(k_idx, kernel_size));
  }

  CoordRow probe(input.axes());
  for (Eigen::Index j = 0; j < out_coords.rows(); ++j) {
    for (std::int64_t o = 0; o < map.kernel_volume; ++o) {
      probe = out_coords.row(j);
      for (Eigen::Index a = 0; a < data_axes; ++a)
        probe[a + 1] += rel[static_cast<std::size_t>(o)][a];
      const std::int64_t i = input.find(probe);
      if (i >= 0) map.pairs[static_cast<std::size_t>(o)].emplace_back(i, j);
    }
  }
  return map;
}

}  // namespace ulm
