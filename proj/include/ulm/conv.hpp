#pragma once

#include "ulm/kernel_map.hpp"
#include "ulm/sparse_tensor.hpp"
#include "ulm/types.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <utility>
#include <vector>

namespace ulm {

enum class ConvMode { kLatticePreserving, kDownsample, kGenerativeUpsample };

/// Convolution layer parameters. Weights are stored flat as
/// (kernel_volume * in_channels) x out_channels with the kernel offset
/// blocked on rows, matching the checkpoint layout. For generative
/// upsampling kernel_size doubles as the per-axis upsampling factor.
template <typename Scalar>
struct ConvParams {
  FeatureMatrix<Scalar> weights;
  Eigen::Matrix<Scalar, 1, Eigen::Dynamic> bias;
  AxisVec kernel_size;  // data axes
  AxisVec stride;       // data axes, convolution stride
  AxisVec dilation;     // data axes
  ConvMode mode = ConvMode::kLatticePreserving;

  std::int64_t kernel_volume() const { return product(kernel_size); }
  Eigen::Index in_channels() const {
    return weights.rows() / static_cast<Eigen::Index>(kernel_volume());
  }
  Eigen::Index out_channels() const { return weights.cols(); }

  auto offset_weights(std::int64_t o) const {
    return weights.middleRows(static_cast<Eigen::Index>(o) * in_channels(),
                              in_channels());
  }
};

/// Geometry of one applied convolution, reusable across forward/backward and
/// across epochs when the input coordinates do not change.
struct ConvGeometry {
  CoordMatrix out_coords;
  AxisVec out_stride;
  AxisVec out_shape;
  KernelMap map;  // empty for generative upsampling
};

namespace detail {

inline CoordMatrix lex_sorted_unique_rows(const CoordMatrix& rows) {
  const Eigen::Index n = rows.rows(), a = rows.cols();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  auto less = [&](Eigen::Index x, Eigen::Index y) {
    for (Eigen::Index c = 0; c < a; ++c) {
      if (rows(x, c) != rows(y, c)) return rows(x, c) < rows(y, c);
    }
    return false;
  };
  std::sort(order.begin(), order.end(), less);
  std::vector<Eigen::Index> keep;
  keep.reserve(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (i == 0 || less(order[i - 1], order[i])) keep.push_back(order[i]);
  }
  CoordMatrix out(static_cast<Eigen::Index>(keep.size()), a);
  for (std::size_t i = 0; i < keep.size(); ++i)
    out.row(static_cast<Eigen::Index>(i)) = rows.row(keep[i]);
  return out;
}

}  // namespace detail

template <typename Scalar>
ConvGeometry conv_geometry(const SparseTensor<Scalar>& x, const ConvParams<Scalar>& p) {
  const Eigen::Index data_axes = x.axes() - 1;
  if (p.kernel_size.size() != data_axes)
    throw std::invalid_argument("kernel axes do not match input axes");
  ConvGeometry g;
  if (p.mode == ConvMode::kGenerativeUpsample) {
    const AxisVec& factor = p.kernel_size;
    AxisVec child_stride(x.axes());
    child_stride[0] = 1;
    for (Eigen::Index a = 0; a < data_axes; ++a) {
      if (factor[a] < 1 || x.stride()[a + 1] % factor[a] != 0)
        throw std::invalid_argument("invalid upsample factor");
      child_stride[a + 1] = x.stride()[a + 1] / factor[a];
    }
    const std::int64_t n_children = product(factor);
    CoordMatrix children(x.site_count() * n_children, x.axes());
    AxisVec k_idx = AxisVec::Zero(data_axes);
    std::int64_t c = 0;
    do {
      for (Eigen::Index i = 0; i < x.site_count(); ++i) {
        auto row = children.row(i * n_children + c);
        row = x.coords().row(i);
        for (Eigen::Index a = 0; a < data_axes; ++a)
          row[a + 1] += k_idx[a] * child_stride[a + 1];
      }
      ++c;
    } while (next_index(k_idx, factor));
    g.out_coords = std::move(children);
    g.out_stride = std::move(child_stride);
    g.out_shape = x.shape();
    return g;
  }

  if (p.mode == ConvMode::kLatticePreserving) {
    for (Eigen::Index a = 0; a < data_axes; ++a) {
      if (p.kernel_size[a] % 2 != 1)
        throw std::invalid_argument("lattice-preserving kernel must be odd");
      if (p.stride[a] != 1)
        throw std::invalid_argument("lattice-preserving stride must be 1");
    }
    g.out_coords = x.coords();
    g.out_stride = x.stride();
  } else {
    AxisVec out_stride(x.axes());
    out_stride[0] = 1;
    for (Eigen::Index a = 0; a < data_axes; ++a)
      out_stride[a + 1] = x.stride()[a + 1] * p.stride[a];
    CoordMatrix quantized = x.coords();
    for (Eigen::Index i = 0; i < quantized.rows(); ++i)
      for (Eigen::Index a = 1; a < quantized.cols(); ++a)
        quantized(i, a) = (quantized(i, a) / out_stride[a]) * out_stride[a];
    g.out_coords = detail::lex_sorted_unique_rows(quantized);
    g.out_stride = std::move(out_stride);
  }
  g.out_shape = x.shape();
  g.map = build_kernel_map(x, g.out_coords, p.kernel_size, p.stride, p.dilation);
  return g;
}

/// Sparse convolution via kernel-map gather/GEMM/scatter. Lattice-preserving
/// mode keeps the input coordinate set; downsampling emits the distinct
/// stride-quantized coordinates. Values equal the dense convolution
/// restricted to the output coordinate set.
template <typename Scalar>
SparseTensor<Scalar> sparse_conv_forward(const SparseTensor<Scalar>& x,
                                         const ConvParams<Scalar>& p,
                                         const ConvGeometry& g) {
  if (x.channels() != p.in_channels())
    throw std::invalid_argument("channel count mismatch");
  const Eigen::Index n_out = g.out_coords.rows();
  FeatureMatrix<Scalar> out = p.bias.replicate(n_out, 1);
  const Eigen::Index c_in = p.in_channels();
  FeatureMatrix<Scalar> gather, contrib;
  for (std::size_t o = 0; o < g.map.pairs.size(); ++o) {
    const auto& pr = g.map.pairs[o];
    if (pr.empty()) continue;
    gather.resize(static_cast<Eigen::Index>(pr.size()), c_in);
    for (std::size_t m = 0; m < pr.size(); ++m)
      gather.row(static_cast<Eigen::Index>(m)) = x.features().row(pr[m].first);
    contrib.noalias() = gather * p.offset_weights(static_cast<std::int64_t>(o));
    for (std::size_t m = 0; m < pr.size(); ++m)
      out.row(pr[m].second) += contrib.row(static_cast<Eigen::Index>(m));
  }
  return SparseTensor<Scalar>(g.out_coords, std::move(out), g.out_stride, g.out_shape);
}

template <typename Scalar>
SparseTensor<Scalar> sparse_conv_forward(const SparseTensor<Scalar>& x,
                                         const ConvParams<Scalar>& p) {
  return sparse_conv_forward(x, p, conv_geometry(x, p));
}

template <typename Scalar>
struct ConvGrads {
  FeatureMatrix<Scalar> input;    // same rows as x.features()
  FeatureMatrix<Scalar> weights;  // same shape as p.weights
  Eigen::Matrix<Scalar, 1, Eigen::Dynamic> bias;
};

/// Backward pass of sparse_conv_forward. grad_out must live on the forward
/// output coordinates in the same order.
template <typename Scalar>
ConvGrads<Scalar> sparse_conv_backward(const SparseTensor<Scalar>& x,
                                       const ConvParams<Scalar>& p,
                                       const SparseTensor<Scalar>& grad_out,
                                       const ConvGeometry& g) {
  if (grad_out.coords().rows() != g.out_coords.rows() ||
      !(grad_out.coords().array() == g.out_coords.array()).all())
    throw std::invalid_argument("gradient/output coordinate mismatch");
  ConvGrads<Scalar> grads;
  grads.input = FeatureMatrix<Scalar>::Zero(x.site_count(), x.channels());
  grads.weights = FeatureMatrix<Scalar>::Zero(p.weights.rows(), p.weights.cols());
  grads.bias = grad_out.features().colwise().sum();
  const Eigen::Index c_in = p.in_channels(), c_out = p.out_channels();
  FeatureMatrix<Scalar> gx, gg, back;
  for (std::size_t o = 0; o < g.map.pairs.size(); ++o) {
    const auto& pr = g.map.pairs[o];
    if (pr.empty()) continue;
    const Eigen::Index m = static_cast<Eigen::Index>(pr.size());
    gx.resize(m, c_in);
    gg.resize(m, c_out);
    for (Eigen::Index k = 0; k < m; ++k) {
      gx.row(k) = x.features().row(pr[static_cast<std::size_t>(k)].first);
      gg.row(k) = grad_out.features().row(pr[static_cast<std::size_t>(k)].second);
    }
    grads.weights.middleRows(static_cast<Eigen::Index>(o) * c_in, c_in).noalias() +=
        gx.transpose() * gg;
    back.noalias() = gg * p.offset_weights(static_cast<std::int64_t>(o)).transpose();
    for (Eigen::Index k = 0; k < m; ++k)
      grads.input.row(pr[static_cast<std::size_t>(k)].first) += back.row(k);
  }
  return grads;
}

template <typename Scalar>
ConvGrads<Scalar> sparse_conv_backward(const SparseTensor<Scalar>& x,
                                       const ConvParams<Scalar>& p,
                                       const SparseTensor<Scalar>& grad_out) {
  return sparse_conv_backward(x, p, grad_out, conv_geometry(x, p));
}

/// Sparsity-preserving upsampling: every input site emits exactly the
/// prod(factor) child coordinates of its cell on the finer lattice and
/// nothing else. Child features come from the transposed-convolution weight
/// block of the child's offset.
template <typename Scalar>
SparseTensor<Scalar> generative_upsample_forward(const SparseTensor<Scalar>& x,
                                                 const ConvParams<Scalar>& p,
                                                 const ConvGeometry& g) {
  if (x.channels() != p.in_channels())
    throw std::invalid_argument("channel count mismatch");
  const std::int64_t nc = p.kernel_volume();
  FeatureMatrix<Scalar> out(x.site_count() * nc, p.out_channels());
  for (std::int64_t c = 0; c < nc; ++c) {
    FeatureMatrix<Scalar> block = x.features() * p.offset_weights(c);
    block.rowwise() += p.bias;
    for (Eigen::Index i = 0; i < x.site_count(); ++i)
      out.row(i * nc + static_cast<Eigen::Index>(c)) = block.row(i);
  }
  return SparseTensor<Scalar>(g.out_coords, std::move(out), g.out_stride, g.out_shape);
}

template <typename Scalar>
SparseTensor<Scalar> generative_upsample(const SparseTensor<Scalar>& x,
                                         const AxisVec& factor,
                                         const ConvParams<Scalar>& p) {
  if (factor.size() != p.kernel_size.size() ||
      !(factor.array() == p.kernel_size.array()).all())
    throw std::invalid_argument("invalid upsample factor");
  return generative_upsample_forward(x, p, conv_geometry(x, p));
}

template <typename Scalar>
ConvGrads<Scalar> generative_upsample_backward(const SparseTensor<Scalar>& x,
                                               const ConvParams<Scalar>& p,
                                               const SparseTensor<Scalar>& grad_out,
                                               const ConvGeometry& g) {
  if (grad_out.coords().rows() != g.out_coords.rows() ||
      !(grad_out.coords().array() == g.out_coords.array()).all())
    throw std::invalid_argument("gradient/output coordinate mismatch");
  const std::int64_t nc = p.kernel_volume();
  ConvGrads<Scalar> grads;
  grads.input = FeatureMatrix<Scalar>::Zero(x.site_count(), x.channels());
  grads.weights = FeatureMatrix<Scalar>::Zero(p.weights.rows(), p.weights.cols());
  grads.bias = grad_out.features().colwise().sum();
  FeatureMatrix<Scalar> gg(x.site_count(), p.out_channels());
  for (std::int64_t c = 0; c < nc; ++c) {
    for (Eigen::Index i = 0; i < x.site_count(); ++i)
      gg.row(i) = grad_out.features().row(i * nc + static_cast<Eigen::Index>(c));
    grads.weights.middleRows(static_cast<Eigen::Index>(c) * x.channels(),
                             x.channels()).noalias() = x.features().transpose() * gg;
    grads.input.noalias() += gg * p.offset_weights(c).transpose();
  }
  return grads;
}

/// Per-site logits w . feature + b on unchanged coordinates.
template <typename Scalar>
SparseTensor<Scalar> pointwise_classifier(const SparseTensor<Scalar>& x,
                                          const VectorX<Scalar>& w, Scalar b) {
  if (w.size() != x.channels())
    throw std::invalid_argument("channel count mismatch");
  FeatureMatrix<Scalar> logits = x.features() * w;
  logits.array() += b;
  return x.with_features(std::move(logits));
}

/// Sites kept by a probability threshold on classifier logits. For threshold
/// t the kept set is { sigmoid(logit) >= t }, i.e. logit >= ln(t/(1-t)).
template <typename Scalar>
std::vector<Eigen::Index> prune_keep_indices(const SparseTensor<Scalar>& logits,
                                             double keep_threshold) {
  if (logits.channels() != 1)
    throw std::invalid_argument("prune expects 1-channel logits");
  double cut;
  if (keep_threshold <= 0.0)
    cut = -std::numeric_limits<double>::infinity();
  else if (keep_threshold >= 1.0)
    cut = std::numeric_limits<double>::infinity();
  else
    cut = std::log(keep_threshold / (1.0 - keep_threshold));
  std::vector<Eigen::Index> keep;
  for (Eigen::Index i = 0; i < logits.site_count(); ++i)
    if (static_cast<double>(logits.features()(i, 0)) >= cut) keep.push_back(i);
  return keep;
}

template <typename Scalar>
SparseTensor<Scalar> select_sites(const SparseTensor<Scalar>& x,
                                  const std::vector<Eigen::Index>& keep) {
  CoordMatrix coords(static_cast<Eigen::Index>(keep.size()), x.axes());
  FeatureMatrix<Scalar> feats(static_cast<Eigen::Index>(keep.size()), x.channels());
  for (std::size_t i = 0; i < keep.size(); ++i) {
    coords.row(static_cast<Eigen::Index>(i)) = x.coords().row(keep[i]);
    feats.row(static_cast<Eigen::Index>(i)) = x.features().row(keep[i]);
  }
  return SparseTensor<Scalar>(std::move(coords), std::move(feats), x.stride(),
                              x.shape());
}

/// Removes the sites whose classifier probability falls below keep_threshold;
/// downstream layers never see them again.
template <typename Scalar>
SparseTensor<Scalar> prune(const SparseTensor<Scalar>& x,
                           const SparseTensor<Scalar>& logits,
                           double keep_threshold) {
  if (!x.same_coords_as(logits))
    throw std::invalid_argument("prune coordinate mismatch");
  return select_sites(x, prune_keep_indices(logits, keep_threshold));
}

template <typename Scalar>
SparseTensor<Scalar> relu(const SparseTensor<Scalar>& x) {
  return x.with_features(x.features().cwiseMax(Scalar(0)));
}

}  // namespace ulm
