#pragma once

#include "ulm/grids.hpp"
#include "ulm/sparse_tensor.hpp"
#include "ulm/types.hpp"

#include <cmath>
#include <stdexcept>

namespace ulm {

template <typename Scalar>
Scalar sigmoid(Scalar x) {
  if (x >= Scalar(0)) return Scalar(1) / (Scalar(1) + std::exp(-x));
  const Scalar e = std::exp(x);
  return e / (Scalar(1) + e);
}

template <typename Scalar>
FeatureMatrix<Scalar> sigmoid(const FeatureMatrix<Scalar>& m) {
  FeatureMatrix<Scalar> out(m.rows(), m.cols());
  for (Eigen::Index i = 0; i < m.size(); ++i) out(i) = sigmoid(m(i));
  return out;
}

/// Shape of the cell grid a tensor's sites live on: one cell per stride step,
/// covering the whole shape (ceil division handles collapsed axes).
inline AxisVec lattice_cells(const AxisVec& shape, const AxisVec& stride) {
  AxisVec cells(shape.size() - 1);
  for (Eigen::Index a = 1; a < shape.size(); ++a)
    cells[a - 1] = (shape[a] + stride[a] - 1) / stride[a];
  return cells;
}

template <typename Scalar>
struct DiceLossResult {
  double loss = 0.0;
  FeatureMatrix<Scalar> grad;  // d loss / d pred, one row per site
};

/// Soft Dice loss 1 - (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps) between
/// sparse per-site probabilities and a binary target grid at the tensor's
/// lattice resolution. Target cells with no active site contribute to the
/// denominator only; reductions run in f64.
template <typename Scalar>
DiceLossResult<Scalar> dice_loss(const SparseTensor<Scalar>& pred_probs,
                                 const BinaryGrid& target, double eps = 1.0) {
  if (pred_probs.channels() != 1)
    throw std::invalid_argument("dice loss expects 1-channel probabilities");
  const AxisVec cells = lattice_cells(pred_probs.shape(), pred_probs.stride());
  if (cells.size() != target.shape.size() ||
      !(cells.array() == target.shape.array()).all())
    throw std::invalid_argument("dice target shape mismatch");

  const Eigen::Index n = pred_probs.site_count();
  double sum_p = 0.0, sum_pt = 0.0;
  std::vector<std::uint8_t> t_at(static_cast<std::size_t>(n));
  AxisVec cell(cells.size());
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index a = 0; a < cells.size(); ++a)
      cell[a] = pred_probs.coords()(i, a + 1) / pred_probs.stride()[a + 1];
    const bool t = target.get(cell);
    t_at[static_cast<std::size_t>(i)] = t;
    const double p = static_cast<double>(pred_probs.features()(i, 0));
    sum_p += p;
    if (t) sum_pt += p;
  }
  const double sum_t = static_cast<double>(target.count());
  const double num = 2.0 * sum_pt + eps;
  const double den = sum_p + sum_t + eps;

  DiceLossResult<Scalar> r;
  r.loss = 1.0 - num / den;
  r.grad.resize(n, 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double dnum = t_at[static_cast<std::size_t>(i)] ? 2.0 : 0.0;
    r.grad(i, 0) = static_cast<Scalar>((num - dnum * den) / (den * den));
  }
  return r;
}

struct DenseDiceResult {
  double loss = 0.0;
  VectorX<double> grad;
};

/// Dense-grid soft Dice over two value arrays of equal length; symmetric in
/// its arguments by construction.
inline DenseDiceResult dice_loss_dense(const VectorX<double>& pred,
                                       const VectorX<double>& target,
                                       double eps = 1.0) {
  if (pred.size() != target.size())
    throw std::invalid_argument("dice operand size mismatch");
  double sum_p = 0.0, sum_t = 0.0, sum_pt = 0.0;
  for (Eigen::Index i = 0; i < pred.size(); ++i) {
    sum_p += pred[i];
    sum_t += target[i];
    sum_pt += pred[i] * target[i];
  }
  const double num = 2.0 * sum_pt + eps;
  const double den = sum_p + sum_t + eps;
  DenseDiceResult r;
  r.loss = 1.0 - num / den;
  r.grad.resize(pred.size());
  for (Eigen::Index i = 0; i < pred.size(); ++i)
    r.grad[i] = (num - 2.0 * target[i] * den) / (den * den);
  return r;
}

template <typename Scalar>
DenseDiceResult dice_loss(const DenseTensor<Scalar>& pred_probs,
                          const BinaryGrid& target, double eps = 1.0) {
  if (pred_probs.channels() != 1)
    throw std::invalid_argument("dice loss expects 1-channel probabilities");
  if (product(pred_probs.shape()) != target.volume())
    throw std::invalid_argument("dice target shape mismatch");
  VectorX<double> p = pred_probs.values().row(0).transpose().template cast<double>();
  VectorX<double> t(target.volume());
  for (std::int64_t i = 0; i < target.volume(); ++i)
    t[i] = target.cells[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
  return dice_loss_dense(p, t, eps);
}

}  // namespace ulm
