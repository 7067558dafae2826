#include "ulm/conv.hpp"

#include "ulm/rng.hpp"
#include "oracles.hpp"

#include <doctest.h>

#include <cmath>
#include <set>

using namespace ulm;

namespace {

// Max abs difference between the sparse result and the dense-conv oracle over
// the sparse output coordinate set.
template <typename S>
double max_abs_vs_oracle(const SparseTensor<S>& x, const ConvParams<S>& p,
                         const SparseTensor<S>& out) {
  const auto xd = to_dense(x);
  double worst = 0.0;
  for (Eigen::Index j = 0; j < out.site_count(); ++j) {
    AxisVec coord(out.axes());
    for (Eigen::Index a = 0; a < out.axes(); ++a) coord[a] = out.coords()(j, a);
    const auto want = oracle::dense_conv_at(xd, p, x.stride(), coord);
    for (Eigen::Index c = 0; c < out.channels(); ++c)
      worst = std::max(worst,
                       std::abs(static_cast<double>(want[c]) -
                                static_cast<double>(out.features()(j, c))));
  }
  return worst;
}

}  // namespace

TEST_CASE("1x1 identity kernel reproduces the input") {
  Rng rng(1);
  auto x = oracle::random_sparse<float>(rng, make_axes({1, 6, 6, 4}), 3, 25);
  ConvParams<float> p;
  p.kernel_size = make_axes({1, 1, 1});
  p.stride = make_axes({1, 1, 1});
  p.dilation = make_axes({1, 1, 1});
  p.mode = ConvMode::kLatticePreserving;
  p.weights = FeatureMatrix<float>::Identity(3, 3);
  p.bias.setZero(3);
  auto y = sparse_conv_forward(x, p);
  CHECK(y.same_coords_as(x));
  CHECK((y.features().array() == x.features().array()).all());
}

TEST_CASE("single active site sees only the center tap") {
  Rng rng(2);
  CoordMatrix c(1, 3);
  c << 0, 4, 5;
  FeatureMatrix<float> f(1, 2);
  f << 0.7f, -0.3f;
  SparseTensor<float> x(c, f, unit_stride(3), make_axes({1, 9, 9}));
  auto p = oracle::random_conv<float>(rng, make_axes({3, 3}), make_axes({1, 1}), 2, 2,
                                      ConvMode::kLatticePreserving);
  auto y = sparse_conv_forward(x, p);
  REQUIRE(y.site_count() == 1);
  // Center offset of a 3x3 kernel is (1,1) -> flat offset 4.
  Eigen::RowVector2f want = f.row(0) * p.offset_weights(4) + p.bias;
  CHECK(std::abs(y.features()(0, 0) - want[0]) < 1e-6f);
  CHECK(std::abs(y.features()(0, 1) - want[1]) < 1e-6f);
}

TEST_CASE("lattice-preserving conv equals dense convolution on random 12x12x8 input") {
  Rng rng(3);
  auto x = oracle::random_sparse<float>(rng, make_axes({1, 12, 12, 8}), 2, 120);
  auto p = oracle::random_conv<float>(rng, make_axes({3, 3, 3}), make_axes({1, 1, 1}),
                                      2, 3, ConvMode::kLatticePreserving);
  auto y = sparse_conv_forward(x, p);
  CHECK(y.same_coords_as(x));
  CHECK(max_abs_vs_oracle(x, p, y) < 1e-5);
}

TEST_CASE("downsampling conv emits distinct quantized coords and dense values") {
  Rng rng(4);
  auto x = oracle::random_sparse<float>(rng, make_axes({1, 8, 8, 8}), 2, 60);
  auto p = oracle::random_conv<float>(rng, make_axes({1, 1, 2}), make_axes({1, 1, 2}),
                                      2, 2, ConvMode::kDownsample);
  auto y = sparse_conv_forward(x, p);
  CHECK((y.stride().array() == make_axes({1, 1, 1, 2}).array()).all());
  // Output coordinate set == distinct quantized input coords.
  std::set<std::vector<std::int32_t>> want;
  for (Eigen::Index i = 0; i < x.site_count(); ++i)
    want.insert({x.coords()(i, 0), x.coords()(i, 1), x.coords()(i, 2),
                 static_cast<std::int32_t>(x.coords()(i, 3) / 2 * 2)});
  REQUIRE(y.site_count() == static_cast<Eigen::Index>(want.size()));
  for (Eigen::Index j = 0; j < y.site_count(); ++j)
    CHECK(want.count({y.coords()(j, 0), y.coords()(j, 1), y.coords()(j, 2),
                      y.coords()(j, 3)}) == 1);
  CHECK(max_abs_vs_oracle(x, p, y) < 1e-5);
}

TEST_CASE("dilated conv matches the dense oracle") {
  Rng rng(5);
  auto x = oracle::random_sparse<float>(rng, make_axes({1, 10, 10}), 2, 40);
  auto p = oracle::random_conv<float>(rng, make_axes({3, 3}), make_axes({1, 1}), 2, 2,
                                      ConvMode::kLatticePreserving);
  p.dilation = make_axes({2, 2});
  auto y = sparse_conv_forward(x, p);
  CHECK(max_abs_vs_oracle(x, p, y) < 1e-5);
}

TEST_CASE("channel mismatch is rejected") {
  Rng rng(6);
  auto x = oracle::random_sparse<float>(rng, make_axes({1, 5, 5}), 3, 10);
  auto p = oracle::random_conv<float>(rng, make_axes({3, 3}), make_axes({1, 1}), 2, 2,
                                      ConvMode::kLatticePreserving);
  CHECK_THROWS_WITH_AS(sparse_conv_forward(x, p), "channel count mismatch",
                       std::invalid_argument);
}

TEST_CASE("zero output gradient produces zero input and weight gradients") {
  Rng rng(7);
  auto x = oracle::random_sparse<float>(rng, make_axes({1, 6, 6}), 2, 15);
  auto p = oracle::random_conv<float>(rng, make_axes({3, 3}), make_axes({1, 1}), 2, 2,
                                      ConvMode::kLatticePreserving);
  auto g = conv_geometry(x, p);
  auto y = sparse_conv_forward(x, p, g);
  auto grads = sparse_conv_backward(
      x, p, y.with_features(FeatureMatrix<float>::Zero(y.site_count(), 2)), g);
  CHECK((grads.input.array() == 0.0f).all());
  CHECK((grads.weights.array() == 0.0f).all());
  CHECK((grads.bias.array() == 0.0f).all());
}

TEST_CASE("scalar chain rule on a single site with a 1x1 kernel") {
  CoordMatrix c(1, 2);
  c << 0, 3;
  FeatureMatrix<float> f(1, 1);
  f << 2.5f;
  SparseTensor<float> x(c, f, unit_stride(2), make_axes({1, 8}));
  ConvParams<float> p;
  p.kernel_size = make_axes({1});
  p.stride = make_axes({1});
  p.dilation = make_axes({1});
  p.mode = ConvMode::kLatticePreserving;
  p.weights = FeatureMatrix<float>::Constant(1, 1, 1.75f);
  p.bias.setZero(1);
  auto g = conv_geometry(x, p);
  auto grads = sparse_conv_backward(
      x, p, SparseTensor<float>(c, FeatureMatrix<float>::Constant(1, 1, 1.0f),
                                unit_stride(2), make_axes({1, 8})),
      g);
  CHECK(grads.weights(0, 0) == 2.5f);  // grad_weight = input feature
  CHECK(grads.input(0, 0) == 1.75f);   // grad_x = weight
  CHECK(grads.bias[0] == 1.0f);
}

// Central finite differences of the probe loss L = sum(R . conv(x)) against
// the analytic backward pass.
template <typename S>
void check_conv_gradients(double step, double tol, std::uint64_t seed) {
  Rng rng(seed);
  auto x = oracle::random_sparse<S>(rng, make_axes({1, 6, 6, 4}), 2, 20);
  auto p = oracle::random_conv<S>(rng, make_axes({3, 3, 3}), make_axes({1, 1, 1}), 2,
                                  2, ConvMode::kLatticePreserving);
  auto geom = conv_geometry(x, p);
  FeatureMatrix<S> probe(geom.out_coords.rows(), 2);
  for (Eigen::Index i = 0; i < probe.size(); ++i)
    probe.data()[i] = static_cast<S>(rng.uniform(-1.0, 1.0));

  auto loss = [&](const SparseTensor<S>& in, const ConvParams<S>& params) {
    auto out = sparse_conv_forward(in, params, geom);
    return static_cast<double>(
        (out.features().array() * probe.array()).template cast<double>().sum());
  };
  auto grads = sparse_conv_backward(
      x, p, SparseTensor<S>(geom.out_coords, probe, geom.out_stride, x.shape()), geom);

  double scale = std::max(grads.weights.template cast<double>().cwiseAbs().maxCoeff(),
                          grads.input.template cast<double>().cwiseAbs().maxCoeff());
  // Every weight.
  for (Eigen::Index i = 0; i < p.weights.size(); ++i) {
    ConvParams<S> pp = p;
    pp.weights.data()[i] += static_cast<S>(step);
    const double up = loss(x, pp);
    pp.weights.data()[i] -= static_cast<S>(2 * step);
    const double dn = loss(x, pp);
    const double fd = (up - dn) / (2 * step);
    CHECK(oracle::rel_err(fd, static_cast<double>(grads.weights.data()[i]), scale) < tol);
  }
  // Bias.
  for (Eigen::Index i = 0; i < p.bias.size(); ++i) {
    ConvParams<S> pp = p;
    pp.bias[i] += static_cast<S>(step);
    const double up = loss(x, pp);
    pp.bias[i] -= static_cast<S>(2 * step);
    const double dn = loss(x, pp);
    const double fd = (up - dn) / (2 * step);
    CHECK(oracle::rel_err(fd, static_cast<double>(grads.bias[i]), scale) < tol);
  }
  // Ten random input features.
  for (int t = 0; t < 10; ++t) {
    const Eigen::Index i = rng.uniform_int(0, x.site_count() - 1);
    const Eigen::Index ch = rng.uniform_int(0, 1);
    FeatureMatrix<S> up_f = x.features(), dn_f = x.features();
    up_f(i, ch) += static_cast<S>(step);
    dn_f(i, ch) -= static_cast<S>(step);
    const double up = loss(x.with_features(up_f), p);
    const double dn = loss(x.with_features(dn_f), p);
    const double fd = (up - dn) / (2 * step);
    CHECK(oracle::rel_err(fd, static_cast<double>(grads.input(i, ch)), scale) < tol);
  }
}

TEST_CASE("conv backward matches central finite differences (f32)") {
  check_conv_gradients<float>(1e-3, 1e-3, 101);
}

TEST_CASE("conv backward matches central finite differences (f64)") {
  check_conv_gradients<double>(1e-5, 1e-6, 102);
}

TEST_CASE("gradient with mismatched coordinates is rejected") {
  Rng rng(8);
  auto x = oracle::random_sparse<float>(rng, make_axes({1, 6, 6}), 2, 10);
  auto p = oracle::random_conv<float>(rng, make_axes({3, 3}), make_axes({1, 1}), 2, 2,
                                      ConvMode::kLatticePreserving);
  auto g = conv_geometry(x, p);
  CoordMatrix other = x.coords();
  other(0, 1) = (other(0, 1) + 1) % 6;
  bool ok = true;
  try {
    SparseTensor<float> bad(other, FeatureMatrix<float>::Zero(x.site_count(), 2),
                            x.stride(), x.shape());
    sparse_conv_backward(x, p, bad, g);
    ok = false;
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()) == "gradient/output coordinate mismatch");
  }
  CHECK(ok);
}

TEST_CASE("upsample with factor one keeps the coordinate set") {
  Rng rng(9);
  auto x = oracle::random_sparse<float>(rng, make_axes({1, 6, 6}), 2, 10);
  auto p = oracle::random_conv<float>(rng, make_axes({1, 1}), make_axes({1, 1}), 2, 2,
                                      ConvMode::kGenerativeUpsample);
  auto y = generative_upsample(x, make_axes({1, 1}), p);
  CHECK(y.same_coords_as(x));
}

TEST_CASE("one site upsampled by 2x2 emits exactly four children") {
  CoordMatrix c(1, 3);
  c << 0, 4, 6;
  FeatureMatrix<float> f(1, 1);
  f << 1.0f;
  SparseTensor<float> x(c, f, make_axes({1, 2, 2}), make_axes({1, 8, 8}));
  Rng rng(10);
  auto p = oracle::random_conv<float>(rng, make_axes({2, 2}), make_axes({2, 2}), 1, 1,
                                      ConvMode::kGenerativeUpsample);
  auto y = generative_upsample(x, make_axes({2, 2}), p);
  REQUIRE(y.site_count() == 4);
  CHECK((y.stride().array() == make_axes({1, 1, 1}).array()).all());
  std::set<std::pair<int, int>> got;
  for (Eigen::Index i = 0; i < 4; ++i)
    got.emplace(y.coords()(i, 1), y.coords()(i, 2));
  std::set<std::pair<int, int>> want{{4, 6}, {4, 7}, {5, 6}, {5, 7}};
  CHECK(got == want);
  // Child features follow the per-offset transposed weights.
  for (Eigen::Index i = 0; i < 4; ++i) {
    const int ox = y.coords()(i, 1) - 4, oy = y.coords()(i, 2) - 6;
    const Eigen::Index offset = ox * 2 + oy;
    const float want_v = p.weights(offset, 0) * 1.0f + p.bias[0];
    CHECK(std::abs(y.features()(i, 0) - want_v) < 1e-6f);
  }
}

TEST_CASE("upsample site count and child-cell containment on random input") {
  Rng rng(11);
  CoordMatrix c(0, 4);
  // Build sites on a stride-2 lattice.
  std::set<std::vector<std::int32_t>> seen;
  std::vector<std::vector<std::int32_t>> rows;
  while (rows.size() < 30) {
    std::vector<std::int32_t> row{
        0, static_cast<std::int32_t>(2 * rng.uniform_int(0, 5)),
        static_cast<std::int32_t>(2 * rng.uniform_int(0, 5)),
        static_cast<std::int32_t>(rng.uniform_int(0, 7))};
    if (seen.insert(row).second) rows.push_back(row);
  }
  CoordMatrix coords(30, 4);
  FeatureMatrix<float> feats(30, 2);
  for (int i = 0; i < 30; ++i) {
    for (int a = 0; a < 4; ++a) coords(i, a) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(a)];
    feats(i, 0) = static_cast<float>(rng.uniform(-1, 1));
    feats(i, 1) = static_cast<float>(rng.uniform(-1, 1));
  }
  SparseTensor<float> x(coords, feats, make_axes({1, 2, 2, 1}), make_axes({1, 12, 12, 8}));
  auto p = oracle::random_conv<float>(rng, make_axes({2, 2, 1}), make_axes({2, 2, 1}),
                                      2, 2, ConvMode::kGenerativeUpsample);
  auto y = generative_upsample(x, make_axes({2, 2, 1}), p);
  CHECK(y.site_count() <= 4 * x.site_count());
  // Parents are unique so no two share children: equality holds.
  CHECK(y.site_count() == 4 * x.site_count());
  // Every output coordinate is a child of an input coordinate.
  for (Eigen::Index i = 0; i < y.site_count(); ++i) {
    CoordRow parent(4);
    parent << y.coords()(i, 0), y.coords()(i, 1) / 2 * 2, y.coords()(i, 2) / 2 * 2,
        y.coords()(i, 3);
    CHECK(x.find(parent) >= 0);
  }
}

TEST_CASE("upsample rejects factors that do not divide the stride") {
  Rng rng(12);
  auto x = oracle::random_sparse<float>(rng, make_axes({1, 6, 6}), 1, 5);  // stride 1
  auto p = oracle::random_conv<float>(rng, make_axes({2, 2}), make_axes({2, 2}), 1, 1,
                                      ConvMode::kGenerativeUpsample);
  CHECK_THROWS_WITH_AS(generative_upsample(x, make_axes({2, 2}), p),
                       "invalid upsample factor", std::invalid_argument);
}

TEST_CASE("upsample backward matches central finite differences (f32)") {
  Rng rng(13);
  // Sites on a stride-2 lattice so a 2x2 upsample applies.
  std::set<std::vector<std::int32_t>> seen;
  std::vector<std::vector<std::int32_t>> rows;
  while (rows.size() < 12) {
    std::vector<std::int32_t> row{0,
                                  static_cast<std::int32_t>(2 * rng.uniform_int(0, 4)),
                                  static_cast<std::int32_t>(2 * rng.uniform_int(0, 4))};
    if (seen.insert(row).second) rows.push_back(row);
  }
  CoordMatrix coords(12, 3);
  FeatureMatrix<float> feats(12, 2);
  for (int i = 0; i < 12; ++i) {
    for (int a = 0; a < 3; ++a) coords(i, a) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(a)];
    feats(i, 0) = static_cast<float>(rng.uniform(-1, 1));
    feats(i, 1) = static_cast<float>(rng.uniform(-1, 1));
  }
  SparseTensor<float> x(coords, feats, make_axes({1, 2, 2}), make_axes({1, 10, 10}));
  auto p = oracle::random_conv<float>(rng, make_axes({2, 2}), make_axes({2, 2}), 2, 2,
                                      ConvMode::kGenerativeUpsample);
  auto geom = conv_geometry(x, p);
  FeatureMatrix<float> probe(geom.out_coords.rows(), 2);
  for (Eigen::Index i = 0; i < probe.size(); ++i)
    probe.data()[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
  auto loss = [&](const SparseTensor<float>& in, const ConvParams<float>& params) {
    auto out = generative_upsample_forward(in, params, geom);
    return (out.features().array() * probe.array()).cast<double>().sum();
  };
  auto grads = generative_upsample_backward(
      x, p, SparseTensor<float>(geom.out_coords, probe, geom.out_stride, x.shape()),
      geom);
  const double scale = grads.weights.cast<double>().cwiseAbs().maxCoeff();
  const double step = 1e-3;
  for (Eigen::Index i = 0; i < p.weights.size(); ++i) {
    ConvParams<float> pp = p;
    pp.weights.data()[i] += static_cast<float>(step);
    const double up = loss(x, pp);
    pp.weights.data()[i] -= static_cast<float>(2 * step);
    const double dn = loss(x, pp);
    CHECK(oracle::rel_err((up - dn) / (2 * step),
                          static_cast<double>(grads.weights.data()[i]), scale) < 1e-3);
  }
  for (int t = 0; t < 10; ++t) {
    const Eigen::Index i = rng.uniform_int(0, x.site_count() - 1);
    const Eigen::Index ch = rng.uniform_int(0, 1);
    FeatureMatrix<float> up_f = x.features(), dn_f = x.features();
    up_f(i, ch) += static_cast<float>(step);
    dn_f(i, ch) -= static_cast<float>(step);
    const double fd =
        (loss(x.with_features(up_f), p) - loss(x.with_features(dn_f), p)) / (2 * step);
    CHECK(oracle::rel_err(fd, static_cast<double>(grads.input(i, ch)), scale) < 1e-3);
  }
}

TEST_CASE("pointwise classifier computes per-site logits") {
  Rng rng(14);
  auto x = oracle::random_sparse<float>(rng, make_axes({1, 7, 7}), 3, 15);
  SUBCASE("zero weights with bias") {
    auto y = pointwise_classifier(x, VectorX<float>::Zero(3).eval(), 3.0f);
    CHECK(y.same_coords_as(x));
    CHECK((y.features().array() == 3.0f).all());
  }
  SUBCASE("one-hot weight selects a channel") {
    VectorX<float> w = VectorX<float>::Zero(3);
    w[1] = 1.0f;
    auto y = pointwise_classifier(x, w, 0.0f);
    CHECK((y.features().col(0).array() == x.features().col(1).array()).all());
  }
  SUBCASE("random head equals per-site dot products") {
    VectorX<float> w(3);
    w << 0.3f, -1.2f, 0.5f;
    auto y = pointwise_classifier(x, w, 0.25f);
    for (Eigen::Index i = 0; i < x.site_count(); ++i) {
      double dot = 0.25;
      for (Eigen::Index c = 0; c < 3; ++c)
        dot += static_cast<double>(x.features()(i, c)) * static_cast<double>(w[c]);
      CHECK(std::abs(dot - static_cast<double>(y.features()(i, 0))) < 1e-6);
    }
  }
}

TEST_CASE("prune keeps exactly the sites above the probability threshold") {
  Rng rng(15);
  auto x = oracle::random_sparse<float>(rng, make_axes({1, 9, 9}), 2, 20);
  FeatureMatrix<float> lg(20, 1);
  for (Eigen::Index i = 0; i < 20; ++i)
    lg(i, 0) = static_cast<float>(rng.uniform(-4.0, 4.0));
  auto logits = x.with_features(lg);
  SUBCASE("large positive logits keep everything") {
    auto y = prune(x, x.with_features(FeatureMatrix<float>::Constant(20, 1, 50.0f)), 0.5);
    CHECK(y.same_coords_as(x));
    CHECK((y.features().array() == x.features().array()).all());
  }
  SUBCASE("large negative logits empty the tensor") {
    auto y = prune(x, x.with_features(FeatureMatrix<float>::Constant(20, 1, -50.0f)), 0.5);
    CHECK(y.site_count() == 0);
  }
  SUBCASE("threshold 0.5 keeps logit >= 0") {
    auto y = prune(x, logits, 0.5);
    std::int64_t expect = 0;
    for (Eigen::Index i = 0; i < 20; ++i)
      if (lg(i, 0) >= 0.0f) ++expect;
    CHECK(y.site_count() == expect);
    for (Eigen::Index i = 0; i < y.site_count(); ++i) {
      const auto src = x.find(y.coords().row(i));
      REQUIRE(src >= 0);
      CHECK(lg(src, 0) >= 0.0f);
    }
  }
  SUBCASE("raising the threshold never adds sites") {
    std::int64_t prev = 21;
    for (double t : {0.1, 0.3, 0.5, 0.7, 0.9}) {
      auto y = prune(x, logits, t);
      CHECK(y.site_count() <= prev);
      prev = y.site_count();
    }
  }
  SUBCASE("coordinate mismatch is rejected") {
    auto other = oracle::random_sparse<float>(rng, make_axes({1, 9, 9}), 1, 20);
    CHECK_THROWS_AS(prune(x, other, 0.5), std::invalid_argument);
  }
}
