#include <gtest/gtest.h>

#include "ccil/gradcheck.hpp"
#include "helpers.hpp"

using namespace ccil;
using namespace ccil::model;

namespace {

FeatureMaps<double> random_maps(int C, int B, int H, int W, std::mt19937_64& rng) {
  return {tu::random_mat<double>(C, static_cast<Eigen::Index>(B) * H * W, rng), B, H, W};
}

// Plain loop over [H, W, C] for one sample, independent of the batched layout.
double at(const FeatureMaps<double>& m, int n, int c, int y, int x) {
  return m.values(c, n * m.plane() + y * m.width + x);
}

}  // namespace

TEST(S2m, MatchesScalarOracle) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const int C = 1 + static_cast<int>(rng() % 8), H = 1 + static_cast<int>(rng() % 8), W = 1 + static_cast<int>(rng() % 8);
    const int B = 2;
    auto mi = random_maps(C, B, H, W, rng);
    auto mc = random_maps(C, B, H, W, rng);
    AttentionParams<double> p{tu::random_mat<double>(1, C, rng), tu::random_mat<double>(1, 1, rng),
                              tu::random_mat<double>(1, C, rng), tu::random_mat<double>(1, 1, rng)};
    const auto r = s2m(mi, mc, p);
    for (int n = 0; n < B; ++n)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          double zi = p.b_img(0, 0), zc = p.b_clt(0, 0);
          for (int c = 0; c < C; ++c) zi += p.w_img(0, c) * at(mi, n, c, y, x), zc += p.w_clt(0, c) * at(mc, n, c, y, x);
          const double ai = 1.0 / (1.0 + std::exp(-zi)), ac = 1.0 / (1.0 + std::exp(-zc));
          for (int c = 0; c < C; ++c) {
            ASSERT_NEAR(at(r.m_img, n, c, y, x), ai * (1 - ac) * at(mi, n, c, y, x), 1e-6);
            ASSERT_NEAR(at(r.m_clt, n, c, y, x), ac * (1 - ai) * at(mc, n, c, y, x), 1e-6);
          }
        }
  }
}

TEST(S2m, IdentityAndAnnihilation) {
  std::mt19937_64 rng(2);
  auto mi = random_maps(3, 2, 4, 3, rng);
  auto mc = random_maps(3, 2, 4, 3, rng);
  const Mat<double> ones = Mat<double>::Ones(1, mi.values.cols());
  const Mat<double> zeros = Mat<double>::Zero(1, mi.values.cols());
  auto [oi, oc] = separate(mi, mc, ones, zeros);
  EXPECT_EQ(oi.values, mi.values);
  EXPECT_TRUE((oc.values.array() == 0.0).all());
  const Mat<double> half = Mat<double>::Constant(1, mi.values.cols(), 0.5);
  auto [hi, hc] = separate(mi, mc, half, half);
  EXPECT_TRUE(hi.values.isApprox(0.25 * mi.values, 1e-15));
  EXPECT_TRUE(hc.values.isApprox(0.25 * mc.values, 1e-15));
}

TEST(S2m, AttentionInUnitInterval) {
  std::mt19937_64 rng(3);
  auto m = random_maps(5, 3, 4, 4, rng);
  m.values *= 50.0;
  const auto a = attention_map(m, tu::random_mat<double>(1, 5, rng, 10.0), tu::random_mat<double>(1, 1, rng));
  EXPECT_TRUE((a.array() >= 0.0).all() && (a.array() <= 1.0).all());
}

TEST(S2m, ShapeMismatchRejected) {
  std::mt19937_64 rng(4);
  auto a = random_maps(3, 1, 4, 4, rng);
  auto b = random_maps(4, 1, 4, 4, rng);
  AttentionParams<double> p{Mat<double>::Zero(1, 3), Mat<double>::Zero(1, 1), Mat<double>::Zero(1, 3),
                            Mat<double>::Zero(1, 1)};
  EXPECT_THROW(s2m(a, b, p), ShapeError);
}

TEST(Pool, AverageAndConstant) {
  std::mt19937_64 rng(5);
  auto m = random_maps(3, 2, 4, 5, rng);
  const auto f = average_pool(m);
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 3; ++c) {
      double sum = 0.0;
      for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 5; ++x) sum += at(m, n, c, y, x);
      EXPECT_NEAR(f(n, c), sum / 20.0, 1e-12);
    }
  FeatureMaps<double> k{Mat<double>::Constant(3, 2 * 20, 0.7), 2, 4, 5};
  EXPECT_TRUE((average_pool(k).array() - 0.7).abs().maxCoeff() < 1e-15);
}

TEST(Neck, IdentityWithUnitStatistics) {
  std::mt19937_64 rng(6);
  const auto f = tu::random_mat<double>(4, 6, rng);
  NeckParams<double> n{Mat<double>::Ones(1, 6), Mat<double>::Zero(1, 6), Mat<double>::Zero(1, 6), Mat<double>::Ones(1, 6)};
  const auto g = batch_norm(f, n, Mode::eval, 0.0, static_cast<NeckCache<double>*>(nullptr));
  EXPECT_EQ(g, f);
}

TEST(Model, ZeroWeightsGiveZeroMaps) {
  const auto cfg = tu::tiny_config().model;
  auto p = init_params<double>(cfg, 1);
  p.stem.weight.setZero();
  const auto x = make_batch<double>(std::vector<data::FloatImage>(2, data::FloatImage{3, 16, 8, std::vector<double>(384, 0.0)}));
  EXPECT_TRUE((shared_stem(p, cfg, x).values.array() == 0.0).all());
  FeatureMaps<double> zero{Mat<double>::Zero(cfg.stem_channels, 2 * 8 * 4), 2, 8, 4};
  auto [mi, mc] = branch_forward(p, zero, true);
  EXPECT_TRUE((mi.values.array() == 0.0).all());
  EXPECT_TRUE((mc.values.array() == 0.0).all());
}

TEST(Model, OutputShapes) {
  const auto cfg = tu::tiny_config().model;
  const auto p = init_params<double>(cfg, 2);
  const auto x = make_batch<double>(tu::random_images(3, 16, 8, 2));
  const auto out = forward(p, cfg, x, {Mode::eval, true});
  EXPECT_EQ(out.f_img.rows(), 3);
  EXPECT_EQ(out.f_img.cols(), cfg.feature_dim());
  EXPECT_EQ(out.g_clt.cols(), cfg.feature_dim());
  auto [mi, mc] = branch_forward(p, shared_stem(p, cfg, x), true);
  EXPECT_EQ(mi.channels(), 8);
  EXPECT_EQ(mi.height, 2);  // 16 -> 8 -> 4 -> 2 -> 2
  EXPECT_EQ(mi.width, 1);
}

TEST(Model, RejectsWrongInputSize) {
  const auto cfg = tu::tiny_config().model;
  const auto p = init_params<double>(cfg, 2);
  const auto x = make_batch<double>(tu::random_images(1, 8, 8, 2));
  EXPECT_THROW(forward(p, cfg, x, {Mode::eval, true}), ShapeError);
}

TEST(Model, EvalDeterministic) {
  const auto cfg = tu::tiny_config().model;
  const auto p = init_params<double>(cfg, 3);
  const auto x = make_batch<double>(tu::random_images(4, 16, 8, 3));
  const auto a = forward(p, cfg, x, {Mode::eval, true});
  const auto b = forward(p, cfg, x, {Mode::eval, true});
  EXPECT_EQ(a.f_img, b.f_img);
  EXPECT_EQ(a.f_clt, b.f_clt);
}

TEST(Model, NoCrossSampleLeakage) {
  const auto cfg = tu::tiny_config().model;
  const auto p = init_params<double>(cfg, 4);
  auto imgs = tu::random_images(4, 16, 8, 4);
  const auto a = forward(p, cfg, make_batch<double>(imgs), {Mode::eval, true});
  for (auto& v : imgs[2].data) v = 1.0 - v;
  const auto b = forward(p, cfg, make_batch<double>(imgs), {Mode::eval, true});
  for (int i : {0, 1, 3}) {
    EXPECT_EQ(a.f_img.row(i), b.f_img.row(i));
    EXPECT_EQ(a.g_clt.row(i), b.g_clt.row(i));
  }
  EXPECT_NE(a.f_img.row(2), b.f_img.row(2));
  // the conv blocks themselves are per-sample in training mode too
  const auto sa = shared_stem(p, cfg, make_batch<double>(tu::random_images(4, 16, 8, 4)));
  const auto sb = shared_stem(p, cfg, make_batch<double>(imgs));
  const auto plane = sa.plane();
  EXPECT_EQ(sa.values.middleCols(0, 2 * plane), sb.values.middleCols(0, 2 * plane));
}

TEST(Model, S2mOffIsPassThrough) {
  const auto cfg = tu::tiny_config().model;
  const auto p = init_params<double>(cfg, 5);
  const auto shared = shared_stem(p, cfg, make_batch<double>(tu::random_images(2, 16, 8, 5)));
  auto [mi, mc] = branch_forward(p, shared, false);
  FeatureMaps<double> ri = conv_relu(p.img[0], shared, static_cast<ConvCache<double>*>(nullptr));
  FeatureMaps<double> rc = conv_relu(p.clt[0], shared, static_cast<ConvCache<double>*>(nullptr));
  for (std::size_t b = 1; b < 3; ++b) {
    ri = conv_relu(p.img[b], ri, static_cast<ConvCache<double>*>(nullptr));
    rc = conv_relu(p.clt[b], rc, static_cast<ConvCache<double>*>(nullptr));
  }
  EXPECT_EQ(mi.values, ri.values);
  EXPECT_EQ(mc.values, rc.values);
}

TEST(Model, GroupNormNormalisesEachGroup) {
  std::mt19937_64 rng(7);
  Mat<double> z = tu::random_mat<double>(4, 2 * 6, rng, 3.0);
  Mat<double> inv_std;
  const Mat<double> gamma = Mat<double>::Ones(4, 1), beta = Mat<double>::Zero(4, 1);
  group_norm<double>(z, 2, 2, 6, gamma, beta, inv_std);
  for (int n = 0; n < 2; ++n)
    for (int g = 0; g < 2; ++g) {
      const auto blk = z.block(g * 2, n * 6, 2, 6);
      EXPECT_NEAR(blk.mean(), 0.0, 1e-12);
      EXPECT_NEAR(blk.array().square().mean(), 1.0, 1e-4);
    }
}

TEST(Model, ConfigValidation) {
  ModelConfig c;
  c.norm_groups = 3;  // does not divide 32
  EXPECT_THROW(c.validate(), ConfigError);
  c.norm_groups = 0;
  EXPECT_NO_THROW(c.validate());
}

TEST(Model, ForwardGradientMatchesFiniteDifferences) {
  // scalar function sum(f_img * R) of the full forward pass in training mode
  const auto cfg = tu::tiny_config().model;
  auto p = init_params<double>(cfg, 8);
  std::mt19937_64 rng(8);
  p.visit_learnable([&](const std::string&, Mat<double>& m) { m += tu::random_mat<double>(m.rows(), m.cols(), rng, 0.05); });
  const auto x = make_batch<double>(tu::random_images(4, 16, 8, 8));
  const Mat<double> R = tu::random_mat<double>(4, cfg.feature_dim(), rng);
  auto value = [&] { return (forward(p, cfg, x, {Mode::train, true}).f_img.array() * R.array()).sum(); };
  ForwardCache<double> cache;
  forward(p, cfg, x, {Mode::train, true}, &cache);
  auto grad = p.zeros_like();
  backward(p, cfg, cache, FeatureGrads<double>{R, {}, {}, {}}, grad);
  std::vector<double*> coords;
  std::vector<double> an;
  p.visit_learnable([&](const std::string&, Mat<double>& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) coords.push_back(m.data() + i);
  });
  grad.visit_learnable([&](const std::string&, Mat<double>& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) an.push_back(m.data()[i]);
  });
  const auto r = loss::finite_diff_check(value, std::span<double* const>(coords), std::span<const double>(an), 200, 1e-6, 1);
  EXPECT_LE(r.max_rel_error, 1e-4) << "analytic " << r.worst_analytic << " numeric " << r.worst_numeric;
}
