#include <gtest/gtest.h>

#include "../oracles.hpp"
#include "helpers.hpp"

using namespace ccil;
using namespace ccil::eval;
using data::Setting;

TEST(Cosine, IdentityOrthogonalAndLoop) {
  Mat<double> a(2, 2);
  a << 3, 0, 0, 2;
  const auto s = cosine_matrix(a, a);
  EXPECT_NEAR(s(0, 0), 1.0, 1e-15);
  EXPECT_EQ(s(0, 1), 0.0);
  std::mt19937_64 rng(1);
  const auto q = tu::random_mat<double>(4, 7, rng), g = tu::random_mat<double>(5, 7, rng);
  const auto c = cosine_matrix(q, g);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 5; ++j) {
      double dot = 0, nq = 0, ng = 0;
      for (int d = 0; d < 7; ++d) dot += q(i, d) * g(j, d), nq += q(i, d) * q(i, d), ng += g(j, d) * g(j, d);
      EXPECT_NEAR(c(i, j), dot / std::sqrt(nq * ng), 1e-12);
    }
}

TEST(Cosine, ZeroNormRejectedWithIndex) {
  Mat<double> q = Mat<double>::Ones(3, 2);
  q.row(2).setZero();
  try {
    cosine_matrix(q, Mat<double>::Ones(1, 2));
    FAIL();
  } catch (const std::exception& e) {
    EXPECT_NE(std::string(e.what()).find("2"), std::string::npos);
  }
}

TEST(CmcMap, SinglePositiveAtRankTwo) {
  Mat<double> sim(1, 3);
  sim << 0.9, 0.5, 0.1;
  SampleMeta q{{0}, {0}, {0}};
  SampleMeta g{{1, 0, 2}, {5, 1, 6}, {1, 1, 1}};
  const auto r = cmc_map(sim, q, g, Setting::clothes_changing);
  EXPECT_EQ(r.cmc, (std::vector<double>{0, 1, 1}));
  EXPECT_EQ(r.map, 0.5);
  EXPECT_EQ(r.n_valid_queries, 1);
}

TEST(CmcMap, TopMatch) {
  Mat<double> sim(1, 2);
  sim << 0.9, 0.5;
  const auto r = cmc_map(sim, SampleMeta{{0}, {0}, {0}}, SampleMeta{{0, 1}, {1, 1}, {1, 1}}, Setting::standard);
  EXPECT_EQ(r.rank(1), 1.0);
  EXPECT_EQ(r.map, 1.0);
}

TEST(CmcMap, JunkRules) {
  Mat<double> sim(1, 3);
  sim << 0.9, 0.8, 0.1;
  SampleMeta q{{0}, {0}, {0}};
  // entry 0: same id, same camera -> always junk; entry 1: same id, same clothes, other camera
  SampleMeta g{{0, 0, 0}, {1, 0, 1}, {0, 1, 1}};
  const auto std_r = cmc_map(sim, q, g, Setting::standard);
  EXPECT_EQ(std_r.rank(1), 1.0);
  const auto cc = cmc_map(sim, q, g, Setting::clothes_changing);
  EXPECT_EQ(cc.rank(1), 1.0);  // only entry 2 remains
  SampleMeta only_junk{{0, 0}, {0, 1}, {1, 0}};
  EXPECT_THROW(cmc_map(Mat<double>::Ones(1, 2), q, only_junk, Setting::clothes_changing), DataError);
}

TEST(CmcMap, DropsQueriesWithoutMatch) {
  Mat<double> sim(2, 2);
  sim << 0.1, 0.9, 0.3, 0.2;
  SampleMeta q{{0, 7}, {0, 9}, {0, 0}};
  SampleMeta g{{1, 0}, {2, 3}, {1, 1}};
  const auto r = cmc_map(sim, q, g, Setting::clothes_changing);
  EXPECT_EQ(r.n_valid_queries, 1);
  EXPECT_EQ(r.rank(1), 1.0);
}

TEST(CmcMap, ExhaustiveOracleOnRandomInstances) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto in = oracle::random_instance(rng);
    ASSERT_TRUE(oracle::retrieval_matches(in.sim, in.q, in.g, Setting::clothes_changing)) << trial;
    ASSERT_TRUE(oracle::retrieval_matches(in.sim, in.q, in.g, Setting::standard)) << trial;
  }
}

TEST(CmcMap, MetricsBounded) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const auto in = oracle::random_instance(rng);
    try {
      const auto r = cmc_map(in.sim, in.q, in.g, Setting::standard);
      for (std::size_t k = 1; k < r.cmc.size(); ++k) EXPECT_LE(r.cmc[k - 1], r.cmc[k]);
      EXPECT_LE(r.cmc.back(), 1.0);
      EXPECT_GE(r.map, 0.0);
      EXPECT_LE(r.map, 1.0);
    } catch (const DataError&) {
    }
  }
}

TEST(SingleShot, OnePerIdentityEqualsMultiShot) {
  std::mt19937_64 rng(4);
  const auto qf = tu::random_mat<double>(6, 5, rng), gf = tu::random_mat<double>(4, 5, rng);
  SampleMeta q{{0, 1, 2, 3, 0, 1}, {0, 2, 4, 6, 0, 2}, {0, 0, 0, 0, 1, 1}};
  SampleMeta g{{3, 2, 1, 0}, {7, 5, 3, 1}, {1, 1, 2, 2}};
  for (auto s : {Setting::clothes_changing, Setting::standard}) {
    const auto ms = multi_shot_eval(qf, gf, q, g, s);
    const auto ss = single_shot_eval(qf, gf, q, g, s, 10, 5);
    EXPECT_EQ(ss.cmc, ms.cmc);
    EXPECT_EQ(ss.map, ms.map);
    EXPECT_EQ(ss.n_valid_queries, ms.n_valid_queries);
  }
}

TEST(SingleShot, DeterministicAndSeedSensitive) {
  std::mt19937_64 rng(5);
  const auto qf = tu::random_mat<double>(8, 5, rng), gf = tu::random_mat<double>(12, 5, rng);
  SampleMeta q, g;
  for (int i = 0; i < 8; ++i) q.ids.push_back(i % 4), q.clothes.push_back(2 * (i % 4)), q.cams.push_back(0);
  for (int j = 0; j < 12; ++j) g.ids.push_back(j % 4), g.clothes.push_back(2 * (j % 4) + 1), g.cams.push_back(1 + j % 2);
  const auto a = single_shot_eval(qf, gf, q, g, Setting::clothes_changing, 10, 1);
  const auto b = single_shot_eval(qf, gf, q, g, Setting::clothes_changing, 10, 1);
  EXPECT_EQ(a.cmc, b.cmc);
  EXPECT_EQ(a.map, b.map);
  EXPECT_EQ(a.cmc.size(), 4u);
  EXPECT_THROW(single_shot_eval(qf, gf, q, g, Setting::clothes_changing, 0, 1), std::invalid_argument);
}

TEST(EvalReport, JsonFields) {
  RankingResult r{{0.5, 1.0}, 0.75, 2};
  EvalReport rep{Setting::clothes_changing, Protocol::single_shot, 10, 3, r};
  const auto j = rep.to_json();
  EXPECT_EQ(j["rank1"], 0.5);
  EXPECT_EQ(j["rank5"], 1.0);
  EXPECT_EQ(j["setting"], "clothes_changing");
  EXPECT_EQ(parse_protocol("multi-shot"), Protocol::multi_shot);
  EXPECT_THROW(parse_protocol("3-shot"), ConfigError);
}

TEST(MeanAbsCosine, Values) {
  Mat<double> a(2, 2), b(2, 2);
  a << 1, 0, 1, 1;
  b << 0, 1, -1, -1;
  EXPECT_NEAR(mean_abs_cosine(a, b), 0.5, 1e-15);
}
