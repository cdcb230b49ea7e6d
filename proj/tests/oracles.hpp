#pragma once

// Reference implementations shared by the unit and acceptance tests. They
// are written as plain loops over the definitions and deliberately avoid
// the library's batched code paths.

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "ccil/causal.hpp"
#include "ccil/eval.hpp"

namespace ccil::oracle {

// sum_c P(y | x, c) P(c)
inline std::vector<double> backdoor(const causal::ConditionalTable& t, int x) {
  std::vector<double> out(static_cast<std::size_t>(t.n_y), 0.0);
  for (int y = 0; y < t.n_y; ++y)
    for (int c = 0; c < t.n_c; ++c) out[static_cast<std::size_t>(y)] += t.at(x, c, y) * t.prior_c[static_cast<std::size_t>(c)];
  return out;
}

inline std::vector<double> likelihood(const causal::ConditionalTable& t, int x, const std::vector<double>& p_c_given_x) {
  std::vector<double> out(static_cast<std::size_t>(t.n_y), 0.0);
  for (int y = 0; y < t.n_y; ++y)
    for (int c = 0; c < t.n_c; ++c)
      out[static_cast<std::size_t>(y)] += t.at(x, c, y) * p_c_given_x[static_cast<std::size_t>(x * t.n_c + c)];
  return out;
}

inline std::vector<double> random_simplex(int n, std::mt19937_64& rng) {
  std::exponential_distribution<double> e(1.0);
  std::vector<double> p(static_cast<std::size_t>(n));
  double s = 0.0;
  for (auto& v : p) s += (v = e(rng));
  for (auto& v : p) v /= s;
  return p;
}

inline causal::ConditionalTable random_table(int n_x, int n_c, int n_y, std::mt19937_64& rng) {
  causal::ConditionalTable t{n_x, n_c, n_y, {}, random_simplex(n_c, rng)};
  for (int x = 0; x < n_x; ++x)
    for (int c = 0; c < n_c; ++c) {
      const auto s = random_simplex(n_y, rng);
      t.p_y_given_xc.insert(t.p_y_given_xc.end(), s.begin(), s.end());
    }
  return t;
}

// z_i = sum_j p_j act(W [f_i; b_j] + beta), one scalar at a time.
inline Mat<double> intervene(const Mat<double>& f, const Mat<double>& bank, const std::vector<double>& prior,
                             const causal::FusionParams<double>& fusion) {
  const Eigen::Index D = f.cols(), Dout = fusion.weight.rows();
  Mat<double> z = Mat<double>::Zero(f.rows(), Dout);
  for (Eigen::Index i = 0; i < f.rows(); ++i)
    for (Eigen::Index j = 0; j < bank.rows(); ++j)
      for (Eigen::Index k = 0; k < Dout; ++k) {
        double pre = fusion.bias(k, 0);
        for (Eigen::Index d = 0; d < D; ++d) pre += fusion.weight(k, d) * f(i, d) + fusion.weight(k, D + d) * bank(j, d);
        double a = pre;
        if (fusion.act == causal::Activation::tanh) a = std::tanh(pre);
        if (fusion.act == causal::Activation::relu) a = std::max(pre, 0.0);
        z(i, k) += prior[static_cast<std::size_t>(j)] * a;
      }
  return z;
}

struct Brute {
  std::vector<double> cmc;
  double ap_sum = 0.0;
  int valid = 0;
};

// Retrieval metrics without sorting: the rank of each kept gallery entry is
// one plus the number of kept entries ahead of it (higher score, or equal
// score and lower index).
inline Brute retrieval(const Mat<double>& sim, const eval::SampleMeta& q, const eval::SampleMeta& g,
                       data::Setting setting) {
  Brute b;
  const auto G = g.size();
  b.cmc.assign(G, 0.0);
  for (std::size_t i = 0; i < q.size(); ++i) {
    std::vector<bool> keep(G, true);
    for (std::size_t j = 0; j < G; ++j) {
      const bool same_id = g.ids[j] == q.ids[i];
      if (same_id && g.cams[j] == q.cams[i]) keep[j] = false;
      if (same_id && setting == data::Setting::clothes_changing && g.clothes[j] == q.clothes[i]) keep[j] = false;
    }
    std::vector<std::size_t> pos_ranks;
    for (std::size_t j = 0; j < G; ++j) {
      if (!keep[j] || g.ids[j] != q.ids[i]) continue;
      std::size_t ahead = 0;
      for (std::size_t k = 0; k < G; ++k) {
        if (!keep[k] || k == j) continue;
        const double sk = sim(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k));
        const double sj = sim(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
        if (sk > sj || (sk == sj && k < j)) ++ahead;
      }
      pos_ranks.push_back(ahead + 1);
    }
    if (pos_ranks.empty()) continue;
    std::sort(pos_ranks.begin(), pos_ranks.end());
    ++b.valid;
    for (std::size_t r = pos_ranks.front(); r <= G; ++r) b.cmc[r - 1] += 1.0;
    double prec = 0.0;
    for (std::size_t h = 0; h < pos_ranks.size(); ++h) prec += static_cast<double>(h + 1) / static_cast<double>(pos_ranks[h]);
    b.ap_sum += prec / static_cast<double>(pos_ranks.size());
  }
  return b;
}

// Returns true when the library result equals the brute-force one exactly.
inline bool retrieval_matches(const Mat<double>& sim, const eval::SampleMeta& q, const eval::SampleMeta& g,
                              data::Setting setting) {
  const auto b = retrieval(sim, q, g, setting);
  if (b.valid == 0) {
    try {
      eval::cmc_map(sim, q, g, setting);
      return false;
    } catch (const DataError&) {
      return true;
    }
  }
  const auto r = eval::cmc_map(sim, q, g, setting);
  if (r.n_valid_queries != b.valid || r.map != b.ap_sum / b.valid) return false;
  for (std::size_t k = 0; k < b.cmc.size(); ++k)
    if (r.cmc[k] != b.cmc[k] / b.valid) return false;
  return true;
}

// Small random instance: labels from tiny alphabets so that ties, junk and
// queries without a match all occur.
struct RetrievalInstance {
  Mat<double> sim;
  eval::SampleMeta q, g;
};

inline RetrievalInstance random_instance(std::mt19937_64& rng) {
  auto pick = [&](int n) { return static_cast<int>(rng() % static_cast<std::uint64_t>(n)); };
  RetrievalInstance in;
  const int Q = 1 + pick(6), G = 1 + pick(6);
  for (int i = 0; i < Q; ++i) in.q.ids.push_back(pick(3)), in.q.clothes.push_back(pick(2)), in.q.cams.push_back(pick(2));
  for (int j = 0; j < G; ++j) in.g.ids.push_back(pick(3)), in.g.clothes.push_back(pick(2)), in.g.cams.push_back(pick(2));
  in.sim.resize(Q, G);
  for (Eigen::Index k = 0; k < in.sim.size(); ++k) in.sim.data()[k] = 0.25 * pick(5) - 0.5;
  return in;
}

}  // namespace ccil::oracle
