#pragma once

// Retrieval evaluation: cosine ranking, CMC and mAP under the
// clothes-changing and standard settings, single- and multi-shot galleries.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "ccil/common.hpp"
#include "ccil/datagen.hpp"

namespace ccil::eval {

using data::Setting;

struct SampleMeta {
  std::vector<int> ids;
  std::vector<int> clothes;
  std::vector<int> cams;

  std::size_t size() const { return ids.size(); }

  static SampleMeta from(const data::DatasetManifest& m) {
    SampleMeta s;
    for (const auto& r : m.records) {
      s.ids.push_back(r.identity_label);
      s.clothes.push_back(r.clothes_label);
      s.cams.push_back(r.camera_id);
    }
    return s;
  }

  SampleMeta subset(const std::vector<std::size_t>& idx) const {
    SampleMeta s;
    for (auto i : idx) {
      s.ids.push_back(ids[i]);
      s.clothes.push_back(clothes[i]);
      s.cams.push_back(cams[i]);
    }
    return s;
  }
};

struct RankingResult {
  std::vector<double> cmc;  // cmc[k-1] = fraction of valid queries matched within rank k
  double map = 0.0;
  int n_valid_queries = 0;

  double rank(int k) const {
    if (cmc.empty()) return 0.0;
    return cmc[static_cast<std::size_t>(std::min<int>(k, static_cast<int>(cmc.size())) - 1)];
  }
};

/// Rows of q against rows of g.
inline Mat<double> cosine_matrix(const Mat<double>& q, const Mat<double>& g) {
  require_shape(q.cols() == g.cols(), "query and gallery features differ in width");
  auto normalise = [](const Mat<double>& x, const char* what) {
    Mat<double> out = x;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const double n = x.row(i).norm();
      if (!(n > 0.0)) throw std::invalid_argument(std::string("zero-norm ") + what + " feature at index " + std::to_string(i));
      out.row(i) /= n;
    }
    return out;
  };
  return normalise(q, "query") * normalise(g, "gallery").transpose();
}

/// Gallery order for one query: similarity descending, ties by ascending index.
inline std::vector<std::size_t> rank_gallery(const Mat<double>& sim, Eigen::Index row) {
  std::vector<std::size_t> order(static_cast<std::size_t>(sim.cols()));
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const double sa = sim(row, static_cast<Eigen::Index>(a));
    const double sb = sim(row, static_cast<Eigen::Index>(b));
    return sa > sb || (sa == sb && a < b);
  });
  return order;
}

/// Gallery entries sharing identity and camera with the query are ignored;
/// in the clothes-changing setting so are entries sharing identity and
/// clothes. Queries without any remaining true match are dropped.
inline RankingResult cmc_map(const Mat<double>& sim, const SampleMeta& q, const SampleMeta& g, Setting setting) {
  require_shape(static_cast<std::size_t>(sim.rows()) == q.size() && static_cast<std::size_t>(sim.cols()) == g.size(),
                "similarity matrix shape does not match query/gallery metadata");
  RankingResult r;
  r.cmc.assign(g.size(), 0.0);
  double ap_sum = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    const auto order = rank_gallery(sim, static_cast<Eigen::Index>(i));
    std::size_t rank = 0;
    std::size_t hits = 0;
    std::size_t first_hit = 0;
    double precision_sum = 0.0;
    for (std::size_t j : order) {
      const bool same_id = g.ids[j] == q.ids[i];
      if (same_id && g.cams[j] == q.cams[i]) continue;
      if (same_id && setting == Setting::clothes_changing && g.clothes[j] == q.clothes[i]) continue;
      ++rank;
      if (same_id) {
        if (hits == 0) first_hit = rank;
        ++hits;
        precision_sum += static_cast<double>(hits) / static_cast<double>(rank);
      }
    }
    if (hits == 0) continue;
    ++r.n_valid_queries;
    for (std::size_t k = first_hit - 1; k < r.cmc.size(); ++k) r.cmc[k] += 1.0;
    ap_sum += precision_sum / static_cast<double>(hits);
  }
  if (r.n_valid_queries == 0) throw DataError("no query has a valid gallery match");
  for (auto& v : r.cmc) v /= r.n_valid_queries;
  r.map = ap_sum / r.n_valid_queries;
  return r;
}

inline RankingResult multi_shot_eval(const Mat<double>& q_feat, const Mat<double>& g_feat, const SampleMeta& q,
                                     const SampleMeta& g, Setting setting) {
  return cmc_map(cosine_matrix(q_feat, g_feat), q, g, setting);
}

/// One randomly drawn gallery image per identity, repeated and averaged.
/// Repeats that happen to draw the same gallery share one evaluation and are
/// weighted by their count, so a one-image-per-identity gallery reproduces
/// the multi-shot numbers exactly. A draw in which no query has a valid
/// match is left out of the average. n_valid_queries is the minimum over the
/// draws that were used.
inline RankingResult single_shot_eval(const Mat<double>& q_feat, const Mat<double>& g_feat, const SampleMeta& q,
                                      const SampleMeta& g, Setting setting, int repeats = 10,
                                      std::uint64_t seed = 0) {
  if (repeats < 1) throw std::invalid_argument("repeats must be >= 1");
  if (g.size() == 0) throw DataError("empty gallery");
  const Mat<double> sim = cosine_matrix(q_feat, g_feat);
  std::map<int, std::vector<std::size_t>> by_id;
  for (std::size_t j = 0; j < g.size(); ++j) by_id[g.ids[j]].push_back(j);

  std::mt19937_64 rng(derive_seed(seed, 0x5e1));
  std::map<std::vector<std::size_t>, int> draws;
  for (int rep = 0; rep < repeats; ++rep) {
    std::vector<std::size_t> pick;
    for (const auto& [id, idx] : by_id) {
      pick.push_back(idx[std::uniform_int_distribution<std::size_t>(0, idx.size() - 1)(rng)]);
    }
    std::sort(pick.begin(), pick.end());
    ++draws[pick];
  }

  std::vector<std::pair<RankingResult, int>> results;
  int used = 0;
  for (const auto& [pick, count] : draws) {
    Mat<double> sub(sim.rows(), static_cast<Eigen::Index>(pick.size()));
    for (std::size_t k = 0; k < pick.size(); ++k) sub.col(static_cast<Eigen::Index>(k)) = sim.col(static_cast<Eigen::Index>(pick[k]));
    try {
      results.emplace_back(cmc_map(sub, q, g.subset(pick), setting), count);
      used += count;
    } catch (const DataError&) {
    }
  }
  if (results.empty()) throw DataError("no single-shot draw has a query with a valid gallery match");

  RankingResult avg;
  avg.cmc.assign(by_id.size(), 0.0);
  avg.n_valid_queries = static_cast<int>(q.size());
  for (const auto& [r, count] : results) {
    const double w = static_cast<double>(count) / static_cast<double>(used);
    for (std::size_t k = 0; k < avg.cmc.size(); ++k) avg.cmc[k] += w * r.cmc[k];
    avg.map += w * r.map;
    avg.n_valid_queries = std::min(avg.n_valid_queries, r.n_valid_queries);
  }
  return avg;
}

enum class Protocol { single_shot, multi_shot };

inline Protocol parse_protocol(const std::string& s) {
  if (s == "single-shot" || s == "single_shot") return Protocol::single_shot;
  if (s == "multi-shot" || s == "multi_shot") return Protocol::multi_shot;
  throw ConfigError("unknown protocol '" + s + "'");
}

inline std::string to_string(Protocol p) { return p == Protocol::single_shot ? "single-shot" : "multi-shot"; }

struct EvalReport {
  Setting setting = Setting::clothes_changing;
  Protocol protocol = Protocol::single_shot;
  int repeats = 10;
  std::uint64_t seed = 0;
  RankingResult result;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["setting"] = std::string(data::to_string(setting));
    j["protocol"] = to_string(protocol);
    j["repeats"] = protocol == Protocol::single_shot ? repeats : 1;
    j["seed"] = seed;
    j["rank1"] = result.rank(1);
    j["rank5"] = result.rank(5);
    j["rank10"] = result.rank(10);
    j["mAP"] = result.map;
    j["n_valid_queries"] = result.n_valid_queries;
    return j;
  }
};

inline EvalReport evaluate(const Mat<double>& q_feat, const Mat<double>& g_feat, const SampleMeta& q,
                           const SampleMeta& g, Setting setting, Protocol protocol, int repeats, std::uint64_t seed) {
  EvalReport rep{setting, protocol, repeats, seed, {}};
  rep.result = protocol == Protocol::single_shot ? single_shot_eval(q_feat, g_feat, q, g, setting, repeats, seed)
                                                 : multi_shot_eval(q_feat, g_feat, q, g, setting);
  return rep;
}

/// Mean |cos(a_i, b_i)| over paired rows.
inline double mean_abs_cosine(const Mat<double>& a, const Mat<double>& b) {
  require_shape(a.rows() == b.rows() && a.cols() == b.cols(), "paired features must have equal shapes");
  if (a.rows() == 0) return 0.0;
  double sum = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const double den = a.row(i).norm() * b.row(i).norm();
    sum += den > 0.0 ? std::abs(a.row(i).dot(b.row(i))) / den : 0.0;
  }
  return sum / static_cast<double>(a.rows());
}

}  // namespace ccil::eval
