#pragma once

// Backdoor adjustment over clothes: P(Y | do(X)) = sum_c P(Y | X, c) P(c).
//
// The deep implementation keeps one descriptor per outfit in an EMA memory
// bank, fuses the image feature with every bank entry, averages the fused
// features under the empirical clothes prior and classifies the average
// (normalised weighted geometric mean approximation). The exact enumeration
// routines at the bottom are the discrete reference.

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ccil/common.hpp"
#include "ccil/datagen.hpp"
#include "ccil/losses.hpp"

namespace ccil::causal {

template <typename S>
struct ClothesMemoryBank {
  Mat<S> entries;  // M x D, row j <-> clothes label j
  double alpha = 0.9;
  std::vector<std::int64_t> update_counts;

  int size() const { return static_cast<int>(entries.rows()); }
  int dim() const { return static_cast<int>(entries.cols()); }

  /// entry_k <- alpha * entry_k + (1 - alpha) * f
  void update(int k, const RowVec<S>& f) {
    if (k < 0 || k >= size()) throw std::invalid_argument("clothes id " + std::to_string(k) + " outside the bank");
    require_shape(f.cols() == entries.cols(), "bank update width mismatch");
    const S a = static_cast<S>(alpha);
    entries.row(k) = a * entries.row(k) + (S(1) - a) * f;
    ++update_counts[static_cast<std::size_t>(k)];
  }
};

template <typename S>
ClothesMemoryBank<S>& update_bank(ClothesMemoryBank<S>& bank, int k, const RowVec<S>& f) {
  bank.update(k, f);
  return bank;
}

inline void validate_alpha(double alpha) {
  if (!(alpha > 0.0 && alpha <= 1.0)) throw ConfigError("EMA coefficient alpha must be in (0, 1]");
}

/// Small Gaussian entries; deterministic in `seed`.
template <typename S>
ClothesMemoryBank<S> init_bank_random(int M, int D, double alpha, std::uint64_t seed, double scale = 0.01) {
  if (M < 1 || D < 1) throw std::invalid_argument("bank dimensions must be positive");
  validate_alpha(alpha);
  std::mt19937_64 rng(derive_seed(seed, 0xba4c));
  std::normal_distribution<double> n(0.0, scale);
  ClothesMemoryBank<S> b{Mat<S>(M, D), alpha, std::vector<std::int64_t>(static_cast<std::size_t>(M), 0)};
  for (Eigen::Index i = 0; i < b.entries.size(); ++i) b.entries.data()[i] = static_cast<S>(n(rng));
  return b;
}

/// Entry j = mean clothes feature of outfit j over the warm-up pass; outfits
/// without samples stay at zero.
template <typename S>
ClothesMemoryBank<S> init_bank_warmup(const Mat<S>& f_clt, std::span<const int> clothes, int M, double alpha) {
  if (f_clt.rows() == 0) throw std::invalid_argument("warm-up bank initialisation needs a non-empty training set");
  require_shape(static_cast<std::size_t>(f_clt.rows()) == clothes.size(), "one clothes label per feature row");
  validate_alpha(alpha);
  ClothesMemoryBank<S> b{Mat<S>::Zero(M, f_clt.cols()), alpha, std::vector<std::int64_t>(static_cast<std::size_t>(M), 0)};
  std::vector<int> count(static_cast<std::size_t>(M), 0);
  for (Eigen::Index i = 0; i < f_clt.rows(); ++i) {
    const int c = clothes[static_cast<std::size_t>(i)];
    if (c < 0 || c >= M) throw std::invalid_argument("clothes label outside [0, M)");
    b.entries.row(c) += f_clt.row(i);
    ++count[static_cast<std::size_t>(c)];
  }
  for (int c = 0; c < M; ++c)
    if (count[static_cast<std::size_t>(c)] > 0) b.entries.row(c) /= static_cast<S>(count[static_cast<std::size_t>(c)]);
  return b;
}

struct ClothesPrior {
  std::vector<double> probs;
  std::vector<int> absent;  // clothes ids with zero training mass
};

/// Empirical P(C) over the training records.
inline ClothesPrior clothes_prior(const data::DatasetManifest& train) {
  if (train.records.empty()) throw DataError("clothes prior needs a non-empty training set");
  ClothesPrior p;
  p.probs.assign(static_cast<std::size_t>(train.n_clothes), 0.0);
  for (const auto& r : train.records) p.probs.at(static_cast<std::size_t>(r.clothes_label)) += 1.0;
  const double total = static_cast<double>(train.records.size());
  for (std::size_t j = 0; j < p.probs.size(); ++j) {
    if (p.probs[j] == 0.0) p.absent.push_back(static_cast<int>(j));
    p.probs[j] /= total;
  }
  return p;
}

inline void validate_prior(std::span<const double> prior) {
  double sum = 0.0;
  for (double v : prior) {
    if (!(v >= 0.0)) throw std::invalid_argument("clothes prior has a negative entry");
    sum += v;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw std::invalid_argument("clothes prior is not normalised (sum " + std::to_string(sum) + ")");
}

enum class Activation { tanh, identity, relu };

inline Activation parse_activation(const std::string& s) {
  if (s == "tanh") return Activation::tanh;
  if (s == "identity") return Activation::identity;
  if (s == "relu") return Activation::relu;
  throw ConfigError("unknown fusion activation '" + s + "'");
}

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::tanh: return "tanh";
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
  }
  return "tanh";
}

/// Fusion layer act(W [f_x; f_c] + b): W is D' x 2D.
template <typename S>
struct FusionParams {
  Mat<S> weight;
  Mat<S> bias;  // D' x 1
  Activation act = Activation::tanh;

  int in_dim() const { return static_cast<int>(weight.cols() / 2); }
  int out_dim() const { return static_cast<int>(weight.rows()); }
};

/// Intervention classifier: softmax over N identities, weight N x D'.
template <typename S>
struct InterventionHead {
  Mat<S> weight;
  Mat<S> bias;  // N x 1
};

template <typename S>
FusionParams<S> init_fusion(int D, int D_out, Activation act, std::uint64_t seed) {
  std::mt19937_64 rng(derive_seed(seed, 0xf05e));
  std::normal_distribution<double> n(0.0, std::sqrt(1.0 / (2.0 * D)));
  FusionParams<S> f{Mat<S>(D_out, 2 * D), Mat<S>::Zero(D_out, 1), act};
  for (Eigen::Index i = 0; i < f.weight.size(); ++i) f.weight.data()[i] = static_cast<S>(n(rng));
  return f;
}

template <typename S>
InterventionHead<S> init_intervention_head(int D_in, int N, std::uint64_t seed) {
  std::mt19937_64 rng(derive_seed(seed, 0x1c15));
  std::normal_distribution<double> n(0.0, 0.01);
  InterventionHead<S> h{Mat<S>(N, D_in), Mat<S>::Zero(N, 1)};
  for (Eigen::Index i = 0; i < h.weight.size(); ++i) h.weight.data()[i] = static_cast<S>(n(rng));
  return h;
}

namespace detail {

template <typename S>
S activate(Activation a, S x) {
  switch (a) {
    case Activation::tanh: return std::tanh(x);
    case Activation::relu: return x > S(0) ? x : S(0);
    case Activation::identity: return x;
  }
  return x;
}

template <typename S>
S activate_grad(Activation a, S x) {
  switch (a) {
    case Activation::tanh: {
      const S t = std::tanh(x);
      return S(1) - t * t;
    }
    case Activation::relu: return x > S(0) ? S(1) : S(0);
    case Activation::identity: return S(1);
  }
  return S(1);
}

template <typename S>
void check_fusion(const FusionParams<S>& fusion, Eigen::Index D) {
  require_shape(fusion.weight.cols() == 2 * D, "fusion weight must be D' x 2D with D = " + std::to_string(D));
  require_shape(fusion.bias.rows() == fusion.weight.rows() && fusion.bias.cols() == 1, "fusion bias must be D' x 1");
}

}  // namespace detail

template <typename S>
RowVec<S> mlp_feat(const RowVec<S>& f_x, const RowVec<S>& f_c, const FusionParams<S>& fusion) {
  require_shape(f_x.cols() == f_c.cols(), "image and clothes features must share a width");
  detail::check_fusion(fusion, f_x.cols());
  const auto D = f_x.cols();
  RowVec<S> pre = f_x * fusion.weight.leftCols(D).transpose() + f_c * fusion.weight.rightCols(D).transpose();
  pre += fusion.bias.col(0).transpose();
  for (Eigen::Index k = 0; k < pre.cols(); ++k) pre(k) = detail::activate(fusion.act, pre(k));
  return pre;
}

/// z_i = sum_j prior[j] * mlp_feat(f_i, bank[j]).  B x D'.
template <typename S>
Mat<S> intervene(const Mat<S>& f_img, const ClothesMemoryBank<S>& bank, std::span<const double> prior,
                 const FusionParams<S>& fusion) {
  require_shape(static_cast<int>(prior.size()) == bank.size(), "prior and bank must cover the same clothes");
  require_shape(f_img.cols() == bank.entries.cols(), "image feature width differs from bank width");
  detail::check_fusion(fusion, f_img.cols());
  validate_prior(prior);
  const auto D = f_img.cols();
  const Mat<S> a = f_img * fusion.weight.leftCols(D).transpose();
  Mat<S> c = bank.entries * fusion.weight.rightCols(D).transpose();
  c.rowwise() += fusion.bias.col(0).transpose();
  Mat<S> z = Mat<S>::Zero(f_img.rows(), fusion.weight.rows());
  for (Eigen::Index i = 0; i < f_img.rows(); ++i) {
    for (Eigen::Index j = 0; j < c.rows(); ++j) {
      const S w = static_cast<S>(prior[static_cast<std::size_t>(j)]);
      if (w == S(0)) continue;
      for (Eigen::Index k = 0; k < z.cols(); ++k) z(i, k) += w * detail::activate(fusion.act, a(i, k) + c(j, k));
    }
  }
  return z;
}

/// Gradient of intervene() given dL/dz: accumulates into `grad` (fusion
/// weights) and returns dL/df_img. Bank entries receive no gradient.
template <typename S>
Mat<S> intervene_backward(const Mat<S>& f_img, const ClothesMemoryBank<S>& bank, std::span<const double> prior,
                          const FusionParams<S>& fusion, const Mat<S>& dz, FusionParams<S>& grad) {
  const auto D = f_img.cols();
  const Mat<S> a = f_img * fusion.weight.leftCols(D).transpose();
  Mat<S> c = bank.entries * fusion.weight.rightCols(D).transpose();
  c.rowwise() += fusion.bias.col(0).transpose();
  Mat<S> da = Mat<S>::Zero(a.rows(), a.cols());
  Mat<S> dc = Mat<S>::Zero(c.rows(), c.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < c.rows(); ++j) {
      const S w = static_cast<S>(prior[static_cast<std::size_t>(j)]);
      if (w == S(0)) continue;
      for (Eigen::Index k = 0; k < a.cols(); ++k) {
        const S d = dz(i, k) * w * detail::activate_grad(fusion.act, a(i, k) + c(j, k));
        da(i, k) += d;
        dc(j, k) += d;
      }
    }
  }
  grad.weight.leftCols(D).noalias() += da.transpose() * f_img;
  grad.weight.rightCols(D).noalias() += dc.transpose() * bank.entries;
  grad.bias.col(0) += dc.colwise().sum().transpose();
  return da * fusion.weight.leftCols(D);
}

template <typename S>
Mat<S> intervention_logits(const Mat<S>& z, const InterventionHead<S>& head) {
  require_shape(head.weight.cols() == z.cols(), "intervention classifier input width mismatch");
  Mat<S> logits = z * head.weight.transpose();
  logits.rowwise() += head.bias.col(0).transpose();
  return logits;
}

/// P(Y | do(X)) for each row of z: softmax over the N identities.
template <typename S>
Mat<S> intervention_probs(const Mat<S>& z, const InterventionHead<S>& head) {
  Mat<S> logits = intervention_logits(z, head);
  return loss::softmax_rows(logits, {0, static_cast<int>(logits.cols())});
}

// ---------------------------------------------------------------------------
// Exact discrete reference

/// P(Y | X, C) for a finite SCM, stored [x][c][y], with a prior over C.
struct ConditionalTable {
  int n_x = 0;
  int n_c = 0;
  int n_y = 0;
  std::vector<double> p_y_given_xc;
  std::vector<double> prior_c;

  double at(int x, int c, int y) const {
    return p_y_given_xc[(static_cast<std::size_t>(x) * n_c + c) * n_y + y];
  }
  double& at(int x, int c, int y) { return p_y_given_xc[(static_cast<std::size_t>(x) * n_c + c) * n_y + y]; }
};

namespace detail {

inline void check_distribution(std::span<const double> p, const std::string& what) {
  double sum = 0.0;
  for (double v : p) {
    if (!(v >= 0.0)) throw std::invalid_argument(what + " has a negative entry");
    sum += v;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw std::invalid_argument(what + " is not normalised");
}

inline void check_table(const ConditionalTable& t, int x) {
  if (t.n_x < 1 || t.n_c < 1 || t.n_y < 1) throw std::invalid_argument("empty conditional table");
  if (t.p_y_given_xc.size() != static_cast<std::size_t>(t.n_x) * t.n_c * t.n_y ||
      t.prior_c.size() != static_cast<std::size_t>(t.n_c)) {
    throw std::invalid_argument("conditional table size mismatch");
  }
  if (x < 0 || x >= t.n_x) throw std::invalid_argument("x index out of range");
  for (int c = 0; c < t.n_c; ++c) {
    std::span<const double> slice(&t.p_y_given_xc[(static_cast<std::size_t>(x) * t.n_c + c) * t.n_y],
                                  static_cast<std::size_t>(t.n_y));
    check_distribution(slice, "P(Y | x, c=" + std::to_string(c) + ")");
  }
}

inline std::vector<double> mix(const ConditionalTable& t, int x, std::span<const double> weights) {
  std::vector<double> out(static_cast<std::size_t>(t.n_y), 0.0);
  for (int c = 0; c < t.n_c; ++c)
    for (int y = 0; y < t.n_y; ++y) out[static_cast<std::size_t>(y)] += t.at(x, c, y) * weights[static_cast<std::size_t>(c)];
  return out;
}

}  // namespace detail

/// sum_c P(Y | x, c) P(c)
inline std::vector<double> backdoor_exact(const ConditionalTable& t, int x) {
  detail::check_table(t, x);
  detail::check_distribution(t.prior_c, "P(C)");
  return detail::mix(t, x, t.prior_c);
}

/// sum_c P(Y | x, c) P(c | x); `p_c_given_x` is n_x x n_c row-major.
inline std::vector<double> likelihood_exact(const ConditionalTable& t, int x, std::span<const double> p_c_given_x) {
  detail::check_table(t, x);
  if (p_c_given_x.size() != static_cast<std::size_t>(t.n_x) * t.n_c) throw std::invalid_argument("P(C|X) size mismatch");
  auto row = p_c_given_x.subspan(static_cast<std::size_t>(x) * t.n_c, static_cast<std::size_t>(t.n_c));
  detail::check_distribution(row, "P(C | x)");
  return detail::mix(t, x, row);
}

}  // namespace ccil::causal
