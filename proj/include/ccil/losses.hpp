#pragma once

// Joint prediction scheme and the training objectives. Every loss returns its
// value together with the gradient with respect to its primary input
// (distributions or features); class centres are treated as constants.

#include <algorithm>
#include <cmath>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "ccil/common.hpp"

namespace ccil::loss {

/// Half-open index range of a softmax over the joint N+M label space.
struct LabelRange {
  int lo = 0;
  int hi = 0;
};

/// Identities occupy [0, N), clothes [N, N+M).
struct JointSpace {
  int n_identities = 0;
  int n_clothes = 0;
  bool joint = true;  // false: each branch only competes within its own block

  int width() const { return n_identities + n_clothes; }
  LabelRange image_range() const { return {0, joint ? width() : n_identities}; }
  LabelRange clothes_range() const { return {joint ? 0 : n_identities, width()}; }
  int identity_index(int y) const {
    if (y < 0 || y >= n_identities) throw std::invalid_argument("identity label " + std::to_string(y) + " out of range");
    return y;
  }
  int clothes_index(int c) const {
    if (c < 0 || c >= n_clothes) throw std::invalid_argument("clothes label " + std::to_string(c) + " out of range");
    return n_identities + c;
  }
};

/// Row-wise softmax restricted to `r`; entries outside the range are zero.
template <typename S>
Mat<S> softmax_rows(const Mat<S>& logits, LabelRange r) {
  Mat<S> p = Mat<S>::Zero(logits.rows(), logits.cols());
  const Eigen::Index w = r.hi - r.lo;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    auto z = logits.row(i).segment(r.lo, w);
    const S zmax = z.maxCoeff();
    auto e = (z.array() - zmax).exp();
    p.row(i).segment(r.lo, w) = (e / e.sum()).matrix();
  }
  return p;
}

/// Chain rule through softmax_rows: dz_k = p_k (dp_k - sum_j p_j dp_j).
template <typename S>
Mat<S> softmax_backward(const Mat<S>& p, const Mat<S>& dp, LabelRange r) {
  Mat<S> dz = Mat<S>::Zero(p.rows(), p.cols());
  const Eigen::Index w = r.hi - r.lo;
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    auto pi = p.row(i).segment(r.lo, w).array();
    auto di = dp.row(i).segment(r.lo, w).array();
    const S dot = (pi * di).sum();
    dz.row(i).segment(r.lo, w) = (pi * (di - dot)).matrix();
  }
  return dz;
}

template <typename S>
struct JointPrediction {
  Mat<S> logits_img;
  Mat<S> logits_clt;
  Mat<S> p_img;
  Mat<S> p_clt;
};

/// Both branches are classified over the N+M joint space by their own weight
/// matrices ((N+M) x D, no bias).
template <typename S>
JointPrediction<S> jps_classify(const Mat<S>& f_img, const Mat<S>& f_clt, const Mat<S>& w_img, const Mat<S>& w_clt,
                                const JointSpace& space) {
  require_shape(w_img.rows() == space.width() && w_clt.rows() == space.width(),
                "classifier output width must be N+M = " + std::to_string(space.width()));
  require_shape(w_img.cols() == f_img.cols() && w_clt.cols() == f_clt.cols(), "classifier input width mismatch");
  JointPrediction<S> out;
  out.logits_img = f_img * w_img.transpose();
  out.logits_clt = f_clt * w_clt.transpose();
  out.p_img = softmax_rows(out.logits_img, space.image_range());
  out.p_clt = softmax_rows(out.logits_clt, space.clothes_range());
  return out;
}

template <typename S>
struct Term {
  S value = S(0);
  Mat<S> grad;  // d value / d input
};

template <typename S>
struct PairTerm {
  S value = S(0);
  Mat<S> grad_img;
  Mat<S> grad_clt;
};

namespace detail {

template <typename S>
S safe_log(S p) {
  return std::log(std::max(p, std::numeric_limits<S>::min()));
}

template <typename S>
Term<S> nll(const Mat<S>& p, std::span<const int> index) {
  require_shape(static_cast<std::size_t>(p.rows()) == index.size(), "one label per row required");
  Term<S> t{S(0), Mat<S>::Zero(p.rows(), p.cols())};
  const S inv_b = S(1) / static_cast<S>(p.rows());
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    const int k = index[static_cast<std::size_t>(i)];
    if (k < 0 || k >= p.cols()) throw std::invalid_argument("label index out of range");
    const S pk = p(i, k);
    t.value -= safe_log(pk) * inv_b;
    if (pk > std::numeric_limits<S>::min()) t.grad(i, k) = -inv_b / pk;
  }
  return t;
}

}  // namespace detail

/// Cross-entropy of both branches, batch mean:
/// -log p_img[y] - log p_clt[N + c].
template <typename S>
PairTerm<S> loss_cls(const Mat<S>& p_img, const Mat<S>& p_clt, std::span<const int> identities,
                     std::span<const int> clothes, const JointSpace& space) {
  std::vector<int> yi(identities.size()), yc(clothes.size());
  for (std::size_t i = 0; i < yi.size(); ++i) yi[i] = space.identity_index(identities[i]);
  for (std::size_t i = 0; i < yc.size(); ++i) yc[i] = space.clothes_index(clothes[i]);
  auto a = detail::nll(p_img, std::span<const int>(yi));
  auto b = detail::nll(p_clt, std::span<const int>(yc));
  return {a.value + b.value, std::move(a.grad), std::move(b.grad)};
}

/// Per-class mean rows over the samples of the current batch.
template <typename S>
struct ClassCenters {
  std::vector<int> classes;  // sorted
  Mat<S> rows;               // one centre per entry of `classes`

  Eigen::Index index_of(int cls) const {
    auto it = std::lower_bound(classes.begin(), classes.end(), cls);
    if (it == classes.end() || *it != cls) throw std::invalid_argument("no centre for class " + std::to_string(cls));
    return it - classes.begin();
  }
  auto center(int cls) const { return rows.row(index_of(cls)); }
  std::size_t size() const { return classes.size(); }
};

template <typename S>
ClassCenters<S> class_centers(const Mat<S>& x, std::span<const int> labels) {
  require_shape(static_cast<std::size_t>(x.rows()) == labels.size(), "one label per row required");
  if (labels.empty()) throw std::invalid_argument("class centres need a non-empty batch");
  ClassCenters<S> c;
  c.classes.assign(labels.begin(), labels.end());
  std::sort(c.classes.begin(), c.classes.end());
  c.classes.erase(std::unique(c.classes.begin(), c.classes.end()), c.classes.end());
  c.rows = Mat<S>::Zero(static_cast<Eigen::Index>(c.classes.size()), x.cols());
  std::vector<int> count(c.classes.size(), 0);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const auto k = c.index_of(labels[static_cast<std::size_t>(i)]);
    c.rows.row(k) += x.row(i);
    ++count[static_cast<std::size_t>(k)];
  }
  for (std::size_t k = 0; k < count.size(); ++k) c.rows.row(static_cast<Eigen::Index>(k)) /= static_cast<S>(count[k]);
  return c;
}

/// Centres of classification distributions.
template <typename S>
ClassCenters<S> class_prob_centers(const Mat<S>& p, std::span<const int> labels) {
  return class_centers(p, labels);
}

/// Centres of feature vectors.
template <typename S>
ClassCenters<S> class_feat_centers(const Mat<S>& f, std::span<const int> labels) {
  return class_centers(f, labels);
}

inline constexpr double kProbFloor = 1e-8;

/// Batch mean of KL(p_i || centre[label_i]) with both sides floored at eps
/// inside the logarithm.
template <typename S>
Term<S> kl_to_centers(const Mat<S>& p, std::span<const int> labels, const ClassCenters<S>& centers, S eps) {
  require_shape(static_cast<std::size_t>(p.rows()) == labels.size(), "one label per row required");
  Term<S> t{S(0), Mat<S>::Zero(p.rows(), p.cols())};
  const S inv_b = S(1) / static_cast<S>(p.rows());
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    auto q = centers.center(labels[static_cast<std::size_t>(i)]);
    require_shape(q.cols() == p.cols(), "centre width mismatch");
    for (Eigen::Index k = 0; k < p.cols(); ++k) {
      const S pk = p(i, k);
      const S log_ratio = std::log(std::max(pk, eps)) - std::log(std::max(q(k), eps));
      t.value += pk * log_ratio * inv_b;
      t.grad(i, k) = (log_ratio + (pk > eps ? S(1) : S(0))) * inv_b;
    }
  }
  return t;
}

template <typename S>
PairTerm<S> loss_kl(const Mat<S>& p_img, const Mat<S>& p_clt, std::span<const int> identities,
                    std::span<const int> clothes, const ClassCenters<S>& centers_img,
                    const ClassCenters<S>& centers_clt, S eps = static_cast<S>(kProbFloor)) {
  auto a = kl_to_centers(p_img, identities, centers_img, eps);
  auto b = kl_to_centers(p_clt, clothes, centers_clt, eps);
  return {a.value + b.value, std::move(a.grad), std::move(b.grad)};
}

template <typename S>
struct MetricTerm {
  S value = S(0);
  Mat<S> grad;
  bool hinge_skipped = false;  // fewer than two classes in the batch
};

/// Centre-based metric loss for one kind of feature, batch mean of
///   max(rho - ||f - nearest negative centre||, 0) + ||f - own centre||.
template <typename S>
MetricTerm<S> loss_me(const Mat<S>& f, std::span<const int> labels, const ClassCenters<S>& centers, S rho) {
  if (!(rho > S(0))) throw std::invalid_argument("margin rho must be positive");
  require_shape(static_cast<std::size_t>(f.rows()) == labels.size(), "one label per row required");
  MetricTerm<S> t{S(0), Mat<S>::Zero(f.rows(), f.cols()), centers.size() < 2};
  const S inv_b = S(1) / static_cast<S>(f.rows());
  for (Eigen::Index i = 0; i < f.rows(); ++i) {
    const int own = labels[static_cast<std::size_t>(i)];
    RowVec<S> to_own = f.row(i) - centers.center(own);
    const S d_pos = to_own.norm();
    t.value += d_pos * inv_b;
    if (d_pos > S(0)) t.grad.row(i) += to_own * (inv_b / d_pos);
    if (t.hinge_skipped) continue;
    Eigen::Index best = -1;
    S d_neg = std::numeric_limits<S>::infinity();
    for (std::size_t k = 0; k < centers.size(); ++k) {
      if (centers.classes[k] == own) continue;
      const S d = (f.row(i) - centers.rows.row(static_cast<Eigen::Index>(k))).norm();
      if (d < d_neg) d_neg = d, best = static_cast<Eigen::Index>(k);
    }
    if (d_neg < rho) {
      t.value += (rho - d_neg) * inv_b;
      if (d_neg > S(0)) t.grad.row(i) -= (f.row(i) - centers.rows.row(best)) * (inv_b / d_neg);
    }
  }
  return t;
}

/// Batch mean of -log P(Y = y_i | do(X = x_i)) over N-way distributions.
template <typename S>
Term<S> loss_int(const Mat<S>& p_int, std::span<const int> identities) {
  for (int y : identities)
    if (y < 0 || y >= p_int.cols()) throw std::invalid_argument("identity label " + std::to_string(y) + " >= N");
  return detail::nll(p_int, identities);
}

/// KL of each intervention distribution to its identity-class centre.
template <typename S>
Term<S> loss_int_kl(const Mat<S>& p_int, std::span<const int> identities, const ClassCenters<S>& centers,
                    S eps = static_cast<S>(kProbFloor)) {
  return kl_to_centers(p_int, identities, centers, eps);
}

/// Which objective components are active (Table-style ablation switches).
struct AblationFlags {
  bool s2m = true;
  bool jps = true;
  bool kl = true;
  bool me = true;
  bool c3i = true;

  bool operator==(const AblationFlags&) const = default;
};

struct LossParts {
  double cls = 0.0;
  double kl = 0.0;
  double me = 0.0;
  double intervention = 0.0;
  double intervention_kl = 0.0;
};

struct LossReport {
  double cls = 0.0;
  double kl = 0.0;
  double me = 0.0;
  double intervention = 0.0;
  double intervention_kl = 0.0;
  double total = 0.0;
  bool me_hinge_skipped = false;
};

/// Unweighted sum of the enabled parts. Throws NonFiniteLoss naming the first
/// offending term.
inline LossReport total_loss(const LossParts& parts, const AblationFlags& flags = {}) {
  LossReport r;
  r.cls = parts.cls;
  r.kl = flags.kl ? parts.kl : 0.0;
  r.me = flags.me ? parts.me : 0.0;
  r.intervention = flags.c3i ? parts.intervention : 0.0;
  r.intervention_kl = flags.c3i ? parts.intervention_kl : 0.0;
  const std::pair<const char*, double> named[] = {
      {"cls", r.cls}, {"kl", r.kl}, {"me", r.me}, {"int", r.intervention}, {"int_kl", r.intervention_kl}};
  for (auto [name, v] : named)
    if (!std::isfinite(v)) throw NonFiniteLoss(name, v);
  r.total = r.cls + r.kl + r.me + r.intervention + r.intervention_kl;
  return r;
}

}  // namespace ccil::loss
