#pragma once

// Optimisation loop: schedule, objective with analytic gradients, Adam,
// memory-bank maintenance, epoch loop with evaluation, checkpoints, resume.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ccil/causal.hpp"
#include "ccil/checkpoint.hpp"
#include "ccil/common.hpp"
#include "ccil/config.hpp"
#include "ccil/datagen.hpp"
#include "ccil/eval.hpp"
#include "ccil/losses.hpp"
#include "ccil/model.hpp"

namespace ccil::train {

/// Per-epoch learning rate: linear warm-up from lr_start (epoch 0) to lr_peak
/// (epoch warmup_epochs), then constant, times decay_factor from decay_epoch.
inline double lr_schedule(int epoch, const TrainConfig& c) {
  if (epoch < 0) throw std::invalid_argument("epoch must be >= 0");
  double lr = c.lr_peak;
  if (epoch < c.warmup_epochs) {
    lr = c.lr_start + (c.lr_peak - c.lr_start) * static_cast<double>(epoch) / static_cast<double>(c.warmup_epochs);
  }
  if (epoch >= c.decay_epoch) lr *= c.decay_factor;
  return lr;
}

// ---------------------------------------------------------------------------
// Parameters

/// Every trained array: the extractor plus the two joint classifiers, the
/// fusion layer and the intervention classifier.
template <typename S>
struct Learnables {
  model::ModelParams<S> model;
  Mat<S> cls_img;  // (N+M) x D
  Mat<S> cls_clt;
  causal::FusionParams<S> fusion;
  causal::InterventionHead<S> head;

  template <class F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <class F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

  Learnables zeros_like() const {
    Learnables z = *this;
    z.visit([](const std::string&, Mat<S>& m) { m.setZero(); });
    z.model.visit_buffers([](const std::string&, Mat<S>& m) { m.setZero(); });
    return z;
  }

 private:
  template <class Self, class F>
  static void visit_impl(Self& self, F& f) {
    self.model.visit_learnable(f);
    f("cls_img.weight", self.cls_img);
    f("cls_clt.weight", self.cls_clt);
    f("fusion.weight", self.fusion.weight);
    f("fusion.bias", self.fusion.bias);
    f("int_head.weight", self.head.weight);
    f("int_head.bias", self.head.bias);
  }
};

template <typename S>
Learnables<S> init_learnables(const ExperimentConfig& cfg, int N, int M) {
  Learnables<S> p;
  p.model = model::init_params<S>(cfg.model, derive_seed(cfg.seed, 0x11));
  const int D = cfg.model.feature_dim();
  const int Dz = cfg.train.fusion_dim > 0 ? cfg.train.fusion_dim : D;
  std::mt19937_64 rng(derive_seed(cfg.seed, 0x12));
  std::normal_distribution<double> n(0.0, 0.01);
  auto draw = [&](Mat<S>& m) {
    m.resize(N + M, D);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(n(rng));
  };
  draw(p.cls_img);
  draw(p.cls_clt);
  p.fusion = causal::init_fusion<S>(D, Dz, cfg.train.fusion_activation, derive_seed(cfg.seed, 0x13));
  p.head = causal::init_intervention_head<S>(Dz, N, derive_seed(cfg.seed, 0x14));
  return p;
}

// ---------------------------------------------------------------------------
// Objective

template <typename S>
struct Batch {
  model::FeatureMaps<S> images;
  std::vector<int> identities;
  std::vector<int> clothes;
};

/// Which loss terms enter the objective.
struct TermMask {
  bool cls = true;
  bool kl = true;
  bool me = true;
  bool intervention = true;
  bool intervention_kl = true;

  static TermMask from(const loss::AblationFlags& f) { return {true, f.kl, f.me, f.c3i, f.c3i}; }
  static TermMask only_cls() { return {true, false, false, false, false}; }
  static TermMask only_kl() { return {false, true, false, false, false}; }
  static TermMask only_me() { return {false, false, true, false, false}; }
  static TermMask only_int() { return {false, false, false, true, false}; }
  static TermMask only_int_kl() { return {false, false, false, false, true}; }
};

/// Batch centres. When a field is already set it is used as-is; otherwise it
/// is computed from the batch and stored. The gradient check freezes them so
/// that the probed function matches the stop-gradient used in training.
template <typename S>
struct Centers {
  std::optional<loss::ClassCenters<S>> p_img, p_clt, f_img, f_clt, p_int;
};

template <typename S>
struct ObjectiveContext {
  const model::ModelConfig* model = nullptr;
  loss::AblationFlags flags;
  int n_identities = 0;
  int n_clothes = 0;
  double rho = 0.6;
  const causal::ClothesMemoryBank<S>* bank = nullptr;
  std::span<const double> prior;
};

template <typename S>
struct ObjectiveResult {
  loss::LossParts parts;
  double total = 0.0;
  bool me_hinge_skipped = false;
  model::FeaturePairs<S> features;
  model::ForwardCache<S> cache;
};

namespace detail {

template <typename S>
const loss::ClassCenters<S>& centers_for(std::optional<loss::ClassCenters<S>>* slot,
                                          std::optional<loss::ClassCenters<S>>& local, const Mat<S>& x,
                                          std::span<const int> labels) {
  auto& target = slot ? *slot : local;
  if (!target) target = loss::class_centers(x, labels);
  return *target;
}

}  // namespace detail

/// Training-mode forward pass and the masked sum of loss terms. When `grad`
/// is given, the analytic gradient of that sum is accumulated into it.
template <typename S>
ObjectiveResult<S> objective(const Learnables<S>& p, const ObjectiveContext<S>& ctx, const Batch<S>& b,
                             const TermMask& mask, Centers<S>* centers = nullptr, Learnables<S>* grad = nullptr) {
  ObjectiveResult<S> r;
  const model::ForwardOptions opt{model::Mode::train, ctx.flags.s2m};
  r.features = model::forward(p.model, *ctx.model, b.images, opt, grad ? &r.cache : nullptr);
  const auto& F = r.features;
  const std::span<const int> ids(b.identities);
  const std::span<const int> clt(b.clothes);
  const loss::JointSpace space{ctx.n_identities, ctx.n_clothes, ctx.flags.jps};
  const Eigen::Index B = F.f_img.rows();

  model::FeatureGrads<S> d;
  d.f_img = Mat<S>::Zero(B, F.f_img.cols());
  d.f_clt = Mat<S>::Zero(B, F.f_clt.cols());
  d.g_img = Mat<S>::Zero(B, F.g_img.cols());
  d.g_clt = Mat<S>::Zero(B, F.g_clt.cols());

  std::optional<loss::ClassCenters<S>> tmp_a, tmp_b, tmp_c, tmp_d, tmp_e;

  if (mask.cls || mask.kl) {
    const auto pred = loss::jps_classify(F.g_img, F.g_clt, p.cls_img, p.cls_clt, space);
    Mat<S> dp_img = Mat<S>::Zero(B, space.width());
    Mat<S> dp_clt = Mat<S>::Zero(B, space.width());
    if (mask.cls) {
      auto t = loss::loss_cls(pred.p_img, pred.p_clt, ids, clt, space);
      r.parts.cls = static_cast<double>(t.value);
      dp_img += t.grad_img;
      dp_clt += t.grad_clt;
    }
    if (mask.kl) {
      const auto& ci = detail::centers_for(centers ? &centers->p_img : nullptr, tmp_a, pred.p_img, ids);
      const auto& cc = detail::centers_for(centers ? &centers->p_clt : nullptr, tmp_b, pred.p_clt, clt);
      auto t = loss::loss_kl(pred.p_img, pred.p_clt, ids, clt, ci, cc);
      r.parts.kl = static_cast<double>(t.value);
      dp_img += t.grad_img;
      dp_clt += t.grad_clt;
    }
    if (grad) {
      const Mat<S> dz_img = loss::softmax_backward(pred.p_img, dp_img, space.image_range());
      const Mat<S> dz_clt = loss::softmax_backward(pred.p_clt, dp_clt, space.clothes_range());
      grad->cls_img.noalias() += dz_img.transpose() * F.g_img;
      grad->cls_clt.noalias() += dz_clt.transpose() * F.g_clt;
      d.g_img.noalias() += dz_img * p.cls_img;
      d.g_clt.noalias() += dz_clt * p.cls_clt;
    }
  }

  if (mask.me) {
    const S rho = static_cast<S>(ctx.rho);
    const auto& ci = detail::centers_for(centers ? &centers->f_img : nullptr, tmp_c, F.f_img, ids);
    const auto& cc = detail::centers_for(centers ? &centers->f_clt : nullptr, tmp_d, F.f_clt, clt);
    auto ti = loss::loss_me(F.f_img, ids, ci, rho);
    auto tc = loss::loss_me(F.f_clt, clt, cc, rho);
    r.parts.me = static_cast<double>(ti.value + tc.value);
    r.me_hinge_skipped = ti.hinge_skipped || tc.hinge_skipped;
    d.f_img += ti.grad;
    d.f_clt += tc.grad;
  }

  if (mask.intervention || mask.intervention_kl) {
    if (!ctx.bank) throw std::invalid_argument("intervention terms need a memory bank");
    const Mat<S> z = causal::intervene(F.g_img, *ctx.bank, ctx.prior, p.fusion);
    const Mat<S> p_int = causal::intervention_probs(z, p.head);
    Mat<S> dp = Mat<S>::Zero(p_int.rows(), p_int.cols());
    if (mask.intervention) {
      auto t = loss::loss_int(p_int, ids);
      r.parts.intervention = static_cast<double>(t.value);
      dp += t.grad;
    }
    if (mask.intervention_kl) {
      const auto& c = detail::centers_for(centers ? &centers->p_int : nullptr, tmp_e, p_int, ids);
      auto t = loss::loss_int_kl(p_int, ids, c);
      r.parts.intervention_kl = static_cast<double>(t.value);
      dp += t.grad;
    }
    if (grad) {
      const Mat<S> dlogits = loss::softmax_backward(p_int, dp, {0, static_cast<int>(p_int.cols())});
      grad->head.weight.noalias() += dlogits.transpose() * z;
      grad->head.bias.col(0) += dlogits.colwise().sum().transpose();
      const Mat<S> dz = dlogits * p.head.weight;
      d.g_img += causal::intervene_backward(F.g_img, *ctx.bank, ctx.prior, p.fusion, dz, grad->fusion);
    }
  }

  const auto& q = r.parts;
  const std::pair<const char*, double> named[] = {
      {"cls", q.cls}, {"kl", q.kl}, {"me", q.me}, {"int", q.intervention}, {"int_kl", q.intervention_kl}};
  for (auto [name, v] : named)
    if (!std::isfinite(v)) throw NonFiniteLoss(name, v);
  r.total = q.cls + q.kl + q.me + q.intervention + q.intervention_kl;

  if (grad) model::backward(p.model, *ctx.model, r.cache, d, grad->model);
  return r;
}

// ---------------------------------------------------------------------------
// State

template <typename S>
struct TrainState {
  Learnables<S> params;
  Learnables<S> adam_m;
  Learnables<S> adam_v;
  causal::ClothesMemoryBank<S> bank;
  bool bank_ready = false;
  std::vector<double> prior;
  int n_identities = 0;
  int n_clothes = 0;
  int epoch = 0;           // completed epochs
  std::int64_t step = 0;   // completed optimiser steps
};

template <typename S>
TrainState<S> init_state(const ExperimentConfig& cfg, int N, int M, std::vector<double> prior) {
  cfg.validate();
  if (static_cast<int>(prior.size()) != M) throw std::invalid_argument("prior must have M entries");
  TrainState<S> st;
  st.params = init_learnables<S>(cfg, N, M);
  st.adam_m = st.params.zeros_like();
  st.adam_v = st.params.zeros_like();
  st.bank = {Mat<S>::Zero(M, cfg.model.feature_dim()), cfg.train.alpha, std::vector<std::int64_t>(static_cast<std::size_t>(M), 0)};
  st.prior = std::move(prior);
  st.n_identities = N;
  st.n_clothes = M;
  return st;
}

/// One Adam step with bias correction at t = step + 1.
template <typename S>
void adam_update(TrainState<S>& st, const Learnables<S>& grad, double lr, const TrainConfig& c) {
  std::vector<Mat<S>*> p, m, v;
  std::vector<const Mat<S>*> g;
  st.params.visit([&](const std::string&, Mat<S>& x) { p.push_back(&x); });
  st.adam_m.visit([&](const std::string&, Mat<S>& x) { m.push_back(&x); });
  st.adam_v.visit([&](const std::string&, Mat<S>& x) { v.push_back(&x); });
  grad.visit([&](const std::string&, const Mat<S>& x) { g.push_back(&x); });
  const double t = static_cast<double>(st.step + 1);
  const S b1 = static_cast<S>(c.adam_beta1);
  const S b2 = static_cast<S>(c.adam_beta2);
  const S c1 = static_cast<S>(1.0 - std::pow(c.adam_beta1, t));
  const S c2 = static_cast<S>(1.0 - std::pow(c.adam_beta2, t));
  const S step = static_cast<S>(lr);
  const S eps = static_cast<S>(c.adam_eps);
  for (std::size_t i = 0; i < p.size(); ++i) {
    auto gm = g[i]->array();
    m[i]->array() = b1 * m[i]->array() + (S(1) - b1) * gm;
    v[i]->array() = b2 * v[i]->array() + (S(1) - b2) * gm.square();
    p[i]->array() -= step * (m[i]->array() / c1) / ((v[i]->array() / c2).sqrt() + eps);
  }
}

template <typename S>
ObjectiveContext<S> context_for(const TrainState<S>& st, const ExperimentConfig& cfg) {
  ObjectiveContext<S> ctx;
  ctx.model = &cfg.model;
  ctx.flags = cfg.train.flags;
  ctx.n_identities = st.n_identities;
  ctx.n_clothes = st.n_clothes;
  ctx.rho = cfg.train.rho;
  ctx.bank = &st.bank;
  ctx.prior = st.prior;
  return ctx;
}

/// Forward, losses, one Adam update, running statistics, then the bank EMA
/// for every sample in batch order using the detached post-neck clothes
/// features. The state is left untouched if a loss term is non-finite.
template <typename S>
loss::LossReport train_step(TrainState<S>& st, const Batch<S>& batch, const ExperimentConfig& cfg, double lr) {
  const auto& flags = cfg.train.flags;
  if (flags.c3i && !st.bank_ready) throw std::logic_error("memory bank used before initialisation");
  Learnables<S> grad = st.params.zeros_like();
  auto r = objective(st.params, context_for(st, cfg), batch, TermMask::from(flags), static_cast<Centers<S>*>(nullptr), &grad);
  loss::LossReport rep = loss::total_loss(r.parts, flags);
  rep.me_hinge_skipped = r.me_hinge_skipped;

  adam_update(st, grad, lr, cfg.train);
  model::update_running_stats(st.params.model, r.cache, cfg.model.bn_momentum);
  if (flags.c3i) {
    for (Eigen::Index i = 0; i < r.features.g_clt.rows(); ++i) {
      st.bank.update(batch.clothes[static_cast<std::size_t>(i)], r.features.g_clt.row(i));
    }
  }
  ++st.step;
  return rep;
}

// ---------------------------------------------------------------------------
// Data

/// Decoded images and split bookkeeping for one experiment.
struct PreparedData {
  data::DatasetManifest train;
  data::DatasetManifest query;
  data::DatasetManifest gallery;     // standard setting
  std::vector<std::size_t> cc_gallery;  // rows of `gallery` kept in the clothes-changing setting
  std::vector<data::FloatImage> train_images;
  std::vector<data::FloatImage> query_images;
  std::vector<data::FloatImage> gallery_images;
  int n_identities = 0;
  int n_clothes = 0;
};

/// Uses the split tags stored in the manifest.
inline PreparedData prepare_data(const data::DatasetManifest& tagged, const data::ImageStore& images) {
  data::validate_manifest(tagged, true);
  PreparedData d;
  const auto s = data::splits_from_tags(tagged, data::Setting::standard);
  d.train = s.train;
  d.query = s.query;
  d.gallery = s.gallery;
  if (d.train.records.empty()) throw DataError("manifest has no training records");
  if (d.query.records.empty() || d.gallery.records.empty()) throw DataError("manifest has no query/gallery records");
  const auto cc = data::clothes_changing_gallery(d.query, d.gallery);
  std::set<std::string> keep;
  for (const auto& r : cc.records) keep.insert(r.image_id);
  for (std::size_t i = 0; i < d.gallery.records.size(); ++i)
    if (keep.count(d.gallery.records[i].image_id)) d.cc_gallery.push_back(i);
  auto decode = [&](const data::DatasetManifest& m, std::vector<data::FloatImage>& out) {
    for (const auto& r : m.records) {
      auto it = images.find(r.image_id);
      if (it == images.end()) throw DataError("missing image " + r.image_id);
      out.push_back(data::to_float(it->second));
    }
  };
  decode(d.train, d.train_images);
  decode(d.query, d.query_images);
  decode(d.gallery, d.gallery_images);
  d.n_identities = tagged.n_identities;
  d.n_clothes = tagged.n_clothes;
  return d;
}

/// Generates the synthetic set for `cfg` and tags it with the standard split.
inline data::SyntheticDataset make_dataset(const ExperimentConfig& cfg) {
  auto gen = cfg.data;
  gen.seed = cfg.seed;
  auto ds = data::generate_synthetic_dataset(gen);
  // Rejects datasets where clothes-changing evaluation is impossible.
  data::make_splits(ds.manifest, {data::Setting::clothes_changing, cfg.holdout_fraction, cfg.seed, false});
  ds.manifest = data::merge_splits(
      data::make_splits(ds.manifest, {data::Setting::standard, cfg.holdout_fraction, cfg.seed, false}));
  return ds;
}

// ---------------------------------------------------------------------------
// Features and evaluation

struct FeatureSet {
  Mat<double> f_img;  // pre-neck
  Mat<double> f_clt;
};

template <typename S>
FeatureSet extract_features(const model::ModelParams<S>& p, const model::ModelConfig& mcfg, bool s2m,
                            const std::vector<data::FloatImage>& images, std::size_t chunk = 64) {
  FeatureSet out{Mat<double>(static_cast<Eigen::Index>(images.size()), mcfg.feature_dim()),
                 Mat<double>(static_cast<Eigen::Index>(images.size()), mcfg.feature_dim())};
  for (std::size_t start = 0; start < images.size(); start += chunk) {
    const std::size_t n = std::min(chunk, images.size() - start);
    const auto x = model::make_batch<S>(std::span<const data::FloatImage>(images.data() + start, n));
    const auto f = model::forward(p, mcfg, x, {model::Mode::eval, s2m});
    out.f_img.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(n)) = f.f_img.template cast<double>();
    out.f_clt.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(n)) = f.f_clt.template cast<double>();
  }
  return out;
}

struct EvalBundle {
  eval::EvalReport cc;
  eval::EvalReport standard;
  double mean_abs_cos = 0.0;  // over query + standard gallery
};

template <typename S>
EvalBundle evaluate_state(const TrainState<S>& st, const ExperimentConfig& cfg, const PreparedData& d,
                          eval::Protocol protocol, int repeats) {
  const bool s2m = cfg.train.flags.s2m;
  const auto q = extract_features(st.params.model, cfg.model, s2m, d.query_images);
  const auto g = extract_features(st.params.model, cfg.model, s2m, d.gallery_images);
  const auto qm = eval::SampleMeta::from(d.query);
  const auto gm = eval::SampleMeta::from(d.gallery);
  Mat<double> g_cc(static_cast<Eigen::Index>(d.cc_gallery.size()), g.f_img.cols());
  for (std::size_t k = 0; k < d.cc_gallery.size(); ++k)
    g_cc.row(static_cast<Eigen::Index>(k)) = g.f_img.row(static_cast<Eigen::Index>(d.cc_gallery[k]));
  EvalBundle e;
  e.cc = eval::evaluate(q.f_img, g_cc, qm, gm.subset(d.cc_gallery), data::Setting::clothes_changing, protocol, repeats,
                        cfg.seed);
  e.standard = eval::evaluate(q.f_img, g.f_img, qm, gm, data::Setting::standard, protocol, repeats, cfg.seed);
  Mat<double> all_img(q.f_img.rows() + g.f_img.rows(), q.f_img.cols());
  Mat<double> all_clt(all_img.rows(), all_img.cols());
  all_img << q.f_img, g.f_img;
  all_clt << q.f_clt, g.f_clt;
  e.mean_abs_cos = eval::mean_abs_cosine(all_img, all_clt);
  return e;
}

/// Bank entries from one pass over the un-augmented training images: the
/// pre-neck clothes features are normalised with whole-set statistics and the
/// neck's scale/shift, then averaged per outfit.
template <typename S>
causal::ClothesMemoryBank<S> warmup_bank(const TrainState<S>& st, const ExperimentConfig& cfg, const PreparedData& d) {
  const auto f = extract_features(st.params.model, cfg.model, cfg.train.flags.s2m, d.train_images);
  const RowVec<double> mean = f.f_clt.colwise().mean();
  const RowVec<double> var = (f.f_clt.rowwise() - mean).array().square().colwise().mean();
  const auto& neck = st.params.model.neck_clt;
  Mat<S> g(f.f_clt.rows(), f.f_clt.cols());
  for (Eigen::Index i = 0; i < g.rows(); ++i)
    for (Eigen::Index k = 0; k < g.cols(); ++k)
      g(i, k) = static_cast<S>((f.f_clt(i, k) - mean(k)) / std::sqrt(var(k) + cfg.model.bn_eps) *
                                   static_cast<double>(neck.gamma(0, k)) +
                               static_cast<double>(neck.beta(0, k)));
  std::vector<int> clothes;
  for (const auto& r : d.train.records) clothes.push_back(r.clothes_label);
  return causal::init_bank_warmup<S>(g, clothes, d.n_clothes, cfg.train.alpha);
}

// ---------------------------------------------------------------------------
// Checkpoints

template <typename S>
void save_checkpoint(const std::filesystem::path& path, const TrainState<S>& st, const ExperimentConfig& cfg) {
  io::Archive ar;
  nlohmann::ordered_json meta;
  meta["format"] = "ccil-checkpoint";
  meta["config"] = to_json(cfg);
  meta["state"] = {{"epoch", st.epoch}, {"step", st.step}, {"bank_ready", st.bank_ready}};
  meta["data"] = {{"n_identities", st.n_identities}, {"n_clothes", st.n_clothes}};
  ar.metadata = meta.dump();
  st.params.visit([&](const std::string& n, const Mat<S>& m) { ar.put("params/" + n, m); });
  st.params.model.visit_buffers([&](const std::string& n, const Mat<S>& m) { ar.put("buffers/" + n, m); });
  st.adam_m.visit([&](const std::string& n, const Mat<S>& m) { ar.put("optim/m/" + n, m); });
  st.adam_v.visit([&](const std::string& n, const Mat<S>& m) { ar.put("optim/v/" + n, m); });
  ar.put("causal/bank/entries", st.bank.entries);
  ar.put("causal/bank/alpha", std::vector<double>{st.bank.alpha});
  ar.put("causal/bank/update_counts", std::vector<double>(st.bank.update_counts.begin(), st.bank.update_counts.end()));
  ar.put("causal/prior", st.prior);
  ar.save(path);
}

struct CheckpointInfo {
  ExperimentConfig config;
  int n_identities = 0;
  int n_clothes = 0;
};

inline CheckpointInfo read_checkpoint_info(const io::Archive& ar) {
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(ar.metadata);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("corrupt checkpoint metadata: ") + e.what());
  }
  if (meta.value("format", "") != "ccil-checkpoint") throw DataError("archive is not a training checkpoint");
  CheckpointInfo info;
  info.config = config_from_json(meta["config"]);
  info.n_identities = meta["data"]["n_identities"].get<int>();
  info.n_clothes = meta["data"]["n_clothes"].get<int>();
  return info;
}

/// Restores a state saved with the same model configuration.
template <typename S>
TrainState<S> load_checkpoint(const io::Archive& ar, const ExperimentConfig& cfg) {
  const auto info = read_checkpoint_info(ar);
  const auto meta = nlohmann::json::parse(ar.metadata);
  const auto& prior_arr = ar.at("causal/prior").values;
  TrainState<S> st = init_state<S>(cfg, info.n_identities, info.n_clothes, prior_arr);
  st.params.visit([&](const std::string& n, Mat<S>& m) { ar.get("params/" + n, m); });
  st.params.model.visit_buffers([&](const std::string& n, Mat<S>& m) { ar.get("buffers/" + n, m); });
  st.adam_m.visit([&](const std::string& n, Mat<S>& m) { ar.get("optim/m/" + n, m); });
  st.adam_v.visit([&](const std::string& n, Mat<S>& m) { ar.get("optim/v/" + n, m); });
  ar.get("causal/bank/entries", st.bank.entries);
  st.bank.alpha = ar.at("causal/bank/alpha").values.at(0);
  const auto& counts = ar.at("causal/bank/update_counts").values;
  if (counts.size() != st.bank.update_counts.size()) throw ShapeError("bank update_counts size mismatch");
  for (std::size_t i = 0; i < counts.size(); ++i) st.bank.update_counts[i] = static_cast<std::int64_t>(counts[i]);
  st.epoch = meta["state"]["epoch"].get<int>();
  st.step = meta["state"]["step"].get<std::int64_t>();
  st.bank_ready = meta["state"]["bank_ready"].get<bool>();
  return st;
}

// ---------------------------------------------------------------------------
// Epoch loop

struct FitOptions {
  std::filesystem::path out_dir;          // empty: nothing written to disk
  std::optional<std::filesystem::path> resume_from;
  int stop_after_epoch = -1;              // >= 0: return once this many epochs are complete
  std::ostream* progress = nullptr;
};

template <typename S>
struct FitResult {
  TrainState<S> state;
  std::vector<std::string> metrics;  // JSON lines written by this call
  std::vector<loss::LossReport> steps;
  std::optional<EvalBundle> final_eval;
};

inline nlohmann::ordered_json step_record(int epoch, std::int64_t step, double lr, const loss::LossReport& r) {
  return {{"type", "step"},   {"epoch", epoch},  {"step", step},
          {"lr", lr},         {"cls", r.cls},    {"kl", r.kl},
          {"me", r.me},       {"int", r.intervention}, {"int_kl", r.intervention_kl},
          {"total", r.total}, {"me_hinge_skipped", r.me_hinge_skipped}};
}

inline nlohmann::ordered_json eval_record(const char* type, int epoch, const EvalBundle& e) {
  return {{"type", type},
          {"epoch", epoch},
          {"cc", e.cc.to_json()},
          {"standard", e.standard.to_json()},
          {"mean_abs_cos", e.mean_abs_cos}};
}

/// Trains for cfg.train.epochs, evaluating after each epoch (if configured)
/// and at the end in both settings. With an out_dir, appends to
/// metrics.jsonl and rewrites checkpoint.ckpt after every epoch; final.ckpt
/// holds the finished state.
template <typename S>
FitResult<S> fit(const PreparedData& d, const ExperimentConfig& cfg, const FitOptions& opt = {}) {
  cfg.validate();
  const auto& tc = cfg.train;
  FitResult<S> res;
  const bool write = !opt.out_dir.empty();
  std::ofstream metrics;
  if (write) {
    std::filesystem::create_directories(opt.out_dir);
    save_config(opt.out_dir / "config.json", cfg);
    metrics.open(opt.out_dir / "metrics.jsonl", opt.resume_from ? std::ios::app : std::ios::trunc);
    if (!metrics) throw Error("cannot write metrics to " + opt.out_dir.string());
  }
  auto emit = [&](const nlohmann::ordered_json& j) {
    res.metrics.push_back(j.dump());
    if (write) metrics << res.metrics.back() << "\n" << std::flush;
  };

  if (opt.resume_from) {
    const auto ar = io::Archive::load(*opt.resume_from);
    const auto info = read_checkpoint_info(ar);
    if (info.n_identities != d.n_identities || info.n_clothes != d.n_clothes) {
      throw ConfigError("checkpoint was trained on a different label space");
    }
    res.state = load_checkpoint<S>(ar, cfg);
  } else {
    res.state = init_state<S>(cfg, d.n_identities, d.n_clothes, causal::clothes_prior(d.train).probs);
  }
  auto& st = res.state;
  if (tc.flags.c3i && !st.bank_ready) {
    st.bank = tc.bank_init == BankInit::warmup
                  ? warmup_bank(st, cfg, d)
                  : causal::init_bank_random<S>(d.n_clothes, cfg.model.feature_dim(), tc.alpha, derive_seed(cfg.seed, 0x15));
    st.bank_ready = true;
  }

  const data::PkSampler sampler(d.train, tc.P, tc.K, derive_seed(cfg.seed, 0x22));
  for (int epoch = st.epoch; epoch < tc.epochs; ++epoch) {
    if (opt.stop_after_epoch >= 0 && epoch >= opt.stop_after_epoch) break;
    const double lr = lr_schedule(epoch, tc);
    const auto batches = sampler.epoch_batches(epoch);
    for (std::size_t k = 0; k < batches.size(); ++k) {
      std::mt19937_64 rng(derive_seed(cfg.seed, 0x33, static_cast<std::uint64_t>(epoch), k));
      std::vector<data::FloatImage> imgs;
      Batch<S> b;
      for (std::size_t idx : batches[k]) {
        imgs.push_back(data::augment(d.train_images[idx], cfg.augment, rng));
        b.identities.push_back(d.train.records[idx].identity_label);
        b.clothes.push_back(d.train.records[idx].clothes_label);
      }
      b.images = model::make_batch<S>(imgs);
      const auto rep = train_step(st, b, cfg, lr);
      res.steps.push_back(rep);
      emit(step_record(epoch, st.step, lr, rep));
    }
    st.epoch = epoch + 1;
    const bool last = st.epoch == tc.epochs;
    if (cfg.eval.every_epoch && !last) {
      const auto e = evaluate_state(st, cfg, d, cfg.eval.protocol, cfg.eval.repeats);
      emit(eval_record("epoch", st.epoch, e));
      if (opt.progress) {
        *opt.progress << "epoch " << st.epoch << "/" << tc.epochs << "  loss " << res.steps.back().total
                      << "  cc rank-1 " << e.cc.result.rank(1) << "\n";
      }
    }
    if (write) save_checkpoint(opt.out_dir / "checkpoint.ckpt", st, cfg);
  }
  if (st.epoch == tc.epochs) {
    res.final_eval = evaluate_state(st, cfg, d, cfg.eval.protocol, cfg.eval.repeats);
    emit(eval_record("final", st.epoch, *res.final_eval));
    if (opt.progress) {
      *opt.progress << "final  cc rank-1 " << res.final_eval->cc.result.rank(1) << "  standard rank-1 "
                    << res.final_eval->standard.result.rank(1) << "  mean|cos| " << res.final_eval->mean_abs_cos
                    << "\n";
    }
    if (write) save_checkpoint(opt.out_dir / "final.ckpt", st, cfg);
  }
  return res;
}

}  // namespace ccil::train
