#pragma once

// Experiment configuration: one JSON document with data / augment / model /
// train / eval sections. Unknown keys are rejected so a typo cannot silently
// fall back to a default.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ccil/causal.hpp"
#include "ccil/common.hpp"
#include "ccil/datagen.hpp"
#include "ccil/eval.hpp"
#include "ccil/losses.hpp"
#include "ccil/model.hpp"

namespace ccil {

enum class BankInit { warmup, random };

inline BankInit parse_bank_init(const std::string& s) {
  if (s == "warmup") return BankInit::warmup;
  if (s == "random") return BankInit::random;
  throw ConfigError("unknown bank_init '" + s + "'");
}

inline std::string to_string(BankInit b) { return b == BankInit::warmup ? "warmup" : "random"; }

struct TrainConfig {
  int epochs = 20;
  int warmup_epochs = 10;
  double lr_start = 3.5e-5;
  double lr_peak = 3.5e-4;
  int decay_epoch = 30;
  double decay_factor = 0.1;
  int P = 8;
  int K = 8;
  double rho = 0.6;
  double alpha = 0.9;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  loss::AblationFlags flags;
  BankInit bank_init = BankInit::warmup;
  causal::Activation fusion_activation = causal::Activation::tanh;
  int fusion_dim = 0;  // 0: same as the feature width

  int batch_size() const { return P * K; }

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (warmup_epochs < 0 || decay_epoch < 0) throw ConfigError("warmup_epochs and decay_epoch must be >= 0");
    if (!(lr_start > 0.0) || !(lr_start <= lr_peak)) throw ConfigError("need 0 < lr_start <= lr_peak");
    if (!(decay_factor > 0.0)) throw ConfigError("decay_factor must be positive");
    if (P < 1 || K < 1) throw ConfigError("P and K must be >= 1");
    if (!(rho > 0.0)) throw ConfigError("rho must be positive");
    causal::validate_alpha(alpha);
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0) || !(adam_eps > 0.0)) {
      throw ConfigError("bad Adam constants");
    }
    if (fusion_dim < 0) throw ConfigError("fusion_dim must be >= 0");
  }
};

struct EvalConfig {
  eval::Protocol protocol = eval::Protocol::single_shot;
  int repeats = 10;
  bool every_epoch = true;

  void validate() const {
    if (repeats < 1) throw ConfigError("repeats must be >= 1");
  }
};

struct ExperimentConfig {
  std::uint64_t seed = 7;
  int precision = 64;  // 64 or 32 bit arithmetic
  data::GeneratorConfig data;
  double holdout_fraction = 0.25;
  data::AugmentConfig augment;
  model::ModelConfig model;
  TrainConfig train;
  EvalConfig eval;

  void validate() const {
    if (precision != 32 && precision != 64) throw ConfigError("precision must be 32 or 64");
    if (data.n_identities < 1 || data.images_per_outfit < 1 || data.n_cams < 1) {
      throw ConfigError("dataset counts must be >= 1");
    }
    if (data.clothes_per_identity < 2) throw ConfigError("clothes_per_identity must be >= 2");
    if (data.height != model.height || data.width != model.width) {
      throw ConfigError("data and model image sizes differ");
    }
    if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0)) throw ConfigError("holdout_fraction must be in (0, 1)");
    augment.validate();
    model.validate();
    train.validate();
    eval.validate();
    if (train.P > data.n_identities) throw ConfigError("P exceeds the number of identities");
  }
};

/// "s2m,jps,kl,me,c3i" -> flags with the named components switched off.
inline loss::AblationFlags parse_ablation(const std::string& list) {
  loss::AblationFlags f;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    if (item == "s2m") f.s2m = false;
    else if (item == "jps") f.jps = false;
    else if (item == "kl") f.kl = false;
    else if (item == "me") f.me = false;
    else if (item == "c3i") f.c3i = false;
    else throw ConfigError("unknown ablation component '" + item + "' (expected s2m, jps, kl, me, c3i)");
  }
  return f;
}

inline std::vector<std::string> disabled_components(const loss::AblationFlags& f) {
  std::vector<std::string> out;
  if (!f.s2m) out.push_back("s2m");
  if (!f.jps) out.push_back("jps");
  if (!f.kl) out.push_back("kl");
  if (!f.me) out.push_back("me");
  if (!f.c3i) out.push_back("c3i");
  return out;
}

namespace detail {

using nlohmann::json;

inline void reject_unknown(const json& j, const char* section, std::initializer_list<const char*> keys) {
  if (!j.is_object()) throw ConfigError(std::string("config section '") + section + "' must be an object");
  std::set<std::string> allowed(keys.begin(), keys.end());
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!allowed.count(it.key())) {
      throw ConfigError(std::string("unknown key '") + it.key() + "' in config section '" + section + "'");
    }
  }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
  }
}

}  // namespace detail

inline nlohmann::ordered_json to_json(const ExperimentConfig& c) {
  nlohmann::ordered_json j;
  j["seed"] = c.seed;
  j["precision"] = c.precision;
  j["data"] = {{"n_identities", c.data.n_identities},
               {"clothes_per_identity", c.data.clothes_per_identity},
               {"images_per_outfit", c.data.images_per_outfit},
               {"n_cams", c.data.n_cams},
               {"height", c.data.height},
               {"width", c.data.width},
               {"glyph_contrast", c.data.glyph_contrast},
               {"holdout_fraction", c.holdout_fraction}};
  j["augment"] = {{"crop_padding", c.augment.crop_padding},
                  {"hflip_prob", c.augment.hflip_prob},
                  {"erase_prob", c.augment.erase_prob},
                  {"erase_area_range", c.augment.erase_area_range}};
  j["model"] = {{"stem_channels", c.model.stem_channels},
                {"branch_channels", c.model.branch_channels},
                {"stem_stride", c.model.stem_stride},
                {"branch_strides", c.model.branch_strides},
                {"norm_groups", c.model.norm_groups},
                {"bn_eps", c.model.bn_eps},
                {"bn_momentum", c.model.bn_momentum}};
  const auto& t = c.train;
  j["train"] = {{"epochs", t.epochs},
                {"warmup_epochs", t.warmup_epochs},
                {"lr_start", t.lr_start},
                {"lr_peak", t.lr_peak},
                {"decay_epoch", t.decay_epoch},
                {"decay_factor", t.decay_factor},
                {"P", t.P},
                {"K", t.K},
                {"rho", t.rho},
                {"alpha", t.alpha},
                {"adam_beta1", t.adam_beta1},
                {"adam_beta2", t.adam_beta2},
                {"adam_eps", t.adam_eps},
                {"ablate", disabled_components(t.flags)},
                {"bank_init", to_string(t.bank_init)},
                {"fusion_activation", causal::to_string(t.fusion_activation)},
                {"fusion_dim", t.fusion_dim}};
  j["eval"] = {{"protocol", eval::to_string(c.eval.protocol)},
               {"repeats", c.eval.repeats},
               {"every_epoch", c.eval.every_epoch}};
  return j;
}

/// Missing keys keep their defaults. Throws ConfigError on unknown keys,
/// wrong types or invalid values.
inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  using detail::read;
  ExperimentConfig c;
  detail::reject_unknown(j, "top level", {"seed", "precision", "data", "augment", "model", "train", "eval"});
  read(j, "seed", c.seed);
  read(j, "precision", c.precision);
  if (j.contains("data")) {
    const auto& d = j["data"];
    detail::reject_unknown(d, "data",
                           {"n_identities", "clothes_per_identity", "images_per_outfit", "n_cams", "height", "width",
                            "glyph_contrast", "holdout_fraction"});
    read(d, "n_identities", c.data.n_identities);
    read(d, "clothes_per_identity", c.data.clothes_per_identity);
    read(d, "images_per_outfit", c.data.images_per_outfit);
    read(d, "n_cams", c.data.n_cams);
    read(d, "height", c.data.height);
    read(d, "width", c.data.width);
    read(d, "glyph_contrast", c.data.glyph_contrast);
    read(d, "holdout_fraction", c.holdout_fraction);
  }
  c.model.height = c.data.height;
  c.model.width = c.data.width;
  if (j.contains("augment")) {
    const auto& a = j["augment"];
    detail::reject_unknown(a, "augment", {"crop_padding", "hflip_prob", "erase_prob", "erase_area_range"});
    read(a, "crop_padding", c.augment.crop_padding);
    read(a, "hflip_prob", c.augment.hflip_prob);
    read(a, "erase_prob", c.augment.erase_prob);
    read(a, "erase_area_range", c.augment.erase_area_range);
  }
  if (j.contains("model")) {
    const auto& m = j["model"];
    detail::reject_unknown(m, "model",
                           {"stem_channels", "branch_channels", "stem_stride", "branch_strides", "norm_groups", "bn_eps",
                            "bn_momentum"});
    read(m, "stem_channels", c.model.stem_channels);
    read(m, "branch_channels", c.model.branch_channels);
    read(m, "stem_stride", c.model.stem_stride);
    read(m, "branch_strides", c.model.branch_strides);
    read(m, "norm_groups", c.model.norm_groups);
    read(m, "bn_eps", c.model.bn_eps);
    read(m, "bn_momentum", c.model.bn_momentum);
  }
  if (j.contains("train")) {
    const auto& t = j["train"];
    detail::reject_unknown(t, "train",
                           {"epochs", "warmup_epochs", "lr_start", "lr_peak", "decay_epoch", "decay_factor", "P", "K",
                            "rho", "alpha", "adam_beta1", "adam_beta2", "adam_eps", "ablate", "bank_init",
                            "fusion_activation", "fusion_dim"});
    auto& tc = c.train;
    read(t, "epochs", tc.epochs);
    read(t, "warmup_epochs", tc.warmup_epochs);
    read(t, "lr_start", tc.lr_start);
    read(t, "lr_peak", tc.lr_peak);
    read(t, "decay_epoch", tc.decay_epoch);
    read(t, "decay_factor", tc.decay_factor);
    read(t, "P", tc.P);
    read(t, "K", tc.K);
    read(t, "rho", tc.rho);
    read(t, "alpha", tc.alpha);
    read(t, "adam_beta1", tc.adam_beta1);
    read(t, "adam_beta2", tc.adam_beta2);
    read(t, "adam_eps", tc.adam_eps);
    if (t.contains("ablate")) {
      std::vector<std::string> names;
      read(t, "ablate", names);
      std::string joined;
      for (const auto& n : names) joined += n + ",";
      tc.flags = parse_ablation(joined);
    }
    std::string s;
    if (t.contains("bank_init")) {
      read(t, "bank_init", s);
      tc.bank_init = parse_bank_init(s);
    }
    if (t.contains("fusion_activation")) {
      read(t, "fusion_activation", s);
      tc.fusion_activation = causal::parse_activation(s);
    }
    read(t, "fusion_dim", tc.fusion_dim);
  }
  if (j.contains("eval")) {
    const auto& e = j["eval"];
    detail::reject_unknown(e, "eval", {"protocol", "repeats", "every_epoch"});
    std::string p;
    if (e.contains("protocol")) {
      read(e, "protocol", p);
      c.eval.protocol = eval::parse_protocol(p);
    }
    read(e, "repeats", c.eval.repeats);
    read(e, "every_epoch", c.eval.every_epoch);
  }
  c.data.seed = c.seed;
  c.validate();
  return c;
}

inline ExperimentConfig config_from_string(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return config_from_json(j);
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return config_from_string(ss.str());
}

inline void save_config(const std::filesystem::path& path, const ExperimentConfig& c) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path.string());
  os << to_json(c).dump(2) << "\n";
}

}  // namespace ccil
