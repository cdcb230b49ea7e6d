#pragma once

// The work behind each CLI verb. Kept out of tools/ so tests can drive the
// same code paths without spawning processes.

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ccil/config.hpp"
#include "ccil/datagen.hpp"
#include "ccil/eval.hpp"
#include "ccil/train.hpp"

namespace ccil::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kConfigError = 2, kRuntimeError = 3 };

struct AblationRow {
  int index;  // 1-based, as in the published ablation table
  loss::AblationFlags flags;
};

/// The ten S2M / JPS / L_kl / L_me / C3I combinations, rows 1-5 without and
/// rows 6-10 with the intervention module.
inline std::array<AblationRow, 10> ablation_rows() {
  std::array<AblationRow, 10> rows{};
  const std::array<std::array<bool, 4>, 5> cid{{{false, false, false, false},
                                                {true, false, false, false},
                                                {true, true, false, false},
                                                {true, true, true, false},
                                                {true, true, true, true}}};
  for (int c3i = 0; c3i < 2; ++c3i)
    for (int i = 0; i < 5; ++i) {
      const auto& f = cid[static_cast<std::size_t>(i)];
      rows[static_cast<std::size_t>(c3i * 5 + i)] = {c3i * 5 + i + 1, {f[0], f[1], f[2], f[3], c3i == 1}};
    }
  return rows;
}

inline ExperimentConfig resolve_config(const std::string& path, std::optional<std::uint64_t> seed) {
  ExperimentConfig cfg = path.empty() ? ExperimentConfig{} : load_config(path);
  if (seed) {
    cfg.seed = *seed;
    cfg.data.seed = *seed;
  }
  cfg.validate();
  return cfg;
}

inline void ensure_writable_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw Error("cannot create output directory " + dir.string());
  const auto probe = dir / ".ccil_write_probe";
  std::ofstream os(probe);
  if (!os) throw Error("output directory " + dir.string() + " is not writable");
  os.close();
  fs::remove(probe, ec);
}

// ---------------------------------------------------------------------------

struct DatagenSummary {
  int n_identities = 0;
  int n_clothes = 0;
  int n_cams = 0;
  std::size_t train = 0;
  std::size_t query = 0;
  std::size_t gallery_standard = 0;
  std::size_t gallery_cc = 0;
};

inline DatagenSummary cmd_datagen(const ExperimentConfig& cfg, const fs::path& out, std::ostream& log) {
  ensure_writable_dir(out);
  const auto ds = train::make_dataset(cfg);
  data::save_dataset(out, ds.manifest, ds.images);
  save_config(out / "config.json", cfg);
  const auto std_split = data::splits_from_tags(ds.manifest, data::Setting::standard);
  const auto cc_split = data::splits_from_tags(ds.manifest, data::Setting::clothes_changing);
  DatagenSummary s{ds.manifest.n_identities, ds.manifest.n_clothes, ds.manifest.n_cams,
                   std_split.train.records.size(), std_split.query.records.size(),
                   std_split.gallery.records.size(), cc_split.gallery.records.size()};
  log << "N=" << s.n_identities << " M=" << s.n_clothes << " cams=" << s.n_cams << " images=" << ds.manifest.records.size()
      << "\ntrain=" << s.train << " query=" << s.query << " gallery(standard)=" << s.gallery_standard
      << " gallery(cc)=" << s.gallery_cc << "\n";
  return s;
}

// ---------------------------------------------------------------------------

inline train::PreparedData load_prepared(const fs::path& data_dir) {
  if (!fs::exists(data_dir / "manifest.txt")) throw DataError("no manifest.txt in " + data_dir.string());
  const auto ds = data::load_dataset(data_dir);
  return train::prepare_data(ds.manifest, ds.images);
}

struct TrainOutcome {
  train::EvalBundle final_eval;
  std::size_t steps = 0;
};

template <typename S>
TrainOutcome run_fit(const train::PreparedData& d, const ExperimentConfig& cfg, const train::FitOptions& opt) {
  auto r = train::fit<S>(d, cfg, opt);
  TrainOutcome o;
  o.steps = r.steps.size();
  if (r.final_eval) o.final_eval = *r.final_eval;
  return o;
}

inline TrainOutcome fit_any_precision(const train::PreparedData& d, const ExperimentConfig& cfg,
                                      const train::FitOptions& opt) {
  return cfg.precision == 32 ? run_fit<float>(d, cfg, opt) : run_fit<double>(d, cfg, opt);
}

inline TrainOutcome cmd_train(ExperimentConfig cfg, const fs::path& data_dir, const fs::path& out,
                              const std::optional<fs::path>& resume, std::ostream& log) {
  ensure_writable_dir(out);
  const auto d = load_prepared(data_dir);
  train::FitOptions opt;
  opt.out_dir = out;
  opt.resume_from = resume;
  opt.progress = &log;
  auto o = fit_any_precision(d, cfg, opt);
  std::ofstream(out / "summary.json") << train::eval_record("final", cfg.train.epochs, o.final_eval).dump(2) << "\n";
  return o;
}

// ---------------------------------------------------------------------------

struct LoadedModel {
  ExperimentConfig config;
  int n_identities = 0;
  int n_clothes = 0;
  std::optional<train::TrainState<double>> state64;
  std::optional<train::TrainState<float>> state32;
};

inline LoadedModel load_model(const fs::path& checkpoint) {
  const auto ar = io::Archive::load(checkpoint);
  const auto info = train::read_checkpoint_info(ar);
  LoadedModel m{info.config, info.n_identities, info.n_clothes, std::nullopt, std::nullopt};
  if (info.config.precision == 32) {
    m.state32 = train::load_checkpoint<float>(ar, info.config);
  } else {
    m.state64 = train::load_checkpoint<double>(ar, info.config);
  }
  return m;
}

inline void check_label_space(const LoadedModel& m, const train::PreparedData& d) {
  if (m.n_identities != d.n_identities || m.n_clothes != d.n_clothes) {
    throw ConfigError("checkpoint/data mismatch: checkpoint has N=" + std::to_string(m.n_identities) +
                      " M=" + std::to_string(m.n_clothes) + ", data has N=" + std::to_string(d.n_identities) +
                      " M=" + std::to_string(d.n_clothes));
  }
}

inline train::FeatureSet features_of(const LoadedModel& m, const std::vector<data::FloatImage>& images) {
  const bool s2m = m.config.train.flags.s2m;
  return m.state32 ? train::extract_features(m.state32->params.model, m.config.model, s2m, images)
                   : train::extract_features(m.state64->params.model, m.config.model, s2m, images);
}

struct EvalRequest {
  data::Setting setting = data::Setting::clothes_changing;
  eval::Protocol protocol = eval::Protocol::single_shot;
  int repeats = 10;
  std::uint64_t seed = 0;
};

inline eval::EvalReport cmd_eval(const fs::path& checkpoint, const fs::path& data_dir, const EvalRequest& req) {
  if (req.repeats < 1) throw ConfigError("--repeats must be >= 1");
  const auto m = load_model(checkpoint);
  const auto d = load_prepared(data_dir);
  check_label_space(m, d);
  const auto q = features_of(m, d.query_images);
  const auto g = features_of(m, d.gallery_images);
  const auto qm = eval::SampleMeta::from(d.query);
  auto gm = eval::SampleMeta::from(d.gallery);
  Mat<double> gf = g.f_img;
  if (req.setting == data::Setting::clothes_changing) {
    gf.resize(static_cast<Eigen::Index>(d.cc_gallery.size()), g.f_img.cols());
    for (std::size_t k = 0; k < d.cc_gallery.size(); ++k)
      gf.row(static_cast<Eigen::Index>(k)) = g.f_img.row(static_cast<Eigen::Index>(d.cc_gallery[k]));
    gm = gm.subset(d.cc_gallery);
  }
  return eval::evaluate(q.f_img, gf, qm, gm, req.setting, req.protocol, req.repeats, req.seed);
}

// ---------------------------------------------------------------------------

/// Columnar text dump: '#' comment lines, one CSV header, one row per
/// manifest record (image_id, identity, clothes, camera, split, then D values
/// of f_img and D of f_clt), and '#' footer lines with summary statistics.
inline double cmd_export_features(const fs::path& checkpoint, const fs::path& data_dir, const fs::path& out_file) {
  const auto m = load_model(checkpoint);
  if (!fs::exists(data_dir / "manifest.txt")) throw DataError("no manifest.txt in " + data_dir.string());
  const auto ds = data::load_dataset(data_dir);
  if (m.n_identities != ds.manifest.n_identities || m.n_clothes != ds.manifest.n_clothes) {
    throw ConfigError("checkpoint/data mismatch in label space");
  }
  std::vector<data::FloatImage> images;
  for (const auto& r : ds.manifest.records) images.push_back(data::to_float(ds.images.at(r.image_id)));
  const auto f = features_of(m, images);
  const double mac = eval::mean_abs_cosine(f.f_img, f.f_clt);

  std::vector<std::size_t> test_rows;
  for (std::size_t i = 0; i < ds.manifest.records.size(); ++i)
    if (ds.manifest.records[i].split != data::Split::train) test_rows.push_back(i);
  double mac_test = 0.0;
  if (!test_rows.empty()) {
    Mat<double> a(static_cast<Eigen::Index>(test_rows.size()), f.f_img.cols()), b(a.rows(), a.cols());
    for (std::size_t k = 0; k < test_rows.size(); ++k) {
      a.row(static_cast<Eigen::Index>(k)) = f.f_img.row(static_cast<Eigen::Index>(test_rows[k]));
      b.row(static_cast<Eigen::Index>(k)) = f.f_clt.row(static_cast<Eigen::Index>(test_rows[k]));
    }
    mac_test = eval::mean_abs_cosine(a, b);
  }

  if (out_file.has_parent_path()) fs::create_directories(out_file.parent_path());
  std::ofstream os(out_file);
  if (!os) throw Error("cannot write " + out_file.string());
  const auto D = f.f_img.cols();
  os << "# ccil-features v1 rows=" << images.size() << " dim=" << D << "\n";
  os << "image_id,identity,clothes,camera,split";
  for (Eigen::Index k = 0; k < D; ++k) os << ",f_img_" << k;
  for (Eigen::Index k = 0; k < D; ++k) os << ",f_clt_" << k;
  os << "\n";
  char buf[32];
  for (std::size_t i = 0; i < ds.manifest.records.size(); ++i) {
    const auto& r = ds.manifest.records[i];
    os << r.image_id << ',' << r.identity_label << ',' << r.clothes_label << ',' << r.camera_id << ','
       << data::to_string(r.split);
    for (const auto* mat : {&f.f_img, &f.f_clt})
      for (Eigen::Index k = 0; k < D; ++k) {
        std::snprintf(buf, sizeof buf, "%.9g", (*mat)(static_cast<Eigen::Index>(i), k));
        os << ',' << buf;
      }
    os << "\n";
  }
  os << "# mean_abs_cos_all=" << std::setprecision(17) << mac << "\n";
  os << "# mean_abs_cos_test=" << std::setprecision(17) << mac_test << "\n";
  return mac;
}

// ---------------------------------------------------------------------------

struct AblationResult {
  AblationRow row;
  train::EvalBundle eval;
};

inline std::string flag_cell(bool on) { return on ? "x" : "-"; }

/// Runs the ten rows sequentially with the same seed. Each finished row is
/// appended to ablation.tsv immediately so a failure keeps earlier results.
inline std::vector<AblationResult> cmd_ablate(const ExperimentConfig& base, const fs::path& data_dir,
                                              const fs::path& out, std::ostream& log) {
  ensure_writable_dir(out);
  const auto d = load_prepared(data_dir);
  save_config(out / "config.json", base);
  {
    std::ofstream t(out / "ablation.tsv", std::ios::trunc);
    t << "row\ts2m\tjps\tkl\tme\tc3i\tcc_rank1\tcc_rank10\tcc_mAP\tstd_rank1\tstd_mAP\tmean_abs_cos\n";
  }
  std::vector<AblationResult> results;
  for (const auto& row : ablation_rows()) {
    ExperimentConfig cfg = base;
    cfg.train.flags = row.flags;
    char name[16];
    std::snprintf(name, sizeof name, "row%02d", row.index);
    log << "ablation " << name << "\n";
    train::FitOptions opt;
    opt.out_dir = out / name;
    const auto o = fit_any_precision(d, cfg, opt);
    results.push_back({row, o.final_eval});
    const auto& e = o.final_eval;
    std::ofstream t(out / "ablation.tsv", std::ios::app);
    t << row.index << '\t' << flag_cell(row.flags.s2m) << '\t' << flag_cell(row.flags.jps) << '\t'
      << flag_cell(row.flags.kl) << '\t' << flag_cell(row.flags.me) << '\t' << flag_cell(row.flags.c3i) << '\t'
      << std::setprecision(6) << e.cc.result.rank(1) << '\t' << e.cc.result.rank(10) << '\t' << e.cc.result.map
      << '\t' << e.standard.result.rank(1) << '\t' << e.standard.result.map << '\t' << e.mean_abs_cos << "\n";
  }
  std::ifstream t(out / "ablation.tsv");
  log << t.rdbuf();
  return results;
}

}  // namespace ccil::cli
