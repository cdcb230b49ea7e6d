#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "ccil/train.hpp"

namespace ccil::tu {

inline std::vector<data::FloatImage> random_images(int n, int h, int w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<data::FloatImage> out;
  for (int i = 0; i < n; ++i) {
    data::FloatImage im{3, h, w, std::vector<double>(static_cast<std::size_t>(3 * h * w))};
    for (auto& v : im.data) v = u(rng);
    out.push_back(std::move(im));
  }
  return out;
}

template <typename S>
Mat<S> random_mat(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> n(0.0, sd);
  Mat<S> m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(n(rng));
  return m;
}

// 16x8 inputs, narrow widths: fast enough for finite differences.
inline ExperimentConfig tiny_config() {
  ExperimentConfig cfg;
  cfg.model.height = cfg.data.height = 16;
  cfg.model.width = cfg.data.width = 8;
  cfg.model.stem_channels = 4;
  cfg.model.branch_channels = {6, 8, 8};
  cfg.model.norm_groups = 2;
  cfg.train.P = 3;
  cfg.train.K = 2;
  return cfg;
}

// Small end-to-end setup for training-loop tests: 4 identities, 32x16.
inline ExperimentConfig small_run_config(std::uint64_t seed) {
  ExperimentConfig cfg;
  cfg.seed = seed;
  cfg.data.seed = seed;
  cfg.data.n_identities = 4;
  cfg.data.images_per_outfit = 6;
  cfg.model.height = cfg.data.height = 32;
  cfg.model.width = cfg.data.width = 16;
  cfg.model.stem_channels = 8;
  cfg.model.branch_channels = {8, 16, 16};
  cfg.model.norm_groups = 4;
  cfg.train.P = 2;
  cfg.train.K = 4;
  cfg.train.epochs = 3;
  cfg.train.warmup_epochs = 2;
  cfg.eval.repeats = 2;
  cfg.holdout_fraction = 0.34;
  return cfg;
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("ccil_unit_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace ccil::tu
