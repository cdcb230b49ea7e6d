// ccil: dataset generation, training, evaluation, feature export and the
// ablation sweep from one binary.
//
//   ccil datagen --out data/
//   ccil train --data data/ --out runs/full [--ablate s2m,jps,kl,me,c3i]
//   ccil eval --checkpoint runs/full/final.ckpt --data data/ --setting cc
//   ccil export-features --checkpoint ... --data data/ --file feats.csv
//   ccil ablate --data data/ --out runs/ablation
//
// Exit codes: 0 success, 2 configuration/usage error, 3 runtime failure.

#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "ccil/commands.hpp"

int main(int argc, char** argv) {
  using namespace ccil;
  namespace fs = std::filesystem;

  CLI::App app{"Causal clothes-invariant re-identification toolkit"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  app.add_option("--config", config_path, "experiment config (JSON)")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "override the experiment seed");
  app.add_option("--out", out, "output directory");

  std::string data_dir;
  std::string checkpoint;

  auto* datagen = app.add_subcommand("datagen", "generate the synthetic dataset");

  auto* train = app.add_subcommand("train", "train a model");
  std::string ablate;
  std::string resume;
  std::optional<int> epochs;
  train->add_option("--data", data_dir, "dataset directory")->required();
  train->add_option("--ablate", ablate, "comma list of components to disable: s2m,jps,kl,me,c3i");
  train->add_option("--resume", resume, "checkpoint to resume from")->check(CLI::ExistingFile);
  train->add_option("--epochs", epochs, "override train.epochs");

  auto* evalc = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string setting = "cc";
  std::string protocol = "single-shot";
  int repeats = 10;
  evalc->add_option("--checkpoint", checkpoint, "checkpoint archive")->required()->check(CLI::ExistingFile);
  evalc->add_option("--data", data_dir, "dataset directory")->required();
  evalc->add_option("--setting", setting, "cc | standard")->check(CLI::IsMember({"cc", "clothes_changing", "standard"}));
  evalc->add_option("--protocol", protocol, "single-shot | multi-shot")
      ->check(CLI::IsMember({"single-shot", "multi-shot"}));
  evalc->add_option("--repeats", repeats, "single-shot repeats")->check(CLI::PositiveNumber);

  auto* exportc = app.add_subcommand("export-features", "dump f_img / f_clt for every image");
  std::string file;
  exportc->add_option("--checkpoint", checkpoint, "checkpoint archive")->required()->check(CLI::ExistingFile);
  exportc->add_option("--data", data_dir, "dataset directory")->required();
  exportc->add_option("--file", file, "output file (default <out>/features.csv)");

  auto* ablatec = app.add_subcommand("ablate", "run the ten-row component ablation");
  ablatec->add_option("--data", data_dir, "dataset directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? cli::kOk : cli::kConfigError;
  }

  try {
    auto cfg = cli::resolve_config(config_path, seed);
    auto need_out = [&]() -> fs::path {
      if (out.empty()) throw ConfigError("--out is required for this command");
      return out;
    };

    if (*datagen) {
      cli::cmd_datagen(cfg, need_out(), std::cout);
    } else if (*train) {
      if (!ablate.empty()) cfg.train.flags = parse_ablation(ablate);
      if (epochs) cfg.train.epochs = *epochs;
      cfg.validate();
      const auto o = cli::cmd_train(cfg, data_dir, need_out(),
                                    resume.empty() ? std::nullopt : std::optional<fs::path>(resume), std::cout);
      std::cout << train::eval_record("final", cfg.train.epochs, o.final_eval).dump(2) << "\n";
    } else if (*evalc) {
      cli::EvalRequest req{data::parse_setting(setting), eval::parse_protocol(protocol), repeats, cfg.seed};
      const auto rep = cli::cmd_eval(checkpoint, data_dir, req);
      const auto text = rep.to_json().dump(2);
      std::cout << text << "\n";
      if (!out.empty()) {
        cli::ensure_writable_dir(out);
        std::ofstream(fs::path(out) / "eval.json") << text << "\n";
        save_config(fs::path(out) / "config.json", cfg);
      }
    } else if (*exportc) {
      fs::path target = file.empty() ? need_out() / "features.csv" : fs::path(file);
      const double mac = cli::cmd_export_features(checkpoint, data_dir, target);
      std::cout << "wrote " << target.string() << "  mean|cos(f_img, f_clt)| = " << mac << "\n";
    } else if (*ablatec) {
      cli::cmd_ablate(cfg, data_dir, need_out(), std::cout);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return cli::kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return cli::kRuntimeError;
  }
  return cli::kOk;
}
