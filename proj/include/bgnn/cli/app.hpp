// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "../errors.hpp"
#include "commands.hpp"
#include "config.hpp"

namespace bgnn::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

/// Flags shared by `train` and `sweep`; each one overrides a config key.
struct RunFlags {
  std::string config;
  std::optional<std::string> task, plan, dataset, teachers, student, lambda, tau_min, tau_max,
      fixed_tau, seeds, seed, out, epochs, lr, layers;
  bool no_boost = false;
  bool no_adaptive = false;

  void attach(CLI::App& app) {
    app.add_option("--config", config, "Configuration file");
    app.add_option("--task", task, "node or graph");
    app.add_option("--plan", plan, "nokd, kd, bgnn or ensemble");
    app.add_option("--dataset", dataset, "sbm:small, sbm:<n>, graphs:<n>, json:<file>, tu:<dir>:<NAME> or a name under BGNN_DATA_DIR");
    app.add_option("--teachers", teachers, "Comma-separated teacher architectures, first trained first");
    app.add_option("--student", student, "Student architecture");
    app.add_option("--lambda", lambda, "Weight of the distillation term");
    app.add_option("--tau-min", tau_min, "Lower end of the adaptive temperature range");
    app.add_option("--tau-max", tau_max, "Upper end of the adaptive temperature range");
    app.add_option("--fixed-tau", fixed_tau, "Temperature when adaptive temperature is off");
    app.add_flag("--no-boost", no_boost, "Keep uniform sample weights");
    app.add_flag("--no-adaptive-temp", no_adaptive, "Use the fixed temperature");
    app.add_option("--seeds", seeds, "Seeds, e.g. 0-4 or 0,2,7");
    app.add_option("--seed", seed, "Single seed");
    app.add_option("--out", out, "Output directory");
    app.add_option("--epochs", epochs, "Epochs per training step");
    app.add_option("--lr", lr, "Learning rate");
    app.add_option("--layers", layers, "Message-passing layers (plan nokd only)");
  }

  RunConfig resolve() const {
    auto file = config.empty() ? ConfigFile{} : ConfigFile::load(config);
    const auto put = [&](const char* key, const std::optional<std::string>& v, const char* flag) {
      if (v) file.set(key, *v, flag);
    };
    put("run.task", task, "--task");
    put("run.plan", plan, "--plan");
    put("run.dataset", dataset, "--dataset");
    put("models.teachers", teachers, "--teachers");
    put("models.student", student, "--student");
    put("distill.lambda", lambda, "--lambda");
    put("distill.tau_min", tau_min, "--tau-min");
    put("distill.tau_max", tau_max, "--tau-max");
    put("distill.fixed_tau", fixed_tau, "--fixed-tau");
    put("run.seeds", seeds, "--seeds");
    put("run.seeds", seed, "--seed");
    put("run.out", out, "--out");
    put("train.epochs", epochs, "--epochs");
    put("train.lr", lr, "--lr");
    put("models.layers", layers, "--layers");
    if (no_boost) file.set("distill.boosting", "false", "--no-boost");
    if (no_adaptive) file.set("distill.adaptive_temperature", "false", "--no-adaptive-temp");
    return build_run_config(file);
  }
};

/// Entry point shared by the executable and the tests. Returns the exit
/// code: 0 success, 1 runtime failure, 2 usage or configuration error.
inline int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Boosted graph neural network distillation"};
  app.require_subcommand(1);

  RunFlags train_flags;
  auto* train = app.add_subcommand("train", "Train a plan over one or more seeds");
  train_flags.attach(*train);

  RunFlags sweep_flags;
  std::string sweep_param, sweep_values;
  std::size_t jobs = 1;
  auto* sweep = app.add_subcommand("sweep", "Repeat a run over values of one parameter");
  sweep_flags.attach(*sweep);
  sweep->add_option("--param", sweep_param, "tau, lambda or lr")->required();
  sweep->add_option("--values", sweep_values, "Comma list or lo:hi:step")->required();
  sweep->add_option("--jobs", jobs, "Parallel worker threads");

  std::vector<std::string> ckpts;
  std::string cka_dataset, cka_out = "cka.csv";
  std::uint64_t cka_seed = 0;
  auto* cka = app.add_subcommand("cka", "Layer-wise CKA between checkpoints");
  cka->add_option("--checkpoints", ckpts, "Checkpoint prefixes")->required()->delimiter(',');
  cka->add_option("--dataset", cka_dataset, "Dataset spec")->required();
  cka->add_option("--out", cka_out, "Output CSV");
  cka->add_option("--seed", cka_seed, "Seed for generated datasets and splits");

  std::string fixture_kind, fixture_out = "fixtures";
  std::uint64_t fixture_seed = 0;
  auto* fixtures = app.add_subcommand("make-fixtures", "Write deterministic test datasets");
  fixtures->add_option("--kind", fixture_kind, "sbm, tu_toy or json_toy")->required();
  fixtures->add_option("--seed", fixture_seed, "Seed");
  fixtures->add_option("--out", fixture_out, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (train->parsed()) {
      const auto rc = train_flags.resolve();
      const auto s = cmd_train(rc);
      std::printf("%s: mean test accuracy %.4f (std %.4f) over %zu seed(s)\n",
                  to_string(rc.plan).c_str(), s.accuracy.mean, s.accuracy.std, s.runs.size());
    } else if (sweep->parsed()) {
      const auto rc = sweep_flags.resolve();
      const auto param = parse_sweep_param(sweep_param);
      const auto values = parse_values(sweep_values);
      for (const auto& row : cmd_sweep(rc, param, values, jobs)) {
        std::printf("%s=%s: mean %.4f std %.4f\n", sweep_param.c_str(),
                    format_value(row.value).c_str(), row.accuracy.mean, row.accuracy.std);
      }
    } else if (cka->parsed()) {
      std::vector<std::filesystem::path> paths(ckpts.begin(), ckpts.end());
      cmd_cka(paths, cka_dataset, cka_out, cka_seed);
      std::printf("wrote %s\n", cka_out.c_str());
    } else if (fixtures->parsed()) {
      const auto path = cmd_make_fixtures(parse_fixture_kind(fixture_kind), fixture_seed, fixture_out);
      std::printf("wrote %s\n", path.string().c_str());
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace bgnn::cli
