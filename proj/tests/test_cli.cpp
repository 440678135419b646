// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include <bgnn/cli/app.hpp>
#include <bgnn/fixtures.hpp>
#include <bgnn/graph_io.hpp>
#include <bgnn/io.hpp>

using namespace bgnn;
namespace fs = std::filesystem;

namespace {

int run(std::vector<std::string> args) {
  args.insert(args.begin(), "bgnn");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return cli::run_cli(static_cast<int>(argv.size()), argv.data());
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("bgnn_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string expect_config_error(const std::string& text) {
  try {
    cli::build_run_config(cli::ConfigFile::parse(text, "c.ini"));
  } catch (const ConfigError& e) {
    return e.what();
  }
  ADD_FAILURE() << "no ConfigError for:\n" << text;
  return {};
}

}  // namespace

TEST(Config, ErrorsCarryFileAndLine) {
  EXPECT_NE(expect_config_error("[run]\nplan = nokd\nnot a pair\n").find("c.ini:3"),
            std::string::npos);
  const auto unknown = expect_config_error("[run]\nplan = nokd\n\n[train]\nbogus = 1\n");
  EXPECT_NE(unknown.find("c.ini:5"), std::string::npos) << unknown;
  EXPECT_NE(unknown.find("bogus"), std::string::npos);
  EXPECT_NE(expect_config_error("[train]\nepochs = many\n").find("c.ini:2"), std::string::npos);
  EXPECT_NE(expect_config_error("[distill]\nlambda = -1\n").find("c.ini:2"), std::string::npos);
  EXPECT_NE(expect_config_error("[run]\nplan = nokd\nplan = bgnn\n").find("duplicate"),
            std::string::npos);
  EXPECT_NE(expect_config_error("plan = nokd\n").find("outside a section"), std::string::npos);
  expect_config_error("[run]\nplan = bgnn\n[models]\nteachers =\n");
  expect_config_error("[split]\ntrain = 0.8\nval = 0.3\n");
}

TEST(Config, FlagsOverrideFile) {
  auto file = cli::ConfigFile::parse("# comment\n[train]\nepochs = 7\nlr = 0.05\n", "c.ini");
  file.set("train.epochs", "3", "--epochs");
  const auto rc = cli::build_run_config(file);
  EXPECT_EQ(rc.epochs, 3u);
  EXPECT_DOUBLE_EQ(rc.lr, 0.05);
  file.set("train.epochs", "x", "--epochs");
  try {
    cli::build_run_config(file);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("--epochs"), std::string::npos);
  }
}

TEST(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run({}), 2);
  EXPECT_EQ(run({"train", "--no-such-flag"}), 2);
  EXPECT_EQ(run({"train", "--plan", "nope", "--dataset", "sbm:small"}), 2);
  EXPECT_EQ(run({"train", "--dataset", "sbm:small", "--task", "graph", "--out",
                 scratch("task").string()}),
            2);
  EXPECT_EQ(run({"train", "--dataset", "cora"}), 2);
  EXPECT_EQ(run({"make-fixtures", "--kind", "weird"}), 2);
  EXPECT_EQ(run({"--help"}), 0);
}

TEST(Cli, UnknownConfigKeyWritesNothing) {
  const auto dir = scratch("unknown");
  std::ofstream(dir / "run.ini") << "[run]\nplan = nokd\ndataset = sbm:small\n[train]\nepochz = 3\n";
  const auto out = dir / "out";
  EXPECT_EQ(run({"train", "--config", (dir / "run.ini").string(), "--out", out.string()}), 2);
  EXPECT_FALSE(fs::exists(out));
}

TEST(Cli, NokdRunWritesAuditableOutputs) {
  const auto out = scratch("nokd");
  ASSERT_EQ(run({"train", "--plan", "nokd", "--dataset", "sbm:small", "--seeds", "0-1", "--epochs",
                 "5", "--out", out.string()}),
            0);
  for (const char* seed : {"0", "1"}) {
    const auto prefix = out / (std::string("nokd_seed") + seed);
    const auto metrics = nlohmann::json::parse(read_file(prefix.string() + "_metrics.json"));
    for (const char* key : {"plan", "seed", "per_epoch", "test_acc", "teacher_mis_acc", "wall_ms"})
      EXPECT_TRUE(metrics.contains(key)) << key;
    EXPECT_EQ(metrics["plan"], "nokd");
    EXPECT_EQ(metrics["per_epoch"].size(), 5u);
    const auto rows = parse_predictions_csv(read_file(prefix.string() + "_predictions.csv"));
    EXPECT_DOUBLE_EQ(accuracy_of(rows), metrics["test_acc"].get<double>());
  }
  const auto summary = nlohmann::json::parse(read_file(out / "nokd_summary.json"));
  EXPECT_EQ(summary["seeds"].size(), 2u);
}

TEST(Cli, RunsAreReproducible) {
  const auto a = scratch("rep_a"), b = scratch("rep_b");
  for (const auto& out : {a, b}) {
    ASSERT_EQ(run({"train", "--plan", "bgnn", "--teachers", "gat", "--student", "gcn", "--dataset",
                   "sbm:small", "--seed", "3", "--epochs", "4", "--out", out.string()}),
              0);
  }
  auto ja = nlohmann::json::parse(read_file(a / "bgnn_seed3_metrics.json"));
  auto jb = nlohmann::json::parse(read_file(b / "bgnn_seed3_metrics.json"));
  ja.erase("wall_ms");
  jb.erase("wall_ms");
  for (auto* j : {&ja, &jb})
    for (auto& s : (*j)["steps"]) s.erase("wall_ms");
  EXPECT_EQ(ja, jb);
  EXPECT_EQ(read_file(a / "bgnn_seed3_predictions.csv"), read_file(b / "bgnn_seed3_predictions.csv"));
}

TEST(Cli, CkaOnSavedCheckpoints) {
  const auto dir = scratch("cka");
  std::ofstream(dir / "run.ini") << "[run]\ncheckpoints = true\n";
  ASSERT_EQ(run({"train", "--config", (dir / "run.ini").string(), "--plan", "bgnn", "--teachers",
                 "gat", "--student", "sage", "--dataset", "sbm:small", "--seed", "0", "--epochs",
                 "3", "--out", dir.string()}),
            0);
  const auto ck = dir / "checkpoints";
  const auto t = (ck / "bgnn_seed0_step0_gat").string(), s = (ck / "bgnn_seed0_step1_sage").string();
  const auto csv = dir / "cka.csv";
  ASSERT_EQ(run({"cka", "--checkpoints", t + "," + s, "--dataset", "sbm:small", "--out",
                 csv.string()}),
            0);
  const auto text = read_file(csv);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 17);
  EXPECT_NE(text.find("gat,1,gat,1,1.000000"), std::string::npos);

  EXPECT_EQ(run({"cka", "--checkpoints", t + "," + (ck / "missing").string(), "--dataset",
                 "sbm:small", "--out", csv.string()}),
            2);
  // node-level checkpoints cannot run on a graph-level dataset
  EXPECT_EQ(run({"cka", "--checkpoints", t, "--dataset", "graphs:20", "--out", csv.string()}), 1);
}

TEST(Cli, SweepWritesSummary) {
  const auto out = scratch("sweep");
  const std::vector<std::string> base{"sweep", "--param", "tau", "--values", "1:3:1", "--plan",
                                      "kd", "--teachers", "gcn", "--student", "gcn", "--dataset",
                                      "sbm:small", "--epochs", "3", "--seed", "0"};
  auto serial = base;
  serial.insert(serial.end(), {"--out", (out / "serial").string()});
  auto parallel = base;
  parallel.insert(parallel.end(), {"--out", (out / "parallel").string(), "--jobs", "2"});
  ASSERT_EQ(run(serial), 0);
  ASSERT_EQ(run(parallel), 0);
  const auto text = read_file(out / "serial" / "sweep_tau_summary.csv");
  EXPECT_EQ(text.rfind("value,mean_acc,std\n", 0), 0u);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 4);
  EXPECT_EQ(text, read_file(out / "parallel" / "sweep_tau_summary.csv"));
  EXPECT_EQ(run({"sweep", "--param", "depth", "--values", "1", "--dataset", "sbm:small"}), 2);
}

TEST(Fixtures, OutputIsByteIdentical) {
  const auto a = scratch("fx_a"), b = scratch("fx_b");
  for (const char* kind : {"sbm", "tu_toy", "json_toy"}) {
    ASSERT_EQ(run({"make-fixtures", "--kind", kind, "--seed", "1", "--out", a.string()}), 0);
    ASSERT_EQ(run({"make-fixtures", "--kind", kind, "--seed", "1", "--out", b.string()}), 0);
  }
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    ++files;
    EXPECT_EQ(read_file(e.path()), read_file(b / fs::relative(e.path(), a))) << e.path();
  }
  EXPECT_GE(files, 5u);
}

TEST(Fixtures, TuToyRoundTripsAndTrains) {
  const auto dir = scratch("tu");
  ASSERT_EQ(run({"make-fixtures", "--kind", "tu_toy", "--out", dir.string()}), 0);
  const auto ds = load_tu_dataset(dir / "TU_TOY", "TU_TOY");
  const auto ref = tu_toy_graphs();
  ASSERT_EQ(ds.graphs.size(), ref.size());
  for (std::size_t k = 0; k < ref.size(); ++k) {
    EXPECT_EQ(ds.graphs[k].edges, ref[k].edges);
    EXPECT_EQ(ds.graphs[k].graph_label, ref[k].graph_label);
    EXPECT_EQ(ds.graphs[k].node_labels, ref[k].node_labels);
  }
  EXPECT_EQ(run({"train", "--plan", "nokd", "--dataset", "tu:" + (dir / "TU_TOY").string() + ":TU_TOY",
                 "--epochs", "2", "--out", (dir / "out").string()}),
            0);
}

TEST(Fixtures, JsonToySchema) {
  const auto dir = scratch("json");
  ASSERT_EQ(run({"make-fixtures", "--kind", "json_toy", "--out", dir.string()}), 0);
  const auto j = nlohmann::json::parse(read_file(dir / "json_toy.json"));
  for (const char* key : {"n_nodes", "edges", "features", "labels", "train_idx", "val_idx", "test_idx"})
    EXPECT_TRUE(j.contains(key)) << key;
  const auto n = j["n_nodes"].get<std::size_t>();
  EXPECT_EQ(j["labels"].size(), n);
  EXPECT_EQ(j["train_idx"].size() + j["val_idx"].size() + j["test_idx"].size(), n);
  EXPECT_EQ(run({"train", "--plan", "nokd", "--dataset", "json:" + (dir / "json_toy.json").string(),
                 "--epochs", "2", "--out", (dir / "out").string()}),
            0);
}

TEST(Executable, ExitCodes) {
  const std::string exe = BGNN_CLI_PATH;
  const auto status = [&](const std::string& args) {
    const int raw = std::system((exe + " " + args + " >/dev/null 2>&1").c_str());
    return WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  };
  EXPECT_EQ(status("--help"), 0);
  EXPECT_EQ(status("train --plan nope --dataset sbm:small"), 2);
  EXPECT_EQ(status("train --plan nokd --dataset sbm:small --epochs 1 --out " +
                   scratch("exe").string()),
            0);
}
