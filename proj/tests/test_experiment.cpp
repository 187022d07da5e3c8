#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include <json.hpp>

#include "fedsim/error.hpp"
#include "fedsim/experiment.hpp"

using namespace fedsim;
using namespace fedsim::experiment;
namespace fs = std::filesystem;

namespace {

std::string config_error(const std::string& text) {
  try {
    parse_config(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("fedsim_test_" + name);
  fs::remove_all(dir);
  return dir;
}

const char* kSmall = R"({
  "dataset": {"synth": {"num_classes": 3, "per_class": 120, "test_per_class": 40, "dim": 4}},
  "model": {"hidden": [8]},
  "grid": [
    {"mode": "balanced_iid", "n_clients": 3},
    {"mode": "imbalanced_noniid", "n_clients": 4}
  ],
  "strategies": ["fedavg", "cycle", {"kind": "proposed", "batch_size": 40, "parallel_window_size": 2}],
  "iterations": 2,
  "master_seed": 9
})";

int run_cli(const std::string& args) {
  const std::string cmd = std::string(FEDSIM_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("minimal config takes defaults") {
  const auto cfg = parse_config(R"({"dataset": {"synth": {}}})");
  CHECK(cfg.iterations == 5);
  CHECK(cfg.master_seed == 0);
  CHECK(cfg.grid.size() == 9);
  CHECK(cfg.grid[0].id() == "balanced_iid_n4");
  CHECK(cfg.grid[8].id() == "imbalanced_noniid_n40");
  CHECK(cfg.grid[4].size_profile.kind == data::SizeProfile::Kind::ratio_4211);
  REQUIRE(cfg.strategies.size() == 4);
  CHECK(cfg.strategies[3].name() == "proposed");
  CHECK(cfg.strategies[3].batch_size == 100);
  CHECK(cfg.model.hidden == std::vector<std::size_t>{200, 200});
  CHECK(std::holds_alternative<SynthSource>(cfg.dataset));
}

TEST_CASE("config errors name the offending key") {
  CHECK(config_error("") .find("dataset") != std::string::npos);
  CHECK(config_error("{}").find("missing required key(s): dataset") != std::string::npos);
  CHECK(config_error("[1]").find("object") != std::string::npos);
  CHECK(config_error("{not json").find("JSON") != std::string::npos);
  CHECK(config_error(R"({"dataset": {"synth": {}}, "itterations": 3})").find("/itterations") !=
        std::string::npos);
  CHECK(config_error(R"({"dataset": {"synth": {"dims": 3}}})").find("/dataset/synth/dims") !=
        std::string::npos);
  CHECK(config_error(R"({"dataset": {"synth": {}}, "strategies": ["fedavg", {"kind": "proposed", "batch_size": 100, "parallel_window_size": 3}]})")
            .find("/strategies/1/parallel_window_size") != std::string::npos);
  CHECK(config_error(R"({"dataset": {"synth": {}}, "strategies": ["sgd"]})").find("/strategies/0") !=
        std::string::npos);
  CHECK(config_error(R"({"dataset": {"synth": {}}, "grid": [{"mode": "iid", "n_clients": 3}]})")
            .find("/grid/0/mode") != std::string::npos);
  CHECK(config_error(R"({"dataset": {"synth": {}}, "grid": [{"mode": "balanced_iid"}]})")
            .find("n_clients") != std::string::npos);
  CHECK(config_error(R"({"dataset": {"synth": {}}, "iterations": -1})").find("/iterations") !=
        std::string::npos);
  CHECK(config_error(R"({"dataset": {"synth": {}}, "strategies": ["fedavg", "fedavg"]})")
            .find("duplicate") != std::string::npos);
  CHECK(config_error(R"({"dataset": {"synth": {}, "idx": {}}})").find("/dataset") != std::string::npos);
  CHECK(config_error(R"({"dataset": {"idx": {"train_images": "a"}}})").find("train_labels") !=
        std::string::npos);
  CHECK(config_error(R"({"dataset": {"synth": {}}, "model": {"activation": "gelu"}})")
            .find("/model/activation") != std::string::npos);
  CHECK(config_error(R"({"dataset": {"synth": {}}, "cost_model": {"t_msg_fixed": -1}})")
            .find("/cost_model") != std::string::npos);
}

TEST_CASE("expanded config parses back to the same config") {
  const auto cfg = parse_config(kSmall);
  const auto text = config_to_json(cfg);
  const auto again = parse_config(text);
  CHECK(config_to_json(again) == text);
}

TEST_CASE("sub-seeds depend on names only") {
  const auto a = derive_seeds(1, "balanced_iid_n4", "fedavg");
  const auto b = derive_seeds(1, "balanced_iid_n4", "cycle");
  const auto c = derive_seeds(2, "balanced_iid_n4", "fedavg");
  CHECK(a.partition == b.partition);
  CHECK(a.init == b.init);
  CHECK(a.cell != b.cell);
  CHECK(a.data == b.data);
  CHECK(a.partition != c.partition);
  CHECK(a.partition != derive_seeds(1, "balanced_iid_n10", "fedavg").partition);
}

TEST_CASE("run_grid writes every artifact and reruns byte-identically") {
  auto cfg = parse_config(kSmall);
  const auto dir1 = scratch("grid1");
  const auto dir2 = scratch("grid2");
  RunOptions opts;
  opts.dump_schedule = true;
  opts.dump_events = true;
  opts.threads = 2;

  cfg.output_dir = dir1.string();
  const auto bundle = run_grid(cfg, opts);
  CHECK(bundle.all_ok());
  CHECK(bundle.cells.size() == 6);
  CHECK(fs::exists(dir1 / "summary.json"));
  CHECK(fs::exists(dir1 / "manifest.json"));
  CHECK(fs::exists(dir1 / "schedules" / "balanced_iid_n3__proposed.json"));
  CHECK_FALSE(fs::exists(dir1 / "schedules" / "balanced_iid_n3__fedavg.json"));
  CHECK(fs::exists(dir1 / "events" / "imbalanced_noniid_n4__cycle.jsonl"));

  std::size_t series = 0;
  for (const auto& e : fs::directory_iterator(dir1 / "series")) series += e.path().extension() == ".csv";
  CHECK(series == 6);

  cfg.output_dir = dir2.string();
  opts.threads = 1;
  run_grid(cfg, opts);
  for (const auto& sub : {"series", "plots", "schedules", "events"}) {
    for (const auto& e : fs::directory_iterator(dir1 / sub)) {
      CHECK(slurp(e.path()) == slurp(dir2 / sub / e.path().filename()));
    }
  }
  CHECK(slurp(dir1 / "summary.json") == slurp(dir2 / "summary.json"));

  const auto plot = slurp(dir1 / "plots" / "balanced_iid_n3.csv");
  CHECK(plot.rfind(std::string(kPlotHeader) + "\n", 0) == 0);
  const auto* cell = bundle.find("balanced_iid_n3", "cycle");
  REQUIRE(cell != nullptr);
  const auto& rec = cell->series.records[2];
  char line[200];
  std::snprintf(line, sizeof line, "2,cycle,%.17g,%.17g,%.17g\n", rec.accuracy, rec.macro_f1, rec.sim_time);
  CHECK(plot.find(line) != std::string::npos);
  CHECK(cell->series.records.size() == 3);
}

TEST_CASE("removing a strategy leaves other cells unchanged") {
  auto cfg = parse_config(kSmall);
  RunOptions opts;
  opts.write = false;
  const auto full = run_grid(cfg, opts);
  cfg.strategies.erase(cfg.strategies.begin() + 1);
  const auto fewer = run_grid(cfg, opts);
  for (const auto& c : fewer.cells) {
    const auto* other = full.find(c.setting, c.strategy);
    REQUIRE(other != nullptr);
    for (std::size_t r = 0; r < c.series.records.size(); ++r) {
      CHECK(c.series.records[r].accuracy == other->series.records[r].accuracy);
      CHECK(c.series.records[r].sim_time == other->series.records[r].sim_time);
    }
  }
}

TEST_CASE("a failing cell is isolated and its plot panel skipped") {
  auto cfg = parse_config(R"({
    "dataset": {"synth": {"num_classes": 3, "per_class": 40, "test_per_class": 10, "dim": 3}},
    "model": {"hidden": [4]},
    "grid": [{"mode": "balanced_iid", "n_clients": 2}, {"mode": "balanced_iid", "n_clients": 12}],
    "strategies": ["fedavg", {"kind": "proposed", "batch_size": 20, "parallel_window_size": 1}],
    "iterations": 1
  })");
  const auto dir = scratch("failing");
  cfg.output_dir = dir.string();
  const auto bundle = run_grid(cfg);
  CHECK_FALSE(bundle.all_ok());
  CHECK(bundle.find("balanced_iid_n12", "fedavg")->ok);
  CHECK_FALSE(bundle.find("balanced_iid_n12", "proposed")->ok);
  CHECK(bundle.find("balanced_iid_n2", "proposed")->ok);
  CHECK(fs::exists(dir / "plots" / "balanced_iid_n2.csv"));
  CHECK_FALSE(fs::exists(dir / "plots" / "balanced_iid_n12.csv"));
  CHECK(bundle.warnings.size() == 1);
  const auto summary = nlohmann::json::parse(slurp(dir / "summary.json"));
  CHECK(summary["cells"][3]["status"] == "failed");
}

TEST_CASE("filters select cells") {
  auto cfg = parse_config(kSmall);
  RunOptions opts;
  opts.write = false;
  opts.grid_filter = "noniid";
  opts.strategy_filter = {"cycle"};
  const auto b = run_grid(cfg, opts);
  REQUIRE(b.cells.size() == 1);
  CHECK(b.cells[0].setting == "imbalanced_noniid_n4");
  opts.strategy_filter = {"nope"};
  CHECK_THROWS_AS(run_grid(cfg, opts), ConfigError);
  opts.strategy_filter = {};
  opts.grid_filter = "(";
  CHECK_THROWS_AS(run_grid(cfg, opts), ConfigError);
}

TEST_CASE("partition report lists every client") {
  const auto report = partition_report(parse_config(kSmall));
  CHECK(report.find("[balanced_iid_n3]") != std::string::npos);
  CHECK(report.find("c3 size=") != std::string::npos);
}

TEST_CASE("CLI exit codes") {
  const auto dir = scratch("cli");
  fs::create_directories(dir);
  std::ofstream(dir / "ok.json") << kSmall;
  std::ofstream(dir / "bad.json") << R"({"dataset": {"synth": {}}, "bogus": 1})";
  std::ofstream(dir / "partial.json") << R"({
    "dataset": {"synth": {"num_classes": 3, "per_class": 40, "test_per_class": 10, "dim": 3}},
    "model": {"hidden": [4]},
    "grid": [{"mode": "balanced_iid", "n_clients": 12}],
    "strategies": ["fedavg", {"kind": "proposed", "batch_size": 20, "parallel_window_size": 1}],
    "iterations": 1})";
  const auto out = (dir / "out").string();
  CHECK(run_cli("run --config " + (dir / "ok.json").string() + " --out " + out +
                " --seed 3 --dump-schedule --strategies fedavg,proposed") == 0);
  CHECK(fs::exists(dir / "out" / "schedules" / "balanced_iid_n3__proposed.json"));
  CHECK_FALSE(fs::exists(dir / "out" / "series" / "balanced_iid_n3__cycle.csv"));
  const auto manifest = nlohmann::json::parse(slurp(dir / "out" / "manifest.json"));
  CHECK(manifest["master_seed"] == 3);
  CHECK(run_cli("run --config " + (dir / "partial.json").string() + " --out " + out) == 2);
  CHECK(run_cli("run --config " + (dir / "bad.json").string() + " --out " + out) == 1);
  CHECK(run_cli("run --config " + (dir / "missing.json").string()) == 1);
  CHECK(run_cli("run --config " + (dir / "ok.json").string() + " --strategies nope --out " + out) == 1);
  CHECK(run_cli("partition-report --config " + (dir / "ok.json").string()) == 0);
  CHECK(run_cli("") == 1);
}
