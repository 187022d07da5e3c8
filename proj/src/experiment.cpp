#include "fedsim/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <initializer_list>
#include <regex>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "fedsim/error.hpp"
#include "fedsim/metrics.hpp"
#include "fedsim/seed.hpp"

namespace fedsim::experiment {

using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

namespace {

[[noreturn]] void fail(const std::string& path, const std::string& msg) {
  throw ConfigError("config " + (path.empty() ? std::string("/") : path) + ": " + msg);
}

void check_keys(const json& obj, const std::string& path, std::initializer_list<std::string_view> allowed) {
  if (!obj.is_object()) fail(path, "expected an object");
  for (const auto& [key, _] : obj.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      fail(path + "/" + key, "unknown key");
    }
  }
}

std::size_t get_count(const json& obj, const char* key, const std::string& path, std::size_t def,
                      std::size_t min_value = 0) {
  if (!obj.contains(key)) return def;
  const auto& v = obj.at(key);
  const std::string p = path + "/" + key;
  if (!v.is_number_integer() && !v.is_number_unsigned()) fail(p, "expected a non-negative integer");
  if (v.is_number_integer() && v.get<std::int64_t>() < 0) fail(p, "expected a non-negative integer");
  const auto n = v.get<std::size_t>();
  if (n < min_value) fail(p, "must be >= " + std::to_string(min_value));
  return n;
}

double get_real(const json& obj, const char* key, const std::string& path, double def) {
  if (!obj.contains(key)) return def;
  const auto& v = obj.at(key);
  if (!v.is_number()) fail(path + "/" + key, "expected a number");
  return v.get<double>();
}

std::string get_string(const json& obj, const char* key, const std::string& path, std::string def) {
  if (!obj.contains(key)) return def;
  const auto& v = obj.at(key);
  if (!v.is_string()) fail(path + "/" + key, "expected a string");
  return v.get<std::string>();
}

bool get_bool(const json& obj, const char* key, const std::string& path, bool def) {
  if (!obj.contains(key)) return def;
  const auto& v = obj.at(key);
  if (!v.is_boolean()) fail(path + "/" + key, "expected true or false");
  return v.get<bool>();
}

template <class F>
auto with_path(const std::string& path, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const ConfigError& e) {
    fail(path, e.what());
  }
}

std::variant<SynthSource, IdxSource> parse_dataset(const json& j, const std::string& path) {
  check_keys(j, path, {"synth", "idx"});
  if (j.contains("synth") == j.contains("idx")) fail(path, "exactly one of 'synth' or 'idx' is required");
  if (j.contains("synth")) {
    const auto& s = j.at("synth");
    const std::string p = path + "/synth";
    check_keys(s, p, {"num_classes", "per_class", "test_per_class", "dim", "separation", "noise_sigma"});
    SynthSource src;
    src.num_classes = get_count(s, "num_classes", p, src.num_classes, 1);
    src.per_class = get_count(s, "per_class", p, src.per_class, 1);
    src.test_per_class = get_count(s, "test_per_class", p, src.test_per_class, 1);
    src.dim = get_count(s, "dim", p, src.dim, 1);
    src.separation = get_real(s, "separation", p, src.separation);
    src.noise_sigma = get_real(s, "noise_sigma", p, src.noise_sigma);
    if (!(src.separation > 0.0)) fail(p + "/separation", "must be > 0");
    if (!(src.noise_sigma >= 0.0)) fail(p + "/noise_sigma", "must be >= 0");
    return src;
  }
  const auto& s = j.at("idx");
  const std::string p = path + "/idx";
  check_keys(s, p, {"train_images", "train_labels", "test_images", "test_labels", "num_classes",
                    "train_per_class", "test_per_class"});
  IdxSource src;
  for (const char* key : {"train_images", "train_labels", "test_images", "test_labels"}) {
    if (!s.contains(key)) fail(p, std::string("missing required key '") + key + "'");
  }
  src.train_images = get_string(s, "train_images", p, "");
  src.train_labels = get_string(s, "train_labels", p, "");
  src.test_images = get_string(s, "test_images", p, "");
  src.test_labels = get_string(s, "test_labels", p, "");
  src.num_classes = get_count(s, "num_classes", p, 0);
  src.train_per_class = get_count(s, "train_per_class", p, 0);
  src.test_per_class = get_count(s, "test_per_class", p, 0);
  return src;
}

ModelConfig parse_model(const json& j, const std::string& path) {
  check_keys(j, path, {"hidden", "activation"});
  ModelConfig m;
  if (j.contains("hidden")) {
    const auto& h = j.at("hidden");
    if (!h.is_array()) fail(path + "/hidden", "expected an array of layer widths");
    m.hidden.clear();
    for (std::size_t i = 0; i < h.size(); ++i) {
      const auto& v = h[i];
      if (!v.is_number_unsigned() || v.get<std::size_t>() < 1) {
        fail(path + "/hidden/" + std::to_string(i), "expected a positive integer");
      }
      m.hidden.push_back(v.get<std::size_t>());
    }
  }
  if (j.contains("activation")) {
    const auto name = get_string(j, "activation", path, "relu");
    m.activation = with_path(path + "/activation", [&] { return nn::parse_activation(name); });
  }
  return m;
}

GridCell parse_cell(const json& j, const std::string& path) {
  check_keys(j, path, {"mode", "n_clients", "labels_per_client", "size_profile", "name"});
  if (!j.contains("mode")) fail(path, "missing required key 'mode'");
  if (!j.contains("n_clients")) fail(path, "missing required key 'n_clients'");
  GridCell c;
  const auto mode = get_string(j, "mode", path, "");
  c.mode = with_path(path + "/mode", [&] { return data::parse_partition_mode(mode); });
  c.n_clients = get_count(j, "n_clients", path, 1, 1);
  c.labels_per_client = get_count(j, "labels_per_client", path, 1, 1);
  const std::string def_profile = c.mode == data::PartitionMode::balanced_iid ? "equal" : "ratio_4211";
  const auto profile = get_string(j, "size_profile", path, def_profile);
  c.size_profile = with_path(path + "/size_profile", [&] { return data::parse_size_profile(profile); });
  if (c.mode == data::PartitionMode::balanced_iid &&
      c.size_profile.kind != data::SizeProfile::Kind::equal) {
    fail(path + "/size_profile", "balanced_iid requires the 'equal' profile");
  }
  c.name = get_string(j, "name", path, "");
  return c;
}

strategy::OptimizerConfig parse_optimizer(const json& j, const std::string& path) {
  strategy::OptimizerConfig opt;
  if (j.is_string()) {
    const auto kind = j.get<std::string>();
    if (kind == "adam") return opt;
    if (kind == "sgd") {
      opt.kind = strategy::OptimizerConfig::Kind::sgd;
      opt.learning_rate = 0.01;
      return opt;
    }
    fail(path, "unknown optimizer '" + kind + "'");
  }
  check_keys(j, path, {"kind", "learning_rate"});
  const auto kind = get_string(j, "kind", path, "adam");
  if (kind == "sgd") {
    opt.kind = strategy::OptimizerConfig::Kind::sgd;
    opt.learning_rate = 0.01;
  } else if (kind != "adam") {
    fail(path + "/kind", "unknown optimizer '" + kind + "'");
  }
  opt.learning_rate = get_real(j, "learning_rate", path, opt.learning_rate);
  if (!(opt.learning_rate > 0.0)) fail(path + "/learning_rate", "must be > 0");
  return opt;
}

strategy::StrategyConfig parse_strategy(const json& j, const std::string& path) {
  strategy::StrategyConfig s;
  if (j.is_string()) {
    const auto kind = j.get<std::string>();
    s.kind = with_path(path, [&] { return strategy::parse_strategy_kind(kind); });
    return s;
  }
  check_keys(j, path, {"kind", "name", "batch_size", "parallel_window_size", "cluster_window_size",
                       "local_epochs", "local_batch_size", "optimizer"});
  if (!j.contains("kind")) fail(path, "missing required key 'kind'");
  const auto kind = get_string(j, "kind", path, "");
  s.kind = with_path(path + "/kind", [&] { return strategy::parse_strategy_kind(kind); });
  s.label = get_string(j, "name", path, "");
  s.batch_size = get_count(j, "batch_size", path, s.batch_size, 1);
  s.parallel_window_size = get_count(j, "parallel_window_size", path, s.parallel_window_size, 1);
  s.cluster_window_size = get_count(j, "cluster_window_size", path, s.cluster_window_size, 1);
  s.local_epochs = get_count(j, "local_epochs", path, s.local_epochs, 1);
  s.local_batch_size = get_count(j, "local_batch_size", path, s.local_batch_size, 1);
  if (j.contains("optimizer")) s.optimizer = parse_optimizer(j.at("optimizer"), path + "/optimizer");

  if (s.kind == strategy::StrategyKind::proposed || s.kind == strategy::StrategyKind::proposed_semi) {
    const char* key = s.kind == strategy::StrategyKind::proposed ? "parallel_window_size"
                                                                 : "cluster_window_size";
    const auto w = s.window();
    if (w > s.batch_size) fail(path + "/" + key, "must not exceed batch_size");
    if (s.batch_size % w != 0) {
      fail(path + "/" + key, "batch_size " + std::to_string(s.batch_size) +
                                 " is not divisible by " + std::to_string(w));
    }
  }
  with_path(path, [&] { s.validate(); });
  return s;
}

runtime::CostModel parse_cost(const json& j, const std::string& path) {
  check_keys(j, path, {"t_fwd_per_sample", "t_bwd_per_sample", "t_agg_per_param", "t_msg_fixed",
                       "t_msg_per_byte"});
  runtime::CostModel c;
  c.t_fwd_per_sample = get_real(j, "t_fwd_per_sample", path, c.t_fwd_per_sample);
  c.t_bwd_per_sample = get_real(j, "t_bwd_per_sample", path, c.t_bwd_per_sample);
  c.t_agg_per_param = get_real(j, "t_agg_per_param", path, c.t_agg_per_param);
  c.t_msg_fixed = get_real(j, "t_msg_fixed", path, c.t_msg_fixed);
  c.t_msg_per_byte = get_real(j, "t_msg_per_byte", path, c.t_msg_per_byte);
  for (double v : {c.t_fwd_per_sample, c.t_bwd_per_sample, c.t_agg_per_param, c.t_msg_fixed,
                   c.t_msg_per_byte}) {
    if (!(v >= 0.0)) fail(path, "cost model entries must be >= 0");
  }
  return c;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

std::string cell_file_stem(const std::string& setting, const std::string& strategy) {
  return setting + "__" + strategy;
}

std::string iso_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

std::string GridCell::id() const {
  if (!name.empty()) return name;
  return std::string(data::partition_mode_name(mode)) + "_n" + std::to_string(n_clients);
}

std::vector<GridCell> default_grid() {
  std::vector<GridCell> grid;
  for (auto mode : {data::PartitionMode::balanced_iid, data::PartitionMode::imbalanced_iid,
                    data::PartitionMode::imbalanced_noniid}) {
    for (std::size_t n : {4, 10, 40}) {
      GridCell c;
      c.mode = mode;
      c.n_clients = n;
      c.size_profile.kind = mode == data::PartitionMode::balanced_iid
                                ? data::SizeProfile::Kind::equal
                                : data::SizeProfile::Kind::ratio_4211;
      grid.push_back(c);
    }
  }
  return grid;
}

std::vector<strategy::StrategyConfig> default_strategies() {
  std::vector<strategy::StrategyConfig> out;
  for (auto k : {strategy::StrategyKind::fedavg, strategy::StrategyKind::wfedavg,
                 strategy::StrategyKind::cycle, strategy::StrategyKind::proposed}) {
    strategy::StrategyConfig s;
    s.kind = k;
    out.push_back(s);
  }
  return out;
}

ExperimentConfig parse_config(std::string_view text) {
  json j;
  if (text.find_first_not_of(" \t\r\n") == std::string_view::npos) {
    j = json::object();
  } else {
    try {
      j = json::parse(text);
    } catch (const json::parse_error& e) {
      throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
  }
  if (!j.is_object()) fail("", "expected a JSON object");
  check_keys(j, "", {"dataset", "model", "grid", "strategies", "iterations", "master_seed",
                     "output_dir", "cost_model", "reshuffle_chunks"});

  std::vector<std::string> missing;
  for (const char* key : {"dataset"}) {
    if (!j.contains(key)) missing.emplace_back(key);
  }
  if (!missing.empty()) {
    std::string list;
    for (const auto& k : missing) list += (list.empty() ? "" : ", ") + k;
    fail("", "missing required key(s): " + list);
  }

  ExperimentConfig cfg;
  cfg.dataset = parse_dataset(j.at("dataset"), "/dataset");
  if (j.contains("model")) cfg.model = parse_model(j.at("model"), "/model");

  if (j.contains("grid")) {
    const auto& g = j.at("grid");
    if (!g.is_array() || g.empty()) fail("/grid", "expected a non-empty array");
    for (std::size_t i = 0; i < g.size(); ++i) cfg.grid.push_back(parse_cell(g[i], "/grid/" + std::to_string(i)));
  } else {
    cfg.grid = default_grid();
  }
  std::set<std::string> ids;
  for (std::size_t i = 0; i < cfg.grid.size(); ++i) {
    if (!ids.insert(cfg.grid[i].id()).second) {
      fail("/grid/" + std::to_string(i), "duplicate setting id '" + cfg.grid[i].id() + "'; set 'name'");
    }
  }

  if (j.contains("strategies")) {
    const auto& s = j.at("strategies");
    if (!s.is_array() || s.empty()) fail("/strategies", "expected a non-empty array");
    for (std::size_t i = 0; i < s.size(); ++i) {
      cfg.strategies.push_back(parse_strategy(s[i], "/strategies/" + std::to_string(i)));
    }
  } else {
    cfg.strategies = default_strategies();
  }
  std::set<std::string> names;
  for (std::size_t i = 0; i < cfg.strategies.size(); ++i) {
    if (!names.insert(cfg.strategies[i].name()).second) {
      fail("/strategies/" + std::to_string(i),
           "duplicate strategy name '" + cfg.strategies[i].name() + "'; set 'name'");
    }
  }

  cfg.iterations = get_count(j, "iterations", "", cfg.iterations);
  if (j.contains("master_seed")) {
    const auto& v = j.at("master_seed");
    if (!v.is_number_unsigned()) fail("/master_seed", "expected a non-negative integer");
    cfg.master_seed = v.get<std::uint64_t>();
  }
  cfg.output_dir = get_string(j, "output_dir", "", cfg.output_dir);
  if (j.contains("cost_model")) cfg.cost = parse_cost(j.at("cost_model"), "/cost_model");
  cfg.reshuffle_chunks = get_bool(j, "reshuffle_chunks", "", cfg.reshuffle_chunks);
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string config_to_json(const ExperimentConfig& cfg) {
  ojson j;
  if (const auto* s = std::get_if<SynthSource>(&cfg.dataset)) {
    j["dataset"]["synth"] = {{"num_classes", s->num_classes}, {"per_class", s->per_class},
                             {"test_per_class", s->test_per_class}, {"dim", s->dim},
                             {"separation", s->separation}, {"noise_sigma", s->noise_sigma}};
  } else {
    const auto& x = std::get<IdxSource>(cfg.dataset);
    j["dataset"]["idx"] = {{"train_images", x.train_images}, {"train_labels", x.train_labels},
                           {"test_images", x.test_images}, {"test_labels", x.test_labels},
                           {"num_classes", x.num_classes}, {"train_per_class", x.train_per_class},
                           {"test_per_class", x.test_per_class}};
  }
  j["model"] = {{"hidden", cfg.model.hidden}, {"activation", nn::activation_name(cfg.model.activation)}};
  auto grid = ojson::array();
  for (const auto& c : cfg.grid) {
    grid.push_back({{"name", c.id()}, {"mode", data::partition_mode_name(c.mode)},
                    {"n_clients", c.n_clients}, {"labels_per_client", c.labels_per_client},
                    {"size_profile", data::size_profile_name(c.size_profile)}});
  }
  j["grid"] = std::move(grid);
  auto strategies = ojson::array();
  for (const auto& s : cfg.strategies) {
    strategies.push_back(
        {{"name", s.name()}, {"kind", strategy::strategy_kind_name(s.kind)},
         {"batch_size", s.batch_size}, {"parallel_window_size", s.parallel_window_size},
         {"cluster_window_size", s.cluster_window_size}, {"local_epochs", s.local_epochs},
         {"local_batch_size", s.local_batch_size},
         {"optimizer",
          {{"kind", s.optimizer.kind == strategy::OptimizerConfig::Kind::adam ? "adam" : "sgd"},
           {"learning_rate", s.optimizer.learning_rate}}}});
  }
  j["strategies"] = std::move(strategies);
  j["iterations"] = cfg.iterations;
  j["master_seed"] = cfg.master_seed;
  j["output_dir"] = cfg.output_dir;
  j["cost_model"] = {{"t_fwd_per_sample", cfg.cost.t_fwd_per_sample},
                     {"t_bwd_per_sample", cfg.cost.t_bwd_per_sample},
                     {"t_agg_per_param", cfg.cost.t_agg_per_param},
                     {"t_msg_fixed", cfg.cost.t_msg_fixed},
                     {"t_msg_per_byte", cfg.cost.t_msg_per_byte}};
  j["reshuffle_chunks"] = cfg.reshuffle_chunks;
  return j.dump(2);
}

Seeds derive_seeds(std::uint64_t master, const std::string& setting, const std::string& strategy) {
  Seeds s;
  s.data = derive_seed(master, {hash_name("data")});
  s.partition = derive_seed(master, {hash_name("partition"), hash_name(setting)});
  s.init = derive_seed(master, {hash_name("init"), hash_name(setting)});
  s.cell = derive_seed(master, {hash_name("cell"), hash_name(setting), hash_name(strategy), 0});
  return s;
}

LoadedData load_data(const ExperimentConfig& cfg) {
  LoadedData out;
  if (const auto* s = std::get_if<SynthSource>(&cfg.dataset)) {
    const auto seeds = derive_seeds(cfg.master_seed, "", "");
    auto all = data::synth_blobs(s->num_classes, s->per_class + s->test_per_class, s->dim,
                                 s->separation, s->noise_sigma, seeds.data);
    auto [train, test] = data::holdout_per_class(all, s->test_per_class);
    out.train = std::move(train);
    out.test = std::move(test);
  } else {
    const auto& x = std::get<IdxSource>(cfg.dataset);
    out.train = data::load_idx_files(x.train_images, x.train_labels, x.num_classes);
    out.test = data::load_idx_files(x.test_images, x.test_labels,
                                    x.num_classes == 0 ? out.train.num_classes : x.num_classes);
    if (x.train_per_class > 0) out.train = data::take_per_class(out.train, x.train_per_class);
    if (x.test_per_class > 0) out.test = data::take_per_class(out.test, x.test_per_class);
    out.test.num_classes = out.train.num_classes = std::max(out.train.num_classes, out.test.num_classes);
  }
  out.train.validate();
  out.test.validate();
  return out;
}

bool ResultsBundle::all_ok() const {
  return std::all_of(cells.begin(), cells.end(), [](const CellResult& c) { return c.ok; });
}

const CellResult* ResultsBundle::find(const std::string& setting, const std::string& strategy) const {
  for (const auto& c : cells) {
    if (c.setting == setting && c.strategy == strategy) return &c;
  }
  return nullptr;
}

CellResult run_cell(const ExperimentConfig& cfg, const LoadedData& loaded, const GridCell& cell,
                    const strategy::StrategyConfig& scfg, const RunOptions& opts) {
  CellResult r;
  r.setting = cell.id();
  r.strategy = scfg.name();
  r.seeds = derive_seeds(cfg.master_seed, r.setting, r.strategy);
  try {
    data::PartitionSpec spec{cell.mode, cell.n_clients, cell.labels_per_client, cell.size_profile,
                             r.seeds.partition};
    auto shards = data::partition(loaded.train, spec);
    const auto layers = nn::mlp_specs(loaded.train.features.cols, cfg.model.hidden,
                                      loaded.train.num_classes, cfg.model.activation);
    auto world = runtime::make_world(nn::init_model(layers, r.seeds.init), std::move(shards),
                                     cfg.cost, scfg.optimizer.learning_rate);
    world.reshuffle_chunks = cfg.reshuffle_chunks;
    world.seed = r.seeds.cell;
    auto strat = strategy::make_strategy(scfg);
    const auto eval = [&](const runtime::World& w, std::size_t round) {
      auto rec = metrics::evaluate(w.server.global_model, loaded.test);
      rec.round = round;
      rec.sim_time = w.clock.now;
      rec.strategy = r.strategy;
      rec.setting = r.setting;
      return rec;
    };
    r.series = strategy::run_training(*strat, world, cfg.iterations, eval);
    r.total_sim_time = world.clock.now;
    if (opts.dump_schedule && strat->schedule()) {
      r.schedule_json = strategy::schedule_to_json(*strat->schedule(), strat->hosts());
    }
    if (opts.dump_events) r.events_jsonl = world.log.to_jsonl();
    r.ok = true;
  } catch (const std::exception& e) {
    r.ok = false;
    r.error = e.what();
  }
  return r;
}

std::vector<std::filesystem::path> emit_plot_data(ResultsBundle& bundle,
                                                  const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> written;
  for (const auto& setting : bundle.settings) {
    std::string text = std::string(kPlotHeader) + "\n";
    bool complete = true;
    for (const auto& name : bundle.strategies) {
      const auto* cell = bundle.find(setting, name);
      if (!cell || !cell->ok) {
        bundle.warnings.push_back("panel " + setting + " skipped: series for " + name + " missing");
        complete = false;
        break;
      }
      for (const auto& rec : cell->series.records) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "%zu,%s,%.17g,%.17g,%.17g\n", rec.round, name.c_str(),
                      rec.accuracy, rec.macro_f1, rec.sim_time);
        text += buf;
      }
    }
    if (!complete) continue;
    const auto path = dir / (setting + ".csv");
    write_text(path, text);
    written.push_back(path);
  }
  return written;
}

ResultsBundle run_grid(const ExperimentConfig& cfg, const RunOptions& opts) {
  const auto loaded = load_data(cfg);

  ResultsBundle bundle;
  bundle.output_dir = cfg.output_dir;
  bundle.num_classes = loaded.train.num_classes;

  std::vector<const GridCell*> cells;
  std::optional<std::regex> filter;
  if (!opts.grid_filter.empty()) {
    try {
      filter.emplace(opts.grid_filter);
    } catch (const std::regex_error& e) {
      throw ConfigError("invalid --grid-filter pattern: " + std::string(e.what()));
    }
  }
  for (const auto& c : cfg.grid) {
    if (!filter || std::regex_search(c.id(), *filter)) {
      cells.push_back(&c);
      bundle.settings.push_back(c.id());
    }
  }
  std::vector<const strategy::StrategyConfig*> strategies;
  for (const auto& s : cfg.strategies) {
    const auto& f = opts.strategy_filter;
    if (f.empty() || std::find(f.begin(), f.end(), s.name()) != f.end()) {
      strategies.push_back(&s);
      bundle.strategies.push_back(s.name());
    }
  }
  for (const auto& name : opts.strategy_filter) {
    if (std::find(bundle.strategies.begin(), bundle.strategies.end(), name) == bundle.strategies.end()) {
      throw ConfigError("--strategies names unknown strategy '" + name + "'");
    }
  }

  const std::size_t total = cells.size() * strategies.size();
  bundle.cells.resize(total);
  std::atomic<std::size_t> next{0};
  const auto worker = [&] {
    for (std::size_t i = next++; i < total; i = next++) {
      bundle.cells[i] = run_cell(cfg, loaded, *cells[i / strategies.size()],
                                 *strategies[i % strategies.size()], opts);
    }
  };
  const std::size_t n_threads = std::clamp<std::size_t>(opts.threads, 1, std::max<std::size_t>(total, 1));
  {
    std::vector<std::jthread> pool;
    for (std::size_t t = 1; t < n_threads; ++t) pool.emplace_back(worker);
    worker();
  }

  if (!opts.write) return bundle;

  const std::filesystem::path out = cfg.output_dir;
  ojson summary;
  summary["cells"] = ojson::array();
  for (const auto& c : bundle.cells) {
    ojson entry;
    entry["setting"] = c.setting;
    entry["strategy"] = c.strategy;
    entry["status"] = c.ok ? "ok" : "failed";
    if (c.ok) {
      const auto& last = c.series.records.back();
      entry["final_accuracy"] = last.accuracy;
      entry["final_macro_f1"] = last.macro_f1;
      entry["total_sim_time"] = c.total_sim_time;
      std::string csv = metrics::csv_header(bundle.num_classes) + "\n";
      for (const auto& rec : c.series.records) csv += metrics::csv_row(rec) + "\n";
      write_text(out / "series" / (cell_file_stem(c.setting, c.strategy) + ".csv"), csv);
      if (!c.schedule_json.empty()) {
        write_text(out / "schedules" / (cell_file_stem(c.setting, c.strategy) + ".json"),
                   c.schedule_json + "\n");
      }
      if (opts.dump_events) {
        write_text(out / "events" / (cell_file_stem(c.setting, c.strategy) + ".jsonl"), c.events_jsonl);
      }
    } else {
      entry["error"] = c.error;
    }
    summary["cells"].push_back(std::move(entry));
  }
  emit_plot_data(bundle, out / "plots");
  summary["warnings"] = bundle.warnings;
  write_text(out / "summary.json", summary.dump(2) + "\n");

  ojson manifest;
  manifest["version"] = kVersion;
  manifest["created_at"] = iso_timestamp();
  manifest["master_seed"] = cfg.master_seed;
  manifest["config"] = ojson::parse(config_to_json(cfg));
  manifest["options"] = {{"dump_schedule", opts.dump_schedule},
                         {"dump_events", opts.dump_events},
                         {"grid_filter", opts.grid_filter},
                         {"strategies", bundle.strategies},
                         {"threads", n_threads}};
  manifest["seeds"] = ojson::array();
  for (const auto& c : bundle.cells) {
    manifest["seeds"].push_back({{"setting", c.setting},
                                 {"strategy", c.strategy},
                                 {"data", c.seeds.data},
                                 {"partition", c.seeds.partition},
                                 {"init", c.seeds.init},
                                 {"cell", c.seeds.cell}});
  }
  write_text(out / "manifest.json", manifest.dump(2) + "\n");
  return bundle;
}

std::string partition_report(const ExperimentConfig& cfg) {
  const auto loaded = load_data(cfg);
  std::ostringstream os;
  os << "train rows " << loaded.train.size() << ", test rows " << loaded.test.size() << ", classes "
     << loaded.train.num_classes << "\n";
  for (const auto& cell : cfg.grid) {
    const auto seeds = derive_seeds(cfg.master_seed, cell.id(), "");
    os << "\n[" << cell.id() << "] mode=" << data::partition_mode_name(cell.mode)
       << " clients=" << cell.n_clients << " profile=" << data::size_profile_name(cell.size_profile);
    if (cell.mode == data::PartitionMode::imbalanced_noniid) {
      os << " labels_per_client=" << cell.labels_per_client;
    }
    os << "\n";
    try {
      const auto shards = data::partition(
          loaded.train, {cell.mode, cell.n_clients, cell.labels_per_client, cell.size_profile, seeds.partition});
      for (const auto& s : shards) {
        std::vector<std::size_t> hist(loaded.train.num_classes, 0);
        for (auto l : s.labels) ++hist[l];
        os << "  c" << s.client_id << " size=" << s.size() << " labels=[";
        for (std::size_t c = 0; c < hist.size(); ++c) os << (c ? " " : "") << hist[c];
        os << "]\n";
      }
    } catch (const std::exception& e) {
      os << "  partition failed: " << e.what() << "\n";
    }
  }
  return os.str();
}

std::size_t thread_count_from_env() {
  if (const char* v = std::getenv("FEDSIM_THREADS")) {
    char* end = nullptr;
    const long n = std::strtol(v, &end, 10);
    if (end != v && *end == '\0' && n > 0) return static_cast<std::size_t>(n);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

}  // namespace fedsim::experiment
