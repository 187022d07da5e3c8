// Acceptance checks. Prints one PASS/FAIL/SKIP line per criterion and exits non-zero on any FAIL.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "fedsim/experiment.hpp"
#include "fedsim/runtime.hpp"
#include "fedsim/schedule.hpp"
#include "fedsim/strategies.hpp"

using namespace fedsim;
namespace fs = std::filesystem;
namespace ex = fedsim::experiment;

namespace {

enum class Verdict { pass, fail, skip };

struct Outcome {
  Verdict verdict = Verdict::fail;
  std::string detail;
};

Outcome fail(std::string d) { return {Verdict::fail, std::move(d)}; }
Outcome check(bool ok, std::string d) { return {ok ? Verdict::pass : Verdict::fail, std::move(d)}; }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double max_abs_diff(const nn::ModelParams& a, const nn::ModelParams& b) {
  double worst = 0.0;
  for (std::size_t k = 0; k < a.arrays.size(); ++k) {
    for (std::size_t i = 0; i < a.arrays[k].size(); ++i) {
      worst = std::max(worst, std::abs(a.arrays[k][i] - b.arrays[k][i]));
    }
  }
  return worst;
}

nn::Matrix random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  nn::Matrix m(r, c);
  for (auto& v : m.data) v = u(rng);
  return m;
}

std::vector<std::size_t> random_labels(std::size_t n, std::size_t classes, std::mt19937_64& rng) {
  std::vector<std::size_t> y(n);
  for (auto& v : y) v = rng() % classes;
  return y;
}

// The desk-scale synthetic source used by criteria 5 to 8.
ex::ExperimentConfig synth_config(const std::string& extra = "") {
  return ex::parse_config(R"({"dataset": {"synth": {"num_classes": 3, "per_class": 600,
      "test_per_class": 200, "dim": 8, "separation": 6, "noise_sigma": 1}})" + extra + "}");
}

// Same setup as a grid cell: partition, initial model and world all from the derived seeds.
runtime::World make_cell_world(const ex::ExperimentConfig& cfg, const ex::LoadedData& loaded,
                               const ex::GridCell& cell, const strategy::StrategyConfig& s) {
  const auto seeds = ex::derive_seeds(cfg.master_seed, cell.id(), s.name());
  auto shards = data::partition(loaded.train, {cell.mode, cell.n_clients, cell.labels_per_client,
                                               cell.size_profile, seeds.partition});
  const auto specs = nn::mlp_specs(loaded.train.features.cols, cfg.model.hidden, loaded.train.num_classes,
                                   cfg.model.activation);
  auto world = runtime::make_world(nn::init_model(specs, seeds.init), std::move(shards), cfg.cost,
                                   s.optimizer.learning_rate);
  world.seed = seeds.cell;
  return world;
}

strategy::StrategyConfig strat(strategy::StrategyKind kind, std::size_t batch = 100, std::size_t window = 2) {
  strategy::StrategyConfig s;
  s.kind = kind;
  s.batch_size = batch;
  s.parallel_window_size = window;
  s.cluster_window_size = window;
  return s;
}

double final_accuracy(const ex::CellResult& c) { return c.series.records.back().accuracy; }

// 1. Central-difference gradient check on random small models.
Outcome gradient_check() {
  std::mt19937_64 rng(1);
  double worst = 0.0;
  std::size_t cases = 0;
  std::size_t entries = 0;
  std::size_t max_params = 0;
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t in = 2 + rng() % 6;
    const std::size_t classes = 2 + rng() % 4;
    std::vector<std::size_t> hidden(1 + rng() % 2);
    for (auto& h : hidden) h = 2 + rng() % 14;
    const auto act = trial % 2 == 0 ? nn::Activation::tanh : nn::Activation::relu;
    auto model = nn::init_model(nn::mlp_specs(in, hidden, classes, act), rng());
    if (model.parameter_count() > 1000) continue;
    // Random biases keep ReLU pre-activations off the kink at zero.
    for (auto& layer : model.layers) {
      for (auto& b : layer.biases) b = std::uniform_real_distribution<double>(-0.5, 0.5)(rng);
    }
    max_params = std::max(max_params, model.parameter_count());
    const std::size_t batch = 1 + rng() % 8;
    const auto x = random_matrix(batch, in, rng);
    const auto y = random_labels(batch, classes, rng);
    const auto analytic = nn::loss_and_gradients(model, x, y).gradients.values;
    auto p = nn::to_params(model);
    const double h = 1e-5;
    for (std::size_t k = 0; k < p.arrays.size(); ++k) {
      for (std::size_t i = 0; i < p.arrays[k].size(); ++i) {
        const double saved = p.arrays[k][i];
        p.arrays[k][i] = saved + h;
        nn::load_params(model, p);
        const double up = nn::loss_and_gradients(model, x, y).loss;
        p.arrays[k][i] = saved - h;
        nn::load_params(model, p);
        const double down = nn::loss_and_gradients(model, x, y).loss;
        p.arrays[k][i] = saved;
        const double numeric = (up - down) / (2 * h);
        const double a = analytic.arrays[k][i];
        const double denom = std::max({std::abs(a), std::abs(numeric), 1e-6});
        worst = std::max(worst, std::abs(a - numeric) / denom);
        ++entries;
      }
    }
    ++cases;
  }
  return check(cases >= 50 && worst < 1e-5,
               fmt("%zu cases, %zu entries, <= %zu params, max relative error %.2e", cases, entries,
                   max_params, worst));
}

// 2. Mean of chunk gradients equals the whole-batch gradient.
Outcome chunk_aggregation() {
  std::mt19937_64 rng(2);
  double worst = 0.0;
  int trials = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t in = 2 + rng() % 5;
    const std::size_t classes = 2 + rng() % 4;
    const std::vector<std::size_t> hidden{3 + rng() % 10};
    const auto model = nn::init_model(nn::mlp_specs(in, hidden, classes), rng());
    const std::size_t parts = 1 + rng() % 8;
    const std::size_t batch = parts + rng() % 40;
    const auto x = random_matrix(batch, in, rng);
    const auto y = random_labels(batch, classes, rng);
    std::vector<std::size_t> cuts{0, batch};
    while (cuts.size() < parts + 1) {
      const std::size_t c = 1 + rng() % (batch - 1 == 0 ? 1 : batch - 1);
      if (std::find(cuts.begin(), cuts.end(), c) == cuts.end() && c < batch) cuts.push_back(c);
    }
    std::sort(cuts.begin(), cuts.end());
    std::vector<nn::GradientSet> reports;
    for (std::size_t i = 0; i + 1 < cuts.size(); ++i) {
      const std::size_t n = cuts[i + 1] - cuts[i];
      const std::vector<std::size_t> ys(y.begin() + static_cast<long>(cuts[i]),
                                        y.begin() + static_cast<long>(cuts[i + 1]));
      reports.push_back(nn::loss_and_gradients(model, nn::slice_rows(x, cuts[i], n), ys).gradients);
    }
    const auto whole = nn::loss_and_gradients(model, x, y).gradients;
    worst = std::max(worst, max_abs_diff(nn::average_gradients(reports).values, whole.values));
    ++trials;
  }
  return check(worst <= 1e-12, fmt("%d random batches, max |diff| %.2e", trials, worst));
}

// 3. Worked schedule example.
Outcome schedule_example() {
  const std::vector<std::size_t> sizes{200, 100, 50, 50};
  const auto s = strategy::generate_instructions(sizes, 100, 2);
  std::vector<std::vector<std::size_t>> got;
  std::string text;
  for (const auto& step : s.steps) {
    got.emplace_back();
    text += "(";
    for (const auto& a : step) {
      got.back().push_back(a.client);
      text += "c" + std::to_string(a.client + 1) + (&a == &step.back() ? "" : ",");
    }
    text += ")";
  }
  const std::vector<std::vector<std::size_t>> want{{0, 1}, {0, 1}, {0, 2}, {0, 3}};
  return check(got == want, "steps " + text + " (clients numbered from 1)");
}

// 4. proposed + SGD against centralized mini-batch SGD over the same step unions.
Outcome minibatch_equivalence() {
  const auto ds = data::synth_blobs(3, 150, 8, 6.0, 1.0, 4);
  const std::vector<std::size_t> sizes{200, 100, 50, 50};
  std::vector<data::ClientShard> shards;
  std::size_t pos = 0;
  for (std::size_t j = 0; j < sizes.size(); ++j) {
    data::ClientShard s;
    s.client_id = j;
    for (std::size_t r = 0; r < sizes[j]; ++r) s.source_rows.push_back((pos + r) * 11 % ds.size());
    s.features = nn::gather_rows(ds.features, s.source_rows);
    for (auto r : s.source_rows) s.labels.push_back(ds.labels[r]);
    pos += sizes[j];
    shards.push_back(std::move(s));
  }
  auto cfg = strat(strategy::StrategyKind::proposed, 100, 2);
  cfg.optimizer = {strategy::OptimizerConfig::Kind::sgd, 0.05};
  const auto start = nn::init_model(nn::mlp_specs(8, std::vector<std::size_t>{32, 16}, 3), 4);
  auto world = runtime::make_world(start, shards);
  auto strategy = strategy::make_strategy(cfg);
  strategy->prepare(world);
  const auto& sched = *strategy->schedule();

  auto oracle = start;
  std::size_t steps = 0;
  double worst = 0.0;
  while (steps < 20) {
    strategy->run_iteration(world);
    for (const auto& step : sched.steps) {
      std::vector<std::size_t> ids;
      for (const auto& a : step) ids.push_back(a.client);
      std::sort(ids.begin(), ids.end());
      std::vector<nn::Matrix> xs;
      std::vector<std::size_t> ys;
      for (auto id : ids) {
        std::size_t slot = 0;
        for (const auto& a : step) slot = a.client == id ? a.chunk_slot : slot;
        const std::size_t first = slot * sched.chunk_size;
        xs.push_back(nn::slice_rows(shards[id].features, first, sched.chunk_size));
        ys.insert(ys.end(), shards[id].labels.begin() + static_cast<long>(first),
                  shards[id].labels.begin() + static_cast<long>(first + sched.chunk_size));
      }
      nn::sgd_step(oracle, nn::loss_and_gradients(oracle, nn::vstack(xs), ys).gradients, 0.05);
      ++steps;
    }
    worst = std::max(worst, max_abs_diff(nn::to_params(world.server.global_model), nn::to_params(oracle)));
  }
  return check(worst < 1e-10, fmt("%zu steps, max |diff| %.2e", steps, worst));
}

// 5. proposed and proposed_semi follow the same parameter trajectory.
Outcome semi_equivalence() {
  const auto cfg = synth_config();
  const auto loaded = ex::load_data(cfg);
  double worst = 0.0;
  std::string settings;
  for (auto mode : {data::PartitionMode::imbalanced_iid, data::PartitionMode::imbalanced_noniid}) {
    ex::GridCell cell;
    cell.mode = mode;
    cell.n_clients = 4;
    cell.size_profile.kind = data::SizeProfile::Kind::ratio_4211;
    const auto a_cfg = strat(strategy::StrategyKind::proposed);
    const auto b_cfg = strat(strategy::StrategyKind::proposed_semi);
    auto a_world = make_cell_world(cfg, loaded, cell, a_cfg);
    auto b_world = make_cell_world(cfg, loaded, cell, a_cfg);
    auto a = strategy::make_strategy(a_cfg);
    auto b = strategy::make_strategy(b_cfg);
    a->prepare(a_world);
    b->prepare(b_world);
    for (int it = 0; it < 5; ++it) {
      a->run_iteration(a_world);
      b->run_iteration(b_world);
      worst = std::max(worst, max_abs_diff(nn::to_params(a_world.server.global_model),
                                           nn::to_params(b_world.server.global_model)));
    }
    settings += cell.id() + " ";
  }
  return check(worst <= 1e-12, fmt("5 iterations on %smax |diff| %.2e", settings.c_str(), worst));
}

ex::CellResult run_one(const ex::ExperimentConfig& cfg, const ex::LoadedData& loaded, const ex::GridCell& cell,
                       const strategy::StrategyConfig& s) {
  ex::RunOptions opts;
  opts.write = false;
  return ex::run_cell(cfg, loaded, cell, s, opts);
}

// 6. One class per client: proposed trains like a centralized model, FedAVG does not.
Outcome noniid_reproduction() {
  auto cfg = synth_config();
  const auto loaded = ex::load_data(cfg);
  ex::GridCell cell;
  cell.mode = data::PartitionMode::imbalanced_noniid;
  cell.n_clients = 3;
  cell.labels_per_client = 1;
  auto proposed = run_one(cfg, loaded, cell, strat(strategy::StrategyKind::proposed, 60, 3));
  auto fedavg = run_one(cfg, loaded, cell, strat(strategy::StrategyKind::fedavg));
  if (!proposed.ok || !fedavg.ok) return fail("cell failed: " + proposed.error + fedavg.error);
  const double p = final_accuracy(proposed);
  const double f = final_accuracy(fedavg);
  return check(p >= 0.90 && p - f >= 0.15,
               fmt("proposed %.4f, fedavg %.4f at iteration 5 (gap %.4f)", p, f, p - f));
}

// 7. Balanced IID: all four strategies end up close.
Outcome balanced_parity() {
  auto cfg = synth_config();
  const auto loaded = ex::load_data(cfg);
  ex::GridCell cell;
  cell.mode = data::PartitionMode::balanced_iid;
  cell.n_clients = 6;
  std::vector<double> acc;
  std::string text;
  for (auto k : {strategy::StrategyKind::fedavg, strategy::StrategyKind::wfedavg, strategy::StrategyKind::cycle,
                 strategy::StrategyKind::proposed}) {
    const auto r = run_one(cfg, loaded, cell, strat(k));
    if (!r.ok) return fail(r.strategy + " failed: " + r.error);
    acc.push_back(final_accuracy(r));
    text += fmt("%s %.4f ", r.strategy.c_str(), acc.back());
  }
  const double spread = *std::max_element(acc.begin(), acc.end()) - *std::min_element(acc.begin(), acc.end());
  return check(spread <= 0.05, text + fmt("spread %.4f", spread));
}

// 8. Simulated time falls as the window grows; the relay variant is never faster.
Outcome time_ordering() {
  auto cfg = synth_config();
  const auto loaded = ex::load_data(cfg);
  std::string text;
  bool ok = true;
  for (auto mode : {data::PartitionMode::balanced_iid, data::PartitionMode::imbalanced_noniid}) {
    ex::GridCell cell;
    cell.mode = mode;
    cell.n_clients = 4;
    if (mode != data::PartitionMode::balanced_iid) cell.size_profile.kind = data::SizeProfile::Kind::ratio_4211;
    std::vector<double> central;
    for (std::size_t w : {1, 2, 4}) {
      double t[2];
      for (int semi = 0; semi < 2; ++semi) {
        const auto s = strat(semi ? strategy::StrategyKind::proposed_semi : strategy::StrategyKind::proposed, 100, w);
        auto world = make_cell_world(cfg, loaded, cell, s);
        auto st = strategy::make_strategy(s);
        st->prepare(world);
        st->run_iteration(world);
        t[semi] = world.clock.now;
      }
      central.push_back(t[0]);
      ok = ok && t[1] >= t[0];
      text += fmt("w%zu %.1f/%.1f ", w, t[0], t[1]);
    }
    ok = ok && central[2] < central[1] && central[1] < central[0];
    text += "| ";
  }
  return check(ok, "proposed/semi sim_time per window: " + text);
}

// 9. No message ever carries feature bytes.
Outcome privacy() {
  auto cfg = synth_config(R"(, "model": {"hidden": [16]})");
  auto loaded = ex::load_data(cfg);
  // Canary column values: distinctive doubles in [0, 1] written into every training row.
  std::unordered_set<std::uint64_t> canaries;
  for (std::size_t r = 0; r < loaded.train.size(); ++r) {
    for (std::size_t c = 0; c < 2; ++c) {
      const double v = 0.123456789 + 1e-7 * static_cast<double>(r) + 0.5 * static_cast<double>(c);
      loaded.train.features(r, c) = v;
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      canaries.insert(bits);
    }
  }
  std::vector<std::uint8_t> wire;
  std::size_t messages = 0;
  const runtime::WireTap tap = [&](const runtime::Message& m) {
    const auto bytes = runtime::encode_message(m);
    wire.insert(wire.end(), bytes.begin(), bytes.end());
    ++messages;
  };
  const auto scan = [&](const std::vector<std::uint8_t>& buf) {
    std::size_t hits = 0;
    for (std::size_t i = 0; i + 8 <= buf.size(); ++i) {
      std::uint64_t bits;
      std::memcpy(&bits, buf.data() + i, sizeof bits);
      hits += canaries.count(bits);
    }
    return hits;
  };

  ex::GridCell cell;
  cell.mode = data::PartitionMode::imbalanced_noniid;
  cell.n_clients = 4;
  cell.size_profile.kind = data::SizeProfile::Kind::ratio_4211;
  for (auto k : {strategy::StrategyKind::fedavg, strategy::StrategyKind::wfedavg, strategy::StrategyKind::cycle,
                 strategy::StrategyKind::proposed, strategy::StrategyKind::proposed_semi}) {
    const auto s = strat(k);
    auto world = make_cell_world(cfg, loaded, cell, s);
    world.tap = tap;
    auto st = strategy::make_strategy(s);
    st->prepare(world);
    for (int it = 0; it < 2; ++it) st->run_iteration(world);
  }
  const std::size_t hits = scan(wire);

  // The scanner must see a canary that does go over the wire.
  auto leaky = nn::to_params(nn::init_model(nn::mlp_specs(2, std::vector<std::size_t>{2}, 2), 0));
  leaky.arrays[0][1] = loaded.train.features(7, 1);
  const auto control = scan(runtime::encode_message(runtime::make_message(0, runtime::kServer,
                                                                          runtime::ModelBroadcast{leaky})));
  return check(hits == 0 && control == 1 && messages > 0,
               fmt("%zu messages, %zu bytes scanned, %zu canary hits (control hits %zu)", messages, wire.size(),
                   hits, control));
}

std::vector<std::pair<std::string, std::string>> read_tree(const fs::path& root) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file() || e.path().extension() != ".csv") continue;
    std::ifstream in(e.path(), std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    out.emplace_back(fs::relative(e.path(), root).string(), ss.str());
  }
  std::sort(out.begin(), out.end());
  return out;
}

// 10. Same seed, same bytes over the full default grid.
Outcome reproducibility() {
  auto cfg = ex::parse_config(R"({"dataset": {"synth": {}}, "master_seed": 17})");
  ex::RunOptions opts;
  opts.threads = ex::thread_count_from_env();
  const auto base = fs::temp_directory_path() / "fedsim_acceptance_repro";
  fs::remove_all(base);
  bool all_ok = true;
  std::size_t cells = 0;
  for (const char* run : {"a", "b"}) {
    cfg.output_dir = (base / run).string();
    const auto bundle = ex::run_grid(cfg, opts);
    all_ok = all_ok && bundle.all_ok();
    cells = bundle.cells.size();
  }
  const auto a = read_tree(base / "a");
  const auto b = read_tree(base / "b");
  return check(all_ok && a == b && a.size() == 36 + 9,
               fmt("%zu grid settings, %zu cells per run, %zu CSV files compared, identical=%s, all cells ok=%s",
                   cfg.grid.size(), cells, a.size(), a == b ? "yes" : "no", all_ok ? "yes" : "no"));
}

// 11. Scaled MNIST check when the IDX files are available.
Outcome mnist() {
  const char* env = std::getenv("FEDSIM_MNIST_DIR");
  const fs::path dir = env ? env : "data/mnist";
  const fs::path files[] = {dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte",
                            dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte"};
  for (const auto& f : files) {
    if (!fs::exists(f)) return {Verdict::skip, "IDX files not found in " + dir.string() + " (set FEDSIM_MNIST_DIR)"};
  }
  ex::ExperimentConfig cfg;
  ex::IdxSource src;
  src.train_images = files[0].string();
  src.train_labels = files[1].string();
  src.test_images = files[2].string();
  src.test_labels = files[3].string();
  src.num_classes = 10;
  src.train_per_class = 500;
  cfg.dataset = src;
  cfg.model.hidden = {200, 200};
  const auto loaded = ex::load_data(cfg);
  ex::GridCell cell;
  cell.mode = data::PartitionMode::imbalanced_noniid;
  cell.n_clients = 10;
  const auto proposed = run_one(cfg, loaded, cell, strat(strategy::StrategyKind::proposed));
  const auto fedavg = run_one(cfg, loaded, cell, strat(strategy::StrategyKind::fedavg));
  if (!proposed.ok || !fedavg.ok) return fail("cell failed: " + proposed.error + fedavg.error);
  const double p = final_accuracy(proposed);
  const double f = final_accuracy(fedavg);
  return check(p >= 0.85 && p >= f + 0.30, fmt("proposed %.4f, fedavg %.4f at iteration 5", p, f));
}

struct Criterion {
  int id;
  const char* name;
  double budget_s;  // 0 means no runtime bound
  std::function<Outcome()> run;
};

}  // namespace

int main() {
  const std::vector<Criterion> criteria{
      {1, "gradient correctness", 10, gradient_check},
      {2, "chunk aggregation", 5, chunk_aggregation},
      {3, "schedule example", 0, schedule_example},
      {4, "mini-batch equivalence", 30, minibatch_equivalence},
      {5, "semi-centralized equivalence", 0, semi_equivalence},
      {6, "non-IID reproduction", 60, noniid_reproduction},
      {7, "balanced IID parity", 60, balanced_parity},
      {8, "simulated time ordering", 0, time_ordering},
      {9, "privacy invariant", 0, privacy},
      {10, "reproducibility", 300, reproducibility},
      {11, "scaled MNIST", 600, mnist},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = fail(std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (o.verdict == Verdict::pass && c.budget_s > 0 && secs >= c.budget_s) {
      o = fail(o.detail + fmt("; over the %.0f s budget", c.budget_s));
    }
    const char* tag = o.verdict == Verdict::pass ? "PASS" : (o.verdict == Verdict::skip ? "SKIP" : "FAIL");
    std::printf("criterion %2d %-30s %s  %s [%.2f s]\n", c.id, c.name, tag, o.detail.c_str(), secs);
    std::fflush(stdout);
    failures += o.verdict == Verdict::fail ? 1 : 0;
  }
  return failures == 0 ? 0 : 1;
}
