#pragma once

// Command-line experiment runner. `run` parses arguments, executes one
// subcommand and writes manifest.json, results.csv and curves/*.csv into the
// output directory. Artifacts are assembled in memory and written at the end,
// so a failed run leaves nothing behind.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "archforge/checkpoint.hpp"
#include "archforge/constructive.hpp"
#include "archforge/data.hpp"
#include "archforge/errors.hpp"
#include "archforge/io.hpp"
#include "archforge/network.hpp"
#include "archforge/search.hpp"
#include "archforge/training.hpp"

namespace archforge::cli {

inline constexpr const char* kToolVersion = "0.1.0";

enum ExitCode : int { kOk = 0, kConfigError = 2, kDataError = 3, kRuntimeError = 4 };

struct Common {
  std::uint64_t seed = 0;
  int jobs = 1;
  std::string out = "run";
  std::string config;
  bool synthetic = false;
  int synthetic_n = 4000;
  std::string mnist_dir;
  int subset_train = 0;
  int subset_val = 0;
  double val_fraction = 0.2;
  std::string timing = "on";
  std::string optimizer = "rmsprop";
  double learning_rate = 0.0;  // 0: optimizer default
  int batch_size = 128;
  int max_epochs = 100;
  int runs = 1;
  bool save_networks = false;
};

struct TrainArgs {
  int depth = 2;
  int width = 512;
  std::string activation = "tanh";
  std::string monitor = "val_accuracy";
  int patience = 5;
  bool no_early_stop = false;
};

struct SearchArgs {
  int n = 200;
  bool dedupe = false;
  int fitness_runs = 3;
  int fitness_epochs = 3;
};

struct EvolveArgs {
  int population = 50;
  double mutation = 0.10;
  double retain = 0.40;
  double random_select = 0.10;
  bool dedupe = false;
  int budget = 200;
  int fitness_runs = 3;
  int fitness_epochs = 3;
};

struct CascadeArgs {
  int insertions = 10;
  int pool = 8;
  int candidate_epochs = 1;
  std::string reuse = "never";
  double drop = 0.05;
  std::string insert = "unit";
  int layer_width = 50;
  std::string activation = "tanh";
  int patience = 3;
};

struct ForwardThinkingArgs {
  std::vector<int> widths{512, 512};
  std::string activation = "tanh";
  std::string monitor = "val_loss";
  int patience = 2;
  int last_patience = 3;
};

struct AftArgs {
  int pool = 8;
  int width_min = 50;
  int width_max = 1000;
  int width_step = 50;
  int candidate_epochs = 2;
  int max_layers = 10;
  bool no_monotone = false;
  double epsilon = 0.001;
  std::string activation = "tanh";
  std::string monitor = "val_accuracy";
  int patience = 2;
  int head_patience = 3;
};

/// Everything a run produces before it touches the file system.
struct Artifacts {
  std::map<std::string, std::string> files;  // relative path -> contents
  json results = json::object();
  double candidate_seconds = 0.0;
  double main_seconds = 0.0;
  std::string summary;
};

namespace detail {

// Records how to echo every registered option into the manifest.
class Registry {
 public:
  template <typename T>
  CLI::Option* option(CLI::App* app, const std::string& name, T& var, const std::string& help) {
    entries_[app].push_back({name, [&var] { return json(var); }});
    return app->add_option("--" + name, var, help);
  }
  CLI::Option* flag(CLI::App* app, const std::string& name, bool& var, const std::string& help) {
    entries_[app].push_back({name, [&var] { return json(var); }});
    return app->add_flag("--" + name, var, help);
  }
  json echo(CLI::App* app) const {
    json j = json::object();
    auto it = entries_.find(app);
    if (it == entries_.end()) return j;
    for (const auto& [name, get] : it->second) j[name] = get();
    return j;
  }

 private:
  struct Entry {
    std::string name;
    std::function<json()> get;
  };
  std::map<CLI::App*, std::vector<Entry>> entries_;
};

inline bool mentions(const std::vector<std::string>& args, const std::string& key) {
  const std::string flag = "--" + key;
  for (const auto& a : args)
    if (a == flag || a.rfind(flag + "=", 0) == 0) return true;
  return false;
}

inline std::optional<std::string> config_path(const std::vector<std::string>& args) {
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) return args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) return args[i].substr(9);
  }
  return std::nullopt;
}

inline std::string scalar_arg(const json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); }

// Turns a JSON object into command-line arguments, skipping keys given explicitly.
inline std::vector<std::string> config_args(const std::string& path, const std::vector<std::string>& explicit_args) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file " + path);
  json j;
  try {
    j = json::parse(f);
  } catch (const json::exception& e) {
    throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
  }
  if (j.contains("config") && j["config"].is_object()) j = j["config"];
  if (!j.is_object()) throw ConfigError("config file " + path + " must hold a JSON object");
  std::vector<std::string> out;
  for (const auto& [key, value] : j.items()) {
    if (key == "config" || mentions(explicit_args, key)) continue;
    if (value.is_boolean()) {
      if (value.get<bool>()) out.push_back("--" + key);
    } else if (value.is_array()) {
      if (value.empty()) continue;
      out.push_back("--" + key);
      for (const auto& v : value) out.push_back(scalar_arg(v));
    } else if (!value.is_null()) {
      out.push_back("--" + key);
      out.push_back(scalar_arg(value));
    }
  }
  return out;
}

inline Timing parse_timing(const std::string& s) {
  if (s == "on") return Timing::on;
  if (s == "off") return Timing::off;
  throw ConfigError("--timing must be 'on' or 'off'");
}

inline TrainConfig base_train(const Common& c) {
  TrainConfig t;
  t.optimizer = parse_optimizer(c.optimizer);
  if (c.learning_rate < 0.0) throw ConfigError("--learning-rate must be > 0");
  if (c.learning_rate > 0.0) t.learning_rate = c.learning_rate;
  t.batch_size = c.batch_size;
  t.max_epochs = c.max_epochs;
  t.validate();
  return t;
}

inline void check_common(const Common& c) {
  if (c.jobs < 1) throw ConfigError("--jobs must be >= 1");
  if (c.runs < 1) throw ConfigError("--runs must be >= 1");
  if (c.synthetic_n < 10) throw ConfigError("--synthetic-n must be >= 10");
  if (c.subset_train < 0 || c.subset_val < 0) throw ConfigError("subset sizes must be >= 0");
  if (c.subset_val > 0 && c.subset_train == 0) throw ConfigError("--subset-val needs --subset-train");
  if (!(c.val_fraction > 0.0 && c.val_fraction < 1.0)) throw ConfigError("--val-fraction must lie in (0, 1)");
  if (c.synthetic && !c.mnist_dir.empty()) throw ConfigError("--synthetic and --mnist-dir are mutually exclusive");
  parse_timing(c.timing);
}

inline std::pair<DataSplits, json> load_data(const Common& c) {
  Dataset train;
  Dataset test;
  json info;
  if (c.synthetic) {
    train = synthetic_polygons(static_cast<std::size_t>(c.synthetic_n), derive_seed(c.seed, 0xDA7A0001));
    test = synthetic_polygons(static_cast<std::size_t>(std::max(c.synthetic_n / 4, 1)), derive_seed(c.seed, 0xDA7A0002));
    info["source"] = "synthetic-polygons";
  } else {
    std::string dir = c.mnist_dir;
    if (dir.empty())
      if (const char* env = std::getenv("ARCHFORGE_MNIST_DIR")) dir = env;
    if (dir.empty()) throw DataError("no dataset: pass --mnist-dir DIR, set ARCHFORGE_MNIST_DIR, or use --synthetic");
    std::tie(train, test) = load_mnist_dir(dir);
    info["source"] = "idx";
    info["dir"] = dir;
    info["normalization"] = "pixel / 255";
  }
  double val_fraction = c.val_fraction;
  if (c.subset_train > 0) {
    const std::size_t keep = static_cast<std::size_t>(c.subset_train) + static_cast<std::size_t>(c.subset_val);
    if (keep > train.size()) throw DataError("subset of " + std::to_string(keep) + " exceeds the " + std::to_string(train.size()) + " training patterns");
    train = head(train, keep);
    if (c.subset_val > 0) val_fraction = static_cast<double>(c.subset_val) / static_cast<double>(keep);
  }
  DataSplits d;
  std::tie(d.train, d.val) = split(train, {val_fraction, c.seed});
  d.test = std::move(test);
  info["train"] = d.train.size();
  info["val"] = d.val.size();
  info["test"] = d.test.size();
  info["input_dim"] = d.train.input_dim();
  info["classes"] = d.train.class_count;
  return {std::move(d), info};
}

inline std::string table(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> w(header.size());
  for (std::size_t i = 0; i < header.size(); ++i) w[i] = header[i].size();
  for (const auto& r : rows)
    for (std::size_t i = 0; i < r.size() && i < w.size(); ++i) w[i] = std::max(w[i], r[i].size());
  std::ostringstream os;
  auto line = [&](const std::vector<std::string>& r) {
    for (std::size_t i = 0; i < r.size(); ++i) os << (i ? "  " : "") << std::setw(static_cast<int>(w[i])) << r[i];
    os << '\n';
  };
  line(header);
  for (const auto& r : rows) line(r);
  return os.str();
}

inline std::string pct(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << 100.0 * v;
  return os.str();
}

inline json mean_std(const std::vector<double>& v) {
  if (v.empty()) return nullptr;
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  const double sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
  return {{"mean", m}, {"std", sd}, {"n", v.size()}};
}

inline std::string join(const std::vector<int>& v, char sep) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? std::string(1, sep) : "") + std::to_string(v[i]);
  return s;
}

inline Rng run_rng(const Common& c, int run) { return Rng(derive_seed(c.seed, static_cast<std::uint64_t>(run))); }

// Adds networks/run_<r>.afnet when --save-networks is set.
template <FeedforwardNetwork Net>
void maybe_save_network(Artifacts& art, const Common& c, const std::string& sub, int run, const Net& net) {
  if (!c.save_networks) return;
  const nlohmann::ordered_json lineage{{"subcommand", sub},
                                       {"seed", c.seed},
                                       {"run", run},
                                       {"run_seed", derive_seed(c.seed, static_cast<std::uint64_t>(run))}};
  const auto bytes = encode_checkpoint(net, lineage);
  art.files["networks/run_" + std::to_string(run) + ".afnet"] = std::string(bytes.begin(), bytes.end());
}

// ---------------------------------------------------------------------------
// Subcommand bodies

inline Artifacts do_train(const Common& c, const TrainArgs& a, const DataSplits& data) {
  const Timing timing = parse_timing(c.timing);
  const ArchitectureSpec spec{a.depth, a.width, parse_activation(a.activation), parse_optimizer(c.optimizer)};
  if (spec.depth < 1 || spec.width < 1) throw ConfigError("--depth and --width must be >= 1");
  TrainConfig tc = base_train(c);
  if (a.no_early_stop) tc.early_stop.reset();
  else tc.early_stop = EarlyStop{parse_monitor(a.monitor), a.patience};
  tc.validate();

  Artifacts art;
  CsvWriter results({"run", "stopped_epoch", "best_epoch", "best_val_acc", "best_val_loss", "test_acc", "seconds"});
  std::vector<std::vector<std::string>> rows;
  std::vector<double> tests;
  json runs = json::array();
  for (int r = 1; r <= c.runs; ++r) {
    Rng rng = run_rng(c, r);
    LayeredNetwork net = build_layered(data.train.input_dim(), spec, data.train.class_count);
    init_weights(net, rng);
    RunRecord rec = fit(net, data.train, data.val, tc, rng);
    if (!data.test.empty()) rec.test_accuracy = evaluate(net, data.test).accuracy;
    if (rec.test_accuracy) tests.push_back(*rec.test_accuracy);
    maybe_save_network(art, c, "train", r, net);
    art.main_seconds += rec.total_seconds();
    art.files["curves/run_" + std::to_string(r) + ".csv"] = run_record_csv(rec, timing);
    std::vector<std::string> row{std::to_string(r), std::to_string(rec.stopped_epoch), std::to_string(rec.best_epoch),
                                 fmt_real(rec.best_val_accuracy()), fmt_real(rec.best_val_loss()),
                                 rec.test_accuracy ? fmt_real(*rec.test_accuracy) : "", fmt_seconds(rec.total_seconds(), timing)};
    results.row(row);
    rows.push_back({std::to_string(r), std::to_string(rec.stopped_epoch), std::to_string(rec.best_epoch),
                    pct(rec.best_val_accuracy()), rec.test_accuracy ? pct(*rec.test_accuracy) : "-"});
    runs.push_back(to_json(rec, timing));
  }
  art.files["results.csv"] = results.str();
  art.results = {{"spec", to_string(spec)}, {"parameter_count", build_layered(data.train.input_dim(), spec, data.train.class_count).parameter_count()},
                 {"runs", runs}, {"test_accuracy", mean_std(tests)}};
  art.summary = "train " + to_string(spec) + "\n" + table({"run", "stopped", "best", "val%", "test%"}, rows);
  return art;
}

inline FitnessConfig fitness_config(const Common& c, int runs, int epochs) {
  FitnessConfig f;
  f.runs = runs;
  f.epochs = epochs;
  f.train = base_train(c);
  if (runs < 1 || epochs < 1) throw ConfigError("fitness runs and epochs must be >= 1");
  return f;
}

inline std::vector<std::vector<std::string>> top_rows(const std::vector<EvaluatedSpec>& ranked, std::size_t k) {
  std::vector<std::vector<std::string>> rows;
  for (std::size_t i = 0; i < std::min(k, ranked.size()); ++i)
    rows.push_back({std::to_string(i + 1), to_string(ranked[i].spec), pct(ranked[i].fitness)});
  return rows;
}

inline Artifacts do_random_search(const Common& c, const SearchArgs& a, const DataSplits& data) {
  const Timing timing = parse_timing(c.timing);
  const SearchSpace space;
  Rng rng(c.seed);
  auto res = random_search(space, a.n, fitness_on(data, fitness_config(c, a.fitness_runs, a.fitness_epochs)), rng,
                           a.dedupe, c.jobs);
  Artifacts art;
  for (const auto& e : res.evaluations) art.main_seconds += e.seconds;
  std::vector<ArchitectureSpec> sampled;
  for (const auto& e : res.evaluations) sampled.push_back(e.spec);
  const ExplorationReport rep = exploration_report(res.evaluations, space, sampled);
  art.files["results.csv"] = search_csv("random", res.ranked, timing);
  art.files["curves/exploration.csv"] = exploration_csv(rep);
  art.results = {{"space_size", space.size()}, {"evaluations", res.evaluations.size()},
                 {"best", to_string(res.ranked.front().spec)}, {"best_fitness", res.ranked.front().fitness},
                 {"exploration", to_json(rep)}};
  art.summary = "random search: " + std::to_string(res.evaluations.size()) + " evaluations, " +
                std::to_string(rep.distinct) + " distinct of " + std::to_string(space.size()) + "\n" +
                table({"rank", "spec", "val%"}, top_rows(res.ranked, 10));
  return art;
}

inline Artifacts do_evolve(const Common& c, const EvolveArgs& a, const DataSplits& data) {
  const Timing timing = parse_timing(c.timing);
  const SearchSpace space;
  EvolutionParams p;
  p.population_size = a.population;
  p.mutation_chance = a.mutation;
  p.retain_rate = a.retain;
  p.random_select_rate = a.random_select;
  p.dedupe = a.dedupe;
  p.budget = a.budget;
  Rng rng(c.seed);
  auto res = evolve(space, p, fitness_on(data, fitness_config(c, a.fitness_runs, a.fitness_epochs)), rng, c.jobs);
  Artifacts art;
  for (const auto& e : res.evaluations) art.main_seconds += e.seconds;
  const ExplorationReport rep = exploration_report(res.evaluations, space, res.initial_population);
  art.files["results.csv"] = search_csv("evolution", res.evaluations, timing);
  art.files["curves/exploration.csv"] = exploration_csv(rep);
  CsvWriter gens({"generation", "population", "new_evaluations", "best_fitness", "mean_fitness", "best_so_far"});
  json sizes = json::array();
  for (std::size_t g = 0; g < res.generations.size(); ++g) {
    const auto& popn = res.generations[g];
    double mean = 0.0;
    for (const auto& e : popn) mean += e.fitness;
    mean /= static_cast<double>(popn.size());
    const auto fresh = std::count_if(res.evaluations.begin(), res.evaluations.end(),
                                     [&](const EvaluatedSpec& e) { return e.generation == static_cast<int>(g); });
    gens.row({std::to_string(g), std::to_string(popn.size()), std::to_string(fresh), fmt_real(popn.front().fitness),
              fmt_real(mean), fmt_real(res.best_so_far[g])});
    sizes.push_back(popn.size());
  }
  art.files["curves/generations.csv"] = gens.str();
  std::vector<EvaluatedSpec> final_pop = res.final_population();
  art.results = {{"space_size", space.size()},
                 {"evaluations", res.evaluations.size()},
                 {"generations", res.generations.size()},
                 {"population_sizes", sizes},
                 {"best", to_string(final_pop.front().spec)},
                 {"best_fitness", final_pop.front().fitness},
                 {"best_so_far", res.best_so_far},
                 {"exploration", to_json(rep)}};
  art.summary = "evolution: " + std::to_string(res.evaluations.size()) + " evaluations over " +
                std::to_string(res.generations.size()) + " generations, " + std::to_string(rep.distinct) + " distinct\n" +
                table({"rank", "spec", "val%"}, top_rows(final_pop, 10));
  return art;
}

inline Artifacts do_cascade(const Common& c, const CascadeArgs& a, const DataSplits& data, Objective objective) {
  const Timing timing = parse_timing(c.timing);
  CandidatePoolConfig pool;
  pool.pool_size = a.pool;
  pool.candidate_epochs = a.candidate_epochs;
  pool.objective = objective;
  pool.reuse.kind = parse_reuse(a.reuse);
  pool.reuse.drop = a.drop;
  if (a.insert == "unit") pool.insert_kind = InsertKind::unit;
  else if (a.insert == "layer") pool.insert_kind = InsertKind::layer;
  else throw ConfigError("--insert must be 'unit' or 'layer'");
  pool.layer_width = a.layer_width;
  pool.activation = parse_activation(a.activation);
  if (objective == Objective::correlation_max && pool.reuse.kind != ReuseKind::never)
    throw ConfigError("reuse policies apply to the loss objective only");
  if (a.insertions < (objective == Objective::correlation_max ? 0 : 1))
    throw ConfigError("--insertions is below the minimum for this algorithm");
  pool.validate();
  ConstructiveConfig cc;
  cc.train = base_train(c);
  cc.patience = a.patience;
  cc.jobs = c.jobs;
  cc.converge().validate();

  Artifacts art;
  CsvWriter results({"run", "insertions", "hidden_units", "final_val_acc", "test_acc", "param_count", "candidate_seconds", "main_seconds"});
  std::vector<std::vector<std::string>> rows;
  std::vector<double> vals, tests;
  json runs = json::array();
  for (int r = 1; r <= c.runs; ++r) {
    Rng rng = run_rng(c, r);
    CascadeResult res = objective == Objective::correlation_max ? cascor_train(data, a.insertions, pool, cc, rng)
                                                                : caser_re_train(data, a.insertions, pool, cc, rng);
    const auto& rec = res.record;
    art.candidate_seconds += rec.candidate_seconds;
    art.main_seconds += rec.main_seconds;
    vals.push_back(rec.final_val_accuracy());
    if (rec.test_accuracy) tests.push_back(*rec.test_accuracy);
    const auto units = res.net.feature_dim() - res.net.input_dim();
    results.row({std::to_string(r), std::to_string(rec.insertions.size()), std::to_string(units),
                 fmt_real(rec.final_val_accuracy()), rec.test_accuracy ? fmt_real(*rec.test_accuracy) : "",
                 std::to_string(res.net.parameter_count()), fmt_seconds(rec.candidate_seconds, timing),
                 fmt_seconds(rec.main_seconds, timing)});
    rows.push_back({std::to_string(r), std::to_string(units), pct(rec.final_val_accuracy()),
                    rec.test_accuracy ? pct(*rec.test_accuracy) : "-"});
    art.files["curves/run_" + std::to_string(r) + "_insertions.csv"] = insertion_curves_csv(rec);
    maybe_save_network(art, c, objective == Objective::correlation_max ? "cascor" : "caser", r, res.net);
    runs.push_back(to_json(rec, timing));
  }
  art.files["results.csv"] = results.str();
  art.results = {{"runs", runs}, {"val_accuracy", mean_std(vals)}, {"test_accuracy", mean_std(tests)}};
  const std::string name = objective == Objective::correlation_max ? "cascor" : "caser (reuse " + a.reuse + ")";
  art.summary = name + "\n" + table({"run", "units", "val%", "test%"}, rows);
  return art;
}

inline Artifacts do_forward_thinking(const Common& c, const ForwardThinkingArgs& a, const DataSplits& data) {
  const Timing timing = parse_timing(c.timing);
  if (a.widths.empty()) throw ConfigError("--widths needs at least one layer");
  std::vector<LayerPlanItem> plan;
  for (int w : a.widths) {
    if (w < 1) throw ConfigError("layer widths must be >= 1");
    plan.push_back({w, parse_activation(a.activation)});
  }
  ForwardThinkingConfig fc;
  fc.train = base_train(c);
  fc.monitor = parse_monitor(a.monitor);
  fc.patience = a.patience;
  fc.last_patience = a.last_patience;
  if (a.patience < 1 || a.last_patience < 1) throw ConfigError("patience must be >= 1");

  Artifacts art;
  CsvWriter results({"run", "depth", "final_val_acc", "test_acc", "param_count", "seconds"});
  std::vector<std::vector<std::string>> rows;
  std::vector<double> tests;
  json runs = json::array();
  for (int r = 1; r <= c.runs; ++r) {
    Rng rng = run_rng(c, r);
    ForwardThinkingResult res = forward_thinking_train(data, plan, fc, rng);
    art.main_seconds += res.seconds;
    const double val = evaluate(res.net, data.val).accuracy;
    if (res.test_accuracy) tests.push_back(*res.test_accuracy);
    maybe_save_network(art, c, "forward-thinking", r, res.net);
    json layers = json::array();
    for (std::size_t i = 0; i < res.per_layer.size(); ++i) {
      art.files["curves/run_" + std::to_string(r) + "_layer_" + std::to_string(i + 1) + ".csv"] =
          run_record_csv(res.per_layer[i], timing);
      layers.push_back(to_json(res.per_layer[i], timing));
    }
    results.row({std::to_string(r), std::to_string(res.net.depth()), fmt_real(val),
                 res.test_accuracy ? fmt_real(*res.test_accuracy) : "", std::to_string(res.net.parameter_count()),
                 fmt_seconds(res.seconds, timing)});
    rows.push_back({std::to_string(r), pct(val), res.test_accuracy ? pct(*res.test_accuracy) : "-"});
    runs.push_back({{"layers", layers}, {"val_accuracy", val},
                    {"test_accuracy", res.test_accuracy ? json(*res.test_accuracy) : json(nullptr)}});
  }
  art.files["results.csv"] = results.str();
  art.results = {{"widths", a.widths}, {"runs", runs}, {"test_accuracy", mean_std(tests)}};
  art.summary = "forward thinking " + join(a.widths, 'x') + "\n" + table({"run", "val%", "test%"}, rows);
  return art;
}

inline Artifacts do_aft(const Common& c, const AftArgs& a, const DataSplits& data) {
  const Timing timing = parse_timing(c.timing);
  AftConfig ac;
  ac.pool_size = a.pool;
  ac.width_min = a.width_min;
  ac.width_max = a.width_max;
  ac.width_step = a.width_step;
  ac.candidate_epochs = a.candidate_epochs;
  ac.monotone = !a.no_monotone;
  ac.max_layers = a.max_layers;
  ac.activation = parse_activation(a.activation);
  ac.epsilon = a.epsilon;
  ac.train = base_train(c);
  ac.monitor = parse_monitor(a.monitor);
  ac.patience = a.patience;
  ac.head_patience = a.head_patience;
  ac.jobs = c.jobs;
  ac.validate();
  if (a.patience < 1 || a.head_patience < 1) throw ConfigError("patience must be >= 1");

  Artifacts art;
  CsvWriter results({"run", "built_depth", "chosen_depth", "widths", "overbuilt_max_val_acc", "pruned_val_acc", "test_acc",
                     "param_count", "candidate_seconds", "main_seconds"});
  std::vector<std::vector<std::string>> rows;
  std::vector<double> tests;
  json runs = json::array();
  for (int r = 1; r <= c.runs; ++r) {
    Rng rng = run_rng(c, r);
    AftResult built = auto_forward_thinking(data, ac, rng);
    PruneResult pruned = prune_to_tradeoff(built.curve, built.net, ac.epsilon, data, ac, rng);
    const double pruned_val = evaluate(pruned.net, data.val).accuracy;
    double best = 0.0;
    for (const auto& p : built.curve) best = std::max(best, p.val_accuracy);
    art.candidate_seconds += built.record.candidate_seconds;
    art.main_seconds += built.record.main_seconds + pruned.head_record.total_seconds();
    if (pruned.test_accuracy) tests.push_back(*pruned.test_accuracy);
    maybe_save_network(art, c, "aft", r, pruned.net);
    const std::vector<int> widths = pruned.net.widths();
    results.row({std::to_string(r), std::to_string(built.net.depth()), std::to_string(pruned.chosen_depth), join(widths, ';'),
                 fmt_real(best), fmt_real(pruned_val), pruned.test_accuracy ? fmt_real(*pruned.test_accuracy) : "",
                 std::to_string(pruned.net.parameter_count()), fmt_seconds(built.record.candidate_seconds, timing),
                 fmt_seconds(built.record.main_seconds + pruned.head_record.total_seconds(), timing)});
    rows.push_back({std::to_string(r), join(built.net.widths(), ','), join(widths, ','), pct(pruned_val),
                    pruned.test_accuracy ? pct(*pruned.test_accuracy) : "-"});
    art.files["curves/run_" + std::to_string(r) + "_layers.csv"] = layer_curve_csv(built.curve);
    art.files["curves/run_" + std::to_string(r) + "_insertions.csv"] = insertion_curves_csv(built.record);
    runs.push_back({{"built_widths", built.net.widths()},
                    {"curve", to_json(built.curve)},
                    {"chosen_depth", pruned.chosen_depth},
                    {"pruned_widths", widths},
                    {"pruned_val_accuracy", pruned_val},
                    {"head", to_json(pruned.head_record, timing)},
                    {"record", to_json(built.record, timing)},
                    {"test_accuracy", pruned.test_accuracy ? json(*pruned.test_accuracy) : json(nullptr)}});
  }
  art.files["results.csv"] = results.str();
  art.results = {{"runs", runs}, {"test_accuracy", mean_std(tests)}};
  art.summary = "automated forward thinking\n" + table({"run", "built", "pruned", "val%", "test%"}, rows);
  return art;
}

inline void write_artifacts(const std::filesystem::path& out, const Artifacts& art, const json& manifest) {
  namespace fs = std::filesystem;
  const bool existed = fs::exists(out);
  std::vector<fs::path> written;
  try {
    for (const auto& [rel, text] : art.files) {
      write_text(out / rel, text);
      written.push_back(out / rel);
    }
    write_text(out / "manifest.json", manifest.dump(2) + "\n");
  } catch (...) {
    std::error_code ec;
    for (const auto& p : written) fs::remove(p, ec);
    if (!existed) fs::remove_all(out, ec);
    throw;
  }
}

}  // namespace detail

/// Runs the tool on `args` (without the program name). Returns the exit code.
inline int run(std::vector<std::string> args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  using namespace detail;
  CLI::App app{"Architecture search and constructive training of dense networks", "archforge"};
  app.set_version_flag("--version", kToolVersion);
  app.require_subcommand(1);

  Registry reg;
  Common common;
  TrainArgs train_args;
  SearchArgs search_args;
  EvolveArgs evolve_args;
  CascadeArgs cascor_args;
  cascor_args.candidate_epochs = 2;
  CascadeArgs caser_args;
  ForwardThinkingArgs ft_args;
  AftArgs aft_args;

  auto add_common = [&](CLI::App* s) {
    reg.option(s, "seed", common.seed, "master seed");
    reg.option(s, "jobs", common.jobs, "worker threads for candidate pools and fitness evaluation");
    reg.option(s, "out", common.out, "output directory");
    s->add_option("--config", common.config, "JSON config; explicit flags take precedence");
    reg.flag(s, "synthetic", common.synthetic, "use the two-polygon task instead of MNIST");
    reg.option(s, "synthetic-n", common.synthetic_n, "synthetic training patterns (test gets a quarter as many)");
    reg.option(s, "mnist-dir", common.mnist_dir, "directory with the four MNIST IDX files (default: $ARCHFORGE_MNIST_DIR)");
    reg.option(s, "subset-train", common.subset_train, "use only the first N training patterns (0: all)");
    reg.option(s, "subset-val", common.subset_val, "with --subset-train: validation patterns taken from the same head");
    reg.option(s, "val-fraction", common.val_fraction, "validation share of the training file");
    reg.option(s, "timing", common.timing, "on: record wall time; off: write 0 so replays are byte-identical");
    reg.option(s, "optimizer", common.optimizer, "sgd or rmsprop");
    reg.option(s, "learning-rate", common.learning_rate, "0 selects 0.001 for rmsprop, 0.01 for sgd");
    reg.option(s, "batch-size", common.batch_size, "mini-batch size");
    reg.option(s, "max-epochs", common.max_epochs, "epoch cap for every training phase");
    reg.option(s, "runs", common.runs, "independent repetitions");
  };

  auto* train = app.add_subcommand("train", "train one fixed layered architecture");
  add_common(train);
  reg.option(train, "depth", train_args.depth, "hidden layers");
  reg.option(train, "width", train_args.width, "units per hidden layer");
  reg.option(train, "activation", train_args.activation, "relu or tanh");
  reg.option(train, "monitor", train_args.monitor, "val_accuracy or val_loss");
  reg.option(train, "patience", train_args.patience, "early-stopping patience");
  reg.flag(train, "no-early-stop", train_args.no_early_stop, "train for exactly --max-epochs");

  auto* rs = app.add_subcommand("random-search", "uniform random architecture search");
  add_common(rs);
  reg.option(rs, "n", search_args.n, "architectures to sample");
  reg.flag(rs, "dedupe", search_args.dedupe, "resample duplicates");
  reg.option(rs, "fitness-runs", search_args.fitness_runs, "trainings per architecture");
  reg.option(rs, "fitness-epochs", search_args.fitness_epochs, "epochs per fitness training");

  auto* ev = app.add_subcommand("evolve", "evolutionary architecture search");
  add_common(ev);
  reg.option(ev, "population", evolve_args.population, "population size");
  reg.option(ev, "mutation", evolve_args.mutation, "mutation chance");
  reg.option(ev, "retain", evolve_args.retain, "share of fittest kept as parents");
  reg.option(ev, "random-select", evolve_args.random_select, "chance of keeping each other member");
  reg.flag(ev, "dedupe", evolve_args.dedupe, "no duplicate members within a generation");
  reg.option(ev, "budget", evolve_args.budget, "stop once this many architectures were evaluated");
  reg.option(ev, "fitness-runs", evolve_args.fitness_runs, "trainings per architecture");
  reg.option(ev, "fitness-epochs", evolve_args.fitness_epochs, "epochs per fitness training");

  auto add_cascade = [&](CLI::App* s, CascadeArgs& a, bool reuse) {
    add_common(s);
    reg.option(s, "insertions", a.insertions, "units or layer blocks to insert");
    reg.option(s, "pool", a.pool, "candidate pool size");
    reg.option(s, "candidate-epochs", a.candidate_epochs, "training epochs per candidate");
    if (reuse) {
      reg.option(s, "reuse", a.reuse, "never, always, threshold or pool-member");
      reg.option(s, "drop", a.drop, "threshold policy: tolerated validation-accuracy drop");
    }
    reg.option(s, "insert", a.insert, "unit or layer");
    reg.option(s, "layer-width", a.layer_width, "width of inserted layer blocks");
    reg.option(s, "activation", a.activation, "relu or tanh");
    reg.option(s, "patience", a.patience, "convergence patience after each insertion");
  };
  auto* cascor = app.add_subcommand("cascor", "cascade-correlation (correlation objective)");
  add_cascade(cascor, cascor_args, false);
  auto* caser = app.add_subcommand("caser", "cascade growth by loss minimisation, optional output reuse");
  add_cascade(caser, caser_args, true);

  auto* ft = app.add_subcommand("forward-thinking", "greedy layer-wise training of a fixed plan");
  add_common(ft);
  reg.option(ft, "widths", ft_args.widths, "hidden layer widths, bottom first");
  reg.option(ft, "activation", ft_args.activation, "relu or tanh");
  reg.option(ft, "monitor", ft_args.monitor, "val_loss or val_accuracy");
  reg.option(ft, "patience", ft_args.patience, "patience for every layer but the last");
  reg.option(ft, "last-patience", ft_args.last_patience, "patience for the last layer");

  auto* aft = app.add_subcommand("aft", "forward thinking with pool-selected widths, then pruning");
  add_common(aft);
  reg.option(aft, "pool", aft_args.pool, "candidate widths per layer");
  reg.option(aft, "width-min", aft_args.width_min, "smallest candidate width");
  reg.option(aft, "width-max", aft_args.width_max, "largest candidate width");
  reg.option(aft, "width-step", aft_args.width_step, "candidate width step");
  reg.option(aft, "candidate-epochs", aft_args.candidate_epochs, "training epochs per candidate");
  reg.option(aft, "max-layers", aft_args.max_layers, "layers to build before pruning");
  reg.flag(aft, "no-monotone", aft_args.no_monotone, "allow widths to grow with depth");
  reg.option(aft, "epsilon", aft_args.epsilon, "pruning tolerance on validation accuracy");
  reg.option(aft, "activation", aft_args.activation, "relu or tanh");
  reg.option(aft, "monitor", aft_args.monitor, "val_accuracy or val_loss");
  reg.option(aft, "patience", aft_args.patience, "convergence patience for each inserted layer");
  reg.option(aft, "head-patience", aft_args.head_patience, "patience when retraining the pruned head");

  for (CLI::App* s : {train, cascor, caser, ft, aft})
    reg.flag(s, "save-networks", common.save_networks, "also write each run's final network to networks/run_<r>.afnet");

  try {
    if (!args.empty() && args.front().rfind("-", 0) != 0) {
      if (auto path = config_path(args)) {
        auto extra = config_args(*path, args);
        args.insert(args.begin() + 1, extra.begin(), extra.end());
      }
    }
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForVersion&) {
    out << kToolVersion << '\n';
    return kOk;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      app.exit(e, out, err);
      return kOk;
    }
    err << "archforge: " << e.what() << '\n';
    return kConfigError;
  } catch (const ConfigError& e) {
    err << "archforge: " << e.what() << '\n';
    return kConfigError;
  }

  CLI::App* sub = app.get_subcommands().front();
  const std::string name = sub->get_name();
  try {
    check_common(common);
    // Validate cheap settings before touching the data.
    base_train(common);
    auto [data, data_info] = load_data(common);
    const auto t0 = std::chrono::steady_clock::now();
    Artifacts art;
    if (name == "train") art = do_train(common, train_args, data);
    else if (name == "random-search") art = do_random_search(common, search_args, data);
    else if (name == "evolve") art = do_evolve(common, evolve_args, data);
    else if (name == "cascor") art = do_cascade(common, cascor_args, data, Objective::correlation_max);
    else if (name == "caser") art = do_cascade(common, caser_args, data, Objective::loss_min);
    else if (name == "forward-thinking") art = do_forward_thinking(common, ft_args, data);
    else art = do_aft(common, aft_args, data);
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool timing = parse_timing(common.timing) == Timing::on;

    json manifest;
    manifest["tool"] = "archforge";
    manifest["version"] = kToolVersion;
    manifest["subcommand"] = name;
    manifest["seed"] = common.seed;
    manifest["config"] = reg.echo(sub);
    manifest["data"] = data_info;
    manifest["timing"] = {{"candidate_seconds", timing ? art.candidate_seconds : 0.0},
                          {"main_seconds", timing ? art.main_seconds : 0.0},
                          {"wall_seconds", timing ? wall : 0.0}};
    manifest["results"] = art.results;
    json files = json::array({"manifest.json"});
    for (const auto& [rel, _] : art.files) files.push_back(rel);
    manifest["files"] = files;
    write_artifacts(common.out, art, manifest);
    out << art.summary;
    out << "artifacts written to " << common.out << '\n';
    return kOk;
  } catch (const ConfigError& e) {
    err << "archforge " << name << ": configuration error: " << e.what() << '\n';
    return kConfigError;
  } catch (const DataError& e) {
    err << "archforge " << name << ": data error: " << e.what() << '\n';
    return kDataError;
  } catch (const std::exception& e) {
    err << "archforge " << name << ": " << e.what() << '\n';
    return kRuntimeError;
  }
}

}  // namespace archforge::cli
