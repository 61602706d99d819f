#pragma once

// Architecture search over a discrete space of layered networks: uniform
// random sampling and a generational evolutionary loop. Fitness evaluation is
// passed in as a callable so the search bookkeeping can be exercised without
// training anything.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "archforge/data.hpp"
#include "archforge/errors.hpp"
#include "archforge/network.hpp"
#include "archforge/numerics.hpp"
#include "archforge/parallel.hpp"
#include "archforge/training.hpp"

namespace archforge {

struct SearchSpace {
  std::vector<int> widths;
  std::vector<int> depths;
  std::vector<Activation> activations{Activation::relu, Activation::tanh};
  std::vector<Optimizer> optimizers{Optimizer::sgd, Optimizer::rmsprop};

  SearchSpace() {
    for (int w = 100; w <= 1000; w += 50) widths.push_back(w);
    for (int d = 1; d <= 10; ++d) depths.push_back(d);
  }

  std::size_t size() const { return widths.size() * depths.size() * activations.size() * optimizers.size(); }

  bool contains(const ArchitectureSpec& s) const {
    auto has = [](const auto& v, const auto& x) { return std::find(v.begin(), v.end(), x) != v.end(); };
    return has(depths, s.depth) && has(widths, s.width) && has(activations, s.hidden_activation) &&
           has(optimizers, s.optimizer);
  }

  /// Every point of the space in lexicographic order.
  std::vector<ArchitectureSpec> enumerate() const {
    std::vector<ArchitectureSpec> out;
    out.reserve(size());
    for (int d : depths)
      for (int w : widths)
        for (Activation a : activations)
          for (Optimizer o : optimizers) out.push_back({d, w, a, o});
    std::sort(out.begin(), out.end());
    return out;
  }
};

inline constexpr int kGeneCount = 4;

inline void resample_gene(ArchitectureSpec& s, int gene, const SearchSpace& space, Rng& rng) {
  switch (gene) {
    case 0: s.depth = space.depths[rng.uniform_index(space.depths.size())]; break;
    case 1: s.width = space.widths[rng.uniform_index(space.widths.size())]; break;
    case 2: s.hidden_activation = space.activations[rng.uniform_index(space.activations.size())]; break;
    case 3: s.optimizer = space.optimizers[rng.uniform_index(space.optimizers.size())]; break;
    default: throw ContractViolation("resample_gene: gene index out of range");
  }
}

inline ArchitectureSpec sample_random(const SearchSpace& space, Rng& rng) {
  ArchitectureSpec s;
  for (int g = 0; g < kGeneCount; ++g) resample_gene(s, g, space, rng);
  return s;
}

/// Uniform crossover: each gene comes from `a` or `b` with probability 1/2.
inline ArchitectureSpec breed(const ArchitectureSpec& a, const ArchitectureSpec& b, Rng& rng) {
  ArchitectureSpec c;
  c.depth = rng.bernoulli(0.5) ? a.depth : b.depth;
  c.width = rng.bernoulli(0.5) ? a.width : b.width;
  c.hidden_activation = rng.bernoulli(0.5) ? a.hidden_activation : b.hidden_activation;
  c.optimizer = rng.bernoulli(0.5) ? a.optimizer : b.optimizer;
  return c;
}

/// With probability `chance`, resamples one uniformly chosen gene (possibly to its old value).
inline ArchitectureSpec mutate(ArchitectureSpec s, const SearchSpace& space, Rng& rng, double chance) {
  require(chance >= 0.0 && chance <= 1.0, "mutate: chance must lie in [0, 1]");
  if (rng.bernoulli(chance)) resample_gene(s, static_cast<int>(rng.uniform_index(kGeneCount)), space, rng);
  return s;
}

// ---------------------------------------------------------------------------
// Fitness

struct EvaluatedSpec {
  ArchitectureSpec spec;
  double fitness = 0.0;  // mean final validation accuracy over runs
  std::optional<double> test_accuracy;
  std::vector<RunRecord> runs;
  int run_count = 0;
  int epochs = 0;
  int generation = 0;
  bool diverged = false;
  bool in_initial_population = false;
  double seconds = 0.0;
};

struct FitnessConfig {
  int runs = 3;
  int epochs = 3;
  TrainConfig train;  // batch size and learning rate; optimizer comes from the spec
};

/// Trains the spec `runs` times for exactly `epochs` epochs each and averages
/// the final validation accuracy. A diverged run contributes 0.
inline EvaluatedSpec evaluate_fitness(const ArchitectureSpec& spec, const DataSplits& data, const FitnessConfig& cfg,
                                      std::uint64_t seed) {
  require(cfg.runs >= 1, "evaluate_fitness: runs must be >= 1");
  require(cfg.epochs >= 1, "evaluate_fitness: epochs must be >= 1");
  const auto t0 = std::chrono::steady_clock::now();
  EvaluatedSpec out;
  out.spec = spec;
  out.run_count = cfg.runs;
  out.epochs = cfg.epochs;
  TrainConfig tc = cfg.train;
  tc.optimizer = spec.optimizer;
  tc.max_epochs = cfg.epochs;
  tc.early_stop.reset();
  double sum = 0.0;
  double test_sum = 0.0;
  for (int r = 0; r < cfg.runs; ++r) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(r)));
    LayeredNetwork net = build_layered(data.train.input_dim(), spec, data.train.class_count);
    init_weights(net, rng);
    RunRecord rec = fit(net, data.train, data.val, tc, rng);
    if (rec.diverged) {
      out.diverged = true;
    } else {
      sum += rec.val_accuracy.back();
      if (!data.test.empty()) rec.test_accuracy = evaluate(net, data.test).accuracy;
    }
    if (rec.test_accuracy) test_sum += *rec.test_accuracy;
    out.runs.push_back(std::move(rec));
  }
  out.fitness = sum / cfg.runs;
  if (!data.test.empty()) out.test_accuracy = test_sum / cfg.runs;
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

/// Maps (spec, seed) to an evaluated spec.
using FitnessFn = std::function<EvaluatedSpec(const ArchitectureSpec&, std::uint64_t)>;

inline FitnessFn fitness_on(const DataSplits& data, FitnessConfig cfg) {
  return [&data, cfg](const ArchitectureSpec& s, std::uint64_t seed) { return evaluate_fitness(s, data, cfg, seed); };
}

namespace detail {

// Evaluates specs[i] with seed derive_seed(eval_seed, first_index + i).
inline std::vector<EvaluatedSpec> evaluate_all(const std::vector<ArchitectureSpec>& specs, const FitnessFn& fitness,
                                               std::uint64_t eval_seed, std::uint64_t first_index, int jobs) {
  return parallel_map(specs.size(), jobs, [&](std::size_t i) {
    EvaluatedSpec e = fitness(specs[i], derive_seed(eval_seed, first_index + i));
    e.spec = specs[i];
    if (!(e.fitness >= 0.0 && e.fitness <= 1.0)) throw InvariantViolation("fitness outside [0, 1] for " + to_string(e.spec));
    return e;
  });
}

// Fitness descending; equal fitness ordered by spec.
inline bool ranks_before(const EvaluatedSpec& a, const EvaluatedSpec& b) {
  if (a.fitness != b.fitness) return a.fitness > b.fitness;
  return a.spec < b.spec;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Random search

struct RandomSearchResult {
  std::vector<EvaluatedSpec> evaluations;  // sampling order
  std::vector<EvaluatedSpec> ranked;       // fitness descending
};

inline RandomSearchResult random_search(const SearchSpace& space, int n, const FitnessFn& fitness, Rng& rng,
                                        bool dedupe = false, int jobs = 1) {
  require(n >= 1, "random_search: n must be >= 1");
  if (dedupe && static_cast<std::size_t>(n) > space.size())
    throw ConfigError("random_search: n exceeds the space size with dedupe on");
  std::vector<ArchitectureSpec> specs;
  std::set<ArchitectureSpec> seen;
  while (specs.size() < static_cast<std::size_t>(n)) {
    ArchitectureSpec s = sample_random(space, rng);
    if (dedupe && !seen.insert(s).second) continue;
    specs.push_back(s);
  }
  const std::uint64_t eval_seed = rng.next_u64();
  RandomSearchResult out;
  out.evaluations = detail::evaluate_all(specs, fitness, eval_seed, 0, jobs);
  for (auto& e : out.evaluations) {
    e.generation = 0;
    e.in_initial_population = true;
  }
  out.ranked = out.evaluations;
  std::stable_sort(out.ranked.begin(), out.ranked.end(), detail::ranks_before);
  return out;
}

// ---------------------------------------------------------------------------
// Evolution

struct EvolutionParams {
  int population_size = 50;
  double mutation_chance = 0.10;
  double retain_rate = 0.40;
  double random_select_rate = 0.10;
  bool dedupe = false;
  int budget = 200;
  int breed_retries = 20;

  int retained() const { return static_cast<int>(std::ceil(retain_rate * population_size - 1e-9)); }

  void validate(const SearchSpace& space) const {
    auto unit = [](double r) { return r >= 0.0 && r <= 1.0; };
    if (population_size < 2) throw ConfigError("population_size must be >= 2");
    if (!unit(mutation_chance) || !unit(retain_rate) || !unit(random_select_rate))
      throw ConfigError("evolution rates must lie in [0, 1]");
    if (retained() < 1) throw ConfigError("retain_rate must keep at least one parent");
    if (retained() >= population_size) throw ConfigError("retain_rate must leave room for children");
    if (budget < 1) throw ConfigError("budget must be >= 1");
    if (dedupe && static_cast<std::size_t>(population_size) > space.size())
      throw ConfigError("population_size exceeds the space size with dedupe on");
  }
};

struct EvolutionResult {
  std::vector<std::vector<EvaluatedSpec>> generations;  // evaluated population at each generation boundary
  std::vector<EvaluatedSpec> evaluations;               // every training, in order
  std::vector<double> best_so_far;                      // per generation
  std::vector<ArchitectureSpec> initial_population;

  const std::vector<EvaluatedSpec>& final_population() const { return generations.back(); }
};

/// Generational loop: evaluate the new members, keep the fittest
/// ceil(retain_rate * population) plus a random selection of the rest as
/// parents, fill up with mutated children of random parent pairs, repeat
/// until the number of evaluated specs reaches the budget. Parents keep their
/// fitness and are not retrained.
inline EvolutionResult evolve(const SearchSpace& space, const EvolutionParams& params, const FitnessFn& fitness, Rng& rng,
                              int jobs = 1) {
  params.validate(space);
  const auto pop = static_cast<std::size_t>(params.population_size);
  const std::uint64_t eval_seed = rng.next_u64();
  std::uint64_t eval_index = 0;

  auto unique_random = [&](const std::vector<ArchitectureSpec>& existing) {
    for (;;) {
      ArchitectureSpec s = sample_random(space, rng);
      if (!params.dedupe || std::find(existing.begin(), existing.end(), s) == existing.end()) return s;
    }
  };

  EvolutionResult out;
  std::vector<ArchitectureSpec> pending;
  while (pending.size() < pop) pending.push_back(unique_random(pending));
  out.initial_population = pending;
  const std::set<ArchitectureSpec> initial(pending.begin(), pending.end());

  std::vector<EvaluatedSpec> parents;
  for (int generation = 0;; ++generation) {
    auto fresh = detail::evaluate_all(pending, fitness, eval_seed, eval_index, jobs);
    eval_index += fresh.size();
    for (auto& e : fresh) {
      e.generation = generation;
      e.in_initial_population = initial.count(e.spec) > 0;
      out.evaluations.push_back(e);
    }
    std::vector<EvaluatedSpec> population = std::move(parents);
    population.insert(population.end(), fresh.begin(), fresh.end());
    if (population.size() != pop) throw InvariantViolation("population size drifted");
    std::stable_sort(population.begin(), population.end(), detail::ranks_before);
    const double best = population.front().fitness;
    out.best_so_far.push_back(out.best_so_far.empty() ? best : std::max(out.best_so_far.back(), best));
    out.generations.push_back(population);
    if (out.evaluations.size() >= static_cast<std::size_t>(params.budget)) break;

    // Selection.
    const auto keep = static_cast<std::size_t>(params.retained());
    parents.assign(population.begin(), population.begin() + static_cast<std::ptrdiff_t>(keep));
    for (std::size_t i = keep; i < pop; ++i)
      if (rng.bernoulli(params.random_select_rate)) parents.push_back(population[i]);

    // Offspring.
    std::vector<ArchitectureSpec> members;
    for (const auto& p : parents) members.push_back(p.spec);
    pending.clear();
    const std::size_t children = pop - parents.size();
    for (std::size_t c = 0; c < children; ++c) {
      std::optional<ArchitectureSpec> child;
      for (int attempt = 0; attempt <= params.breed_retries && !child; ++attempt) {
        const std::size_t i = rng.uniform_index(parents.size());
        std::size_t j = rng.uniform_index(parents.size());
        if (parents.size() >= 2)
          while (j == i) j = rng.uniform_index(parents.size());
        ArchitectureSpec s = mutate(breed(parents[i].spec, parents[j].spec, rng), space, rng, params.mutation_chance);
        if (!params.dedupe || std::find(members.begin(), members.end(), s) == members.end()) child = s;
      }
      if (!child) child = unique_random(members);
      members.push_back(*child);
      pending.push_back(*child);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Exploration analytics

struct ExplorationReport {
  std::size_t evaluations = 0;
  std::size_t distinct = 0;
  double space_coverage = 0.0;          // distinct evaluated specs / space size
  double initial_population_share = 0.0;  // evaluations whose spec was in the initial population
  std::map<int, std::size_t> depth_histogram;
  std::map<int, std::size_t> width_histogram;
  std::map<std::string, std::size_t> activation_histogram;
  std::map<std::string, std::size_t> optimizer_histogram;
};

inline ExplorationReport exploration_report(const std::vector<EvaluatedSpec>& history, const SearchSpace& space,
                                            const std::vector<ArchitectureSpec>& initial_population) {
  ExplorationReport r;
  if (history.empty()) return r;
  const std::set<ArchitectureSpec> initial(initial_population.begin(), initial_population.end());
  std::set<ArchitectureSpec> distinct;
  std::size_t in_initial = 0;
  for (const auto& e : history) {
    distinct.insert(e.spec);
    in_initial += initial.count(e.spec);
    ++r.depth_histogram[e.spec.depth];
    ++r.width_histogram[e.spec.width];
    ++r.activation_histogram[std::string(to_string(e.spec.hidden_activation))];
    ++r.optimizer_histogram[std::string(to_string(e.spec.optimizer))];
  }
  r.evaluations = history.size();
  r.distinct = distinct.size();
  r.space_coverage = static_cast<double>(distinct.size()) / static_cast<double>(space.size());
  r.initial_population_share = static_cast<double>(in_initial) / static_cast<double>(history.size());
  return r;
}

}  // namespace archforge
