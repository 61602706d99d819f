#pragma once

// CSV and JSON writers for run histories, search results and constructive
// records. Numbers are printed with a fixed format so identical runs produce
// identical bytes; wall-clock columns can be zeroed for replay comparisons.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "archforge/constructive.hpp"
#include "archforge/errors.hpp"
#include "archforge/search.hpp"
#include "archforge/training.hpp"

namespace archforge {

using json = nlohmann::ordered_json;

inline const std::vector<std::string> kRunColumns{"epoch", "train_loss", "train_acc", "val_loss", "val_acc", "seconds"};
inline const std::vector<std::string> kSearchColumns{"strategy", "generation", "depth", "width", "activation", "optimizer",
                                                     "fitness", "runs", "epochs", "seconds", "in_initial_population"};
inline const std::vector<std::string> kInsertionCurveColumns{"insertion", "candidate_id", "phase", "epoch", "val_acc", "val_loss"};
inline const std::vector<std::string> kLayerCurveColumns{"depth", "width", "val_acc", "val_loss", "train_acc", "param_count"};

/// Whether wall-clock values are written as measured or as 0.
enum class Timing { on, off };

inline std::string fmt_real(double v) {
  if (std::isnan(v)) return "";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline std::string fmt_seconds(double v, Timing t) { return t == Timing::on ? fmt_real(v) : "0"; }

class CsvWriter {
 public:
  explicit CsvWriter(const std::vector<std::string>& header) : columns_(header.size()) { row(header); }

  void row(const std::vector<std::string>& cells) {
    require(cells.size() == columns_, "CsvWriter: row has the wrong number of cells");
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out_ << ',';
      out_ << cells[i];
    }
    out_ << '\n';
  }

  std::string str() const { return out_.str(); }

 private:
  std::size_t columns_;
  std::ostringstream out_;
};

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path.string() + " for writing");
  f << text;
  if (!f.flush()) throw Error("write failed for " + path.string());
}

// ---------------------------------------------------------------------------
// Run records

inline std::string run_record_csv(const RunRecord& r, Timing timing = Timing::on) {
  CsvWriter w(kRunColumns);
  for (std::size_t e = 0; e < r.epochs(); ++e)
    w.row({std::to_string(e + 1), fmt_real(r.train_loss[e]), fmt_real(r.train_accuracy[e]), fmt_real(r.val_loss[e]),
           fmt_real(r.val_accuracy[e]), fmt_seconds(r.seconds[e], timing)});
  return w.str();
}

inline json to_json(const RunRecord& r, Timing timing = Timing::on) {
  json j;
  j["epochs"] = r.epochs();
  j["stopped_epoch"] = r.stopped_epoch;
  j["best_epoch"] = r.best_epoch;
  j["diverged"] = r.diverged;
  j["best_val_accuracy"] = r.best_val_accuracy();
  j["best_val_loss"] = r.best_epoch > 0 ? json(r.best_val_loss()) : json(nullptr);
  j["test_accuracy"] = r.test_accuracy ? json(*r.test_accuracy) : json(nullptr);
  j["seconds"] = timing == Timing::on ? r.total_seconds() : 0.0;
  return j;
}

// ---------------------------------------------------------------------------
// Search

inline void append_search_rows(CsvWriter& w, std::string_view strategy, const std::vector<EvaluatedSpec>& rows,
                               Timing timing) {
  for (const auto& e : rows)
    w.row({std::string(strategy), std::to_string(e.generation), std::to_string(e.spec.depth), std::to_string(e.spec.width),
           std::string(to_string(e.spec.hidden_activation)), std::string(to_string(e.spec.optimizer)), fmt_real(e.fitness),
           std::to_string(e.run_count), std::to_string(e.epochs), fmt_seconds(e.seconds, timing),
           e.in_initial_population ? "1" : "0"});
}

inline std::string search_csv(std::string_view strategy, const std::vector<EvaluatedSpec>& rows, Timing timing = Timing::on) {
  CsvWriter w(kSearchColumns);
  append_search_rows(w, strategy, rows, timing);
  return w.str();
}

inline json to_json(const ExplorationReport& r) {
  json j;
  j["evaluations"] = r.evaluations;
  j["distinct"] = r.distinct;
  j["space_coverage"] = r.space_coverage;
  j["initial_population_share"] = r.initial_population_share;
  json depth = json::object(), width = json::object();
  for (const auto& [k, v] : r.depth_histogram) depth[std::to_string(k)] = v;
  for (const auto& [k, v] : r.width_histogram) width[std::to_string(k)] = v;
  j["depth_histogram"] = depth;
  j["width_histogram"] = width;
  j["activation_histogram"] = r.activation_histogram;
  j["optimizer_histogram"] = r.optimizer_histogram;
  return j;
}

/// One row per (dimension, value) for visit-frequency plots.
inline std::string exploration_csv(const ExplorationReport& r) {
  CsvWriter w({"dimension", "value", "count"});
  for (const auto& [k, v] : r.depth_histogram) w.row({"depth", std::to_string(k), std::to_string(v)});
  for (const auto& [k, v] : r.width_histogram) w.row({"width", std::to_string(k), std::to_string(v)});
  for (const auto& [k, v] : r.activation_histogram) w.row({"activation", k, std::to_string(v)});
  for (const auto& [k, v] : r.optimizer_histogram) w.row({"optimizer", k, std::to_string(v)});
  return w.str();
}

// ---------------------------------------------------------------------------
// Constructive records

inline void append_run_rows(CsvWriter& w, int insertion, const std::string& candidate, std::string_view phase,
                            const RunRecord& r) {
  for (std::size_t e = 0; e < r.epochs(); ++e)
    w.row({std::to_string(insertion), candidate, std::string(phase), std::to_string(e + 1), fmt_real(r.val_accuracy[e]),
           fmt_real(r.val_loss[e])});
}

/// Long-format per-insertion curves. Insertion 0 is the initial output-only
/// phase; correlation candidates have no validation metrics, so their pool
/// rows leave those cells empty.
inline std::string insertion_curves_csv(const ConstructiveRecord& rec) {
  CsvWriter w(kInsertionCurveColumns);
  append_run_rows(w, 0, "", "main", rec.initial);
  for (const auto& ins : rec.insertions) {
    for (const auto& c : ins.pool) {
      if (!c.record.val_accuracy.empty()) {
        append_run_rows(w, ins.insertion, std::to_string(c.id), "pool", c.record);
      } else {
        for (std::size_t e = 0; e < c.correlation_history.size(); ++e)
          w.row({std::to_string(ins.insertion), std::to_string(c.id), "pool", std::to_string(e + 1), "", ""});
      }
    }
    append_run_rows(w, ins.insertion, std::to_string(ins.winner), "main", ins.main);
  }
  return w.str();
}

inline json to_json(const ConstructiveRecord& rec, Timing timing = Timing::on) {
  json j;
  j["initial"] = to_json(rec.initial, timing);
  json list = json::array();
  for (const auto& ins : rec.insertions) {
    json i;
    i["insertion"] = ins.insertion;
    i["winner"] = ins.winner;
    i["width"] = ins.width;
    i["reused_output"] = ins.reused_output;
    i["val_accuracy_before"] = ins.val_accuracy_before;
    i["val_accuracy_after"] = ins.val_accuracy_after;
    i["parameter_count"] = ins.parameter_count;
    i["cumulative_units"] = ins.cumulative_units;
    json pool = json::array();
    for (const auto& c : ins.pool) {
      json p;
      p["id"] = c.id;
      p["width"] = c.width;
      p["reuses_output"] = c.reuses_output;
      p["val_accuracy"] = std::isnan(c.val_accuracy) ? json(nullptr) : json(c.val_accuracy);
      p["val_loss"] = std::isnan(c.val_loss) ? json(nullptr) : json(c.val_loss);
      p["correlation"] = std::isnan(c.correlation) ? json(nullptr) : json(c.correlation);
      p["seconds"] = timing == Timing::on ? c.seconds : 0.0;
      pool.push_back(p);
    }
    i["pool"] = pool;
    i["main"] = to_json(ins.main, timing);
    list.push_back(i);
  }
  j["insertions"] = list;
  j["candidate_seconds"] = timing == Timing::on ? rec.candidate_seconds : 0.0;
  j["main_seconds"] = timing == Timing::on ? rec.main_seconds : 0.0;
  j["invariant_checks"] = rec.invariant_checks;
  j["stopped_early"] = rec.stopped_early;
  j["stop_reason"] = rec.stop_reason;
  j["final_val_accuracy"] = rec.final_val_accuracy();
  j["test_accuracy"] = rec.test_accuracy ? json(*rec.test_accuracy) : json(nullptr);
  return j;
}

inline std::string layer_curve_csv(const LayerPerformanceCurve& curve) {
  CsvWriter w(kLayerCurveColumns);
  for (const auto& p : curve)
    w.row({std::to_string(p.depth), std::to_string(p.width), fmt_real(p.val_accuracy), fmt_real(p.val_loss),
           fmt_real(p.train_accuracy), std::to_string(p.parameter_count)});
  return w.str();
}

inline json to_json(const LayerPerformanceCurve& curve) {
  json a = json::array();
  for (const auto& p : curve)
    a.push_back({{"depth", p.depth},
                 {"width", p.width},
                 {"val_accuracy", p.val_accuracy},
                 {"val_loss", p.val_loss},
                 {"train_accuracy", p.train_accuracy},
                 {"param_count", p.parameter_count}});
  return a;
}

/// Parses a CSV produced by the writers above into rows of cells.
inline std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    rows.push_back(std::move(cells));
  }
  return rows;
}

}  // namespace archforge
