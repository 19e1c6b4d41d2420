#pragma once

// Quality and scaling metrics over snapshots and runs.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "adreg/error.hpp"
#include "adreg/estimator.hpp"
#include "adreg/runtime.hpp"

namespace adreg {

// Sum of squared residuals over the test points (estimate grid = test points).
inline double err(std::span<const double> estimate, std::span<const Observation> test) {
  if (estimate.size() != test.size()) {
    throw InputError("estimate has " + std::to_string(estimate.size()) + " values for " + std::to_string(test.size()) +
                     " test points");
  }
  double acc = 0.0;
  for (std::size_t k = 0; k < test.size(); ++k) {
    const double r = test[k].y - estimate[k];
    acc += r * r;
  }
  return acc;
}

inline double err(const EstimateVector& estimate, std::span<const Observation> test) {
  if (estimate.grid && estimate.grid->size() == test.size()) {
    for (std::size_t k = 0; k < test.size(); ++k) {
      const auto p = estimate.grid->point(k);
      if (!std::equal(p.begin(), p.end(), test[k].x.begin(), test[k].x.end())) {
        throw InputError("estimate grid does not match test point " + std::to_string(k));
      }
    }
  }
  return err(estimate.values, test);
}

// (e - mean(errs)) / e; nullopt when e = 0.
inline std::optional<double> relative_gain(double baseline, std::span<const double> errs) {
  if (errs.empty()) throw InputError("relative gain needs at least one error value");
  if (baseline == 0.0) return std::nullopt;
  double mean = 0.0;
  for (double e : errs) mean += e;
  mean /= static_cast<double>(errs.size());
  return (baseline - mean) / baseline;
}

inline double consensus_diameter(std::span<const Payload> states) {
  if (states.empty()) return 0.0;
  const std::size_t g = states.front()->size();
  for (const auto& s : states) {
    if (s->size() != g) throw InputError("consensus diameter over estimates of different grids");
  }
  double out = 0.0;
  for (std::size_t k = 0; k < g; ++k) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const auto& s : states) {
      lo = std::min(lo, (*s)[k]);
      hi = std::max(hi, (*s)[k]);
    }
    out = std::max(out, hi - lo);
  }
  return out;
}

inline double consensus_diameter(std::span<const EstimateVector> states) {
  std::vector<Payload> view;
  for (const auto& s : states) {
    if (!states.empty() && s.grid && states.front().grid && !(*s.grid == *states.front().grid)) {
      throw InputError("consensus diameter over estimates of different grids");
    }
    view.push_back(std::make_shared<const std::vector<double>>(s.values));
  }
  return consensus_diameter(view);
}

struct ErrorRow {
  std::size_t worker_events = 0;
  std::size_t consumed = 0;
  std::vector<double> errs;  // per worker
  double mean = 0.0;
  double diameter = 0.0;
};

using ErrorSeries = std::vector<ErrorRow>;

inline ErrorSeries error_series(std::span<const Snapshot> snapshots, std::span<const Observation> test) {
  ErrorSeries out;
  for (const auto& s : snapshots) {
    ErrorRow row;
    row.worker_events = s.worker_events;
    row.consumed = s.consumed;
    for (const auto& e : s.estimates) row.errs.push_back(err(*e, test));
    for (double e : row.errs) row.mean += e;
    row.mean /= static_cast<double>(row.errs.size());
    row.diameter = consensus_diameter(s.estimates);
    out.push_back(std::move(row));
  }
  return out;
}

// Snapshot whose consumed fraction of `total` is closest to `fraction`.
inline std::size_t progress_snapshot(const ErrorSeries& series, std::size_t total, double fraction) {
  if (series.empty()) throw InputError("empty error series");
  std::size_t best = 0;
  double best_gap = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < series.size(); ++k) {
    const double gap = std::abs(static_cast<double>(series[k].consumed) / static_cast<double>(total) - fraction);
    if (gap < best_gap) {
      best_gap = gap;
      best = k;
    }
  }
  return best;
}

struct GainRow {
  std::size_t worker_events = 0;
  std::size_t consumed = 0;
  double baseline_err = 0.0;
  double mean_err = 0.0;
  std::optional<double> gain;
};

struct GainSeries {
  std::string baseline;  // description of the reference run
  std::vector<GainRow> rows;
};

// Pairs each snapshot with the single-node estimate after the same number of
// observations of `baseline_stream`.
inline GainSeries gain_series(const ErrorSeries& series, std::span<const Observation> baseline_stream,
                              const std::shared_ptr<const QueryGrid>& grid, const EstimatorConfig& cfg,
                              std::span<const Observation> test, std::string baseline_name = "M=1") {
  std::vector<std::size_t> counts;
  for (const auto& row : series) counts.push_back(std::min(row.consumed, baseline_stream.size()));
  std::vector<std::size_t> sorted = counts;
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  const auto checkpoints = centralized_checkpoints(baseline_stream, grid, cfg, sorted);
  GainSeries out;
  out.baseline = std::move(baseline_name);
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto pos = static_cast<std::size_t>(std::lower_bound(sorted.begin(), sorted.end(), counts[k]) - sorted.begin());
    GainRow row;
    row.worker_events = series[k].worker_events;
    row.consumed = series[k].consumed;
    row.baseline_err = err(checkpoints[pos].values, test);
    row.mean_err = series[k].mean;
    row.gain = relative_gain(row.baseline_err, series[k].errs);
    out.rows.push_back(row);
  }
  return out;
}

struct GainSummary {
  std::size_t defined = 0;
  double min = 0.0, median = 0.0, max = 0.0, final = 0.0;
};

inline GainSummary summarize_gains(const GainSeries& g) {
  std::vector<double> v;
  for (const auto& r : g.rows) {
    if (r.gain) v.push_back(*r.gain);
  }
  GainSummary s;
  s.defined = v.size();
  if (v.empty()) return s;
  s.final = v.back();
  std::sort(v.begin(), v.end());
  s.min = v.front();
  s.max = v.back();
  s.median = v.size() % 2 ? v[v.size() / 2] : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
  return s;
}

// Per-run work accounting.
struct RunFootprint {
  std::size_t workers = 0;
  std::size_t tau = 0;
  std::size_t observations = 0;
  std::vector<std::size_t> events;  // per worker
  std::vector<std::size_t> work;    // per worker

  static RunFootprint of(const RunResult& r, std::size_t tau) {
    RunFootprint f;
    f.workers = r.workers.size();
    f.tau = tau;
    for (const auto& w : r.workers) {
      f.observations += w.cursor;
      f.events.push_back(1 + w.events());
      f.work.push_back(w.work());
    }
    return f;
  }
};

struct ScalingRow {
  std::size_t workers = 0;
  std::size_t tau = 0;
  std::size_t observations = 0;
  std::size_t total_events = 0;
  std::size_t makespan_events = 0;
  std::size_t makespan_work = 0;
  double optimal = 0.0;  // baseline work / M
  double overhead = 0.0; // makespan_work / optimal
};

using ScalingReport = std::vector<ScalingRow>;

// Makespans count the initial observation as one unit of work per worker.
inline ScalingReport scaling_report(std::span<const RunFootprint> runs, const RunFootprint& baseline) {
  ScalingReport out;
  const std::size_t base_work = baseline.work.at(0);
  for (const auto& r : runs) {
    if (r.observations != baseline.observations) {
      throw InputError("run with M=" + std::to_string(r.workers) + " consumed " + std::to_string(r.observations) +
                       " observations, baseline " + std::to_string(baseline.observations));
    }
    ScalingRow row;
    row.workers = r.workers;
    row.tau = r.tau;
    row.observations = r.observations;
    for (auto e : r.events) row.total_events += e;
    row.makespan_events = *std::max_element(r.events.begin(), r.events.end());
    row.makespan_work = *std::max_element(r.work.begin(), r.work.end());
    row.optimal = static_cast<double>(base_work) / static_cast<double>(r.workers);
    row.overhead = static_cast<double>(row.makespan_work) / row.optimal;
    out.push_back(row);
  }
  return out;
}

// ---------------------------------------------------------------------------
// CSV and summary output
// ---------------------------------------------------------------------------

inline void write_error_series_csv(std::ostream& out, const ErrorSeries& s) {
  const auto old = out.precision(17);
  out << "event_index,consumed,worker,err\n";
  for (const auto& row : s) {
    for (std::size_t i = 0; i < row.errs.size(); ++i) {
      out << row.worker_events << ',' << row.consumed << ',' << i << ',' << row.errs[i] << '\n';
    }
  }
  out.precision(old);
}

inline void write_consensus_csv(std::ostream& out, const ErrorSeries& s) {
  const auto old = out.precision(17);
  out << "event_index,consumed,mean_err,diameter\n";
  for (const auto& row : s) out << row.worker_events << ',' << row.consumed << ',' << row.mean << ',' << row.diameter << '\n';
  out.precision(old);
}

inline void write_gain_series_csv(std::ostream& out, const GainSeries& g) {
  const auto old = out.precision(17);
  out << "event_index,consumed,baseline_err,mean_err,relative_gain\n";
  for (const auto& r : g.rows) {
    out << r.worker_events << ',' << r.consumed << ',' << r.baseline_err << ',' << r.mean_err << ',';
    if (r.gain) out << *r.gain;
    out << '\n';
  }
  out.precision(old);
}

inline void write_scaling_csv(std::ostream& out, const ScalingReport& rep) {
  const auto old = out.precision(17);
  out << "M,tau,observations,total_events,makespan_events,makespan_work,optimal,overhead_ratio\n";
  for (const auto& r : rep) {
    out << r.workers << ',' << r.tau << ',' << r.observations << ',' << r.total_events << ',' << r.makespan_events << ','
        << r.makespan_work << ',' << r.optimal << ',' << r.overhead << '\n';
  }
  out.precision(old);
}

// key=value, one per line.
using Summary = std::vector<std::pair<std::string, std::string>>;

inline void write_summary(std::ostream& out, const Summary& s) {
  for (const auto& [k, v] : s) out << k << '=' << v << '\n';
}

}  // namespace adreg
