#pragma once

// Experiment orchestration behind the command-line tool.

#include <filesystem>
#include <fstream>
#include <future>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "adreg/agreement.hpp"
#include "adreg/config.hpp"
#include "adreg/metrics.hpp"
#include "adreg/runtime.hpp"
#include "adreg/synthetic.hpp"

namespace adreg {

enum ExitCode { exit_ok = 0, exit_validation = 1, exit_failure = 2 };

struct PreparedData {
  Dataset dataset;
  ShardedDataset sharded;
  EvaluationSet eval;
};

inline PreparedData prepare_data(const RunConfig& c) {
  validate_config(c);
  PreparedData p;
  p.dataset = generate_dataset(c.model, c.design, c.n, c.seed);
  try {
    p.sharded = shard(p.dataset.observations, c.workers, c.test_fraction, c.seed);
  } catch (const InputError& e) {
    throw ConfigError("n", std::string(e.what()) + " (after dropping " + std::to_string(p.dataset.dropped) +
                               " observations with |y| > 1)");
  }
  if (c.grid_source == GridSource::file) {
    std::ifstream in(c.grid_file);
    if (!in) throw ConfigError("grid_file", "cannot open '" + c.grid_file + "'");
    const auto pts = read_csv(in);
    if (pts.empty()) throw ConfigError("grid_file", "no points");
    if (pts.front().x.size() != c.dim()) throw ConfigError("grid_file", "point dimension does not match the model");
    p.eval = evaluation_set(pts, c.grid_cap, c.seed);
  } else {
    p.eval = evaluation_set(p.sharded.test, c.grid_cap, c.seed);
  }
  return p;
}

struct Experiment {
  RunConfig config;
  SimulationConfig sim;
  RunResult result;
  ErrorSeries errors;
  GainSeries gains;
  RunFootprint footprint;
};

// Runs the distributed estimator and pairs every snapshot with the single-node
// estimate on the interleaved training stream.
inline Experiment run_experiment(const RunConfig& c, const PreparedData& data, bool with_gain = true) {
  Experiment x;
  x.config = c;
  x.sim = simulation_config(c);
  x.result = run_simulation(x.sim, data.sharded.shards, data.eval.grid, {});
  x.errors = error_series(x.result.snapshots, data.eval.points);
  if (with_gain) {
    auto single = x.sim.estimator;
    single.clock_scale = 1;
    x.gains = gain_series(x.errors, data.sharded.train_order, data.eval.grid, single, data.eval.points,
                          "single node, interleaved training stream");
  }
  x.footprint = RunFootprint::of(x.result, x.sim.tau);
  return x;
}

inline Summary summarize(const Experiment& x, const PreparedData& data) {
  using detail::format_double;
  Summary s;
  auto add = [&](std::string k, std::string v) { s.emplace_back(std::move(k), std::move(v)); };
  add("M", std::to_string(x.sim.workers));
  add("tau", std::to_string(x.sim.tau));
  add("model", std::to_string(x.config.model));
  add("design", std::string(to_string(x.config.design)));
  add("n", std::to_string(x.config.n));
  add("dropped", std::to_string(data.dataset.dropped));
  add("n_train", std::to_string(data.sharded.train_order.size()));
  add("n_test", std::to_string(data.sharded.test.size()));
  add("grid_points", std::to_string(data.eval.grid->size()));
  add("mode", std::string(to_string(x.sim.mode)));
  const auto& st = x.result.stats;
  add("worker_events", std::to_string(st.worker_events));
  add("messages_sent", std::to_string(st.messages_sent));
  add("messages_dropped", std::to_string(st.messages_dropped));
  add("ring_hops", std::to_string(st.ring_hops));
  add("write_conflicts", std::to_string(st.write_conflicts));
  add("max_abs_estimate", format_double(st.max_abs_estimate));
  add("out_of_unit_range", std::to_string(st.out_of_unit_range));
  if (!x.errors.empty()) {
    const auto total = data.sharded.train_order.size();
    const auto& p = x.errors[progress_snapshot(x.errors, total, 0.1)];
    const auto& f = x.errors.back();
    add("snapshots", std::to_string(x.errors.size()));
    add("progress_consumed", std::to_string(p.consumed));
    add("progress_mean_err", format_double(p.mean));
    add("progress_diameter", format_double(p.diameter));
    add("final_mean_err", format_double(f.mean));
    add("final_diameter", format_double(f.diameter));
  }
  if (!x.gains.rows.empty()) {
    const auto g = summarize_gains(x.gains);
    add("baseline_final_err", format_double(x.gains.rows.back().baseline_err));
    add("final_relative_gain", x.gains.rows.back().gain ? format_double(*x.gains.rows.back().gain) : "undefined");
    add("relative_gain_min", format_double(g.min));
    add("relative_gain_median", format_double(g.median));
    add("relative_gain_max", format_double(g.max));
  }
  const auto work = x.footprint.work, events = x.footprint.events;
  add("makespan_events", std::to_string(*std::max_element(events.begin(), events.end())));
  add("makespan_work", std::to_string(*std::max_element(work.begin(), work.end())));
  if (x.sim.mode == RunMode::concurrent) add("wall_seconds", format_double(st.wall_seconds));
  return s;
}

namespace detail {

inline void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  out << text;
}

template <class F>
std::string render(F&& f) {
  std::ostringstream out;
  f(out);
  return out.str();
}

}  // namespace detail

// run: data, simulation, CSV series, trace, summary.
inline int cmd_run(const RunConfig& c, const std::filesystem::path& out_dir, std::ostream& log) {
  validate_config(c);
  const auto theorem = validate_theorem_conditions(c);
  for (const auto& h : theorem.hypotheses) {
    if (h.verdict == Verdict::fails) log << "warning: condition '" << h.id << "' fails: " << h.arithmetic << '\n';
  }
  const auto data = prepare_data(c);
  const auto x = run_experiment(c, data);

  std::filesystem::create_directories(out_dir);
  detail::write_file(out_dir / "config.txt", serialize_config(c));
  detail::write_file(out_dir / "trace.txt", detail::render([&](std::ostream& o) { write_trace(o, x.result.trace); }));
  detail::write_file(out_dir / "error_series.csv", detail::render([&](std::ostream& o) { write_error_series_csv(o, x.errors); }));
  detail::write_file(out_dir / "consensus.csv", detail::render([&](std::ostream& o) { write_consensus_csv(o, x.errors); }));
  detail::write_file(out_dir / "gain_series.csv", detail::render([&](std::ostream& o) { write_gain_series_csv(o, x.gains); }));
  const auto summary = summarize(x, data);
  detail::write_file(out_dir / "summary.txt", detail::render([&](std::ostream& o) { write_summary(o, summary); }));
  detail::write_file(out_dir / "theorem.txt", theorem.to_string());
  write_summary(log, summary);
  if (x.result.stats.write_conflicts != 0) {
    log << "error: " << x.result.stats.write_conflicts << " concurrent queue writes detected\n";
    return exit_failure;
  }
  return exit_ok;
}

struct VerifyReport {
  bool ok = false;
  ReplayReport replay;
  ValidationReport validation;
  RealizedConstants realized;
  std::size_t horizon = 0;
  PhiTable phi;
  std::vector<std::string> phi_failures;
};

// Replays the trace through the linear model and checks the derived schedule.
inline VerifyReport verify_trace(const RunTrace& trace, const RunConfig& c) {
  VerifyReport rep;
  if (c.mode != RunMode::deterministic) {
    rep.replay.error = "traces from concurrent runs carry no payloads here; verify needs a deterministic run";
    return rep;
  }
  const auto data = prepare_data(c);
  const auto sim = simulation_config(c);
  rep.replay = verify_replay(trace, sim, data.sharded.shards, data.eval.grid);

  CommSchedule s = [&] {
    try {
      return trace_to_comm_schedule(trace);
    } catch (const IntegrityError& e) {
      if (rep.replay.error.empty()) rep.replay.error = e.what();
      rep.replay.ok = false;
      return CommSchedule(trace.workers, 1);
    }
  }();
  if (!rep.replay.ok) return rep;
  rep.horizon = s.horizon();
  rep.realized = measure_constants(s);
  rep.validation = validate_schedule(s);
  rep.phi = phi_coefficients(s);
  auto need = [&](bool cond, const std::string& what) {
    if (!cond) rep.phi_failures.push_back(what);
  };
  need(rep.phi.min_phi >= -1e-12, "negative coefficient " + detail::format_double(rep.phi.min_phi));
  need(rep.phi.min_row_sum >= -1e-10 && rep.phi.max_row_sum <= 1.0 + 1e-10, "row sums outside [0, 1]");
  need(rep.phi.max_initial_row_error <= 1e-10, "initial rows do not sum to one");
  if (trace.workers > 1) {
    need(rep.phi.fit.ok && rep.phi.fit.slope < 0.0, "spread does not decay geometrically");
    need(rep.phi.eta_lower > 0.0, "no positive lower bound on limit coefficients");
  }
  rep.ok = rep.replay.ok && rep.validation.all_passed() && rep.phi_failures.empty();
  return rep;
}

inline int cmd_verify(const std::filesystem::path& trace_file, const RunConfig& c, std::ostream& log) {
  std::ifstream in(trace_file);
  if (!in) throw InputError("cannot open trace " + trace_file.string());
  const auto trace = read_trace(in);
  const auto rep = verify_trace(trace, c);
  if (!rep.replay.ok) {
    log << "replay: FAIL";
    if (rep.replay.divergence) log << " " << rep.replay.divergence->to_string();
    if (!rep.replay.error.empty()) log << " " << rep.replay.error;
    log << '\n';
    return exit_failure;
  }
  log << "replay: PASS (" << rep.replay.events_checked << " events, max error " << rep.replay.max_abs_error << ")\n";
  log << "horizon=" << rep.horizon << " alpha=" << rep.realized.alpha << " B1=" << rep.realized.b1
      << " B2=" << rep.realized.b2 << '\n';
  log << rep.validation.to_string();
  log << "phi: A=" << rep.phi.fit.amplitude << " rho=" << rep.phi.fit.rho << " eta_lower=" << rep.phi.eta_lower
      << " min=" << rep.phi.min_phi << " row sums in [" << rep.phi.min_row_sum << ", " << rep.phi.max_row_sum << "]\n";
  for (const auto& f : rep.phi_failures) log << "phi: FAIL " << f << '\n';
  log << (rep.ok ? "verify: PASS\n" : "verify: FAIL\n");
  return rep.ok ? exit_ok : exit_failure;
}

struct SweepResult {
  ScalingReport scaling;
  std::vector<std::pair<std::pair<std::size_t, std::size_t>, GainSummary>> gains;  // ((M, tau), summary)
};

// Baseline M=1 (tau=2) once, then every (M, tau) cell on the same data seed.
inline SweepResult sweep(const RunConfig& base, const std::vector<std::size_t>& ms, const std::vector<TauSpec>& taus,
                         std::size_t jobs = 1, std::ostream* log = nullptr) {
  if (ms.empty()) throw ConfigError("M", "sweep needs at least one M");
  if (taus.empty()) throw ConfigError("tau", "sweep needs at least one tau");
  std::vector<RunConfig> cells;
  std::vector<std::pair<std::size_t, std::size_t>> seen;
  for (auto m : ms) {
    for (const auto& t : taus) {
      RunConfig c = base;
      c.workers = m;
      c.tau = {false, t.resolve(m)};
      validate_config(c);
      const std::pair key{m, c.tau.value};
      if (std::find(seen.begin(), seen.end(), key) != seen.end()) continue;
      seen.push_back(key);
      cells.push_back(c);
    }
  }
  RunConfig bc = base;
  bc.workers = 1;
  bc.tau = {false, 2};

  auto one = [](const RunConfig& c) {
    const auto data = prepare_data(c);
    auto x = run_experiment(c, data);
    return std::make_pair(x.footprint, summarize_gains(x.gains));
  };
  std::map<std::pair<std::size_t, std::size_t>, std::pair<RunFootprint, GainSummary>> done;
  done.emplace(std::pair<std::size_t, std::size_t>{1, 2}, one(bc));
  if (log) *log << "baseline M=1 tau=2 done\n";
  for (std::size_t k = 0; k < cells.size();) {
    std::vector<std::future<std::pair<RunFootprint, GainSummary>>> batch;
    std::vector<std::pair<std::size_t, std::size_t>> keys;
    for (; k < cells.size() && batch.size() < std::max<std::size_t>(1, jobs); ++k) {
      const std::pair key{cells[k].workers, cells[k].tau.value};
      if (done.count(key)) continue;
      keys.push_back(key);
      batch.push_back(std::async(jobs > 1 ? std::launch::async : std::launch::deferred, one, cells[k]));
    }
    for (std::size_t b = 0; b < batch.size(); ++b) {
      done.emplace(keys[b], batch[b].get());
      if (log) *log << "M=" << keys[b].first << " tau=" << keys[b].second << " done\n";
    }
  }
  SweepResult out;
  std::vector<RunFootprint> runs;
  for (const auto& key : seen) {
    runs.push_back(done.at(key).first);
    out.gains.emplace_back(key, done.at(key).second);
  }
  out.scaling = scaling_report(runs, done.at({1, 2}).first);
  return out;
}

inline int cmd_sweep(const RunConfig& base, const std::vector<std::size_t>& ms, const std::vector<TauSpec>& taus,
                     std::size_t jobs, const std::filesystem::path& out_dir, std::ostream& log) {
  const auto r = sweep(base, ms, taus, jobs, &log);
  std::filesystem::create_directories(out_dir);
  detail::write_file(out_dir / "config.txt", serialize_config(base));
  const auto scaling = detail::render([&](std::ostream& o) { write_scaling_csv(o, r.scaling); });
  detail::write_file(out_dir / "scaling.csv", scaling);
  const auto gains = detail::render([&](std::ostream& o) {
    o << "M,tau,snapshots_with_gain,final,min,median,max\n";
    for (const auto& [key, g] : r.gains) {
      o << key.first << ',' << key.second << ',' << g.defined << ',' << detail::format_double(g.final) << ','
        << detail::format_double(g.min) << ',' << detail::format_double(g.median) << ',' << detail::format_double(g.max)
        << '\n';
    }
  });
  detail::write_file(out_dir / "gain_summary.csv", gains);
  log << scaling << gains;
  return exit_ok;
}

inline int cmd_validate(const EstimatorConfig& e, const std::optional<DesignSpec>& design, std::uint64_t seed,
                        std::ostream& log) {
  const auto rep = validate_theorem_conditions(e, design, seed);
  log << rep.to_string();
  if (!rep.probes_agree()) {
    log << "numeric probes disagree with the closed-form verdicts\n";
    return exit_failure;
  }
  return rep.any_fails() ? exit_validation : exit_ok;
}

inline int cmd_gen_data(const RunConfig& c, const std::filesystem::path& out_dir, std::ostream& log) {
  const auto data = prepare_data(c);
  std::filesystem::create_directories(out_dir);
  detail::write_file(out_dir / "train.csv", detail::render([&](std::ostream& o) { write_csv(o, data.sharded.train_order); }));
  detail::write_file(out_dir / "test.csv", detail::render([&](std::ostream& o) { write_csv(o, data.sharded.test); }));
  for (std::size_t i = 0; i < data.sharded.shards.size(); ++i) {
    detail::write_file(out_dir / ("shard_" + std::to_string(i) + ".csv"),
                       detail::render([&](std::ostream& o) { write_csv(o, data.sharded.shards[i]); }));
  }
  log << "generated " << c.n << ", dropped " << data.dataset.dropped << ", train " << data.sharded.train_order.size()
      << ", test " << data.sharded.test.size() << '\n';
  return exit_ok;
}

}  // namespace adreg
