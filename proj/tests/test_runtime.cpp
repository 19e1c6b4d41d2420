#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "adreg/runtime.hpp"

using namespace adreg;

namespace {

std::vector<std::vector<Observation>> make_shards(std::size_t m, std::size_t per_shard, std::uint64_t seed,
                                                  std::size_t d = 1) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0), noise(-0.1, 0.1);
  std::vector<std::vector<Observation>> shards(m);
  for (auto& s : shards) {
    for (std::size_t k = 0; k < per_shard; ++k) {
      Point x(d);
      for (auto& v : x) v = u(rng);
      s.push_back({x, std::clamp(std::sin(6.0 * x[0]) * 0.8 + noise(rng), -1.0, 1.0)});
    }
  }
  return shards;
}

std::shared_ptr<const QueryGrid> line_grid(std::size_t n) {
  std::vector<Point> pts;
  for (std::size_t k = 0; k < n; ++k) pts.push_back({(k + 0.5) / n});
  return std::make_shared<const QueryGrid>(QueryGrid::from_points(pts));
}

SimulationConfig sim(std::size_t m, std::size_t tau, std::uint64_t seed) {
  SimulationConfig c;
  c.workers = m;
  c.tau = tau;
  c.seed = seed;
  c.estimator.kernel = {KernelKind::gaussian, 1};
  c.estimator.bandwidth = BandwidthSchedule::default_for(1);
  c.estimator.clamp_gain = true;
  c.snapshot_every = 50;
  return c;
}

std::string trace_text(const RunTrace& t) {
  std::ostringstream out;
  write_trace(out, t);
  return out.str();
}

}  // namespace

TEST(Metronome, Definition) {
  EXPECT_TRUE(metronome_is_computing(2, 3));
  EXPECT_FALSE(metronome_is_computing(2, 4));
  EXPECT_FALSE(metronome_is_computing(9, 9));
  EXPECT_TRUE(metronome_is_computing(9, 10));
  EXPECT_THROW(metronome_is_computing(1, 3), ConfigError);
}

TEST(Queue, HandlesMessagesAndSnapshots) {
  auto payload = std::make_shared<const std::vector<double>>(std::vector<double>{1.0});
  QueueState q(0, {0, 1});
  EXPECT_FALSE(queue_handle_message(q, EstimateMessage{2, 5, payload}).has_value());
  ASSERT_EQ(q.entries().size(), 1u);
  EXPECT_EQ(q.entries().at(2).version, 5u);

  RingSnapshot snap;
  snap.entries[2] = {2, 3, payload};
  snap.entries[3] = {3, 7, payload};
  const auto fwd = queue_handle_message(q, snap);
  ASSERT_TRUE(fwd.has_value());
  EXPECT_EQ(q.entries().at(2).version, 5u);
  EXPECT_EQ(q.entries().at(3).version, 7u);
  EXPECT_EQ(fwd->entries.size(), 2u);

  EXPECT_FALSE(q.accept({2, 5, payload}));
  EXPECT_EQ(q.entries().at(2).version, 5u);
}

TEST(Ring, DeliveryOrderAndValidation) {
  const auto r3 = Ring::cycle(3);
  EXPECT_EQ(r3.delivery_order(0, 4), (std::vector<std::size_t>{1, 2, 0, 1}));
  EXPECT_EQ(Ring::cycle(1).delivery_order(0, 2), (std::vector<std::size_t>{0, 0}));
  EXPECT_NO_THROW(r3.validate());
  EXPECT_THROW((Ring{{1, 0, 2}}).validate(), ConfigError);
  EXPECT_THROW((Ring{{1, 2, 1}}).validate(), ConfigError);
  EXPECT_EQ(ring_bootstrap(5, 42), ring_bootstrap(5, 42));
  EXPECT_EQ(ring_bootstrap(1, 42), 0u);

  QueueState single(0, {0});
  single.accept({0, 2, std::make_shared<const std::vector<double>>(std::vector<double>{0.0})});
  const auto before = single.entries().at(0).version;
  queue_handle_message(single, single.snapshot());
  EXPECT_EQ(single.entries().at(0).version, before);
}

TEST(Worker, ComputeStep) {
  auto grid = line_grid(1);
  const std::vector<Observation> shard{{{0.5}, 0.0}, {{0.5}, 1.0}};
  EstimatorConfig cfg;
  cfg.kernel = {KernelKind::naive, 1};
  cfg.bandwidth = BandwidthSchedule::table({1.0, 1.0});  // eps_2 K = 0.5
  auto w = make_worker(0, 1, shard, grid);
  std::vector<double> step;
  const auto msg = worker_compute_step(w, cfg, step);
  EXPECT_DOUBLE_EQ(w.estimate.values[0], 0.5);
  EXPECT_EQ(msg.version, 2u);
  EXPECT_EQ(w.t, 2u);
  EXPECT_THROW(worker_compute_step(w, cfg, step), InputError);
}

TEST(Worker, ConstantResponseStaysConstant) {
  std::vector<std::vector<Observation>> shards(3);
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (auto& s : shards)
    for (int k = 0; k < 60; ++k) s.push_back({{u(rng)}, 0.4});
  const auto res = run_simulation(sim(3, 2, 1), shards, line_grid(8));
  for (const auto& w : res.workers)
    for (double v : w.estimate.values) EXPECT_DOUBLE_EQ(v, 0.4);
}

TEST(Worker, AverageStep) {
  auto grid = line_grid(2);
  const std::vector<Observation> shard{{{0.5}, 0.0}};
  auto w = make_worker(1, 3, shard, grid);
  worker_average_step(w, {});
  EXPECT_EQ(w.estimate.values, (std::vector<double>{0.0, 0.0}));
  EXPECT_EQ(w.t, 2u);

  const auto ones = std::make_shared<const std::vector<double>>(std::vector<double>{1.0, 1.0});
  const std::vector<EstimateMessage> fresh{{0, 4, ones}};
  worker_average_step(w, fresh);
  EXPECT_EQ(w.estimate.values, (std::vector<double>{0.5, 0.5}));
  EXPECT_EQ(w.used_versions[0], 4u);

  const auto same = std::make_shared<const std::vector<double>>(w.estimate.values);
  const std::vector<EstimateMessage> two{{0, 5, same}, {2, 3, same}};
  worker_average_step(w, two);
  EXPECT_NEAR(w.estimate.values[0], 0.5, 1e-15);
}

TEST(Simulation, SingleWorkerEqualsCentralizedFit) {
  const auto shards = make_shards(1, 500, 3);
  auto grid = line_grid(16);
  for (std::size_t tau : {2u, 5u}) {
    auto cfg = sim(1, tau, 9);
    const auto res = run_simulation(cfg, shards, grid);
    const auto ref = centralized_fit(shards[0], grid, cfg.estimator);
    EXPECT_EQ(res.workers[0].estimate.values, ref.values);
    EXPECT_EQ(res.workers[0].cursor, 500u);
  }
}

TEST(Simulation, DeterministicTraceIsReproducible) {
  const auto shards = make_shards(2, 200, 4);
  auto grid = line_grid(8);
  auto cfg = sim(2, 2, 17);
  cfg.max_delay = 3;
  const auto a = run_simulation(cfg, shards, grid);
  const auto b = run_simulation(cfg, shards, grid);
  EXPECT_EQ(trace_text(a.trace), trace_text(b.trace));
  cfg.seed = 18;
  const auto c = run_simulation(cfg, shards, grid);
  EXPECT_NE(trace_text(a.trace), trace_text(c.trace));
}

TEST(Simulation, LivenessAndSnapshots) {
  const auto shards = make_shards(5, 120, 6);
  auto cfg = sim(5, 3, 2);
  cfg.max_delay = 4;
  const auto res = run_simulation(cfg, shards, line_grid(4));
  for (const auto& w : res.workers) {
    EXPECT_EQ(w.cursor, w.shard.size());
    EXPECT_TRUE(w.terminal);
  }
  ASSERT_FALSE(res.snapshots.empty());
  EXPECT_EQ(res.snapshots.back().worker_events, res.stats.worker_events);
  EXPECT_EQ(res.snapshots.back().consumed, 600u);
  EXPECT_EQ(res.snapshots.front().worker_events, 50u);
  EXPECT_GT(res.stats.ring_hops, 0u);
}

TEST(Simulation, RecordedReplayMatches) {
  for (std::size_t m : {2u, 3u, 4u}) {
    const auto shards = make_shards(m, 150, 10 + m);
    auto cfg = sim(m, 2, 30 + m);
    cfg.max_delay = 2;
    cfg.record_payloads = true;
    const auto res = run_simulation(cfg, shards, line_grid(6));
    const auto report = verify_recorded(res.trace);
    EXPECT_TRUE(report.ok) << report.error << (report.divergence ? report.divergence->to_string() : "");
    EXPECT_EQ(report.events_checked, res.stats.worker_events);
    EXPECT_EQ(report.max_abs_error, 0.0);

    // Batch route: full trajectory from run_linear_model.
    const auto [schedule, log] = trace_to_schedule(res.trace);
    const auto z = run_linear_model(schedule, log);
    std::size_t t = 0;
    for (const auto& r : res.trace.records) {
      if (!is_worker_event(r.kind)) continue;
      ++t;
      const auto& expected = z.at(t + 1, r.actor);
      for (std::size_t k = 0; k < expected.size(); ++k)
        EXPECT_NEAR(expected[k], (*res.trace.values[t - 1])[k], 1e-12);
    }
  }
}

TEST(Simulation, StreamingReplayMatches) {
  const auto shards = make_shards(4, 200, 21);
  auto grid = line_grid(5);
  auto cfg = sim(4, 16, 5);
  cfg.max_delay = 1;
  const auto res = run_simulation(cfg, shards, grid);
  const auto report = verify_replay(res.trace, cfg, shards, grid);
  EXPECT_TRUE(report.ok) << report.error;
  EXPECT_EQ(report.events_checked, res.stats.worker_events);
}

TEST(TraceSchedule, SingleWorker) {
  const auto shards = make_shards(1, 30, 1);
  const auto res = run_simulation(sim(1, 3, 1), shards, line_grid(2));
  const auto s = trace_to_comm_schedule(res.trace);
  for (std::size_t t = 1; t <= s.horizon(); ++t) {
    EXPECT_EQ(s.weight(t, 0, 0), 1.0);
    EXPECT_TRUE(s.computing(t, 0));
  }
}

TEST(TraceSchedule, AveragingRowWeightsAndDelay) {
  RunTrace trace;
  trace.workers = 2;
  trace.queues = 1;
  trace.records = {
      {1, EventKind::compute, 1, 1, {}},
      {2, EventKind::send, 0, 2, {{1, 2}}},
      {3, EventKind::compute, 0, 1, {}},
      {4, EventKind::compute, 1, 2, {}},
      {5, EventKind::average, 0, 2, {{1, 2}}},
  };
  const auto s = trace_to_comm_schedule(trace);
  ASSERT_EQ(s.horizon(), 5u);
  // Worker event instants: 1 (w1), 2 (w0), 3 (w1), 4 (w0 averages).
  EXPECT_EQ(s.weight(4, 0, 0), 0.5);
  EXPECT_EQ(s.weight(4, 0, 1), 0.5);
  EXPECT_EQ(s.delay(4, 0, 1), 3u);  // version 2 of w1 is valid until w1's next event at instant 3
  EXPECT_FALSE(s.computing(4, 0));
  EXPECT_TRUE(s.computing(2, 0));
  EXPECT_EQ(s.weight(2, 0, 1), 0.0);
  const auto r = validate_schedule(s);
  for (const char* id : {"row_sum", "self_weight", "weight_range", "compute_isolated", "zero_weight_delay", "own_current", "delay_bound", "no_idle_instant"}) EXPECT_TRUE(r.passed(id)) << id;
}

TEST(TraceSchedule, FutureVersionIsIntegrityError) {
  RunTrace trace;
  trace.workers = 2;
  trace.queues = 1;
  trace.records = {
      {1, EventKind::average, 0, 1, {{1, 2}}},
      {2, EventKind::compute, 1, 1, {}},
  };
  EXPECT_THROW(trace_to_comm_schedule(trace), IntegrityError);
}

TEST(TraceSchedule, RuntimeSchedulesSatisfyConditions) {
  const auto shards = make_shards(4, 150, 8);
  auto cfg = sim(4, 2, 3);
  cfg.max_delay = 3;
  const auto res = run_simulation(cfg, shards, line_grid(3));
  const auto s = trace_to_comm_schedule(res.trace);
  const auto r = validate_schedule(s);
  for (const char* id : {"row_sum", "self_weight", "weight_range", "compute_isolated", "zero_weight_delay", "own_current", "delay_bound", "no_idle_instant"}) EXPECT_TRUE(r.passed(id)) << id;
  EXPECT_GE(s.declared.alpha, 0.25);
}

TEST(TraceText, RoundTrip) {
  const auto shards = make_shards(3, 40, 2);
  auto cfg = sim(3, 2, 4);
  const auto res = run_simulation(cfg, shards, line_grid(2));
  std::stringstream buf(trace_text(res.trace));
  const auto back = read_trace(buf);
  EXPECT_EQ(back.workers, 3u);
  EXPECT_EQ(back.queues, 2u);
  EXPECT_EQ(back.records, res.trace.records);
  std::stringstream bad("not a trace\n");
  EXPECT_THROW(read_trace(bad), InputError);
}

TEST(Verify, CorruptedVersionIsLocated) {
  const auto shards = make_shards(2, 150, 12);
  auto grid = line_grid(4);
  auto cfg = sim(2, 2, 8);
  const auto res = run_simulation(cfg, shards, grid);
  auto corrupted = res.trace;
  // Point one consumed entry at an older, still produced version.
  bool altered = false;
  for (auto& r : corrupted.records) {
    if (r.kind == EventKind::average && !r.consumed.empty() && r.consumed[0].second > 3 && r.index > 100) {
      r.consumed[0].second -= 2;
      altered = true;
      break;
    }
  }
  ASSERT_TRUE(altered);
  const auto report = verify_replay(corrupted, cfg, shards, grid);
  EXPECT_FALSE(report.ok);
  ASSERT_TRUE(report.divergence.has_value()) << report.error;
  EXPECT_EQ(report.divergence->reason, "value mismatch");
  EXPECT_GT(report.divergence->event_index, 100u);
}

TEST(Concurrent, SoundAndReplayable) {
  const auto shards = make_shards(4, 300, 31);
  auto cfg = sim(4, 2, 11);
  cfg.mode = RunMode::concurrent;
  cfg.record_payloads = true;
  const auto res = run_simulation(cfg, shards, line_grid(4));
  for (const auto& w : res.workers) EXPECT_EQ(w.cursor, w.shard.size());
  EXPECT_EQ(res.stats.write_conflicts, 0u);
  EXPECT_GT(res.stats.entry_writes, 0u);
  const auto report = verify_recorded(res.trace);
  EXPECT_TRUE(report.ok) << report.error << (report.divergence ? report.divergence->to_string() : "");
  EXPECT_FALSE(res.snapshots.empty());
  EXPECT_EQ(res.snapshots.back().consumed, 1200u);
}

TEST(Simulation, RejectsInvalidConfig) {
  const auto shards = make_shards(2, 10, 1);
  auto cfg = sim(2, 2, 1);
  cfg.tau = 1;
  EXPECT_THROW(run_simulation(cfg, shards, line_grid(2)), ConfigError);
  cfg = sim(3, 2, 1);
  EXPECT_THROW(run_simulation(cfg, shards, line_grid(2)), InputError);
}
