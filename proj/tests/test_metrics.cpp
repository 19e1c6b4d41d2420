#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "adreg/metrics.hpp"
#include "adreg/synthetic.hpp"

using namespace adreg;

namespace {
Payload payload(std::vector<double> v) { return std::make_shared<const std::vector<double>>(std::move(v)); }

std::vector<Observation> points(std::vector<double> ys) {
  std::vector<Observation> out;
  for (std::size_t k = 0; k < ys.size(); ++k) out.push_back({{static_cast<double>(k)}, ys[k]});
  return out;
}

EstimatorConfig gaussian_1d() {
  EstimatorConfig cfg;
  cfg.kernel = {KernelKind::gaussian, 1};
  cfg.bandwidth = BandwidthSchedule::default_for(1);
  cfg.step = StepSchedule(1.0, 1.0, StepRule::lower);
  cfg.clamp_gain = true;
  return cfg;
}
}  // namespace

TEST(Err, Examples) {
  const auto test = points({0.0, 0.0});
  EXPECT_NEAR(err(std::vector<double>{0.1, 0.2}, test), 0.05, 1e-15);
  EXPECT_NEAR(err(std::vector<double>{0.5, -0.5}, test), 0.5, 1e-15);
  EXPECT_NEAR(err(std::vector<double>{0.5}, points({0.0})), 0.25, 1e-15);
  EXPECT_THROW(err(std::vector<double>{0.1}, test), InputError);
}

TEST(Err, RejectsForeignGrid) {
  EstimateVector e;
  e.grid = std::make_shared<const QueryGrid>(QueryGrid::from_points({{5.0}, {6.0}}));
  e.values = {0.0, 0.0};
  EXPECT_THROW(err(e, points({0.0, 0.0})), InputError);
}

TEST(Gain, Examples) {
  const std::vector<double> half{0.05, 0.05}, worse{0.102, 0.102};
  EXPECT_NEAR(*relative_gain(0.1, half), 0.5, 1e-15);
  EXPECT_NEAR(*relative_gain(0.1, worse), -0.02, 1e-12);
  EXPECT_FALSE(relative_gain(0.0, half).has_value());
  EXPECT_THROW(relative_gain(1.0, std::vector<double>{}), InputError);
}

TEST(Diameter, Examples) {
  const std::vector<Payload> a{payload({0.1, 0.5}), payload({0.4, 0.5})};
  EXPECT_NEAR(consensus_diameter(a), 0.3, 1e-15);
  const std::vector<Payload> b{payload({0.0, 1.0}), payload({1.0, 1.0}), payload({0.5, 0.0})};
  EXPECT_EQ(consensus_diameter(b), 1.0);
  const std::vector<Payload> single{payload({0.3, 0.7})};
  EXPECT_EQ(consensus_diameter(single), 0.0);
  const std::vector<Payload> bad{payload({0.0}), payload({0.0, 1.0})};
  EXPECT_THROW(consensus_diameter(bad), InputError);
}

// Independent recomputation of gain with long double accumulation.
TEST(Gain, RandomOracle) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int rep = 0; rep < 50; ++rep) {
    const std::size_t g = 1 + rng() % 40, m = 1 + rng() % 8;
    std::vector<Observation> test;
    for (std::size_t k = 0; k < g; ++k) test.push_back({{u(rng)}, u(rng)});
    std::vector<double> base(g);
    for (auto& v : base) v = u(rng);
    std::vector<std::vector<double>> est(m, std::vector<double>(g));
    for (auto& e : est)
      for (auto& v : e) v = u(rng);

    long double e0 = 0;
    for (std::size_t k = 0; k < g; ++k) e0 += (long double)(test[k].y - base[k]) * (test[k].y - base[k]);
    long double mean = 0;
    for (const auto& e : est) {
      long double s = 0;
      for (std::size_t k = 0; k < g; ++k) s += (long double)(test[k].y - e[k]) * (test[k].y - e[k]);
      mean += s / m;
    }
    const double expected = static_cast<double>((e0 - mean) / e0);

    std::vector<double> errs;
    for (const auto& e : est) errs.push_back(err(e, test));
    const auto got = relative_gain(err(base, test), errs);
    ASSERT_TRUE(got.has_value());
    EXPECT_NEAR(*got, expected, 1e-12 * std::max(1.0, std::abs(expected)));
  }
}

TEST(Series, FromSnapshots) {
  const auto test = points({0.0, 1.0});
  std::vector<Snapshot> snaps(2);
  snaps[0] = {2, 2, {payload({0.0, 0.0}), payload({1.0, 1.0})}};
  snaps[1] = {10, 8, {payload({0.0, 1.0}), payload({0.0, 1.0})}};
  const auto s = error_series(snaps, test);
  ASSERT_EQ(s.size(), 2u);
  EXPECT_EQ(s[0].errs, (std::vector<double>{1.0, 1.0}));
  EXPECT_EQ(s[0].diameter, 1.0);
  EXPECT_EQ(s[1].mean, 0.0);
  EXPECT_EQ(s[1].diameter, 0.0);
  EXPECT_EQ(progress_snapshot(s, 20, 0.1), 0u);
  EXPECT_EQ(progress_snapshot(s, 20, 0.5), 1u);

  std::ostringstream csv;
  write_error_series_csv(csv, s);
  EXPECT_EQ(csv.str(), "event_index,consumed,worker,err\n2,2,0,1\n2,2,1,1\n10,8,0,0\n10,8,1,0\n");
}

TEST(Series, GainAgainstSingleNodeRun) {
  const auto ds = generate_dataset(1, DesignKind::uniform, 400, 3);
  auto sharded = shard(ds.observations, 1, 0.2, 3);
  const auto eval = evaluation_set(sharded.test, 40, 3);
  auto cfg = gaussian_1d();
  cfg.kernel.dim = 2;
  cfg.bandwidth = BandwidthSchedule::default_for(2);
  const auto full = centralized_fit(sharded.train_order, eval.grid, cfg);

  // A "distributed" snapshot that equals the baseline has zero gain.
  std::vector<Snapshot> snaps{{1, sharded.train_order.size(), {payload(full.values)}}};
  const auto s = error_series(snaps, eval.points);
  const auto g = gain_series(s, sharded.train_order, eval.grid, cfg, eval.points);
  ASSERT_EQ(g.rows.size(), 1u);
  EXPECT_EQ(*g.rows[0].gain, 0.0);
  EXPECT_EQ(summarize_gains(g).defined, 1u);
}

TEST(Scaling, SingleWorkerRatioOne) {
  RunFootprint base;
  base.workers = 1;
  base.tau = 2;
  base.observations = 100;
  base.events = {199};
  base.work = {199};
  const std::vector<RunFootprint> runs{base};
  const auto rep = scaling_report(runs, base);
  ASSERT_EQ(rep.size(), 1u);
  EXPECT_EQ(rep[0].overhead, 1.0);
  EXPECT_EQ(rep[0].makespan_events, 199u);

  RunFootprint other = base;
  other.workers = 2;
  other.observations = 99;
  other.events = {100, 100};
  other.work = {100, 100};
  const std::vector<RunFootprint> bad{other};
  EXPECT_THROW(scaling_report(bad, base), InputError);
}

TEST(Scaling, FootprintOfRealRun) {
  const auto ds = generate_dataset(1, DesignKind::uniform, 1000, 5);
  auto sharded = shard(ds.observations, 4, 0.2, 5);
  const auto eval = evaluation_set(sharded.test, 20, 5);
  SimulationConfig sim;
  sim.workers = 4;
  sim.tau = 2;
  sim.seed = 5;
  sim.estimator = gaussian_1d();
  sim.estimator.kernel.dim = 2;
  sim.estimator.bandwidth = BandwidthSchedule::default_for(2);
  const auto r = run_simulation(sim, sharded.shards, eval.grid, {});
  const auto f = RunFootprint::of(r, 2);
  EXPECT_EQ(f.observations, sharded.train_order.size());
  ASSERT_EQ(f.events.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_GE(f.work[i], f.events[i]);
}
