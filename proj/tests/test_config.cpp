#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "adreg/experiment.hpp"

using namespace adreg;

namespace {
EstimatorConfig power_law(KernelKind kind, std::size_t d, double beta, double c = 1.0) {
  EstimatorConfig e;
  e.kernel = {kind, d};
  e.bandwidth = BandwidthSchedule::power_law(-beta);
  e.step = StepSchedule(c, c, StepRule::lower);
  return e;
}

RunConfig small(std::size_t m) {
  RunConfig c;
  c.workers = m;
  c.n = 3000;
  c.seed = 5;
  c.grid_cap = 100;
  c.snapshot_every = 200;
  return c;
}
}  // namespace

TEST(Config, RoundTrip) {
  RunConfig c;
  c.workers = 7;
  c.tau = TauSpec::parse("M2");
  c.model = 3;
  c.design = DesignKind::gaussian;
  c.bandwidth_exponent = -0.123456789012345678;
  c.bandwidth_clock = BandwidthClock::local;
  c.c1 = 0.5;
  c.c2 = 2.0;
  c.step_rule = StepRule::midpoint;
  c.mode = RunMode::concurrent;
  c.clamp_gain = false;
  c.test_fraction = 0.3;
  const auto text = serialize_config(c);
  const auto back = parse_config_text(text);
  EXPECT_EQ(back, c);
  EXPECT_EQ(serialize_config(back), text);
  EXPECT_EQ(parse_config_text(serialize_config(RunConfig{})), RunConfig{});
}

TEST(Config, CommentsAndErrorsNameTheField) {
  const auto c = parse_config_text("# comment\nM = 3  # trailing\n\nseed=9\n");
  EXPECT_EQ(c.workers, 3u);
  EXPECT_EQ(c.seed, 9u);
  auto field_of = [](const std::string& text) {
    try {
      validate_config(parse_config_text(text));
    } catch (const ConfigError& e) {
      return e.field();
    }
    return std::string("none");
  };
  EXPECT_EQ(field_of("M=0"), "M");
  EXPECT_EQ(field_of("tau=1"), "tau");
  EXPECT_EQ(field_of("tau=x"), "tau");
  EXPECT_EQ(field_of("bogus=1"), "bogus");
  EXPECT_EQ(field_of("model=4"), "model");
  EXPECT_EQ(field_of("M=100\nn=50"), "n");
  EXPECT_EQ(field_of("C1=2\nC2=1"), "C2");
  EXPECT_EQ(field_of("kernel=box"), "kernel");
  EXPECT_EQ(field_of("M=-1"), "M");
  EXPECT_EQ(field_of("M=2"), "none");
}

TEST(Config, TauExpansion) {
  EXPECT_EQ(TauSpec::parse("M2").resolve(1), 2u);
  EXPECT_EQ(TauSpec::parse("M2").resolve(3), 9u);
  EXPECT_EQ(TauSpec::parse("5").resolve(3), 5u);
  RunConfig c;
  c.workers = 3;
  c.tau = TauSpec::parse("M2");
  EXPECT_EQ(simulation_config(c).tau, 9u);
}

TEST(Config, EstimatorFromRunConfig) {
  RunConfig c;
  c.model = 2;
  c.workers = 8;
  const auto e = estimator_config(c);
  EXPECT_EQ(e.kernel.dim, 4u);
  EXPECT_DOUBLE_EQ(*e.bandwidth.exponent(), -0.5);
  EXPECT_EQ(e.clock_scale, 8u);
  EXPECT_DOUBLE_EQ(e.bandwidth_for(10), std::pow(80.0, -0.5));
  EXPECT_EQ(e.bandwidth_for(1), 1.0);
  c.bandwidth_clock = BandwidthClock::local;
  EXPECT_EQ(estimator_config(c).clock_scale, 1u);
}

TEST(Theorem, OneDimensionNaiveHolds) {
  const auto r = validate_theorem_conditions(power_law(KernelKind::naive, 1, 0.2), DesignSpec(DesignKind::uniform, 1));
  for (const char* id : {"envelope", "gain", "monotone", "summable"}) {
    EXPECT_EQ(r.get(id).verdict, Verdict::holds) << id;
  }
  EXPECT_EQ(r.get("kernel_mass").verdict, Verdict::unverifiable);
  EXPECT_NE(r.get("kernel_mass").arithmetic.find("Monte Carlo"), std::string::npos);
  EXPECT_TRUE(r.probes_agree());
  EXPECT_FALSE(r.any_fails());
}

TEST(Theorem, TwoDimensionGaussianSummabilityFails) {
  const auto r = validate_theorem_conditions(power_law(KernelKind::gaussian, 2, 1.0 / 3.0));
  EXPECT_EQ(r.get("summable").verdict, Verdict::fails);
  EXPECT_EQ(r.get("monotone").verdict, Verdict::holds);
  EXPECT_EQ(r.get("gain").verdict, Verdict::holds);
  EXPECT_NE(r.get("summable").arithmetic.find("0.666666"), std::string::npos);
  EXPECT_TRUE(r.probes_agree());
}

TEST(Theorem, FourDimensionGaussianGainFails) {
  const auto r = validate_theorem_conditions(power_law(KernelKind::gaussian, 4, 0.5));
  EXPECT_EQ(r.get("gain").verdict, Verdict::fails);
  ASSERT_TRUE(r.get("gain").probe.has_value());
  EXPECT_EQ(r.get("gain").probe->verdict, Verdict::fails);
  EXPECT_TRUE(r.probes_agree());
}

TEST(Theorem, ProbesAgreeAcrossExponents) {
  for (std::size_t d : {1u, 2u, 3u}) {
    for (double beta : {0.05, 0.2, 0.3, 0.45, 0.8}) {
      for (auto kind : {KernelKind::gaussian, KernelKind::naive}) {
        const auto r = validate_theorem_conditions(power_law(kind, d, beta), {}, 1, 100000);
        EXPECT_TRUE(r.probes_agree()) << "d=" << d << " beta=" << beta << "\n" << r.to_string();
      }
    }
  }
}

TEST(Theorem, TableScheduleIsNumericOnly) {
  std::vector<double> h;
  for (std::size_t t = 1; t <= 5000; ++t) h.push_back(std::pow(static_cast<double>(t), -0.2));
  EstimatorConfig e = power_law(KernelKind::naive, 1, 0.2);
  e.bandwidth = BandwidthSchedule::table(h);
  const auto r = validate_theorem_conditions(e);
  EXPECT_EQ(r.get("gain").verdict, Verdict::unverifiable);
  EXPECT_EQ(r.get("gain").probe->verdict, Verdict::holds);
  EXPECT_EQ(r.get("gain").probe->limit, 5000u);
  EXPECT_EQ(r.get("monotone").probe->verdict, Verdict::holds);
}

TEST(Experiment, RunIsDeterministicAndVerifies) {
  const auto dir = std::filesystem::temp_directory_path() / "adreg_config_test";
  std::filesystem::remove_all(dir);
  std::ostringstream log;
  auto c = small(3);
  ASSERT_EQ(cmd_run(c, dir / "a", log), exit_ok);
  ASSERT_EQ(cmd_run(c, dir / "b", log), exit_ok);
  for (const char* f : {"error_series.csv", "gain_series.csv", "consensus.csv", "trace.txt", "summary.txt"}) {
    std::ifstream a(dir / "a" / f), b(dir / "b" / f);
    std::stringstream sa, sb;
    sa << a.rdbuf();
    sb << b.rdbuf();
    EXPECT_FALSE(sa.str().empty()) << f;
    EXPECT_EQ(sa.str(), sb.str()) << f;
  }
  std::ifstream cfg(dir / "a" / "config.txt");
  EXPECT_EQ(parse_config(cfg), c);
  std::ostringstream vlog;
  EXPECT_EQ(cmd_verify(dir / "a" / "trace.txt", c, vlog), exit_ok) << vlog.str();
  EXPECT_NE(vlog.str().find("verify: PASS"), std::string::npos);

  // One altered version field must be caught.
  std::ifstream tin(dir / "a" / "trace.txt");
  auto trace = read_trace(tin);
  for (auto& r : trace.records) {
    if (r.kind == EventKind::average && !r.consumed.empty() && r.consumed[0].second > 1) {
      --r.consumed[0].second;
      break;
    }
  }
  {
    std::ofstream tout(dir / "bad_trace.txt");
    write_trace(tout, trace);
  }
  std::ostringstream blog;
  EXPECT_EQ(cmd_verify(dir / "bad_trace.txt", c, blog), exit_failure);
  EXPECT_NE(blog.str().find("replay: FAIL"), std::string::npos) << blog.str();
  std::filesystem::remove_all(dir);
}

TEST(Experiment, SingleWorkerTraceVerifies) {
  auto c = small(1);
  const auto data = prepare_data(c);
  const auto x = run_experiment(c, data, false);
  const auto rep = verify_trace(x.result.trace, c);
  EXPECT_TRUE(rep.ok);
  EXPECT_EQ(rep.realized.alpha, 1.0);
}

TEST(Sweep, RunCountAndScalingRows) {
  auto c = small(1);
  c.n = 2000;
  const auto r = sweep(c, {1, 2, 4}, {TauSpec::parse("2")});
  ASSERT_EQ(r.scaling.size(), 3u);
  EXPECT_EQ(r.scaling[0].workers, 1u);
  EXPECT_DOUBLE_EQ(r.scaling[0].overhead, 1.0);
  for (const auto& row : r.scaling) EXPECT_GE(row.overhead, 1.0);
  EXPECT_EQ(r.gains.size(), 3u);

  const auto sq = sweep(c, {2, 3}, {TauSpec::parse("2"), TauSpec::parse("M2")});
  ASSERT_EQ(sq.scaling.size(), 4u);
  EXPECT_EQ(sq.scaling[1].tau, 4u);
  EXPECT_EQ(sq.scaling[3].tau, 9u);
  EXPECT_THROW(sweep(c, {}, {TauSpec{}}), ConfigError);
}
