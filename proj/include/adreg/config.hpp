#pragma once

// Run configuration (key=value text) and the convergence-condition report.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "adreg/error.hpp"
#include "adreg/estimator.hpp"
#include "adreg/runtime.hpp"
#include "adreg/synthetic.hpp"

namespace adreg {

// Metronome period: a fixed value, or M^2 (at least 2) resolved per run.
struct TauSpec {
  bool square = false;
  std::size_t value = 2;

  std::size_t resolve(std::size_t workers) const { return square ? std::max<std::size_t>(2, workers * workers) : value; }
  std::string to_string() const { return square ? "M2" : std::to_string(value); }

  static TauSpec parse(const std::string& text) {
    if (text == "M2" || text == "M^2") return {true, 0};
    std::size_t pos = 0;
    unsigned long v = 0;
    try {
      v = std::stoul(text, &pos);
    } catch (const std::exception&) {
      throw ConfigError("tau", "expected an integer or M2, got '" + text + "'");
    }
    if (pos != text.size()) throw ConfigError("tau", "expected an integer or M2, got '" + text + "'");
    return {false, v};
  }

  bool operator==(const TauSpec&) const = default;
};

enum class GridSource { test_points, file };

// Index of the bandwidth used by a worker's step: its own observation count,
// or M times it (the network-wide count for balanced shards).
enum class BandwidthClock { network, local };

struct RunConfig {
  std::size_t workers = 4;  // M
  TauSpec tau;
  int model = 1;
  DesignKind design = DesignKind::uniform;
  std::size_t n = 100000;
  std::uint64_t seed = 1;
  KernelKind kernel = KernelKind::gaussian;
  std::optional<double> bandwidth_exponent;  // default -d/(d+4)
  BandwidthClock bandwidth_clock = BandwidthClock::network;
  double c1 = 1.0;
  double c2 = 1.0;
  StepRule step_rule = StepRule::lower;
  std::size_t snapshot_every = 1000;
  std::size_t snapshot_ms = 0;
  RunMode mode = RunMode::deterministic;
  std::size_t max_delay = 3;  // B1, scheduler ticks
  bool clamp_gain = true;
  GridSource grid_source = GridSource::test_points;
  std::string grid_file;
  std::size_t grid_cap = 2000;
  double test_fraction = 0.2;

  std::size_t dim() const { return model_dimension(model); }
  double exponent() const {
    const double d = static_cast<double>(dim());
    return bandwidth_exponent.value_or(-d / (d + 4.0));
  }

  bool operator==(const RunConfig&) const = default;
};

namespace detail {

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <class T>
T parse_number(const std::string& field, const std::string& text) {
  std::istringstream in(text);
  T v{};
  in >> v;
  if (in.fail() || !(in >> std::ws).eof()) throw ConfigError(field, "cannot parse '" + text + "'");
  if constexpr (std::is_unsigned_v<T>) {
    if (!text.empty() && text.front() == '-') throw ConfigError(field, "must not be negative");
  }
  return v;
}

inline bool parse_bool(const std::string& field, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  throw ConfigError(field, "expected true or false, got '" + text + "'");
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

template <class F>
auto as_field(const std::string& field, F&& f) {
  try {
    return f();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(field, e.what());
  }
}

}  // namespace detail

// Applies one key=value setting; unknown keys are errors.
inline void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value) {
  using detail::parse_number;
  if (key == "M") cfg.workers = parse_number<std::size_t>(key, value);
  else if (key == "tau") cfg.tau = TauSpec::parse(value);
  else if (key == "model") cfg.model = parse_number<int>(key, value);
  else if (key == "design") cfg.design = detail::as_field(key, [&] { return parse_design_kind(value); });
  else if (key == "n") cfg.n = parse_number<std::size_t>(key, value);
  else if (key == "seed") cfg.seed = parse_number<std::uint64_t>(key, value);
  else if (key == "kernel") cfg.kernel = detail::as_field(key, [&] { return parse_kernel_kind(value); });
  else if (key == "bandwidth_exponent") {
    if (value == "default") cfg.bandwidth_exponent.reset();
    else cfg.bandwidth_exponent = parse_number<double>(key, value);
  } else if (key == "bandwidth_clock") {
    if (value == "network") cfg.bandwidth_clock = BandwidthClock::network;
    else if (value == "local") cfg.bandwidth_clock = BandwidthClock::local;
    else throw ConfigError(key, "expected network or local, got '" + value + "'");
  } else if (key == "C1") cfg.c1 = parse_number<double>(key, value);
  else if (key == "C2") cfg.c2 = parse_number<double>(key, value);
  else if (key == "step_rule") cfg.step_rule = detail::as_field(key, [&] { return parse_step_rule(value); });
  else if (key == "snapshot_every") cfg.snapshot_every = parse_number<std::size_t>(key, value);
  else if (key == "snapshot_ms") cfg.snapshot_ms = parse_number<std::size_t>(key, value);
  else if (key == "mode") cfg.mode = parse_run_mode(value);
  else if (key == "B1") cfg.max_delay = parse_number<std::size_t>(key, value);
  else if (key == "clamp_gain") cfg.clamp_gain = detail::parse_bool(key, value);
  else if (key == "grid_source") {
    if (value == "test_points") cfg.grid_source = GridSource::test_points;
    else if (value == "file") cfg.grid_source = GridSource::file;
    else throw ConfigError(key, "expected test_points or file, got '" + value + "'");
  } else if (key == "grid_file") cfg.grid_file = value;
  else if (key == "grid_cap") cfg.grid_cap = parse_number<std::size_t>(key, value);
  else if (key == "test_fraction") cfg.test_fraction = parse_number<double>(key, value);
  else throw ConfigError(key, "unknown setting");
}

inline RunConfig parse_config(std::istream& in, RunConfig cfg = {}) {
  std::string line;
  while (std::getline(in, line)) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(line, "expected key=value");
    apply_setting(cfg, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  return cfg;
}

inline RunConfig parse_config_text(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in);
}

inline void serialize_config(std::ostream& out, const RunConfig& c) {
  out << "M=" << c.workers << '\n'
      << "tau=" << c.tau.to_string() << '\n'
      << "model=" << c.model << '\n'
      << "design=" << to_string(c.design) << '\n'
      << "n=" << c.n << '\n'
      << "seed=" << c.seed << '\n'
      << "kernel=" << to_string(c.kernel) << '\n'
      << "bandwidth_exponent=" << (c.bandwidth_exponent ? detail::format_double(*c.bandwidth_exponent) : "default") << '\n'
      << "bandwidth_clock=" << (c.bandwidth_clock == BandwidthClock::network ? "network" : "local") << '\n'
      << "C1=" << detail::format_double(c.c1) << '\n'
      << "C2=" << detail::format_double(c.c2) << '\n'
      << "step_rule=" << to_string(c.step_rule) << '\n'
      << "snapshot_every=" << c.snapshot_every << '\n'
      << "snapshot_ms=" << c.snapshot_ms << '\n'
      << "mode=" << to_string(c.mode) << '\n'
      << "B1=" << c.max_delay << '\n'
      << "clamp_gain=" << (c.clamp_gain ? "true" : "false") << '\n'
      << "grid_source=" << (c.grid_source == GridSource::file ? "file" : "test_points") << '\n';
  if (!c.grid_file.empty()) out << "grid_file=" << c.grid_file << '\n';
  out << "grid_cap=" << c.grid_cap << '\n' << "test_fraction=" << detail::format_double(c.test_fraction) << '\n';
}

inline std::string serialize_config(const RunConfig& c) {
  std::ostringstream out;
  serialize_config(out, c);
  return out.str();
}

// Everything checkable before data is generated.
inline void validate_config(const RunConfig& c) {
  if (c.workers < 1) throw ConfigError("M", "at least one worker is required");
  if (!c.tau.square && c.tau.value < 2) throw ConfigError("tau", "metronome period must be at least 2");
  if (c.model < 1 || c.model > 3) throw ConfigError("model", "must be 1, 2 or 3");
  if (!(c.test_fraction > 0.0 && c.test_fraction < 1.0)) throw ConfigError("test_fraction", "must lie in (0, 1)");
  const auto n_train = c.n - static_cast<std::size_t>(std::llround(c.test_fraction * static_cast<double>(c.n)));
  if (c.n < 2 || n_train < c.workers) {
    throw ConfigError("n", "n = " + std::to_string(c.n) + " leaves fewer training observations than M = " +
                               std::to_string(c.workers));
  }
  if (!(c.c1 > 0.0)) throw ConfigError("C1", "must be positive");
  if (!(c.c2 >= c.c1)) throw ConfigError("C2", "must be at least C1");
  if (c.bandwidth_exponent && !std::isfinite(*c.bandwidth_exponent)) throw ConfigError("bandwidth_exponent", "not finite");
  if (c.snapshot_every < 1) throw ConfigError("snapshot_every", "must be positive");
  if (c.grid_cap < 1) throw ConfigError("grid_cap", "must be positive");
  if (c.grid_source == GridSource::file && c.grid_file.empty()) throw ConfigError("grid_file", "required when grid_source=file");
}

inline EstimatorConfig estimator_config(const RunConfig& c) {
  EstimatorConfig e;
  e.kernel = {c.kernel, c.dim()};
  e.bandwidth = BandwidthSchedule::power_law(c.exponent());
  e.step = StepSchedule(c.c1, c.c2, c.step_rule);
  e.clamp_gain = c.clamp_gain;
  e.clock_scale = c.bandwidth_clock == BandwidthClock::network ? c.workers : 1;
  return e;
}

inline SimulationConfig simulation_config(const RunConfig& c) {
  SimulationConfig s;
  s.workers = c.workers;
  s.tau = c.tau.resolve(c.workers);
  s.seed = c.seed;
  s.mode = c.mode;
  s.max_delay = c.max_delay;
  s.snapshot_every = c.snapshot_every;
  s.snapshot_ms = c.snapshot_ms;
  s.estimator = estimator_config(c);
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------
// Convergence conditions
// ---------------------------------------------------------------------------

enum class Verdict { holds, fails, unverifiable };

inline std::string_view to_string(Verdict v) {
  switch (v) {
    case Verdict::holds: return "HOLDS";
    case Verdict::fails: return "FAILS";
    default: return "UNVERIFIABLE";
  }
}

struct NumericProbe {
  std::size_t limit = 0;
  Verdict verdict = Verdict::unverifiable;
  std::string detail;
};

struct Hypothesis {
  std::string id;
  std::string statement;
  Verdict verdict = Verdict::unverifiable;
  std::string arithmetic;
  std::optional<NumericProbe> probe;

  // Analytic HOLDS must not be contradicted; analytic FAILS must be exhibited.
  bool probe_agrees() const {
    if (!probe || verdict == Verdict::unverifiable) return true;
    return probe->verdict == verdict;
  }
};

struct TheoremReport {
  std::vector<Hypothesis> hypotheses;

  const Hypothesis& get(const std::string& id) const {
    for (const auto& h : hypotheses) {
      if (h.id == id) return h;
    }
    throw InputError("no hypothesis '" + id + "'");
  }
  bool any_fails() const {
    return std::any_of(hypotheses.begin(), hypotheses.end(), [](const auto& h) { return h.verdict == Verdict::fails; });
  }
  bool probes_agree() const {
    return std::all_of(hypotheses.begin(), hypotheses.end(), [](const auto& h) { return h.probe_agrees(); });
  }

  std::string to_string() const {
    std::ostringstream out;
    for (const auto& h : hypotheses) {
      out << h.id << ": " << adreg::to_string(h.verdict) << "  (" << h.statement << ")\n";
      if (!h.arithmetic.empty()) out << "    " << h.arithmetic << '\n';
      if (h.probe) {
        out << "    numeric to t=" << h.probe->limit << ": " << adreg::to_string(h.probe->verdict) << ", " << h.probe->detail
            << '\n';
      }
    }
    return out.str();
  }
};

namespace detail {

inline double pow_h(const EstimatorConfig& e, std::size_t t, double d) { return std::pow(e.bandwidth_for(t), d); }

// Largest t <= limit the bandwidth schedule covers.
inline std::size_t probe_limit(const EstimatorConfig& e, std::size_t limit) {
  if (e.bandwidth.is_power_law()) return limit;
  std::size_t lo = 1, hi = limit;
  while (lo < hi) {
    const std::size_t mid = lo + (hi - lo + 1) / 2;
    try {
      e.bandwidth_for(mid);
      lo = mid;
    } catch (const InputError&) {
      hi = mid - 1;
    }
  }
  return lo;
}

inline NumericProbe probe_gain(const EstimatorConfig& e, std::size_t limit) {
  NumericProbe p;
  p.limit = probe_limit(e, limit);
  const double d = static_cast<double>(e.kernel.dim), l0 = e.kernel.envelope_at_zero();
  double sup = 0.0;
  std::size_t arg = 1;
  for (std::size_t t = 1; t <= p.limit; ++t) {
    const double g = e.step.at(t) * l0 / pow_h(e, t, d);
    if (g > sup) {
      sup = g;
      arg = t;
    }
  }
  p.verdict = sup <= 1.0 + 1e-12 ? Verdict::holds : Verdict::fails;
  p.detail = "max eps_t K_t(x,x) = " + format_double(sup) + " at t=" + std::to_string(arg);
  return p;
}

inline NumericProbe probe_monotone(const EstimatorConfig& e, std::size_t limit) {
  NumericProbe p;
  p.limit = probe_limit(e, limit);
  const double d = static_cast<double>(e.kernel.dim);
  double prev = pow_h(e, 1, d);
  std::size_t drops = 0, first = 0;
  for (std::size_t t = 2; t <= p.limit; ++t) {
    const double v = static_cast<double>(t) * pow_h(e, t, d);
    if (v < prev * (1.0 - 1e-12)) {
      if (drops++ == 0) first = t;
    }
    prev = v;
  }
  p.verdict = drops == 0 ? Verdict::holds : Verdict::fails;
  p.detail = drops == 0 ? "t h_t^d never decreases" : std::to_string(drops) + " decreases, first at t=" + std::to_string(first);
  return p;
}

// Partial sums at powers of ten; increments over successive decades shrink
// geometrically for a convergent power series and stay >= 1x for a divergent one.
inline NumericProbe probe_summable(const EstimatorConfig& e, std::size_t limit) {
  NumericProbe p;
  p.limit = probe_limit(e, limit);
  const double d = static_cast<double>(e.kernel.dim);
  std::vector<double> decade_sums;
  double sum = 0.0, at_last = 0.0;
  std::size_t next = 10;
  for (std::size_t t = 1; t <= p.limit; ++t) {
    const double h = pow_h(e, t, d);
    const double tt = static_cast<double>(t);
    sum += 1.0 / (tt * tt * h * h);
    if (t == next) {
      decade_sums.push_back(sum - at_last);
      at_last = sum;
      next *= 10;
    }
  }
  if (decade_sums.size() < 3) {
    p.verdict = Verdict::unverifiable;
    p.detail = "horizon too short";
    return p;
  }
  const double ratio = decade_sums.back() / decade_sums[decade_sums.size() - 2];
  p.verdict = ratio >= 0.995 ? Verdict::fails : Verdict::holds;
  p.detail = "partial sum " + format_double(sum) + ", last decade increment ratio " + format_double(ratio);
  return p;
}

// Mean of K_t(x, Z), Z ~ design, at a few design points x.
inline std::string kernel_mass_estimate(const EstimatorConfig& e, const DesignSpec& design, std::uint64_t seed,
                                        std::size_t limit) {
  const auto xs = sample_design(design, 8, seed ^ 0x5bd1e995ULL);
  const auto zs = sample_design(design, 20000, seed ^ 0x27d4eb2fULL);
  std::ostringstream out;
  out << "Monte Carlo min over 8 design points of mean K_t(x, Z):";
  for (std::size_t t = 100; t <= probe_limit(e, limit); t *= 100) {
    const double h = e.bandwidth_for(t);
    const double inv_hd = std::pow(h, -static_cast<double>(e.kernel.dim));
    double lo = std::numeric_limits<double>::infinity();
    for (const auto& x : xs) {
      double acc = 0.0;
      for (const auto& z : zs) acc += kernel_from_sqdist(e.kernel.kind, h, inv_hd, squared_distance(x, z));
      lo = std::min(lo, acc / static_cast<double>(zs.size()));
    }
    out << " t=" << t << ": " << format_double(lo) << ';';
  }
  return out.str();
}

}  // namespace detail

// Checks the hypotheses of the almost-sure consistency result for the
// configured schedules. Power-law bandwidths get closed-form verdicts; every
// verdict is also probed numerically up to `probe_limit`.
inline TheoremReport validate_theorem_conditions(const EstimatorConfig& e, const std::optional<DesignSpec>& design = {},
                                                 std::uint64_t seed = 1, std::size_t probe_limit = 1000000) {
  TheoremReport rep;
  const double d = static_cast<double>(e.kernel.dim);
  const auto exponent = e.bandwidth.exponent();
  const double beta = exponent ? -*exponent : 0.0;
  const double bd = beta * d;
  using detail::format_double;

  {
    Hypothesis h{"envelope", "h_t^d K_t(x,z) <= L(|x-z|/h_t) with L bounded, integrable, radially nonincreasing",
                 Verdict::holds, "", std::nullopt};
    h.arithmetic = e.kernel.kind == KernelKind::gaussian ? "L(r) = exp(-r^2), L(0) = 1" : "L(r) = 1[r <= 1], L(0) = 1";
    rep.hypotheses.push_back(h);
  }
  {
    Hypothesis h{"gain", "sup_t eps_t K_t(x,z) <= 1", Verdict::unverifiable, "", detail::probe_gain(e, probe_limit)};
    if (exponent) {
      const auto g = e.gain_bound();
      h.verdict = g.violated ? Verdict::fails : Verdict::holds;
      h.arithmetic = "beta d = " + format_double(bd) + "; " + g.detail;
    } else {
      h.arithmetic = "bandwidth is not a power law";
    }
    rep.hypotheses.push_back(h);
  }
  {
    Hypothesis h{"kernel_mass", "liminf_t integral K_t(x,z) mu(dz) > 0 for mu-almost every x", Verdict::unverifiable,
                 "depends on the design distribution", std::nullopt};
    if (design) h.arithmetic += "; " + detail::kernel_mass_estimate(e, *design, seed, probe_limit);
    rep.hypotheses.push_back(h);
  }
  {
    Hypothesis h{"monotone", "t h_t^d nondecreasing", Verdict::unverifiable, "", detail::probe_monotone(e, probe_limit)};
    if (exponent) {
      h.verdict = 1.0 - bd >= 0.0 ? Verdict::holds : Verdict::fails;
      h.arithmetic = "t h_t^d = t^(1 - beta d), 1 - beta d = " + format_double(1.0 - bd);
    } else {
      h.arithmetic = "bandwidth is not a power law";
    }
    rep.hypotheses.push_back(h);
  }
  {
    Hypothesis h{"summable", "sum_t 1/(t^2 h_t^(2d)) < infinity", Verdict::unverifiable, "",
                 detail::probe_summable(e, probe_limit)};
    if (exponent) {
      h.verdict = 2.0 - 2.0 * bd > 1.0 ? Verdict::holds : Verdict::fails;
      h.arithmetic = "terms t^-(2 - 2 beta d), 2 - 2 beta d = " + format_double(2.0 - 2.0 * bd) + " must exceed 1";
    } else {
      h.arithmetic = "bandwidth is not a power law";
    }
    rep.hypotheses.push_back(h);
  }
  return rep;
}

inline TheoremReport validate_theorem_conditions(const RunConfig& c, std::size_t probe_limit = 1000000) {
  return validate_theorem_conditions(estimator_config(c), DesignSpec(c.design, c.dim()), c.seed, probe_limit);
}

}  // namespace adreg
