#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "adreg/error.hpp"
#include "adreg/grid.hpp"
#include "adreg/kernel.hpp"
#include "adreg/schedules.hpp"

namespace adreg {

// sup over t >= 1 of eps_t * h_t^-d * L(0), the largest gain a step can apply.
struct GainBound {
  double sup = 0.0;
  bool violated = false;
  bool analytic = false;  // closed form (power law) vs. scan of a finite table
  std::string detail;
};

struct EstimatorConfig {
  KernelSpec kernel;
  BandwidthSchedule bandwidth = BandwidthSchedule::default_for(1);
  StepSchedule step;
  // Clamp eps * K at 1 per evaluation.
  bool clamp_gain = false;
  // The bandwidth of the step absorbing observation t uses h at index
  // clock_scale * t (t itself for 1). Workers set it to M so the bandwidth
  // follows the network-wide observation count while the step size follows
  // their own count.
  std::size_t clock_scale = 1;

  double bandwidth_for(std::size_t t) const { return bandwidth.at(t <= 1 ? t : clock_scale * t); }

  GainBound gain_bound() const {
    GainBound out;
    const double d = static_cast<double>(kernel.dim);
    const double l0 = kernel.envelope_at_zero();
    const double c = step.rule == StepRule::lower ? step.c1 : 0.5 * (step.c1 + step.c2);
    std::ostringstream why;
    if (auto e = bandwidth.exponent()) {
      out.analytic = true;
      const double beta_d = -*e * d;
      const double scale = std::pow(static_cast<double>(clock_scale), beta_d);
      // t = 1 contributes eps_1 * K_1 = 1.
      if (beta_d > 1.0) {
        out.sup = std::numeric_limits<double>::infinity();
        why << "eps_t K_t(x,x) = " << c * scale << " * t^(" << beta_d - 1.0 << ") grows without bound";
      } else {
        out.sup = std::max(1.0, c * scale * std::pow(2.0, beta_d - 1.0) * l0);
        why << "beta*d = " << beta_d << " <= 1, sup attained at t = 2: " << c * scale * std::pow(2.0, beta_d - 1.0) * l0;
      }
    } else {
      out.sup = 1.0;
      for (std::size_t t = 2;; ++t) {
        double h = 0.0;
        try {
          h = bandwidth_for(t);
        } catch (const InputError&) {
          break;
        }
        out.sup = std::max(out.sup, step.at(t) * std::pow(h, -d) * l0);
      }
      why << "table scan sup = " << out.sup;
    }
    out.violated = out.sup > 1.0 + 1e-12;
    out.detail = why.str();
    return out;
  }
};

// A worker's estimate evaluated on a fixed query grid. `t` counts the
// observations absorbed so far (1 after initialization).
struct EstimateVector {
  std::shared_ptr<const QueryGrid> grid;
  std::vector<double> values;
  std::size_t t = 1;
};

inline EstimateVector init_estimate(const Observation& first, std::shared_ptr<const QueryGrid> grid) {
  if (!grid || grid->empty()) throw InputError("query grid must not be empty");
  EstimateVector e;
  e.values.assign(grid->size(), first.y);
  e.grid = std::move(grid);
  e.t = 1;
  return e;
}

// Writes s(x) = -eps_{t+1} H(Z, r(x)) = g(x) * (y - r(x)) with g = eps_{t+1} K_{t+1}(x, X)
// for every grid point. `t_next` is the index of the observation being absorbed.
inline void revesz_increment(const EstimatorConfig& cfg, const QueryGrid& grid, std::span<const double> current,
                             std::size_t t_next, const Observation& obs, std::span<double> out) {
  if (t_next < 2) throw InputError("revesz step requires t_next >= 2");
  if (obs.x.size() != grid.dim()) throw InputError("observation dimension does not match query grid");
  const double h = cfg.bandwidth_for(t_next);
  const double eps = cfg.step.at(t_next);
  const double inv_hd = std::pow(h, -static_cast<double>(cfg.kernel.dim));
  for (std::size_t k = 0; k < grid.size(); ++k) {
    const double sq = squared_distance(grid.point(k), obs.x);
    double gain = eps * kernel_from_sqdist(cfg.kernel.kind, h, inv_hd, sq);
    if (cfg.clamp_gain && gain > 1.0) gain = 1.0;
    out[k] = gain * (obs.y - current[k]);
  }
}

// r_{t+1}(x) = r_t(x) - eps_{t+1} H(Z_{t+1}, r_t(x)).
inline EstimateVector revesz_step(const EstimateVector& estimate, const Observation& obs, const EstimatorConfig& cfg) {
  EstimateVector next;
  next.grid = estimate.grid;
  next.t = estimate.t + 1;
  next.values.resize(estimate.values.size());
  revesz_increment(cfg, *estimate.grid, estimate.values, next.t, obs, next.values);
  for (std::size_t k = 0; k < next.values.size(); ++k) next.values[k] = estimate.values[k] + next.values[k];
  return next;
}

// Single-node Revesz estimate over the whole stream.
inline EstimateVector centralized_fit(std::span<const Observation> stream, std::shared_ptr<const QueryGrid> grid,
                                      const EstimatorConfig& cfg) {
  if (stream.empty()) throw InputError("centralized_fit needs a nonempty stream");
  EstimateVector e = init_estimate(stream.front(), std::move(grid));
  for (std::size_t k = 1; k < stream.size(); ++k) e = revesz_step(e, stream[k], cfg);
  return e;
}

// Same as centralized_fit, returning copies of the estimate after each of the
// requested observation counts (ascending, each in [1, stream.size()]).
inline std::vector<EstimateVector> centralized_checkpoints(std::span<const Observation> stream,
                                                           std::shared_ptr<const QueryGrid> grid,
                                                           const EstimatorConfig& cfg,
                                                           std::span<const std::size_t> counts) {
  if (stream.empty()) throw InputError("centralized_checkpoints needs a nonempty stream");
  std::vector<EstimateVector> out;
  out.reserve(counts.size());
  EstimateVector e = init_estimate(stream.front(), std::move(grid));
  std::size_t next = 0;
  for (std::size_t k = 1;; ++k) {
    while (next < counts.size() && counts[next] == k) {
      out.push_back(e);
      ++next;
    }
    if (next == counts.size() || k == stream.size()) break;
    e = revesz_step(e, stream[k], cfg);
  }
  if (next != counts.size()) throw InputError("checkpoint counts must be ascending and within the stream");
  return out;
}

}  // namespace adreg
