#pragma once

// Random schedules satisfying the convex-combination, delay and idle-processor
// conditions by construction. Every averaging agent listens to its ring
// predecessor, which keeps the union graph strongly connected.

#include <random>

#include "adreg/agreement.hpp"

namespace adreg::testgen {

inline CommSchedule random_schedule(std::mt19937_64& rng, std::size_t m, std::size_t horizon, std::size_t b1) {
  CommSchedule s(m, horizon);
  std::bernoulli_distribution coin(0.5), extra(0.3);
  for (std::size_t t = 1; t <= horizon; ++t) {
    std::vector<bool> computing(m);
    bool any = false;
    for (std::size_t i = 0; i < m; ++i) any = (computing[i] = coin(rng)) || any;
    if (!any) computing[std::uniform_int_distribution<std::size_t>(0, m - 1)(rng)] = true;
    for (std::size_t i = 0; i < m; ++i) {
      s.set_computing(t, i, computing[i]);
      if (computing[i] || m == 1) continue;
      std::vector<std::size_t> members{i, (i + m - 1) % m};
      for (std::size_t j = 0; j < m; ++j) {
        if (j != i && j != members[1] && extra(rng)) members.push_back(j);
      }
      const double w = 1.0 / static_cast<double>(members.size());
      std::vector<Link> links;
      for (auto j : members) {
        std::size_t tau = t;
        if (j != i) {
          const std::size_t max_lag = std::min(b1, t - 1);
          tau = t - std::uniform_int_distribution<std::size_t>(0, max_lag)(rng);
        }
        links.push_back({j, w, tau});
      }
      s.set_row(t, i, std::move(links));
    }
  }
  const auto realized = measure_constants(s);
  s.declared = {m > 1 ? 1.0 / static_cast<double>(m) : 1.0, b1, realized.b2};
  return s;
}

}  // namespace adreg::testgen
