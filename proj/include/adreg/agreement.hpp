#pragma once

// Executable form of the asynchronous linear model
//
//   z_{t+1}^i = sum_j a_t^{ij} z^j(tau_t^{ij}) + s_t^i,
//
// used as the oracle the runtime is checked against: schedule validation,
// trajectory evaluation, impulse-response coefficients phi^{ij}(t, tau) and
// the agreement sequence z*_t.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <istream>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "adreg/error.hpp"
#include "adreg/schedules.hpp"

namespace adreg {

// One explicit entry of a combining row: weight a^{ij} and delay tau^{ij}.
struct Link {
  std::size_t agent = 0;
  double weight = 0.0;
  std::size_t tau = 0;

  friend bool operator==(const Link&, const Link&) = default;
};

struct DeclaredConstants {
  double alpha = 1.0;
  std::size_t b1 = 0;
  std::size_t b2 = 0;
};

// Combining weights, delays and computing sets over instants t = 1..horizon.
// Rows are sparse: an empty row is the identity (a^{ii} = 1, tau = t), and any
// entry missing from an explicit row has a^{ij} = 0, tau^{ij} = t.
class CommSchedule {
 public:
  CommSchedule() = default;

  CommSchedule(std::size_t agents, std::size_t horizon)
      : agents_(agents), horizon_(horizon), rows_(agents * horizon), computing_(agents * horizon, 0) {
    if (agents == 0) throw InputError("schedule needs at least one agent");
    if (horizon == 0) throw InputError("schedule horizon must be positive");
  }

  std::size_t agents() const noexcept { return agents_; }
  std::size_t horizon() const noexcept { return horizon_; }

  DeclaredConstants declared;

  void set_row(std::size_t t, std::size_t i, std::vector<Link> links) {
    auto& row = rows_[index(t, i)];
    std::sort(links.begin(), links.end(), [](const Link& a, const Link& b) { return a.agent < b.agent; });
    for (std::size_t k = 0; k < links.size(); ++k) {
      if (links[k].agent >= agents_) throw InputError("link agent out of range");
      if (k > 0 && links[k].agent == links[k - 1].agent) throw InputError("duplicate link in schedule row");
    }
    row = std::move(links);
  }

  void set_identity(std::size_t t, std::size_t i) { rows_[index(t, i)].clear(); }

  std::span<const Link> row(std::size_t t, std::size_t i) const { return rows_[index(t, i)]; }

  bool is_identity(std::size_t t, std::size_t i) const {
    const auto& row = rows_[index(t, i)];
    for (const auto& l : row) {
      if (l.agent == i ? (l.weight != 1.0 || l.tau != t) : (l.weight != 0.0 || l.tau != t)) return false;
    }
    return true;
  }

  double weight(std::size_t t, std::size_t i, std::size_t j) const {
    const auto& row = rows_[index(t, i)];
    if (row.empty()) return i == j ? 1.0 : 0.0;
    for (const auto& l : row) {
      if (l.agent == j) return l.weight;
    }
    return 0.0;
  }

  std::size_t delay(std::size_t t, std::size_t i, std::size_t j) const {
    for (const auto& l : rows_[index(t, i)]) {
      if (l.agent == j) return l.tau;
    }
    return t;
  }

  void set_computing(std::size_t t, std::size_t i, bool computing) { computing_[index(t, i)] = computing ? 1 : 0; }
  bool computing(std::size_t t, std::size_t i) const { return computing_[index(t, i)] != 0; }

 private:
  std::size_t index(std::size_t t, std::size_t i) const {
    if (t < 1 || t > horizon_ || i >= agents_) {
      throw InputError("schedule index out of range (t=" + std::to_string(t) + ", i=" + std::to_string(i) + ")");
    }
    return (t - 1) * agents_ + i;
  }

  std::size_t agents_ = 0;
  std::size_t horizon_ = 0;
  std::vector<std::vector<Link>> rows_;
  std::vector<unsigned char> computing_;
};

// ---------------------------------------------------------------------------
// Text format: one record per (t, i)
//
//   adreg-schedule 1
//   agents <M>
//   horizon <T>
//   alpha <a>  B1 <b1>  B2 <b2>      (one key per line)
//   <t> <i> <computing 0|1> : <a^{i0} .. a^{i,M-1}> : <tau^{i0} .. tau^{i,M-1}>
// ---------------------------------------------------------------------------

inline void write_schedule(std::ostream& out, const CommSchedule& s) {
  const auto old_precision = out.precision(17);
  out << "adreg-schedule 1\n";
  out << "agents " << s.agents() << "\n";
  out << "horizon " << s.horizon() << "\n";
  out << "alpha " << s.declared.alpha << "\n";
  out << "B1 " << s.declared.b1 << "\n";
  out << "B2 " << s.declared.b2 << "\n";
  for (std::size_t t = 1; t <= s.horizon(); ++t) {
    for (std::size_t i = 0; i < s.agents(); ++i) {
      out << t << ' ' << i << ' ' << (s.computing(t, i) ? 1 : 0) << " :";
      for (std::size_t j = 0; j < s.agents(); ++j) out << ' ' << s.weight(t, i, j);
      out << " :";
      for (std::size_t j = 0; j < s.agents(); ++j) out << ' ' << s.delay(t, i, j);
      out << '\n';
    }
  }
  out.precision(old_precision);
}

inline CommSchedule read_schedule(std::istream& in) {
  std::string line;
  auto next_line = [&]() -> bool {
    while (std::getline(in, line)) {
      if (!line.empty() && line[0] != '#') return true;
    }
    return false;
  };
  if (!next_line() || line.rfind("adreg-schedule", 0) != 0) throw InputError("missing schedule header");

  std::map<std::string, std::string> header;
  for (int k = 0; k < 5; ++k) {
    if (!next_line()) throw InputError("truncated schedule header");
    std::istringstream fields(line);
    std::string key, value;
    fields >> key >> value;
    header[key] = value;
  }
  for (const char* key : {"agents", "horizon", "alpha", "B1", "B2"}) {
    if (!header.count(key)) throw InputError(std::string("schedule header lacks ") + key);
  }
  CommSchedule s(std::stoul(header["agents"]), std::stoul(header["horizon"]));
  s.declared.alpha = std::stod(header["alpha"]);
  s.declared.b1 = std::stoul(header["B1"]);
  s.declared.b2 = std::stoul(header["B2"]);

  const std::size_t m = s.agents();
  std::vector<unsigned char> seen(m * s.horizon(), 0);
  while (next_line()) {
    std::istringstream fields(line);
    std::size_t t = 0, i = 0;
    int computing = 0;
    std::string sep;
    fields >> t >> i >> computing >> sep;
    if (!fields || sep != ":") throw InputError("malformed schedule record: " + line);
    std::vector<double> w(m);
    std::vector<std::size_t> tau(m);
    for (auto& v : w) fields >> v;
    fields >> sep;
    if (!fields || sep != ":") throw InputError("malformed schedule record: " + line);
    for (auto& v : tau) fields >> v;
    if (!fields) throw InputError("malformed schedule record: " + line);
    if (t < 1 || t > s.horizon() || i >= m) throw InputError("schedule record out of range: " + line);

    std::vector<Link> links;
    bool identity = true;
    for (std::size_t j = 0; j < m; ++j) {
      const bool expected = j == i ? (w[j] == 1.0 && tau[j] == t) : (w[j] == 0.0 && tau[j] == t);
      identity = identity && expected;
      if (w[j] != 0.0 || tau[j] != t) links.push_back({j, w[j], tau[j]});
    }
    if (identity) {
      s.set_identity(t, i);
    } else {
      s.set_row(t, i, std::move(links));
    }
    s.set_computing(t, i, computing != 0);
    seen[(t - 1) * m + i] = 1;
  }
  const auto missing = std::find(seen.begin(), seen.end(), 0);
  if (missing != seen.end()) {
    const auto k = static_cast<std::size_t>(missing - seen.begin());
    throw InputError("schedule lacks record for t=" + std::to_string(k / m + 1) + ", i=" + std::to_string(k % m));
  }
  return s;
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

struct ConditionCheck {
  std::string id;
  std::string description;
  bool passed = true;
  std::size_t violations = 0;
  std::string witness;  // first violation
};

struct ValidationReport {
  std::vector<ConditionCheck> checks;

  const ConditionCheck& get(std::string_view id) const {
    for (const auto& c : checks) {
      if (c.id == id) return c;
    }
    throw InputError("no condition check named " + std::string(id));
  }

  bool passed(std::string_view id) const { return get(id).passed; }

  bool all_passed() const {
    return std::all_of(checks.begin(), checks.end(), [](const auto& c) { return c.passed; });
  }

  std::string to_string() const {
    std::ostringstream out;
    for (const auto& c : checks) {
      out << "condition " << c.id << " (" << c.description << "): " << (c.passed ? "PASS" : "FAIL");
      if (!c.passed) out << " [" << c.violations << " violations; first: " << c.witness << "]";
      out << '\n';
    }
    return out.str();
  }
};

namespace detail {

inline void fail(ConditionCheck& c, const std::string& witness) {
  if (c.passed) c.witness = witness;
  c.passed = false;
  ++c.violations;
}

inline std::string at(std::size_t t, std::size_t i, std::size_t j) {
  return "(t=" + std::to_string(t) + ", i=" + std::to_string(i) + ", j=" + std::to_string(j) + ")";
}

// Off-diagonal edges (i, j) with a_t^{ij} > 0, with the instants they occur at.
inline std::map<std::pair<std::size_t, std::size_t>, std::vector<std::size_t>> edge_occurrences(
    const CommSchedule& s) {
  std::map<std::pair<std::size_t, std::size_t>, std::vector<std::size_t>> out;
  for (std::size_t t = 1; t <= s.horizon(); ++t) {
    for (std::size_t i = 0; i < s.agents(); ++i) {
      for (const auto& l : s.row(t, i)) {
        if (l.agent != i && l.weight > 0.0) out[{i, l.agent}].push_back(t);
      }
    }
  }
  return out;
}

// Largest gap (as a window length B2) of an edge over [1, T]: every window
// [t, t + B2] inside the horizon must contain an occurrence.
inline std::size_t required_window(const std::vector<std::size_t>& times, std::size_t horizon) {
  std::size_t need = times.front() - 1;
  for (std::size_t k = 1; k < times.size(); ++k) need = std::max(need, times[k] - times[k - 1] - 1);
  return std::max(need, horizon - times.back());
}

inline bool recurring(const std::vector<std::size_t>& times, std::size_t horizon) {
  return times.back() > horizon / 2;
}

// Vertices reachable from `start` following adjacency (or its transpose).
inline std::vector<bool> reach(const std::vector<unsigned char>& adj, std::size_t m, std::size_t start, bool transpose) {
  std::vector<bool> seen(m, false);
  std::vector<std::size_t> stack{start};
  seen[start] = true;
  while (!stack.empty()) {
    const auto u = stack.back();
    stack.pop_back();
    for (std::size_t v = 0; v < m; ++v) {
      const bool edge = transpose ? adj[v * m + u] : adj[u * m + v];
      if (edge && !seen[v]) {
        seen[v] = true;
        stack.push_back(v);
      }
    }
  }
  return seen;
}

}  // namespace detail

struct RealizedConstants {
  double alpha = 1.0;     // smallest positive weight
  std::size_t b1 = 0;     // largest delay t - tau over positive weights
  std::size_t b2 = 0;     // largest intercommunication window of recurring edges
};

inline RealizedConstants measure_constants(const CommSchedule& s) {
  RealizedConstants out;
  for (std::size_t t = 1; t <= s.horizon(); ++t) {
    for (std::size_t i = 0; i < s.agents(); ++i) {
      for (const auto& l : s.row(t, i)) {
        if (l.weight > 0.0) {
          out.alpha = std::min(out.alpha, l.weight);
          if (l.tau <= t) out.b1 = std::max(out.b1, t - l.tau);
        }
      }
    }
  }
  for (const auto& [edge, times] : detail::edge_occurrences(s)) {
    if (detail::recurring(times, s.horizon())) out.b2 = std::max(out.b2, detail::required_window(times, s.horizon()));
  }
  return out;
}

// Checks the convex-combination, delay, connectivity, intercommunication and
// idle-processor conditions. Connectivity and intercommunication quantify over
// infinite time; on a finite horizon T they are checked as follows:
//   connectivity: the union graph over [t, T] is strongly connected for every t <= T - B2;
//   intercommunication: every edge occurring in the second half of the horizon ("recurring")
//      occurs in every window [t, t + B2] contained in [1, T].
inline ValidationReport validate_schedule(const CommSchedule& s) {
  constexpr double tol = 1e-12;
  const std::size_t m = s.agents();
  const std::size_t horizon = s.horizon();
  const auto& dc = s.declared;

  ConditionCheck row_sum{"row_sum", "rows sum to one", true, 0, {}};
  ConditionCheck self_weight{"self_weight", "self weight at least alpha", true, 0, {}};
  ConditionCheck weight_range{"weight_range", "weights in {0} or [alpha, 1]", true, 0, {}};
  ConditionCheck isolated{"compute_isolated", "no combining at computing instants", true, 0, {}};
  ConditionCheck zero_delay{"zero_weight_delay", "zero weight implies tau = t", true, 0, {}};
  ConditionCheck own_current{"own_current", "own value is current", true, 0, {}};
  ConditionCheck delay_bound{"delay_bound", "delays bounded by B1", true, 0, {}};
  ConditionCheck connectivity{"connectivity", "union graph over every suffix strongly connected", true, 0, {}};
  ConditionCheck intercomm{"intercommunication", "recurring edges within every B2 window", true, 0, {}};
  ConditionCheck no_idle{"no_idle_instant", "some agent computing at every instant", true, 0, {}};

  if (!(dc.alpha > 0.0 && dc.alpha <= 1.0)) detail::fail(self_weight, "declared alpha outside (0, 1]");

  for (std::size_t t = 1; t <= horizon; ++t) {
    bool any_computing = false;
    for (std::size_t i = 0; i < m; ++i) {
      const bool computing = s.computing(t, i);
      any_computing = any_computing || computing;
      const auto row = s.row(t, i);
      if (row.empty()) {
        if (1.0 < dc.alpha - tol) detail::fail(self_weight, detail::at(t, i, i));
        continue;
      }
      double sum = 0.0;
      for (const auto& l : row) {
        sum += l.weight;
        const std::string where = detail::at(t, i, l.agent);
        if (l.weight < 0.0 || (l.weight != 0.0 && (l.weight < dc.alpha - tol || l.weight > 1.0 + tol))) {
          detail::fail(weight_range, where + " a=" + std::to_string(l.weight));
        }
        if (computing && (l.agent == i ? l.weight != 1.0 : l.weight != 0.0)) detail::fail(isolated, where);
        if (l.weight == 0.0 && l.tau != t) detail::fail(zero_delay, where + " tau=" + std::to_string(l.tau));
        if (l.agent == i && l.tau != t) detail::fail(own_current, where + " tau=" + std::to_string(l.tau));
        if (l.tau < 1 || l.tau > t || l.tau + dc.b1 < t) {
          detail::fail(delay_bound, where + " tau=" + std::to_string(l.tau) + " outside [" +
                                std::to_string(t > dc.b1 ? t - dc.b1 : 1) + ", " + std::to_string(t) + "]");
        }
      }
      if (std::abs(sum - 1.0) > tol) detail::fail(row_sum, detail::at(t, i, i) + " sum=" + std::to_string(sum));
      if (s.weight(t, i, i) < dc.alpha - tol) detail::fail(self_weight, detail::at(t, i, i));
    }
    if (!any_computing) detail::fail(no_idle, "t=" + std::to_string(t));
  }

  // Connectivity of suffix unions, scanned from the end of the horizon.
  {
    const std::size_t last_start = horizon > dc.b2 ? horizon - dc.b2 : 1;
    std::vector<unsigned char> adj(m * m, 0);
    for (std::size_t t = horizon; t >= last_start; --t) {
      for (std::size_t i = 0; i < m; ++i) {
        for (const auto& l : s.row(t, i)) {
          if (l.weight > 0.0 && l.agent != i) adj[l.agent * m + i] = 1;  // information flows j -> i
        }
      }
      if (t == 1) break;
    }
    // Every suffix start <= last_start contains the union checked here.
    const auto fwd = detail::reach(adj, m, 0, false);
    const auto bwd = detail::reach(adj, m, 0, true);
    const bool connected = std::all_of(fwd.begin(), fwd.end(), [](bool b) { return b; }) &&
                           std::all_of(bwd.begin(), bwd.end(), [](bool b) { return b; });
    if (!connected) {
      std::string cut = "{";
      const auto& side = std::all_of(fwd.begin(), fwd.end(), [](bool b) { return b; }) ? bwd : fwd;
      for (std::size_t v = 0; v < m; ++v) {
        if (side[v]) cut += (cut.size() > 1 ? "," : "") + std::to_string(v);
      }
      cut += "}";
      detail::fail(connectivity, "window start t=" + std::to_string(last_start) + ": cut " + cut + " separated from the rest");
    }
  }

  for (const auto& [edge, times] : detail::edge_occurrences(s)) {
    if (!detail::recurring(times, horizon)) continue;
    const auto need = detail::required_window(times, horizon);
    if (need > dc.b2) {
      detail::fail(intercomm, "edge (" + std::to_string(edge.first) + ", " + std::to_string(edge.second) +
                           ") needs B2 >= " + std::to_string(need));
    }
  }

  return ValidationReport{{row_sum, self_weight, weight_range, isolated, zero_delay, own_current, delay_bound,
                           connectivity, intercomm, no_idle}};
}

// Uniform weights over each agent's neighbor set (which must contain itself).
inline std::vector<std::vector<double>> equal_neighbor_weights(std::span<const std::vector<std::size_t>> neighbor_sets) {
  const std::size_t m = neighbor_sets.size();
  std::vector<std::vector<double>> rows(m, std::vector<double>(m, 0.0));
  for (std::size_t i = 0; i < m; ++i) {
    const auto& set = neighbor_sets[i];
    if (std::find(set.begin(), set.end(), i) == set.end()) {
      throw InputError("neighbor set of agent " + std::to_string(i) + " must contain the agent itself");
    }
    const double w = 1.0 / static_cast<double>(set.size());
    for (auto j : set) {
      if (j >= m) throw InputError("neighbor index out of range");
      rows[i][j] = w;
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Linear model
// ---------------------------------------------------------------------------

// Computation terms s_t^i (sparse: absent means zero) and initial values z_1^i.
class StepLog {
 public:
  StepLog() = default;

  StepLog(std::size_t agents, std::size_t horizon, std::size_t width)
      : agents_(agents), horizon_(horizon), width_(width), initial_(agents, std::vector<double>(width, 0.0)) {}

  std::size_t agents() const noexcept { return agents_; }
  std::size_t horizon() const noexcept { return horizon_; }
  std::size_t width() const noexcept { return width_; }

  void set_initial(std::size_t i, std::vector<double> values) {
    if (values.size() != width_) throw InputError("initial value width mismatch");
    initial_.at(i) = std::move(values);
  }
  const std::vector<double>& initial(std::size_t i) const { return initial_.at(i); }
  const std::vector<std::vector<double>>& initial() const { return initial_; }

  void set_step(std::size_t t, std::size_t i, std::shared_ptr<const std::vector<double>> step) {
    if (t < 1 || t > horizon_ || i >= agents_) throw InputError("step index out of range");
    if (!step || step->size() != width_) throw InputError("step width mismatch");
    steps_[(t - 1) * agents_ + i] = std::move(step);
  }
  void set_step(std::size_t t, std::size_t i, std::vector<double> step) {
    set_step(t, i, std::make_shared<const std::vector<double>>(std::move(step)));
  }

  const std::vector<double>* step(std::size_t t, std::size_t i) const {
    const auto it = steps_.find((t - 1) * agents_ + i);
    return it == steps_.end() ? nullptr : it->second.get();
  }

  // (t, agent, step) for every nonzero entry, ordered by t then agent.
  std::vector<std::tuple<std::size_t, std::size_t, const std::vector<double>*>> entries() const {
    std::vector<std::tuple<std::size_t, std::size_t, const std::vector<double>*>> out;
    out.reserve(steps_.size());
    for (const auto& [key, ptr] : steps_) out.emplace_back(key / agents_ + 1, key % agents_, ptr.get());
    std::sort(out.begin(), out.end());
    return out;
  }

 private:
  std::size_t agents_ = 0;
  std::size_t horizon_ = 0;
  std::size_t width_ = 0;
  std::vector<std::vector<double>> initial_;
  std::unordered_map<std::size_t, std::shared_ptr<const std::vector<double>>> steps_;
};

// Incremental evaluation of the linear model. Each agent's trajectory is kept
// as a piecewise-constant history, so an instant at which an agent neither
// combines nor computes costs nothing.
class LinearModel {
 public:
  using Values = std::shared_ptr<const std::vector<double>>;

  explicit LinearModel(const std::vector<std::vector<double>>& initial) : history_(initial.size()) {
    if (initial.empty()) throw InputError("linear model needs at least one agent");
    width_ = initial.front().size();
    for (std::size_t i = 0; i < initial.size(); ++i) {
      if (initial[i].size() != width_) throw InputError("initial values have mixed widths");
      history_[i].push_back({1, std::make_shared<const std::vector<double>>(initial[i])});
    }
  }

  std::size_t agents() const noexcept { return history_.size(); }
  std::size_t width() const noexcept { return width_; }
  // Latest instant with known values.
  std::size_t time() const noexcept { return time_; }

  // Applies the rows of instant time() and produces z_{time()+1}. `step_of(i)`
  // returns a pointer to s_t^i or nullptr.
  template <class StepFn>
  void advance(const CommSchedule& s, StepFn&& step_of) {
    const std::size_t t = time_;
    for (std::size_t i = 0; i < agents(); ++i) {
      const std::vector<double>* step = step_of(i);
      const auto row = s.row(t, i);
      if (row.empty() && step == nullptr) continue;
      std::vector<double> next;
      if (row.empty()) {
        next = *history_[i].back().values;
      } else {
        next.assign(width_, 0.0);
        for (const auto& l : row) {
          if (l.weight == 0.0) continue;
          const auto& src = value(l.agent, l.tau);
          for (std::size_t k = 0; k < width_; ++k) next[k] += l.weight * src[k];
        }
      }
      if (step != nullptr) {
        if (step->size() != width_) throw InputError("step width mismatch");
        for (std::size_t k = 0; k < width_; ++k) next[k] += (*step)[k];
      }
      history_[i].push_back({t + 1, std::make_shared<const std::vector<double>>(std::move(next))});
    }
    ++time_;
  }

  // z_t^i for 1 <= t <= time().
  const std::vector<double>& value(std::size_t i, std::size_t t) const { return *value_ptr(i, t); }

  const Values& value_ptr(std::size_t i, std::size_t t) const {
    if (t < 1 || t > time_) throw InputError("linear model value requested outside [1, time]");
    const auto& h = history_.at(i);
    auto it = std::upper_bound(h.begin(), h.end(), t, [](std::size_t x, const Entry& e) { return x < e.from; });
    if (it == h.begin()) throw IntegrityError("linear model history pruned past t=" + std::to_string(t));
    return std::prev(it)->values;
  }

  const std::vector<double>& at(std::size_t t, std::size_t i) const { return value(i, t); }

  // Drops history that can no longer be addressed by a tau >= t.
  void prune_before(std::size_t t) {
    for (auto& h : history_) {
      while (h.size() > 1 && h[1].from <= t) h.pop_front();
    }
  }

 private:
  struct Entry {
    std::size_t from;
    Values values;
  };

  std::size_t width_ = 0;
  std::size_t time_ = 1;
  std::vector<std::deque<Entry>> history_;
};

using Trajectory = LinearModel;

// z_{t+1}^i = sum_j a^{ij} z^j(tau^{ij}) + s_t^i for t = 1..T-1.
inline Trajectory run_linear_model(const CommSchedule& s, const StepLog& log) {
  if (log.agents() != s.agents()) throw InputError("step log agent count does not match schedule");
  if (log.horizon() != s.horizon()) {
    throw InputError("step log horizon " + std::to_string(log.horizon()) + " does not match schedule horizon " +
                     std::to_string(s.horizon()));
  }
  LinearModel model(log.initial());
  for (std::size_t t = 1; t < s.horizon(); ++t) {
    model.advance(s, [&](std::size_t i) { return log.step(t, i); });
  }
  return model;
}

// ---------------------------------------------------------------------------
// Impulse-response coefficients phi^{ij}(t, tau)
// ---------------------------------------------------------------------------

struct PhiOptions {
  // Impulse instants to record. Empty: every tau when the horizon is at most
  // dense_limit, otherwise {0, T/4, T/2}.
  std::vector<std::size_t> probe_taus;
  std::size_t dense_limit = 256;
  std::size_t max_samples_per_probe = 1024;
  // Final-horizon values whose cross-agent spread is at most this count as
  // converged limit estimates.
  double limit_tolerance = 1e-6;
};

// phi^{ij}(t, tau) for one tau at a set of sampled t > tau (t >= 1 when tau = 0).
struct PhiProbe {
  std::size_t tau = 0;
  std::size_t agents = 0;
  std::vector<std::size_t> times;
  std::vector<double> values;  // [k][i][j]

  double at(std::size_t k, std::size_t i, std::size_t j) const { return values[(k * agents + i) * agents + j]; }

  // max_j max_{i,i'} |phi^{ij} - phi^{i'j}| at sample k.
  double spread(std::size_t k) const {
    double out = 0.0;
    for (std::size_t j = 0; j < agents; ++j) {
      double lo = std::numeric_limits<double>::infinity(), hi = -lo;
      for (std::size_t i = 0; i < agents; ++i) {
        lo = std::min(lo, at(k, i, j));
        hi = std::max(hi, at(k, i, j));
      }
      out = std::max(out, hi - lo);
    }
    return out;
  }
};

struct DecayFit {
  bool ok = false;
  double slope = 0.0;      // least-squares slope of log spread vs lag
  double rho = 1.0;        // exp(slope)
  double amplitude = 0.0;  // smallest A with spread <= A rho^lag on every sample
  std::size_t samples = 0;
};

struct PhiTable {
  std::size_t agents = 0;
  std::size_t horizon = 0;
  std::vector<PhiProbe> probes;

  // Final-horizon slice: limit_phi[j][tau] = phi^{(M-1) j}(T, tau), tau = 0..T-1,
  // and limit_spread[tau] = max_j max_{i,i'} |phi^{ij}(T, tau) - phi^{i'j}(T, tau)|.
  std::vector<std::vector<double>> limit_phi;
  std::vector<double> limit_spread;

  // Extremes over probes and the final slice.
  double min_phi = 0.0;
  double min_row_sum = 0.0;
  double max_row_sum = 0.0;
  double max_initial_row_error = 0.0;  // max |sum_j phi^{ij}(t, 0) - 1|

  DecayFit fit;
  double limit_tolerance = 0.0;
  std::size_t converged_taus = 0;
  double eta_lower = 0.0;  // min limit value over converged taus

  const PhiProbe* probe(std::size_t tau) const {
    for (const auto& p : probes) {
      if (p.tau == tau) return &p;
    }
    return nullptr;
  }
};

namespace detail {

inline std::vector<std::size_t> probe_times(std::size_t tau, std::size_t horizon, std::size_t max_samples) {
  const std::size_t first = tau == 0 ? 1 : tau + 1;
  std::vector<std::size_t> times;
  if (first > horizon) return times;
  const std::size_t count = horizon - first + 1;
  if (count <= max_samples) {
    times.resize(count);
    std::iota(times.begin(), times.end(), first);
    return times;
  }
  const std::size_t head = std::min<std::size_t>(64, max_samples / 2);
  for (std::size_t k = 0; k < head; ++k) times.push_back(first + k);
  const std::size_t rest = max_samples - head;
  for (std::size_t k = 0; k < rest; ++k) {
    const auto t = first + head + (count - head - 1) * k / (rest - 1);
    if (t > times.back()) times.push_back(t);
  }
  return times;
}

// Forward response of the scalar model to a unit impulse at agent j0 and time
// tau (initial condition when tau = 0, step s_tau^{j0} = 1 otherwise).
inline void impulse_response(const CommSchedule& s, std::size_t tau, std::size_t j0, std::vector<double>& vals) {
  const std::size_t m = s.agents();
  vals.assign((s.horizon() + 1) * m, 0.0);
  auto v = [&](std::size_t t, std::size_t i) -> double& { return vals[t * m + i]; };
  if (tau == 0) v(1, j0) = 1.0;
  for (std::size_t t = std::max<std::size_t>(tau, 1); t < s.horizon(); ++t) {
    for (std::size_t i = 0; i < m; ++i) {
      const auto row = s.row(t, i);
      double next = 0.0;
      if (row.empty()) {
        next = v(t, i);
      } else {
        for (const auto& l : row) {
          if (l.weight != 0.0) next += l.weight * v(l.tau, l.agent);
        }
      }
      if (t == tau && i == j0) next += 1.0;
      v(t + 1, i) = next;
    }
  }
}

// Adjoint pass: sensitivity of z_T^target to every z_t^j. Returns w with
// w[t * M + j] = d z_T^target / d z_t^j, t = 1..T.
inline void adjoint_response(const CommSchedule& s, std::size_t target, std::vector<double>& w) {
  const std::size_t m = s.agents();
  const std::size_t horizon = s.horizon();
  w.assign((horizon + 1) * m, 0.0);
  w[horizon * m + target] = 1.0;
  for (std::size_t t = horizon - 1; t >= 1; --t) {
    for (std::size_t k = 0; k < m; ++k) {
      const double wk = w[(t + 1) * m + k];
      if (wk == 0.0) continue;
      const auto row = s.row(t, k);
      if (row.empty()) {
        w[t * m + k] += wk;
      } else {
        for (const auto& l : row) {
          if (l.weight != 0.0) w[l.tau * m + l.agent] += l.weight * wk;
        }
      }
    }
  }
}

inline DecayFit fit_decay(const std::vector<std::pair<double, double>>& samples) {
  DecayFit fit;
  fit.samples = samples.size();
  if (samples.size() < 2) return fit;
  double mx = 0.0, my = 0.0;
  for (const auto& [x, y] : samples) {
    mx += x;
    my += y;
  }
  mx /= static_cast<double>(samples.size());
  my /= static_cast<double>(samples.size());
  double sxy = 0.0, sxx = 0.0;
  for (const auto& [x, y] : samples) {
    sxy += (x - mx) * (y - my);
    sxx += (x - mx) * (x - mx);
  }
  if (sxx == 0.0) return fit;
  fit.slope = sxy / sxx;
  fit.rho = std::exp(fit.slope);
  double log_a = -std::numeric_limits<double>::infinity();
  for (const auto& [x, y] : samples) log_a = std::max(log_a, y - fit.slope * x);
  fit.amplitude = std::exp(log_a);
  fit.ok = fit.slope < 0.0;
  return fit;
}

}  // namespace detail

inline PhiTable phi_coefficients(const CommSchedule& s, const PhiOptions& options = {}) {
  constexpr double numerically_zero = 1e-15;
  const std::size_t m = s.agents();
  const std::size_t horizon = s.horizon();

  PhiTable table;
  table.agents = m;
  table.horizon = horizon;
  table.limit_tolerance = options.limit_tolerance;
  table.min_phi = std::numeric_limits<double>::infinity();
  table.min_row_sum = std::numeric_limits<double>::infinity();
  table.max_row_sum = -std::numeric_limits<double>::infinity();

  std::vector<std::size_t> taus = options.probe_taus;
  if (taus.empty()) {
    if (horizon <= options.dense_limit) {
      taus.resize(horizon);
      std::iota(taus.begin(), taus.end(), 0);
    } else {
      taus = {0, horizon / 4, horizon / 2};
    }
  }

  std::vector<std::pair<double, double>> fit_samples;
  auto note_row = [&](double row_sum) {
    table.min_row_sum = std::min(table.min_row_sum, row_sum);
    table.max_row_sum = std::max(table.max_row_sum, row_sum);
  };

  std::vector<double> vals;
  for (const auto tau : taus) {
    if (tau >= horizon) throw InputError("phi probe tau must be below the horizon");
    PhiProbe probe;
    probe.tau = tau;
    probe.agents = m;
    probe.times = detail::probe_times(tau, horizon, options.max_samples_per_probe);
    probe.values.assign(probe.times.size() * m * m, 0.0);
    for (std::size_t j = 0; j < m; ++j) {
      detail::impulse_response(s, tau, j, vals);
      for (std::size_t k = 0; k < probe.times.size(); ++k) {
        for (std::size_t i = 0; i < m; ++i) probe.values[(k * m + i) * m + j] = vals[probe.times[k] * m + i];
      }
    }
    for (std::size_t k = 0; k < probe.times.size(); ++k) {
      for (std::size_t i = 0; i < m; ++i) {
        double row_sum = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
          table.min_phi = std::min(table.min_phi, probe.at(k, i, j));
          row_sum += probe.at(k, i, j);
        }
        note_row(row_sum);
        if (tau == 0) table.max_initial_row_error = std::max(table.max_initial_row_error, std::abs(row_sum - 1.0));
      }
      const auto lag = probe.times[k] - tau;
      const double spread = probe.spread(k);
      if (lag >= 2 && spread > numerically_zero) fit_samples.emplace_back(static_cast<double>(lag), std::log(spread));
    }
    table.probes.push_back(std::move(probe));
  }

  // Final slice via one adjoint pass per agent.
  std::vector<double> lo(m * horizon, std::numeric_limits<double>::infinity());
  std::vector<double> hi(m * horizon, -std::numeric_limits<double>::infinity());
  std::vector<double> row_sums(m * horizon, 0.0);  // [i][tau]
  table.limit_phi.assign(m, std::vector<double>(horizon, 0.0));
  for (std::size_t i = 0; i < m; ++i) {
    detail::adjoint_response(s, i, vals);
    for (std::size_t tau = 0; tau < horizon; ++tau) {
      const std::size_t at_t = tau == 0 ? 1 : tau + 1;
      for (std::size_t j = 0; j < m; ++j) {
        const double phi = vals[at_t * m + j];
        lo[j * horizon + tau] = std::min(lo[j * horizon + tau], phi);
        hi[j * horizon + tau] = std::max(hi[j * horizon + tau], phi);
        row_sums[i * horizon + tau] += phi;
        table.min_phi = std::min(table.min_phi, phi);
        if (i + 1 == m) table.limit_phi[j][tau] = phi;
      }
    }
  }
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t tau = 0; tau < horizon; ++tau) note_row(row_sums[i * horizon + tau]);
    table.max_initial_row_error = std::max(table.max_initial_row_error, std::abs(row_sums[i * horizon] - 1.0));
  }
  table.limit_spread.assign(horizon, 0.0);
  for (std::size_t tau = 0; tau < horizon; ++tau) {
    for (std::size_t j = 0; j < m; ++j) {
      table.limit_spread[tau] = std::max(table.limit_spread[tau], hi[j * horizon + tau] - lo[j * horizon + tau]);
    }
    const std::size_t lag = horizon - tau;
    if (lag >= 2 && table.limit_spread[tau] > numerically_zero) {
      fit_samples.emplace_back(static_cast<double>(lag), std::log(table.limit_spread[tau]));
    }
  }

  table.fit = detail::fit_decay(fit_samples);

  table.eta_lower = std::numeric_limits<double>::infinity();
  for (std::size_t tau = 0; tau < horizon; ++tau) {
    if (table.limit_spread[tau] > options.limit_tolerance) continue;
    ++table.converged_taus;
    for (std::size_t j = 0; j < m; ++j) table.eta_lower = std::min(table.eta_lower, table.limit_phi[j][tau]);
  }
  if (table.converged_taus == 0) table.eta_lower = 0.0;
  return table;
}

// ---------------------------------------------------------------------------
// Agreement sequence
// ---------------------------------------------------------------------------

struct AgreementResult {
  std::vector<std::vector<double>> z_star;  // index t - 1, t = 1..T
  double identity_error = 0.0;               // recursion vs. direct sum
};

// z*_1 = sum_j phi_0^j z_1^j, z*_{t+1} = z*_t + sum_j phi_t^j s_t^j; the direct
// sum form is re-evaluated at a sample of instants and compared.
inline AgreementResult agreement_sequence(const CommSchedule& s, const StepLog& log, const PhiTable& phi) {
  if (phi.agents != s.agents() || phi.horizon != s.horizon()) throw InputError("phi table does not match schedule");
  if (log.agents() != s.agents() || log.horizon() != s.horizon()) throw InputError("step log does not match schedule");
  const std::size_t m = s.agents();
  const std::size_t width = log.width();
  const std::size_t horizon = s.horizon();

  AgreementResult out;
  out.z_star.reserve(horizon);
  std::vector<double> z(width, 0.0);
  for (std::size_t j = 0; j < m; ++j) {
    for (std::size_t k = 0; k < width; ++k) z[k] += phi.limit_phi[j][0] * log.initial(j)[k];
  }
  out.z_star.push_back(z);
  for (std::size_t t = 1; t < horizon; ++t) {
    for (std::size_t j = 0; j < m; ++j) {
      if (const auto* step = log.step(t, j)) {
        for (std::size_t k = 0; k < width; ++k) z[k] += phi.limit_phi[j][t] * (*step)[k];
      }
    }
    out.z_star.push_back(z);
  }

  std::vector<std::size_t> checks;
  if (horizon <= 64) {
    checks.resize(horizon);
    std::iota(checks.begin(), checks.end(), 1);
  } else {
    for (std::size_t k = 0; k <= 32; ++k) checks.push_back(1 + (horizon - 1) * k / 32);
  }
  const auto entries = log.entries();
  for (const auto t : checks) {
    std::vector<double> direct(width, 0.0);
    for (std::size_t j = 0; j < m; ++j) {
      for (std::size_t k = 0; k < width; ++k) direct[k] += phi.limit_phi[j][0] * log.initial(j)[k];
    }
    for (const auto& [tau, j, step] : entries) {
      if (tau >= t) break;
      for (std::size_t k = 0; k < width; ++k) direct[k] += phi.limit_phi[j][tau] * (*step)[k];
    }
    for (std::size_t k = 0; k < width; ++k) {
      out.identity_error = std::max(out.identity_error, std::abs(direct[k] - out.z_star[t - 1][k]));
    }
  }
  return out;
}

// xi_t = sum_{tau=0}^{t-1} rho^{t-tau} / ((tau+1) h_{tau+1}^d), t = 1..T, via
// xi_t = rho (xi_{t-1} + 1 / (t h_t^d)).
inline std::vector<double> xi_sequence(const BandwidthSchedule& h, std::size_t dim, double rho, std::size_t horizon) {
  if (!(rho > 0.0 && rho < 1.0)) throw InputError("rho must lie in (0, 1)");
  std::vector<double> xi(horizon);
  double acc = 0.0;
  for (std::size_t t = 1; t <= horizon; ++t) {
    const double mass = static_cast<double>(t) * std::pow(h.at(t), static_cast<double>(dim));
    acc = rho * (acc + 1.0 / mass);
    xi[t - 1] = acc;
  }
  return xi;
}

}  // namespace adreg
