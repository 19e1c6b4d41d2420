#pragma once

// Asynchronous execution engine: M workers running Revesz steps on private
// shards, twin-worker queues holding the latest known estimate of every
// worker, and a ring of queues circulating a single snapshot token.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <istream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <ostream>
#include <queue>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <variant>
#include <vector>

#include "adreg/agreement.hpp"
#include "adreg/error.hpp"
#include "adreg/estimator.hpp"
#include "adreg/grid.hpp"

namespace adreg {

using Payload = std::shared_ptr<const std::vector<double>>;

// Worker i computes at local iteration t unless t is a multiple of tau.
inline bool metronome_is_computing(std::size_t tau, std::size_t t) {
  if (tau < 2) throw ConfigError("tau", "metronome period must be at least 2, got " + std::to_string(tau));
  if (t < 1) throw InputError("metronome queried at t < 1");
  return t % tau != 0;
}

// Workers 2k and 2k+1 share queue k.
inline std::size_t queue_of(std::size_t worker) { return worker / 2; }
inline std::size_t queue_count(std::size_t workers) { return (workers + 1) / 2; }

struct EstimateMessage {
  std::size_t sender = 0;
  std::size_t version = 0;  // sender's local iteration right after producing the payload
  Payload payload;
};

using EntryMap = std::map<std::size_t, EstimateMessage>;

struct RingSnapshot {
  EntryMap entries;
};

class QueueState {
 public:
  QueueState(std::size_t id, std::vector<std::size_t> twins) : id_(id), twins_(std::move(twins)) {}

  std::size_t id() const noexcept { return id_; }
  const std::vector<std::size_t>& twins() const noexcept { return twins_; }
  const EntryMap& entries() const noexcept { return entries_; }

  // Stores the message if it is newer than the held entry. Returns false for
  // stale messages, which are dropped.
  bool accept(const EstimateMessage& msg) {
    auto it = entries_.find(msg.sender);
    if (it != entries_.end() && it->second.version >= msg.version) return false;
    entries_[msg.sender] = msg;
    return true;
  }

  // Entrywise max-version merge. Returns the number of entries replaced.
  std::size_t merge(const RingSnapshot& snap) {
    std::size_t changed = 0;
    for (const auto& [sender, msg] : snap.entries) {
      if (accept(msg)) ++changed;
    }
    return changed;
  }

  RingSnapshot snapshot() const { return RingSnapshot{entries_}; }

 private:
  std::size_t id_;
  std::vector<std::size_t> twins_;
  EntryMap entries_;
};

// Worker message: no forward. Ring snapshot: merge, then the full map moves on.
inline std::optional<RingSnapshot> queue_handle_message(QueueState& q,
                                                        const std::variant<EstimateMessage, RingSnapshot>& msg) {
  if (const auto* m = std::get_if<EstimateMessage>(&msg)) {
    q.accept(*m);
    return std::nullopt;
  }
  q.merge(std::get<RingSnapshot>(msg));
  return q.snapshot();
}

// Successor table of the queue ring.
struct Ring {
  std::vector<std::size_t> next;

  static Ring cycle(std::size_t queues) {
    Ring r;
    r.next.resize(queues);
    for (std::size_t k = 0; k < queues; ++k) r.next[k] = (k + 1) % queues;
    return r;
  }

  std::size_t size() const noexcept { return next.size(); }

  // Throws unless the successor links form one cycle through every queue.
  void validate() const {
    if (next.empty()) throw ConfigError("ring", "ring has no queues");
    std::vector<bool> seen(next.size(), false);
    std::size_t q = 0;
    for (std::size_t k = 0; k < next.size(); ++k) {
      if (next[q] >= next.size()) throw ConfigError("ring", "link out of range at queue " + std::to_string(q));
      if (seen[q]) throw ConfigError("ring", "links do not form a single cycle");
      seen[q] = true;
      q = next[q];
    }
    if (q != 0) throw ConfigError("ring", "links do not form a single cycle");
  }

  // Queues receiving the snapshot, in order, when it starts at `start`.
  std::vector<std::size_t> delivery_order(std::size_t start, std::size_t hops) const {
    std::vector<std::size_t> out;
    std::size_t q = start;
    for (std::size_t k = 0; k < hops; ++k) {
      q = next.at(q);
      out.push_back(q);
    }
    return out;
  }
};

inline std::size_t ring_bootstrap(std::size_t queues, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  return std::uniform_int_distribution<std::size_t>(0, queues - 1)(rng);
}

// ---------------------------------------------------------------------------
// Workers
// ---------------------------------------------------------------------------

struct WorkerState {
  std::size_t id = 0;
  EstimateVector estimate;
  std::size_t t = 1;                        // local iteration (metronome position)
  std::vector<std::size_t> used_versions;   // last consumed version per peer
  std::span<const Observation> shard;
  std::size_t cursor = 0;                   // next unread observation
  bool terminal = false;
  std::size_t computes = 0;
  std::size_t averages = 0;
  std::size_t fresh_consumed = 0;

  // Work units: the initial observation and each compute count 1, an average
  // counts 1 plus one per fresh value combined.
  std::size_t work() const { return 1 + computes + averages + fresh_consumed; }
  std::size_t events() const { return computes + averages; }
};

inline WorkerState make_worker(std::size_t id, std::size_t workers, std::span<const Observation> shard,
                               std::shared_ptr<const QueryGrid> grid) {
  if (shard.empty()) throw InputError("worker " + std::to_string(id) + " has an empty shard");
  WorkerState w;
  w.id = id;
  w.estimate = init_estimate(shard.front(), std::move(grid));
  w.used_versions.assign(workers, 0);
  w.shard = shard;
  w.cursor = 1;
  return w;
}

// Revesz step on the next own observation. Writes the increment s into `step`
// and returns the message announcing the new estimate.
inline EstimateMessage worker_compute_step(WorkerState& w, const EstimatorConfig& cfg, std::vector<double>& step) {
  if (w.cursor >= w.shard.size()) throw InputError("worker " + std::to_string(w.id) + " shard exhausted");
  const auto& obs = w.shard[w.cursor++];
  step.resize(w.estimate.values.size());
  revesz_increment(cfg, *w.estimate.grid, w.estimate.values, w.estimate.t + 1, obs, step);
  for (std::size_t k = 0; k < step.size(); ++k) w.estimate.values[k] += step[k];
  ++w.estimate.t;
  ++w.t;
  ++w.computes;
  return EstimateMessage{w.id, w.t, std::make_shared<const std::vector<double>>(w.estimate.values)};
}

// Equal-neighbor mean of the own estimate and the fresh values, summed in
// ascending worker order. `fresh` must be sorted by sender and exclude w.id.
inline void worker_average_step(WorkerState& w, std::span<const EstimateMessage> fresh) {
  ++w.t;
  ++w.averages;
  if (fresh.empty()) return;
  const double weight = 1.0 / static_cast<double>(fresh.size() + 1);
  const std::size_t g = w.estimate.values.size();
  std::vector<double> acc(g, 0.0);
  bool own_done = false;
  auto add = [&](const std::vector<double>& v) {
    for (std::size_t k = 0; k < g; ++k) acc[k] += weight * v[k];
  };
  for (const auto& m : fresh) {
    if (m.payload->size() != g) throw InputError("message payload does not match grid size");
    if (!own_done && w.id < m.sender) {
      add(w.estimate.values);
      own_done = true;
    }
    add(*m.payload);
    w.used_versions[m.sender] = m.version;
  }
  if (!own_done) add(w.estimate.values);
  w.fresh_consumed += fresh.size();
  w.estimate.values = std::move(acc);
}

inline std::vector<EstimateMessage> fresh_messages(const WorkerState& w, const EntryMap& entries) {
  std::vector<EstimateMessage> out;
  for (const auto& [sender, msg] : entries) {
    if (sender != w.id && msg.version > w.used_versions[sender]) out.push_back(msg);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Trace
// ---------------------------------------------------------------------------

enum class EventKind { compute, average, send, forward };

inline std::string_view to_string(EventKind k) {
  switch (k) {
    case EventKind::compute: return "compute";
    case EventKind::average: return "average";
    case EventKind::send: return "send";
    case EventKind::forward: return "forward";
  }
  return "?";
}

inline EventKind parse_event_kind(std::string_view s) {
  if (s == "compute") return EventKind::compute;
  if (s == "average") return EventKind::average;
  if (s == "send") return EventKind::send;
  if (s == "forward") return EventKind::forward;
  throw InputError("unknown trace event kind '" + std::string(s) + "'");
}

inline bool is_worker_event(EventKind k) { return k == EventKind::compute || k == EventKind::average; }

// actor: worker id for compute/average, queue id for send/forward.
// position: local iteration for worker events, the message version for send,
// the receiving queue for forward.
struct TraceRecord {
  std::size_t index = 0;
  EventKind kind = EventKind::compute;
  std::size_t actor = 0;
  std::size_t position = 0;
  std::vector<std::pair<std::size_t, std::size_t>> consumed;  // (sender, version)

  friend bool operator==(const TraceRecord&, const TraceRecord&) = default;
};

struct RunTrace {
  std::size_t workers = 0;
  std::size_t queues = 0;
  std::vector<TraceRecord> records;

  // Filled only when payload recording is on: one entry per worker event in
  // index order (steps are null for averages), and each worker's r_1.
  std::vector<Payload> steps;
  std::vector<Payload> values;
  std::vector<std::vector<double>> initial;
};

inline void write_trace(std::ostream& out, const RunTrace& trace) {
  out << "# adreg-trace v1 workers=" << trace.workers << " queues=" << trace.queues << "\n";
  out << "# index kind actor position consumed\n";
  for (const auto& r : trace.records) {
    out << r.index << ' ' << to_string(r.kind) << ' ' << r.actor << ' ' << r.position << ' ';
    if (r.consumed.empty()) {
      out << '-';
    } else {
      for (std::size_t k = 0; k < r.consumed.size(); ++k) {
        out << (k ? "," : "") << r.consumed[k].first << ':' << r.consumed[k].second;
      }
    }
    out << '\n';
  }
}

inline RunTrace read_trace(std::istream& in) {
  RunTrace trace;
  std::string line;
  if (!std::getline(in, line) || line.rfind("# adreg-trace v1", 0) != 0) throw InputError("missing trace header");
  {
    std::istringstream fields(line.substr(16));
    std::string kv;
    while (fields >> kv) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) continue;
      const auto key = kv.substr(0, eq);
      const auto value = std::stoul(kv.substr(eq + 1));
      if (key == "workers") trace.workers = value;
      if (key == "queues") trace.queues = value;
    }
  }
  if (trace.workers == 0) throw InputError("trace header lacks worker count");
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream fields(line);
    TraceRecord r;
    std::string kind, consumed;
    if (!(fields >> r.index >> kind >> r.actor >> r.position >> consumed)) {
      throw InputError("malformed trace record at line " + std::to_string(line_no));
    }
    r.kind = parse_event_kind(kind);
    if (consumed != "-") {
      std::istringstream items(consumed);
      std::string item;
      while (std::getline(items, item, ',')) {
        const auto colon = item.find(':');
        if (colon == std::string::npos) throw InputError("malformed consumed entry at line " + std::to_string(line_no));
        r.consumed.emplace_back(std::stoul(item.substr(0, colon)), std::stoul(item.substr(colon + 1)));
      }
    }
    trace.records.push_back(std::move(r));
  }
  return trace;
}

// ---------------------------------------------------------------------------
// Simulation
// ---------------------------------------------------------------------------

enum class RunMode { deterministic, concurrent };

inline std::string_view to_string(RunMode m) { return m == RunMode::deterministic ? "deterministic" : "concurrent"; }

inline RunMode parse_run_mode(std::string_view s) {
  if (s == "deterministic") return RunMode::deterministic;
  if (s == "concurrent") return RunMode::concurrent;
  throw ConfigError("mode", "unknown mode '" + std::string(s) + "'");
}

struct SimulationConfig {
  std::size_t workers = 1;
  std::size_t tau = 2;
  std::uint64_t seed = 1;
  RunMode mode = RunMode::deterministic;
  std::size_t max_delay = 0;        // B1 bound on worker->queue delays, scheduler ticks
  std::size_t snapshot_every = 1000;  // worker events between snapshots
  std::size_t snapshot_ms = 0;      // concurrent mode: wall-clock cadence instead (0 = off)
  bool record_payloads = false;
  EstimatorConfig estimator;

  void validate() const {
    if (workers < 1) throw ConfigError("M", "at least one worker is required");
    if (tau < 2) throw ConfigError("tau", "metronome period must be at least 2");
    if (snapshot_every < 1) throw ConfigError("snapshot_every", "must be positive");
  }
};

struct Snapshot {
  std::size_t worker_events = 0;
  std::size_t consumed = 0;  // observations absorbed by all workers, including initial ones
  std::vector<Payload> estimates;
};

struct RuntimeStats {
  std::size_t worker_events = 0;
  std::size_t ticks = 0;
  std::size_t idle_ticks = 0;
  std::size_t messages_sent = 0;
  std::size_t messages_dropped = 0;
  std::size_t ring_hops = 0;
  std::size_t write_conflicts = 0;
  std::size_t entry_writes = 0;
  double max_abs_estimate = 0.0;
  std::size_t out_of_unit_range = 0;  // estimate components outside [-1, 1]
  double wall_seconds = 0.0;
};

struct RunResult {
  std::vector<WorkerState> workers;
  RunTrace trace;
  std::vector<Snapshot> snapshots;
  RuntimeStats stats;
};

// Seen after every worker event. `instant` is the 1-based position of the
// event among worker events.
struct WorkerEvent {
  std::size_t instant = 0;
  std::size_t worker = 0;
  EventKind kind = EventKind::compute;
  const std::vector<double>* step = nullptr;  // compute only
  const std::vector<double>* value = nullptr; // estimate after the event
  const std::vector<std::pair<std::size_t, std::size_t>>* consumed = nullptr;
};

using WorkerObserver = std::function<void(const WorkerEvent&)>;

namespace detail {

inline void note_values(RuntimeStats& stats, const std::vector<double>& v) {
  for (double x : v) {
    stats.max_abs_estimate = std::max(stats.max_abs_estimate, std::abs(x));
    if (x < -1.0 || x > 1.0) ++stats.out_of_unit_range;
  }
}

inline Snapshot take_snapshot(const std::vector<WorkerState>& workers, std::size_t events) {
  Snapshot s;
  s.worker_events = events;
  for (const auto& w : workers) {
    s.consumed += w.cursor;
    s.estimates.push_back(std::make_shared<const std::vector<double>>(w.estimate.values));
  }
  return s;
}

inline std::vector<WorkerState> make_workers(const SimulationConfig& cfg, std::span<const std::vector<Observation>> shards,
                                             const std::shared_ptr<const QueryGrid>& grid) {
  if (shards.size() != cfg.workers) {
    throw InputError("expected " + std::to_string(cfg.workers) + " shards, got " + std::to_string(shards.size()));
  }
  std::vector<WorkerState> workers;
  for (std::size_t i = 0; i < cfg.workers; ++i) workers.push_back(make_worker(i, cfg.workers, shards[i], grid));
  return workers;
}

inline void record_initial(RunTrace& trace, const std::vector<WorkerState>& workers) {
  for (const auto& w : workers) trace.initial.push_back(w.estimate.values);
}

inline RunResult run_deterministic(const SimulationConfig& cfg, std::span<const std::vector<Observation>> shards,
                                   const std::shared_ptr<const QueryGrid>& grid, const WorkerObserver& observer) {
  const auto started = std::chrono::steady_clock::now();
  RunResult res;
  res.workers = make_workers(cfg, shards, grid);
  const std::size_t m = cfg.workers;
  const std::size_t nq = queue_count(m);
  std::vector<QueueState> queues;
  for (std::size_t q = 0; q < nq; ++q) {
    std::vector<std::size_t> twins{2 * q};
    if (2 * q + 1 < m) twins.push_back(2 * q + 1);
    queues.emplace_back(q, twins);
  }
  const Ring ring = Ring::cycle(nq);
  ring.validate();
  res.trace.workers = m;
  res.trace.queues = nq;
  if (cfg.record_payloads) record_initial(res.trace, res.workers);
  for (const auto& w : res.workers) note_values(res.stats, w.estimate.values);

  std::mt19937_64 rng(cfg.seed);
  std::size_t token_at = ring_bootstrap(nq, cfg.seed);
  const bool token_live = nq > 1;

  struct InFlight {
    std::size_t due;
    std::size_t seq;
    std::size_t queue;
    EstimateMessage msg;
  };
  auto later = [](const InFlight& a, const InFlight& b) { return a.due != b.due ? a.due > b.due : a.seq > b.seq; };
  std::priority_queue<InFlight, std::vector<InFlight>, decltype(later)> pending(later);
  std::vector<InFlight> ready;
  std::vector<std::size_t> active(m);
  for (std::size_t i = 0; i < m; ++i) active[i] = i;

  std::size_t index = 0, seq = 0, events = 0, tick = 0;
  std::vector<double> step;
  std::uniform_int_distribution<std::size_t> delay(0, cfg.max_delay);

  auto record = [&](TraceRecord r) {
    r.index = ++index;
    res.trace.records.push_back(std::move(r));
  };

  auto after_worker_event = [&](WorkerState& w, EventKind kind, const std::vector<std::pair<std::size_t, std::size_t>>& consumed,
                                const std::vector<double>* s) {
    ++events;
    note_values(res.stats, w.estimate.values);
    if (cfg.record_payloads) {
      res.trace.steps.push_back(s ? std::make_shared<const std::vector<double>>(*s) : nullptr);
      res.trace.values.push_back(std::make_shared<const std::vector<double>>(w.estimate.values));
    }
    if (observer) observer(WorkerEvent{events, w.id, kind, s, &w.estimate.values, &consumed});
    if (events % cfg.snapshot_every == 0) res.snapshots.push_back(take_snapshot(res.workers, events));
  };

  for (;; ++tick) {
    while (!pending.empty() && pending.top().due <= tick) {
      ready.push_back(pending.top());
      pending.pop();
    }
    if (active.empty() && ready.empty() && pending.empty()) break;
    const std::size_t choices = active.size() + ready.size() + (token_live && !active.empty() ? 1 : 0);
    if (choices == 0) {
      ++res.stats.idle_ticks;
      continue;
    }
    const std::size_t pick = std::uniform_int_distribution<std::size_t>(0, choices - 1)(rng);

    if (pick < active.size()) {
      auto& w = res.workers[active[pick]];
      const std::size_t position = w.t;
      if (metronome_is_computing(cfg.tau, w.t)) {
        if (w.cursor >= w.shard.size()) {
          w.terminal = true;
          active.erase(active.begin() + static_cast<std::ptrdiff_t>(pick));
          continue;
        }
        auto msg = worker_compute_step(w, cfg.estimator, step);
        record({0, EventKind::compute, w.id, position, {}});
        ++res.stats.messages_sent;
        pending.push(InFlight{tick + 1 + delay(rng), seq++, queue_of(w.id), std::move(msg)});
        after_worker_event(w, EventKind::compute, {}, &step);
      } else {
        const auto fresh = fresh_messages(w, queues[queue_of(w.id)].entries());
        std::vector<std::pair<std::size_t, std::size_t>> consumed;
        for (const auto& f : fresh) consumed.emplace_back(f.sender, f.version);
        worker_average_step(w, fresh);
        record({0, EventKind::average, w.id, position, consumed});
        after_worker_event(w, EventKind::average, consumed, nullptr);
      }
    } else if (pick < active.size() + ready.size()) {
      const std::size_t k = pick - active.size();
      InFlight f = std::move(ready[k]);
      ready[k] = std::move(ready.back());
      ready.pop_back();
      ++res.stats.entry_writes;
      if (!queues[f.queue].accept(f.msg)) ++res.stats.messages_dropped;
      record({0, EventKind::send, f.queue, f.msg.version, {{f.msg.sender, f.msg.version}}});
    } else {
      const std::size_t to = ring.next[token_at];
      queues[to].merge(queues[token_at].snapshot());
      ++res.stats.ring_hops;
      record({0, EventKind::forward, token_at, to, {}});
      token_at = to;
    }
  }

  res.stats.ticks = tick;
  res.stats.worker_events = events;
  if (res.snapshots.empty() || res.snapshots.back().worker_events != events) {
    res.snapshots.push_back(take_snapshot(res.workers, events));
  }
  res.stats.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return res;
}

// Unbounded multi-producer channel.
template <class T>
class Channel {
 public:
  void send(T value) {
    {
      std::lock_guard lock(mutex_);
      items_.push_back(std::move(value));
    }
    ready_.notify_one();
  }

  T receive() {
    std::unique_lock lock(mutex_);
    ready_.wait(lock, [&] { return !items_.empty(); });
    T value = std::move(items_.front());
    items_.pop_front();
    return value;
  }

 private:
  std::mutex mutex_;
  std::condition_variable ready_;
  std::deque<T> items_;
};

struct FetchRequest {
  std::size_t worker = 0;
  std::shared_ptr<Channel<EntryMap>> reply;
};

struct Stop {};

using QueueInput = std::variant<EstimateMessage, RingSnapshot, FetchRequest, Stop>;

// Write epochs of one queue map: odd while a write is in progress.
class WriteEpochs {
 public:
  explicit WriteEpochs(std::size_t slots) : epochs_(slots) {}

  template <class Fn>
  void write(std::size_t slot, std::atomic<std::size_t>& conflicts, Fn&& fn) {
    if (epochs_[slot].fetch_add(1) % 2 != 0) conflicts.fetch_add(1);
    fn();
    epochs_[slot].fetch_add(1);
  }

 private:
  std::vector<std::atomic<std::uint64_t>> epochs_;
};

struct ActorLog {
  std::vector<TraceRecord> records;
  std::vector<Payload> steps;   // parallel to worker records when recording
  std::vector<Payload> values;
};

inline RunResult run_concurrent(const SimulationConfig& cfg, std::span<const std::vector<Observation>> shards,
                                const std::shared_ptr<const QueryGrid>& grid) {
  using clock = std::chrono::steady_clock;
  const auto started = clock::now();
  RunResult res;
  res.workers = make_workers(cfg, shards, grid);
  const std::size_t m = cfg.workers;
  const std::size_t nq = queue_count(m);
  const Ring ring = Ring::cycle(nq);
  ring.validate();
  res.trace.workers = m;
  res.trace.queues = nq;
  if (cfg.record_payloads) record_initial(res.trace, res.workers);
  for (const auto& w : res.workers) detail::note_values(res.stats, w.estimate.values);

  std::atomic<std::size_t> counter{0};
  std::atomic<std::size_t> conflicts{0};
  std::atomic<std::size_t> ring_hops{0}, dropped{0}, writes{0};
  std::vector<std::unique_ptr<Channel<QueueInput>>> inbox;
  for (std::size_t q = 0; q < nq; ++q) inbox.push_back(std::make_unique<Channel<QueueInput>>());
  std::vector<ActorLog> worker_logs(m), queue_logs(nq);

  struct WorkerSnap {
    std::size_t key;
    std::size_t events;
    std::size_t consumed;
    Payload values;
  };
  std::vector<std::vector<WorkerSnap>> worker_snaps(m);
  std::vector<RuntimeStats> worker_stats(m);
  const std::size_t own_every = std::max<std::size_t>(1, cfg.snapshot_every / m);

  auto queue_main = [&](std::size_t q) {
    QueueState state(q, {});
    WriteEpochs epochs(m);
    auto& log = queue_logs[q];
    auto store = [&](const EstimateMessage& msg) {
      bool stored = false;
      epochs.write(msg.sender, conflicts, [&] { stored = state.accept(msg); });
      writes.fetch_add(1);
      return stored;
    };
    for (;;) {
      QueueInput input = inbox[q]->receive();
      if (std::holds_alternative<Stop>(input)) return;
      if (auto* msg = std::get_if<EstimateMessage>(&input)) {
        if (!store(*msg)) dropped.fetch_add(1);
        log.records.push_back({counter.fetch_add(1) + 1, EventKind::send, q, msg->version, {{msg->sender, msg->version}}});
      } else if (auto* fetch = std::get_if<FetchRequest>(&input)) {
        fetch->reply->send(state.entries());
      } else {
        auto& snap = std::get<RingSnapshot>(input);
        std::size_t changed = 0;
        for (const auto& [sender, msg] : snap.entries) changed += store(msg) ? 1 : 0;
        if (nq == 1) continue;
        if (changed == 0) std::this_thread::sleep_for(std::chrono::microseconds(75));
        const std::size_t to = ring.next[q];
        log.records.push_back({counter.fetch_add(1) + 1, EventKind::forward, q, to, {}});
        ring_hops.fetch_add(1);
        inbox[to]->send(state.snapshot());
      }
    }
  };

  auto worker_main = [&](std::size_t i) {
    auto& w = res.workers[i];
    auto& log = worker_logs[i];
    auto& stats = worker_stats[i];
    auto reply = std::make_shared<Channel<EntryMap>>();
    std::vector<double> step;
    std::size_t next_key = 1;
    auto snap = [&](std::size_t key) {
      worker_snaps[i].push_back({key, w.events(), w.cursor, std::make_shared<const std::vector<double>>(w.estimate.values)});
    };
    for (;;) {
      const std::size_t position = w.t;
      if (metronome_is_computing(cfg.tau, w.t)) {
        if (w.cursor >= w.shard.size()) break;
        auto msg = worker_compute_step(w, cfg.estimator, step);
        log.records.push_back({counter.fetch_add(1) + 1, EventKind::compute, i, position, {}});
        if (cfg.record_payloads) log.steps.push_back(std::make_shared<const std::vector<double>>(step));
        ++stats.messages_sent;
        inbox[queue_of(i)]->send(std::move(msg));
      } else {
        inbox[queue_of(i)]->send(FetchRequest{i, reply});
        EntryMap entries = reply->receive();
        const std::size_t idx = counter.fetch_add(1) + 1;
        const auto fresh = fresh_messages(w, entries);
        std::vector<std::pair<std::size_t, std::size_t>> consumed;
        for (const auto& f : fresh) consumed.emplace_back(f.sender, f.version);
        worker_average_step(w, fresh);
        log.records.push_back({idx, EventKind::average, i, position, consumed});
        if (cfg.record_payloads) log.steps.push_back(nullptr);
      }
      if (cfg.record_payloads) log.values.push_back(std::make_shared<const std::vector<double>>(w.estimate.values));
      detail::note_values(stats, w.estimate.values);
      if (cfg.snapshot_ms > 0) {
        const auto elapsed = std::chrono::duration_cast<std::chrono::milliseconds>(clock::now() - started).count();
        const auto key = static_cast<std::size_t>(elapsed) / cfg.snapshot_ms;
        if (key >= next_key) {
          snap(key);
          next_key = key + 1;
        }
      } else if (w.events() % own_every == 0) {
        snap(w.events() / own_every);
      }
    }
    w.terminal = true;
  };

  std::vector<std::thread> queue_threads, worker_threads;
  for (std::size_t q = 0; q < nq; ++q) queue_threads.emplace_back(queue_main, q);
  if (nq > 1) inbox[ring_bootstrap(nq, cfg.seed)]->send(RingSnapshot{});
  for (std::size_t i = 0; i < m; ++i) worker_threads.emplace_back(worker_main, i);
  for (auto& t : worker_threads) t.join();
  for (auto& box : inbox) box->send(Stop{});
  for (auto& t : queue_threads) t.join();

  // Merge per-actor logs by global index.
  struct Tagged {
    TraceRecord record;
    Payload step, value;
  };
  std::vector<Tagged> all;
  for (auto& log : worker_logs) {
    for (std::size_t k = 0; k < log.records.size(); ++k) {
      all.push_back({std::move(log.records[k]), cfg.record_payloads ? log.steps[k] : nullptr,
                     cfg.record_payloads ? log.values[k] : nullptr});
    }
  }
  for (auto& log : queue_logs) {
    for (auto& r : log.records) all.push_back({std::move(r), nullptr, nullptr});
  }
  std::sort(all.begin(), all.end(), [](const Tagged& a, const Tagged& b) { return a.record.index < b.record.index; });
  for (auto& t : all) {
    if (cfg.record_payloads && is_worker_event(t.record.kind)) {
      res.trace.steps.push_back(t.step);
      res.trace.values.push_back(t.value);
    }
    res.trace.records.push_back(std::move(t.record));
  }

  // Group per-worker snapshots by key; a worker without a snapshot at a key
  // contributes its latest earlier one.
  std::size_t max_key = 0;
  for (const auto& snaps : worker_snaps) {
    if (!snaps.empty()) max_key = std::max(max_key, snaps.back().key);
  }
  std::vector<std::size_t> pos(m, 0);
  std::vector<WorkerSnap> current(m);
  for (std::size_t i = 0; i < m; ++i) {
    current[i] = {0, 0, 1, std::make_shared<const std::vector<double>>(res.trace.initial.empty()
                                                                            ? init_estimate(shards[i].front(), grid).values
                                                                            : res.trace.initial[i])};
  }
  for (std::size_t key = 1; key <= max_key; ++key) {
    bool any = false;
    for (std::size_t i = 0; i < m; ++i) {
      while (pos[i] < worker_snaps[i].size() && worker_snaps[i][pos[i]].key <= key) {
        current[i] = worker_snaps[i][pos[i]++];
        any = true;
      }
    }
    if (!any) continue;
    Snapshot s;
    for (const auto& c : current) {
      s.worker_events += c.events;
      s.consumed += c.consumed;
      s.estimates.push_back(c.values);
    }
    res.snapshots.push_back(std::move(s));
  }
  std::size_t events = 0;
  for (const auto& w : res.workers) events += w.events();
  res.snapshots.push_back(detail::take_snapshot(res.workers, events));

  res.stats.worker_events = events;
  res.stats.write_conflicts = conflicts.load();
  res.stats.ring_hops = ring_hops.load();
  res.stats.messages_dropped = dropped.load();
  res.stats.entry_writes = writes.load();
  for (const auto& s : worker_stats) {
    res.stats.messages_sent += s.messages_sent;
    res.stats.max_abs_estimate = std::max(res.stats.max_abs_estimate, s.max_abs_estimate);
    res.stats.out_of_unit_range += s.out_of_unit_range;
  }
  res.stats.wall_seconds = std::chrono::duration<double>(clock::now() - started).count();
  return res;
}

}  // namespace detail

inline RunResult run_simulation(const SimulationConfig& cfg, std::span<const std::vector<Observation>> shards,
                                std::shared_ptr<const QueryGrid> grid, const WorkerObserver& observer = {}) {
  cfg.validate();
  if (!grid || grid->empty()) throw InputError("query grid must not be empty");
  if (cfg.mode == RunMode::deterministic) return detail::run_deterministic(cfg, shards, grid, observer);
  if (observer) throw InputError("worker observers are only supported in deterministic mode");
  return detail::run_concurrent(cfg, shards, grid);
}

// ---------------------------------------------------------------------------
// Trace -> linear model
// ---------------------------------------------------------------------------

// Worker events become instants t = 1..E in index order; the horizon is E + 1.
// Acting compute events and every non-acting agent get identity rows (and
// are members of T^i with a zero step unless they computed); an average gets
// equal weights over itself and the consumed senders. A consumed version v of
// worker j is the value produced by j's (v-1)-th event (v = 1: the initial
// value), valid until j's next event, so tau = min(t, instant of j's v-th event).
inline CommSchedule trace_to_comm_schedule(const RunTrace& trace) {
  const std::size_t m = trace.workers;
  if (m == 0) throw IntegrityError("trace has no workers");
  std::vector<const TraceRecord*> events;
  std::size_t last_index = 0;
  for (const auto& r : trace.records) {
    if (r.index <= last_index) throw IntegrityError("trace indices not increasing at event " + std::to_string(r.index));
    last_index = r.index;
    if (!is_worker_event(r.kind)) continue;
    if (r.actor >= m) throw IntegrityError("event " + std::to_string(r.index) + ": worker out of range");
    events.push_back(&r);
  }
  const std::size_t horizon = events.size() + 1;

  // instants_of[j][k] = instant of worker j's (k+1)-th event.
  std::vector<std::vector<std::size_t>> instants_of(m);
  for (std::size_t t = 1; t <= events.size(); ++t) {
    const auto& r = *events[t - 1];
    auto& mine = instants_of[r.actor];
    if (r.position != mine.size() + 1) {
      throw IntegrityError("event " + std::to_string(r.index) + ": worker " + std::to_string(r.actor) +
                           " local iteration " + std::to_string(r.position) + " out of sequence");
    }
    mine.push_back(t);
  }

  CommSchedule s(m, horizon);
  for (std::size_t t = 1; t <= horizon; ++t) {
    for (std::size_t i = 0; i < m; ++i) s.set_computing(t, i, true);
  }
  std::vector<std::size_t> seen(m, 0);
  for (std::size_t t = 1; t <= events.size(); ++t) {
    const auto& r = *events[t - 1];
    const std::size_t i = r.actor;
    ++seen[i];
    if (r.kind == EventKind::compute) {
      if (!r.consumed.empty()) throw IntegrityError("event " + std::to_string(r.index) + ": compute consumed values");
      continue;
    }
    if (r.consumed.empty()) continue;
    std::vector<Link> links;
    const double w = 1.0 / static_cast<double>(r.consumed.size() + 1);
    links.push_back({i, w, t});
    for (const auto& [j, v] : r.consumed) {
      if (j >= m || j == i) {
        throw IntegrityError("event " + std::to_string(r.index) + ": invalid consumed sender " + std::to_string(j));
      }
      if (v < 1) throw IntegrityError("event " + std::to_string(r.index) + ": version 0 does not exist");
      const auto& prod = instants_of[j];
      const std::size_t produced_at = v == 1 ? 0 : (v - 1 <= prod.size() ? prod[v - 2] : horizon + 1);
      if (produced_at >= t) {
        throw IntegrityError("event " + std::to_string(r.index) + ": worker " + std::to_string(i) +
                             " consumed version " + std::to_string(v) + " of worker " + std::to_string(j) +
                             " before it was produced");
      }
      const std::size_t valid_until = v - 1 < prod.size() ? prod[v - 1] : horizon;
      links.push_back({j, w, std::min(t, valid_until)});
    }
    s.set_row(t, i, std::move(links));
    s.set_computing(t, i, false);
  }
  const auto realized = measure_constants(s);
  s.declared = {realized.alpha, realized.b1, realized.b2};
  return s;
}

// Schedule plus the recorded steps and initial values (needs payloads).
inline std::pair<CommSchedule, StepLog> trace_to_schedule(const RunTrace& trace) {
  auto s = trace_to_comm_schedule(trace);
  if (trace.initial.size() != trace.workers) throw IntegrityError("trace carries no recorded payloads");
  const std::size_t width = trace.initial.front().size();
  StepLog log(trace.workers, s.horizon(), width);
  for (std::size_t i = 0; i < trace.workers; ++i) log.set_initial(i, trace.initial[i]);
  std::size_t t = 0;
  for (const auto& r : trace.records) {
    if (!is_worker_event(r.kind)) continue;
    ++t;
    if (t > trace.steps.size()) throw IntegrityError("trace payloads shorter than its event list");
    if (r.kind == EventKind::compute) {
      if (!trace.steps[t - 1]) throw IntegrityError("compute event without recorded step");
      log.set_step(t, r.actor, trace.steps[t - 1]);
    }
  }
  return {std::move(s), std::move(log)};
}

struct Divergence {
  std::size_t event_index = 0;
  std::size_t worker = 0;
  std::size_t grid_index = 0;
  double expected = 0.0;  // linear model
  double actual = 0.0;    // runtime
  std::string reason;

  std::string to_string() const {
    std::ostringstream out;
    out.precision(17);
    out << "event " << event_index << ", worker " << worker << ", grid index " << grid_index << ": " << reason;
    if (reason == "value mismatch") out << " (replay " << expected << ", runtime " << actual << ")";
    return out.str();
  }
};

struct ReplayReport {
  bool ok = false;
  std::size_t events_checked = 0;
  double max_abs_error = 0.0;
  std::optional<Divergence> divergence;
  std::string error;  // integrity failure, if any
};

// Compares linear-model values after each worker event with the runtime's.
class ReplayVerifier {
 public:
  ReplayVerifier(const CommSchedule& schedule, std::vector<std::size_t> event_indices,
                 const std::vector<std::vector<double>>& initial, double tolerance = 1e-12)
      : schedule_(schedule), indices_(std::move(event_indices)), model_(initial), tolerance_(tolerance) {}

  // Feeds the runtime's event at instant t (which must equal model time).
  void observe(std::size_t worker, const std::vector<double>* step, const std::vector<double>& value) {
    if (report_.divergence) return;
    const std::size_t t = model_.time();
    if (t >= schedule_.horizon()) {
      report_.divergence = Divergence{0, worker, 0, 0, 0, "runtime produced more events than the trace"};
      return;
    }
    model_.advance(schedule_, [&](std::size_t i) { return i == worker ? step : nullptr; });
    const auto& z = model_.value(worker, t + 1);
    for (std::size_t k = 0; k < z.size(); ++k) {
      const double err = std::abs(z[k] - value[k]);
      report_.max_abs_error = std::max(report_.max_abs_error, err);
      if (!(err <= tolerance_)) {
        report_.divergence = Divergence{indices_[t - 1], worker, k, z[k], value[k], "value mismatch"};
        return;
      }
    }
    ++report_.events_checked;
    if (t > schedule_.declared.b1 + 1) model_.prune_before(t + 1 - schedule_.declared.b1);
  }

  void mismatch(std::size_t t, std::size_t worker, std::string reason) {
    if (!report_.divergence) report_.divergence = Divergence{indices_.at(t - 1), worker, 0, 0, 0, std::move(reason)};
  }

  ReplayReport finish() {
    if (!report_.divergence && report_.events_checked + 1 != schedule_.horizon()) {
      report_.divergence = Divergence{0, 0, 0, 0, 0, "runtime produced fewer events than the trace"};
    }
    report_.ok = !report_.divergence;
    return report_;
  }

  bool diverged() const { return report_.divergence.has_value(); }

 private:
  const CommSchedule& schedule_;
  std::vector<std::size_t> indices_;
  LinearModel model_;
  double tolerance_;
  ReplayReport report_;
};

inline std::vector<std::size_t> worker_event_indices(const RunTrace& trace) {
  std::vector<std::size_t> out;
  for (const auto& r : trace.records) {
    if (is_worker_event(r.kind)) out.push_back(r.index);
  }
  return out;
}

// Replays a trace carrying recorded payloads against its own recorded values.
inline ReplayReport verify_recorded(const RunTrace& trace, double tolerance = 1e-12) {
  ReplayReport failed;
  try {
    const auto schedule = trace_to_comm_schedule(trace);
    if (trace.initial.size() != trace.workers || trace.values.size() + 1 != schedule.horizon()) {
      throw IntegrityError("trace carries no recorded payloads");
    }
    ReplayVerifier v(schedule, worker_event_indices(trace), trace.initial, tolerance);
    std::size_t t = 0;
    for (const auto& r : trace.records) {
      if (!is_worker_event(r.kind)) continue;
      v.observe(r.actor, trace.steps[t].get(), *trace.values[t]);
      ++t;
      if (v.diverged()) break;
    }
    return v.finish();
  } catch (const IntegrityError& e) {
    failed.error = e.what();
    return failed;
  }
}

// Reruns the deterministic simulation described by `cfg` and checks every
// worker event against the linear-model replay of `trace`.
inline ReplayReport verify_replay(const RunTrace& trace, const SimulationConfig& cfg,
                                  std::span<const std::vector<Observation>> shards,
                                  std::shared_ptr<const QueryGrid> grid, double tolerance = 1e-12) {
  ReplayReport failed;
  if (cfg.mode != RunMode::deterministic) throw InputError("replay verification reruns deterministic mode only");
  if (trace.workers != cfg.workers) {
    failed.error = "trace has " + std::to_string(trace.workers) + " workers, config has " + std::to_string(cfg.workers);
    return failed;
  }
  try {
    const auto schedule = trace_to_comm_schedule(trace);
    std::vector<std::vector<double>> initial;
    for (std::size_t i = 0; i < cfg.workers; ++i) initial.push_back(init_estimate(shards[i].front(), grid).values);
    const auto indices = worker_event_indices(trace);
    std::vector<const TraceRecord*> records;
    for (const auto& r : trace.records) {
      if (is_worker_event(r.kind)) records.push_back(&r);
    }
    ReplayVerifier v(schedule, indices, initial, tolerance);
    SimulationConfig run_cfg = cfg;
    run_cfg.record_payloads = false;
    run_simulation(run_cfg, shards, grid, [&](const WorkerEvent& e) {
      if (v.diverged()) return;
      if (e.instant <= records.size()) {
        const auto& r = *records[e.instant - 1];
        if (r.actor != e.worker || r.kind != e.kind) {
          v.mismatch(e.instant, e.worker, "trace records " + std::string(to_string(r.kind)) + " by worker " +
                                              std::to_string(r.actor) + ", runtime performed " +
                                              std::string(to_string(e.kind)));
          return;
        }
      }
      v.observe(e.worker, e.step, *e.value);
    });
    return v.finish();
  } catch (const IntegrityError& e) {
    failed.error = e.what();
    return failed;
  }
}

}  // namespace adreg
