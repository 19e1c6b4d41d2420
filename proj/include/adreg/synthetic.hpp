#pragma once

// Synthetic regression models, designs, truncation and sharding.

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <memory>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "adreg/error.hpp"
#include "adreg/grid.hpp"

namespace adreg {

enum class DesignKind { uniform, gaussian };

inline std::string_view to_string(DesignKind k) { return k == DesignKind::uniform ? "uniform" : "gaussian"; }

inline DesignKind parse_design_kind(std::string_view s) {
  if (s == "uniform") return DesignKind::uniform;
  if (s == "gaussian") return DesignKind::gaussian;
  throw InputError("unknown design '" + std::string(s) + "'");
}

// Uniform on (0,1)^d, or N(0, S) with S_ij = 2^-|i-j|.
class DesignSpec {
 public:
  DesignSpec(DesignKind kind, std::size_t dim) : kind_(kind), dim_(dim) {
    if (dim < 1) throw InputError("design dimension must be at least 1");
    if (kind == DesignKind::gaussian) {
      cov_.resize(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(dim));
      for (std::size_t i = 0; i < dim; ++i)
        for (std::size_t j = 0; j < dim; ++j)
          cov_(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
              std::ldexp(1.0, -static_cast<int>(i > j ? i - j : j - i));
      Eigen::LLT<Eigen::MatrixXd> llt(cov_);
      if (llt.info() != Eigen::Success) throw InputError("design covariance is not positive definite");
      factor_ = llt.matrixL();
    }
  }

  DesignKind kind() const noexcept { return kind_; }
  std::size_t dim() const noexcept { return dim_; }
  const Eigen::MatrixXd& covariance() const noexcept { return cov_; }
  // Lower-triangular L with L L^T = covariance.
  const Eigen::MatrixXd& factor() const noexcept { return factor_; }

 private:
  DesignKind kind_;
  std::size_t dim_;
  Eigen::MatrixXd cov_;
  Eigen::MatrixXd factor_;
};

inline std::vector<Point> sample_design(const DesignSpec& spec, std::size_t n, std::uint64_t seed) {
  if (n < 1) throw InputError("sample size must be at least 1");
  std::mt19937_64 rng(seed);
  std::vector<Point> out;
  out.reserve(n);
  const std::size_t d = spec.dim();
  if (spec.kind() == DesignKind::uniform) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (std::size_t k = 0; k < n; ++k) {
      Point x(d);
      for (auto& v : x) {
        do {
          v = u(rng);
        } while (v <= 0.0);
      }
      out.push_back(std::move(x));
    }
  } else {
    std::normal_distribution<double> g;
    Eigen::VectorXd z(static_cast<Eigen::Index>(d));
    for (std::size_t k = 0; k < n; ++k) {
      for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = g(rng);
      const Eigen::VectorXd x = spec.factor() * z;
      out.emplace_back(x.data(), x.data() + x.size());
    }
  }
  return out;
}

inline std::size_t model_dimension(int model) {
  switch (model) {
    case 1: return 2;
    case 2:
    case 3: return 4;
    default: throw InputError("unknown model " + std::to_string(model));
  }
}

inline constexpr double noise_variance = 0.05;

// Noise-free part of the response.
inline double regression_function(int model, std::span<const double> x) {
  if (x.size() != model_dimension(model)) {
    throw InputError("model " + std::to_string(model) + " expects dimension " + std::to_string(model_dimension(model)) +
                     ", got " + std::to_string(x.size()));
  }
  switch (model) {
    case 1: return x[0] * x[0] + std::exp(-x[1] * x[1]);
    case 2: return x[0] * x[1] + x[2] * x[2] - x[3];
    default:
      return (x[0] > 0.0 ? 1.0 : 0.0) + (x[3] - x[1] > 1.0 + x[2] ? 1.0 : 0.0) + x[1] * x[1] * x[1] +
             std::exp(-x[1] * x[1]);
  }
}

// y for a standard normal draw `noise` (ignored by model 1), or nullopt when
// |y| > 1 and the observation is discarded.
inline std::optional<double> response(int model, std::span<const double> x, double noise) {
  double y = regression_function(model, x);
  if (model != 1) y += std::sqrt(noise_variance) * noise;
  if (std::abs(y) > 1.0) return std::nullopt;
  return y;
}

struct Dataset {
  std::vector<Observation> observations;  // kept, in generation order
  std::size_t generated = 0;
  std::size_t dropped = 0;
};

inline Dataset generate_dataset(int model, DesignKind design, std::size_t n, std::uint64_t seed) {
  const DesignSpec spec(design, model_dimension(model));
  auto xs = sample_design(spec, n, seed);
  std::mt19937_64 noise_rng(seed ^ 0xd1b54a32d192ed03ULL);
  std::normal_distribution<double> g;
  Dataset out;
  out.generated = n;
  for (auto& x : xs) {
    const double e = g(noise_rng);
    if (auto y = response(model, x, e)) {
      out.observations.push_back({std::move(x), *y});
    } else {
      ++out.dropped;
    }
  }
  return out;
}

struct ShardedDataset {
  std::vector<std::vector<Observation>> shards;
  std::vector<Observation> test;
  std::vector<Observation> train_order;  // all training observations, shards interleaved
  std::uint64_t seed = 0;
};

// Seeded shuffle; the first round(test_fraction * n) observations form the
// test set and the rest are dealt round-robin to the M shards.
inline ShardedDataset shard(const std::vector<Observation>& observations, std::size_t m, double test_fraction,
                            std::uint64_t seed) {
  const std::size_t n = observations.size();
  if (m < 1) throw InputError("shard count must be at least 1");
  if (n < m + 1) {
    throw InputError("need at least M + 1 = " + std::to_string(m + 1) + " observations, have " + std::to_string(n));
  }
  if (!(test_fraction >= 0.0 && test_fraction < 1.0)) throw InputError("test fraction must lie in [0, 1)");
  const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(n)));
  if (n - n_test < m) throw InputError("too few training observations for " + std::to_string(m) + " shards");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed ^ 0x2545f4914f6cdd1dULL);
  std::shuffle(order.begin(), order.end(), rng);

  ShardedDataset out;
  out.seed = seed;
  out.shards.resize(m);
  for (std::size_t k = 0; k < n; ++k) {
    const auto& obs = observations[order[k]];
    if (k < n_test) {
      out.test.push_back(obs);
    } else {
      out.shards[(k - n_test) % m].push_back(obs);
      out.train_order.push_back(obs);
    }
  }
  return out;
}

// Query points taken from the test set: all of it when it has at most `cap`
// points, otherwise a seeded sample of `cap` points in test-set order.
struct EvaluationSet {
  std::shared_ptr<const QueryGrid> grid;
  std::vector<Observation> points;
};

inline EvaluationSet evaluation_set(const std::vector<Observation>& test, std::size_t cap, std::uint64_t seed) {
  if (test.empty()) throw InputError("test set is empty");
  std::vector<std::size_t> idx(test.size());
  std::iota(idx.begin(), idx.end(), 0);
  if (cap > 0 && test.size() > cap) {
    std::mt19937_64 rng(seed ^ 0x94d049bb133111ebULL);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(cap);
    std::sort(idx.begin(), idx.end());
  }
  EvaluationSet out;
  std::vector<Point> pts;
  for (auto k : idx) {
    out.points.push_back(test[k]);
    pts.push_back(test[k].x);
  }
  out.grid = std::make_shared<const QueryGrid>(QueryGrid::from_points(pts));
  return out;
}

// CSV with header x1..xd,y.
inline void write_csv(std::ostream& out, const std::vector<Observation>& obs) {
  const std::size_t d = obs.empty() ? 0 : obs.front().x.size();
  for (std::size_t k = 0; k < d; ++k) out << 'x' << k + 1 << ',';
  out << "y\n";
  const auto old = out.precision(17);
  for (const auto& o : obs) {
    for (double v : o.x) out << v << ',';
    out << o.y << '\n';
  }
  out.precision(old);
}

inline std::vector<Observation> read_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw InputError("empty CSV");
  const auto columns = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) + 1;
  if (columns < 2) throw InputError("CSV needs at least one x column and y");
  std::vector<Observation> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string cell;
    std::vector<double> row;
    while (std::getline(fields, cell, ',')) {
      try {
        row.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw InputError("bad number at CSV line " + std::to_string(line_no));
      }
    }
    if (row.size() != columns) throw InputError("wrong column count at CSV line " + std::to_string(line_no));
    const double y = row.back();
    row.pop_back();
    out.push_back({std::move(row), y});
  }
  return out;
}

}  // namespace adreg
