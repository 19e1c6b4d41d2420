#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "adreg/error.hpp"

namespace adreg {

// Smoothing parameters h_t, t >= 1.
class BandwidthSchedule {
 public:
  // h_t = t^exponent (exponent is usually negative).
  static BandwidthSchedule power_law(double exponent) {
    BandwidthSchedule s;
    s.exponent_ = exponent;
    return s;
  }

  // h_t = t^(-d/(d+4)).
  static BandwidthSchedule default_for(std::size_t dim) {
    const double d = static_cast<double>(dim);
    return power_law(-d / (d + 4.0));
  }

  // h_t = values[t-1]; t beyond the table is an error.
  static BandwidthSchedule table(std::vector<double> values) {
    if (values.empty()) throw InputError("bandwidth table must not be empty");
    for (double v : values) {
      if (!(v > 0.0)) throw InputError("bandwidth table entries must be positive");
    }
    BandwidthSchedule s;
    s.table_ = std::move(values);
    return s;
  }

  double at(std::size_t t) const {
    if (t < 1) throw InputError("bandwidth requested for t < 1");
    if (exponent_) return std::pow(static_cast<double>(t), *exponent_);
    if (t > table_.size()) throw InputError("bandwidth table has no entry for t = " + std::to_string(t));
    return table_[t - 1];
  }

  std::optional<double> exponent() const { return exponent_; }
  bool is_power_law() const { return exponent_.has_value(); }

 private:
  BandwidthSchedule() = default;

  std::optional<double> exponent_;
  std::vector<double> table_;
};

inline double bandwidth_at(const BandwidthSchedule& sched, std::size_t t) { return sched.at(t); }

enum class StepRule { lower, midpoint };

inline std::string_view to_string(StepRule rule) { return rule == StepRule::lower ? "lower" : "midpoint"; }

inline StepRule parse_step_rule(std::string_view text) {
  if (text == "lower") return StepRule::lower;
  if (text == "midpoint") return StepRule::midpoint;
  throw InputError("unknown step rule '" + std::string(text) + "'");
}

// Step sizes with C1/t <= eps_t <= C2/t for t >= 2 and eps_1 = 1.
struct StepSchedule {
  double c1 = 1.0;
  double c2 = 1.0;
  StepRule rule = StepRule::lower;

  StepSchedule() = default;

  StepSchedule(double lower, double upper, StepRule r = StepRule::lower) : c1(lower), c2(upper), rule(r) {
    if (!(c1 > 0.0) || !(c2 > 0.0)) throw InputError("step constants must be positive");
    if (c1 > c2) throw InputError("step constants must satisfy C1 <= C2");
  }

  double at(std::size_t t) const {
    if (t < 1) throw InputError("step requested for t < 1");
    if (t == 1) return 1.0;
    const double c = rule == StepRule::lower ? c1 : 0.5 * (c1 + c2);
    return c / static_cast<double>(t);
  }
};

inline double step_at(const StepSchedule& sched, std::size_t t) { return sched.at(t); }

}  // namespace adreg
