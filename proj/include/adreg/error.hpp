#pragma once

#include <stdexcept>
#include <string>

namespace adreg {

// Bad argument to an operation (dimension mismatch, empty input, t < 1, ...).
struct InputError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Invalid run configuration. Carries the name of the offending field.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string field, const std::string& message)
      : std::invalid_argument(field + ": " + message), field_(std::move(field)) {}

  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

// A trace or schedule that cannot be replayed consistently.
struct IntegrityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace adreg
