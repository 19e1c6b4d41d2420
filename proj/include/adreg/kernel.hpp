#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>

#include "adreg/error.hpp"

namespace adreg {

enum class KernelKind { gaussian, naive };

inline std::string_view to_string(KernelKind kind) {
  return kind == KernelKind::gaussian ? "gaussian" : "naive";
}

inline KernelKind parse_kernel_kind(std::string_view text) {
  if (text == "gaussian") return KernelKind::gaussian;
  if (text == "naive") return KernelKind::naive;
  throw InputError("unknown kernel kind '" + std::string(text) + "'");
}

// K_h(x, z) = h^-d * profile(|x - z| / h), with envelope L(r) = profile(r):
//   gaussian: L(r) = exp(-r^2)
//   naive:    L(r) = 1[r <= 1]
struct KernelSpec {
  KernelKind kind = KernelKind::gaussian;
  std::size_t dim = 1;

  double envelope(double r) const {
    if (kind == KernelKind::gaussian) return std::exp(-r * r);
    return r <= 1.0 ? 1.0 : 0.0;
  }

  double envelope_at_zero() const { return 1.0; }
};

inline double squared_distance(std::span<const double> x, std::span<const double> z) {
  double acc = 0.0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double diff = x[k] - z[k];
    acc += diff * diff;
  }
  return acc;
}

// Kernel value from a precomputed squared distance. `inv_hd` is h^-d.
inline double kernel_from_sqdist(KernelKind kind, double h, double inv_hd, double sqdist) {
  if (kind == KernelKind::gaussian) return inv_hd * std::exp(-sqdist / (h * h));
  return sqdist <= h * h ? inv_hd : 0.0;
}

inline double kernel_eval(const KernelSpec& spec, double h, std::span<const double> x,
                          std::span<const double> z) {
  if (!(h > 0.0)) throw InputError("bandwidth must be positive");
  if (x.size() != spec.dim || z.size() != spec.dim) {
    throw InputError("kernel dimension mismatch: expected " + std::to_string(spec.dim) + ", got " +
                     std::to_string(x.size()) + " and " + std::to_string(z.size()));
  }
  const double inv_hd = std::pow(h, -static_cast<double>(spec.dim));
  return kernel_from_sqdist(spec.kind, h, inv_hd, squared_distance(x, z));
}

}  // namespace adreg
