#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "adreg/error.hpp"

namespace adreg {

using Point = std::vector<double>;

// One (x, y) pair.
struct Observation {
  Point x;
  double y = 0.0;
};

// Fixed finite set of query points in R^d, stored row-major.
class QueryGrid {
 public:
  QueryGrid() = default;

  QueryGrid(std::size_t dim, std::vector<double> coords) : dim_(dim), coords_(std::move(coords)) {
    if (dim_ == 0) throw InputError("query grid dimension must be positive");
    if (coords_.size() % dim_ != 0) throw InputError("query grid coordinates not a multiple of dimension");
  }

  static QueryGrid from_points(const std::vector<Point>& points) {
    if (points.empty()) throw InputError("query grid must not be empty");
    const std::size_t d = points.front().size();
    std::vector<double> coords;
    coords.reserve(points.size() * d);
    for (const auto& p : points) {
      if (p.size() != d) throw InputError("query grid points have mixed dimensions");
      coords.insert(coords.end(), p.begin(), p.end());
    }
    return QueryGrid(d, std::move(coords));
  }

  std::size_t dim() const noexcept { return dim_; }
  std::size_t size() const noexcept { return dim_ == 0 ? 0 : coords_.size() / dim_; }
  bool empty() const noexcept { return size() == 0; }

  std::span<const double> point(std::size_t k) const {
    return std::span<const double>(coords_).subspan(k * dim_, dim_);
  }

  const std::vector<double>& coords() const noexcept { return coords_; }

  friend bool operator==(const QueryGrid&, const QueryGrid&) = default;

 private:
  std::size_t dim_ = 0;
  std::vector<double> coords_;
};

}  // namespace adreg
