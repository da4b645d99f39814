#include "geomatt/basis.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace geomatt {

double distance(const Vec3 &a, const Vec3 &b) {
  const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

Geometry::Geometry(std::vector<Vec3> positions, std::vector<int> species)
    : positions_(std::move(positions)), species_(std::move(species)) {
  if (positions_.empty()) {
    throw std::invalid_argument("geometry needs at least one atom");
  }
  if (positions_.size() != species_.size()) {
    throw std::invalid_argument(
        "geometry has " + std::to_string(positions_.size()) +
        " positions but " + std::to_string(species_.size()) + " species");
  }
  for (std::size_t i = 0; i < positions_.size(); ++i) {
    for (double c : positions_[i]) {
      if (!std::isfinite(c)) {
        throw std::invalid_argument("non-finite coordinate for atom " +
                                    std::to_string(i));
      }
    }
    for (std::size_t j = 0; j < i; ++j) {
      if (geomatt::distance(positions_[i], positions_[j]) < kMinAtomDistance) {
        throw std::invalid_argument("atoms " + std::to_string(j) + " and " +
                                    std::to_string(i) + " coincide");
      }
    }
  }
}

double Geometry::distance(std::size_t i, std::size_t j) const {
  return geomatt::distance(positions_[i], positions_[j]);
}

std::vector<double> Geometry::distance_matrix() const {
  const std::size_t n = size();
  std::vector<double> d(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      d[i * n + j] = d[j * n + i] = distance(i, j);
    }
  return d;
}

Geometry Geometry::with_positions(std::vector<Vec3> positions) const {
  return Geometry(std::move(positions), species_);
}

double rbf(double d, double gamma) { return std::exp(-gamma * d * d); }

DiscretizationGrid make_grid(double gamma, double delta_d, double d_max) {
  if (!(gamma > 0.0) || !(delta_d > 0.0) || !(d_max > 0.0)) {
    throw std::invalid_argument(
        "make_grid: gamma, delta_d and d_max must be positive (got gamma=" +
        std::to_string(gamma) + ", delta_d=" + std::to_string(delta_d) +
        ", d_max=" + std::to_string(d_max) + ")");
  }
  const auto count = static_cast<std::size_t>(std::llround(d_max / delta_d));
  if (count == 0) {
    throw std::invalid_argument("make_grid: d_max/delta_d rounds to zero points");
  }
  DiscretizationGrid grid;
  grid.gamma = gamma;
  grid.delta_d = delta_d;
  grid.count = count;
  grid.mu.resize(count);
  for (std::size_t l = 0; l < count; ++l) {
    grid.mu[l] = static_cast<double>(l + 1) * delta_d;
  }
  return grid;
}

std::vector<double> phi_hat(double d, const DiscretizationGrid &grid) {
  std::vector<double> out(grid.count);
  for (std::size_t l = 0; l < grid.count; ++l) {
    out[l] = rbf(d - grid.mu[l], grid.gamma);
  }
  return out;
}

double riemann_overlap(double d, const DiscretizationGrid &grid) {
  double acc = 0.0;
  for (std::size_t l = 0; l < grid.count; ++l) {
    acc += rbf(grid.mu[l], grid.gamma) * rbf(d - grid.mu[l], grid.gamma);
  }
  return grid.delta_d * acc;
}

double density_at(const Vec3 &x, const Geometry &geometry, double gamma) {
  double rho = 0.0;
  for (const Vec3 &p : geometry.positions()) rho += rbf(distance(x, p), gamma);
  return rho;
}

} // namespace geomatt
