#pragma once

#include <array>
#include <cstddef>
#include <vector>

namespace geomatt {

using Vec3 = std::array<double, 3>;

double distance(const Vec3 &a, const Vec3 &b);

/// Minimum separation accepted between two atoms (Å).
inline constexpr double kMinAtomDistance = 1e-8;

/// Atom positions (Å) and atomic numbers of one configuration.
class Geometry {
public:
  Geometry(std::vector<Vec3> positions, std::vector<int> species);

  std::size_t size() const { return positions_.size(); }
  const std::vector<Vec3> &positions() const { return positions_; }
  const std::vector<int> &species() const { return species_; }
  const Vec3 &position(std::size_t i) const { return positions_[i]; }

  double distance(std::size_t i, std::size_t j) const;
  /// Row-major N x N distance matrix.
  std::vector<double> distance_matrix() const;

  /// Same species, positions mapped atom-wise.
  Geometry with_positions(std::vector<Vec3> positions) const;

private:
  std::vector<Vec3> positions_;
  std::vector<int> species_;
};

/// Points mu_l = l * delta_d, l = 1..count, and the RBF width gamma.
struct DiscretizationGrid {
  double gamma = 20.0;
  double delta_d = 0.05;
  std::size_t count = 0;
  std::vector<double> mu;

  double d_max() const { return static_cast<double>(count) * delta_d; }
};

/// exp(-gamma d^2)
double rbf(double d, double gamma);

DiscretizationGrid make_grid(double gamma, double delta_d, double d_max);

/// Discretized basis vector: entry l is exp(-gamma (d - mu_l)^2).
std::vector<double> phi_hat(double d, const DiscretizationGrid &grid);

/// delta_d * <phi_hat(0), phi_hat(d)>: the Riemann approximation of the
/// overlap of two atom-centred Gaussians separated by d.
double riemann_overlap(double d, const DiscretizationGrid &grid);

/// Atomic density sum_n exp(-gamma |x - x_n|^2).
double density_at(const Vec3 &x, const Geometry &geometry, double gamma);

} // namespace geomatt
