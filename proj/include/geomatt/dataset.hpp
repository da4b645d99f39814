#pragma once

#include "geomatt/basis.hpp"
#include "geomatt/npy.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace geomatt {

/// Configurations of one molecule with reference labels.
/// Energies in kcal/mol, forces in kcal/mol/Å, positions in Å.
struct Dataset {
  std::vector<int> species;
  std::vector<Geometry> geometries;
  std::vector<double> energies;
  std::vector<std::vector<Vec3>> forces;

  std::size_t size() const { return geometries.size(); }
  std::size_t atoms() const { return species.size(); }

  /// Throws std::invalid_argument on inconsistent sizes or non-finite values.
  void validate() const;
  Dataset subset(const std::vector<std::size_t> &indices) const;
  double mean_energy() const;
};

/// Builds a dataset from container entries R, z, E and F.
Dataset dataset_from_archive(const npy::Archive &archive);
Dataset load_dataset(const std::string &path);
std::map<std::string, npy::Array> dataset_arrays(const Dataset &dataset);
void save_dataset(const std::string &path, const Dataset &dataset);

struct Split {
  std::vector<std::size_t> train;              // drawn samples, in draw order
  std::vector<std::vector<std::size_t>> folds; // partition of train
  std::vector<std::size_t> test;               // everything not drawn, ascending

  /// Train indices outside validation fold `fold`.
  std::vector<std::size_t> fit_indices(std::size_t fold) const;
};

/// Draws n_train of n_samples without replacement and cuts them into
/// `folds` contiguous validation folds whose sizes differ by at most one.
Split split_train_cv(std::size_t n_samples, std::size_t n_train, std::size_t folds,
                     std::uint64_t seed);

/// Atoms placed uniformly in a cube of side `box`, at least `min_separation` apart.
Geometry random_geometry(const std::vector<int> &species, std::uint64_t seed, double box = 3.0,
                         double min_separation = 1.0);

/// `count` copies of `base` with independent N(0, sigma^2) noise on every coordinate.
std::vector<Geometry> jittered_copies(const Geometry &base, std::size_t count, double sigma,
                                      std::uint64_t seed);

enum class DegenerateKind { Distance, Dihedral };

/// Two shapes that a centre atom cannot tell apart at low correlation order.
struct DegeneratePair {
  DegenerateKind kind = DegenerateKind::Distance;
  Geometry shape_a;
  Geometry shape_b;
  std::size_t center = 0;
};

DegeneratePair generate_degenerate_pair(DegenerateKind kind);
DegenerateKind parse_degenerate_kind(const std::string &text);
std::string degenerate_kind_name(DegenerateKind kind);

} // namespace geomatt
