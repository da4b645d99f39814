#include "geomatt/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

namespace geomatt {

void Dataset::validate() const {
  if (species.empty()) throw std::invalid_argument("dataset has no atoms");
  if (energies.size() != geometries.size() || forces.size() != geometries.size())
    throw std::invalid_argument("dataset arrays disagree on the sample count");
  for (std::size_t s = 0; s < geometries.size(); ++s) {
    if (geometries[s].species() != species)
      throw std::invalid_argument("sample " + std::to_string(s) + " has different species");
    if (forces[s].size() != species.size())
      throw std::invalid_argument("sample " + std::to_string(s) + " force rows do not match atoms");
    if (!std::isfinite(energies[s]))
      throw std::invalid_argument("sample " + std::to_string(s) + " has a non-finite energy");
    for (const Vec3 &f : forces[s])
      for (double c : f)
        if (!std::isfinite(c))
          throw std::invalid_argument("sample " + std::to_string(s) + " has a non-finite force");
  }
}

Dataset Dataset::subset(const std::vector<std::size_t> &indices) const {
  Dataset out;
  out.species = species;
  for (std::size_t i : indices) {
    out.geometries.push_back(geometries.at(i));
    out.energies.push_back(energies.at(i));
    out.forces.push_back(forces.at(i));
  }
  return out;
}

double Dataset::mean_energy() const {
  if (energies.empty()) return 0.0;
  return std::accumulate(energies.begin(), energies.end(), 0.0) / double(energies.size());
}

namespace {

npy::Array entry(const npy::Archive &archive, const std::string &name) {
  if (!archive.contains(name))
    throw npy::ContainerError(npy::ContainerError::Kind::MissingEntry, "missing entry " + name);
  return archive.read(name);
}

[[noreturn]] void bad_shape(const std::string &name, const Shape &shape, const std::string &want) {
  throw npy::ContainerError(npy::ContainerError::Kind::ShapeMismatch,
                            "entry " + name + " has shape " + shape_string(shape) +
                                ", expected " + want);
}

} // namespace

Dataset dataset_from_archive(const npy::Archive &archive) {
  const npy::Array r = entry(archive, "R");
  const npy::Array z = entry(archive, "z");
  const npy::Array e = entry(archive, "E");
  const npy::Array f = entry(archive, "F");

  if (r.shape.size() != 3 || r.shape[2] != 3) bad_shape("R", r.shape, "(N, atoms, 3)");
  const std::size_t n = r.shape[0], atoms = r.shape[1];
  if (z.shape != Shape{atoms}) bad_shape("z", z.shape, "(" + std::to_string(atoms) + ",)");
  if (!(e.shape == Shape{n} || e.shape == Shape{n, 1}))
    bad_shape("E", e.shape, "(" + std::to_string(n) + ",) or (" + std::to_string(n) + ", 1)");
  if (f.shape != r.shape) bad_shape("F", f.shape, shape_string(r.shape));

  Dataset ds;
  for (auto v : z.to_integers()) ds.species.push_back(static_cast<int>(v));
  const auto rv = r.to_doubles(), ev = e.to_doubles(), fv = f.to_doubles();
  for (double v : rv)
    if (!std::isfinite(v)) throw std::invalid_argument("entry R contains non-finite values");
  for (std::size_t s = 0; s < n; ++s) {
    std::vector<Vec3> pos(atoms), frc(atoms);
    for (std::size_t a = 0; a < atoms; ++a)
      for (std::size_t c = 0; c < 3; ++c) {
        pos[a][c] = rv[(s * atoms + a) * 3 + c];
        frc[a][c] = fv[(s * atoms + a) * 3 + c];
      }
    ds.geometries.emplace_back(std::move(pos), ds.species);
    ds.forces.push_back(std::move(frc));
    ds.energies.push_back(ev[s]);
  }
  ds.validate();
  return ds;
}

Dataset load_dataset(const std::string &path) {
  return dataset_from_archive(npy::Archive::open(path));
}

std::map<std::string, npy::Array> dataset_arrays(const Dataset &dataset) {
  const std::size_t n = dataset.size(), atoms = dataset.atoms();
  std::vector<double> r, f;
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t a = 0; a < atoms; ++a)
      for (std::size_t c = 0; c < 3; ++c) {
        r.push_back(dataset.geometries[s].position(a)[c]);
        f.push_back(dataset.forces[s][a][c]);
      }
  std::vector<std::int64_t> z(dataset.species.begin(), dataset.species.end());
  std::map<std::string, npy::Array> out;
  out["R"] = npy::Array::from_doubles({n, atoms, 3}, r);
  out["F"] = npy::Array::from_doubles({n, atoms, 3}, f);
  out["E"] = npy::Array::from_doubles({n, 1}, dataset.energies);
  out["z"] = npy::Array::from_int64({atoms}, z);
  return out;
}

void save_dataset(const std::string &path, const Dataset &dataset) {
  dataset.validate();
  npy::write_archive(path, dataset_arrays(dataset));
}

std::vector<std::size_t> Split::fit_indices(std::size_t fold) const {
  std::vector<std::size_t> out;
  for (std::size_t f = 0; f < folds.size(); ++f)
    if (f != fold) out.insert(out.end(), folds[f].begin(), folds[f].end());
  return out;
}

Split split_train_cv(std::size_t n_samples, std::size_t n_train, std::size_t folds,
                     std::uint64_t seed) {
  if (folds < 2) throw std::invalid_argument("need at least 2 folds, got " + std::to_string(folds));
  if (n_train > n_samples)
    throw std::invalid_argument("n_train = " + std::to_string(n_train) + " exceeds the " +
                                std::to_string(n_samples) + " available samples");
  if (n_train < folds)
    throw std::invalid_argument("n_train = " + std::to_string(n_train) +
                                " is too small for " + std::to_string(folds) + " folds");

  std::vector<std::size_t> order(n_samples);
  std::iota(order.begin(), order.end(), 0);
  // Fisher-Yates with raw engine output so the split is the same everywhere.
  std::mt19937_64 rng(seed);
  for (std::size_t i = n_samples; i > 1; --i) std::swap(order[i - 1], order[rng() % i]);

  Split split;
  split.train.assign(order.begin(), order.begin() + std::ptrdiff_t(n_train));
  split.test.assign(order.begin() + std::ptrdiff_t(n_train), order.end());
  std::sort(split.test.begin(), split.test.end());
  std::size_t start = 0;
  for (std::size_t f = 0; f < folds; ++f) {
    const std::size_t len = n_train / folds + (f < n_train % folds ? 1 : 0);
    split.folds.emplace_back(split.train.begin() + std::ptrdiff_t(start),
                             split.train.begin() + std::ptrdiff_t(start + len));
    start += len;
  }
  return split;
}

namespace {

Geometry planar(const std::vector<double> &radii) {
  std::vector<Vec3> pos{{0.0, 0.0, 0.0}};
  for (std::size_t n = 0; n < radii.size(); ++n) {
    const double phi = M_PI / 2.0 * double(n);
    pos.push_back({radii[n] * std::cos(phi), radii[n] * std::sin(phi), 0.0});
  }
  return Geometry(pos, std::vector<int>(pos.size(), 1));
}

// Unit-distance neighbours on a cone of half-angle 60 degrees at azimuths
// k * 45 degrees. The two index sets used below share their multiset of
// cyclic differences, so distances and angles at the apex coincide while
// the neighbours' own distance profiles differ.
Geometry cone(const std::vector<int> &steps) {
  const double theta = M_PI / 3.0;
  std::vector<Vec3> pos{{0.0, 0.0, 0.0}};
  for (int k : steps) {
    const double phi = M_PI / 4.0 * k;
    pos.push_back({std::sin(theta) * std::cos(phi), std::sin(theta) * std::sin(phi),
                   std::cos(theta)});
  }
  return Geometry(pos, std::vector<int>(pos.size(), 1));
}

} // namespace

Geometry random_geometry(const std::vector<int> &species, std::uint64_t seed, double box,
                         double min_separation) {
  if (!(box > 0.0) || !(min_separation >= 0.0))
    throw std::invalid_argument("random_geometry: box must be > 0 and separation >= 0");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, box);
  std::vector<Vec3> pos;
  for (std::size_t attempt = 0; pos.size() < species.size(); ++attempt) {
    if (attempt > 100000 * (species.size() + 1))
      throw std::invalid_argument("random_geometry: cannot place " +
                                  std::to_string(species.size()) + " atoms " +
                                  std::to_string(min_separation) + " apart in a box of side " +
                                  std::to_string(box));
    const Vec3 p{u(rng), u(rng), u(rng)};
    if (std::all_of(pos.begin(), pos.end(),
                    [&](const Vec3 &q) { return distance(p, q) >= min_separation; }))
      pos.push_back(p);
  }
  return Geometry(std::move(pos), species);
}

std::vector<Geometry> jittered_copies(const Geometry &base, std::size_t count, double sigma,
                                      std::uint64_t seed) {
  if (!(sigma >= 0.0)) throw std::invalid_argument("jittered_copies: sigma must be >= 0");
  std::vector<Geometry> out;
  out.reserve(count);
  if (sigma == 0.0) return std::vector<Geometry>(count, base);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, sigma);
  for (std::size_t s = 0; s < count; ++s) {
    std::vector<Vec3> pos = base.positions();
    for (Vec3 &p : pos)
      for (double &c : p) c += noise(rng);
    out.push_back(base.with_positions(std::move(pos)));
  }
  return out;
}

DegeneratePair generate_degenerate_pair(DegenerateKind kind) {
  if (kind == DegenerateKind::Distance)
    return {kind, planar({1, 2, 1, 2}), planar({1, 1, 2, 2}), 0};
  return {kind, cone({0, 1, 2, 5}), cone({0, 1, 3, 4}), 0};
}

DegenerateKind parse_degenerate_kind(const std::string &text) {
  if (text == "distance") return DegenerateKind::Distance;
  if (text == "dihedral") return DegenerateKind::Dihedral;
  throw std::invalid_argument("unknown shape kind '" + text + "' (expected distance or dihedral)");
}

std::string degenerate_kind_name(DegenerateKind kind) {
  return kind == DegenerateKind::Distance ? "distance" : "dihedral";
}

} // namespace geomatt
