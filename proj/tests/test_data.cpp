#include "doctest.h"
#include "test_support.hpp"

#include "geomatt/attention.hpp"
#include "geomatt/dataset.hpp"
#include "geomatt/npy.hpp"

#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <set>

using namespace geomatt;
using namespace geomatt::testing;
using npy::ContainerError;
using Kind = ContainerError::Kind;

namespace {

const std::string kData = GEOMATT_TEST_DATA_DIR;

std::vector<std::byte> bytes_of(const std::string &s) {
  std::vector<std::byte> out;
  for (char c : s) out.push_back(std::byte(static_cast<unsigned char>(c)));
  return out;
}

// Hand-assembled NPY v1.0 image.
std::vector<std::byte> npy_image(const std::string &header, std::size_t payload_bytes,
                                 const void *payload, const char *magic = "\x93NUMPY",
                                 unsigned char major = 1) {
  std::string text = header;
  while ((10 + text.size() + 1) % 64) text.push_back(' ');
  text.push_back('\n');
  std::string raw(magic, 6);
  raw.push_back(char(major));
  raw.push_back(0);
  raw.push_back(char(text.size() & 0xff));
  raw.push_back(char(text.size() >> 8));
  raw += text;
  auto out = bytes_of(raw);
  const auto *p = static_cast<const std::byte *>(payload);
  out.insert(out.end(), p, p + payload_bytes);
  return out;
}

Kind kind_of(const std::function<void()> &f) {
  try {
    f();
  } catch (const ContainerError &e) {
    return e.kind();
  }
  FAIL("expected a container error");
  return Kind::BadArchive;
}

std::string temp_path(const std::string &name) {
  return (std::filesystem::temp_directory_path() / ("geomatt_test_" + name)).string();
}

npy::Array random_array(std::mt19937_64 &rng) {
  static const npy::Dtype dtypes[] = {npy::Dtype::F4, npy::Dtype::F8, npy::Dtype::I4,
                                      npy::Dtype::I8, npy::Dtype::U4, npy::Dtype::U8,
                                      npy::Dtype::I1, npy::Dtype::U1};
  npy::Array a;
  a.dtype = dtypes[rng() % 8];
  const std::size_t rank = rng() % 5;
  for (std::size_t k = 0; k < rank; ++k) a.shape.push_back(rng() % 5);
  a.bytes.resize(a.size() * npy::item_size(a.dtype));
  for (auto &b : a.bytes) b = std::byte(rng() & 0xff);
  return a;
}

// Independent geometric oracles for the degenerate shapes.
std::vector<double> distances_from(const Geometry &g, std::size_t c) {
  std::vector<double> out;
  for (std::size_t j = 0; j < g.size(); ++j)
    if (j != c) out.push_back(g.distance(c, j));
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<double> neighbour_distances(const Geometry &g, std::size_t c) {
  std::vector<double> out;
  for (std::size_t i = 0; i < g.size(); ++i)
    for (std::size_t j = i + 1; j < g.size(); ++j)
      if (i != c && j != c) out.push_back(g.distance(i, j));
  std::sort(out.begin(), out.end());
  return out;
}

Vec3 sub(const Vec3 &a, const Vec3 &b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
double dot3(const Vec3 &a, const Vec3 &b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
Vec3 cross(const Vec3 &a, const Vec3 &b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}

std::vector<double> angles_at(const Geometry &g, std::size_t c) {
  std::vector<double> out;
  for (std::size_t i = 0; i < g.size(); ++i)
    for (std::size_t j = i + 1; j < g.size(); ++j) {
      if (i == c || j == c) continue;
      const Vec3 a = sub(g.position(i), g.position(c)), b = sub(g.position(j), g.position(c));
      out.push_back(std::acos(std::clamp(dot3(a, b) / std::sqrt(dot3(a, a) * dot3(b, b)), -1.0, 1.0)));
    }
  std::sort(out.begin(), out.end());
  return out;
}

// Unsigned dihedral between planes (b, c, a) and (c, a, d) about the axis c -> a.
std::vector<double> dihedrals_at(const Geometry &g, std::size_t c) {
  std::vector<double> out;
  const std::size_t n = g.size();
  for (std::size_t a = 0; a < n; ++a) {
    if (a == c) continue;
    const Vec3 axis = sub(g.position(a), g.position(c));
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t d = b + 1; d < n; ++d) {
        if (b == c || b == a || d == c || d == a) continue;
        const Vec3 n1 = cross(axis, sub(g.position(b), g.position(c)));
        const Vec3 n2 = cross(axis, sub(g.position(d), g.position(c)));
        const double cosv = dot3(n1, n2) / std::sqrt(dot3(n1, n1) * dot3(n2, n2));
        out.push_back(std::acos(std::clamp(cosv, -1.0, 1.0)));
      }
  }
  std::sort(out.begin(), out.end());
  return out;
}

double max_diff(const std::vector<double> &a, const std::vector<double> &b) {
  REQUIRE(a.size() == b.size());
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

OverlapParams random_params(std::size_t f, std::size_t l, std::mt19937_64 &rng) {
  return {normal_tensor({f, l}, 0.1, rng), normal_tensor({f, l}, 0.1, rng),
          normal_tensor({f}, 0.3, rng), normal_tensor({f}, 0.3, rng)};
}

} // namespace

TEST_CASE("minimal NPY entry") {
  const double payload[2] = {1.0, 2.0};
  const auto file = npy_image("{'descr': '<f8', 'fortran_order': False, 'shape': (2,), }",
                              sizeof payload, payload);
  const npy::Array a = npy::decode(file);
  CHECK(a.dtype == npy::Dtype::F8);
  CHECK(a.shape == Shape{2});
  CHECK(a.to_doubles() == std::vector<double>{1.0, 2.0});
  CHECK(npy::encode(a) == file);
}

TEST_CASE("NPY error variants") {
  const double payload[2] = {1.0, 2.0};
  const std::string good = "{'descr': '<f8', 'fortran_order': False, 'shape': (2,), }";
  CHECK(kind_of([&] { npy::decode(npy_image(good, 16, payload, "\x93NUMPZ")); }) == Kind::BadMagic);
  CHECK(kind_of([&] { npy::decode(npy_image(good, 16, payload, "\x93NUMPY", 2)); }) ==
        Kind::UnsupportedVersion);
  CHECK(kind_of([&] {
          npy::decode(npy_image("{'descr': '>f8', 'fortran_order': False, 'shape': (2,), }", 16, payload));
        }) == Kind::UnsupportedDtype);
  CHECK(kind_of([&] {
          npy::decode(npy_image("{'descr': '<U5', 'fortran_order': False, 'shape': (), }", 0, payload));
        }) == Kind::UnsupportedDtype);
  CHECK(kind_of([&] { npy::decode(npy_image(good, 12, payload)); }) == Kind::Truncated);
  const double three[3] = {1, 2, 3};
  CHECK(kind_of([&] { npy::decode(npy_image(good, 24, three)); }) == Kind::ShapeMismatch);
  CHECK(kind_of([&] { npy::decode(npy_image("{'descr': '<f8', 'shape': (2,), }", 16, payload)); }) ==
        Kind::BadHeader);
  CHECK(kind_of([&] {
          npy::decode(npy_image("{'descr': '<f8', 'fortran_order': Maybe, 'shape': (2,), }", 16, payload));
        }) == Kind::BadHeader);
  CHECK(kind_of([&] { npy::decode(bytes_of("\x93NUM")); }) == Kind::BadMagic);
  CHECK(kind_of([&] { npy::decode(bytes_of(std::string("\x93NUMPY\x01\x00\xff\x00{", 11))); }) ==
        Kind::Truncated);
}

TEST_CASE("fortran-ordered payloads are restored to row-major") {
  // 2 x 3 matrix [[0,1,2],[3,4,5]] stored column by column.
  const double column_major[6] = {0, 3, 1, 4, 2, 5};
  const auto file = npy_image("{'descr': '<f8', 'fortran_order': True, 'shape': (2, 3), }",
                              sizeof column_major, column_major);
  CHECK(npy::decode(file).to_doubles() == std::vector<double>{0, 1, 2, 3, 4, 5});
}

TEST_CASE("random 3x4 roundtrip is bit-identical") {
  std::mt19937_64 rng(1);
  const Tensor t = random_tensor({3, 4}, rng);
  const auto a = npy::Array::from_doubles(t.shape(), t.data());
  const auto back = npy::decode(npy::encode(a));
  CHECK(back == a);
  CHECK(std::memcmp(back.bytes.data(), t.data().data(), back.bytes.size()) == 0);
}

TEST_CASE("roundtrip property over random arrays") {
  std::mt19937_64 rng(2024);
  std::map<std::string, npy::Array> bundle;
  for (int i = 0; i < 200; ++i) {
    const npy::Array a = random_array(rng);
    const bool fortran = rng() % 2 == 0;
    CAPTURE(i);
    CAPTURE(shape_string(a.shape));
    CAPTURE(npy::descr(a.dtype));
    CHECK(npy::decode(npy::encode(a, fortran)) == a);
    bundle["a" + std::to_string(i)] = a;
  }
  CHECK(npy::parse_array_container(npy::encode_archive(bundle, true)) == bundle);
  CHECK(npy::parse_array_container(npy::encode_archive(bundle, false)) == bundle);
}

TEST_CASE("archives written by numpy") {
  const npy::Archive archive = npy::Archive::open(kData + "/arrays.npz");
  CHECK(archive.names() == std::vector<std::string>{"cube", "f4", "i4", "scalar", "u8"});

  const auto f4 = archive.read("f4");
  CHECK(f4.dtype == npy::Dtype::F4);
  CHECK(f4.to_doubles() == std::vector<double>{0, 0.25, 0.5, 0.75, 1.0, 1.25});
  CHECK(archive.read("i4").to_integers() == std::vector<std::int64_t>{-3, 0, 7});
  CHECK(archive.read("u8").to_integers() == std::vector<std::int64_t>{1LL << 40, 1, 0, 5});
  const auto scalar = archive.read("scalar");
  CHECK(scalar.shape.empty());
  CHECK(scalar.to_doubles() == std::vector<double>{2.5});
  std::vector<std::int64_t> cube(24);
  std::iota(cube.begin(), cube.end(), 0);
  CHECK(archive.read("cube").to_integers() == cube);
  CHECK(kind_of([&] { archive.read("nope"); }) == Kind::MissingEntry);

  // String entries are listed but only fail when read.
  const npy::Archive md = npy::Archive::open(kData + "/molecule.npz");
  CHECK(md.contains("name"));
  CHECK(kind_of([&] { md.read("name"); }) == Kind::UnsupportedDtype);
}

TEST_CASE("damaged archives are rejected") {
  auto raw = npy::read_file(kData + "/molecule.npz");
  CHECK(kind_of([&] { npy::Archive(std::vector<std::byte>(raw.begin(), raw.begin() + 10)); }) ==
        Kind::BadArchive);
  CHECK(kind_of([&] { npy::Archive(std::vector<std::byte>(raw.begin(), raw.end() - 30)); }) ==
        Kind::BadArchive);
  // Flip one payload byte of the first entry: the CRC no longer matches.
  auto corrupt = raw;
  corrupt[200] ^= std::byte{0x01};
  const npy::Archive archive(corrupt);
  bool caught = false;
  for (const auto &name : archive.names()) {
    try {
      archive.read(name);
    } catch (const ContainerError &e) {
      caught = caught || e.kind() == Kind::BadArchive;
    }
  }
  CHECK(caught);
}

TEST_CASE("load_dataset") {
  auto expect_molecule = [](const Dataset &ds, bool single_precision_forces) {
    REQUIRE(ds.size() == 2);
    CHECK(ds.atoms() == 3);
    CHECK(ds.species == std::vector<int>{8, 1, 1});
    for (std::size_t s = 0; s < 2; ++s) {
      CHECK(ds.energies[s] == -100.0 - double(s));
      for (std::size_t a = 0; a < 3; ++a)
        for (std::size_t c = 0; c < 3; ++c) {
          const double k = double((s * 3 + a) * 3 + c);
          CHECK(ds.geometries[s].position(a)[c] == doctest::Approx(std::pow(k * 0.5, 1.1)).epsilon(1e-15));
          const double f = k * -0.25 + 1.0;
          CHECK(ds.forces[s][a][c] == (single_precision_forces ? double(float(f)) : f));
        }
    }
  };
  expect_molecule(load_dataset(kData + "/molecule.npz"), false);
  expect_molecule(load_dataset(kData + "/molecule_compressed.npz"), true);

  try {
    load_dataset(kData + "/molecule_missing_f.npz");
    FAIL("expected an exception");
  } catch (const ContainerError &e) {
    CHECK(e.kind() == Kind::MissingEntry);
    CHECK(std::string(e.what()) == "missing entry F");
  }
  CHECK_THROWS_AS(load_dataset(kData + "/molecule_nan.npz"), std::invalid_argument);
  CHECK_THROWS(load_dataset(kData + "/does_not_exist.npz"));
}

TEST_CASE("inconsistent entries are named") {
  auto arrays = dataset_arrays(load_dataset(kData + "/molecule.npz"));
  arrays["F"] = npy::Array::from_doubles({1, 3, 3}, std::vector<double>(9, 0.0));
  try {
    dataset_from_archive(npy::Archive(npy::encode_archive(arrays)));
    FAIL("expected an exception");
  } catch (const ContainerError &e) {
    CHECK(e.kind() == Kind::ShapeMismatch);
    CHECK(std::string(e.what()).find("entry F") != std::string::npos);
  }
}

TEST_CASE("save_dataset roundtrip") {
  std::mt19937_64 rng(5);
  Dataset ds;
  ds.species = {6, 1, 1, 8};
  for (int s = 0; s < 7; ++s) {
    ds.geometries.emplace_back(random_positions(4, rng), ds.species);
    ds.energies.push_back(normal_tensor({1}, 10.0, rng)[0]);
    std::vector<Vec3> f(4);
    for (auto &row : f)
      for (double &c : row) c = normal_tensor({1}, 3.0, rng)[0];
    ds.forces.push_back(f);
  }
  const std::string path = temp_path("roundtrip.npz");
  save_dataset(path, ds);
  const Dataset back = load_dataset(path);
  std::filesystem::remove(path);
  CHECK(back.species == ds.species);
  CHECK(back.energies == ds.energies);
  CHECK(back.forces == ds.forces);
  for (std::size_t s = 0; s < ds.size(); ++s)
    CHECK(back.geometries[s].positions() == ds.geometries[s].positions());
}

TEST_CASE("split_train_cv") {
  const Split s = split_train_cv(1500, 1000, 5, 7);
  REQUIRE(s.folds.size() == 5);
  std::set<std::size_t> seen;
  for (const auto &fold : s.folds) {
    CHECK(fold.size() == 200);
    for (std::size_t i : fold) CHECK(seen.insert(i).second);
  }
  CHECK(seen == std::set<std::size_t>(s.train.begin(), s.train.end()));
  CHECK(s.test.size() == 500);
  for (std::size_t i : s.test) CHECK(seen.count(i) == 0);
  CHECK(s.fit_indices(2).size() == 800);

  const Split again = split_train_cv(1500, 1000, 5, 7);
  CHECK(again.train == s.train);
  CHECK(again.folds == s.folds);
  CHECK(split_train_cv(1500, 1000, 5, 8).train != s.train);

  const Split uneven = split_train_cv(20, 12, 5, 1);
  std::vector<std::size_t> sizes;
  for (const auto &fold : uneven.folds) sizes.push_back(fold.size());
  CHECK(sizes == std::vector<std::size_t>{3, 3, 2, 2, 2});

  CHECK_THROWS_AS(split_train_cv(10, 11, 5, 0), std::invalid_argument);
  CHECK_THROWS_AS(split_train_cv(10, 10, 1, 0), std::invalid_argument);
}

TEST_CASE("distance-degenerate shapes") {
  const DegeneratePair p = generate_degenerate_pair(DegenerateKind::Distance);
  CHECK(p.shape_a.size() == 5);
  CHECK(p.shape_a.species() == std::vector<int>(5, 1));
  CHECK(max_diff(distances_from(p.shape_a, 0), {1, 1, 2, 2}) <= 1e-12);
  CHECK(max_diff(distances_from(p.shape_b, 0), {1, 1, 2, 2}) <= 1e-12);
  CHECK(max_diff(neighbour_distances(p.shape_a, 0), neighbour_distances(p.shape_b, 0)) > 0.1);
}

TEST_CASE("dihedral-degenerate shapes") {
  const DegeneratePair p = generate_degenerate_pair(DegenerateKind::Dihedral);
  CHECK(max_diff(distances_from(p.shape_a, 0), distances_from(p.shape_b, 0)) <= 1e-12);
  CHECK(max_diff(angles_at(p.shape_a, 0), angles_at(p.shape_b, 0)) <= 1e-12);
  CHECK(max_diff(neighbour_distances(p.shape_a, 0), neighbour_distances(p.shape_b, 0)) <= 1e-12);
  CHECK(max_diff(dihedrals_at(p.shape_a, 0), dihedrals_at(p.shape_b, 0)) > 0.1);
}

TEST_CASE("order 2 cannot separate the distance pair, order 3 can") {
  const DegeneratePair p = generate_degenerate_pair(DegenerateKind::Distance);
  const auto grid = make_grid(20.0, 0.05, 5.0);
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 5; ++trial) {
    AttentionBlock b2{2, {random_params(8, grid.count, rng)}, grid};
    auto row = [&](const Geometry &g, const AttentionBlock &b) {
      const Tensor a = attention_coefficients(b, g);
      std::vector<double> r(a.data().begin(), a.data().begin() + std::ptrdiff_t(g.size()));
      std::sort(r.begin(), r.end());
      return r;
    };
    CHECK(max_diff(row(p.shape_a, b2), row(p.shape_b, b2)) <= 1e-12);

    AttentionBlock b3{3, {random_params(8, grid.count, rng), random_params(8, grid.count, rng)}, grid};
    const Tensor emb = normal_tensor({1, 4}, 1.0, rng);
    auto aggregate = [&](const Geometry &g) {
      const Tensor a = attention_coefficients(b3, g);
      double s = 0.0;
      for (std::size_t j = 0; j < g.size(); ++j) s += a(0, j);
      std::vector<double> v;
      for (double e : emb.data()) v.push_back(s * e);
      return v;
    };
    const auto va = aggregate(p.shape_a), vb = aggregate(p.shape_b);
    double norm = 0.0;
    for (std::size_t f = 0; f < va.size(); ++f) norm += (va[f] - vb[f]) * (va[f] - vb[f]);
    CHECK(std::sqrt(norm) > 1e-6);
  }
}

TEST_CASE("CG-CG archive, when available") {
  const char *path = std::getenv("GEOMATT_CGCG_PATH");
  if (!path || !std::filesystem::exists(path)) {
    MESSAGE("GEOMATT_CGCG_PATH not set; skipping");
    return;
  }
  const Dataset ds = load_dataset(path);
  CHECK(ds.atoms() == 58);
}
