#pragma once

// NPY arrays and the zip archives (.npz) that bundle them.

#include "geomatt/tensor.hpp"

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace geomatt::npy {

class ContainerError : public std::runtime_error {
public:
  enum class Kind {
    BadMagic,
    UnsupportedVersion,
    BadHeader,
    UnsupportedDtype,
    Truncated,
    ShapeMismatch,
    BadArchive,
    MissingEntry,
  };

  ContainerError(Kind kind, const std::string &message);
  Kind kind() const { return kind_; }

private:
  Kind kind_;
};

std::string kind_name(ContainerError::Kind kind);

enum class Dtype : std::uint8_t { F4, F8, I4, I8, U4, U8, I1, U1 };

std::size_t item_size(Dtype dtype);
/// NPY descr string, e.g. "<f8".
std::string descr(Dtype dtype);

/// Decoded array: row-major, little-endian element bytes.
struct Array {
  Dtype dtype = Dtype::F8;
  Shape shape;
  std::vector<std::byte> bytes;

  std::size_t size() const { return shape_size(shape); }

  /// Element values widened to double (64-bit integers may round).
  std::vector<double> to_doubles() const;
  std::vector<std::int64_t> to_integers() const;

  static Array from_doubles(Shape shape, std::span<const double> values);
  static Array from_floats(Shape shape, std::span<const float> values);
  static Array from_int32(Shape shape, std::span<const std::int32_t> values);
  static Array from_int64(Shape shape, std::span<const std::int64_t> values);

  bool operator==(const Array &) const = default;
};

Array decode(std::span<const std::byte> file);

/// NPY v1.0 file image. With fortran_order the payload is written
/// column-major; decode() restores row-major order.
std::vector<std::byte> encode(const Array &array, bool fortran_order = false);

/// Read-only view of a zip archive; entries are decoded on request so
/// archives holding non-numeric entries can still be used.
class Archive {
public:
  static Archive open(const std::string &path);
  explicit Archive(std::vector<std::byte> data);

  /// Entry names without the ".npy" suffix.
  std::vector<std::string> names() const;
  bool contains(const std::string &name) const;
  Array read(const std::string &name) const;

private:
  struct Entry {
    std::uint16_t method = 0;
    std::uint32_t crc = 0;
    std::uint64_t compressed = 0;
    std::uint64_t uncompressed = 0;
    std::uint64_t header_offset = 0;
  };

  std::vector<std::byte> data_;
  std::map<std::string, Entry> entries_;
};

/// Decodes every entry.
std::map<std::string, Array> parse_array_container(std::span<const std::byte> data);

/// Zip image with one stored entry "<name>.npy" per array.
std::vector<std::byte> encode_archive(const std::map<std::string, Array> &arrays,
                                      bool fortran_order = false);
void write_archive(const std::string &path, const std::map<std::string, Array> &arrays);

std::vector<std::byte> read_file(const std::string &path);
void write_file(const std::string &path, std::span<const std::byte> data);

} // namespace geomatt::npy
