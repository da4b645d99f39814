#include "geomatt/npy.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cctype>
#include <cstring>
#include <fstream>
#include <iterator>

static_assert(std::endian::native == std::endian::little,
              "array payloads are handled as little-endian");

namespace geomatt::npy {

using Kind = ContainerError::Kind;

ContainerError::ContainerError(Kind kind, const std::string &message)
    : std::runtime_error(message), kind_(kind) {}

std::string kind_name(Kind kind) {
  switch (kind) {
  case Kind::BadMagic: return "bad magic";
  case Kind::UnsupportedVersion: return "unsupported version";
  case Kind::BadHeader: return "bad header";
  case Kind::UnsupportedDtype: return "unsupported dtype";
  case Kind::Truncated: return "truncated";
  case Kind::ShapeMismatch: return "shape mismatch";
  case Kind::BadArchive: return "bad archive";
  case Kind::MissingEntry: return "missing entry";
  }
  return "unknown";
}

std::size_t item_size(Dtype dtype) {
  switch (dtype) {
  case Dtype::F4:
  case Dtype::I4:
  case Dtype::U4: return 4;
  case Dtype::I1:
  case Dtype::U1: return 1;
  default: return 8;
  }
}

std::string descr(Dtype dtype) {
  switch (dtype) {
  case Dtype::F4: return "<f4";
  case Dtype::F8: return "<f8";
  case Dtype::I4: return "<i4";
  case Dtype::I8: return "<i8";
  case Dtype::U4: return "<u4";
  case Dtype::U8: return "<u8";
  case Dtype::I1: return "|i1";
  case Dtype::U1: return "|u1";
  }
  return "?";
}

namespace {

Dtype parse_descr(const std::string &text) {
  // '|' and '=' mark byte-order-free or native order; both are little-endian here.
  static const std::pair<const char *, Dtype> table[] = {
      {"<f4", Dtype::F4}, {"<f8", Dtype::F8}, {"<i4", Dtype::I4},
      {"<i8", Dtype::I8}, {"<u4", Dtype::U4}, {"<u8", Dtype::U8},
      {"=f4", Dtype::F4}, {"=f8", Dtype::F8}, {"=i4", Dtype::I4},
      {"=i8", Dtype::I8}, {"=u4", Dtype::U4}, {"=u8", Dtype::U8},
      {"|i1", Dtype::I1}, {"|u1", Dtype::U1},
  };
  for (const auto &[name, dtype] : table)
    if (text == name) return dtype;
  throw ContainerError(Kind::UnsupportedDtype, "unsupported dtype '" + text + "'");
}

template <class T> T load(const std::byte *p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  return v;
}

template <class T> void store(std::vector<std::byte> &out, T v) {
  const auto *p = reinterpret_cast<const std::byte *>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

// Reorders elements between column-major and row-major layouts.
std::vector<std::byte> reorder(std::span<const std::byte> src, const Shape &shape,
                               std::size_t item, bool to_row_major) {
  const std::size_t n = shape_size(shape), rank = shape.size();
  std::vector<std::byte> dst(src.size());
  if (n == 0) return dst;
  std::vector<std::size_t> fstride(rank);
  std::size_t s = 1;
  for (std::size_t k = 0; k < rank; ++k) {
    fstride[k] = s;
    s *= shape[k];
  }
  std::vector<std::size_t> idx(rank, 0);
  for (std::size_t row = 0; row < n; ++row) {
    std::size_t col = 0;
    for (std::size_t k = 0; k < rank; ++k) col += idx[k] * fstride[k];
    const std::size_t from = to_row_major ? col : row;
    const std::size_t to = to_row_major ? row : col;
    std::memcpy(dst.data() + to * item, src.data() + from * item, item);
    for (std::size_t k = rank; k-- > 0;) {
      if (++idx[k] < shape[k]) break;
      idx[k] = 0;
    }
  }
  return dst;
}

// Minimal reader for the Python dict literal in an NPY header.
class HeaderParser {
public:
  explicit HeaderParser(std::string text) : s_(std::move(text)) {}

  void parse(std::string &descr_out, bool &fortran, Shape &shape) {
    bool have_descr = false, have_order = false, have_shape = false;
    expect('{');
    while (true) {
      skip();
      if (peek() == '}') break;
      const std::string key = quoted();
      skip();
      expect(':');
      skip();
      if (key == "descr") {
        descr_out = quoted();
        have_descr = true;
      } else if (key == "fortran_order") {
        fortran = boolean();
        have_order = true;
      } else if (key == "shape") {
        shape = tuple();
        have_shape = true;
      } else {
        fail("unexpected key '" + key + "'");
      }
      skip();
      if (peek() == ',') ++pos_;
    }
    if (!have_descr || !have_order || !have_shape)
      fail("header lacks descr, fortran_order or shape");
  }

private:
  [[noreturn]] void fail(const std::string &why) const {
    throw ContainerError(Kind::BadHeader, "malformed array header: " + why);
  }
  char peek() const { return pos_ < s_.size() ? s_[pos_] : '\0'; }
  void skip() {
    while (pos_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[pos_]))) ++pos_;
  }
  void expect(char c) {
    skip();
    if (peek() != c) fail(std::string("expected '") + c + "'");
    ++pos_;
  }
  std::string quoted() {
    const char q = peek();
    if (q != '\'' && q != '"') fail("expected a quoted string");
    const std::size_t end = s_.find(q, pos_ + 1);
    if (end == std::string::npos) fail("unterminated string");
    std::string out = s_.substr(pos_ + 1, end - pos_ - 1);
    pos_ = end + 1;
    return out;
  }
  bool boolean() {
    if (s_.compare(pos_, 4, "True") == 0) {
      pos_ += 4;
      return true;
    }
    if (s_.compare(pos_, 5, "False") == 0) {
      pos_ += 5;
      return false;
    }
    fail("expected True or False");
  }
  Shape tuple() {
    expect('(');
    Shape out;
    while (true) {
      skip();
      if (peek() == ')') {
        ++pos_;
        return out;
      }
      if (!std::isdigit(static_cast<unsigned char>(peek()))) fail("bad shape entry");
      std::size_t v = 0;
      while (std::isdigit(static_cast<unsigned char>(peek()))) v = v * 10 + std::size_t(s_[pos_++] - '0');
      out.push_back(v);
      skip();
      if (peek() == ',') ++pos_;
    }
  }

  std::string s_;
  std::size_t pos_ = 0;
};

std::string shape_literal(const Shape &shape) {
  std::string out = "(";
  for (std::size_t k = 0; k < shape.size(); ++k) {
    if (k) out += ", ";
    out += std::to_string(shape[k]);
  }
  if (shape.size() == 1) out += ",";
  return out + ")";
}

template <class T> Array make_array(Dtype dtype, Shape shape, std::span<const T> values) {
  if (values.size() != shape_size(shape))
    throw std::invalid_argument("array values do not match shape " + shape_string(shape));
  Array a{dtype, std::move(shape), std::vector<std::byte>(values.size_bytes())};
  std::memcpy(a.bytes.data(), values.data(), values.size_bytes());
  return a;
}

} // namespace

std::vector<double> Array::to_doubles() const {
  std::vector<double> out(size());
  const std::byte *p = bytes.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    switch (dtype) {
    case Dtype::F4: out[i] = load<float>(p + 4 * i); break;
    case Dtype::F8: out[i] = load<double>(p + 8 * i); break;
    case Dtype::I4: out[i] = load<std::int32_t>(p + 4 * i); break;
    case Dtype::I8: out[i] = double(load<std::int64_t>(p + 8 * i)); break;
    case Dtype::U4: out[i] = load<std::uint32_t>(p + 4 * i); break;
    case Dtype::U8: out[i] = double(load<std::uint64_t>(p + 8 * i)); break;
    case Dtype::I1: out[i] = load<std::int8_t>(p + i); break;
    case Dtype::U1: out[i] = load<std::uint8_t>(p + i); break;
    }
  }
  return out;
}

std::vector<std::int64_t> Array::to_integers() const {
  std::vector<std::int64_t> out(size());
  const std::byte *p = bytes.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    switch (dtype) {
    case Dtype::I4: out[i] = load<std::int32_t>(p + 4 * i); break;
    case Dtype::I8: out[i] = load<std::int64_t>(p + 8 * i); break;
    case Dtype::U4: out[i] = load<std::uint32_t>(p + 4 * i); break;
    case Dtype::U8: out[i] = std::int64_t(load<std::uint64_t>(p + 8 * i)); break;
    case Dtype::I1: out[i] = load<std::int8_t>(p + i); break;
    case Dtype::U1: out[i] = load<std::uint8_t>(p + i); break;
    default:
      throw ContainerError(Kind::UnsupportedDtype,
                           "expected an integer array, got " + descr(dtype));
    }
  }
  return out;
}

Array Array::from_doubles(Shape shape, std::span<const double> values) {
  return make_array(Dtype::F8, std::move(shape), values);
}
Array Array::from_floats(Shape shape, std::span<const float> values) {
  return make_array(Dtype::F4, std::move(shape), values);
}
Array Array::from_int32(Shape shape, std::span<const std::int32_t> values) {
  return make_array(Dtype::I4, std::move(shape), values);
}
Array Array::from_int64(Shape shape, std::span<const std::int64_t> values) {
  return make_array(Dtype::I8, std::move(shape), values);
}

Array decode(std::span<const std::byte> file) {
  static const unsigned char magic[6] = {0x93, 'N', 'U', 'M', 'P', 'Y'};
  if (file.size() < 6 || std::memcmp(file.data(), magic, 6) != 0)
    throw ContainerError(Kind::BadMagic, "not an NPY array: bad magic");
  if (file.size() < 10) throw ContainerError(Kind::Truncated, "NPY preamble is truncated");
  const auto major = std::to_integer<unsigned>(file[6]);
  const auto minor = std::to_integer<unsigned>(file[7]);
  if (major != 1 || minor != 0)
    throw ContainerError(Kind::UnsupportedVersion,
                         "NPY version " + std::to_string(major) + "." +
                             std::to_string(minor) + " is not supported (need 1.0)");
  const std::size_t header_len = load<std::uint16_t>(file.data() + 8);
  if (file.size() < 10 + header_len)
    throw ContainerError(Kind::Truncated, "NPY header is truncated");

  std::string header(reinterpret_cast<const char *>(file.data() + 10), header_len);
  std::string text;
  bool fortran = false;
  Shape shape;
  HeaderParser(header).parse(text, fortran, shape);
  const Dtype dtype = parse_descr(text);

  const std::size_t expected = shape_size(shape) * item_size(dtype);
  const auto payload = file.subspan(10 + header_len);
  if (payload.size() < expected)
    throw ContainerError(Kind::Truncated,
                         "NPY payload has " + std::to_string(payload.size()) +
                             " bytes, shape " + shape_string(shape) + " needs " +
                             std::to_string(expected));
  if (payload.size() > expected)
    throw ContainerError(Kind::ShapeMismatch,
                         "NPY payload has " + std::to_string(payload.size()) +
                             " bytes but shape " + shape_string(shape) + " holds " +
                             std::to_string(expected));

  Array out{dtype, shape, {}};
  if (fortran && shape.size() > 1) {
    out.bytes = reorder(payload, shape, item_size(dtype), true);
  } else {
    out.bytes.assign(payload.begin(), payload.end());
  }
  return out;
}

std::vector<std::byte> encode(const Array &array, bool fortran_order) {
  if (array.bytes.size() != array.size() * item_size(array.dtype))
    throw std::invalid_argument("array byte count does not match its shape");
  std::string header = "{'descr': '" + descr(array.dtype) + "', 'fortran_order': " +
                       (fortran_order ? "True" : "False") +
                       ", 'shape': " + shape_literal(array.shape) + ", }";
  const std::size_t unpadded = 10 + header.size() + 1;
  header.append((64 - unpadded % 64) % 64, ' ');
  header.push_back('\n');

  std::vector<std::byte> out;
  for (unsigned char c : {0x93, 0x4e, 0x55, 0x4d, 0x50, 0x59, 0x01, 0x00}) // \x93NUMPY 1.0
    out.push_back(std::byte(c));
  store<std::uint16_t>(out, static_cast<std::uint16_t>(header.size()));
  for (char c : header) out.push_back(std::byte(c));
  if (fortran_order && array.shape.size() > 1) {
    const auto col = reorder(array.bytes, array.shape, item_size(array.dtype), false);
    out.insert(out.end(), col.begin(), col.end());
  } else {
    out.insert(out.end(), array.bytes.begin(), array.bytes.end());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Zip archives.

namespace {

constexpr std::uint32_t kLocalSig = 0x04034b50;
constexpr std::uint32_t kCentralSig = 0x02014b50;
constexpr std::uint32_t kEndSig = 0x06054b50;
constexpr std::uint32_t kZip64EndSig = 0x06064b50;
constexpr std::uint32_t kZip64LocatorSig = 0x07064b50;

class Cursor {
public:
  Cursor(std::span<const std::byte> data, std::uint64_t pos) : data_(data), pos_(pos) {}
  template <class T> T get() {
    need(sizeof(T));
    T v = load<T>(data_.data() + pos_);
    pos_ += sizeof(T);
    return v;
  }
  std::span<const std::byte> bytes(std::uint64_t n) {
    need(n);
    auto s = data_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  void skip(std::uint64_t n) { bytes(n); }
  std::uint64_t pos() const { return pos_; }

private:
  void need(std::uint64_t n) const {
    if (pos_ > data_.size() || n > data_.size() - pos_)
      throw ContainerError(Kind::BadArchive, "zip structure runs past the end of the file");
  }
  std::span<const std::byte> data_;
  std::uint64_t pos_;
};

std::string strip_suffix(std::string name) {
  if (name.size() > 4 && name.compare(name.size() - 4, 4, ".npy") == 0)
    name.resize(name.size() - 4);
  return name;
}

std::vector<std::byte> inflate_raw(std::span<const std::byte> in, std::uint64_t size) {
  std::vector<std::byte> out(size);
  z_stream zs{};
  if (inflateInit2(&zs, -MAX_WBITS) != Z_OK)
    throw ContainerError(Kind::BadArchive, "cannot initialise inflate");
  zs.next_in = reinterpret_cast<Bytef *>(const_cast<std::byte *>(in.data()));
  zs.avail_in = static_cast<uInt>(in.size());
  zs.next_out = reinterpret_cast<Bytef *>(out.data());
  zs.avail_out = static_cast<uInt>(out.size());
  const int rc = inflate(&zs, Z_FINISH);
  const auto produced = zs.total_out;
  inflateEnd(&zs);
  if (rc != Z_STREAM_END || produced != size)
    throw ContainerError(Kind::BadArchive, "corrupt deflate stream in zip entry");
  return out;
}

std::uint32_t crc_of(std::span<const std::byte> data) {
  return static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef *>(data.data()), static_cast<uInt>(data.size())));
}

} // namespace

Archive Archive::open(const std::string &path) { return Archive(read_file(path)); }

Archive::Archive(std::vector<std::byte> data) : data_(std::move(data)) {
  const std::span<const std::byte> all(data_);
  if (all.size() < 22) throw ContainerError(Kind::BadArchive, "file is too small to be a zip archive");

  // The end record sits in the last 22 + 65535 bytes (trailing comment).
  std::uint64_t end = all.size() - 22;
  const std::uint64_t lowest = all.size() > 22 + 65535 ? all.size() - 22 - 65535 : 0;
  while (load<std::uint32_t>(all.data() + end) != kEndSig) {
    if (end == lowest) throw ContainerError(Kind::BadArchive, "zip end-of-directory record not found");
    --end;
  }
  Cursor eocd(all, end + 4);
  eocd.skip(6);
  std::uint64_t count = eocd.get<std::uint16_t>();
  eocd.skip(4);
  std::uint64_t dir_offset = eocd.get<std::uint32_t>();

  if (count == 0xFFFF || dir_offset == 0xFFFFFFFF) {
    if (end < 20) throw ContainerError(Kind::BadArchive, "zip64 locator missing");
    Cursor loc(all, end - 20);
    if (loc.get<std::uint32_t>() != kZip64LocatorSig)
      throw ContainerError(Kind::BadArchive, "zip64 locator missing");
    loc.skip(4);
    Cursor z64(all, loc.get<std::uint64_t>());
    if (z64.get<std::uint32_t>() != kZip64EndSig)
      throw ContainerError(Kind::BadArchive, "zip64 end record missing");
    z64.skip(8 + 2 + 2 + 4 + 4 + 8);
    count = z64.get<std::uint64_t>();
    z64.skip(8);
    dir_offset = z64.get<std::uint64_t>();
  }

  Cursor dir(all, dir_offset);
  for (std::uint64_t e = 0; e < count; ++e) {
    if (dir.get<std::uint32_t>() != kCentralSig)
      throw ContainerError(Kind::BadArchive, "bad zip central directory entry");
    dir.skip(4);
    const auto flags = dir.get<std::uint16_t>();
    Entry entry;
    entry.method = dir.get<std::uint16_t>();
    dir.skip(4);
    entry.crc = dir.get<std::uint32_t>();
    entry.compressed = dir.get<std::uint32_t>();
    entry.uncompressed = dir.get<std::uint32_t>();
    const auto name_len = dir.get<std::uint16_t>();
    const auto extra_len = dir.get<std::uint16_t>();
    const auto comment_len = dir.get<std::uint16_t>();
    dir.skip(8);
    entry.header_offset = dir.get<std::uint32_t>();
    const auto name_bytes = dir.bytes(name_len);
    std::string name(reinterpret_cast<const char *>(name_bytes.data()), name_len);

    // Zip64 extended information: only the saturated fields are present.
    Cursor extra(dir.bytes(extra_len), 0);
    for (std::uint64_t used = 0; used + 4 <= extra_len;) {
      const auto id = extra.get<std::uint16_t>();
      const auto len = extra.get<std::uint16_t>();
      used += 4 + len;
      if (id != 0x0001) {
        extra.skip(len);
        continue;
      }
      Cursor z(extra.bytes(len), 0);
      if (entry.uncompressed == 0xFFFFFFFF) entry.uncompressed = z.get<std::uint64_t>();
      if (entry.compressed == 0xFFFFFFFF) entry.compressed = z.get<std::uint64_t>();
      if (entry.header_offset == 0xFFFFFFFF) entry.header_offset = z.get<std::uint64_t>();
    }
    dir.skip(comment_len);

    if (flags & 0x1) throw ContainerError(Kind::BadArchive, "encrypted zip entry '" + name + "'");
    if (entry.method != 0 && entry.method != 8)
      throw ContainerError(Kind::BadArchive, "zip entry '" + name + "' uses compression method " +
                                                 std::to_string(entry.method));
    if (!name.empty() && name.back() == '/') continue;
    entries_[strip_suffix(name)] = entry;
  }
}

std::vector<std::string> Archive::names() const {
  std::vector<std::string> out;
  for (const auto &[name, entry] : entries_) out.push_back(name);
  return out;
}

bool Archive::contains(const std::string &name) const { return entries_.count(name) > 0; }

Array Archive::read(const std::string &name) const {
  const auto it = entries_.find(name);
  if (it == entries_.end()) throw ContainerError(Kind::MissingEntry, "missing entry " + name);
  const Entry &entry = it->second;
  const std::span<const std::byte> all(data_);
  Cursor local(all, entry.header_offset);
  if (local.get<std::uint32_t>() != kLocalSig)
    throw ContainerError(Kind::BadArchive, "bad local header for zip entry '" + name + "'");
  local.skip(22);
  const auto name_len = local.get<std::uint16_t>();
  const auto extra_len = local.get<std::uint16_t>();
  local.skip(std::uint64_t(name_len) + extra_len);
  const auto stored = local.bytes(entry.compressed);

  std::vector<std::byte> raw;
  if (entry.method == 8) {
    raw = inflate_raw(stored, entry.uncompressed);
  } else {
    if (entry.compressed != entry.uncompressed)
      throw ContainerError(Kind::BadArchive, "stored zip entry '" + name + "' has inconsistent sizes");
    raw.assign(stored.begin(), stored.end());
  }
  if (crc_of(raw) != entry.crc)
    throw ContainerError(Kind::BadArchive, "CRC mismatch in zip entry '" + name + "'");
  try {
    return decode(raw);
  } catch (const ContainerError &e) {
    throw ContainerError(e.kind(), "entry " + name + ": " + e.what());
  }
}

std::map<std::string, Array> parse_array_container(std::span<const std::byte> data) {
  Archive archive(std::vector<std::byte>(data.begin(), data.end()));
  std::map<std::string, Array> out;
  for (const auto &name : archive.names()) out.emplace(name, archive.read(name));
  return out;
}

std::vector<std::byte> encode_archive(const std::map<std::string, Array> &arrays,
                                      bool fortran_order) {
  std::vector<std::byte> out, central;
  std::uint16_t count = 0;
  for (const auto &[key, array] : arrays) {
    const std::string name = key + ".npy";
    const auto body = encode(array, fortran_order);
    if (body.size() >= 0xFFFFFFFFull || out.size() >= 0xFFFFFFFFull)
      throw std::length_error("archive writer does not produce zip64 files");
    const auto crc = crc_of(body);
    const auto size = static_cast<std::uint32_t>(body.size());
    const auto offset = static_cast<std::uint32_t>(out.size());

    store<std::uint32_t>(out, kLocalSig);
    store<std::uint16_t>(out, 20); // version needed
    store<std::uint16_t>(out, 0);  // flags
    store<std::uint16_t>(out, 0);  // stored
    store<std::uint16_t>(out, 0);  // time
    store<std::uint16_t>(out, 0x21); // date 1980-01-01
    store<std::uint32_t>(out, crc);
    store<std::uint32_t>(out, size);
    store<std::uint32_t>(out, size);
    store<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    store<std::uint16_t>(out, 0);
    for (char c : name) out.push_back(std::byte(c));
    out.insert(out.end(), body.begin(), body.end());

    store<std::uint32_t>(central, kCentralSig);
    store<std::uint16_t>(central, 20);
    store<std::uint16_t>(central, 20);
    store<std::uint16_t>(central, 0);
    store<std::uint16_t>(central, 0);
    store<std::uint16_t>(central, 0);
    store<std::uint16_t>(central, 0x21);
    store<std::uint32_t>(central, crc);
    store<std::uint32_t>(central, size);
    store<std::uint32_t>(central, size);
    store<std::uint16_t>(central, static_cast<std::uint16_t>(name.size()));
    store<std::uint16_t>(central, 0); // extra
    store<std::uint16_t>(central, 0); // comment
    store<std::uint16_t>(central, 0); // disk
    store<std::uint16_t>(central, 0); // internal attributes
    store<std::uint32_t>(central, 0); // external attributes
    store<std::uint32_t>(central, offset);
    for (char c : name) central.push_back(std::byte(c));
    ++count;
  }
  const auto dir_offset = static_cast<std::uint32_t>(out.size());
  const auto dir_size = static_cast<std::uint32_t>(central.size());
  out.insert(out.end(), central.begin(), central.end());
  store<std::uint32_t>(out, kEndSig);
  store<std::uint16_t>(out, 0);
  store<std::uint16_t>(out, 0);
  store<std::uint16_t>(out, count);
  store<std::uint16_t>(out, count);
  store<std::uint32_t>(out, dir_size);
  store<std::uint32_t>(out, dir_offset);
  store<std::uint16_t>(out, 0);
  return out;
}

void write_archive(const std::string &path, const std::map<std::string, Array> &arrays) {
  write_file(path, encode_archive(arrays));
}

std::vector<std::byte> read_file(const std::string &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::vector<std::byte> out(raw.size());
  std::memcpy(out.data(), raw.data(), raw.size());
  return out;
}

void write_file(const std::string &path, std::span<const std::byte> data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.write(reinterpret_cast<const char *>(data.data()), static_cast<std::streamsize>(data.size()));
  if (!out) throw std::runtime_error("failed writing " + path);
}

} // namespace geomatt::npy
