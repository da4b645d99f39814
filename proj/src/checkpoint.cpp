#include "geomatt/checkpoint.hpp"

#include "geomatt/npy.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <map>
#include <stdexcept>

namespace geomatt {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoints assume a little-endian host");

constexpr char kMagic[4] = {'G', 'A', 'T', 'T'};
constexpr std::uint8_t kFloat64 = 1;

class Writer {
public:
  template <class T> void put(T value) {
    const auto *p = reinterpret_cast<const std::byte *>(&value);
    out_.insert(out_.end(), p, p + sizeof(T));
  }
  void put_bytes(const void *data, std::size_t n) {
    const auto *p = static_cast<const std::byte *>(data);
    out_.insert(out_.end(), p, p + n);
  }
  void tensor(const std::string &name, const Tensor &t) {
    put<std::uint32_t>(std::uint32_t(name.size()));
    put_bytes(name.data(), name.size());
    put<std::uint8_t>(kFloat64);
    put<std::uint8_t>(std::uint8_t(t.rank()));
    for (std::size_t d : t.shape()) put<std::uint64_t>(d);
    put_bytes(t.data().data(), t.size() * sizeof(double));
  }
  std::vector<std::byte> take() { return std::move(out_); }

private:
  std::vector<std::byte> out_;
};

class Reader {
public:
  explicit Reader(std::span<const std::byte> in) : in_(in) {}
  template <class T> T get(const char *what) {
    T value;
    std::memcpy(&value, take(sizeof(T), what), sizeof(T));
    return value;
  }
  const std::byte *take(std::size_t n, const char *what) {
    if (n > in_.size() - pos_)
      throw std::runtime_error(std::string("checkpoint truncated while reading ") + what);
    const std::byte *p = in_.data() + pos_;
    pos_ += n;
    return p;
  }
  bool done() const { return pos_ == in_.size(); }

private:
  std::span<const std::byte> in_;
  std::size_t pos_ = 0;
};

Tensor vector_tensor(const std::vector<double> &v) { return Tensor({v.size()}, v); }

// Integers stored in doubles must be exact non-negative integers.
std::size_t as_count(double x, const std::string &what) {
  if (!(x >= 0.0) || x != std::floor(x) || x > 9007199254740992.0)
    throw std::runtime_error("checkpoint field " + what + " is not a valid count");
  return std::size_t(x);
}

const Tensor &required(const std::map<std::string, Tensor> &tensors, const std::string &name,
                       std::size_t length) {
  const auto it = tensors.find(name);
  if (it == tensors.end()) throw std::runtime_error("checkpoint lacks tensor " + name);
  if (it->second.rank() != 1 || (length && it->second.size() != length))
    throw std::runtime_error("checkpoint tensor " + name + " has shape " +
                             shape_string(it->second.shape()));
  return it->second;
}

} // namespace

bool Checkpoint::operator==(const Checkpoint &other) const {
  if (!(model.config() == other.model.config()) || model.species() != other.model.species() ||
      !(train == other.train) || epoch != other.epoch ||
      std::bit_cast<std::uint64_t>(model.energy_offset()) !=
          std::bit_cast<std::uint64_t>(other.model.energy_offset()))
    return false;
  std::vector<const Tensor *> mine;
  visit_weights(model.weights(), [&](const std::string &, const Tensor &t) { mine.push_back(&t); });
  std::size_t i = 0;
  bool same = true;
  visit_weights(other.model.weights(), [&](const std::string &, const Tensor &t) {
    same = same && i < mine.size() && bit_identical(*mine[i], t);
    ++i;
  });
  return same && i == mine.size();
}

std::vector<std::byte> encode_checkpoint(const Checkpoint &c) {
  const ModelConfig &mc = c.model.config();
  const TrainConfig &t = c.train;
  std::vector<std::pair<std::string, Tensor>> tensors;
  tensors.emplace_back("meta.grid", vector_tensor({mc.gamma, mc.delta_d, mc.d_max}));
  tensors.emplace_back("meta.architecture",
                       vector_tensor({double(mc.feature_dim), double(mc.base_inner_dim),
                                      double(mc.layers), double(mc.hidden)}));
  tensors.emplace_back("meta.stream_orders",
                       vector_tensor({mc.stream_orders.begin(), mc.stream_orders.end()}));
  tensors.emplace_back("meta.species",
                       vector_tensor({c.model.species().begin(), c.model.species().end()}));
  tensors.emplace_back("meta.energy_offset", vector_tensor({c.model.energy_offset()}));
  // The seed is split so each half is exact in a double.
  tensors.emplace_back("meta.train",
                       vector_tensor({t.rho, t.lr, t.lr_decay, double(t.lr_decay_every),
                                      double(t.epochs), double(t.batch_size),
                                      double(t.seed >> 32), double(t.seed & 0xffffffffu),
                                      double(t.folds), double(t.n_train)}));
  tensors.emplace_back("meta.progress", vector_tensor({double(c.epoch), double(t.fold)}));
  visit_weights(c.model.weights(),
                [&](const std::string &name, const Tensor &w) { tensors.emplace_back(name, w); });

  Writer w;
  w.put_bytes(kMagic, 4);
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint32_t>(std::uint32_t(tensors.size()));
  for (const auto &[name, tensor] : tensors) w.tensor(name, tensor);
  return w.take();
}

Checkpoint decode_checkpoint(std::span<const std::byte> bytes) {
  Reader r(bytes);
  if (std::memcmp(r.take(4, "magic"), kMagic, 4) != 0)
    throw std::runtime_error("not a checkpoint: magic bytes are not GATT");
  const auto version = r.get<std::uint32_t>("version");
  if (version == 0 || version > kCheckpointVersion)
    throw std::runtime_error("checkpoint version " + std::to_string(version) +
                             " is not supported (this build reads version " +
                             std::to_string(kCheckpointVersion) + ")");
  const auto count = r.get<std::uint32_t>("tensor count");

  std::map<std::string, Tensor> tensors;
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto length = r.get<std::uint32_t>("name length");
    const auto *name_bytes = reinterpret_cast<const char *>(r.take(length, "tensor name"));
    std::string name(name_bytes, length);
    const auto dtype = r.get<std::uint8_t>("dtype");
    if (dtype != kFloat64)
      throw std::runtime_error("checkpoint tensor " + name + " has unsupported dtype code " +
                               std::to_string(dtype));
    const auto rank = r.get<std::uint8_t>("rank");
    Shape shape;
    std::size_t size = 1;
    for (std::uint8_t d = 0; d < rank; ++d) {
      const auto dim = r.get<std::uint64_t>("dimensions");
      if (dim != 0 && size > (std::size_t(1) << 56) / dim)
        throw std::runtime_error("checkpoint tensor " + name + " is implausibly large");
      size *= dim;
      shape.push_back(dim);
    }
    Tensor t(shape);
    std::memcpy(t.data().data(), r.take(size * sizeof(double), "tensor data"),
                size * sizeof(double));
    if (!tensors.emplace(name, std::move(t)).second)
      throw std::runtime_error("checkpoint repeats tensor " + name);
  }
  if (!r.done()) throw std::runtime_error("checkpoint has trailing bytes");

  ModelConfig mc;
  const Tensor &grid = required(tensors, "meta.grid", 3);
  mc.gamma = grid[0];
  mc.delta_d = grid[1];
  mc.d_max = grid[2];
  const Tensor &arch = required(tensors, "meta.architecture", 4);
  mc.feature_dim = as_count(arch[0], "feature_dim");
  mc.base_inner_dim = as_count(arch[1], "base_inner_dim");
  mc.layers = as_count(arch[2], "layers");
  mc.hidden = as_count(arch[3], "hidden");
  mc.stream_orders.clear();
  for (double x : required(tensors, "meta.stream_orders", 0).data())
    mc.stream_orders.push_back(int(as_count(x, "stream order")));
  std::vector<int> species;
  for (double x : required(tensors, "meta.species", 0).data())
    species.push_back(int(as_count(x, "species")));
  try {
    mc.validate();
  } catch (const std::exception &e) {
    throw std::runtime_error(std::string("checkpoint holds an invalid architecture: ") + e.what());
  }

  TrainConfig tc;
  const Tensor &tr = required(tensors, "meta.train", 10);
  tc.rho = tr[0];
  tc.lr = tr[1];
  tc.lr_decay = tr[2];
  tc.lr_decay_every = as_count(tr[3], "lr_decay_every");
  tc.epochs = as_count(tr[4], "epochs");
  tc.batch_size = as_count(tr[5], "batch_size");
  tc.seed = (std::uint64_t(as_count(tr[6], "seed")) << 32) | std::uint64_t(as_count(tr[7], "seed"));
  tc.folds = as_count(tr[8], "folds");
  tc.n_train = as_count(tr[9], "n_train");
  const Tensor &progress = required(tensors, "meta.progress", 2);
  tc.fold = as_count(progress[1], "fold");

  // Take the weight layout from a freshly built model, then fill it by name.
  Model model = Model::initialize(mc, species, 0);
  std::size_t weight_count = 0;
  visit_weights(model.weights(), [&](const std::string &name, Tensor &w) {
    const auto it = tensors.find(name);
    if (it == tensors.end()) throw std::runtime_error("checkpoint lacks tensor " + name);
    if (it->second.shape() != w.shape())
      throw std::runtime_error("checkpoint tensor " + name + " has shape " +
                               shape_string(it->second.shape()) + ", architecture needs " +
                               shape_string(w.shape()));
    w = it->second;
    ++weight_count;
  });
  const std::size_t meta_count = 7;
  if (tensors.size() != weight_count + meta_count) {
    for (const auto &[name, tensor] : tensors) {
      bool known = name.rfind("meta.", 0) == 0;
      visit_weights(model.weights(),
                    [&](const std::string &n, const Tensor &) { known = known || n == name; });
      if (!known) throw std::runtime_error("checkpoint has unexpected tensor " + name);
    }
    throw std::runtime_error("checkpoint has unexpected meta tensors");
  }
  model.set_energy_offset(required(tensors, "meta.energy_offset", 1)[0]);
  return Checkpoint{std::move(model), tc, as_count(progress[0], "epoch")};
}

void save_checkpoint(const std::string &path, const Checkpoint &checkpoint) {
  npy::write_file(path, encode_checkpoint(checkpoint));
}

Checkpoint load_checkpoint(const std::string &path) {
  const std::vector<std::byte> bytes = npy::read_file(path);
  try {
    return decode_checkpoint(bytes);
  } catch (const std::runtime_error &e) {
    throw std::runtime_error(path + ": " + e.what());
  }
}

} // namespace geomatt
