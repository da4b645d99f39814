#include "geomatt/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>
#include <string>

namespace geomatt {

std::size_t ModelConfig::inner_dim(int order) const {
  if (order < 2) {
    throw std::invalid_argument("stream order must be >= 2, got " +
                                std::to_string(order));
  }
  const std::size_t divisor = std::size_t{1} << (order - 2);
  if (base_inner_dim % divisor != 0 || base_inner_dim / divisor == 0) {
    throw std::invalid_argument(
        "base inner dimension " + std::to_string(base_inner_dim) +
        " is not divisible by 2^(k-2) for order " + std::to_string(order));
  }
  return base_inner_dim / divisor;
}

DiscretizationGrid ModelConfig::grid() const {
  return make_grid(gamma, delta_d, d_max);
}

void ModelConfig::validate() const {
  if (feature_dim == 0 || hidden == 0 || base_inner_dim == 0) {
    throw std::invalid_argument("model dimensions must be positive");
  }
  if (stream_orders.empty()) {
    throw std::invalid_argument("model needs at least one stream");
  }
  for (int k : stream_orders) (void)inner_dim(k);
  (void)grid();
}

namespace {

Tensor normal_tensor(Shape shape, double sigma, std::mt19937_64 &rng) {
  std::normal_distribution<double> dist(0.0, sigma);
  Tensor t(std::move(shape));
  for (double &x : t.data()) x = dist(rng);
  return t;
}

ReadoutWeights<Tensor> random_readout(const ModelConfig &config,
                                      std::mt19937_64 &rng) {
  const std::size_t in = config.stream_orders.size() * config.feature_dim;
  const std::size_t h = config.hidden;
  return {normal_tensor({in, h}, 1.0 / std::sqrt(double(in)), rng),
          Tensor({h}),
          normal_tensor({h, 1}, 1.0 / std::sqrt(double(h)), rng),
          Tensor({1})};
}

} // namespace

Model Model::initialize(const ModelConfig &config, std::vector<int> species,
                        std::uint64_t seed) {
  config.validate();
  std::sort(species.begin(), species.end());
  species.erase(std::unique(species.begin(), species.end()), species.end());
  if (species.empty()) {
    throw std::invalid_argument("model needs at least one species");
  }

  std::mt19937_64 rng(seed);
  const std::size_t fv = config.feature_dim;
  const std::size_t points = config.grid().count;
  const double sigma_qk = 1.0 / std::sqrt(double(points));

  NetworkWeights<Tensor> w;
  w.embedding = normal_tensor({species.size(), fv}, 1.0 / std::sqrt(double(fv)), rng);
  for (int order : config.stream_orders) {
    StreamWeights<Tensor> stream;
    stream.order = order;
    const std::size_t fi = config.inner_dim(order);
    for (std::size_t l = 0; l < config.layers; ++l) {
      LayerWeights<Tensor> layer;
      for (int m = 0; m < order - 1; ++m) {
        layer.attention.push_back({normal_tensor({fi, points}, sigma_qk, rng),
                                   normal_tensor({fi, points}, sigma_qk, rng),
                                   Tensor({fi}), Tensor({fi})});
      }
      layer.weight = normal_tensor({fv, fv}, 1.0 / std::sqrt(double(fv)), rng);
      layer.bias = Tensor({fv});
      stream.layers.push_back(std::move(layer));
    }
    w.streams.push_back(std::move(stream));
  }
  w.readout = random_readout(config, rng);
  return Model(config, std::move(species), std::move(w));
}

Model::Model(ModelConfig config, std::vector<int> species,
             NetworkWeights<Tensor> weights, double energy_offset)
    : config_(std::move(config)), species_(std::move(species)),
      weights_(std::move(weights)), energy_offset_(energy_offset) {
  config_.validate();
  grid_ = config_.grid();
  check_consistency();
}

void Model::check_consistency() const {
  const std::size_t fv = config_.feature_dim;
  auto expect = [](const Tensor &t, const Shape &s, const std::string &what) {
    if (t.shape() != s) {
      throw std::invalid_argument(what + " has shape " + shape_string(t.shape()) +
                                  ", expected " + shape_string(s));
    }
  };
  if (!std::is_sorted(species_.begin(), species_.end()) ||
      std::adjacent_find(species_.begin(), species_.end()) != species_.end()) {
    throw std::invalid_argument("species list must be sorted and unique");
  }
  expect(weights_.embedding, {species_.size(), fv}, "embedding");
  if (weights_.streams.size() != config_.stream_orders.size()) {
    throw std::invalid_argument("stream count does not match configuration");
  }
  for (std::size_t s = 0; s < weights_.streams.size(); ++s) {
    const auto &stream = weights_.streams[s];
    const int order = config_.stream_orders[s];
    if (stream.order != order || stream.layers.size() != config_.layers) {
      throw std::invalid_argument("stream " + std::to_string(s) +
                                  " does not match configuration");
    }
    const std::size_t fi = config_.inner_dim(order);
    for (const auto &layer : stream.layers) {
      if (layer.attention.size() != static_cast<std::size_t>(order - 1)) {
        throw std::invalid_argument("stream " + std::to_string(s) +
                                    " has the wrong number of overlap modules");
      }
      for (const auto &m : layer.attention) {
        expect(m.query, {fi, grid_.count}, "overlap query");
        expect(m.key, {fi, grid_.count}, "overlap key");
        expect(m.query_bias, {fi}, "overlap query bias");
        expect(m.key_bias, {fi}, "overlap key bias");
      }
      expect(layer.weight, {fv, fv}, "interaction weight");
      expect(layer.bias, {fv}, "interaction bias");
    }
  }
  const std::size_t in = config_.stream_orders.size() * fv;
  expect(weights_.readout.w1, {in, config_.hidden}, "readout.w1");
  expect(weights_.readout.b1, {config_.hidden}, "readout.b1");
  expect(weights_.readout.w2, {config_.hidden, 1}, "readout.w2");
  expect(weights_.readout.b2, {1}, "readout.b2");
}

bool Model::has_species(int z) const {
  return std::binary_search(species_.begin(), species_.end(), z);
}

std::size_t Model::species_row(int z) const {
  const auto it = std::lower_bound(species_.begin(), species_.end(), z);
  if (it == species_.end() || *it != z) {
    throw std::invalid_argument("unknown species: atomic number " +
                                std::to_string(z) + " has no embedding");
  }
  return static_cast<std::size_t>(it - species_.begin());
}

void Model::reset_readout(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  weights_.readout = random_readout(config_, rng);
}

AttentionBlock Model::attention_block(std::size_t stream,
                                      std::size_t layer) const {
  const auto &s = weights_.streams.at(stream);
  const auto &l = s.layers.at(layer);
  AttentionBlock block;
  block.order = s.order;
  block.grid = grid_;
  for (const auto &m : l.attention) {
    block.modules.push_back({m.query, m.key, m.query_bias, m.key_bias});
  }
  return block;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  visit_weights(weights_, [&](const std::string &, const Tensor &t) { n += t.size(); });
  return n;
}

// ---------------------------------------------------------------------------

ad::Var interaction(ad::Var v, ad::Var alpha, ad::Var weight, ad::Var bias) {
  const std::size_t fv = weight.shape().at(0);
  ad::Var messages = ad::add(ad::matmul(v, ad::transpose(weight)),
                             ad::reshape(bias, {1, fv}));
  return ad::add(v, ad::matmul(alpha, messages));
}

namespace {

Tensor positions_tensor(const Geometry &geometry) {
  Tensor p({geometry.size(), 3});
  for (std::size_t i = 0; i < geometry.size(); ++i)
    for (std::size_t c = 0; c < 3; ++c) p(i, c) = geometry.position(i)[c];
  return p;
}

std::vector<std::size_t> embedding_rows(const Geometry &geometry,
                                        const Model &model) {
  std::vector<std::size_t> rows;
  rows.reserve(geometry.size());
  for (int z : geometry.species()) rows.push_back(model.species_row(z));
  return rows;
}

ad::Var record_stream(const PairBasis &basis, ad::Var v0,
                      const StreamWeights<ad::Var> &stream, double delta_d) {
  ad::Var v = v0;
  for (const auto &layer : stream.layers) {
    std::vector<OverlapVars> modules;
    for (const auto &m : layer.attention) {
      modules.push_back({m.query, m.key, m.query_bias, m.key_bias});
    }
    ad::Var alpha = attention_matrix(basis, modules, delta_d);
    v = interaction(v, alpha, layer.weight, layer.bias);
  }
  return v;
}

} // namespace

TapeForward record_forward(ad::Tape &tape, const Model &model,
                           const Geometry &geometry, bool weights_as_leaves) {
  const auto rows = embedding_rows(geometry, model);
  TapeForward fwd;
  fwd.positions = tape.leaf(positions_tensor(geometry));
  fwd.weights = map_weights<ad::Var>(model.weights(), [&](const Tensor &t) {
    return weights_as_leaves ? tape.leaf(t) : tape.constant(t);
  });

  const PairBasis basis = pair_basis(fwd.positions, model.grid());
  ad::Var v0 = ad::gather_rows(fwd.weights.embedding, rows);

  std::vector<ad::Var> finals;
  for (const auto &stream : fwd.weights.streams) {
    finals.push_back(record_stream(basis, v0, stream, model.grid().delta_d));
  }
  ad::Var u = finals.size() == 1 ? finals[0] : ad::concat(finals, 1);

  const auto &ro = fwd.weights.readout;
  const std::size_t h = model.config().hidden;
  ad::Var hidden =
      ad::shifted_softplus(ad::add(ad::matmul(u, ro.w1), ad::reshape(ro.b1, {1, h})));
  fwd.atomic_energies = ad::add(ad::matmul(hidden, ro.w2), ad::reshape(ro.b2, {1, 1}));
  fwd.energy = ad::add(ad::sum(fwd.atomic_energies),
                       tape.constant(Tensor::scalar(model.energy_offset())));
  return fwd;
}

double shifted_softplus(double x) { return ad::shifted_softplus(x); }

Tensor interaction_layer(const Tensor &v, const Tensor &alpha,
                         const Tensor &weight, const Tensor &bias) {
  ad::Tape tape;
  return interaction(tape.constant(v), tape.constant(alpha),
                     tape.constant(weight), tape.constant(bias))
      .value();
}

Tensor stream_forward(const Geometry &geometry, const Model &model,
                      std::size_t stream) {
  const auto rows = embedding_rows(geometry, model);
  ad::Tape tape;
  ad::Var positions = tape.constant(positions_tensor(geometry));
  const PairBasis basis = pair_basis(positions, model.grid());
  const auto w = map_weights<ad::Var>(
      model.weights(), [&](const Tensor &t) { return tape.constant(t); });
  ad::Var v0 = ad::gather_rows(w.embedding, rows);
  return record_stream(basis, v0, w.streams.at(stream), model.grid().delta_d)
      .value();
}

double energy(const Geometry &geometry, const Model &model) {
  ad::Tape tape;
  return record_forward(tape, model, geometry, false).energy.value().item();
}

std::vector<double> atomic_energies(const Geometry &geometry,
                                    const Model &model) {
  ad::Tape tape;
  const auto &e = record_forward(tape, model, geometry, false).atomic_energies.value();
  return {e.data().begin(), e.data().end()};
}

EnergyForces forces(const Geometry &geometry, const Model &model) {
  ad::Tape tape;
  const TapeForward fwd = record_forward(tape, model, geometry, false);
  const ad::Gradients grads = tape.backward(fwd.energy);
  const Tensor &g = grads[fwd.positions];
  EnergyForces out;
  out.energy = fwd.energy.value().item();
  out.forces.resize(geometry.size());
  for (std::size_t i = 0; i < geometry.size(); ++i)
    for (std::size_t c = 0; c < 3; ++c) out.forces[i][c] = -g(i, c);
  return out;
}

NetworkWeights<Tensor> energy_weight_gradients(const Geometry &geometry,
                                               const Model &model) {
  ad::Tape tape;
  const TapeForward fwd = record_forward(tape, model, geometry, true);
  const ad::Gradients grads = tape.backward(fwd.energy);
  return map_weights<Tensor>(fwd.weights,
                             [&](const ad::Var &v) { return grads[v]; });
}

} // namespace geomatt
