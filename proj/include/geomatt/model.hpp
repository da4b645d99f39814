#pragma once

// The GeomAtt network: species embeddings, N_S streams of interaction
// layers driven by order-k geometric attention, and a per-atom readout whose
// outputs sum to the energy.

#include "geomatt/attention.hpp"
#include "geomatt/autodiff.hpp"
#include "geomatt/basis.hpp"
#include "geomatt/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace geomatt {

struct ModelConfig {
  std::size_t feature_dim = 128;    // F_v
  std::size_t base_inner_dim = 128; // F_I of the order-2 stream
  std::size_t layers = 3;           // interaction layers per stream
  std::vector<int> stream_orders = {2, 3, 4};
  std::size_t hidden = 128; // readout width
  double gamma = 20.0;
  double delta_d = 0.05;
  double d_max = 5.0;

  /// F_base / 2^(k-2).
  std::size_t inner_dim(int order) const;
  DiscretizationGrid grid() const;
  void validate() const;

  bool operator==(const ModelConfig &) const = default;
};

template <class T> struct OverlapWeights {
  T query, key, query_bias, key_bias;
};

template <class T> struct LayerWeights {
  std::vector<OverlapWeights<T>> attention; // order - 1 modules
  T weight;                                 // [F_v, F_v]
  T bias;                                   // [F_v]
};

template <class T> struct StreamWeights {
  int order = 2;
  std::vector<LayerWeights<T>> layers;
};

template <class T> struct ReadoutWeights {
  T w1; // [N_S * F_v, H]
  T b1; // [H]
  T w2; // [H, 1]
  T b2; // [1]
};

template <class T> struct NetworkWeights {
  T embedding; // [n_species, F_v]
  std::vector<StreamWeights<T>> streams;
  ReadoutWeights<T> readout;
};

/// Calls f(name, tensor) for every weight in a fixed order.
template <class W, class F> void visit_weights(W &&w, F &&f) {
  f(std::string("embedding"), w.embedding);
  for (std::size_t s = 0; s < w.streams.size(); ++s) {
    auto &stream = w.streams[s];
    for (std::size_t l = 0; l < stream.layers.size(); ++l) {
      auto &layer = stream.layers[l];
      const std::string prefix =
          "stream" + std::to_string(s) + ".layer" + std::to_string(l) + ".";
      for (std::size_t m = 0; m < layer.attention.size(); ++m) {
        const std::string mp = prefix + "overlap" + std::to_string(m) + ".";
        f(mp + "query", layer.attention[m].query);
        f(mp + "key", layer.attention[m].key);
        f(mp + "query_bias", layer.attention[m].query_bias);
        f(mp + "key_bias", layer.attention[m].key_bias);
      }
      f(prefix + "weight", layer.weight);
      f(prefix + "bias", layer.bias);
    }
  }
  f(std::string("readout.w1"), w.readout.w1);
  f(std::string("readout.b1"), w.readout.b1);
  f(std::string("readout.w2"), w.readout.w2);
  f(std::string("readout.b2"), w.readout.b2);
}

/// Maps every weight through f, preserving structure.
template <class U, class T, class F>
NetworkWeights<U> map_weights(const NetworkWeights<T> &w, F &&f) {
  NetworkWeights<U> out;
  out.embedding = f(w.embedding);
  for (const auto &stream : w.streams) {
    StreamWeights<U> s;
    s.order = stream.order;
    for (const auto &layer : stream.layers) {
      LayerWeights<U> l;
      for (const auto &m : layer.attention) {
        l.attention.push_back(OverlapWeights<U>{f(m.query), f(m.key),
                                                f(m.query_bias), f(m.key_bias)});
      }
      l.weight = f(layer.weight);
      l.bias = f(layer.bias);
      s.layers.push_back(std::move(l));
    }
    out.streams.push_back(std::move(s));
  }
  out.readout = {f(w.readout.w1), f(w.readout.b1), f(w.readout.w2),
                 f(w.readout.b2)};
  return out;
}

inline bool is_readout_weight(const std::string &name) {
  return name.rfind("readout.", 0) == 0;
}

class Model {
public:
  /// Random initialization. `species` lists the atomic numbers that get an
  /// embedding row; duplicates are removed and the list is sorted.
  static Model initialize(const ModelConfig &config, std::vector<int> species,
                          std::uint64_t seed);

  Model(ModelConfig config, std::vector<int> species,
        NetworkWeights<Tensor> weights, double energy_offset = 0.0);

  const ModelConfig &config() const { return config_; }
  const DiscretizationGrid &grid() const { return grid_; }
  const std::vector<int> &species() const { return species_; }
  bool has_species(int z) const;
  /// Embedding row of atomic number z; throws naming z when absent.
  std::size_t species_row(int z) const;

  NetworkWeights<Tensor> &weights() { return weights_; }
  const NetworkWeights<Tensor> &weights() const { return weights_; }

  /// Added to every predicted total energy.
  double energy_offset() const { return energy_offset_; }
  void set_energy_offset(double offset) { energy_offset_ = offset; }

  /// Fresh random readout layers (used by transfer learning).
  void reset_readout(std::uint64_t seed);

  /// Attention block of one layer in one stream.
  AttentionBlock attention_block(std::size_t stream, std::size_t layer) const;

  std::size_t parameter_count() const;

private:
  void check_consistency() const;

  ModelConfig config_;
  DiscretizationGrid grid_;
  std::vector<int> species_;
  NetworkWeights<Tensor> weights_;
  double energy_offset_ = 0.0;
};

/// Forward pass recorded on a tape.
struct TapeForward {
  ad::Var positions;              // [N, 3] leaf
  NetworkWeights<ad::Var> weights; // leaves or constants
  ad::Var atomic_energies;        // [N, 1]
  ad::Var energy;                 // scalar, offset included
};

/// Records the network on `tape`. Positions are always a leaf; weights are
/// leaves when `weights_as_leaves`, constants otherwise.
TapeForward record_forward(ad::Tape &tape, const Model &model,
                           const Geometry &geometry, bool weights_as_leaves);

/// v' = v + alpha (v W^T + b) on the tape.
ad::Var interaction(ad::Var v, ad::Var alpha, ad::Var weight, ad::Var bias);

struct EnergyForces {
  double energy = 0.0;              // kcal/mol
  std::vector<Vec3> forces;         // kcal/mol/Å
};

double shifted_softplus(double x);

/// v' = v + alpha (v W^T + b); v [N, F_v], alpha [N, N].
Tensor interaction_layer(const Tensor &v, const Tensor &alpha,
                         const Tensor &weight, const Tensor &bias);

/// Final [N, F_v] embeddings of one stream.
Tensor stream_forward(const Geometry &geometry, const Model &model,
                      std::size_t stream);

double energy(const Geometry &geometry, const Model &model);
std::vector<double> atomic_energies(const Geometry &geometry, const Model &model);

/// Energy and F_i = -dE/dx_i.
EnergyForces forces(const Geometry &geometry, const Model &model);

/// dE/d(weight) for every weight.
NetworkWeights<Tensor> energy_weight_gradients(const Geometry &geometry,
                                               const Model &model);

} // namespace geomatt
