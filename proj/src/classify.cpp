#include "geomatt/classify.hpp"

#include "geomatt/attention.hpp"
#include "geomatt/training.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>

namespace geomatt {

void ClassifyConfig::validate() const {
  if (order < 2 || order > 4)
    throw std::invalid_argument("order must be 2, 3 or 4, got " + std::to_string(order));
  if (train_per_class == 0 || test_per_class == 0)
    throw std::invalid_argument("sample counts per class must be positive");
  if (!(jitter >= 0.0)) throw std::invalid_argument("jitter must be >= 0");
  if (!(lr > 0.0)) throw std::invalid_argument("lr must be > 0");
}

Model classifier_embedding_model(const ClassifyConfig &config) {
  config.validate();
  ModelConfig mc;
  mc.feature_dim = config.feature_dim;
  mc.base_inner_dim = config.inner_dim << (config.order - 2);
  mc.layers = 1;
  mc.stream_orders = {config.order};
  mc.hidden = 1;
  mc.gamma = config.gamma;
  mc.delta_d = config.delta_d;
  mc.d_max = config.d_max;
  return Model::initialize(mc, {1}, config.seed);
}

std::vector<double> centre_embedding(const Model &model, const Geometry &geometry,
                                     std::size_t centre) {
  const Tensor v = stream_forward(geometry, model, 0);
  const std::size_t f = v.dim(1);
  const auto row = v.data().subspan(centre * f, f);
  return {row.begin(), row.end()};
}

std::vector<double> LinearHead::logits(const std::vector<double> &x) const {
  std::vector<double> z(2);
  for (std::size_t c = 0; c < 2; ++c) {
    z[c] = bias[c];
    for (std::size_t f = 0; f < x.size(); ++f) z[c] += weight(c, f) * (x[f] - mean[f]) / scale[f];
  }
  return z;
}

int LinearHead::predict(const std::vector<double> &x) const {
  const std::vector<double> z = logits(x);
  return z[1] > z[0] ? 1 : 0;
}

int ShapeClassifier::predict(const Geometry &geometry) const {
  return head.predict(centre_embedding(embedding, geometry, centre));
}

LabelledShapes sample_shapes(const DegeneratePair &pair, std::size_t per_class, double jitter,
                             std::uint64_t seed) {
  LabelledShapes out;
  const Geometry *shapes[2] = {&pair.shape_a, &pair.shape_b};
  for (int label = 0; label < 2; ++label)
    for (Geometry &g : jittered_copies(*shapes[label], per_class, jitter, 2 * seed + label)) {
      out.geometries.push_back(std::move(g));
      out.labels.push_back(label);
    }
  return out;
}

namespace {

// With a single species every v_j equals the embedding row e, so the centre
// embedding after one layer is e + s (e W^T + b) with s the centre's
// attention row sum.
struct AffineEmbedding {
  std::vector<double> base;      // e
  std::vector<double> direction; // e W^T + b
};

AffineEmbedding affine_embedding(const Model &model) {
  const auto &w = model.weights();
  const std::size_t fv = model.config().feature_dim;
  const auto &layer = w.streams.at(0).layers.at(0);
  AffineEmbedding a{std::vector<double>(fv), std::vector<double>(fv)};
  for (std::size_t f = 0; f < fv; ++f) a.base[f] = w.embedding(0, f);
  for (std::size_t g = 0; g < fv; ++g) {
    a.direction[g] = layer.bias[g];
    for (std::size_t f = 0; f < fv; ++f) a.direction[g] += a.base[f] * layer.weight(g, f);
  }
  return a;
}

void standardise(LinearHead &head, const std::vector<std::vector<double>> &x) {
  const std::size_t n = x.size(), dim = x.front().size();
  head.mean.assign(dim, 0.0);
  head.scale.assign(dim, 0.0);
  for (const auto &v : x)
    for (std::size_t f = 0; f < dim; ++f) head.mean[f] += v[f] / double(n);
  for (const auto &v : x)
    for (std::size_t f = 0; f < dim; ++f)
      head.scale[f] += (v[f] - head.mean[f]) * (v[f] - head.mean[f]) / double(n);
  // Constant inputs keep unit scale so they contribute nothing after centring.
  for (double &s : head.scale) s = s > 0.0 ? std::sqrt(s) : 1.0;
}

} // namespace

ShapeClassifier train_shape_classifier(const ClassifyConfig &config, const DegeneratePair &pair,
                                       const LabelledShapes &train) {
  config.validate();
  if (train.geometries.empty()) throw std::invalid_argument("no training shapes");
  for (int z : pair.shape_a.species())
    if (z != pair.shape_a.species().front())
      throw std::invalid_argument("shape classification expects a single species");

  ShapeClassifier clf{classifier_embedding_model(config), {}, pair.center};
  const std::size_t fv = config.feature_dim, n = train.geometries.size();
  clf.head.weight = Tensor({2, fv});
  clf.head.bias = Tensor({2});
  const AffineEmbedding affine = affine_embedding(clf.embedding);
  auto &modules = clf.embedding.weights().streams[0].layers[0].attention;

  std::vector<Tensor *> params{&clf.head.weight, &clf.head.bias};
  for (auto &m : modules)
    for (Tensor *t : {&m.query, &m.key, &m.query_bias, &m.key_bias}) params.push_back(t);

  auto embed = [&](double s) {
    std::vector<double> v(fv);
    for (std::size_t f = 0; f < fv; ++f) v[f] = affine.base[f] + s * affine.direction[f];
    return v;
  };

  AdamState adam;
  std::vector<std::unique_ptr<ad::Tape>> tapes(n);
  std::vector<ad::Var> sums(n);
  std::vector<std::vector<OverlapVars>> leaves(n);
  std::vector<std::vector<double>> x(n);
  for (std::size_t epoch = 0; epoch <= config.epochs; ++epoch) {
    for (std::size_t s = 0; s < n; ++s) {
      tapes[s] = std::make_unique<ad::Tape>();
      ad::Tape &tape = *tapes[s];
      const Geometry &g = train.geometries[s];
      Tensor pos({g.size(), 3});
      for (std::size_t i = 0; i < g.size(); ++i)
        for (std::size_t c = 0; c < 3; ++c) pos(i, c) = g.position(i)[c];
      const PairBasis basis = pair_basis(tape.constant(pos), clf.embedding.grid());
      leaves[s].clear();
      for (const auto &m : modules)
        leaves[s].push_back({tape.leaf(m.query), tape.leaf(m.key), tape.leaf(m.query_bias),
                             tape.leaf(m.key_bias)});
      const ad::Var alpha = attention_matrix(basis, leaves[s], config.delta_d);
      sums[s] = ad::sum(ad::gather_rows(alpha, {pair.center}));
      x[s] = embed(sums[s].value().item());
    }
    standardise(clf.head, x);
    if (epoch == config.epochs) break;

    std::vector<Tensor> grads;
    for (const Tensor *p : params) grads.emplace_back(p->shape());
    for (std::size_t s = 0; s < n; ++s) {
      const std::vector<double> z = clf.head.logits(x[s]);
      const double p1 = 1.0 / (1.0 + std::exp(z[0] - z[1]));
      const double r[2] = {(1.0 - p1) - (train.labels[s] == 0), p1 - (train.labels[s] == 1)};
      double ds = 0.0;
      for (std::size_t c = 0; c < 2; ++c) {
        grads[1][c] += r[c] / double(n);
        for (std::size_t f = 0; f < fv; ++f) {
          const double xf = (x[s][f] - clf.head.mean[f]) / clf.head.scale[f];
          grads[0](c, f) += r[c] * xf / double(n);
          ds += r[c] * clf.head.weight(c, f) * affine.direction[f] / clf.head.scale[f];
        }
      }
      const ad::Gradients g = tapes[s]->backward(ad::scale(sums[s], ds / double(n)));
      std::size_t k = 2;
      for (const OverlapVars &m : leaves[s])
        for (const ad::Var &v : {m.query, m.key, m.query_bias, m.key_bias})
          grads[k++].add_inplace(g[v]);
    }
    adam_step(params, grads, adam, config.lr);
  }
  return clf;
}

double accuracy(const ShapeClassifier &classifier, const LabelledShapes &data) {
  std::size_t correct = 0;
  for (std::size_t s = 0; s < data.geometries.size(); ++s)
    correct += classifier.predict(data.geometries[s]) == data.labels[s];
  return data.geometries.empty() ? 0.0 : double(correct) / double(data.geometries.size());
}

ClassifyResult classify_geometry(const ClassifyConfig &config) {
  config.validate();
  const DegeneratePair pair = generate_degenerate_pair(config.kind);

  ClassifyResult result;
  const Model initial = classifier_embedding_model(config);
  const std::vector<double> a = centre_embedding(initial, pair.shape_a, pair.center);
  const std::vector<double> b = centre_embedding(initial, pair.shape_b, pair.center);
  for (std::size_t f = 0; f < a.size(); ++f)
    result.clean_gap = std::max(result.clean_gap, std::abs(a[f] - b[f]));

  // Disjoint noise streams for the two splits.
  const LabelledShapes train =
      sample_shapes(pair, config.train_per_class, config.jitter, 2 * config.seed + 1);
  const LabelledShapes test =
      sample_shapes(pair, config.test_per_class, config.jitter, 2 * config.seed + 2);
  const ShapeClassifier clf = train_shape_classifier(config, pair, train);
  result.train_accuracy = accuracy(clf, train);
  result.test_accuracy = accuracy(clf, test);
  return result;
}

} // namespace geomatt
