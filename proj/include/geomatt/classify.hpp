#pragma once

// Shape classification with a single aggregation step: the centre atom of a
// degenerate pair is embedded by one interaction layer driven by one order-k
// attention block, and a linear softmax head on that embedding predicts the
// shape. The attention block and the head are trained together.

#include "geomatt/dataset.hpp"
#include "geomatt/model.hpp"

#include <cstdint>
#include <vector>

namespace geomatt {

struct ClassifyConfig {
  DegenerateKind kind = DegenerateKind::Distance;
  int order = 2;
  std::size_t epochs = 150;
  std::uint64_t seed = 0;
  std::size_t train_per_class = 200;
  std::size_t test_per_class = 100;
  double jitter = 0.01; // Å, per coordinate
  std::size_t feature_dim = 16;
  std::size_t inner_dim = 16; // F_I of the single attention block
  double gamma = 20.0;
  double delta_d = 0.05;
  double d_max = 5.0;
  double lr = 0.01;

  void validate() const;
};

/// Network whose only stream has order config.order and one layer.
Model classifier_embedding_model(const ClassifyConfig &config);

/// Embedding of the centre atom after the single aggregation step.
std::vector<double> centre_embedding(const Model &model, const Geometry &geometry,
                                     std::size_t centre);

struct LinearHead {
  std::vector<double> mean, scale; // input standardisation
  Tensor weight;                   // [2, F_v]
  Tensor bias;                     // [2]

  std::vector<double> logits(const std::vector<double> &features) const;
  int predict(const std::vector<double> &features) const;
};

struct ShapeClassifier {
  Model embedding;
  LinearHead head;
  std::size_t centre = 0;

  int predict(const Geometry &geometry) const;
};

struct LabelledShapes {
  std::vector<Geometry> geometries;
  std::vector<int> labels; // 0 for shape_a, 1 for shape_b
};

/// `per_class` jittered copies of each shape of the pair.
LabelledShapes sample_shapes(const DegeneratePair &pair, std::size_t per_class, double jitter,
                             std::uint64_t seed);

/// Full-batch Adam on the mean cross-entropy over attention and head weights.
/// Standardisation statistics are refreshed from the training set every
/// epoch and treated as constants.
ShapeClassifier train_shape_classifier(const ClassifyConfig &config, const DegeneratePair &pair,
                                       const LabelledShapes &train);

double accuracy(const ShapeClassifier &classifier, const LabelledShapes &data);

struct ClassifyResult {
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  /// Largest difference between the two clean shapes' centre embeddings at
  /// initialisation.
  double clean_gap = 0.0;
};

ClassifyResult classify_geometry(const ClassifyConfig &config);

} // namespace geomatt
