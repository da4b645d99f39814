#pragma once

#include "geomatt/dataset.hpp"
#include "geomatt/model.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace geomatt {

struct TrainConfig {
  double rho = 0.01; // energy weight in the loss
  double lr = 1e-4;
  double lr_decay = 0.96;
  std::size_t lr_decay_every = 1000; // epochs
  std::size_t epochs = 2000;
  std::size_t batch_size = 10;
  std::uint64_t seed = 0;
  std::size_t folds = 5;
  std::size_t fold = 0; // validation fold
  std::size_t n_train = 1000;

  void validate() const;
  bool operator==(const TrainConfig &) const = default;
};

double lr_at(std::size_t epoch, const TrainConfig &config);

/// rho (E - E_ref)^2 + (1/N) sum_i |F_i - F_ref_i|^2
double loss(const EnergyForces &pred, double energy_ref, const std::vector<Vec3> &forces_ref,
            double rho);

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t step = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
};

/// Bias-corrected Adam update of params in place. Entries of `params` may be
/// null to skip a tensor (its moments are still kept in step).
void adam_step(const std::vector<Tensor *> &params, const std::vector<Tensor> &grads,
               AdamState &state, double lr);

struct SampleGradient {
  double loss = 0.0;
  EnergyForces prediction;
  NetworkWeights<Tensor> grads;
};

/// Loss of one labelled geometry and its exact gradient with respect to
/// every network tensor, force term included.
SampleGradient loss_and_gradient(const Model &model, const Geometry &geometry,
                                 double energy_ref, const std::vector<Vec3> &forces_ref,
                                 double rho);

struct ErrorMetrics {
  double energy_mae = 0.0; // kcal/mol
  double force_mae = 0.0;  // kcal/mol/Å, over atoms, components and samples
};

/// Labels every geometry with the energies and forces predicted by `teacher`.
Dataset label_with_model(const Model &teacher, const std::vector<Geometry> &geometries);

ErrorMetrics evaluate(const Model &model, const Dataset &dataset);
double mean_loss(const Model &model, const Dataset &dataset, double rho);

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0; // mean per-sample loss seen during the epoch
  double val_energy_mae = 0.0;
  double val_force_mae = 0.0;
};

/// One JSON object per line: {epoch, lr, train_loss, val_E_mae, val_F_mae}.
std::string metrics_line(const EpochRecord &record);

using EpochCallback = std::function<void(const EpochRecord &)>;
using TrainableFilter = std::function<bool(const std::string &)>;

struct FitResult {
  Model best;               // lowest validation force MAE (last epoch without validation data)
  std::size_t best_epoch = 0; // epochs completed when `best` was taken
  std::vector<EpochRecord> history;
};

/// Mini-batch Adam on `fit_set`. Tensors rejected by `trainable` get
/// gradients computed but never applied.
FitResult fit(Model model, const Dataset &fit_set, const Dataset &validation,
              const TrainConfig &config, const TrainableFilter &trainable = {},
              const EpochCallback &on_epoch = {});

struct TrainResult {
  FitResult fit;
  Split split;
};

/// Full pipeline: split, initialise, centre energies on the fitting data,
/// train on every fold but config.fold and validate on that fold.
TrainResult train(const Dataset &dataset, const ModelConfig &model_config,
                  const TrainConfig &config, const EpochCallback &on_epoch = {});

/// Keeps embeddings and streams of `base`, re-initialises and trains the
/// readout on `target`.
TrainResult transfer(const Model &base, const Dataset &target, const TrainConfig &config,
                     const EpochCallback &on_epoch = {});

} // namespace geomatt
