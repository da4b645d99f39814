#include "geomatt/training.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>

namespace geomatt {

void TrainConfig::validate() const {
  if (!(rho >= 0.0)) throw std::invalid_argument("rho must be >= 0");
  if (!(lr > 0.0)) throw std::invalid_argument("lr must be > 0");
  if (!(lr_decay > 0.0)) throw std::invalid_argument("lr_decay must be > 0");
  if (lr_decay_every == 0) throw std::invalid_argument("lr_decay_every must be >= 1");
  if (batch_size == 0) throw std::invalid_argument("batch_size must be >= 1");
  if (folds < 2) throw std::invalid_argument("folds must be >= 2");
  if (fold >= folds)
    throw std::invalid_argument("fold " + std::to_string(fold) + " is out of range for " +
                                std::to_string(folds) + " folds");
}

double lr_at(std::size_t epoch, const TrainConfig &config) {
  return config.lr * std::pow(config.lr_decay, double(epoch / config.lr_decay_every));
}

double loss(const EnergyForces &pred, double energy_ref, const std::vector<Vec3> &forces_ref,
            double rho) {
  if (pred.forces.size() != forces_ref.size())
    throw std::invalid_argument("loss: predicted and reference forces differ in atom count");
  const double de = pred.energy - energy_ref;
  double sq = 0.0;
  for (std::size_t i = 0; i < forces_ref.size(); ++i)
    for (int c = 0; c < 3; ++c) {
      const double d = pred.forces[i][c] - forces_ref[i][c];
      sq += d * d;
    }
  return rho * de * de + sq / double(forces_ref.size());
}

void adam_step(const std::vector<Tensor *> &params, const std::vector<Tensor> &grads,
               AdamState &state, double lr) {
  if (params.size() != grads.size())
    throw std::invalid_argument("adam_step: " + std::to_string(params.size()) + " parameters but " +
                                std::to_string(grads.size()) + " gradients");
  if (state.m.empty()) {
    for (const Tensor &g : grads) {
      state.m.emplace_back(g.shape());
      state.v.emplace_back(g.shape());
    }
  }
  if (state.m.size() != grads.size())
    throw std::invalid_argument("adam_step: optimizer state holds a different parameter count");
  for (std::size_t k = 0; k < grads.size(); ++k) {
    if (grads[k].shape() != state.m[k].shape() ||
        (params[k] && params[k]->shape() != grads[k].shape()))
      throw std::invalid_argument("adam_step: gradient " + std::to_string(k) + " has shape " +
                                  shape_string(grads[k].shape()) + ", parameter has " +
                                  shape_string(state.m[k].shape()));
  }

  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, double(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, double(state.step));
  for (std::size_t k = 0; k < grads.size(); ++k) {
    auto m = state.m[k].data();
    auto v = state.v[k].data();
    const auto g = grads[k].data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
    }
    if (!params[k]) continue;
    auto p = params[k]->data();
    for (std::size_t i = 0; i < g.size(); ++i)
      p[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + state.eps);
  }
}

SampleGradient loss_and_gradient(const Model &model, const Geometry &geometry,
                                 double energy_ref, const std::vector<Vec3> &forces_ref,
                                 double rho) {
  const std::size_t n = geometry.size();
  if (forces_ref.size() != n)
    throw std::invalid_argument("reference forces do not match the geometry");
  ad::Tape tape;
  const TapeForward fwd = record_forward(tape, model, geometry, true);
  const Tensor grad_x = tape.backward(fwd.energy)[fwd.positions];

  SampleGradient out;
  out.prediction.energy = fwd.energy.value().item();
  out.prediction.forces.resize(n);
  Tensor residual({n, 3});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < 3; ++c) {
      out.prediction.forces[i][c] = -grad_x(i, c);
      residual(i, c) = -grad_x(i, c) - forces_ref[i][c];
    }
  out.loss = loss(out.prediction, energy_ref, forces_ref, rho);

  // With e = F - F_ref held fixed, d/dtheta sum|e|^2 / N = -(2/N) d/dtheta (dE/dx . e),
  // and dE/dx . e is the tangent of E along e.
  const ad::Seed seed{fwd.positions, residual};
  const ad::Var directional = tape.jvp(fwd.energy, std::span(&seed, 1));
  const ad::Var root =
      ad::add(ad::scale(fwd.energy, 2.0 * rho * (out.prediction.energy - energy_ref)),
              ad::scale(directional, -2.0 / double(n)));
  const ad::Gradients grads = tape.backward(root);
  out.grads = map_weights<Tensor>(fwd.weights, [&](const ad::Var &v) { return grads[v]; });
  return out;
}

Dataset label_with_model(const Model &teacher, const std::vector<Geometry> &geometries) {
  if (geometries.empty()) throw std::invalid_argument("no geometries to label");
  Dataset d;
  d.species = geometries.front().species();
  for (const Geometry &g : geometries) {
    if (g.species() != d.species)
      throw std::invalid_argument("all labelled geometries must share one species list");
    EnergyForces p = forces(g, teacher);
    d.geometries.push_back(g);
    d.energies.push_back(p.energy);
    d.forces.push_back(std::move(p.forces));
  }
  return d;
}

ErrorMetrics evaluate(const Model &model, const Dataset &dataset) {
  ErrorMetrics m;
  if (dataset.size() == 0) {
    m.energy_mae = m.force_mae = std::numeric_limits<double>::quiet_NaN();
    return m;
  }
  double e_sum = 0.0, f_sum = 0.0;
  for (std::size_t s = 0; s < dataset.size(); ++s) {
    const EnergyForces p = forces(dataset.geometries[s], model);
    e_sum += std::abs(p.energy - dataset.energies[s]);
    for (std::size_t i = 0; i < p.forces.size(); ++i)
      for (int c = 0; c < 3; ++c) f_sum += std::abs(p.forces[i][c] - dataset.forces[s][i][c]);
  }
  m.energy_mae = e_sum / double(dataset.size());
  m.force_mae = f_sum / double(dataset.size() * dataset.atoms() * 3);
  return m;
}

double mean_loss(const Model &model, const Dataset &dataset, double rho) {
  double total = 0.0;
  for (std::size_t s = 0; s < dataset.size(); ++s)
    total += loss(forces(dataset.geometries[s], model), dataset.energies[s], dataset.forces[s], rho);
  return dataset.size() ? total / double(dataset.size()) : 0.0;
}

std::string metrics_line(const EpochRecord &r) {
  nlohmann::json j;
  j["epoch"] = r.epoch;
  j["lr"] = r.lr;
  j["train_loss"] = r.train_loss;
  j["val_E_mae"] = r.val_energy_mae;
  j["val_F_mae"] = r.val_force_mae;
  return j.dump();
}

FitResult fit(Model model, const Dataset &fit_set, const Dataset &validation,
              const TrainConfig &config, const TrainableFilter &trainable,
              const EpochCallback &on_epoch) {
  config.validate();
  if (fit_set.size() == 0) throw std::invalid_argument("no training samples");

  std::vector<Tensor *> params;
  visit_weights(model.weights(), [&](const std::string &name, Tensor &t) {
    params.push_back(!trainable || trainable(name) ? &t : nullptr);
  });

  FitResult result{model, 0, {}};
  double best_force = validation.size() ? evaluate(model, validation).force_mae
                                        : std::numeric_limits<double>::infinity();

  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(fit_set.size());
  std::iota(order.begin(), order.end(), 0);
  AdamState adam;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
    const double lr = lr_at(epoch, config);
    double epoch_loss = 0.0;

    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t stop = std::min(order.size(), start + config.batch_size);
      std::vector<Tensor> batch;
      for (std::size_t b = start; b < stop; ++b) {
        const std::size_t s = order[b];
        const SampleGradient sg = loss_and_gradient(model, fit_set.geometries[s],
                                                    fit_set.energies[s], fit_set.forces[s],
                                                    config.rho);
        epoch_loss += sg.loss;
        std::size_t k = 0;
        visit_weights(sg.grads, [&](const std::string &, const Tensor &g) {
          if (batch.size() <= k) batch.emplace_back(g.shape());
          batch[k++].add_inplace(g);
        });
      }
      const double inv = 1.0 / double(stop - start);
      for (Tensor &g : batch)
        for (double &x : g.data()) x *= inv;
      adam_step(params, batch, adam, lr);
    }

    EpochRecord record{epoch, lr, epoch_loss / double(order.size()),
                       std::numeric_limits<double>::quiet_NaN(),
                       std::numeric_limits<double>::quiet_NaN()};
    if (validation.size()) {
      const ErrorMetrics m = evaluate(model, validation);
      record.val_energy_mae = m.energy_mae;
      record.val_force_mae = m.force_mae;
      if (m.force_mae < best_force) {
        best_force = m.force_mae;
        result.best = model;
        result.best_epoch = epoch + 1;
      }
    } else {
      result.best = model;
      result.best_epoch = epoch + 1;
    }
    result.history.push_back(record);
    if (on_epoch) on_epoch(record);
  }
  return result;
}

namespace {

Dataset validation_set(const Dataset &dataset, const Split &split, std::size_t fold) {
  return dataset.subset(split.folds.at(fold));
}

} // namespace

TrainResult train(const Dataset &dataset, const ModelConfig &model_config,
                  const TrainConfig &config, const EpochCallback &on_epoch) {
  config.validate();
  model_config.validate();
  Split split = split_train_cv(dataset.size(), config.n_train, config.folds, config.seed);
  const Dataset fit_set = dataset.subset(split.fit_indices(config.fold));
  Model model = Model::initialize(model_config, dataset.species, config.seed);
  model.set_energy_offset(fit_set.mean_energy());
  FitResult result = fit(std::move(model), fit_set, validation_set(dataset, split, config.fold),
                         config, {}, on_epoch);
  return TrainResult{std::move(result), std::move(split)};
}

TrainResult transfer(const Model &base, const Dataset &target, const TrainConfig &config,
                     const EpochCallback &on_epoch) {
  config.validate();
  for (int z : target.species)
    if (!base.has_species(z))
      throw std::invalid_argument("target species Z=" + std::to_string(z) +
                                  " has no embedding in the base model");
  Split split = split_train_cv(target.size(), config.n_train, config.folds, config.seed);
  const Dataset fit_set = target.subset(split.fit_indices(config.fold));
  Model model = base;
  model.reset_readout(config.seed);
  model.set_energy_offset(fit_set.mean_energy());
  FitResult result = fit(std::move(model), fit_set, validation_set(target, split, config.fold),
                         config, is_readout_weight, on_epoch);
  return TrainResult{std::move(result), std::move(split)};
}

} // namespace geomatt
