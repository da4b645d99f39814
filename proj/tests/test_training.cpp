#include "doctest.h"
#include "test_support.hpp"

#include "geomatt/training.hpp"

#include <cmath>

using namespace geomatt;
using namespace geomatt::testing;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.feature_dim = 8;
  c.base_inner_dim = 8;
  c.layers = 2;
  c.hidden = 8;
  c.delta_d = 0.1;
  c.d_max = 3.0;
  return c;
}

const std::vector<int> kSpecies = {6, 1, 1, 8, 1};

Dataset teacher_data(std::size_t n, std::uint64_t seed) {
  const Model teacher = Model::initialize(tiny_config(), kSpecies, 1000 + seed);
  const Geometry base = random_geometry(kSpecies, seed, 2.5, 1.0);
  return label_with_model(teacher, jittered_copies(base, n, 0.1, seed + 1));
}

std::vector<const Tensor *> tensors_of(const NetworkWeights<Tensor> &w) {
  std::vector<const Tensor *> out;
  visit_weights(w, [&](const std::string &, const Tensor &t) { out.push_back(&t); });
  return out;
}

} // namespace

TEST_CASE("loss examples") {
  EnergyForces p{2.0, {{1, 2, 3}, {4, 5, 6}}};
  CHECK(loss(p, 2.0, p.forces, 0.01) == 0.0);
  CHECK(loss(p, 1.0, p.forces, 0.01) == doctest::Approx(0.01).epsilon(1e-15));
  std::vector<Vec3> ref = p.forces;
  ref[1][0] -= 1.0;
  CHECK(loss(p, 2.0, ref, 0.01) == doctest::Approx(0.5).epsilon(1e-15));
  ref.pop_back();
  CHECK_THROWS_AS(loss(p, 2.0, ref, 0.01), std::invalid_argument);
}

TEST_CASE("loss is non-negative and vanishes only on exact labels") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    EnergyForces p{n(rng), {{n(rng), n(rng), n(rng)}, {n(rng), n(rng), n(rng)}}};
    std::vector<Vec3> ref = p.forces;
    CHECK(loss(p, p.energy, ref, 0.5) == 0.0);
    ref[trial % 2][trial % 3] += 1e-3;
    CHECK(loss(p, p.energy, ref, 0.5) > 0.0);
    CHECK(loss(p, p.energy + n(rng), p.forces, 0.5) >= 0.0);
  }
}

TEST_CASE("learning rate schedule") {
  TrainConfig c;
  CHECK(lr_at(0, c) == 1e-4);
  CHECK(lr_at(999, c) == 1e-4);
  CHECK(lr_at(1000, c) == doctest::Approx(9.6e-5).epsilon(1e-14));
  CHECK(lr_at(2500, c) == doctest::Approx(1e-4 * 0.96 * 0.96).epsilon(1e-14));
}

TEST_CASE("train config validation") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.rho = -1.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = {};
  c.lr = 0.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = {};
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = {};
  c.fold = 5;
  CHECK_THROWS_WITH(c.validate(), doctest::Contains("fold 5"));
}

TEST_CASE("adam first step moves by lr against the gradient sign") {
  Tensor p({4}, std::vector<double>{1.0, -2.0, 3.0, 0.5});
  const Tensor before = p;
  const Tensor g({4}, std::vector<double>{0.3, -7.0, 1e-2, -1e3});
  AdamState s;
  adam_step({&p}, {g}, s, 1e-3);
  for (std::size_t i = 0; i < 4; ++i)
    CHECK(p[i] - before[i] == doctest::Approx(-1e-3 * (g[i] > 0 ? 1.0 : -1.0)).epsilon(1e-6));
  CHECK(s.step == 1);
}

TEST_CASE("adam with zero gradient leaves parameters in place") {
  Tensor p({3}, std::vector<double>{1.0, 2.0, 3.0});
  const Tensor before = p;
  AdamState s;
  adam_step({&p}, {Tensor({3})}, s, 1e-3);
  CHECK(bit_identical(p, before));
}

TEST_CASE("adam is deterministic and rejects shape mismatches") {
  Tensor a({2}, std::vector<double>{1.0, 2.0}), b = a;
  const Tensor g({2}, std::vector<double>{0.5, -0.25});
  AdamState sa, sb;
  for (int i = 0; i < 5; ++i) {
    adam_step({&a}, {g}, sa, 1e-2);
    adam_step({&b}, {g}, sb, 1e-2);
  }
  CHECK(bit_identical(a, b));
  Tensor c({3});
  AdamState sc;
  CHECK_THROWS_AS(adam_step({&c}, {g}, sc, 1e-2), std::invalid_argument);
  CHECK_THROWS_AS(adam_step({&a, &c}, {g}, sc, 1e-2), std::invalid_argument);
}

TEST_CASE("adam with a null parameter skips it but advances its moments") {
  const Tensor g({2}, std::vector<double>{1.0, 1.0});
  AdamState s;
  adam_step({nullptr}, {g}, s, 1.0);
  CHECK(s.m[0][0] == doctest::Approx(0.1));
}

TEST_CASE("one small adam step decreases a quadratic bowl") {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = random_tensor({5}, rng);
    auto f = [](const Tensor &t) {
      double s = 0.0;
      for (std::size_t i = 0; i < t.size(); ++i) s += double(i + 1) * t[i] * t[i];
      return s;
    };
    Tensor g(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) g[i] = 2.0 * double(i + 1) * x[i];
    const double before = f(x);
    AdamState s;
    adam_step({&x}, {g}, s, 1e-3);
    CHECK(f(x) < before);
  }
}

TEST_CASE("loss gradient matches finite differences for every parameter") {
  std::mt19937_64 rng(12);
  ModelConfig c = tiny_config();
  c.feature_dim = 4;
  c.base_inner_dim = 4;
  c.hidden = 4;
  c.delta_d = 0.2;
  Model m = Model::initialize(c, {1, 8}, 4);
  visit_weights(m.weights(), [&](const std::string &name, Tensor &t) {
    if (name.find("bias") != std::string::npos || name.find(".b") != std::string::npos)
      t = normal_tensor(t.shape(), 0.2, rng);
  });
  const Geometry g(random_positions(3, rng, 2.2, 0.9), {1, 8, 1});
  // Labels far enough from the prediction that both loss terms matter.
  const EnergyForces pred = forces(g, m);
  std::vector<Vec3> f_ref = pred.forces;
  std::normal_distribution<double> noise(0.0, 0.5);
  for (Vec3 &f : f_ref)
    for (double &x : f) x += noise(rng);
  const double e_ref = pred.energy + 1.5, rho = 0.3;

  const SampleGradient sg = loss_and_gradient(m, g, e_ref, f_ref, rho);
  CHECK(sg.loss == doctest::Approx(loss(pred, e_ref, f_ref, rho)).epsilon(1e-12));
  auto objective = [&] { return loss(forces(g, m), e_ref, f_ref, rho); };
  const double scale = std::max(1.0, std::abs(sg.loss));
  const double resolvable = 1e-7 * scale, noise_floor = 1e-9 * scale;

  const auto analytic = tensors_of(sg.grads);
  std::size_t index = 0, checked = 0;
  visit_weights(m.weights(), [&](const std::string &name, Tensor &t) {
    const Tensor &a = *analytic[index++];
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double saved = t[i];
      const FdEstimate fd = ridders_derivative([&](double step) {
        t[i] = saved + step;
        const double v = objective();
        t[i] = saved;
        return v;
      });
      CAPTURE(name);
      CAPTURE(i);
      if (std::abs(fd.value) >= resolvable && fd.error <= 1e-7 * std::abs(fd.value)) {
        CHECK(relative_error(a[i], fd.value) <= 1e-6);
        ++checked;
      } else {
        CHECK(std::abs(a[i] - fd.value) <= std::max(2.0 * fd.error, noise_floor));
      }
    }
  });
  CHECK(checked > 100);
}

TEST_CASE("evaluate examples") {
  const Dataset d = teacher_data(6, 2);
  const Model teacher = Model::initialize(tiny_config(), kSpecies, 1002);
  const ErrorMetrics self = evaluate(teacher, d);
  CHECK(self.energy_mae == 0.0);
  CHECK(self.force_mae == 0.0);

  // A model whose only output is its offset predicts the mean energy and zero forces.
  Model constant = Model::initialize(tiny_config(), kSpecies, 5);
  for (Tensor *t : {&constant.weights().readout.w2, &constant.weights().readout.b2})
    for (double &x : t->data()) x = 0.0;
  constant.set_energy_offset(d.mean_energy());
  const ErrorMetrics m = evaluate(constant, d);
  double e_expected = 0.0, f_expected = 0.0;
  for (std::size_t s = 0; s < d.size(); ++s) {
    e_expected += std::abs(d.energies[s] - d.mean_energy());
    for (const Vec3 &f : d.forces[s])
      for (double x : f) f_expected += std::abs(x);
  }
  CHECK(m.energy_mae == doctest::Approx(e_expected / double(d.size())).epsilon(1e-12));
  CHECK(m.force_mae == doctest::Approx(f_expected / double(d.size() * 15)).epsilon(1e-12));
}

TEST_CASE("metrics lines are JSON records with null for missing validation") {
  const std::string line = metrics_line({3, 1e-4, 0.25, std::nan(""), 1.5});
  CHECK(line == R"({"epoch":3,"lr":0.0001,"train_loss":0.25,"val_E_mae":null,"val_F_mae":1.5})");
}

TEST_CASE("teacher-student training halves the loss in 100 epochs") {
  const Dataset d = teacher_data(16, 7);
  Model student = Model::initialize(tiny_config(), kSpecies, 3);
  student.set_energy_offset(d.mean_energy());
  TrainConfig c;
  c.lr = 1e-3;
  c.epochs = 100;
  c.batch_size = 4;
  const double initial = mean_loss(student, d, c.rho);
  const FitResult r = fit(student, d, {}, c);
  const double final_loss = mean_loss(r.best, d, c.rho);
  MESSAGE("loss " << initial << " -> " << final_loss);
  CHECK(final_loss <= 0.5 * initial);
  CHECK(r.best_epoch == 100);
  CHECK(r.history.size() == 100);
}

TEST_CASE("training is bit-reproducible for a fixed seed") {
  const Dataset d = teacher_data(20, 4);
  TrainConfig c;
  c.lr = 1e-3;
  c.epochs = 4;
  c.batch_size = 3;
  c.n_train = 15;
  c.folds = 3;
  c.seed = 11;
  const TrainResult a = train(d, tiny_config(), c);
  const TrainResult b = train(d, tiny_config(), c);
  REQUIRE(a.fit.history.size() == 4);
  for (std::size_t e = 0; e < 4; ++e) {
    CHECK(a.fit.history[e].train_loss == b.fit.history[e].train_loss);
    CHECK(a.fit.history[e].val_force_mae == b.fit.history[e].val_force_mae);
  }
  const auto ta = tensors_of(a.fit.best.weights()), tb = tensors_of(b.fit.best.weights());
  for (std::size_t i = 0; i < ta.size(); ++i) CHECK(bit_identical(*ta[i], *tb[i]));
  CHECK(a.split.test.size() == 5);

  c.seed = 12;
  const TrainResult other = train(d, tiny_config(), c);
  CHECK(other.fit.history[0].train_loss != a.fit.history[0].train_loss);
}

TEST_CASE("best model follows the validation force error") {
  const Dataset d = teacher_data(20, 5);
  TrainConfig c;
  c.lr = 1e-3;
  c.epochs = 6;
  c.batch_size = 4;
  c.n_train = 20;
  c.folds = 4;
  std::vector<EpochRecord> seen;
  const TrainResult r = train(d, tiny_config(), c, [&](const EpochRecord &e) { seen.push_back(e); });
  REQUIRE(seen.size() == 6);
  const Dataset validation = d.subset(r.split.folds[0]);
  double best = evaluate(Model::initialize(tiny_config(), kSpecies, c.seed), validation).force_mae;
  std::size_t best_epoch = 0;
  for (const EpochRecord &e : seen) {
    CHECK(std::isfinite(e.val_force_mae));
    if (e.val_force_mae < best) {
      best = e.val_force_mae;
      best_epoch = e.epoch + 1;
    }
  }
  CHECK(r.fit.best_epoch == best_epoch);
  CHECK(evaluate(r.fit.best, validation).force_mae == doctest::Approx(best).epsilon(1e-12));
}

TEST_CASE("zero epochs return the initialised model") {
  const Dataset d = teacher_data(10, 6);
  TrainConfig c;
  c.epochs = 0;
  c.n_train = 10;
  c.folds = 2;
  const TrainResult r = train(d, tiny_config(), c);
  const Model init = Model::initialize(tiny_config(), kSpecies, c.seed);
  const auto a = tensors_of(r.fit.best.weights()), b = tensors_of(init.weights());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(bit_identical(*a[i], *b[i]));
  CHECK(r.fit.history.empty());
  CHECK(r.fit.best_epoch == 0);
  CHECK(r.fit.best.energy_offset() == d.subset(r.split.fit_indices(0)).mean_energy());
}

TEST_CASE("too small a dataset for the split is an error") {
  const Dataset d = teacher_data(4, 6);
  TrainConfig c;
  c.n_train = 10;
  CHECK_THROWS_AS(train(d, tiny_config(), c), std::invalid_argument);
}

TEST_CASE("transfer freezes embeddings and streams") {
  const Dataset source = teacher_data(10, 9);
  TrainConfig c;
  c.lr = 1e-3;
  c.epochs = 2;
  c.batch_size = 5;
  c.n_train = 10;
  c.folds = 2;
  const Model base = train(source, tiny_config(), c).fit.best;

  const std::vector<int> target_species = {6, 1, 8};
  const Model other_teacher = Model::initialize(tiny_config(), target_species, 77);
  const Dataset target = label_with_model(
      other_teacher, jittered_copies(random_geometry(target_species, 3, 2.0, 1.0), 10, 0.1, 4));
  c.epochs = 3;
  const TrainResult r = transfer(base, target, c);

  std::vector<std::string> names;
  visit_weights(base.weights(), [&](const std::string &n, const Tensor &) { names.push_back(n); });
  const auto before = tensors_of(base.weights()), after = tensors_of(r.fit.best.weights());
  std::size_t changed = 0;
  for (std::size_t i = 0; i < names.size(); ++i) {
    CAPTURE(names[i]);
    if (is_readout_weight(names[i]))
      changed += !bit_identical(*before[i], *after[i]);
    else
      CHECK(bit_identical(*before[i], *after[i]));
  }
  CHECK(changed == 4);
  CHECK(std::isfinite(evaluate(r.fit.best, target).force_mae));

  Dataset alien = target;
  alien.species = {6, 1, 9};
  for (Geometry &g : alien.geometries) g = Geometry(g.positions(), alien.species);
  CHECK_THROWS_WITH(transfer(base, alien, c), doctest::Contains("Z=9"));
}
