#include "doctest.h"
#include "test_support.hpp"

#include "geomatt/checkpoint.hpp"
#include "geomatt/cli.hpp"

#include "json.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace geomatt;
using namespace geomatt::testing;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  args.insert(args.begin(), "geomatt");
  std::vector<const char *> argv;
  for (const auto &a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(int(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path &p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream s;
  s << f.rdbuf();
  return s.str();
}

ModelConfig small() {
  ModelConfig c;
  c.feature_dim = 8;
  c.base_inner_dim = 8;
  c.layers = 2;
  c.hidden = 8;
  c.delta_d = 0.1;
  c.d_max = 3.0;
  return c;
}

// Scratch directory with a teacher checkpoint, its labelled data and a config.
struct Workspace {
  fs::path dir;
  Model teacher = Model::initialize(small(), {1, 6, 8}, 50);

  Workspace() {
    dir = fs::temp_directory_path() / "geomatt_cli_test";
    fs::remove_all(dir);
    fs::create_directories(dir);
    const std::vector<int> z = {6, 1, 8, 1};
    save_dataset((dir / "data.npz").string(),
                 label_with_model(teacher, jittered_copies(random_geometry(z, 1, 2.5, 1.0), 12, 0.1, 2)));
    save_checkpoint((dir / "teacher.gatt").string(), {teacher, TrainConfig{}, 0});
    std::ofstream(dir / "run.cfg") << "f_v = 8\nf_base = 8\nn_layers = 2\nhidden = 8\n"
                                      "delta_d = 0.1\nd_max = 3\nepochs = 3\nlr = 1e-3\n"
                                      "n_train = 8\nfolds = 4\nbatch_size = 3\n";
  }
  ~Workspace() { fs::remove_all(dir); }
  std::string path(const std::string &name) const { return (dir / name).string(); }
};

} // namespace

TEST_CASE("train writes a checkpoint and metrics") {
  Workspace w;
  const Run r = cli({"train", "--config", w.path("run.cfg"), "--data", w.path("data.npz"), "--out",
                     w.path("out")});
  CHECK(r.code == 0);
  CHECK(r.err.empty());
  CHECK(r.out.find("fold 0 test energy_mae") != std::string::npos);
  CHECK(fs::exists(w.dir / "out" / "model.gatt"));
  std::stringstream metrics(slurp(w.dir / "out" / "metrics.jsonl"));
  std::string line;
  std::size_t lines = 0;
  while (std::getline(metrics, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.at("epoch") == lines);
    for (const char *key : {"lr", "train_loss", "val_E_mae", "val_F_mae"}) CHECK(j.at(key).is_number());
    ++lines;
  }
  CHECK(lines == 3);
  const Checkpoint c = load_checkpoint(w.path("out/model.gatt"));
  CHECK(c.model.config() == small());
  CHECK(c.train.epochs == 3);
}

TEST_CASE("train is reproducible and honours --seed") {
  Workspace w;
  const std::vector<std::string> base = {"train", "--config", w.path("run.cfg"), "--data",
                                         w.path("data.npz"), "--seed", "4", "--out"};
  auto with_out = [&](const std::string &o) {
    auto a = base;
    a.push_back(w.path(o));
    return a;
  };
  REQUIRE(cli(with_out("a")).code == 0);
  REQUIRE(cli(with_out("b")).code == 0);
  CHECK(slurp(w.dir / "a" / "model.gatt") == slurp(w.dir / "b" / "model.gatt"));
  CHECK(slurp(w.dir / "a" / "metrics.jsonl") == slurp(w.dir / "b" / "metrics.jsonl"));
  CHECK(load_checkpoint(w.path("a/model.gatt")).train.seed == 4);
}

TEST_CASE("train over all folds reports the fold average") {
  Workspace w;
  const Run r = cli({"train", "--config", w.path("run.cfg"), "--data", w.path("data.npz"), "--out",
                     w.path("cv"), "--all-folds"});
  CHECK(r.code == 0);
  for (int k = 0; k < 4; ++k) CHECK(fs::exists(w.dir / "cv" / ("fold" + std::to_string(k)) / "model.gatt"));
  CHECK(r.out.find("fold-averaged test energy_mae") != std::string::npos);
}

TEST_CASE("usage and configuration errors") {
  Workspace w;
  Run r = cli({"train", "--config", w.path("run.cfg"), "--out", w.path("out")});
  CHECK(r.code == 2);
  CHECK(r.err.find("--data") != std::string::npos);
  CHECK(cli({}).code == 2);
  CHECK(cli({"fly"}).code == 2);
  CHECK(cli({"--help"}).code == 0);

  std::ofstream(w.dir / "bad.cfg") << "epochs = 3\nwidth = 9\n";
  r = cli({"train", "--config", w.path("bad.cfg"), "--data", w.path("data.npz"), "--out", w.path("o")});
  CHECK(r.code == 1);
  CHECK(r.err.find("unknown config key 'width'") != std::string::npos);

  r = cli({"train", "--config", w.path("run.cfg"), "--data", w.path("missing.npz"), "--out", w.path("o")});
  CHECK(r.code == 1);
}

TEST_CASE("eval prints two errors and zero on self-labelled data") {
  Workspace w;
  const Run r = cli({"eval", "--checkpoint", w.path("teacher.gatt"), "--data", w.path("data.npz")});
  CHECK(r.code == 0);
  CHECK(r.out == "energy_mae 0\nforce_mae 0\n");

  std::ofstream(w.dir / "broken.gatt") << "GATT garbage";
  const Run bad = cli({"eval", "--checkpoint", w.path("broken.gatt"), "--data", w.path("data.npz")});
  CHECK(bad.code == 1);
  CHECK(bad.err.find("checkpoint") != std::string::npos);
}

TEST_CASE("export-attention writes matching text and graymap") {
  Workspace w;
  const Run r = cli({"export-attention", "--checkpoint", w.path("teacher.gatt"), "--data",
                     w.path("data.npz"), "--sample", "3", "--order", "4", "--layer", "1", "--out",
                     w.path("att/sample3")});
  REQUIRE(r.code == 0);
  std::stringstream csv(slurp(w.dir / "att" / "sample3.csv"));
  std::string line;
  std::size_t row = 0;
  while (std::getline(csv, line)) {
    std::stringstream cells(line);
    std::string cell;
    std::size_t col = 0;
    for (; std::getline(cells, cell, ','); ++col)
      if (col == row) CHECK(std::stod(cell) == 0.0);
    CHECK(col == 4);
    ++row;
  }
  CHECK(row == 4);
  const std::string pgm = slurp(w.dir / "att" / "sample3.pgm");
  CHECK(pgm.rfind("P5\n4 4\n255\n", 0) == 0);
  CHECK(pgm.size() == std::string("P5\n4 4\n255\n").size() + 16);

  const Run bad = cli({"export-attention", "--checkpoint", w.path("teacher.gatt"), "--data",
                       w.path("data.npz"), "--order", "5", "--out", w.path("x")});
  CHECK(bad.code == 1);
  CHECK(bad.err.find("valid orders: 2, 3, 4") != std::string::npos);
  const Run far = cli({"export-attention", "--checkpoint", w.path("teacher.gatt"), "--data",
                       w.path("data.npz"), "--order", "2", "--sample", "99", "--out", w.path("x")});
  CHECK(far.code == 1);
}

TEST_CASE("classify-geometry validates its arguments and reports accuracy") {
  CHECK(cli({"classify-geometry", "--kind", "square", "--order", "3"}).code == 2);
  CHECK(cli({"classify-geometry", "--kind", "distance", "--order", "5"}).code == 2);
  CHECK(cli({"classify-geometry", "--order", "3"}).code == 2);
  const Run r = cli({"classify-geometry", "--kind", "distance", "--order", "2", "--epochs", "2",
                     "--seed", "1"});
  CHECK(r.code == 0);
  CHECK(r.out.find("\naccuracy ") != std::string::npos);
  CHECK(r.out.find("clean_embedding_gap 0\n") != std::string::npos);
}

TEST_CASE("transfer keeps frozen tensors and rejects unknown species") {
  Workspace w;
  const Run r = cli({"transfer", "--base-checkpoint", w.path("teacher.gatt"), "--data",
                     w.path("data.npz"), "--out", w.path("tr"), "--config", w.path("run.cfg")});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("validation energy_mae") != std::string::npos);
  const Model after = load_checkpoint(w.path("tr/model.gatt")).model;
  std::vector<const Tensor *> before;
  visit_weights(w.teacher.weights(), [&](const std::string &, const Tensor &t) { before.push_back(&t); });
  std::size_t i = 0;
  visit_weights(after.weights(), [&](const std::string &name, const Tensor &t) {
    CAPTURE(name);
    if (!is_readout_weight(name)) CHECK(bit_identical(*before[i], t));
    ++i;
  });

  const std::vector<int> z = {6, 1, 7};
  const Model other = Model::initialize(small(), z, 3);
  save_dataset(w.path("nitrogen.npz"),
               label_with_model(other, jittered_copies(random_geometry(z, 3, 2.0, 1.0), 10, 0.1, 4)));
  const Run bad = cli({"transfer", "--base-checkpoint", w.path("teacher.gatt"), "--data",
                       w.path("nitrogen.npz"), "--out", w.path("tr2"), "--config", w.path("run.cfg")});
  CHECK(bad.code == 1);
  CHECK(bad.err.find("Z=7") != std::string::npos);

  std::ofstream(w.dir / "arch.cfg") << "f_v = 16\n";
  CHECK(cli({"transfer", "--base-checkpoint", w.path("teacher.gatt"), "--data", w.path("data.npz"),
             "--out", w.path("tr3"), "--config", w.path("arch.cfg")})
            .code == 1);
}
