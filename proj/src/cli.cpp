#include "geomatt/cli.hpp"

#include "geomatt/checkpoint.hpp"
#include "geomatt/classify.hpp"
#include "geomatt/config.hpp"
#include "geomatt/export.hpp"

#include "CLI11.hpp"

#include <filesystem>
#include <fstream>
#include <optional>

namespace geomatt {

namespace {

namespace fs = std::filesystem;

struct Options {
  std::string config, data, out, checkpoint;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> fold, epochs;
  bool all_folds = false;
  std::size_t sample = 0, layer = 0;
  int order = 0;
  std::string kind;
};

class MetricsLog {
public:
  explicit MetricsLog(const fs::path &path) : file_(path) {
    if (!file_) throw std::runtime_error("cannot write " + path.string());
  }
  EpochCallback callback() {
    return [this](const EpochRecord &r) { file_ << metrics_line(r) << "\n" << std::flush; };
  }

private:
  std::ofstream file_;
};

void write_text(const fs::path &path, const std::string &text) {
  std::ofstream f(path, std::ios::binary);
  if (!f || !(f << text)) throw std::runtime_error("cannot write " + path.string());
}

void print_metrics(std::ostream &out, const std::string &label, const ErrorMetrics &m) {
  out << label << " energy_mae " << m.energy_mae << " force_mae " << m.force_mae << "\n";
}

RunConfig run_config(const Options &o, RunConfig base = {}) {
  RunConfig c = o.config.empty() ? base : load_run_config(o.config, base);
  if (o.seed) c.train.seed = *o.seed;
  if (o.fold) c.train.fold = *o.fold;
  c.validate();
  return c;
}

// Trains one fold, writes its checkpoint and metrics into `dir` and returns
// the held-out test metrics (NaN when every sample was drawn for training).
ErrorMetrics train_fold(const Dataset &data, const RunConfig &config, const fs::path &dir,
                        std::ostream &out) {
  fs::create_directories(dir);
  write_text(dir / "config.txt", format_run_config(config));
  MetricsLog log(dir / "metrics.jsonl");
  const TrainResult r = train(data, config.model, config.train, log.callback());
  save_checkpoint((dir / "model.gatt").string(), {r.fit.best, config.train, r.fit.best_epoch});
  const std::string tag = "fold " + std::to_string(config.train.fold);
  out << tag << " best_epoch " << r.fit.best_epoch << "\n";
  print_metrics(out, tag + " validation",
                evaluate(r.fit.best, data.subset(r.split.folds[config.train.fold])));
  const ErrorMetrics test = evaluate(r.fit.best, data.subset(r.split.test));
  if (!r.split.test.empty()) print_metrics(out, tag + " test", test);
  return test;
}

void cmd_train(const Options &o, std::ostream &out) {
  const RunConfig config = run_config(o);
  const Dataset data = load_dataset(o.data);
  if (!o.all_folds) {
    train_fold(data, config, o.out, out);
    return;
  }
  ErrorMetrics mean{0.0, 0.0};
  for (std::size_t k = 0; k < config.train.folds; ++k) {
    RunConfig c = config;
    c.train.fold = k;
    const ErrorMetrics m = train_fold(data, c, fs::path(o.out) / ("fold" + std::to_string(k)), out);
    mean.energy_mae += m.energy_mae / double(config.train.folds);
    mean.force_mae += m.force_mae / double(config.train.folds);
  }
  print_metrics(out, "fold-averaged test", mean);
}

void cmd_eval(const Options &o, std::ostream &out) {
  const Checkpoint c = load_checkpoint(o.checkpoint);
  const ErrorMetrics m = evaluate(c.model, load_dataset(o.data));
  out << "energy_mae " << m.energy_mae << "\nforce_mae " << m.force_mae << "\n";
}

void cmd_export(const Options &o, std::ostream &out) {
  const Checkpoint c = load_checkpoint(o.checkpoint);
  const Dataset data = load_dataset(o.data);
  if (o.sample >= data.size())
    throw std::invalid_argument("sample " + std::to_string(o.sample) + " is out of range (" +
                                std::to_string(data.size()) + " samples)");
  const Tensor m = exported_attention(c.model, data.geometries[o.sample], o.order, o.layer);
  const fs::path csv = o.out + ".csv", pgm = o.out + ".pgm";
  if (csv.has_parent_path()) fs::create_directories(csv.parent_path());
  write_text(csv, matrix_csv(m));
  const std::vector<std::byte> image = heatmap_pgm(m);
  write_text(pgm, std::string(reinterpret_cast<const char *>(image.data()), image.size()));
  out << "wrote " << csv.string() << " and " << pgm.string() << "\n";
}

void cmd_classify(const Options &o, std::ostream &out) {
  ClassifyConfig c;
  c.kind = parse_degenerate_kind(o.kind);
  c.order = o.order;
  if (o.epochs) c.epochs = *o.epochs;
  if (o.seed) c.seed = *o.seed;
  const ClassifyResult r = classify_geometry(c);
  out << "kind " << o.kind << " order " << o.order << " seed " << c.seed << "\n"
      << "clean_embedding_gap " << r.clean_gap << "\n"
      << "train_accuracy " << r.train_accuracy << "\n"
      << "accuracy " << r.test_accuracy << "\n";
}

void cmd_transfer(const Options &o, std::ostream &out) {
  const Checkpoint base = load_checkpoint(o.checkpoint);
  RunConfig defaults;
  defaults.model = base.model.config();
  const RunConfig config = run_config(o, defaults);
  if (!(config.model == base.model.config()))
    throw std::invalid_argument("transfer keeps the base architecture; remove model keys from " +
                                o.config);
  const Dataset data = load_dataset(o.data);
  fs::create_directories(o.out);
  write_text(fs::path(o.out) / "config.txt", format_run_config(config));
  MetricsLog log(fs::path(o.out) / "metrics.jsonl");
  const TrainResult r = transfer(base.model, data, config.train, log.callback());
  save_checkpoint((fs::path(o.out) / "model.gatt").string(),
                  {r.fit.best, config.train, r.fit.best_epoch});
  out << "best_epoch " << r.fit.best_epoch << "\n";
  print_metrics(out, "validation", evaluate(r.fit.best, data.subset(r.split.folds[config.train.fold])));
  if (!r.split.test.empty()) print_metrics(out, "test", evaluate(r.fit.best, data.subset(r.split.test)));
}

} // namespace

int run_cli(int argc, const char *const *argv, std::ostream &out, std::ostream &err) {
  CLI::App app{"Geometric attention networks for energies and forces", "geomatt"};
  app.require_subcommand(1);
  Options o;

  auto *train_cmd = app.add_subcommand("train", "train on a dataset and write checkpoint + metrics");
  train_cmd->add_option("--config", o.config, "key=value configuration file")->check(CLI::ExistingFile);
  train_cmd->add_option("--data", o.data, "dataset archive with R, z, E, F")->required();
  train_cmd->add_option("--out", o.out, "output directory")->required();
  train_cmd->add_option("--seed", o.seed, "overrides the configured seed");
  train_cmd->add_option("--fold", o.fold, "validation fold");
  train_cmd->add_flag("--all-folds", o.all_folds, "train once per fold and average test errors");

  auto *eval_cmd = app.add_subcommand("eval", "print energy and force MAE of a checkpoint");
  eval_cmd->add_option("--checkpoint", o.checkpoint)->required();
  eval_cmd->add_option("--data", o.data)->required();

  auto *export_cmd = app.add_subcommand("export-attention", "write a symmetrised attention matrix");
  export_cmd->add_option("--checkpoint", o.checkpoint)->required();
  export_cmd->add_option("--data", o.data)->required();
  export_cmd->add_option("--sample", o.sample, "sample index")->capture_default_str();
  export_cmd->add_option("--order", o.order, "stream order")->required();
  export_cmd->add_option("--layer", o.layer, "interaction layer")->capture_default_str();
  export_cmd->add_option("--out", o.out, "output prefix for .csv and .pgm")->required();

  auto *classify_cmd =
      app.add_subcommand("classify-geometry", "shape classification with one aggregation step");
  classify_cmd->add_option("--kind", o.kind)->required()->check(CLI::IsMember({"distance", "dihedral"}));
  classify_cmd->add_option("--order", o.order)->required()->check(CLI::IsMember({2, 3, 4}));
  classify_cmd->add_option("--epochs", o.epochs);
  classify_cmd->add_option("--seed", o.seed);

  auto *transfer_cmd = app.add_subcommand("transfer", "retrain the readout of a base checkpoint");
  transfer_cmd->add_option("--base-checkpoint", o.checkpoint)->required();
  transfer_cmd->add_option("--data", o.data)->required();
  transfer_cmd->add_option("--out", o.out, "output directory")->required();
  transfer_cmd->add_option("--config", o.config, "training keys only")->check(CLI::ExistingFile);
  transfer_cmd->add_option("--seed", o.seed);
  transfer_cmd->add_option("--fold", o.fold);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    if (e.get_exit_code() == 0) return app.exit(e, out, err); // --help
    err << "usage error: " << e.what() << "\n"
        << "run 'geomatt --help' for usage\n";
    return 2;
  }

  try {
    if (train_cmd->parsed()) cmd_train(o, out);
    else if (eval_cmd->parsed()) cmd_eval(o, out);
    else if (export_cmd->parsed()) cmd_export(o, out);
    else if (classify_cmd->parsed()) cmd_classify(o, out);
    else if (transfer_cmd->parsed()) cmd_transfer(o, out);
  } catch (const std::exception &e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

} // namespace geomatt
