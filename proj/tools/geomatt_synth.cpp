// Writes a labelled dataset archive whose energies and forces come from a
// randomly initialised network, for smoke runs without external data.

#include "geomatt/config.hpp"
#include "geomatt/dataset.hpp"
#include "geomatt/training.hpp"

#include "CLI11.hpp"

#include <iostream>

int main(int argc, char **argv) {
  CLI::App app{"Synthetic teacher-labelled dataset", "geomatt_synth"};
  std::string out, config_path;
  std::size_t samples = 50;
  std::uint64_t seed = 0;
  std::vector<int> species = {6, 1, 1, 8, 1};
  double jitter = 0.1;
  app.add_option("--out", out, "output .npz path")->required();
  app.add_option("--samples", samples)->capture_default_str();
  app.add_option("--seed", seed)->capture_default_str();
  app.add_option("--species", species, "atomic numbers, one per atom")->delimiter(',');
  app.add_option("--jitter", jitter, "Å, per coordinate")->capture_default_str();
  app.add_option("--teacher-config", config_path, "key=value architecture of the teacher")
      ->check(CLI::ExistingFile);
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    return e.get_exit_code() == 0 ? app.exit(e) : (app.exit(e), 2);
  }

  try {
    geomatt::RunConfig teacher_config;
    teacher_config.model.feature_dim = 16;
    teacher_config.model.base_inner_dim = 16;
    teacher_config.model.layers = 2;
    teacher_config.model.hidden = 16;
    teacher_config.model.delta_d = 0.1;
    teacher_config.model.d_max = 3.0;
    if (!config_path.empty())
      teacher_config = geomatt::load_run_config(config_path, teacher_config);
    const geomatt::Model teacher =
        geomatt::Model::initialize(teacher_config.model, species, seed + 1000);
    const geomatt::Geometry base = geomatt::random_geometry(species, seed, 2.5, 1.0);
    const geomatt::Dataset data = geomatt::label_with_model(
        teacher, geomatt::jittered_copies(base, samples, jitter, seed + 1));
    geomatt::save_dataset(out, data);
    std::cout << "wrote " << samples << " samples of " << species.size() << " atoms to " << out
              << "\n";
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
