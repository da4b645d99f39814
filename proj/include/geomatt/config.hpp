#pragma once

// Flat key=value run configuration. One assignment per line, '#' starts a
// comment, blank lines are ignored and unknown keys are rejected.

#include "geomatt/model.hpp"
#include "geomatt/training.hpp"

#include <string>
#include <vector>

namespace geomatt {

struct RunConfig {
  ModelConfig model;
  TrainConfig train;

  void validate() const;
  bool operator==(const RunConfig &) const = default;
};

/// Keys accepted by parse_run_config, in documentation order.
const std::vector<std::string> &run_config_keys();

/// Starts from `base` and applies every assignment in `text`.
RunConfig parse_run_config(const std::string &text, RunConfig base = {});
RunConfig load_run_config(const std::string &path, RunConfig base = {});

/// Text that parses back to `config`.
std::string format_run_config(const RunConfig &config);

} // namespace geomatt
