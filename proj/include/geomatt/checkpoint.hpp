#pragma once

// Versioned binary checkpoints: "GATT", u32 version, u32 tensor count, then
// per tensor {u32 name length, name, u8 dtype, u8 rank, u64 dims, f64 data},
// all little-endian. Hyperparameters travel as "meta.*" tensors.

#include "geomatt/model.hpp"
#include "geomatt/training.hpp"

#include <cstdint>
#include <string>
#include <span>
#include <vector>

namespace geomatt {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  Model model;
  TrainConfig train;
  std::size_t epoch = 0; // epochs completed when the model was taken

  bool operator==(const Checkpoint &) const;
};

std::vector<std::byte> encode_checkpoint(const Checkpoint &checkpoint);
/// Throws std::runtime_error on a damaged, foreign or newer file.
Checkpoint decode_checkpoint(std::span<const std::byte> bytes);

void save_checkpoint(const std::string &path, const Checkpoint &checkpoint);
Checkpoint load_checkpoint(const std::string &path);

} // namespace geomatt
