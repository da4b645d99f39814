#pragma once

// Attention-matrix export: comma-separated text and an 8-bit P5 graymap of
// the symmetrised magnitude (|a_ij| + |a_ji|) / 2 with a zeroed diagonal.

#include "geomatt/model.hpp"

#include <cstddef>
#include <string>
#include <vector>

namespace geomatt {

/// Symmetrised attention of the stream with `order` at interaction `layer`.
/// Throws std::invalid_argument listing the valid orders or layers.
Tensor exported_attention(const Model &model, const Geometry &geometry, int order,
                          std::size_t layer);

/// One row per atom, values separated by commas, round-trip precision.
std::string matrix_csv(const Tensor &matrix);

/// Binary PGM; gray = round(255 * value / max off-diagonal value).
std::vector<std::byte> heatmap_pgm(const Tensor &matrix);

} // namespace geomatt
