#include "geomatt/export.hpp"

#include "geomatt/attention.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <stdexcept>

namespace geomatt {

Tensor exported_attention(const Model &model, const Geometry &geometry, int order,
                          std::size_t layer) {
  const auto &orders = model.config().stream_orders;
  std::string valid;
  for (int k : orders) valid += (valid.empty() ? "" : ", ") + std::to_string(k);
  std::size_t stream = orders.size();
  for (std::size_t s = 0; s < orders.size(); ++s)
    if (orders[s] == order) stream = s;
  if (stream == orders.size())
    throw std::invalid_argument("no stream of order " + std::to_string(order) +
                                "; valid orders: " + valid);
  if (layer >= model.config().layers)
    throw std::invalid_argument("layer " + std::to_string(layer) + " does not exist; valid layers: 0.." +
                                std::to_string(model.config().layers - 1));
  return symmetrized_magnitude(attention_coefficients(model.attention_block(stream, layer), geometry));
}

std::string matrix_csv(const Tensor &m) {
  if (m.rank() != 2) throw std::invalid_argument("matrix_csv expects a matrix, got shape " +
                                                 shape_string(m.shape()));
  std::string out;
  char buf[32];
  for (std::size_t i = 0; i < m.dim(0); ++i) {
    for (std::size_t j = 0; j < m.dim(1); ++j) {
      if (j) out += ',';
      out.append(buf, std::to_chars(buf, buf + sizeof buf, m(i, j)).ptr);
    }
    out += '\n';
  }
  return out;
}

std::vector<std::byte> heatmap_pgm(const Tensor &m) {
  if (m.rank() != 2) throw std::invalid_argument("heatmap_pgm expects a matrix, got shape " +
                                                 shape_string(m.shape()));
  const std::size_t rows = m.dim(0), cols = m.dim(1);
  double peak = 0.0;
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j)
      if (i != j) peak = std::max(peak, m(i, j));

  const std::string header = "P5\n" + std::to_string(cols) + " " + std::to_string(rows) + "\n255\n";
  std::vector<std::byte> out;
  for (char ch : header) out.push_back(std::byte(ch));
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) {
      const double level = peak > 0.0 ? std::clamp(m(i, j) / peak, 0.0, 1.0) : 0.0;
      out.push_back(std::byte(static_cast<unsigned char>(std::lround(255.0 * level))));
    }
  return out;
}

} // namespace geomatt
