#include "geomatt/attention.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace geomatt {

void OverlapParams::validate(std::size_t grid_points) const {
  if (query.rank() != 2 || key.shape() != query.shape()) {
    throw std::invalid_argument("overlap params: Q " +
                                shape_string(query.shape()) + " and K " +
                                shape_string(key.shape()) +
                                " must be matrices of equal shape");
  }
  if (query_bias.shape() != Shape{features()} ||
      key_bias.shape() != Shape{features()}) {
    throw std::invalid_argument("overlap params: biases must have length " +
                                std::to_string(features()));
  }
  if (points() != grid_points) {
    throw std::invalid_argument(
        "overlap params: Q/K have " + std::to_string(points()) +
        " columns but the grid has " + std::to_string(grid_points) + " points");
  }
}

void AttentionBlock::validate() const {
  if (order < 2) {
    throw std::invalid_argument("attention order must be >= 2, got " +
                                std::to_string(order));
  }
  if (modules.size() != static_cast<std::size_t>(order - 1)) {
    throw std::invalid_argument("order-" + std::to_string(order) +
                                " attention needs " + std::to_string(order - 1) +
                                " overlap modules, got " +
                                std::to_string(modules.size()));
  }
  for (const auto &m : modules) {
    m.validate(grid.count);
    if (m.features() != modules.front().features()) {
      throw std::invalid_argument("overlap modules must share feature width");
    }
  }
}

namespace {

// y = M x + b for M [F, L].
std::vector<double> affine(const Tensor &m, std::span<const double> x,
                           const Tensor &b) {
  const std::size_t f = m.dim(0), l = m.dim(1);
  std::vector<double> out(f);
  for (std::size_t r = 0; r < f; ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < l; ++c) acc += m[r * l + c] * x[c];
    out[r] = acc + b[r];
  }
  return out;
}

} // namespace

std::vector<double> overlap_function(double d, const OverlapParams &params,
                                     const DiscretizationGrid &grid) {
  params.validate(grid.count);
  const auto left = affine(params.query, phi_hat(0.0, grid), params.query_bias);
  const auto right = affine(params.key, phi_hat(d, grid), params.key_bias);
  std::vector<double> out(left.size());
  for (std::size_t f = 0; f < out.size(); ++f) out[f] = left[f] * right[f];
  return out;
}

OverlapField base_field(const Geometry &geometry, const OverlapParams &params,
                        const DiscretizationGrid &grid) {
  const std::size_t n = geometry.size(), f = params.features();
  OverlapField field{Tensor({n, n, f})};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const auto v = overlap_function(geometry.distance(i, j), params, grid);
      for (std::size_t c = 0; c < f; ++c) field.values(i, j, c) = v[c];
    }
  return field;
}

OverlapField raise_order(const OverlapField &field, const OverlapField &next) {
  if (field.values.rank() != 3 || next.values.shape() != field.values.shape()) {
    throw std::invalid_argument("raise_order: field shapes " +
                                shape_string(field.values.shape()) + " and " +
                                shape_string(next.values.shape()) +
                                " do not match");
  }
  const std::size_t n = field.atoms(), f = field.features();
  OverlapField out{Tensor({n, n, f})};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t m = 0; m < n; ++m) {
        const auto a = field.at(i, m);
        const auto b = next.at(m, j);
        for (std::size_t c = 0; c < f; ++c) out.values(i, j, c) += a[c] * b[c];
      }
  return out;
}

Tensor attention_coefficients(const AttentionBlock &block,
                              const Geometry &geometry) {
  block.validate();
  OverlapField field = base_field(geometry, block.modules[0], block.grid);
  for (std::size_t r = 1; r < block.modules.size(); ++r) {
    field = raise_order(field, base_field(geometry, block.modules[r], block.grid));
  }
  const std::size_t n = geometry.size();
  Tensor alpha({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (double v : field.at(i, j)) acc += v;
      alpha(i, j) = block.grid.delta_d * acc;
    }
  return alpha;
}

Tensor operator_expand(const OverlapParams &params, std::size_t n) {
  if (n >= params.features()) {
    throw std::out_of_range("operator_expand: row " + std::to_string(n) +
                            " outside [0, " + std::to_string(params.features()) +
                            ")");
  }
  const std::size_t l = params.points();
  Tensor op({l, l});
  for (std::size_t a = 0; a < l; ++a)
    for (std::size_t b = 0; b < l; ++b)
      op(a, b) = params.query(n, a) * params.key(n, b);
  return op;
}

Tensor symmetrized_magnitude(const Tensor &alpha) {
  if (alpha.rank() != 2 || alpha.dim(0) != alpha.dim(1)) {
    throw std::invalid_argument("attention matrix must be square, got " +
                                shape_string(alpha.shape()));
  }
  const std::size_t n = alpha.dim(0);
  Tensor out({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j) out(i, j) = 0.5 * (std::abs(alpha(i, j)) + std::abs(alpha(j, i)));
  return out;
}

PairBasis pair_basis(ad::Var positions, const DiscretizationGrid &grid) {
  ad::Tape &tape = *positions.tape();
  const std::size_t n = positions.shape().at(0);
  const std::size_t l = grid.count;

  PairBasis basis;
  basis.atoms = n;
  basis.distances = ad::pairwise_distance(positions);
  ad::Var mu = tape.constant(Tensor({1, 1, l}, grid.mu));
  ad::Var offset = ad::sub(ad::reshape(basis.distances, {n, n, 1}), mu);
  ad::Var phi = ad::exp(ad::scale(ad::square(offset), -grid.gamma));
  basis.phi = ad::reshape(phi, {n * n, l});
  basis.phi_zero = tape.constant(Tensor({1, l}, phi_hat(0.0, grid)));
  return basis;
}

ad::Var overlap_field(const PairBasis &basis, const OverlapVars &module) {
  const std::size_t n = basis.atoms;
  const std::size_t f = module.query.shape().at(0);
  ad::Var left = ad::add(ad::matmul(basis.phi_zero, ad::transpose(module.query)),
                         ad::reshape(module.query_bias, {1, f}));
  ad::Var right = ad::add(ad::matmul(basis.phi, ad::transpose(module.key)),
                          ad::reshape(module.key_bias, {1, f}));
  return ad::reshape(ad::mul(left, right), {n, n, f});
}

ad::Var attention_matrix(const PairBasis &basis,
                         std::span<const OverlapVars> modules, double delta_d) {
  if (modules.empty()) {
    throw std::invalid_argument("attention_matrix: no overlap modules");
  }
  ad::Var field = overlap_field(basis, modules[0]);
  for (std::size_t r = 1; r < modules.size(); ++r) {
    field = ad::pair_compose(field, overlap_field(basis, modules[r]));
  }
  return ad::scale(ad::sum_last(field), delta_d);
}

} // namespace geomatt
