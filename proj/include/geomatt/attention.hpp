#pragma once

#include "geomatt/autodiff.hpp"
#include "geomatt/basis.hpp"
#include "geomatt/tensor.hpp"

#include <span>
#include <vector>

namespace geomatt {

/// One overlap module: F = (Q phi(0) + q) o (K phi(d) + k).
/// query/key are [features, points]; the biases are [features].
struct OverlapParams {
  Tensor query;
  Tensor key;
  Tensor query_bias;
  Tensor key_bias;

  std::size_t features() const { return query.dim(0); }
  std::size_t points() const { return query.dim(1); }

  /// Throws std::invalid_argument when shapes disagree with each other or
  /// with a grid of `points` discretization points.
  void validate(std::size_t points) const;
};

/// Order-k attention: k-1 overlap modules consumed base first.
struct AttentionBlock {
  int order = 2;
  std::vector<OverlapParams> modules;
  DiscretizationGrid grid;

  void validate() const;
};

/// values(i, j, f) = f-th feature of the overlap function between atoms i, j.
struct OverlapField {
  Tensor values;

  std::size_t atoms() const { return values.dim(0); }
  std::size_t features() const { return values.dim(2); }
  std::span<const double> at(std::size_t i, std::size_t j) const {
    return values.data().subspan((i * atoms() + j) * features(), features());
  }
};

std::vector<double> overlap_function(double d, const OverlapParams &params,
                                     const DiscretizationGrid &grid);

OverlapField base_field(const Geometry &geometry, const OverlapParams &params,
                        const DiscretizationGrid &grid);

/// out(i, j) = sum_m field(i, m) o next(m, j), self terms included.
OverlapField raise_order(const OverlapField &field, const OverlapField &next);

/// N x N matrix alpha^(k); alpha_ij = delta_d * sum_f F^(k)(i, j)_f.
Tensor attention_coefficients(const AttentionBlock &block,
                              const Geometry &geometry);

/// Outer product of the n-th rows of Q and K ([points, points]).
Tensor operator_expand(const OverlapParams &params, std::size_t n);

/// Export-time symmetrized magnitude (|a_ij| + |a_ji|) / 2, zero diagonal.
Tensor symmetrized_magnitude(const Tensor &alpha);

// ---------------------------------------------------------------------------
// Differentiable route used by the network.

struct OverlapVars {
  ad::Var query;
  ad::Var key;
  ad::Var query_bias;
  ad::Var key_bias;
};

/// Per-geometry quantities shared by every overlap module.
struct PairBasis {
  std::size_t atoms = 0;
  ad::Var distances; // [N, N]
  ad::Var phi;       // [N*N, L], rows phi_hat(d_ij)
  ad::Var phi_zero;  // [1, L]
};

PairBasis pair_basis(ad::Var positions, const DiscretizationGrid &grid);

/// [N, N, F] base overlap field.
ad::Var overlap_field(const PairBasis &basis, const OverlapVars &module);

/// [N, N] attention matrix of order modules.size() + 1.
ad::Var attention_matrix(const PairBasis &basis,
                         std::span<const OverlapVars> modules, double delta_d);

} // namespace geomatt
