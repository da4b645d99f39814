#pragma once

// Reverse-mode differentiation over dense tensors.
//
// A Tape records primitive operations in execution order. backward() walks
// the record in reverse and returns gradients for every leaf. jvp() appends
// the forward-mode tangent of a recorded value to the same tape, built from
// ordinary primitives, so a later backward() can differentiate directional
// derivatives (needed when a loss contains forces = -dE/dx).

#include "geomatt/tensor.hpp"

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

namespace geomatt::ad {

enum class Op : std::uint8_t {
  Leaf,
  Constant,
  Add,
  Sub,
  Mul,
  Scale,
  Exp,
  Square,
  Sum,
  SumLast,
  MatMul,
  MatVec,
  Dot,
  Transpose,
  Reshape,
  BroadcastTo,
  Concat,
  GatherRows,
  ShiftedSoftplus,
  Sigmoid,
  PairwiseDistance,
  PairwiseDistanceTangent,
  PairCompose,
};

std::string_view op_name(Op op);

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
public:
  Var() = default;

  Tape *tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Tensor &value() const;
  const Shape &shape() const { return value().shape(); }

private:
  friend class Tape;
  Var(Tape *tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape *tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Leaf gradients produced by Tape::backward.
class Gradients {
public:
  /// d(root)/d(leaf); zeros when the leaf does not reach the root.
  const Tensor &operator[](Var leaf) const;

private:
  friend class Tape;
  const Tape *tape_ = nullptr;
  std::vector<Tensor> grads_;
  std::vector<Tensor> zeros_;
};

struct Seed {
  Var leaf;
  Tensor tangent;
};

/// Non-tensor operands of a primitive.
struct OpAttrs {
  double scalar = 0.0;
  std::size_t axis = 0;
  Shape shape;
  std::vector<std::size_t> indices;
};

class Tape {
public:
  Tape() = default;
  Tape(const Tape &) = delete;
  Tape &operator=(const Tape &) = delete;

  Var leaf(Tensor value);
  Var constant(Tensor value);

  std::size_t size() const { return nodes_.size(); }
  const Tensor &value(Var v) const;
  bool requires_grad(Var v) const;
  bool is_leaf(Var v) const;

  /// Gradients of a scalar root with respect to every leaf.
  Gradients backward(Var root) const;

  /// Directional derivative of `output` along the seeded leaf tangents,
  /// recorded as new tape entries. Unseeded leaves have zero tangent.
  Var jvp(Var output, std::span<const Seed> seeds);

  // Primitive recording. Prefer the free functions below.
  using Attrs = OpAttrs;
  Var record(Op op, std::vector<Var> inputs, Tensor value, Attrs attrs = {});

private:
  struct Node {
    Op op;
    std::vector<std::size_t> inputs;
    Tensor value;
    bool requires_grad;
    Attrs attrs;
  };

  void check_owned(Var v, std::string_view what) const;
  Var handle(std::size_t id) { return Var(this, id); }
  void accumulate(std::vector<Tensor> &grads, std::size_t id,
                  Tensor contribution) const;
  void backprop_node(std::size_t id, const Tensor &g,
                     std::vector<Tensor> &grads) const;
  Var tangent_of(std::size_t id, const std::vector<Var> &tangents);

  std::vector<Node> nodes_;
};

// Elementwise arithmetic with numpy-style broadcasting.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var exp(Var a);
Var square(Var a);
Var shifted_softplus(Var a);
Var sigmoid(Var a);

// Reductions and shape manipulation.
Var sum(Var a);
Var sum_last(Var a);
Var transpose(Var a);
Var reshape(Var a, Shape shape);
Var broadcast_to(Var a, Shape shape);
Var concat(std::span<const Var> parts, std::size_t axis);
Var gather_rows(Var table, std::vector<std::size_t> rows);

// Linear algebra.
Var matmul(Var a, Var b);
Var matvec(Var a, Var v);
Var dot(Var a, Var b);

// Geometry.
/// [N,3] positions -> [N,N] distances; diagonal is exactly zero.
Var pairwise_distance(Var positions);
/// out[i][j] = u_ij . (t_i - t_j): first-order change of d_ij along t.
Var pairwise_distance_tangent(Var positions, Var tangent);
/// out[i][j][f] = sum_m a[i][m][f] * b[m][j][f].
Var pair_compose(Var a, Var b);

// Plain evaluations shared with non-tape code.
double shifted_softplus(double x);
double sigmoid(double x);

} // namespace geomatt::ad
