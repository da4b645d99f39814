#include "geomatt/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace geomatt::ad {

namespace {

[[noreturn]] void shape_error(std::string_view op, const Shape &a,
                              const Shape &b) {
  throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                              shape_string(a) + " vs " + shape_string(b));
}

[[noreturn]] void shape_error(std::string_view op, const Shape &a) {
  throw std::invalid_argument(std::string(op) + ": unsupported shape " +
                              shape_string(a));
}

Shape broadcast_shape(std::string_view op, const Shape &a, const Shape &b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i + a.size() >= rank ? a[i + a.size() - rank] : 1;
    const std::size_t db = i + b.size() >= rank ? b[i + b.size() - rank] : 1;
    if (da != db && da != 1 && db != 1) shape_error(op, a, b);
    out[i] = da == 1 ? db : da;
  }
  return out;
}

// Row-major strides of `in` aligned to `out`, zero along broadcast axes.
std::vector<std::size_t> broadcast_strides(const Shape &in, const Shape &out) {
  const std::size_t rank = out.size();
  std::vector<std::size_t> strides(rank, 0);
  std::size_t stride = 1;
  for (std::size_t k = 0; k < in.size(); ++k) {
    const std::size_t axis_in = in.size() - 1 - k;
    const std::size_t axis_out = rank - 1 - k;
    strides[axis_out] = in[axis_in] == 1 ? 0 : stride;
    stride *= in[axis_in];
  }
  return strides;
}

template <class F>
void for_each_broadcast(const Shape &out, const std::vector<std::size_t> &sa,
                        const std::vector<std::size_t> &sb, F &&f) {
  const std::size_t rank = out.size();
  const std::size_t total = shape_size(out);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t o = 0; o < total; ++o) {
    f(o, ia, ib);
    for (std::size_t d = rank; d-- > 0;) {
      if (++idx[d] < out[d]) {
        ia += sa[d];
        ib += sb[d];
        break;
      }
      ia -= sa[d] * (out[d] - 1);
      ib -= sb[d] * (out[d] - 1);
      idx[d] = 0;
    }
  }
}

Tensor reduce_to_shape(const Tensor &g, const Shape &target) {
  if (g.shape() == target) return g;
  Tensor out(target);
  const auto st = broadcast_strides(target, g.shape());
  const std::vector<std::size_t> none(g.rank(), 0);
  for_each_broadcast(g.shape(), st, none,
                     [&](std::size_t o, std::size_t i, std::size_t) {
                       out[i] += g[o];
                     });
  return out;
}

Tensor expand_to_shape(const Tensor &a, const Shape &target) {
  Tensor out(target);
  const auto sa = broadcast_strides(a.shape(), target);
  const std::vector<std::size_t> none(target.size(), 0);
  for_each_broadcast(target, sa, none,
                     [&](std::size_t o, std::size_t i, std::size_t) {
                       out[o] = a[i];
                     });
  return out;
}

template <class F>
Tensor broadcast_binary(std::string_view op, const Tensor &a, const Tensor &b,
                        F &&f) {
  if (a.shape() == b.shape()) {
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
    return out;
  }
  Shape shape = broadcast_shape(op, a.shape(), b.shape());
  Tensor out(shape);
  for_each_broadcast(shape, broadcast_strides(a.shape(), shape),
                     broadcast_strides(b.shape(), shape),
                     [&](std::size_t o, std::size_t ia, std::size_t ib) {
                       out[o] = f(a[ia], b[ib]);
                     });
  return out;
}

Tensor matmul_values(const Tensor &a, const Tensor &b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double *row = &out[i * n];
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      if (aip == 0.0) continue;
      const double *brow = b.data().data() + (p * n);
      for (std::size_t j = 0; j < n; ++j) row[j] += aip * brow[j];
    }
  }
  return out;
}

Tensor transpose_values(const Tensor &a) {
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
  return out;
}

// a: [N,M,F], b: [M,K,F] -> [N,K,F]
Tensor compose_values(const Tensor &a, const Tensor &b) {
  const std::size_t n = a.dim(0), m = a.dim(1), f = a.dim(2), k = b.dim(1);
  Tensor out({n, k, f});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t mm = 0; mm < m; ++mm) {
      const double *arow = a.data().data() + ((i * m + mm) * f);
      for (std::size_t j = 0; j < k; ++j) {
        const double *brow = b.data().data() + ((mm * k + j) * f);
        double *orow = &out[(i * k + j) * f];
        for (std::size_t c = 0; c < f; ++c) orow[c] += arow[c] * brow[c];
      }
    }
  return out;
}

struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape &shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

constexpr double kMinDistance = 1e-8;

} // namespace

std::string_view op_name(Op op) {
  switch (op) {
  case Op::Leaf: return "leaf";
  case Op::Constant: return "constant";
  case Op::Add: return "add";
  case Op::Sub: return "sub";
  case Op::Mul: return "mul";
  case Op::Scale: return "scale";
  case Op::Exp: return "exp";
  case Op::Square: return "square";
  case Op::Sum: return "sum";
  case Op::SumLast: return "sum_last";
  case Op::MatMul: return "matmul";
  case Op::MatVec: return "matvec";
  case Op::Dot: return "dot";
  case Op::Transpose: return "transpose";
  case Op::Reshape: return "reshape";
  case Op::BroadcastTo: return "broadcast_to";
  case Op::Concat: return "concat";
  case Op::GatherRows: return "gather_rows";
  case Op::ShiftedSoftplus: return "shifted_softplus";
  case Op::Sigmoid: return "sigmoid";
  case Op::PairwiseDistance: return "pairwise_distance";
  case Op::PairwiseDistanceTangent: return "pairwise_distance_tangent";
  case Op::PairCompose: return "pair_compose";
  }
  return "unknown";
}

double shifted_softplus(double x) {
  // ln(e^x/2 + 1/2) = softplus(x) - ln 2, evaluated without overflow.
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))) - std::log(2.0);
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

const Tensor &Var::value() const {
  if (!tape_) throw std::logic_error("value() on an unbound Var");
  return tape_->value(*this);
}

const Tensor &Gradients::operator[](Var leaf) const {
  if (leaf.tape() != tape_ || leaf.id() >= grads_.size()) {
    throw std::invalid_argument("gradient requested for a foreign Var");
  }
  const Tensor &g = grads_[leaf.id()];
  if (!g.empty()) return g;
  return zeros_[leaf.id()];
}

Var Tape::leaf(Tensor value) {
  return record(Op::Leaf, {}, std::move(value));
}

Var Tape::constant(Tensor value) {
  return record(Op::Constant, {}, std::move(value));
}

Var Tape::record(Op op, std::vector<Var> inputs, Tensor value, Attrs attrs) {
  Node node{op, {}, std::move(value), op == Op::Leaf, std::move(attrs)};
  node.inputs.reserve(inputs.size());
  for (const Var &v : inputs) {
    check_owned(v, op_name(op));
    node.inputs.push_back(v.id());
    node.requires_grad = node.requires_grad || nodes_[v.id()].requires_grad;
  }
  nodes_.push_back(std::move(node));
  return handle(nodes_.size() - 1);
}

void Tape::check_owned(Var v, std::string_view what) const {
  if (v.tape() != this || v.id() >= nodes_.size()) {
    throw std::invalid_argument(std::string(what) +
                                ": operand is not recorded on this tape");
  }
}

const Tensor &Tape::value(Var v) const {
  check_owned(v, "value");
  return nodes_[v.id()].value;
}

bool Tape::requires_grad(Var v) const {
  check_owned(v, "requires_grad");
  return nodes_[v.id()].requires_grad;
}

bool Tape::is_leaf(Var v) const {
  check_owned(v, "is_leaf");
  return nodes_[v.id()].op == Op::Leaf;
}

void Tape::accumulate(std::vector<Tensor> &grads, std::size_t id,
                      Tensor contribution) const {
  if (!nodes_[id].requires_grad) return;
  Tensor &g = grads[id];
  if (g.empty()) {
    g = std::move(contribution);
  } else {
    g.add_inplace(contribution);
  }
}

Gradients Tape::backward(Var root) const {
  check_owned(root, "backward");
  const Node &r = nodes_[root.id()];
  if (r.value.size() != 1) {
    throw std::invalid_argument("backward: root must be a scalar, got shape " +
                                shape_string(r.value.shape()));
  }
  std::vector<Tensor> grads(root.id() + 1);
  if (r.requires_grad) grads[root.id()] = Tensor(r.value.shape(), 1.0);
  for (std::size_t id = root.id() + 1; id-- > 0;) {
    if (grads[id].empty() || nodes_[id].op == Op::Leaf) continue;
    backprop_node(id, grads[id], grads);
    grads[id] = Tensor();
  }
  Gradients out;
  out.tape_ = this;
  out.grads_.resize(nodes_.size());
  out.zeros_.resize(nodes_.size());
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    if (nodes_[id].op != Op::Leaf) continue;
    if (id < grads.size() && !grads[id].empty()) {
      out.grads_[id] = std::move(grads[id]);
    } else {
      out.zeros_[id] = Tensor(nodes_[id].value.shape());
    }
  }
  return out;
}

void Tape::backprop_node(std::size_t id, const Tensor &g,
                         std::vector<Tensor> &grads) const {
  const Node &n = nodes_[id];
  auto in = [&](std::size_t k) -> const Node & { return nodes_[n.inputs[k]]; };
  auto wants = [&](std::size_t k) { return in(k).requires_grad; };

  switch (n.op) {
  case Op::Leaf:
  case Op::Constant:
    return;
  case Op::Add:
  case Op::Sub: {
    if (wants(0)) accumulate(grads, n.inputs[0], reduce_to_shape(g, in(0).value.shape()));
    if (wants(1)) {
      Tensor gb = reduce_to_shape(g, in(1).value.shape());
      if (n.op == Op::Sub)
        for (double &x : gb.data()) x = -x;
      accumulate(grads, n.inputs[1], std::move(gb));
    }
    return;
  }
  case Op::Mul: {
    const Tensor &a = in(0).value, &b = in(1).value;
    if (a.shape() == b.shape()) {
      if (wants(0)) {
        Tensor ga(a.shape());
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * b[i];
        accumulate(grads, n.inputs[0], std::move(ga));
      }
      if (wants(1)) {
        Tensor gb(b.shape());
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] = g[i] * a[i];
        accumulate(grads, n.inputs[1], std::move(gb));
      }
      return;
    }
    Tensor ga(a.shape()), gb(b.shape());
    for_each_broadcast(g.shape(), broadcast_strides(a.shape(), g.shape()),
                       broadcast_strides(b.shape(), g.shape()),
                       [&](std::size_t o, std::size_t ia, std::size_t ib) {
                         ga[ia] += g[o] * b[ib];
                         gb[ib] += g[o] * a[ia];
                       });
    if (wants(0)) accumulate(grads, n.inputs[0], std::move(ga));
    if (wants(1)) accumulate(grads, n.inputs[1], std::move(gb));
    return;
  }
  case Op::Scale: {
    Tensor ga(g.shape());
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * n.attrs.scalar;
    accumulate(grads, n.inputs[0], std::move(ga));
    return;
  }
  case Op::Exp: {
    Tensor ga(g.shape());
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * n.value[i];
    accumulate(grads, n.inputs[0], std::move(ga));
    return;
  }
  case Op::Square: {
    const Tensor &x = in(0).value;
    Tensor ga(g.shape());
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] = 2.0 * x[i] * g[i];
    accumulate(grads, n.inputs[0], std::move(ga));
    return;
  }
  case Op::ShiftedSoftplus: {
    const Tensor &x = in(0).value;
    Tensor ga(g.shape());
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * sigmoid(x[i]);
    accumulate(grads, n.inputs[0], std::move(ga));
    return;
  }
  case Op::Sigmoid: {
    Tensor ga(g.shape());
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double s = n.value[i];
      ga[i] = g[i] * s * (1.0 - s);
    }
    accumulate(grads, n.inputs[0], std::move(ga));
    return;
  }
  case Op::Sum:
    accumulate(grads, n.inputs[0], Tensor(in(0).value.shape(), g.item()));
    return;
  case Op::SumLast: {
    const Shape &s = in(0).value.shape();
    const std::size_t f = s.back();
    Tensor ga(s);
    for (std::size_t i = 0; i < g.size(); ++i)
      for (std::size_t c = 0; c < f; ++c) ga[i * f + c] = g[i];
    accumulate(grads, n.inputs[0], std::move(ga));
    return;
  }
  case Op::MatMul: {
    const Tensor &a = in(0).value, &b = in(1).value;
    if (wants(0)) accumulate(grads, n.inputs[0], matmul_values(g, transpose_values(b)));
    if (wants(1)) accumulate(grads, n.inputs[1], matmul_values(transpose_values(a), g));
    return;
  }
  case Op::MatVec: {
    const Tensor &a = in(0).value, &v = in(1).value;
    const std::size_t m = a.dim(0), k = a.dim(1);
    if (wants(0)) {
      Tensor ga(a.shape());
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < k; ++j) ga[i * k + j] = g[i] * v[j];
      accumulate(grads, n.inputs[0], std::move(ga));
    }
    if (wants(1)) {
      Tensor gv(v.shape());
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < k; ++j) gv[j] += a[i * k + j] * g[i];
      accumulate(grads, n.inputs[1], std::move(gv));
    }
    return;
  }
  case Op::Dot: {
    const Tensor &a = in(0).value, &b = in(1).value;
    const double s = g.item();
    if (wants(0)) {
      Tensor ga(a.shape());
      for (std::size_t i = 0; i < a.size(); ++i) ga[i] = s * b[i];
      accumulate(grads, n.inputs[0], std::move(ga));
    }
    if (wants(1)) {
      Tensor gb(b.shape());
      for (std::size_t i = 0; i < b.size(); ++i) gb[i] = s * a[i];
      accumulate(grads, n.inputs[1], std::move(gb));
    }
    return;
  }
  case Op::Transpose:
    accumulate(grads, n.inputs[0], transpose_values(g));
    return;
  case Op::Reshape:
    accumulate(grads, n.inputs[0], g.reshaped(in(0).value.shape()));
    return;
  case Op::BroadcastTo:
    accumulate(grads, n.inputs[0], reduce_to_shape(g, in(0).value.shape()));
    return;
  case Op::Concat: {
    const AxisSplit out = split_at(g.shape(), n.attrs.axis);
    std::size_t offset = 0;
    for (std::size_t k = 0; k < n.inputs.size(); ++k) {
      const Shape &s = in(k).value.shape();
      const std::size_t extent = s[n.attrs.axis];
      if (wants(k)) {
        Tensor gk(s);
        for (std::size_t o = 0; o < out.outer; ++o)
          for (std::size_t e = 0; e < extent; ++e)
            for (std::size_t i = 0; i < out.inner; ++i)
              gk[(o * extent + e) * out.inner + i] =
                  g[(o * out.extent + offset + e) * out.inner + i];
        accumulate(grads, n.inputs[k], std::move(gk));
      }
      offset += extent;
    }
    return;
  }
  case Op::GatherRows: {
    const Shape &s = in(0).value.shape();
    const std::size_t cols = s[1];
    Tensor gt(s);
    for (std::size_t r = 0; r < n.attrs.indices.size(); ++r) {
      const std::size_t src = n.attrs.indices[r];
      for (std::size_t c = 0; c < cols; ++c) gt[src * cols + c] += g[r * cols + c];
    }
    accumulate(grads, n.inputs[0], std::move(gt));
    return;
  }
  case Op::PairwiseDistance: {
    const Tensor &x = in(0).value;
    const std::size_t na = x.dim(0);
    Tensor gx(x.shape());
    for (std::size_t i = 0; i < na; ++i)
      for (std::size_t j = 0; j < na; ++j) {
        if (i == j) continue;
        const double d = n.value[i * na + j];
        const double w = g[i * na + j] / d;
        for (std::size_t c = 0; c < 3; ++c) {
          const double diff = x[i * 3 + c] - x[j * 3 + c];
          gx[i * 3 + c] += w * diff;
          gx[j * 3 + c] -= w * diff;
        }
      }
    accumulate(grads, n.inputs[0], std::move(gx));
    return;
  }
  case Op::PairwiseDistanceTangent: {
    const Tensor &x = in(0).value, &t = in(1).value;
    const std::size_t na = x.dim(0);
    Tensor gx(x.shape()), gt(t.shape());
    for (std::size_t i = 0; i < na; ++i)
      for (std::size_t j = 0; j < na; ++j) {
        if (i == j) continue;
        const double gij = g[i * na + j];
        if (gij == 0.0) continue;
        double u[3], delta[3], d2 = 0.0;
        for (std::size_t c = 0; c < 3; ++c) {
          u[c] = x[i * 3 + c] - x[j * 3 + c];
          delta[c] = t[i * 3 + c] - t[j * 3 + c];
          d2 += u[c] * u[c];
        }
        const double d = std::sqrt(d2);
        double ud = 0.0;
        for (std::size_t c = 0; c < 3; ++c) {
          u[c] /= d;
          ud += u[c] * delta[c];
        }
        for (std::size_t c = 0; c < 3; ++c) {
          const double dx = gij * (delta[c] - u[c] * ud) / d;
          gx[i * 3 + c] += dx;
          gx[j * 3 + c] -= dx;
          gt[i * 3 + c] += gij * u[c];
          gt[j * 3 + c] -= gij * u[c];
        }
      }
    if (wants(0)) accumulate(grads, n.inputs[0], std::move(gx));
    if (wants(1)) accumulate(grads, n.inputs[1], std::move(gt));
    return;
  }
  case Op::PairCompose: {
    const Tensor &a = in(0).value, &b = in(1).value;
    const std::size_t na = a.dim(0), m = a.dim(1), f = a.dim(2), k = b.dim(1);
    if (wants(0)) {
      Tensor ga(a.shape());
      for (std::size_t i = 0; i < na; ++i)
        for (std::size_t mm = 0; mm < m; ++mm) {
          double *garow = &ga[(i * m + mm) * f];
          for (std::size_t j = 0; j < k; ++j) {
            const double *grow = g.data().data() + ((i * k + j) * f);
            const double *brow = b.data().data() + ((mm * k + j) * f);
            for (std::size_t c = 0; c < f; ++c) garow[c] += grow[c] * brow[c];
          }
        }
      accumulate(grads, n.inputs[0], std::move(ga));
    }
    if (wants(1)) {
      Tensor gb(b.shape());
      for (std::size_t i = 0; i < na; ++i)
        for (std::size_t mm = 0; mm < m; ++mm) {
          const double *arow = a.data().data() + ((i * m + mm) * f);
          for (std::size_t j = 0; j < k; ++j) {
            const double *grow = g.data().data() + ((i * k + j) * f);
            double *gbrow = &gb[(mm * k + j) * f];
            for (std::size_t c = 0; c < f; ++c) gbrow[c] += arow[c] * grow[c];
          }
        }
      accumulate(grads, n.inputs[1], std::move(gb));
    }
    return;
  }
  }
}

Var Tape::jvp(Var output, std::span<const Seed> seeds) {
  check_owned(output, "jvp");
  const std::size_t last = output.id();
  std::vector<Var> tangents(last + 1);
  for (const Seed &s : seeds) {
    check_owned(s.leaf, "jvp seed");
    if (nodes_[s.leaf.id()].op != Op::Leaf) {
      throw std::invalid_argument("jvp: seeds must be leaves");
    }
    if (s.tangent.shape() != nodes_[s.leaf.id()].value.shape()) {
      shape_error("jvp seed", s.tangent.shape(),
                  nodes_[s.leaf.id()].value.shape());
    }
    if (s.leaf.id() <= last) tangents[s.leaf.id()] = constant(s.tangent);
  }
  for (std::size_t id = 0; id <= last; ++id) {
    if (nodes_[id].op == Op::Leaf || nodes_[id].op == Op::Constant) continue;
    tangents[id] = tangent_of(id, tangents);
  }
  if (tangents[last].valid()) return tangents[last];
  return constant(Tensor(nodes_[last].value.shape()));
}

Var Tape::tangent_of(std::size_t id, const std::vector<Var> &tangents) {
  // Copy what we need: recording below may reallocate nodes_.
  const Op op = nodes_[id].op;
  const std::vector<std::size_t> inputs = nodes_[id].inputs;
  const Attrs attrs = nodes_[id].attrs;
  const Shape out_shape = nodes_[id].value.shape();

  auto t = [&](std::size_t k) { return tangents[inputs[k]]; };
  auto x = [&](std::size_t k) { return handle(inputs[k]); };
  bool any = false;
  for (std::size_t k = 0; k < inputs.size(); ++k) any = any || t(k).valid();
  if (!any) return {};

  auto fit = [&](Var v) {
    return v.shape() == out_shape ? v : broadcast_to(v, out_shape);
  };
  auto sum_terms = [&](Var a, Var b) -> Var {
    if (a.valid() && b.valid()) return add(a, b);
    return a.valid() ? fit(a) : fit(b);
  };

  switch (op) {
  case Op::Leaf:
  case Op::Constant:
    return {};
  case Op::Add:
    return sum_terms(t(0), t(1));
  case Op::Sub:
    if (t(0).valid() && t(1).valid()) return sub(t(0), t(1));
    return t(0).valid() ? fit(t(0)) : fit(scale(t(1), -1.0));
  case Op::Mul: {
    Var a = t(0).valid() ? mul(t(0), x(1)) : Var{};
    Var b = t(1).valid() ? mul(x(0), t(1)) : Var{};
    return sum_terms(a, b);
  }
  case Op::Scale:
    return scale(t(0), attrs.scalar);
  case Op::Exp:
    return mul(handle(id), t(0));
  case Op::Square:
    return scale(mul(x(0), t(0)), 2.0);
  case Op::ShiftedSoftplus:
    return mul(sigmoid(x(0)), t(0));
  case Op::Sigmoid: {
    Var s = handle(id);
    return mul(sub(s, square(s)), t(0));
  }
  case Op::Sum:
    return sum(t(0));
  case Op::SumLast:
    return sum_last(t(0));
  case Op::MatMul: {
    Var a = t(0).valid() ? matmul(t(0), x(1)) : Var{};
    Var b = t(1).valid() ? matmul(x(0), t(1)) : Var{};
    return sum_terms(a, b);
  }
  case Op::MatVec: {
    Var a = t(0).valid() ? matvec(t(0), x(1)) : Var{};
    Var b = t(1).valid() ? matvec(x(0), t(1)) : Var{};
    return sum_terms(a, b);
  }
  case Op::Dot: {
    Var a = t(0).valid() ? dot(t(0), x(1)) : Var{};
    Var b = t(1).valid() ? dot(x(0), t(1)) : Var{};
    return sum_terms(a, b);
  }
  case Op::Transpose:
    return transpose(t(0));
  case Op::Reshape:
    return reshape(t(0), out_shape);
  case Op::BroadcastTo:
    return broadcast_to(t(0), out_shape);
  case Op::Concat: {
    std::vector<Var> parts;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      parts.push_back(t(k).valid() ? t(k)
                                   : constant(Tensor(nodes_[inputs[k]].value.shape())));
    }
    return concat(parts, attrs.axis);
  }
  case Op::GatherRows:
    return gather_rows(t(0), attrs.indices);
  case Op::PairwiseDistance:
    return pairwise_distance_tangent(x(0), t(0));
  case Op::PairwiseDistanceTangent:
    throw std::logic_error("jvp: pairwise_distance_tangent has no tangent rule "
                           "(second-order tangents are not supported)");
  case Op::PairCompose: {
    Var a = t(0).valid() ? pair_compose(t(0), x(1)) : Var{};
    Var b = t(1).valid() ? pair_compose(x(0), t(1)) : Var{};
    return sum_terms(a, b);
  }
  }
  return {};
}

// ---------------------------------------------------------------------------
// Primitive constructors

namespace {

Tape &tape_of(std::string_view op, Var a) {
  if (!a.valid()) {
    throw std::invalid_argument(std::string(op) + ": unbound operand");
  }
  return *a.tape();
}

Tape &tape_of(std::string_view op, Var a, Var b) {
  Tape &t = tape_of(op, a);
  if (b.tape() != &t) {
    throw std::invalid_argument(std::string(op) +
                                ": operands live on different tapes");
  }
  return t;
}

template <class F> Tensor map_values(const Tensor &a, F &&f) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

} // namespace

Var add(Var a, Var b) {
  Tape &t = tape_of("add", a, b);
  return t.record(Op::Add, {a, b},
                  broadcast_binary("add", a.value(), b.value(),
                                   [](double x, double y) { return x + y; }));
}

Var sub(Var a, Var b) {
  Tape &t = tape_of("sub", a, b);
  return t.record(Op::Sub, {a, b},
                  broadcast_binary("sub", a.value(), b.value(),
                                   [](double x, double y) { return x - y; }));
}

Var mul(Var a, Var b) {
  Tape &t = tape_of("mul", a, b);
  return t.record(Op::Mul, {a, b},
                  broadcast_binary("mul", a.value(), b.value(),
                                   [](double x, double y) { return x * y; }));
}

Var scale(Var a, double factor) {
  Tape &t = tape_of("scale", a);
  Tape::Attrs attrs;
  attrs.scalar = factor;
  return t.record(Op::Scale, {a},
                  map_values(a.value(), [=](double x) { return factor * x; }),
                  std::move(attrs));
}

Var exp(Var a) {
  Tape &t = tape_of("exp", a);
  return t.record(Op::Exp, {a},
                  map_values(a.value(), [](double x) { return std::exp(x); }));
}

Var square(Var a) {
  Tape &t = tape_of("square", a);
  return t.record(Op::Square, {a},
                  map_values(a.value(), [](double x) { return x * x; }));
}

Var shifted_softplus(Var a) {
  Tape &t = tape_of("shifted_softplus", a);
  return t.record(Op::ShiftedSoftplus, {a},
                  map_values(a.value(),
                             [](double x) { return shifted_softplus(x); }));
}

Var sigmoid(Var a) {
  Tape &t = tape_of("sigmoid", a);
  return t.record(Op::Sigmoid, {a},
                  map_values(a.value(), [](double x) { return sigmoid(x); }));
}

Var sum(Var a) {
  Tape &t = tape_of("sum", a);
  double s = 0.0;
  for (double x : a.value().data()) s += x;
  return t.record(Op::Sum, {a}, Tensor::scalar(s));
}

Var sum_last(Var a) {
  Tape &t = tape_of("sum_last", a);
  const Tensor &v = a.value();
  if (v.rank() == 0) shape_error("sum_last", v.shape());
  Shape s(v.shape().begin(), v.shape().end() - 1);
  const std::size_t f = v.shape().back();
  Tensor out(s);
  for (std::size_t i = 0; i < out.size(); ++i) {
    double acc = 0.0;
    for (std::size_t c = 0; c < f; ++c) acc += v[i * f + c];
    out[i] = acc;
  }
  return t.record(Op::SumLast, {a}, std::move(out));
}

Var transpose(Var a) {
  Tape &t = tape_of("transpose", a);
  if (a.value().rank() != 2) shape_error("transpose", a.shape());
  return t.record(Op::Transpose, {a}, transpose_values(a.value()));
}

Var reshape(Var a, Shape shape) {
  Tape &t = tape_of("reshape", a);
  if (shape_size(shape) != a.value().size()) shape_error("reshape", a.shape(), shape);
  Tape::Attrs attrs;
  attrs.shape = shape;
  return t.record(Op::Reshape, {a}, a.value().reshaped(std::move(shape)),
                  std::move(attrs));
}

Var broadcast_to(Var a, Shape shape) {
  Tape &t = tape_of("broadcast_to", a);
  if (broadcast_shape("broadcast_to", a.shape(), shape) != shape) {
    shape_error("broadcast_to", a.shape(), shape);
  }
  Tape::Attrs attrs;
  attrs.shape = shape;
  return t.record(Op::BroadcastTo, {a}, expand_to_shape(a.value(), shape),
                  std::move(attrs));
}

Var concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no operands");
  Tape &t = tape_of("concat", parts[0]);
  Shape shape = parts[0].shape();
  if (axis >= shape.size()) shape_error("concat", shape);
  std::size_t total = 0;
  for (const Var &p : parts) {
    tape_of("concat", parts[0], p);
    const Shape &s = p.shape();
    if (s.size() != shape.size()) shape_error("concat", shape, s);
    for (std::size_t d = 0; d < s.size(); ++d)
      if (d != axis && s[d] != shape[d]) shape_error("concat", shape, s);
    total += s[axis];
  }
  shape[axis] = total;
  Tensor out(shape);
  const AxisSplit split = split_at(shape, axis);
  std::size_t offset = 0;
  for (const Var &p : parts) {
    const Tensor &v = p.value();
    const std::size_t extent = v.shape()[axis];
    for (std::size_t o = 0; o < split.outer; ++o)
      for (std::size_t e = 0; e < extent; ++e)
        for (std::size_t i = 0; i < split.inner; ++i)
          out[(o * split.extent + offset + e) * split.inner + i] =
              v[(o * extent + e) * split.inner + i];
    offset += extent;
  }
  Tape::Attrs attrs;
  attrs.axis = axis;
  return t.record(Op::Concat, std::vector<Var>(parts.begin(), parts.end()),
                  std::move(out), std::move(attrs));
}

Var gather_rows(Var table, std::vector<std::size_t> rows) {
  Tape &t = tape_of("gather_rows", table);
  const Tensor &v = table.value();
  if (v.rank() != 2) shape_error("gather_rows", v.shape());
  const std::size_t cols = v.dim(1);
  Tensor out({rows.size(), cols});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= v.dim(0)) {
      throw std::out_of_range("gather_rows: row " + std::to_string(rows[r]) +
                              " outside table of shape " +
                              shape_string(v.shape()));
    }
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = v[rows[r] * cols + c];
  }
  Tape::Attrs attrs;
  attrs.indices = std::move(rows);
  return t.record(Op::GatherRows, {table}, std::move(out), std::move(attrs));
}

Var matmul(Var a, Var b) {
  Tape &t = tape_of("matmul", a, b);
  const Shape &sa = a.shape(), &sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) {
    shape_error("matmul", sa, sb);
  }
  return t.record(Op::MatMul, {a, b}, matmul_values(a.value(), b.value()));
}

Var matvec(Var a, Var v) {
  Tape &t = tape_of("matvec", a, v);
  const Shape &sa = a.shape(), &sv = v.shape();
  if (sa.size() != 2 || sv.size() != 1 || sa[1] != sv[0]) {
    shape_error("matvec", sa, sv);
  }
  const Tensor &m = a.value(), &x = v.value();
  Tensor out({sa[0]});
  for (std::size_t i = 0; i < sa[0]; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < sa[1]; ++j) acc += m[i * sa[1] + j] * x[j];
    out[i] = acc;
  }
  return t.record(Op::MatVec, {a, v}, std::move(out));
}

Var dot(Var a, Var b) {
  Tape &t = tape_of("dot", a, b);
  if (a.shape().size() != 1 || a.shape() != b.shape()) {
    shape_error("dot", a.shape(), b.shape());
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < a.value().size(); ++i) {
    acc += a.value()[i] * b.value()[i];
  }
  return t.record(Op::Dot, {a, b}, Tensor::scalar(acc));
}

Var pairwise_distance(Var positions) {
  Tape &t = tape_of("pairwise_distance", positions);
  const Tensor &x = positions.value();
  if (x.rank() != 2 || x.dim(1) != 3) shape_error("pairwise_distance", x.shape());
  const std::size_t n = x.dim(0);
  Tensor d({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < 3; ++c) {
        const double diff = x[i * 3 + c] - x[j * 3 + c];
        s += diff * diff;
      }
      const double dij = std::sqrt(s);
      if (dij < kMinDistance) {
        throw std::domain_error("pairwise_distance: atoms " + std::to_string(i) +
                                " and " + std::to_string(j) + " coincide");
      }
      d[i * n + j] = dij;
      d[j * n + i] = dij;
    }
  return t.record(Op::PairwiseDistance, {positions}, std::move(d));
}

Var pairwise_distance_tangent(Var positions, Var tangent) {
  Tape &t = tape_of("pairwise_distance_tangent", positions, tangent);
  const Tensor &x = positions.value(), &v = tangent.value();
  if (x.rank() != 2 || x.dim(1) != 3 || v.shape() != x.shape()) {
    shape_error("pairwise_distance_tangent", x.shape(), v.shape());
  }
  const std::size_t n = x.dim(0);
  Tensor out({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      double d2 = 0.0, proj = 0.0;
      for (std::size_t c = 0; c < 3; ++c) {
        const double diff = x[i * 3 + c] - x[j * 3 + c];
        d2 += diff * diff;
        proj += diff * (v[i * 3 + c] - v[j * 3 + c]);
      }
      out[i * n + j] = proj / std::sqrt(d2);
    }
  return t.record(Op::PairwiseDistanceTangent, {positions, tangent},
                  std::move(out));
}

Var pair_compose(Var a, Var b) {
  Tape &t = tape_of("pair_compose", a, b);
  const Shape &sa = a.shape(), &sb = b.shape();
  if (sa.size() != 3 || sb.size() != 3 || sa[1] != sb[0] || sa[2] != sb[2]) {
    shape_error("pair_compose", sa, sb);
  }
  return t.record(Op::PairCompose, {a, b}, compose_values(a.value(), b.value()));
}

} // namespace geomatt::ad
