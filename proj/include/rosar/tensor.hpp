#pragma once

// Dense double-precision tensors with a define-by-run reverse-mode tape.
//
// A Graph owns every intermediate produced during one forward pass. Values
// are referenced through lightweight Var handles; calling Graph::backward on
// a scalar Var fills the grad buffer of every reachable node that requires a
// gradient. Graphs are single-threaded; build one per thread.

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace rosar {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

struct Tensor {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until populated

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0)
      : shape(std::move(s)), data(numel(shape), fill) {}
  Tensor(Shape s, std::vector<double> values)
      : shape(std::move(s)), data(std::move(values)) {
    if (numel(shape) != data.size())
      throw std::invalid_argument("tensor: data length " +
                                  std::to_string(data.size()) +
                                  " does not match shape " + shape_str(shape));
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  std::size_t size() const { return data.size(); }
  bool has_grad() const { return !grad.empty(); }
  void zero_grad() { grad.assign(data.size(), 0.0); }
  void clear_grad() { grad.clear(); }
  double item() const {
    if (data.size() != 1) throw std::invalid_argument("tensor: item() on non-scalar");
    return data[0];
  }
  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }
};

enum class OpKind {
  Leaf,
  Conv2d,
  Linear,
  BiasAdd,
  Add,
  Sub,
  Mul,
  Scale,
  AddScalar,
  Sigmoid,
  Silu,
  LeakyRelu,
  SoftmaxLastDim,
  Exp,
  Sum,
  Mean,
  MaxReduce,
  Minimum,
  Gather,
  Reshape,
  BceWithLogits,
  SoftmaxCrossEntropy,
  Custom,
};

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while its Graph lives.
struct Var {
  Graph* graph = nullptr;
  int id = -1;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape; }
  double item() const { return value().item(); }
  const std::vector<double>& grad() const;
};

class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, int self)>;

  struct Node {
    OpKind kind;
    std::vector<int> inputs;
    Tensor value;
    bool requires_grad;
    BackwardFn backward;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var leaf(Tensor value, bool requires_grad = false) {
    return push(OpKind::Leaf, {}, std::move(value), requires_grad, nullptr);
  }
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Records an op node. The node requires a gradient iff any input does.
  Var record(OpKind kind, std::vector<Var> inputs, Tensor value, BackwardFn backward) {
    std::vector<int> ids;
    ids.reserve(inputs.size());
    bool rg = false;
    for (const Var& v : inputs) {
      if (v.graph != this) throw std::invalid_argument("graph: input belongs to another graph");
      ids.push_back(v.id);
      rg = rg || nodes_[v.id].requires_grad;
    }
    return push(kind, std::move(ids), std::move(value), rg, rg ? std::move(backward) : nullptr);
  }

  const Node& node(int id) const { return nodes_.at(id); }
  Node& node(int id) { return nodes_.at(id); }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient buffer of node `id`, allocated (zeroed) on first access.
  std::vector<double>& grad_of(int id) {
    Tensor& t = nodes_[id].value;
    if (t.grad.empty()) t.grad.assign(t.data.size(), 0.0);
    return t.grad;
  }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }

  void backward(Var loss) {
    if (loss.graph != this) throw std::invalid_argument("backward: loss belongs to another graph");
    if (nodes_[loss.id].value.size() != 1)
      throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                  shape_str(nodes_[loss.id].value.shape));
    for (auto& n : nodes_) n.value.clear_grad();
    std::vector<char> reachable(nodes_.size(), 0);
    reachable[loss.id] = 1;
    for (int i = loss.id; i >= 0; --i) {
      if (!reachable[i]) continue;
      for (int in : nodes_[i].inputs) reachable[in] = 1;
    }
    grad_of(loss.id)[0] = 1.0;
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!reachable[i] || !n.requires_grad) continue;
      grad_of(i);
      if (n.backward) n.backward(*this, i);
    }
  }

 private:
  Var push(OpKind kind, std::vector<int> inputs, Tensor value, bool rg, BackwardFn bw) {
    nodes_.push_back(Node{kind, std::move(inputs), std::move(value), rg, std::move(bw)});
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }

  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return graph->node(id).value; }
inline const std::vector<double>& Var::grad() const { return graph->node(id).value.grad; }

namespace detail {

inline void require_same_graph(const Var& a, const Var& b) {
  if (a.graph != b.graph || a.graph == nullptr)
    throw std::invalid_argument("op: operands from different graphs");
}

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
}

// Accumulates `scale * upstream` into the grad of input `idx` of node `self`.
inline void accumulate(Graph& g, int self, std::size_t idx, double scale = 1.0) {
  const int in = g.node(self).inputs[idx];
  if (!g.requires_grad(in)) return;
  const auto& up = g.node(self).value.grad;
  auto& dst = g.grad_of(in);
  for (std::size_t i = 0; i < up.size(); ++i) dst[i] += scale * up[i];
}

}  // namespace detail

// ---- elementwise -----------------------------------------------------------

inline Var add(Var a, Var b) {
  detail::require_same_graph(a, b);
  detail::require_same_shape(a, b, "add");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = a.value().data[i] + b.value().data[i];
  return a.graph->record(OpKind::Add, {a, b}, std::move(out), [](Graph& g, int self) {
    detail::accumulate(g, self, 0);
    detail::accumulate(g, self, 1);
  });
}

inline Var sub(Var a, Var b) {
  detail::require_same_graph(a, b);
  detail::require_same_shape(a, b, "sub");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = a.value().data[i] - b.value().data[i];
  return a.graph->record(OpKind::Sub, {a, b}, std::move(out), [](Graph& g, int self) {
    detail::accumulate(g, self, 0, 1.0);
    detail::accumulate(g, self, 1, -1.0);
  });
}

inline Var mul(Var a, Var b) {
  detail::require_same_graph(a, b);
  detail::require_same_shape(a, b, "mul");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = a.value().data[i] * b.value().data[i];
  return a.graph->record(OpKind::Mul, {a, b}, std::move(out), [](Graph& g, int self) {
    const auto& n = g.node(self);
    const int ia = n.inputs[0], ib = n.inputs[1];
    const auto& up = n.value.grad;
    if (g.requires_grad(ia)) {
      const auto& bv = g.node(ib).value.data;
      auto& da = g.grad_of(ia);
      for (std::size_t i = 0; i < up.size(); ++i) da[i] += up[i] * bv[i];
    }
    if (g.requires_grad(ib)) {
      const auto& av = g.node(ia).value.data;
      auto& db = g.grad_of(ib);
      for (std::size_t i = 0; i < up.size(); ++i) db[i] += up[i] * av[i];
    }
  });
}

inline Var scale(Var x, double s) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = s * x.value().data[i];
  return x.graph->record(OpKind::Scale, {x}, std::move(out),
                         [s](Graph& g, int self) { detail::accumulate(g, self, 0, s); });
}

inline Var add_scalar(Var x, double c) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = x.value().data[i] + c;
  return x.graph->record(OpKind::AddScalar, {x}, std::move(out),
                         [](Graph& g, int self) { detail::accumulate(g, self, 0); });
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }

// ---- activations -----------------------------------------------------------

inline double sigmoid_scalar(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

namespace detail {

// Elementwise op whose derivative is a function of (input, output).
template <class F, class D>
Var pointwise(Var x, OpKind kind, F f, D dfdx) {
  const Tensor& in = x.value();
  Tensor out(in.shape);
  for (std::size_t i = 0; i < in.size(); ++i) out.data[i] = f(in.data[i]);
  return x.graph->record(kind, {x}, std::move(out), [dfdx](Graph& g, int self) {
    const auto& n = g.node(self);
    const int ix = n.inputs[0];
    if (!g.requires_grad(ix)) return;
    const auto& xv = g.node(ix).value.data;
    auto& dx = g.grad_of(ix);
    for (std::size_t i = 0; i < xv.size(); ++i)
      dx[i] += n.value.grad[i] * dfdx(xv[i], n.value.data[i]);
  });
}

}  // namespace detail

inline Var sigmoid(Var x) {
  return detail::pointwise(x, OpKind::Sigmoid, sigmoid_scalar,
                           [](double, double y) { return y * (1.0 - y); });
}

inline Var silu(Var x) {
  return detail::pointwise(
      x, OpKind::Silu, [](double z) { return z * sigmoid_scalar(z); },
      [](double z, double) {
        const double s = sigmoid_scalar(z);
        return s * (1.0 + z * (1.0 - s));
      });
}

inline Var leaky_relu(Var x, double slope = 0.1) {
  return detail::pointwise(
      x, OpKind::LeakyRelu, [slope](double z) { return z > 0 ? z : slope * z; },
      [slope](double z, double) { return z > 0 ? 1.0 : slope; });
}

inline Var exp(Var x) {
  return detail::pointwise(
      x, OpKind::Exp, [](double z) { return std::exp(z); }, [](double, double y) { return y; });
}

/// Softmax over the innermost dimension.
inline Var softmax_lastdim(Var x) {
  const Tensor& in = x.value();
  if (in.shape.empty()) throw std::invalid_argument("softmax: scalar input");
  const std::size_t n = in.shape.back();
  const std::size_t rows = in.size() / n;
  Tensor out(in.shape);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* z = in.data.data() + r * n;
    double* y = out.data.data() + r * n;
    const double m = *std::max_element(z, z + n);
    double s = 0.0;
    for (std::size_t k = 0; k < n; ++k) s += (y[k] = std::exp(z[k] - m));
    for (std::size_t k = 0; k < n; ++k) y[k] /= s;
  }
  return x.graph->record(OpKind::SoftmaxLastDim, {x}, std::move(out), [n, rows](Graph& g, int self) {
    const auto& node = g.node(self);
    const int ix = node.inputs[0];
    auto& dx = g.grad_of(ix);
    const auto& y = node.value.data;
    const auto& dy = node.value.grad;
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t k = 0; k < n; ++k) dot += dy[r * n + k] * y[r * n + k];
      for (std::size_t k = 0; k < n; ++k) dx[r * n + k] += y[r * n + k] * (dy[r * n + k] - dot);
    }
  });
}

// ---- reductions and indexing ----------------------------------------------

inline Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data) s += v;
  return x.graph->record(OpKind::Sum, {x}, Tensor::scalar(s), [](Graph& g, int self) {
    const double up = g.node(self).value.grad[0];
    auto& dx = g.grad_of(g.node(self).inputs[0]);
    for (double& d : dx) d += up;
  });
}

inline Var mean(Var x) {
  const std::size_t n = x.value().size();
  if (n == 0) throw std::invalid_argument("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(n));
}

/// Maximum element; the gradient flows to the first maximal entry.
inline Var max_reduce(Var x) {
  const auto& d = x.value().data;
  if (d.empty()) throw std::invalid_argument("max_reduce: empty tensor");
  const std::size_t arg = static_cast<std::size_t>(std::max_element(d.begin(), d.end()) - d.begin());
  return x.graph->record(OpKind::MaxReduce, {x}, Tensor::scalar(d[arg]), [arg](Graph& g, int self) {
    g.grad_of(g.node(self).inputs[0])[arg] += g.node(self).value.grad[0];
  });
}

/// Elementwise minimum; ties send the gradient to `a`.
inline Var minimum(Var a, Var b) {
  detail::require_same_graph(a, b);
  detail::require_same_shape(a, b, "minimum");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    out.data[i] = std::min(a.value().data[i], b.value().data[i]);
  return a.graph->record(OpKind::Minimum, {a, b}, std::move(out), [](Graph& g, int self) {
    const auto& n = g.node(self);
    const int ia = n.inputs[0], ib = n.inputs[1];
    const auto& av = g.node(ia).value.data;
    const auto& bv = g.node(ib).value.data;
    for (std::size_t i = 0; i < av.size(); ++i) {
      const bool pick_a = av[i] <= bv[i];
      const int dst = pick_a ? ia : ib;
      if (g.requires_grad(dst)) g.grad_of(dst)[i] += n.value.grad[i];
    }
  });
}

/// Selects flat indices of `x` into a 1-D tensor (repeats allowed).
inline Var gather(Var x, std::vector<std::size_t> indices) {
  const auto& d = x.value().data;
  Tensor out(Shape{indices.size()});
  for (std::size_t k = 0; k < indices.size(); ++k) {
    if (indices[k] >= d.size()) throw std::out_of_range("gather: index out of range");
    out.data[k] = d[indices[k]];
  }
  return x.graph->record(OpKind::Gather, {x}, std::move(out),
                         [idx = std::move(indices)](Graph& g, int self) {
                           const auto& up = g.node(self).value.grad;
                           auto& dx = g.grad_of(g.node(self).inputs[0]);
                           for (std::size_t k = 0; k < idx.size(); ++k) dx[idx[k]] += up[k];
                         });
}

/// Same data, new shape.
inline Var reshape(Var x, Shape shape) {
  if (numel(shape) != x.value().size())
    throw std::invalid_argument("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  return x.graph->record(OpKind::Reshape, {x}, Tensor(std::move(shape), x.value().data),
                         [](Graph& g, int self) { detail::accumulate(g, self, 0); });
}

// ---- layers ----------------------------------------------------------------

/// 2-D convolution, HWC input [h,w,cin] with kernel [k,k,cin,cout].
inline Var conv2d(Var input, Var kernel, int stride, int pad) {
  detail::require_same_graph(input, kernel);
  const Shape& is = input.shape();
  const Shape& ks = kernel.shape();
  if (is.size() != 3 || ks.size() != 4) throw std::invalid_argument("conv2d: expected [h,w,c] input and [k,k,cin,cout] kernel");
  if (ks[0] != ks[1] || ks[0] % 2 == 0) throw std::invalid_argument("conv2d: kernel must be square with odd size");
  if (stride < 1 || pad < 0) throw std::invalid_argument("conv2d: stride >= 1 and pad >= 0 required");
  if (is[2] != ks[2])
    throw std::invalid_argument("conv2d: input channels " + std::to_string(is[2]) +
                                " do not match kernel cin " + std::to_string(ks[2]));
  const int h = static_cast<int>(is[0]), w = static_cast<int>(is[1]);
  const int cin = static_cast<int>(is[2]);
  const int k = static_cast<int>(ks[0]), cout = static_cast<int>(ks[3]);
  if (h + 2 * pad < k || w + 2 * pad < k) throw std::invalid_argument("conv2d: kernel larger than padded input");
  const int oh = (h + 2 * pad - k) / stride + 1;
  const int ow = (w + 2 * pad - k) / stride + 1;

  Tensor out(Shape{static_cast<std::size_t>(oh), static_cast<std::size_t>(ow), static_cast<std::size_t>(cout)});
  const double* x = input.value().data.data();
  const double* K = kernel.value().data.data();
  double* y = out.data.data();
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      double* yo = y + (oy * ow + ox) * cout;
      for (int ky = 0; ky < k; ++ky) {
        const int iy = oy * stride - pad + ky;
        if (iy < 0 || iy >= h) continue;
        for (int kx = 0; kx < k; ++kx) {
          const int ix = ox * stride - pad + kx;
          if (ix < 0 || ix >= w) continue;
          const double* xi = x + (iy * w + ix) * cin;
          const double* kk = K + (ky * k + kx) * cin * cout;
          for (int ci = 0; ci < cin; ++ci) {
            const double xv = xi[ci];
            const double* kc = kk + ci * cout;
            for (int co = 0; co < cout; ++co) yo[co] += xv * kc[co];
          }
        }
      }
    }
  }

  return input.graph->record(
      OpKind::Conv2d, {input, kernel}, std::move(out),
      [=](Graph& g, int self) {
        const auto& n = g.node(self);
        const int in_id = n.inputs[0], k_id = n.inputs[1];
        const bool need_x = g.requires_grad(in_id), need_k = g.requires_grad(k_id);
        const double* dy = n.value.grad.data();
        const double* xv = g.node(in_id).value.data.data();
        const double* Kv = g.node(k_id).value.data.data();
        double* dx = need_x ? g.grad_of(in_id).data() : nullptr;
        double* dk = need_k ? g.grad_of(k_id).data() : nullptr;
        for (int oy = 0; oy < oh; ++oy) {
          for (int ox = 0; ox < ow; ++ox) {
            const double* dyo = dy + (oy * ow + ox) * cout;
            for (int ky = 0; ky < k; ++ky) {
              const int iy = oy * stride - pad + ky;
              if (iy < 0 || iy >= h) continue;
              for (int kx = 0; kx < k; ++kx) {
                const int ix = ox * stride - pad + kx;
                if (ix < 0 || ix >= w) continue;
                const std::size_t xoff = static_cast<std::size_t>((iy * w + ix) * cin);
                const std::size_t koff = static_cast<std::size_t>((ky * k + kx) * cin * cout);
                for (int ci = 0; ci < cin; ++ci) {
                  const double* kc = Kv + koff + ci * cout;
                  if (dx) {
                    double acc = 0.0;
                    for (int co = 0; co < cout; ++co) acc += dyo[co] * kc[co];
                    dx[xoff + ci] += acc;
                  }
                  if (dk) {
                    const double xval = xv[xoff + ci];
                    double* dkc = dk + koff + ci * cout;
                    for (int co = 0; co < cout; ++co) dkc[co] += xval * dyo[co];
                  }
                }
              }
            }
          }
        }
      });
}

/// Adds a per-channel bias to a tensor whose last dimension equals bias length.
inline Var bias_add(Var x, Var bias) {
  detail::require_same_graph(x, bias);
  const std::size_t c = bias.value().size();
  if (x.shape().empty() || x.shape().back() != c)
    throw std::invalid_argument("bias_add: last dim of " + shape_str(x.shape()) +
                                " does not match bias length " + std::to_string(c));
  Tensor out = Tensor(x.shape(), x.value().data);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += bias.value().data[i % c];
  return x.graph->record(OpKind::BiasAdd, {x, bias}, std::move(out), [c](Graph& g, int self) {
    detail::accumulate(g, self, 0);
    const int ib = g.node(self).inputs[1];
    if (!g.requires_grad(ib)) return;
    const auto& up = g.node(self).value.grad;
    auto& db = g.grad_of(ib);
    for (std::size_t i = 0; i < up.size(); ++i) db[i % c] += up[i];
  });
}

/// Dense layer: [n,in] x [in,out] -> [n,out].
inline Var linear(Var x, Var weight) {
  detail::require_same_graph(x, weight);
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  if (xs.size() != 2 || ws.size() != 2 || xs[1] != ws[0])
    throw std::invalid_argument("linear: incompatible shapes " + shape_str(xs) + " x " + shape_str(ws));
  const std::size_t n = xs[0], in = xs[1], outd = ws[1];
  Tensor out(Shape{n, outd});
  const auto& X = x.value().data;
  const auto& W = weight.value().data;
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t i = 0; i < in; ++i)
      for (std::size_t o = 0; o < outd; ++o) out.data[r * outd + o] += X[r * in + i] * W[i * outd + o];
  return x.graph->record(OpKind::Linear, {x, weight}, std::move(out), [n, in, outd](Graph& g, int self) {
    const auto& node = g.node(self);
    const int ix = node.inputs[0], iw = node.inputs[1];
    const auto& up = node.value.grad;
    if (g.requires_grad(ix)) {
      const auto& W = g.node(iw).value.data;
      auto& dx = g.grad_of(ix);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t i = 0; i < in; ++i) {
          double acc = 0.0;
          for (std::size_t o = 0; o < outd; ++o) acc += up[r * outd + o] * W[i * outd + o];
          dx[r * in + i] += acc;
        }
    }
    if (g.requires_grad(iw)) {
      const auto& X = g.node(ix).value.data;
      auto& dw = g.grad_of(iw);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t i = 0; i < in; ++i)
          for (std::size_t o = 0; o < outd; ++o) dw[i * outd + o] += X[r * in + i] * up[r * outd + o];
    }
  });
}

// ---- losses ----------------------------------------------------------------

/// Mean binary cross-entropy between logits and fixed targets in [0,1].
inline Var bce_with_logits(Var logits, const std::vector<double>& targets) {
  const auto& z = logits.value().data;
  if (z.size() != targets.size()) throw std::invalid_argument("bce: target length mismatch");
  if (z.empty()) throw std::invalid_argument("bce: empty input");
  double total = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i)
    total += std::max(z[i], 0.0) - z[i] * targets[i] + std::log1p(std::exp(-std::abs(z[i])));
  const double inv = 1.0 / static_cast<double>(z.size());
  return logits.graph->record(OpKind::BceWithLogits, {logits}, Tensor::scalar(total * inv),
                              [targets, inv](Graph& g, int self) {
                                const double up = g.node(self).value.grad[0];
                                const int ix = g.node(self).inputs[0];
                                const auto& zv = g.node(ix).value.data;
                                auto& dz = g.grad_of(ix);
                                for (std::size_t i = 0; i < zv.size(); ++i)
                                  dz[i] += up * inv * (sigmoid_scalar(zv[i]) - targets[i]);
                              });
}

/// Mean softmax cross-entropy of rows of [n,k] logits against class labels.
inline Var softmax_cross_entropy(Var logits, const std::vector<int>& labels) {
  const Shape& s = logits.shape();
  if (s.size() != 2 || s[0] != labels.size() || s[0] == 0)
    throw std::invalid_argument("softmax_cross_entropy: expected [n,k] logits with n labels");
  const std::size_t n = s[0], k = s[1];
  const auto& z = logits.value().data;
  std::vector<double> probs(z.size());
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= k)
      throw std::out_of_range("softmax_cross_entropy: label out of range");
    const double* zr = z.data() + r * k;
    const double m = *std::max_element(zr, zr + k);
    double se = 0.0;
    for (std::size_t j = 0; j < k; ++j) se += std::exp(zr[j] - m);
    const double lse = m + std::log(se);
    for (std::size_t j = 0; j < k; ++j) probs[r * k + j] = std::exp(zr[j] - lse);
    total += lse - zr[labels[r]];
  }
  const double inv = 1.0 / static_cast<double>(n);
  return logits.graph->record(OpKind::SoftmaxCrossEntropy, {logits}, Tensor::scalar(total * inv),
                              [probs = std::move(probs), labels, n, k, inv](Graph& g, int self) {
                                const double up = g.node(self).value.grad[0] * inv;
                                auto& dz = g.grad_of(g.node(self).inputs[0]);
                                for (std::size_t r = 0; r < n; ++r)
                                  for (std::size_t j = 0; j < k; ++j)
                                    dz[r * k + j] += up * (probs[r * k + j] -
                                                           (static_cast<int>(j) == labels[r] ? 1.0 : 0.0));
                              });
}

// ---- optimizer -------------------------------------------------------------

using MomentumBuffers = std::vector<std::vector<double>>;

/// SGD with heavy-ball momentum: v <- mu*v + g; p <- p - lr*v. Clears grads.
inline void sgd_step(std::span<Tensor> params, double lr, double momentum, MomentumBuffers& velocity) {
  if (velocity.size() != params.size()) {
    velocity.clear();
    for (const auto& p : params) velocity.emplace_back(p.size(), 0.0);
  }
  for (std::size_t i = 0; i < params.size(); ++i)
    if (!params[i].has_grad())
      throw std::logic_error("sgd_step: parameter " + std::to_string(i) + " has no gradient");
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i];
    auto& v = velocity[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      v[j] = momentum * v[j] + p.grad[j];
      p.data[j] -= lr * v[j];
    }
    p.clear_grad();
  }
}

/// Rescales all gradients jointly so their global L2 norm is at most max_norm.
/// Returns the norm before clipping. max_norm <= 0 disables clipping.
inline double clip_grad_norm(std::span<Tensor> params, double max_norm) {
  double sq = 0;
  for (const auto& p : params)
    for (double g : p.grad) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const double k = max_norm / norm;
    for (auto& p : params)
      for (double& g : p.grad) g *= k;
  }
  return norm;
}

class Sgd {
 public:
  Sgd(double lr, double momentum) : lr_(lr), momentum_(momentum) {}
  void step(std::span<Tensor> params) { sgd_step(params, lr_, momentum_, velocity_); }
  double lr() const { return lr_; }

 private:
  double lr_;
  double momentum_;
  MomentumBuffers velocity_;
};

}  // namespace rosar
