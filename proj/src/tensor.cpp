#include "fqa/tensor.hpp"

#include "linalg.hpp"

#include <malloc.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace fqa {

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;
  bool requires_grad = false;
  bool backward_done = false;
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward;

  std::span<double> grad_buffer() {
    if (grad.empty()) grad.assign(values.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

using detail::Node;

namespace {

thread_local bool g_grad_enabled = true;

#ifdef __GLIBC__
// Training allocates and frees multi-megabyte buffers every step. Keeping them
// on the heap instead of mmap/munmap avoids a page-fault storm on each reuse.
const bool g_allocator_tuned = [] {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  return true;
}();
#endif

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

std::span<double> GradAccess::operator[](std::size_t parent) const {
  Node* node = parents_.at(parent);
  if (!node->requires_grad) return {};
  return node->grad_buffer();
}

// ---------------------------------------------------------------------------
// Construction and accessors

Tensor Tensor::create(Shape shape, std::vector<double> values, bool requires_grad) {
  for (auto d : shape)
    if (d == 0) throw ShapeError("tensor axes must be positive, got " + shape_string(shape));
  if (shape_numel(shape) != values.size())
    throw ShapeError("shape " + shape_string(shape) + " needs " + std::to_string(shape_numel(shape)) +
                     " values, got " + std::to_string(values.size()));
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return create(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return create({}, {value}, requires_grad); }

Tensor Tensor::from_op(Shape shape, std::vector<double> values, std::vector<Tensor> parents,
                       BackwardFn backward) {
  Tensor out = create(std::move(shape), std::move(values));
  bool needs_grad = false;
  if (g_grad_enabled)
    for (const auto& p : parents) needs_grad = needs_grad || p.requires_grad();
  if (needs_grad) {
    out.node_->requires_grad = true;
    out.node_->parents.reserve(parents.size());
    for (auto& p : parents) out.node_->parents.push_back(p.node_);
    out.node_->backward = std::move(backward);
  }
  return out;
}

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_string(shape()));
  return node_->shape[axis];
}

std::size_t Tensor::numel() const { return node_->values.size(); }

std::span<const double> Tensor::values() const { return node_->values; }

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape()));
  return node_->values[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) throw ShapeError("index rank mismatch");
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= node_->shape[axis]) throw ShapeError("index out of range");
    flat = flat * node_->shape[axis] + i;
    ++axis;
  }
  return node_->values[flat];
}

std::span<double> Tensor::mutable_values() {
  if (!is_leaf()) throw std::logic_error("values of a non-leaf tensor are immutable");
  return node_->values;
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

bool Tensor::is_leaf() const { return node_->parents.empty() && !node_->backward; }

bool Tensor::has_grad() const { return !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (node_->grad.empty()) throw std::logic_error("tensor has no gradient");
  return node_->grad;
}

std::span<double> Tensor::mutable_grad() {
  if (node_->grad.empty()) throw std::logic_error("tensor has no gradient");
  return node_->grad;
}

void Tensor::zero_grad() { node_->grad.clear(); }

Tensor Tensor::detach() const { return create(node_->shape, node_->values); }

void Tensor::backward() const {
  if (numel() != 1) throw ShapeError("backward() needs a scalar loss, got " + shape_string(shape()));
  if (!node_->requires_grad) throw std::logic_error("backward() on a tensor without gradient tracking");
  if (node_->backward_done) throw std::logic_error("backward() called twice on the same graph");

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  node_->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (!node->backward || node->grad.empty()) continue;
    std::vector<Node*> parents;
    parents.reserve(node->parents.size());
    for (auto& p : node->parents) parents.push_back(p.get());
    node->backward(node->grad, GradAccess(std::move(parents)));
  }
  node_->backward_done = true;
}

// ---------------------------------------------------------------------------
// Broadcasting binary ops

namespace {

struct Broadcast {
  Shape out_shape;
  // Maps a flat output index to the operand's flat index.
  std::size_t a_mod;
  std::size_t b_mod;
};

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

Broadcast broadcast_shapes(const Tensor& a, const Tensor& b) {
  const auto na = a.numel();
  const auto nb = b.numel();
  if (a.shape() == b.shape()) return {a.shape(), na, nb};
  if (nb == 1) return {a.shape(), na, 1};
  if (na == 1) return {b.shape(), 1, nb};
  if (is_suffix(b.shape(), a.shape())) return {a.shape(), na, nb};
  if (is_suffix(a.shape(), b.shape())) return {b.shape(), na, nb};
  throw ShapeError("cannot broadcast " + shape_string(a.shape()) + " with " + shape_string(b.shape()));
}

template <typename F, typename DA, typename DB>
Tensor binary_op(const Tensor& a, const Tensor& b, F f, DA da, DB db) {
  auto bc = broadcast_shapes(a, b);
  const auto n = shape_numel(bc.out_shape);
  const auto am = bc.a_mod;
  const auto bm = bc.b_mod;
  // Visits (i, i % am, i % bm) without per-element division.
  const auto for_each = [n, am, bm](auto&& body) {
    if (am == n && bm == n) {
      for (std::size_t i = 0; i < n; ++i) body(i, i, i);
      return;
    }
    for (std::size_t i = 0, ia = 0, ib = 0; i < n; ++i) {
      body(i, ia, ib);
      if (++ia == am) ia = 0;
      if (++ib == bm) ib = 0;
    }
  };
  std::vector<double> out(n);
  auto av = a.values();
  auto bv = b.values();
  for_each([&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = f(av[ia], bv[ib]); });
  return Tensor::from_op(bc.out_shape, std::move(out), {a, b},
                         [a, b, for_each, da, db](std::span<const double> g, const GradAccess& grads) {
                           auto av = a.values();
                           auto bv = b.values();
                           auto ga = grads[0];
                           auto gb = grads[1];
                           if (!ga.empty())
                             for_each([&](std::size_t i, std::size_t ia, std::size_t ib) {
                               ga[ia] += g[i] * da(av[ia], bv[ib]);
                             });
                           if (!gb.empty())
                             for_each([&](std::size_t i, std::size_t ia, std::size_t ib) {
                               gb[ib] += g[i] * db(av[ia], bv[ib]);
                             });
                         });
}

template <typename F, typename D>
Tensor unary_op(const Tensor& x, F f, D d) {
  auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  if (!x.requires_grad() || !grad_enabled()) return Tensor::create(x.shape(), std::move(out));
  // The derivative may read the output, so the closure keeps a copy.
  auto y = out;
  return Tensor::from_op(x.shape(), std::move(out), {x},
                         [x, y = std::move(y), d](std::span<const double> g, const GradAccess& grads) {
                           auto gx = grads[0];
                           auto xv = x.values();
                           for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * d(xv[i], y[i]);
                         });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor scale(const Tensor& x, double factor) {
  return unary_op(
      x, [factor](double v) { return v * factor; }, [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double value) {
  return unary_op(
      x, [value](double v) { return v + value; }, [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

Tensor tanh(const Tensor& x) {
  return unary_op(
      x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& x) {
  return unary_op(
      x,
      [](double v) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& x) {
  return unary_op(
      x, [](double v) { return v > 0 ? v : 0.0; }, [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Tensor exp(const Tensor& x) {
  return unary_op(
      x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  for (double v : x.values())
    if (!(v > 0)) throw std::domain_error("log of non-positive value " + std::to_string(v));
  return unary_op(
      x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor square(const Tensor& x) {
  return unary_op(
      x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& x) {
  auto xv = x.values();
  const double total = std::accumulate(xv.begin(), xv.end(), 0.0);
  return Tensor::from_op({}, {total}, {x}, [](std::span<const double> g, const GradAccess& grads) {
    for (double& v : grads[0]) v += g[0];
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

// ---------------------------------------------------------------------------
// Matrix product

namespace {

// C(m x n) += A(m x k) * B(k x n)
using linalg::view;

// C(m x n) += A(m x k) * B(k x n)
void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  view(c, m, n).noalias() += view(a, m, k) * view(b, k, n);
}

// dA(m x k) += dC(m x n) * B^T
void gemm_grad_a(const double* dc, const double* b, double* da, std::size_t m, std::size_t k, std::size_t n) {
  view(da, m, k).noalias() += view(dc, m, n) * view(b, k, n).transpose();
}

// dB(k x n) += A^T * dC
void gemm_grad_b(const double* a, const double* dc, double* db, std::size_t m, std::size_t k, std::size_t n) {
  view(db, k, n).noalias() += view(a, m, k).transpose() * view(dc, m, n);
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  Shape as = a.shape();
  Shape bs = b.shape();
  if (as.empty() || bs.empty()) throw ShapeError("matmul needs rank >= 1 operands");
  const bool row_vector = as.size() == 1;
  const bool col_vector = bs.size() == 1;
  if (row_vector) as.insert(as.begin(), 1);
  if (col_vector) bs.push_back(1);

  const std::size_t m = as[as.size() - 2];
  const std::size_t k = as.back();
  const std::size_t n = bs.back();
  if (bs[bs.size() - 2] != k)
    throw ShapeError("matmul inner dimensions differ: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  Shape lead(as.begin(), as.end() - 2);
  const bool shared_b = bs.size() == 2;
  if (!shared_b) {
    Shape blead(bs.begin(), bs.end() - 2);
    if (blead != lead)
      throw ShapeError("matmul batch axes differ: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  const std::size_t batch = shape_numel(lead);

  Shape out_shape = lead;
  if (!row_vector) out_shape.push_back(m);
  if (!col_vector) out_shape.push_back(n);
  std::vector<double> out(batch * m * n, 0.0);
  const double* av = a.values().data();
  const double* bv = b.values().data();
  if (shared_b)
    gemm_acc(av, bv, out.data(), batch * m, k, n);
  else
    for (std::size_t bi = 0; bi < batch; ++bi) gemm_acc(av + bi * m * k, bv + bi * k * n, out.data() + bi * m * n, m, k, n);

  return Tensor::from_op(out_shape, std::move(out), {a, b},
                         [a, b, batch, m, k, n, shared_b](std::span<const double> g, const GradAccess& grads) {
                           auto ga = grads[0];
                           auto gb = grads[1];
                           const double* av = a.values().data();
                           const double* bv = b.values().data();
                           if (shared_b) {
                             if (!ga.empty()) gemm_grad_a(g.data(), bv, ga.data(), batch * m, k, n);
                             if (!gb.empty()) gemm_grad_b(av, g.data(), gb.data(), batch * m, k, n);
                             return;
                           }
                           for (std::size_t bi = 0; bi < batch; ++bi) {
                             const double* dc = g.data() + bi * m * n;
                             const std::size_t boff = shared_b ? 0 : bi * k * n;
                             if (!ga.empty()) gemm_grad_a(dc, bv + boff, ga.data() + bi * m * k, m, k, n);
                             if (!gb.empty()) gemm_grad_b(av + bi * m * k, dc, gb.data() + boff, m, k, n);
                           }
                         });
}

// ---------------------------------------------------------------------------
// Layout ops

Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
  const auto& xs = x.shape();
  const std::size_t r = xs.size();
  if (axes.size() != r) throw ShapeError("permute needs one entry per axis");
  std::vector<bool> seen(r, false);
  for (auto ax : axes) {
    if (ax >= r || seen[ax]) throw ShapeError("permute axes must be a permutation");
    seen[ax] = true;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = xs[axes[i]];

  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * xs[i];
  // Stride into the input for each output axis.
  std::vector<std::size_t> strides(r);
  for (std::size_t i = 0; i < r; ++i) strides[i] = in_strides[axes[i]];

  const std::size_t n = x.numel();
  std::vector<std::size_t> src(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t offset = 0;
  for (std::size_t o = 0; o < n; ++o) {
    src[o] = offset;
    for (std::size_t ax = r; ax-- > 0;) {
      ++idx[ax];
      offset += strides[ax];
      if (idx[ax] < out_shape[ax]) break;
      offset -= strides[ax] * idx[ax];
      idx[ax] = 0;
    }
  }
  auto xv = x.values();
  std::vector<double> out(n);
  for (std::size_t o = 0; o < n; ++o) out[o] = xv[src[o]];
  return Tensor::from_op(out_shape, std::move(out), {x},
                         [src = std::move(src)](std::span<const double> g, const GradAccess& grads) {
                           auto gx = grads[0];
                           for (std::size_t o = 0; o < g.size(); ++o) gx[src[o]] += g[o];
                         });
}

Tensor transpose(const Tensor& x) {
  if (x.rank() < 2) throw ShapeError("transpose needs rank >= 2");
  std::vector<std::size_t> axes(x.rank());
  std::iota(axes.begin(), axes.end(), 0);
  std::swap(axes[axes.size() - 1], axes[axes.size() - 2]);
  return permute(x, axes);
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw ShapeError("cannot reshape " + shape_string(x.shape()) + " to " + shape_string(shape));
  std::vector<double> out(x.values().begin(), x.values().end());
  return Tensor::from_op(std::move(shape), std::move(out), {x}, [](std::span<const double> g, const GradAccess& grads) {
    auto gx = grads[0];
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw ShapeError("concat axis out of range");
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size()) throw ShapeError("concat rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != axis && s[i] != first[i])
        throw ShapeError("concat shape mismatch: " + shape_string(s) + " vs " + shape_string(first));
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  const std::size_t out_chunk = out_shape[axis] * inner;

  std::vector<double> out(shape_numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t chunk = p.dim(axis) * inner;
    auto pv = p.values();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(pv.begin() + o * chunk, chunk, out.begin() + o * out_chunk + offset);
    offset += chunk;
  }
  return Tensor::from_op(out_shape, std::move(out), parts,
                         [parts, offsets, outer, inner, out_chunk, axis](std::span<const double> g,
                                                                        const GradAccess& grads) {
                           for (std::size_t pi = 0; pi < parts.size(); ++pi) {
                             auto gp = grads[pi];
                             if (gp.empty()) continue;
                             const std::size_t chunk = parts[pi].dim(axis) * inner;
                             for (std::size_t o = 0; o < outer; ++o)
                               for (std::size_t j = 0; j < chunk; ++j)
                                 gp[o * chunk + j] += g[o * out_chunk + offsets[pi] + j];
                           }
                         });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& xs = x.shape();
  if (axis >= xs.size()) throw ShapeError("slice axis out of range");
  if (begin >= end || end > xs[axis])
    throw ShapeError("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for axis of length " +
                     std::to_string(xs[axis]));
  Shape out_shape = xs;
  out_shape[axis] = end - begin;
  std::size_t outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= xs[i];
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < xs.size(); ++i) inner *= xs[i];
  const std::size_t in_chunk = xs[axis] * inner;
  const std::size_t out_chunk = (end - begin) * inner;
  const std::size_t start = begin * inner;

  auto xv = x.values();
  std::vector<double> out(outer * out_chunk);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(xv.begin() + o * in_chunk + start, out_chunk, out.begin() + o * out_chunk);
  return Tensor::from_op(out_shape, std::move(out), {x},
                         [outer, in_chunk, out_chunk, start](std::span<const double> g, const GradAccess& grads) {
                           auto gx = grads[0];
                           for (std::size_t o = 0; o < outer; ++o)
                             for (std::size_t j = 0; j < out_chunk; ++j) gx[o * in_chunk + start + j] += g[o * out_chunk + j];
                         });
}

// ---------------------------------------------------------------------------
// Normalizations

Tensor softmax(const Tensor& x, std::size_t axis) {
  const Shape& xs = x.shape();
  if (axis >= xs.size()) throw ShapeError("softmax axis out of range");
  std::size_t outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= xs[i];
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < xs.size(); ++i) inner *= xs[i];
  const std::size_t len = xs[axis];

  auto xv = x.values();
  std::vector<double> y(xv.size());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, xv[base + j * inner]);
      double total = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        const double e = std::exp(xv[base + j * inner] - mx);
        y[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < len; ++j) y[base + j * inner] /= total;
    }
  auto yc = y;
  return Tensor::from_op(xs, std::move(y), {x},
                         [y = std::move(yc), outer, inner, len](std::span<const double> g, const GradAccess& grads) {
                           auto gx = grads[0];
                           for (std::size_t o = 0; o < outer; ++o)
                             for (std::size_t in = 0; in < inner; ++in) {
                               const std::size_t base = o * len * inner + in;
                               double dot = 0.0;
                               for (std::size_t j = 0; j < len; ++j) dot += g[base + j * inner] * y[base + j * inner];
                               for (std::size_t j = 0; j < len; ++j)
                                 gx[base + j * inner] += y[base + j * inner] * (g[base + j * inner] - dot);
                             }
                         });
}

Tensor log_softmax_last(const Tensor& x) {
  if (x.rank() == 0) throw ShapeError("log_softmax needs rank >= 1");
  const std::size_t len = x.shape().back();
  const std::size_t rows = x.numel() / len;
  auto xv = x.values();
  std::vector<double> y(xv.size());
  std::vector<double> p(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * len;
    const double mx = *std::max_element(row, row + len);
    double total = 0.0;
    for (std::size_t j = 0; j < len; ++j) total += std::exp(row[j] - mx);
    const double lse = mx + std::log(total);
    for (std::size_t j = 0; j < len; ++j) {
      y[r * len + j] = row[j] - lse;
      p[r * len + j] = std::exp(y[r * len + j]);
    }
  }
  return Tensor::from_op(x.shape(), std::move(y), {x},
                         [p = std::move(p), rows, len](std::span<const double> g, const GradAccess& grads) {
                           auto gx = grads[0];
                           for (std::size_t r = 0; r < rows; ++r) {
                             double total = 0.0;
                             for (std::size_t j = 0; j < len; ++j) total += g[r * len + j];
                             for (std::size_t j = 0; j < len; ++j)
                               gx[r * len + j] += g[r * len + j] - p[r * len + j] * total;
                           }
                         });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (x.rank() == 0) throw ShapeError("layer_norm needs rank >= 1");
  const std::size_t d = x.shape().back();
  if (gain.numel() != d || bias.numel() != d) throw ShapeError("layer_norm gain/bias must match the last axis");
  const std::size_t rows = x.numel() / d;
  auto xv = x.values();
  auto gv = gain.values();
  auto bv = bias.values();
  std::vector<double> y(xv.size());
  std::vector<double> xhat(xv.size());
  std::vector<double> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (row[j] - mu) * rstd[r];
      y[r * d + j] = xhat[r * d + j] * gv[j] + bv[j];
    }
  }
  return Tensor::from_op(
      x.shape(), std::move(y), {x, gain, bias},
      [gain, xhat = std::move(xhat), rstd = std::move(rstd), rows, d](std::span<const double> g,
                                                                     const GradAccess& grads) {
        auto gx = grads[0];
        auto gg = grads[1];
        auto gb = grads[2];
        auto gv = gain.values();
        std::vector<double> dxhat(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* grow = g.data() + r * d;
          const double* hrow = xhat.data() + r * d;
          if (!gg.empty())
            for (std::size_t j = 0; j < d; ++j) gg[j] += grow[j] * hrow[j];
          if (!gb.empty())
            for (std::size_t j = 0; j < d; ++j) gb[j] += grow[j];
          if (gx.empty()) continue;
          double mean_d = 0.0;
          double mean_dh = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            dxhat[j] = grow[j] * gv[j];
            mean_d += dxhat[j];
            mean_dh += dxhat[j] * hrow[j];
          }
          mean_d /= static_cast<double>(d);
          mean_dh /= static_cast<double>(d);
          for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += rstd[r] * (dxhat[j] - mean_d - hrow[j] * mean_dh);
        }
      });
}

}  // namespace fqa
