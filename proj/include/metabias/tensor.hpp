#pragma once

// Tape-based reverse-mode automatic differentiation over dense 64-bit
// tensors. Gradients are computed by replaying each node's backward rule;
// the rules themselves are written in terms of the same primitive ops, so
// when grad() is called with create_graph the backward pass is recorded on
// the tape and can be differentiated again (grad-of-grad).

#include <algorithm>
#include <cmath>
#include <cstring>
#include <deque>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "metabias/common.hpp"

namespace metabias {

class Tape;

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data)
      : data_(std::make_shared<const std::vector<double>>(std::move(data))),
        shape_(std::move(shape)) {
    if (shape_numel(shape_) != static_cast<int64_t>(data_->size()))
      throw ShapeError("tensor data size " + std::to_string(data_->size()) +
                       " does not match shape " + shape_str(shape_));
  }

  static Tensor zeros(Shape shape) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0));
  }
  static Tensor full(Shape shape, double v) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v));
  }
  static Tensor scalar(double v) { return Tensor(Shape{}, {v}); }

  bool defined() const { return data_ != nullptr; }
  const Shape& shape() const { return shape_; }
  int64_t dim(size_t i) const { return shape_.at(i); }
  size_t rank() const { return shape_.size(); }
  int64_t numel() const { return shape_numel(shape_); }
  std::span<const double> data() const {
    return {data_->data(), data_->size()};
  }
  double value(int64_t i) const { return (*data_)[static_cast<size_t>(i)]; }
  double scalar_value() const {
    if (numel() != 1)
      throw ShapeError("scalar_value on tensor of shape " + shape_str(shape_));
    return (*data_)[0];
  }
  bool all_finite() const {
    for (double v : *data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  // Same values, no tape identity.
  Tensor detached() const {
    Tensor t;
    t.data_ = data_;
    t.shape_ = shape_;
    return t;
  }

  Tape* tape() const { return tape_; }
  int32_t node() const { return node_; }
  bool tracked_on(const Tape* t) const { return tape_ == t && node_ >= 0; }

 private:
  friend class Tape;
  std::shared_ptr<const std::vector<double>> data_;
  Shape shape_;
  Tape* tape_ = nullptr;
  int32_t node_ = -1;
};

// One tape per adaptation episode; confined to a single thread. Nodes are
// appended in execution order, so every node's inputs precede it.
class Tape {
 public:
  // Adjoints returned by a backward rule line up with the node's parent
  // slots; slots for untracked inputs stay default-constructed.
  using BackwardFn = std::function<std::vector<Tensor>(const Tensor& gout)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return active_tape(); }

  // RAII activation for the current thread.
  class Scope {
   public:
    explicit Scope(Tape& t) : prev_(active_tape()) { active_tape() = &t; }
    ~Scope() { active_tape() = prev_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* prev_;
  };

  // RAII suppression of recording (used by grad() without create_graph).
  class NoRecord {
   public:
    explicit NoRecord(Tape& t) : tape_(t), prev_(t.recording_) {
      tape_.recording_ = false;
    }
    ~NoRecord() { tape_.recording_ = prev_; }
    NoRecord(const NoRecord&) = delete;
    NoRecord& operator=(const NoRecord&) = delete;

   private:
    Tape& tape_;
    bool prev_;
  };

  bool recording() const { return recording_; }
  int32_t size() const { return static_cast<int32_t>(nodes_.size()); }

  // Registers a leaf; gradients can be requested for the returned tensor.
  Tensor watch(const Tensor& t) {
    Tensor out = t.detached();
    out.tape_ = this;
    out.node_ = size();
    nodes_.push_back(Node{{}, nullptr});
    return out;
  }

  Tensor emplace(Tensor value, std::vector<int32_t> parents,
                 BackwardFn backward) {
    value.tape_ = this;
    value.node_ = size();
    nodes_.push_back(Node{std::move(parents), std::move(backward)});
    return value;
  }

  // For rules that need to reference their own tracked output (exp, sigmoid,
  // tanh): the node is created first, then its rule is attached.
  void set_backward(int32_t node, BackwardFn backward) {
    nodes_[static_cast<size_t>(node)].backward = std::move(backward);
  }

  friend std::vector<Tensor> grad(const Tensor&, std::span<const Tensor>,
                                  bool);

 private:
  struct Node {
    std::vector<int32_t> parents;  // -1 marks an untracked input slot
    BackwardFn backward;           // null for leaves
  };
  static Tape*& active_tape() {
    thread_local Tape* t = nullptr;
    return t;
  }
  std::deque<Node> nodes_;
  bool recording_ = true;
};

namespace detail {

inline bool rec(const Tape* t) { return t != nullptr && t->recording(); }

inline void check_same_shape(const char* op, const Tensor& a,
                             const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitive operations. Each computes its value eagerly and, when a tape is
// recording and an input is tracked, registers a backward rule expressed in
// terms of these same primitives.
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape("add", a, b);
  std::vector<double> out(static_cast<size_t>(a.numel()));
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = pa[i] + pb[i];
  Tensor r(a.shape(), std::move(out));
  Tape* t = Tape::active();
  if (!detail::rec(t)) return r;
  bool na = a.tracked_on(t), nb = b.tracked_on(t);
  if (!na && !nb) return r;
  return t->emplace(std::move(r), {na ? a.node() : -1, nb ? b.node() : -1},
                    [na, nb](const Tensor& g) {
                      std::vector<Tensor> adj(2);
                      if (na) adj[0] = g;
                      if (nb) adj[1] = g;
                      return adj;
                    });
}

inline Tensor neg(const Tensor& a) {
  std::vector<double> out(static_cast<size_t>(a.numel()));
  const double* pa = a.data().data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = -pa[i];
  Tensor r(a.shape(), std::move(out));
  Tape* t = Tape::active();
  if (!detail::rec(t) || !a.tracked_on(t)) return r;
  return t->emplace(std::move(r), {a.node()}, [](const Tensor& g) {
    return std::vector<Tensor>{neg(g)};
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape("mul", a, b);
  std::vector<double> out(static_cast<size_t>(a.numel()));
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = pa[i] * pb[i];
  Tensor r(a.shape(), std::move(out));
  Tape* t = Tape::active();
  if (!detail::rec(t)) return r;
  bool na = a.tracked_on(t), nb = b.tracked_on(t);
  if (!na && !nb) return r;
  Tensor sa = a, sb = b;
  return t->emplace(std::move(r), {na ? a.node() : -1, nb ? b.node() : -1},
                    [na, nb, sa, sb](const Tensor& g) {
                      std::vector<Tensor> adj(2);
                      if (na) adj[0] = mul(g, sb);
                      if (nb) adj[1] = mul(g, sa);
                      return adj;
                    });
}

inline Tensor add_scalar(const Tensor& a, double c) {
  std::vector<double> out(static_cast<size_t>(a.numel()));
  const double* pa = a.data().data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = pa[i] + c;
  Tensor r(a.shape(), std::move(out));
  Tape* t = Tape::active();
  if (!detail::rec(t) || !a.tracked_on(t)) return r;
  return t->emplace(std::move(r), {a.node()}, [](const Tensor& g) {
    return std::vector<Tensor>{g};
  });
}

inline Tensor mul_scalar(const Tensor& a, double c) {
  std::vector<double> out(static_cast<size_t>(a.numel()));
  const double* pa = a.data().data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = pa[i] * c;
  Tensor r(a.shape(), std::move(out));
  Tape* t = Tape::active();
  if (!detail::rec(t) || !a.tracked_on(t)) return r;
  return t->emplace(std::move(r), {a.node()}, [c](const Tensor& g) {
    return std::vector<Tensor>{mul_scalar(g, c)};
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) { return add(a, neg(b)); }

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

namespace detail {

// c[m x n] += a[m x k] * b[k x n]; ikj order so the inner loop streams.
inline void matmul_kernel(const double* a, const double* b, double* c,
                          int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (int64_t p = 0; p < k; ++p) {
      double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace detail

inline Tensor permute(const Tensor& a, const std::vector<int>& axes);

inline Tensor transpose2d(const Tensor& a) { return permute(a, {1, 0}); }

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul: expected 2-d operands, got " +
                     shape_str(a.shape()) + " and " + shape_str(b.shape()));
  if (a.dim(1) != b.dim(0))
    throw ShapeError("matmul: inner dimensions disagree, " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(static_cast<size_t>(m * n), 0.0);
  detail::matmul_kernel(a.data().data(), b.data().data(), out.data(), m, k, n);
  Tensor r(Shape{m, n}, std::move(out));
  Tape* t = Tape::active();
  if (!detail::rec(t)) return r;
  bool na = a.tracked_on(t), nb = b.tracked_on(t);
  if (!na && !nb) return r;
  Tensor sa = a, sb = b;
  return t->emplace(std::move(r), {na ? a.node() : -1, nb ? b.node() : -1},
                    [na, nb, sa, sb](const Tensor& g) {
                      std::vector<Tensor> adj(2);
                      if (na) adj[0] = matmul(g, transpose2d(sb));
                      if (nb) adj[1] = matmul(transpose2d(sa), g);
                      return adj;
                    });
}

inline Tensor transpose_last2(const Tensor& a);

inline Tensor bmm(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) ||
      a.dim(2) != b.dim(1))
    throw ShapeError("bmm: incompatible shapes " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
  int64_t nb_ = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  std::vector<double> out(static_cast<size_t>(nb_ * m * n), 0.0);
  for (int64_t i = 0; i < nb_; ++i)
    detail::matmul_kernel(a.data().data() + i * m * k,
                          b.data().data() + i * k * n, out.data() + i * m * n,
                          m, k, n);
  Tensor r(Shape{nb_, m, n}, std::move(out));
  Tape* t = Tape::active();
  if (!detail::rec(t)) return r;
  bool na = a.tracked_on(t), nbt = b.tracked_on(t);
  if (!na && !nbt) return r;
  Tensor sa = a, sb = b;
  return t->emplace(std::move(r), {na ? a.node() : -1, nbt ? b.node() : -1},
                    [na, nbt, sa, sb](const Tensor& g) {
                      std::vector<Tensor> adj(2);
                      if (na) adj[0] = bmm(g, transpose_last2(sb));
                      if (nbt) adj[1] = bmm(transpose_last2(sa), g);
                      return adj;
                    });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                     shape_str(shape));
  Tensor r(shape, std::vector<double>(a.data().begin(), a.data().end()));
  Tape* t = Tape::active();
  if (!detail::rec(t) || !a.tracked_on(t)) return r;
  Shape orig = a.shape();
  return t->emplace(std::move(r), {a.node()}, [orig](const Tensor& g) {
    return std::vector<Tensor>{reshape(g, orig)};
  });
}

inline Tensor flatten(const Tensor& a) {
  if (a.rank() == 0) return reshape(a, Shape{1, 1});
  int64_t b = a.dim(0);
  return reshape(a, Shape{b, a.numel() / b});
}

inline Tensor permute(const Tensor& a, const std::vector<int>& axes) {
  if (axes.size() != a.rank())
    throw ShapeError("permute: axes count " + std::to_string(axes.size()) +
                     " does not match rank " + std::to_string(a.rank()));
  size_t r = a.rank();
  Shape out_shape(r);
  std::vector<bool> seen(r, false);
  for (size_t i = 0; i < r; ++i) {
    int ax = axes[i];
    if (ax < 0 || static_cast<size_t>(ax) >= r || seen[ax])
      throw ShapeError("permute: invalid axis permutation");
    seen[ax] = true;
    out_shape[i] = a.dim(static_cast<size_t>(ax));
  }
  auto in_strides = row_major_strides(a.shape());
  auto out_strides = row_major_strides(out_shape);
  std::vector<double> out(static_cast<size_t>(a.numel()));
  const double* pa = a.data().data();
  int64_t n = a.numel();
  std::vector<int64_t> idx(r, 0);
  for (int64_t lin = 0; lin < n; ++lin) {
    // lin indexes the output tensor; map through the permutation.
    int64_t rem = lin, src = 0;
    for (size_t i = 0; i < r; ++i) {
      int64_t coord = rem / out_strides[i];
      rem %= out_strides[i];
      src += coord * in_strides[static_cast<size_t>(axes[i])];
    }
    out[static_cast<size_t>(lin)] = pa[src];
  }
  Tensor res(out_shape, std::move(out));
  Tape* t = Tape::active();
  if (!detail::rec(t) || !a.tracked_on(t)) return res;
  std::vector<int> inverse(r);
  for (size_t i = 0; i < r; ++i) inverse[static_cast<size_t>(axes[i])] = i;
  return t->emplace(std::move(res), {a.node()}, [inverse](const Tensor& g) {
    return std::vector<Tensor>{permute(g, inverse)};
  });
}

inline Tensor transpose_last2(const Tensor& a) {
  std::vector<int> axes(a.rank());
  std::iota(axes.begin(), axes.end(), 0);
  std::swap(axes[a.rank() - 1], axes[a.rank() - 2]);
  return permute(a, axes);
}

inline Tensor concat(std::span<const Tensor> parts, int axis);

inline Tensor slice(const Tensor& a, int axis, int64_t start, int64_t len) {
  if (axis < 0 || static_cast<size_t>(axis) >= a.rank())
    throw ShapeError("slice: axis out of range");
  int64_t dim = a.dim(static_cast<size_t>(axis));
  if (start < 0 || len <= 0 || start + len > dim)
    throw ShapeError("slice: range [" + std::to_string(start) + ", " +
                     std::to_string(start + len) + ") out of bounds for dim " +
                     std::to_string(dim));
  Shape out_shape = a.shape();
  out_shape[static_cast<size_t>(axis)] = len;
  // Treat the tensor as [outer, dim, inner].
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= a.dim(static_cast<size_t>(i));
  for (size_t i = static_cast<size_t>(axis) + 1; i < a.rank(); ++i)
    inner *= a.dim(i);
  std::vector<double> out(static_cast<size_t>(outer * len * inner));
  const double* pa = a.data().data();
  for (int64_t o = 0; o < outer; ++o)
    std::memcpy(out.data() + o * len * inner,
                pa + (o * dim + start) * inner,
                static_cast<size_t>(len * inner) * sizeof(double));
  Tensor r(out_shape, std::move(out));
  Tape* t = Tape::active();
  if (!detail::rec(t) || !a.tracked_on(t)) return r;
  Shape in_shape = a.shape();
  return t->emplace(
      std::move(r), {a.node()},
      [in_shape, axis, start, len, dim](const Tensor& g) {
        // Pad the adjoint back to the input extent with zeros.
        Shape before = in_shape, after = in_shape;
        before[static_cast<size_t>(axis)] = start;
        after[static_cast<size_t>(axis)] = dim - start - len;
        std::vector<Tensor> cat;
        if (start > 0) cat.push_back(Tensor::zeros(before));
        cat.push_back(g);
        if (dim - start - len > 0) cat.push_back(Tensor::zeros(after));
        return std::vector<Tensor>{concat(cat, axis)};
      });
}

inline Tensor concat(std::span<const Tensor> parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Tensor& first = parts[0];
  if (axis < 0 || static_cast<size_t>(axis) >= first.rank())
    throw ShapeError("concat: axis out of range");
  int64_t total = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != first.rank())
      throw ShapeError("concat: rank mismatch");
    for (size_t i = 0; i < first.rank(); ++i)
      if (i != static_cast<size_t>(axis) && p.dim(i) != first.dim(i))
        throw ShapeError("concat: shape mismatch " + shape_str(p.shape()) +
                         " vs " + shape_str(first.shape()));
    total += p.dim(static_cast<size_t>(axis));
  }
  Shape out_shape = first.shape();
  out_shape[static_cast<size_t>(axis)] = total;
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= first.dim(static_cast<size_t>(i));
  for (size_t i = static_cast<size_t>(axis) + 1; i < first.rank(); ++i)
    inner *= first.dim(i);
  std::vector<double> out(static_cast<size_t>(shape_numel(out_shape)));
  int64_t offset = 0;
  for (const Tensor& p : parts) {
    int64_t len = p.dim(static_cast<size_t>(axis));
    const double* pp = p.data().data();
    for (int64_t o = 0; o < outer; ++o)
      std::memcpy(out.data() + (o * total + offset) * inner,
                  pp + o * len * inner,
                  static_cast<size_t>(len * inner) * sizeof(double));
    offset += len;
  }
  Tensor r(out_shape, std::move(out));
  Tape* t = Tape::active();
  if (!detail::rec(t)) return r;
  std::vector<int32_t> parents;
  bool any = false;
  for (const Tensor& p : parts) {
    bool tr = p.tracked_on(t);
    any = any || tr;
    parents.push_back(tr ? p.node() : -1);
  }
  if (!any) return r;
  std::vector<int64_t> lens;
  for (const Tensor& p : parts) lens.push_back(p.dim(static_cast<size_t>(axis)));
  std::vector<bool> tracked;
  for (const Tensor& p : parts) tracked.push_back(p.tracked_on(t));
  return t->emplace(std::move(r), std::move(parents),
                    [lens, tracked, axis](const Tensor& g) {
                      std::vector<Tensor> adj(lens.size());
                      int64_t off = 0;
                      for (size_t i = 0; i < lens.size(); ++i) {
                        if (tracked[i]) adj[i] = slice(g, axis, off, lens[i]);
                        off += lens[i];
                      }
                      return adj;
                    });
}

inline Tensor sum_leading(const Tensor& a);

// [shape...] -> [n, shape...]
inline Tensor expand_leading(const Tensor& a, int64_t n) {
  if (n <= 0) throw ShapeError("expand_leading: n must be positive");
  int64_t m = a.numel();
  std::vector<double> out(static_cast<size_t>(n * m));
  const double* pa = a.data().data();
  for (int64_t i = 0; i < n; ++i)
    std::memcpy(out.data() + i * m, pa, static_cast<size_t>(m) * sizeof(double));
  Shape out_shape;
  out_shape.push_back(n);
  for (int64_t d : a.shape()) out_shape.push_back(d);
  Tensor r(std::move(out_shape), std::move(out));
  Tape* t = Tape::active();
  if (!detail::rec(t) || !a.tracked_on(t)) return r;
  return t->emplace(std::move(r), {a.node()}, [](const Tensor& g) {
    return std::vector<Tensor>{sum_leading(g)};
  });
}

// [n, shape...] -> [shape...]
inline Tensor sum_leading(const Tensor& a) {
  if (a.rank() < 1) throw ShapeError("sum_leading: rank-0 input");
  int64_t n = a.dim(0), m = a.numel() / std::max<int64_t>(n, 1);
  Shape out_shape(a.shape().begin() + 1, a.shape().end());
  std::vector<double> out(static_cast<size_t>(m), 0.0);
  const double* pa = a.data().data();
  for (int64_t i = 0; i < n; ++i) {
    const double* row = pa + i * m;
    for (int64_t j = 0; j < m; ++j) out[static_cast<size_t>(j)] += row[j];
  }
  Tensor r(std::move(out_shape), std::move(out));
  Tape* t = Tape::active();
  if (!detail::rec(t) || !a.tracked_on(t)) return r;
  int64_t lead = n;
  return t->emplace(std::move(r), {a.node()}, [lead](const Tensor& g) {
    return std::vector<Tensor>{expand_leading(g, lead)};
  });
}

inline Tensor broadcast_last(const Tensor& a, int64_t k);

// [shape..., k] -> [shape...]
inline Tensor sum_last(const Tensor& a) {
  if (a.rank() < 1) throw ShapeError("sum_last: rank-0 input");
  int64_t k = a.dim(a.rank() - 1), m = a.numel() / std::max<int64_t>(k, 1);
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  std::vector<double> out(static_cast<size_t>(m), 0.0);
  const double* pa = a.data().data();
  for (int64_t i = 0; i < m; ++i) {
    double s = 0.0;
    const double* row = pa + i * k;
    for (int64_t j = 0; j < k; ++j) s += row[j];
    out[static_cast<size_t>(i)] = s;
  }
  Tensor r(std::move(out_shape), std::move(out));
  Tape* t = Tape::active();
  if (!detail::rec(t) || !a.tracked_on(t)) return r;
  int64_t last = k;
  return t->emplace(std::move(r), {a.node()}, [last](const Tensor& g) {
    return std::vector<Tensor>{broadcast_last(g, last)};
  });
}

// [shape...] -> [shape..., k]
inline Tensor broadcast_last(const Tensor& a, int64_t k) {
  if (k <= 0) throw ShapeError("broadcast_last: k must be positive");
  int64_t m = a.numel();
  std::vector<double> out(static_cast<size_t>(m * k));
  const double* pa = a.data().data();
  for (int64_t i = 0; i < m; ++i) {
    double v = pa[i];
    double* row = out.data() + i * k;
    for (int64_t j = 0; j < k; ++j) row[j] = v;
  }
  Shape out_shape = a.shape();
  out_shape.push_back(k);
  Tensor r(std::move(out_shape), std::move(out));
  Tape* t = Tape::active();
  if (!detail::rec(t) || !a.tracked_on(t)) return r;
  return t->emplace(std::move(r), {a.node()}, [](const Tensor& g) {
    return std::vector<Tensor>{sum_last(g)};
  });
}

inline Tensor sum_all(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  Tensor r = Tensor::scalar(s);
  Tape* t = Tape::active();
  if (!detail::rec(t) || !a.tracked_on(t)) return r;
  Shape in_shape = a.shape();
  return t->emplace(std::move(r), {a.node()}, [in_shape](const Tensor& g) {
    // Adjoint of a full reduction broadcasts the scalar to the input shape.
    Tensor flat = broadcast_last(reshape(g, Shape{}), shape_numel(in_shape));
    return std::vector<Tensor>{reshape(flat, in_shape)};
  });
}

// ---------------------------------------------------------------------------
// Elementwise nonlinearities.
// ---------------------------------------------------------------------------

namespace detail {

template <typename Fwd>
Tensor unary_map(const Tensor& a, Fwd f) {
  std::vector<double> out(static_cast<size_t>(a.numel()));
  const double* pa = a.data().data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = f(pa[i]);
  return Tensor(a.shape(), std::move(out));
}

}  // namespace detail

inline Tensor pow_scalar(const Tensor& a, double p) {
  Tensor r = detail::unary_map(a, [p](double v) { return std::pow(v, p); });
  Tape* t = Tape::active();
  if (!detail::rec(t) || !a.tracked_on(t)) return r;
  Tensor sa = a;
  return t->emplace(std::move(r), {a.node()}, [sa, p](const Tensor& g) {
    return std::vector<Tensor>{
        mul(g, mul_scalar(pow_scalar(sa, p - 1.0), p))};
  });
}

inline Tensor exp(const Tensor& a) {
  Tensor r = detail::unary_map(a, [](double v) { return std::exp(v); });
  Tape* t = Tape::active();
  if (!detail::rec(t) || !a.tracked_on(t)) return r;
  Tensor out = t->emplace(std::move(r), {a.node()}, nullptr);
  // The rule references the tracked output, so grad-of-grad sees exp again.
  Tensor saved = out;
  t->set_backward(out.node(), [saved](const Tensor& g) {
    return std::vector<Tensor>{mul(g, saved)};
  });
  return out;
}

inline Tensor log(const Tensor& a) {
  Tensor r = detail::unary_map(a, [](double v) { return std::log(v); });
  Tape* t = Tape::active();
  if (!detail::rec(t) || !a.tracked_on(t)) return r;
  Tensor sa = a;
  return t->emplace(std::move(r), {a.node()}, [sa](const Tensor& g) {
    return std::vector<Tensor>{mul(g, pow_scalar(sa, -1.0))};
  });
}

inline Tensor relu(const Tensor& a) {
  Tensor r = detail::unary_map(a, [](double v) { return v > 0.0 ? v : 0.0; });
  Tape* t = Tape::active();
  if (!detail::rec(t) || !a.tracked_on(t)) return r;
  // The 0/1 mask is piecewise constant, so it enters as plain data.
  std::vector<double> mask(static_cast<size_t>(a.numel()));
  const double* pa = a.data().data();
  for (size_t i = 0; i < mask.size(); ++i) mask[i] = pa[i] > 0.0 ? 1.0 : 0.0;
  Tensor mask_t(a.shape(), std::move(mask));
  return t->emplace(std::move(r), {a.node()}, [mask_t](const Tensor& g) {
    return std::vector<Tensor>{mul(g, mask_t)};
  });
}

inline Tensor sigmoid(const Tensor& a) {
  Tensor r = detail::unary_map(a, [](double v) {
    return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                    : std::exp(v) / (1.0 + std::exp(v));
  });
  Tape* t = Tape::active();
  if (!detail::rec(t) || !a.tracked_on(t)) return r;
  Tensor out = t->emplace(std::move(r), {a.node()}, nullptr);
  Tensor saved = out;
  t->set_backward(out.node(), [saved](const Tensor& g) {
    // d sigma = sigma * (1 - sigma), written on the tracked output.
    Tensor one_minus = add_scalar(neg(saved), 1.0);
    return std::vector<Tensor>{mul(g, mul(saved, one_minus))};
  });
  return out;
}

inline Tensor tanh(const Tensor& a) {
  Tensor r = detail::unary_map(a, [](double v) { return std::tanh(v); });
  Tape* t = Tape::active();
  if (!detail::rec(t) || !a.tracked_on(t)) return r;
  Tensor out = t->emplace(std::move(r), {a.node()}, nullptr);
  Tensor saved = out;
  t->set_backward(out.node(), [saved](const Tensor& g) {
    Tensor one_minus_sq = add_scalar(neg(mul(saved, saved)), 1.0);
    return std::vector<Tensor>{mul(g, one_minus_sq)};
  });
  return out;
}

// ---------------------------------------------------------------------------
// 3x3 convolution support: im2col / col2im with stride 1, zero padding 1.
// Both are linear maps and are each other's adjoint.
// ---------------------------------------------------------------------------

inline Tensor col2im3x3(const Tensor& cols, int64_t b, int64_t c, int64_t h,
                        int64_t w);

// [B, C, H, W] -> [B*H*W, C*9]; row (b, y, x), column (c, ky, kx).
inline Tensor im2col3x3(const Tensor& a) {
  if (a.rank() != 4)
    throw ShapeError("im2col3x3: expected [B,C,H,W], got " +
                     shape_str(a.shape()));
  int64_t b = a.dim(0), c = a.dim(1), h = a.dim(2), w = a.dim(3);
  std::vector<double> out(static_cast<size_t>(b * h * w * c * 9), 0.0);
  const double* pa = a.data().data();
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t ci = 0; ci < c; ++ci) {
      const double* plane = pa + (bi * c + ci) * h * w;
      for (int64_t y = 0; y < h; ++y)
        for (int64_t ky = 0; ky < 3; ++ky) {
          int64_t sy = y + ky - 1;
          if (sy < 0 || sy >= h) continue;
          const double* srow = plane + sy * w;
          for (int64_t x = 0; x < w; ++x) {
            double* orow =
                out.data() + ((bi * h + y) * w + x) * c * 9 + ci * 9 + ky * 3;
            for (int64_t kx = 0; kx < 3; ++kx) {
              int64_t sx = x + kx - 1;
              if (sx < 0 || sx >= w) continue;
              orow[kx] = srow[sx];
            }
          }
        }
    }
  Tensor r(Shape{b * h * w, c * 9}, std::move(out));
  Tape* t = Tape::active();
  if (!detail::rec(t) || !a.tracked_on(t)) return r;
  return t->emplace(std::move(r), {a.node()}, [b, c, h, w](const Tensor& g) {
    return std::vector<Tensor>{col2im3x3(g, b, c, h, w)};
  });
}

// Adjoint of im2col3x3: scatter-add columns back onto the image grid.
inline Tensor col2im3x3(const Tensor& cols, int64_t b, int64_t c, int64_t h,
                        int64_t w) {
  if (cols.rank() != 2 || cols.dim(0) != b * h * w || cols.dim(1) != c * 9)
    throw ShapeError("col2im3x3: expected [" + std::to_string(b * h * w) +
                     "," + std::to_string(c * 9) + "], got " +
                     shape_str(cols.shape()));
  std::vector<double> out(static_cast<size_t>(b * c * h * w), 0.0);
  const double* pc = cols.data().data();
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t ci = 0; ci < c; ++ci) {
      double* plane = out.data() + (bi * c + ci) * h * w;
      for (int64_t y = 0; y < h; ++y)
        for (int64_t ky = 0; ky < 3; ++ky) {
          int64_t sy = y + ky - 1;
          if (sy < 0 || sy >= h) continue;
          double* drow = plane + sy * w;
          for (int64_t x = 0; x < w; ++x) {
            const double* crow =
                pc + ((bi * h + y) * w + x) * c * 9 + ci * 9 + ky * 3;
            for (int64_t kx = 0; kx < 3; ++kx) {
              int64_t sx = x + kx - 1;
              if (sx < 0 || sx >= w) continue;
              drow[sx] += crow[kx];
            }
          }
        }
    }
  Tensor r(Shape{b, c, h, w}, std::move(out));
  Tape* t = Tape::active();
  if (!detail::rec(t) || !cols.tracked_on(t)) return r;
  return t->emplace(std::move(r), {cols.node()}, [](const Tensor& g) {
    return std::vector<Tensor>{im2col3x3(g)};
  });
}

// ---------------------------------------------------------------------------
// grad: reverse sweep over the tape.
// ---------------------------------------------------------------------------

// Gradients of a scalar `output` with respect to `wrt`. With create_graph the
// backward computation is recorded, so the results are differentiable again.
// Every wrt tensor must be tracked and reachable from the output.
inline std::vector<Tensor> grad(const Tensor& output,
                                std::span<const Tensor> wrt,
                                bool create_graph = false) {
  Tape* t = Tape::active();
  if (t == nullptr)
    throw StructuralError("grad: no active tape");
  if (!output.tracked_on(t))
    throw StructuralError("grad: output is not tracked on the active tape");
  if (output.numel() != 1)
    throw StructuralError("grad: output must be scalar, got shape " +
                          shape_str(output.shape()));

  std::optional<Tape::NoRecord> pause;
  if (!create_graph) pause.emplace(*t);

  int32_t n0 = output.node() + 1;
  std::vector<Tensor> adjoint(static_cast<size_t>(n0));
  adjoint[static_cast<size_t>(output.node())] =
      Tensor::full(output.shape(), 1.0);

  for (int32_t id = output.node(); id >= 0; --id) {
    Tensor& gout = adjoint[static_cast<size_t>(id)];
    if (!gout.defined()) continue;
    // Copy the closure: ops invoked inside it may grow the node deque.
    Tape::BackwardFn fn = t->nodes_[static_cast<size_t>(id)].backward;
    if (!fn) continue;  // leaf
    std::vector<int32_t> parents = t->nodes_[static_cast<size_t>(id)].parents;
    std::vector<Tensor> contrib = fn(gout);
    for (size_t j = 0; j < parents.size(); ++j) {
      int32_t pid = parents[j];
      if (pid < 0 || !contrib[j].defined()) continue;
      Tensor& slot = adjoint[static_cast<size_t>(pid)];
      slot = slot.defined() ? add(slot, contrib[j]) : contrib[j];
    }
  }

  std::vector<Tensor> result;
  result.reserve(wrt.size());
  for (const Tensor& w : wrt) {
    if (!w.tracked_on(t) || w.node() >= n0)
      throw StructuralError("grad: wrt tensor is not part of the graph "
                            "leading to the output");
    const Tensor& g = adjoint[static_cast<size_t>(w.node())];
    if (!g.defined())
      throw StructuralError("grad: wrt tensor is unreachable from the output");
    result.push_back(g);
  }
  return result;
}

inline Tensor grad_one(const Tensor& output, const Tensor& wrt,
                       bool create_graph = false) {
  std::vector<Tensor> w{wrt};
  return grad(output, w, create_graph)[0];
}

}  // namespace metabias
