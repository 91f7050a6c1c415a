#pragma once
// Dense row-major matrices and a tape-free reverse-mode autodiff graph.
//
// Every differentiable quantity in the library is a 2-D matrix. A `Var` is a
// shared handle to a graph node holding its value, its accumulated gradient
// and a closure that pushes the gradient to its parents. `backward(root)`
// topologically sorts the graph reachable from a scalar root and runs the
// closures in reverse order.

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace mvp {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}
  Matrix(std::size_t r, std::size_t c, std::vector<double> values) : rows(r), cols(c), data(std::move(values)) {
    if (data.size() != r * c) throw ShapeError("Matrix: value count does not match shape");
  }

  [[nodiscard]] std::size_t size() const { return data.size(); }
  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  [[nodiscard]] std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  [[nodiscard]] std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  [[nodiscard]] std::string shape_str() const {
    return "[" + std::to_string(rows) + "x" + std::to_string(cols) + "]";
  }
  bool operator==(const Matrix&) const = default;
};

inline void require_shape(const Matrix& m, std::size_t rows, std::size_t cols, const std::string& what) {
  if (m.rows != rows || m.cols != cols) {
    throw ShapeError(what + ": expected [" + std::to_string(rows) + "x" + std::to_string(cols) + "], got " +
                     m.shape_str());
  }
}

namespace ad {

struct Node {
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != value.size()) grad = Matrix(value.rows, value.cols, 0.0);
  }
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  [[nodiscard]] const Matrix& value() const { return node_->value; }
  [[nodiscard]] const Matrix& grad() const { return node_->grad; }
  [[nodiscard]] std::size_t rows() const { return node_->value.rows; }
  [[nodiscard]] std::size_t cols() const { return node_->value.cols; }
  [[nodiscard]] bool requires_grad() const { return node_->requires_grad; }
  [[nodiscard]] double scalar() const {
    if (node_->value.size() != 1) throw ShapeError("scalar(): not a 1x1 value " + node_->value.shape_str());
    return node_->value.data[0];
  }
  [[nodiscard]] const std::shared_ptr<Node>& node() const { return node_; }
  [[nodiscard]] explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node> node_;
};

/// Constant leaf; never accumulates gradient.
inline Var constant(Matrix m) {
  auto n = std::make_shared<Node>();
  n->value = std::move(m);
  return Var(std::move(n));
}

/// Trainable leaf; gradient is accumulated into `grad()` by `backward`.
inline Var parameter(Matrix m) {
  auto n = std::make_shared<Node>();
  n->value = std::move(m);
  n->requires_grad = true;
  return Var(std::move(n));
}

namespace detail {

inline Var make_op(Matrix value, std::vector<Var> inputs, std::function<void(Node&)> fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  for (auto& v : inputs) {
    if (v.requires_grad()) n->requires_grad = true;
    n->parents.push_back(v.node());
  }
  if (n->requires_grad) n->backward_fn = std::move(fn);
  return Var(std::move(n));
}

// Gradient sink for a parent; nullptr when the parent does not need one.
inline Matrix* sink(const std::shared_ptr<Node>& p) {
  if (!p->requires_grad) return nullptr;
  p->ensure_grad();
  return &p->grad;
}

}  // namespace detail

inline void backward(const Var& root) {
  if (root.value().size() != 1) throw ShapeError("backward(): root must be scalar, got " + root.value().shape_str());
  if (!root.requires_grad()) return;
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  // iterative post-order DFS
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (Node* n : order) {
    if (n->backward_fn) {
      n->ensure_grad();
      std::fill(n->grad.data.begin(), n->grad.data.end(), 0.0);
    }
  }
  root.node()->ensure_grad();
  root.node()->grad.data[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }
}

// ---------------------------------------------------------------------------
// Elementwise and structural ops

inline Var add(const Var& a, const Var& b) {
  require_shape(b.value(), a.rows(), a.cols(), "add");
  Matrix out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += b.value().data[i];
  auto pa = a.node(), pb = b.node();
  return detail::make_op(std::move(out), {a, b}, [pa, pb](Node& self) {
    if (auto* g = detail::sink(pa)) for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += self.grad.data[i];
    if (auto* g = detail::sink(pb)) for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += self.grad.data[i];
  });
}

inline Var sub(const Var& a, const Var& b) {
  require_shape(b.value(), a.rows(), a.cols(), "sub");
  Matrix out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= b.value().data[i];
  auto pa = a.node(), pb = b.node();
  return detail::make_op(std::move(out), {a, b}, [pa, pb](Node& self) {
    if (auto* g = detail::sink(pa)) for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += self.grad.data[i];
    if (auto* g = detail::sink(pb)) for (std::size_t i = 0; i < g->size(); ++i) g->data[i] -= self.grad.data[i];
  });
}

inline Var mul(const Var& a, const Var& b) {
  require_shape(b.value(), a.rows(), a.cols(), "mul");
  Matrix out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= b.value().data[i];
  auto pa = a.node(), pb = b.node();
  return detail::make_op(std::move(out), {a, b}, [pa, pb](Node& self) {
    if (auto* g = detail::sink(pa))
      for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += self.grad.data[i] * pb->value.data[i];
    if (auto* g = detail::sink(pb))
      for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += self.grad.data[i] * pa->value.data[i];
  });
}

inline Var scale(const Var& a, double s) {
  Matrix out = a.value();
  for (auto& x : out.data) x *= s;
  auto pa = a.node();
  return detail::make_op(std::move(out), {a}, [pa, s](Node& self) {
    if (auto* g = detail::sink(pa)) for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += s * self.grad.data[i];
  });
}

inline Var add_scalar(const Var& a, double s) {
  Matrix out = a.value();
  for (auto& x : out.data) x += s;
  auto pa = a.node();
  return detail::make_op(std::move(out), {a}, [pa](Node& self) {
    if (auto* g = detail::sink(pa)) for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += self.grad.data[i];
  });
}

/// a (n x m) + row (1 x m), broadcast over rows.
inline Var add_row(const Var& a, const Var& row) {
  require_shape(row.value(), 1, a.cols(), "add_row");
  Matrix out = a.value();
  const std::size_t m = out.cols;
  for (std::size_t r = 0; r < out.rows; ++r)
    for (std::size_t c = 0; c < m; ++c) out.data[r * m + c] += row.value().data[c];
  auto pa = a.node(), pr = row.node();
  return detail::make_op(std::move(out), {a, row}, [pa, pr, m](Node& self) {
    if (auto* g = detail::sink(pa)) for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += self.grad.data[i];
    if (auto* g = detail::sink(pr)) {
      for (std::size_t r = 0; r < self.grad.rows; ++r)
        for (std::size_t c = 0; c < m; ++c) g->data[c] += self.grad.data[r * m + c];
    }
  });
}

/// a (n x m) * row (1 x m), broadcast over rows.
inline Var mul_row(const Var& a, const Var& row) {
  require_shape(row.value(), 1, a.cols(), "mul_row");
  Matrix out = a.value();
  const std::size_t m = out.cols;
  for (std::size_t r = 0; r < out.rows; ++r)
    for (std::size_t c = 0; c < m; ++c) out.data[r * m + c] *= row.value().data[c];
  auto pa = a.node(), pr = row.node();
  return detail::make_op(std::move(out), {a, row}, [pa, pr, m](Node& self) {
    if (auto* g = detail::sink(pa))
      for (std::size_t r = 0; r < self.grad.rows; ++r)
        for (std::size_t c = 0; c < m; ++c) g->data[r * m + c] += self.grad.data[r * m + c] * pr->value.data[c];
    if (auto* g = detail::sink(pr))
      for (std::size_t r = 0; r < self.grad.rows; ++r)
        for (std::size_t c = 0; c < m; ++c) g->data[c] += self.grad.data[r * m + c] * pa->value.data[r * m + c];
  });
}

/// a (n x m) * s where s is a 1x1 Var.
inline Var mul_scalar_var(const Var& a, const Var& s) {
  require_shape(s.value(), 1, 1, "mul_scalar_var");
  const double sv = s.value().data[0];
  Matrix out = a.value();
  for (auto& x : out.data) x *= sv;
  auto pa = a.node(), ps = s.node();
  return detail::make_op(std::move(out), {a, s}, [pa, ps](Node& self) {
    const double sv = ps->value.data[0];
    if (auto* g = detail::sink(pa)) for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += self.grad.data[i] * sv;
    if (auto* g = detail::sink(ps)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad.data[i] * pa->value.data[i];
      g->data[0] += acc;
    }
  });
}

inline Matrix matmul_values(const Matrix& a, const Matrix& b) {
  if (a.cols != b.rows) throw ShapeError("matmul: inner dimensions differ " + a.shape_str() + " * " + b.shape_str());
  Matrix out(a.rows, b.cols, 0.0);
  for (std::size_t i = 0; i < a.rows; ++i) {
    double* o = out.data.data() + i * b.cols;
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double aik = a.data[i * a.cols + k];
      if (aik == 0.0) continue;
      const double* br = b.data.data() + k * b.cols;
      for (std::size_t j = 0; j < b.cols; ++j) o[j] += aik * br[j];
    }
  }
  return out;
}

inline Var matmul(const Var& a, const Var& b) {
  Matrix out = matmul_values(a.value(), b.value());
  auto pa = a.node(), pb = b.node();
  return detail::make_op(std::move(out), {a, b}, [pa, pb](Node& self) {
    const Matrix& A = pa->value;
    const Matrix& B = pb->value;
    const Matrix& G = self.grad;
    if (auto* g = detail::sink(pa)) {
      // dA = G * B^T
      for (std::size_t i = 0; i < A.rows; ++i)
        for (std::size_t k = 0; k < A.cols; ++k) {
          double acc = 0.0;
          const double* gr = G.data.data() + i * G.cols;
          const double* br = B.data.data() + k * B.cols;
          for (std::size_t j = 0; j < B.cols; ++j) acc += gr[j] * br[j];
          g->data[i * A.cols + k] += acc;
        }
    }
    if (auto* g = detail::sink(pb)) {
      // dB = A^T * G
      for (std::size_t i = 0; i < A.rows; ++i)
        for (std::size_t k = 0; k < A.cols; ++k) {
          const double aik = A.data[i * A.cols + k];
          if (aik == 0.0) continue;
          const double* gr = G.data.data() + i * G.cols;
          double* dbr = g->data.data() + k * B.cols;
          for (std::size_t j = 0; j < B.cols; ++j) dbr[j] += aik * gr[j];
        }
    }
  });
}

/// x W + b with W (in x out) and b (1 x out).
inline Var linear(const Var& x, const Var& w, const Var& b) { return add_row(matmul(x, w), b); }

template <class F, class DF>
Var unary(const Var& a, F f, DF df) {
  Matrix out = a.value();
  for (auto& x : out.data) x = f(x);
  auto pa = a.node();
  return detail::make_op(std::move(out), {a}, [pa, df](Node& self) {
    if (auto* g = detail::sink(pa))
      for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += self.grad.data[i] * df(pa->value.data[i], self.value.data[i]);
  });
}

inline Var tanh(const Var& a) {
  return unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

inline double sigmoid_value(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

/// log(1 + exp(x)) without overflow.
inline double softplus_value(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

inline Var sigmoid(const Var& a) {
  return unary(a, sigmoid_value, [](double, double y) { return y * (1.0 - y); });
}

inline Var softplus(const Var& a) {
  return unary(a, softplus_value, [](double x, double) { return sigmoid_value(x); });
}

// tanh approximation of GELU
inline Var gelu(const Var& a) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double c = 0.044715;
  return unary(
      a,
      [](double x) { return 0.5 * x * (1.0 + std::tanh(k * (x + c * x * x * x))); },
      [](double x, double) {
        const double u = k * (x + c * x * x * x);
        const double t = std::tanh(u);
        const double du = k * (1.0 + 3.0 * c * x * x);
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
      });
}

/// Clamp to [lo, hi]; gradient passes only strictly inside the interval.
inline Var clamp(const Var& a, double lo, double hi) {
  Matrix out = a.value();
  for (auto& x : out.data) x = std::clamp(x, lo, hi);
  auto pa = a.node();
  return detail::make_op(std::move(out), {a}, [pa, lo, hi](Node& self) {
    if (auto* g = detail::sink(pa))
      for (std::size_t i = 0; i < g->size(); ++i) {
        const double x = pa->value.data[i];
        if (x > lo && x < hi) g->data[i] += self.grad.data[i];
      }
  });
}

inline Var sum(const Var& a) {
  double s = 0.0;
  for (double x : a.value().data) s += x;
  auto pa = a.node();
  return detail::make_op(Matrix(1, 1, s), {a}, [pa](Node& self) {
    if (auto* g = detail::sink(pa)) for (auto& x : g->data) x += self.grad.data[0];
  });
}

inline Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

inline Var square(const Var& a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

/// Mean of squared elementwise differences.
inline Var mse(const Var& a, const Var& b) { return mean(square(sub(a, b))); }

/// Reinterpret the row-major buffer with a new shape.
inline Var reshape(const Var& a, std::size_t rows, std::size_t cols) {
  if (rows * cols != a.value().size())
    throw ShapeError("reshape: " + a.value().shape_str() + " cannot become [" + std::to_string(rows) + "x" +
                     std::to_string(cols) + "]");
  Matrix out(rows, cols, a.value().data);
  auto pa = a.node();
  return detail::make_op(std::move(out), {a}, [pa](Node& self) {
    if (auto* g = detail::sink(pa)) for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += self.grad.data[i];
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t cols = parts.front().cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw ShapeError("concat_rows: column mismatch " + p.value().shape_str());
    rows += p.rows();
  }
  Matrix out(rows, cols);
  std::size_t off = 0;
  std::vector<std::shared_ptr<Node>> nodes;
  for (const auto& p : parts) {
    std::copy(p.value().data.begin(), p.value().data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(off));
    off += p.value().size();
    nodes.push_back(p.node());
  }
  return detail::make_op(std::move(out), parts, [nodes](Node& self) {
    std::size_t off = 0;
    for (const auto& n : nodes) {
      if (auto* g = detail::sink(n))
        for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += self.grad.data[off + i];
      off += n->value.size();
    }
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t rows = parts.front().rows();
  std::size_t cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw ShapeError("concat_cols: row mismatch " + p.value().shape_str());
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::vector<std::shared_ptr<Node>> nodes;
  std::size_t coff = 0;
  for (const auto& p : parts) {
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < p.cols(); ++c) out(r, coff + c) = p.value()(r, c);
    coff += p.cols();
    nodes.push_back(p.node());
  }
  return detail::make_op(std::move(out), parts, [nodes](Node& self) {
    std::size_t coff = 0;
    for (const auto& n : nodes) {
      if (auto* g = detail::sink(n))
        for (std::size_t r = 0; r < n->value.rows; ++r)
          for (std::size_t c = 0; c < n->value.cols; ++c) (*g)(r, c) += self.grad(r, coff + c);
      coff += n->value.cols;
    }
  });
}

inline Var slice_rows(const Var& a, std::size_t begin, std::size_t count) {
  if (begin + count > a.rows()) throw ShapeError("slice_rows: range exceeds " + a.value().shape_str());
  const std::size_t cols = a.cols();
  Matrix out(count, cols);
  std::copy_n(a.value().data.begin() + static_cast<std::ptrdiff_t>(begin * cols), count * cols, out.data.begin());
  auto pa = a.node();
  return detail::make_op(std::move(out), {a}, [pa, begin, cols](Node& self) {
    if (auto* g = detail::sink(pa))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g->data[begin * cols + i] += self.grad.data[i];
  });
}

/// out[i] = a[index[i]] over the flat buffer, reshaped to rows x cols.
/// Backward scatter-adds, so repeated indices are allowed.
inline Var gather(const Var& a, std::shared_ptr<const std::vector<std::size_t>> index, std::size_t rows,
                  std::size_t cols) {
  if (index->size() != rows * cols) throw ShapeError("gather: index count does not match output shape");
  Matrix out(rows, cols);
  const auto& src = a.value().data;
  for (std::size_t i = 0; i < index->size(); ++i) {
    const std::size_t j = (*index)[i];
    if (j >= src.size()) throw ShapeError("gather: index out of range");
    out.data[i] = src[j];
  }
  auto pa = a.node();
  return detail::make_op(std::move(out), {a}, [pa, index](Node& self) {
    if (auto* g = detail::sink(pa))
      for (std::size_t i = 0; i < index->size(); ++i) g->data[(*index)[i]] += self.grad.data[i];
  });
}

/// Repeat a (n x m) block `times` times along rows.
inline Var tile_rows(const Var& a, std::size_t times) {
  auto idx = std::make_shared<std::vector<std::size_t>>(a.value().size() * times);
  for (std::size_t t = 0; t < times; ++t)
    for (std::size_t i = 0; i < a.value().size(); ++i) (*idx)[t * a.value().size() + i] = i;
  return gather(a, idx, a.rows() * times, a.cols());
}

/// Repeat each row of a (n x m) `times` times consecutively.
inline Var repeat_rows(const Var& a, std::size_t times) {
  const std::size_t m = a.cols();
  auto idx = std::make_shared<std::vector<std::size_t>>(a.value().size() * times);
  std::size_t o = 0;
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t t = 0; t < times; ++t)
      for (std::size_t c = 0; c < m; ++c) (*idx)[o++] = r * m + c;
  return gather(a, idx, a.rows() * times, m);
}

/// Row-wise layer normalization without affine terms.
inline Var normalize_rows(const Var& a, double eps = 1e-5) {
  const std::size_t n = a.rows(), m = a.cols();
  Matrix out(n, m);
  std::vector<double> inv_std(n);
  for (std::size_t r = 0; r < n; ++r) {
    auto x = a.value().row(r);
    const double mu = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(m);
    double var = 0.0;
    for (double v : x) var += (v - mu) * (v - mu);
    var /= static_cast<double>(m);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < m; ++c) out(r, c) = (x[c] - mu) * inv_std[r];
  }
  auto pa = a.node();
  return detail::make_op(std::move(out), {a}, [pa, inv_std = std::move(inv_std)](Node& self) {
    auto* g = detail::sink(pa);
    if (!g) return;
    const std::size_t m = self.value.cols;
    for (std::size_t r = 0; r < self.value.rows; ++r) {
      auto y = self.value.row(r);
      auto gy = self.grad.row(r);
      double gm = 0.0, gym = 0.0;
      for (std::size_t c = 0; c < m; ++c) gm += gy[c], gym += gy[c] * y[c];
      gm /= static_cast<double>(m);
      gym /= static_cast<double>(m);
      for (std::size_t c = 0; c < m; ++c) (*g)(r, c) += inv_std[r] * (gy[c] - gm - y[c] * gym);
    }
  });
}

inline Var layer_norm(const Var& a, const Var& gain, const Var& bias) {
  return add_row(mul_row(normalize_rows(a), gain), bias);
}

/// Multi-head scaled dot-product attention over row groups.
///
/// q is (Gq*Lq x D); k and v are (Gk*Lk x D) with Gk either equal to Gq
/// (group i of q attends to group i of k/v) or 1 (every q group attends to the
/// single k/v group). D is split into `heads` contiguous column blocks.
inline Var attention(const Var& q, const Var& k, const Var& v, std::size_t heads, std::size_t q_groups,
                     std::size_t kv_groups) {
  const std::size_t D = q.cols();
  if (k.cols() != D || v.cols() != D) throw ShapeError("attention: q/k/v widths differ");
  if (k.rows() != v.rows()) throw ShapeError("attention: k/v row counts differ");
  if (heads == 0 || D % heads != 0) throw ShapeError("attention: width not divisible by head count");
  if (q_groups == 0 || q.rows() % q_groups != 0) throw ShapeError("attention: q rows not divisible into groups");
  if (!(kv_groups == 1 || kv_groups == q_groups)) throw ShapeError("attention: kv groups must be 1 or q groups");
  if (k.rows() % kv_groups != 0) throw ShapeError("attention: kv rows not divisible into groups");
  const std::size_t Lq = q.rows() / q_groups, Lk = k.rows() / kv_groups, dh = D / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  const Matrix& Q = q.value();
  const Matrix& K = k.value();
  const Matrix& V = v.value();
  Matrix out(q.rows(), D, 0.0);
  // probabilities stored per (group, head, query row, key row)
  auto probs = std::make_shared<std::vector<double>>(q_groups * heads * Lq * Lk);
  for (std::size_t g = 0; g < q_groups; ++g) {
    const std::size_t kg = kv_groups == 1 ? 0 : g;
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < Lq; ++i) {
        const std::size_t qi = g * Lq + i;
        double* p = probs->data() + ((g * heads + h) * Lq + i) * Lk;
        double mx = -INFINITY;
        for (std::size_t j = 0; j < Lk; ++j) {
          const std::size_t kj = kg * Lk + j;
          double s = 0.0;
          for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) s += Q(qi, c) * K(kj, c);
          p[j] = s * inv_sqrt;
          mx = std::max(mx, p[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < Lk; ++j) z += (p[j] = std::exp(p[j] - mx));
        for (std::size_t j = 0; j < Lk; ++j) p[j] /= z;
        for (std::size_t j = 0; j < Lk; ++j) {
          const std::size_t kj = kg * Lk + j;
          for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) out(qi, c) += p[j] * V(kj, c);
        }
      }
    }
  }
  auto pq = q.node(), pk = k.node(), pv = v.node();
  return detail::make_op(
      std::move(out), {q, k, v},
      [pq, pk, pv, probs, heads, q_groups, kv_groups, Lq, Lk, dh, inv_sqrt](Node& self) {
        const Matrix& Q = pq->value;
        const Matrix& K = pk->value;
        const Matrix& V = pv->value;
        Matrix* gq = detail::sink(pq);
        Matrix* gk = detail::sink(pk);
        Matrix* gv = detail::sink(pv);
        std::vector<double> dp(Lk), ds(Lk);
        for (std::size_t g = 0; g < q_groups; ++g) {
          const std::size_t kg = kv_groups == 1 ? 0 : g;
          for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t i = 0; i < Lq; ++i) {
              const std::size_t qi = g * Lq + i;
              const double* p = probs->data() + ((g * heads + h) * Lq + i) * Lk;
              double dot = 0.0;
              for (std::size_t j = 0; j < Lk; ++j) {
                const std::size_t kj = kg * Lk + j;
                double acc = 0.0;
                for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) {
                  acc += self.grad(qi, c) * V(kj, c);
                  if (gv) (*gv)(kj, c) += p[j] * self.grad(qi, c);
                }
                dp[j] = acc;
                dot += acc * p[j];
              }
              for (std::size_t j = 0; j < Lk; ++j) ds[j] = p[j] * (dp[j] - dot) * inv_sqrt;
              for (std::size_t j = 0; j < Lk; ++j) {
                const std::size_t kj = kg * Lk + j;
                for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) {
                  if (gq) (*gq)(qi, c) += ds[j] * K(kj, c);
                  if (gk) (*gk)(kj, c) += ds[j] * Q(qi, c);
                }
              }
            }
          }
        }
      });
}

}  // namespace ad
}  // namespace mvp
