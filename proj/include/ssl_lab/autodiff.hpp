#pragma once

// Define-by-run reverse-mode differentiation over dense double matrices.
//
// An Expr is an immutable node in an acyclic graph. Input nodes are
// placeholders whose values come from a Bindings map at evaluation time, so
// the same graph can be re-evaluated at perturbed points (which is how the
// finite-difference oracle works).

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ssl_lab/error.hpp"

namespace ssl_lab {

using Matrix = Eigen::MatrixXd;

namespace autodiff {

enum class Op {
  input,
  constant,
  add,
  subtract,
  multiply,
  matmul,
  relu,
  exponential,
  logarithm,
  sum,
  mean,
  softmax_rows,
  stop_gradient,
  square,
  negate,
  broadcast,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::input: return "input";
    case Op::constant: return "constant";
    case Op::add: return "add";
    case Op::subtract: return "subtract";
    case Op::multiply: return "multiply";
    case Op::matmul: return "matmul";
    case Op::relu: return "relu";
    case Op::exponential: return "exponential";
    case Op::logarithm: return "logarithm";
    case Op::sum: return "sum";
    case Op::mean: return "mean";
    case Op::softmax_rows: return "softmax-rows";
    case Op::stop_gradient: return "stop-gradient";
    case Op::square: return "square";
    case Op::negate: return "negate";
    case Op::broadcast: return "broadcast";
  }
  return "?";
}

struct Shape {
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;

  Eigen::Index size() const { return rows * cols; }
  friend bool operator==(const Shape&, const Shape&) = default;
};

inline std::string to_string(Shape s) { return std::to_string(s.rows) + "x" + std::to_string(s.cols); }

inline Shape shape_of(const Matrix& m) { return {m.rows(), m.cols()}; }

using InputId = std::uint64_t;

/// Floor applied inside logarithm nodes.
inline constexpr double kLogFloor = 1e-12;

class Expr {
 public:
  /// Placeholder for a value supplied through Bindings.
  static Expr input(Shape shape, std::string name = {}) {
    static std::atomic<InputId> next_id{1};
    if (shape.rows <= 0 || shape.cols <= 0) throw ShapeError("input '" + name + "' has empty shape " + to_string(shape));
    auto node = std::make_shared<Node>();
    node->op = Op::input;
    node->shape = shape;
    node->id = next_id.fetch_add(1, std::memory_order_relaxed);
    node->name = std::move(name);
    return Expr(std::move(node));
  }

  static Expr constant(Matrix value) {
    auto node = std::make_shared<Node>();
    node->op = Op::constant;
    node->shape = shape_of(value);
    node->value = std::move(value);
    return Expr(std::move(node));
  }

  static Expr scalar(double v) { return constant(Matrix::Constant(1, 1, v)); }

  Op op() const { return node_->op; }
  Shape shape() const { return node_->shape; }
  InputId id() const { return node_->id; }
  const std::string& name() const { return node_->name; }
  const std::vector<Expr>& children() const { return node_->children; }
  /// Value of a constant node.
  const Matrix& constant_value() const { return node_->value; }

  bool is_scalar() const { return node_->shape == Shape{1, 1}; }

  friend Expr make_node(Op op, std::vector<Expr> children, Shape shape);

 private:
  struct Node {
    Op op = Op::constant;
    Shape shape;
    std::vector<Expr> children;
    InputId id = 0;
    std::string name;
    Matrix value;
  };

  explicit Expr(std::shared_ptr<const Node> node) : node_(std::move(node)) {}

  const Node* raw() const { return node_.get(); }

  std::shared_ptr<const Node> node_;

  friend class Tape;
};

inline Expr make_node(Op op, std::vector<Expr> children, Shape shape) {
  auto node = std::make_shared<Expr::Node>();
  node->op = op;
  node->shape = shape;
  node->children = std::move(children);
  return Expr(std::move(node));
}

// ---------------------------------------------------------------------------
// Graph construction

/// Repeats a 1x1 or 1xC expression to `target`.
inline Expr broadcast(const Expr& x, Shape target) {
  const Shape s = x.shape();
  if (s == target) return x;
  const bool scalar_ok = s == Shape{1, 1};
  const bool row_ok = s.rows == 1 && s.cols == target.cols;
  if (!scalar_ok && !row_ok) {
    throw ShapeError("cannot broadcast " + to_string(s) + " to " + to_string(target));
  }
  return make_node(Op::broadcast, {x}, target);
}

namespace detail {

inline bool broadcasts_to(Shape from, Shape to) {
  return from == to || from == Shape{1, 1} || (from.rows == 1 && from.cols == to.cols);
}

inline Expr elementwise(Op op, Expr a, Expr b) {
  const Shape sa = a.shape();
  const Shape sb = b.shape();
  if (sa != sb) {
    if (broadcasts_to(sb, sa)) {
      b = broadcast(b, sa);
    } else if (broadcasts_to(sa, sb)) {
      a = broadcast(a, sb);
    } else {
      throw ShapeError(std::string(op_name(op)) + ": incompatible shapes " + to_string(sa) + " and " + to_string(sb));
    }
  }
  const Shape out = a.shape();
  return make_node(op, {std::move(a), std::move(b)}, out);
}

}  // namespace detail

inline Expr add(const Expr& a, const Expr& b) { return detail::elementwise(Op::add, a, b); }
inline Expr subtract(const Expr& a, const Expr& b) { return detail::elementwise(Op::subtract, a, b); }
inline Expr multiply(const Expr& a, const Expr& b) { return detail::elementwise(Op::multiply, a, b); }

inline Expr matmul(const Expr& a, const Expr& b) {
  if (a.shape().cols != b.shape().rows) {
    throw ShapeError("matmul: inner dimensions differ (" + to_string(a.shape()) + " * " + to_string(b.shape()) + ")");
  }
  return make_node(Op::matmul, {a, b}, {a.shape().rows, b.shape().cols});
}

inline Expr relu(const Expr& x) { return make_node(Op::relu, {x}, x.shape()); }
inline Expr exp(const Expr& x) { return make_node(Op::exponential, {x}, x.shape()); }
/// log(max(x, kLogFloor)).
inline Expr log(const Expr& x) { return make_node(Op::logarithm, {x}, x.shape()); }
inline Expr sum(const Expr& x) { return make_node(Op::sum, {x}, {1, 1}); }
inline Expr mean(const Expr& x) { return make_node(Op::mean, {x}, {1, 1}); }
inline Expr softmax_rows(const Expr& x) { return make_node(Op::softmax_rows, {x}, x.shape()); }
inline Expr stop_gradient(const Expr& x) { return make_node(Op::stop_gradient, {x}, x.shape()); }
inline Expr square(const Expr& x) { return make_node(Op::square, {x}, x.shape()); }
inline Expr negate(const Expr& x) { return make_node(Op::negate, {x}, x.shape()); }

inline Expr scale(double factor, const Expr& x) { return multiply(x, Expr::scalar(factor)); }

inline Expr operator+(const Expr& a, const Expr& b) { return add(a, b); }
inline Expr operator-(const Expr& a, const Expr& b) { return subtract(a, b); }
inline Expr operator*(const Expr& a, const Expr& b) { return multiply(a, b); }
inline Expr operator*(double f, const Expr& x) { return scale(f, x); }
inline Expr operator-(const Expr& x) { return negate(x); }

// ---------------------------------------------------------------------------
// Bindings and gradients

class Bindings {
 public:
  void bind(const Expr& input, Matrix value) {
    if (input.op() != Op::input) throw ShapeError("only input nodes can be bound");
    values_[input.id()] = std::move(value);
  }

  const Matrix* find(InputId id) const {
    auto it = values_.find(id);
    return it == values_.end() ? nullptr : &it->second;
  }

  const Matrix& at(const Expr& input) const {
    const Matrix* m = find(input.id());
    if (m == nullptr) throw UnboundInputError("no binding for input '" + input.name() + "'");
    return *m;
  }

  Matrix& at(const Expr& input) {
    return const_cast<Matrix&>(static_cast<const Bindings&>(*this).at(input));
  }

  std::size_t size() const { return values_.size(); }

 private:
  std::unordered_map<InputId, Matrix> values_;
};

/// Partial derivatives keyed by input node.
class Gradient {
 public:
  void set(InputId id, Matrix g) { values_[id] = std::move(g); }

  const Matrix& operator[](const Expr& input) const {
    auto it = values_.find(input.id());
    if (it == values_.end()) throw UnboundInputError("gradient not requested for input '" + input.name() + "'");
    return it->second;
  }

  bool contains(const Expr& input) const { return values_.count(input.id()) != 0; }
  std::size_t size() const { return values_.size(); }

 private:
  std::unordered_map<InputId, Matrix> values_;
};

// ---------------------------------------------------------------------------
// Evaluation

/// Topologically ordered view of a graph with forward values.
class Tape {
 public:
  Tape(const Expr& root, const Bindings& bindings) {
    order(root);
    values_.resize(nodes_.size());
    for (std::size_t i = 0; i < nodes_.size(); ++i) forward(i, bindings);
  }

  const Matrix& root_value() const { return values_.back(); }

  /// Reverse accumulation from a scalar root.
  Gradient backward(std::span<const Expr> wrt) const {
    const std::size_t n = nodes_.size();
    if (nodes_.back()->shape != Shape{1, 1}) {
      throw RankError("gradient requires a scalar root, got " + to_string(nodes_.back()->shape));
    }
    // Only nodes that reach an input without passing a stop-gradient need adjoints.
    std::vector<char> live(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
      const Expr::Node* node = nodes_[i];
      if (node->op == Op::input) {
        live[i] = 1;
      } else if (node->op != Op::stop_gradient) {
        for (const Expr& c : node->children) live[i] |= live[index_.at(c.raw())];
      }
    }

    std::vector<Matrix> adjoint(n);
    adjoint[n - 1] = Matrix::Ones(1, 1);
    for (std::size_t i = n; i-- > 0;) {
      if (!live[i] || adjoint[i].size() == 0) continue;
      backward_node(i, adjoint, live);
    }

    Gradient out;
    for (const Expr& x : wrt) {
      if (x.op() != Op::input) throw ShapeError("gradient requested for a non-input node");
      auto it = index_.find(x.raw());
      if (it == index_.end() || adjoint[it->second].size() == 0) {
        out.set(x.id(), Matrix::Zero(x.shape().rows, x.shape().cols));
      } else {
        out.set(x.id(), adjoint[it->second]);
      }
    }
    return out;
  }

  /// Smallest |argument| over all relu nodes (infinity when there are none).
  double min_relu_margin() const {
    double margin = std::numeric_limits<double>::infinity();
    for (const Expr::Node* node : nodes_) {
      if (node->op != Op::relu) continue;
      const Matrix& arg = values_[index_.at(node->children[0].raw())];
      margin = std::min(margin, arg.cwiseAbs().minCoeff());
    }
    return margin;
  }

 private:
  void order(const Expr& root) {
    // Iterative post-order DFS.
    std::vector<std::pair<const Expr::Node*, std::size_t>> stack;
    stack.emplace_back(root.raw(), 0);
    std::unordered_map<const Expr::Node*, char> seen;
    seen[root.raw()] = 1;
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->children.size()) {
        const Expr::Node* child = node->children[next++].raw();
        if (!seen[child]) {
          seen[child] = 1;
          stack.emplace_back(child, 0);
        }
      } else {
        index_[node] = nodes_.size();
        nodes_.push_back(node);
        stack.pop_back();
      }
    }
  }

  const Matrix& value_of(const Expr& e) const { return values_[index_.at(e.raw())]; }

  void forward(std::size_t i, const Bindings& bindings) {
    const Expr::Node& node = *nodes_[i];
    Matrix& out = values_[i];
    auto arg = [&](std::size_t k) -> const Matrix& { return value_of(node.children[k]); };
    switch (node.op) {
      case Op::input: {
        const Matrix* bound = bindings.find(node.id);
        if (bound == nullptr) throw UnboundInputError("no binding for input '" + node.name + "'");
        if (shape_of(*bound) != node.shape) {
          throw ShapeError("binding for '" + node.name + "' has shape " + to_string(shape_of(*bound)) +
                           ", declared " + to_string(node.shape));
        }
        out = *bound;
        break;
      }
      case Op::constant: out = node.value; break;
      case Op::add: out = arg(0) + arg(1); break;
      case Op::subtract: out = arg(0) - arg(1); break;
      case Op::multiply: out = arg(0).cwiseProduct(arg(1)); break;
      case Op::matmul: out = arg(0) * arg(1); break;
      case Op::relu: out = arg(0).cwiseMax(0.0); break;
      case Op::exponential: out = arg(0).array().exp().matrix(); break;
      case Op::logarithm: out = arg(0).cwiseMax(kLogFloor).array().log().matrix(); break;
      case Op::sum: out = Matrix::Constant(1, 1, arg(0).sum()); break;
      case Op::mean: out = Matrix::Constant(1, 1, arg(0).mean()); break;
      case Op::softmax_rows: {
        const Matrix& x = arg(0);
        out.resize(x.rows(), x.cols());
        for (Eigen::Index r = 0; r < x.rows(); ++r) {
          const double m = x.row(r).maxCoeff();
          out.row(r) = (x.row(r).array() - m).exp().matrix();
          out.row(r) /= out.row(r).sum();
        }
        break;
      }
      case Op::stop_gradient: out = arg(0); break;
      case Op::square: out = arg(0).array().square().matrix(); break;
      case Op::negate: out = -arg(0); break;
      case Op::broadcast: {
        const Matrix& x = arg(0);
        if (x.rows() == 1 && x.cols() == 1) {
          out = Matrix::Constant(node.shape.rows, node.shape.cols, x(0, 0));
        } else {
          out = x.replicate(node.shape.rows, 1);
        }
        break;
      }
    }
  }

  void backward_node(std::size_t i, std::vector<Matrix>& adjoint, const std::vector<char>& live) const {
    const Expr::Node& node = *nodes_[i];
    const Matrix& g = adjoint[i];
    auto accumulate = [&](std::size_t k, const auto& contribution) {
      const std::size_t c = index_.at(node.children[k].raw());
      if (!live[c]) return;
      if (adjoint[c].size() == 0) {
        adjoint[c] = contribution;
      } else {
        adjoint[c] += contribution;
      }
    };
    auto arg = [&](std::size_t k) -> const Matrix& { return value_of(node.children[k]); };

    switch (node.op) {
      case Op::input:
      case Op::constant:
      case Op::stop_gradient:
        break;
      case Op::add:
        accumulate(0, g);
        accumulate(1, g);
        break;
      case Op::subtract:
        accumulate(0, g);
        accumulate(1, Matrix(-g));
        break;
      case Op::multiply:
        accumulate(0, Matrix(g.cwiseProduct(arg(1))));
        accumulate(1, Matrix(g.cwiseProduct(arg(0))));
        break;
      case Op::matmul:
        accumulate(0, Matrix(g * arg(1).transpose()));
        accumulate(1, Matrix(arg(0).transpose() * g));
        break;
      case Op::relu:
        accumulate(0, Matrix((arg(0).array() > 0.0).select(g.array(), 0.0).matrix()));
        break;
      case Op::exponential:
        accumulate(0, Matrix(g.cwiseProduct(values_[i])));
        break;
      case Op::logarithm:
        accumulate(0, Matrix((arg(0).array() > kLogFloor).select(g.array() / arg(0).array(), 0.0).matrix()));
        break;
      case Op::sum:
        accumulate(0, Matrix(Matrix::Constant(arg(0).rows(), arg(0).cols(), g(0, 0))));
        break;
      case Op::mean:
        accumulate(0, Matrix(Matrix::Constant(arg(0).rows(), arg(0).cols(), g(0, 0) / static_cast<double>(arg(0).size()))));
        break;
      case Op::softmax_rows: {
        const Matrix& y = values_[i];
        Matrix d(y.rows(), y.cols());
        for (Eigen::Index r = 0; r < y.rows(); ++r) {
          const double dot = g.row(r).dot(y.row(r));
          d.row(r) = y.row(r).cwiseProduct((g.row(r).array() - dot).matrix());
        }
        accumulate(0, d);
        break;
      }
      case Op::square:
        accumulate(0, Matrix(2.0 * arg(0).cwiseProduct(g)));
        break;
      case Op::negate:
        accumulate(0, Matrix(-g));
        break;
      case Op::broadcast: {
        const Matrix& x = arg(0);
        if (x.rows() == 1 && x.cols() == 1) {
          accumulate(0, Matrix(Matrix::Constant(1, 1, g.sum())));
        } else {
          accumulate(0, Matrix(g.colwise().sum()));
        }
        break;
      }
    }
  }

  std::vector<const Expr::Node*> nodes_;
  std::unordered_map<const Expr::Node*, std::size_t> index_;
  std::vector<Matrix> values_;
};

inline Matrix evaluate(const Expr& expr, const Bindings& bindings) { return Tape(expr, bindings).root_value(); }

inline double evaluate_scalar(const Expr& expr, const Bindings& bindings) {
  const Matrix v = evaluate(expr, bindings);
  if (v.size() != 1) throw RankError("expected a scalar, got " + to_string(shape_of(v)));
  return v(0, 0);
}

inline Gradient gradient(const Expr& expr, const Bindings& bindings, std::span<const Expr> wrt) {
  return Tape(expr, bindings).backward(wrt);
}

/// Forward value and gradient from a single pass.
inline std::pair<double, Gradient> value_and_gradient(const Expr& expr, const Bindings& bindings,
                                                      std::span<const Expr> wrt) {
  Tape tape(expr, bindings);
  Gradient g = tape.backward(wrt);
  return {tape.root_value()(0, 0), std::move(g)};
}

/// Central differences (f(x+h) - f(x-h)) / 2h, one coordinate at a time.
inline Gradient finite_difference_gradient(const Expr& expr, const Bindings& bindings, std::span<const Expr> wrt,
                                           double step) {
  if (!(step > 0.0)) throw ShapeError("finite-difference step must be positive");
  if (!expr.is_scalar()) throw RankError("finite differences require a scalar expression");
  Bindings probe = bindings;
  Gradient out;
  for (const Expr& x : wrt) {
    Matrix& value = probe.at(x);
    Matrix g(value.rows(), value.cols());
    for (Eigen::Index k = 0; k < value.size(); ++k) {
      const double saved = value.data()[k];
      value.data()[k] = saved + step;
      const double up = evaluate_scalar(expr, probe);
      value.data()[k] = saved - step;
      const double down = evaluate_scalar(expr, probe);
      value.data()[k] = saved;
      g.data()[k] = (up - down) / (2.0 * step);
    }
    out.set(x.id(), std::move(g));
  }
  return out;
}

/// Largest per-coordinate relative error |a-b| / max(|a|, |b|, floor).
inline double max_relative_error(const Matrix& a, const Matrix& b, double floor = 1e-6) {
  if (shape_of(a) != shape_of(b)) throw ShapeError("max_relative_error: shape mismatch");
  double worst = 0.0;
  for (Eigen::Index k = 0; k < a.size(); ++k) {
    const double x = a.data()[k];
    const double y = b.data()[k];
    const double denom = std::max({std::abs(x), std::abs(y), floor});
    worst = std::max(worst, std::abs(x - y) / denom);
  }
  return worst;
}

}  // namespace autodiff
}  // namespace ssl_lab
