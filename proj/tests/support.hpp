#pragma once

// Shared helpers for the unit suites and the acceptance binary: random
// instances of every loss and a finite-difference gradient oracle.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "ssl_lab/autodiff.hpp"
#include "ssl_lab/losses.hpp"
#include "ssl_lab/model.hpp"
#include "ssl_lab/rng.hpp"

namespace ssl_lab::testing {

namespace ad = autodiff;
using ad::Expr;

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, RngStream& rng, double lo = -2.0, double hi = 2.0) {
  Matrix m(rows, cols);
  for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = rng.uniform(lo, hi);
  return m;
}

/// Parameter set with every weight and bias drawn uniformly, so relu
/// arguments are generic and biases are exercised.
inline ParameterSet random_parameters(const std::vector<std::size_t>& sizes, RngStream& rng, double scale = 1.0) {
  ParameterSet p = mlp_init(sizes, 0);
  for (Layer& l : p.layers) {
    l.weights = random_matrix(l.weights.rows(), l.weights.cols(), rng, -scale, scale);
    l.bias = random_matrix(1, l.bias.cols(), rng, -scale, scale);
  }
  return p;
}

/// Rebuilds `expr` with every stop-gradient subgraph replaced by a constant
/// holding its current value. Finite differences of the result measure the
/// gradient with targets held fixed, which is what stop-gradient promises.
class Freezer {
 public:
  explicit Freezer(const ad::Bindings& b) : bindings_(b) {}

  Expr operator()(const Expr& e) { return rebuild(e); }

 private:
  Expr rebuild(const Expr& e) {
    using ad::Op;
    auto it = memo_.find(node_key(e));
    if (it != memo_.end()) return it->second;
    Expr out = e;
    const auto& c = e.children();
    switch (e.op()) {
      case Op::input:
      case Op::constant: out = e; break;
      case Op::stop_gradient: out = Expr::constant(ad::evaluate(c[0], bindings_)); break;
      case Op::add: out = ad::add(rebuild(c[0]), rebuild(c[1])); break;
      case Op::subtract: out = ad::subtract(rebuild(c[0]), rebuild(c[1])); break;
      case Op::multiply: out = ad::multiply(rebuild(c[0]), rebuild(c[1])); break;
      case Op::matmul: out = ad::matmul(rebuild(c[0]), rebuild(c[1])); break;
      case Op::relu: out = ad::relu(rebuild(c[0])); break;
      case Op::exponential: out = ad::exp(rebuild(c[0])); break;
      case Op::logarithm: out = ad::log(rebuild(c[0])); break;
      case Op::sum: out = ad::sum(rebuild(c[0])); break;
      case Op::mean: out = ad::mean(rebuild(c[0])); break;
      case Op::softmax_rows: out = ad::softmax_rows(rebuild(c[0])); break;
      case Op::square: out = ad::square(rebuild(c[0])); break;
      case Op::negate: out = ad::negate(rebuild(c[0])); break;
      case Op::broadcast: out = ad::broadcast(rebuild(c[0]), e.shape()); break;
    }
    memo_.emplace(node_key(e), out);
    return out;
  }

  // The children vector lives inside the shared node, so its address identifies the node.
  static const void* node_key(const Expr& e) { return &e.children(); }

  const ad::Bindings& bindings_;
  std::unordered_map<const void*, Expr> memo_;
};

inline Expr freeze_stop_gradients(const Expr& e, const ad::Bindings& b) { return Freezer(b)(e); }

struct GradientCheck {
  double max_error = 0.0;
  double relu_margin = 0.0;
};

/// Reverse-mode gradient of `loss` against central differences (step 1e-5)
/// of the frozen loss, over all `wrt` inputs. Central differences carry
/// rounding noise near eps * |f| / h, so the relative-error floor is
/// 1e-6 * max(1, |f|) rather than a bare 1e-6.
inline GradientCheck check_gradient(const Expr& loss, const ad::Bindings& b, const std::vector<Expr>& wrt,
                                    double step = 1e-5) {
  const ad::Tape tape(loss, b);
  const ad::Gradient g = tape.backward(wrt);
  const ad::Gradient fd = ad::finite_difference_gradient(freeze_stop_gradients(loss, b), b, wrt, step);
  GradientCheck out{0.0, tape.min_relu_margin()};
  const double floor = 1e-6 * std::max(1.0, std::abs(tape.root_value()(0, 0)));
  for (const Expr& x : wrt) out.max_error = std::max(out.max_error, ad::max_relative_error(g[x], fd[x], floor));
  return out;
}

// ---------------------------------------------------------------------------
// Random loss instances

enum class LossKind { cross_entropy, pi_model, mean_teacher, temporal_ensembling, vat, entropy, pseudo_label, total };

inline constexpr LossKind kAllLossKinds[] = {LossKind::cross_entropy, LossKind::pi_model,    LossKind::mean_teacher,
                                             LossKind::temporal_ensembling, LossKind::vat, LossKind::entropy,
                                             LossKind::pseudo_label, LossKind::total};

inline std::string loss_kind_name(LossKind k) {
  switch (k) {
    case LossKind::cross_entropy: return "cross-entropy";
    case LossKind::pi_model: return "pi-model";
    case LossKind::mean_teacher: return "mean-teacher";
    case LossKind::temporal_ensembling: return "temporal-ensembling";
    case LossKind::vat: return "vat";
    case LossKind::entropy: return "entropy";
    case LossKind::pseudo_label: return "pseudo-label";
    case LossKind::total: return "total";
  }
  return "?";
}

struct LossInstance {
  Expr loss;
  ad::Bindings bindings;
  std::vector<Expr> wrt;           // student parameters
  std::vector<Expr> blocked;       // inputs reachable only through a stop-gradient
};

inline std::vector<int> random_labels(Eigen::Index n, int classes, RngStream& rng) {
  std::vector<int> y(static_cast<std::size_t>(n));
  for (int& v : y) v = static_cast<int>(rng.index(static_cast<std::size_t>(classes)));
  return y;
}

/// A small random MLP (2 -> h -> h -> K) and batch, with the named loss built
/// on top. Targets that the loss must not differentiate through (teacher
/// parameters, ensemble targets, pseudo-label mask, VAT perturbation) are
/// bound as inputs and listed in `blocked` wherever the loss API allows it.
inline LossInstance make_loss_instance(LossKind kind, std::uint64_t seed) {
  RngStream rng(seed);
  const auto h = static_cast<std::size_t>(3 + rng.index(3));
  const int k = 2 + static_cast<int>(rng.index(2));
  const Eigen::Index n = 3 + static_cast<Eigen::Index>(rng.index(4));
  const std::vector<std::size_t> sizes{2, h, h, static_cast<std::size_t>(k)};

  LossInstance inst{Expr::scalar(0.0), {}, {}, {}};
  const ParameterSet values = random_parameters(sizes, rng);
  const ParameterNodes student = bind_parameters(values, inst.bindings, "student");
  inst.wrt = student.all();
  const Matrix x = random_matrix(n, 2, rng);
  const StochasticConfig stoch{0.1, 0.2};
  RngStream method_rng = rng.derive("method");
  RngStream plain(0);

  switch (kind) {
    case LossKind::cross_entropy: {
      const Expr logits = mlp_forward(student, x, StochasticConfig{}, plain);
      inst.loss = cross_entropy(logits, random_labels(n, k, rng));
      break;
    }
    case LossKind::pi_model:
      inst.loss = pi_model_loss(student, x, stoch, method_rng);
      break;
    case LossKind::mean_teacher: {
      const ParameterSet teacher_values = random_parameters(sizes, rng);
      const ParameterNodes teacher = bind_parameters(teacher_values, inst.bindings, "teacher");
      inst.blocked = teacher.all();
      inst.loss = mean_teacher_loss(student, teacher, x, stoch, method_rng);
      break;
    }
    case LossKind::temporal_ensembling: {
      const Expr targets = Expr::input({n, k}, "targets");
      inst.bindings.bind(targets, softmax(random_matrix(n, k, rng)));
      inst.blocked = {targets};
      inst.loss = consistency_mse_to_probabilities(mlp_forward(student, x, stoch, method_rng), targets);
      break;
    }
    case LossKind::vat: {
      const VatPerturbation r = vat_perturbation(values, x, 0.3, 1e-6, method_rng);
      const Expr perturbation = Expr::input({n, 2}, "r_adv");
      inst.bindings.bind(perturbation, r.r_adv);
      inst.blocked = {perturbation};
      inst.loss = vat_consistency(student, x, perturbation);
      break;
    }
    case LossKind::entropy:
      inst.loss = entropy_loss(mlp_forward(student, x, StochasticConfig{}, plain));
      break;
    case LossKind::pseudo_label: {
      const Expr logits = mlp_forward(student, x, StochasticConfig{}, plain);
      const Matrix lv = ad::evaluate(logits, inst.bindings);
      const Matrix p = softmax(lv);
      // Threshold below the median row confidence so some rows pass.
      std::vector<double> best(static_cast<std::size_t>(n));
      for (Eigen::Index r = 0; r < n; ++r) best[static_cast<std::size_t>(r)] = p.row(r).maxCoeff();
      std::sort(best.begin(), best.end());
      const double threshold = std::clamp(best[best.size() / 2] - 1e-9, 1e-6, 1.0 - 1e-6);
      const Expr mask = Expr::input({n, k}, "mask");
      inst.bindings.bind(mask, pseudo_label_mask(lv, threshold));
      inst.blocked = {mask};
      inst.loss = pseudo_label_loss_masked(logits, mask);
      break;
    }
    case LossKind::total: {
      const Method methods[] = {Method::pi_model, Method::mean_teacher, Method::temporal_ensembling,
                                Method::vat,      Method::vat_entmin,   Method::pseudo_label};
      MethodConfig config = default_method_config(methods[rng.index(std::size(methods))]);
      config.stochastic = stoch;
      config.pseudo_threshold = 0.5;
      const ParameterSet teacher = random_parameters(sizes, rng);
      const Eigen::Index m = 2 + static_cast<Eigen::Index>(rng.index(4));
      const Matrix u = random_matrix(m, 2, rng);
      const Matrix targets = softmax(random_matrix(m, k, rng));
      const MethodState state{&teacher, &targets};
      const LabeledBatch labeled{x, random_labels(n, k, rng)};
      const std::size_t step = rng.index(config.ramp_length + 50);
      inst.loss = total_loss(config, values, student, inst.bindings, state, labeled, u, step, method_rng).total;
      break;
    }
  }
  return inst;
}

// ---------------------------------------------------------------------------
// VAT against random perturbations

/// Mean-over-rows KL(f(x) || f(x + r)) for a fixed perturbation r.
inline double vat_divergence(const ParameterSet& p, const Matrix& x, const Matrix& r) {
  return ad::evaluate_scalar(vat_consistency(constant_parameters(p), x, Expr::constant(r)), ad::Bindings{});
}

inline Matrix random_directions(Eigen::Index rows, Eigen::Index cols, double norm, RngStream& rng) {
  Matrix r(rows, cols);
  for (Eigen::Index k = 0; k < r.size(); ++k) r.data()[k] = rng.normal();
  for (Eigen::Index i = 0; i < rows; ++i) r.row(i) *= norm / r.row(i).norm();
  return r;
}

/// One seeded trial on a random linear 2-class model over a batch of 2-D
/// points: true when the VAT divergence is at least the divergence of each of
/// `draws` random perturbations with the same per-row norm.
inline bool vat_beats_random(std::uint64_t seed, double epsilon, int draws = 100, Eigen::Index batch = 16) {
  RngStream rng(seed);
  const ParameterSet p = random_parameters({2, 2}, rng, 2.0);
  const Matrix x = random_matrix(batch, 2, rng);
  RngStream vat_rng = rng.derive("vat");
  const VatPerturbation r = vat_perturbation(p, x, epsilon, 1e-6, vat_rng);
  const double adversarial = vat_divergence(p, x, r.r_adv);
  for (int j = 0; j < draws; ++j) {
    if (vat_divergence(p, x, random_directions(batch, 2, epsilon, rng)) > adversarial) return false;
  }
  return true;
}

}  // namespace ssl_lab::testing
