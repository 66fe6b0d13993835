#pragma once

// Loss terms for the supervised baseline and the consistency, entropy and
// pseudo-label families of semi-supervised methods, plus their composition
// into one per-step training objective.
//
// Every consistency target is wrapped in stop_gradient: only the "student"
// branch receives gradient.

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ssl_lab/autodiff.hpp"
#include "ssl_lab/error.hpp"
#include "ssl_lab/model.hpp"
#include "ssl_lab/rng.hpp"

namespace ssl_lab {

enum class Method {
  supervised,
  pi_model,
  mean_teacher,
  temporal_ensembling,
  vat,
  vat_entmin,
  pseudo_label,
};

inline constexpr Method kAllMethods[] = {Method::supervised,          Method::pi_model, Method::mean_teacher,
                                         Method::temporal_ensembling, Method::vat,      Method::vat_entmin,
                                         Method::pseudo_label};

inline std::string_view method_name(Method m) {
  switch (m) {
    case Method::supervised: return "supervised";
    case Method::pi_model: return "pi-model";
    case Method::mean_teacher: return "mean-teacher";
    case Method::temporal_ensembling: return "temporal-ensembling";
    case Method::vat: return "vat";
    case Method::vat_entmin: return "vat-entmin";
    case Method::pseudo_label: return "pseudo-label";
  }
  return "?";
}

inline Method parse_method(std::string_view name) {
  for (Method m : kAllMethods) {
    if (method_name(m) == name) return m;
  }
  throw ConfigError("unknown method '" + std::string(name) + "'");
}

struct MethodConfig {
  Method method = Method::supervised;
  double max_consistency = 0.0;
  std::size_t ramp_length = 800;
  double vat_epsilon = 0.3;
  double vat_xi = 1e-6;
  double ema_decay = 0.95;
  double pseudo_threshold = 0.95;
  double entropy_multiplier = 0.0;
  /// Stochastic transform used by the consistency methods on unlabeled data.
  StochasticConfig stochastic{0.1, 0.0};

  friend bool operator==(const MethodConfig&, const MethodConfig&) = default;
};

/// Desk-scale defaults. Coefficients, EMA decay, VAT xi, the pseudo-label
/// threshold and the entropy multiplier follow the reference settings; VAT
/// epsilon is rescaled for 2-D inputs.
inline MethodConfig default_method_config(Method m) {
  MethodConfig c;
  c.method = m;
  switch (m) {
    case Method::supervised: break;
    case Method::pi_model: c.max_consistency = 20.0; break;
    case Method::mean_teacher: c.max_consistency = 8.0; break;
    case Method::temporal_ensembling:
      c.max_consistency = 20.0;
      c.ema_decay = 0.6;
      break;
    case Method::vat: c.max_consistency = 0.3; break;
    case Method::vat_entmin:
      c.max_consistency = 0.3;
      c.entropy_multiplier = 0.06;
      break;
    case Method::pseudo_label: c.max_consistency = 1.0; break;
  }
  return c;
}

inline void validate(const MethodConfig& c) {
  auto fail = [](const std::string& field, const std::string& why) { throw ConfigError(field + ": " + why); };
  if (!(c.max_consistency >= 0.0) || !std::isfinite(c.max_consistency)) fail("max_consistency", "must be >= 0");
  if (c.ramp_length < 1) fail("ramp_length", "must be >= 1");
  if (!(c.vat_epsilon > 0.0) || !std::isfinite(c.vat_epsilon)) fail("vat_epsilon", "must be > 0");
  if (!(c.vat_xi > 0.0) || !std::isfinite(c.vat_xi)) fail("vat_xi", "must be > 0");
  if (!(c.ema_decay >= 0.0 && c.ema_decay <= 1.0)) fail("ema_decay", "must lie in [0, 1]");
  if (!(c.pseudo_threshold > 0.0 && c.pseudo_threshold < 1.0)) fail("pseudo_threshold", "must lie in (0, 1)");
  if (!(c.entropy_multiplier >= 0.0) || !std::isfinite(c.entropy_multiplier)) fail("entropy_multiplier", "must be >= 0");
  validate(c.stochastic);
}

inline nlohmann::json to_json(const MethodConfig& c) {
  return {{"method", std::string(method_name(c.method))},
          {"max_consistency", c.max_consistency},
          {"ramp_length", c.ramp_length},
          {"vat_epsilon", c.vat_epsilon},
          {"vat_xi", c.vat_xi},
          {"ema_decay", c.ema_decay},
          {"pseudo_threshold", c.pseudo_threshold},
          {"entropy_multiplier", c.entropy_multiplier},
          {"input_noise_std", c.stochastic.input_noise_std},
          {"dropout_rate", c.stochastic.dropout_rate}};
}

/// Flat key/value block. Missing keys take the method's defaults; unknown keys are rejected.
inline MethodConfig method_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("method block must be an object");
  if (!j.contains("method")) throw ConfigError("method block: missing key 'method'");
  MethodConfig c = default_method_config(parse_method(j.at("method").get<std::string>()));
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "method") continue;
      else if (key == "max_consistency") c.max_consistency = value.get<double>();
      else if (key == "ramp_length") c.ramp_length = value.get<std::size_t>();
      else if (key == "vat_epsilon") c.vat_epsilon = value.get<double>();
      else if (key == "vat_xi") c.vat_xi = value.get<double>();
      else if (key == "ema_decay") c.ema_decay = value.get<double>();
      else if (key == "pseudo_threshold") c.pseudo_threshold = value.get<double>();
      else if (key == "entropy_multiplier") c.entropy_multiplier = value.get<double>();
      else if (key == "input_noise_std") c.stochastic.input_noise_std = value.get<double>();
      else if (key == "dropout_rate") c.stochastic.dropout_rate = value.get<double>();
      else throw ConfigError("method block: unknown key '" + key + "'");
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("method block: key '" + key + "' has the wrong type");
    }
  }
  validate(c);
  return c;
}

// ---------------------------------------------------------------------------
// Individual terms

namespace ad = autodiff;

inline Matrix one_hot(std::span<const int> labels, Eigen::Index classes) {
  Matrix m = Matrix::Zero(static_cast<Eigen::Index>(labels.size()), classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= classes) {
      throw LabelError("label " + std::to_string(labels[i]) + " outside [0, " + std::to_string(classes) + ")");
    }
    m(static_cast<Eigen::Index>(i), labels[i]) = 1.0;
  }
  return m;
}

/// Mean over rows of -log softmax(logits)[label].
inline Expr cross_entropy(const Expr& logits, std::span<const int> labels) {
  const Eigen::Index n = logits.shape().rows;
  if (n < 1) throw SizeError("cross_entropy: empty batch");
  if (static_cast<Eigen::Index>(labels.size()) != n) throw ShapeError("cross_entropy: label count does not match rows");
  const Expr targets = Expr::constant(one_hot(labels, logits.shape().cols));
  return scale(-1.0 / static_cast<double>(n), ad::sum(targets * ad::log(ad::softmax_rows(logits))));
}

/// Mean squared difference between student probabilities and fixed target probabilities.
inline Expr consistency_mse_to_probabilities(const Expr& student_logits, const Expr& target_probs) {
  if (student_logits.shape() != target_probs.shape()) throw ShapeError("consistency: shape mismatch");
  return ad::mean(ad::square(ad::softmax_rows(student_logits) - ad::stop_gradient(target_probs)));
}

inline Expr consistency_mse(const Expr& student_logits, const Expr& target_logits) {
  if (student_logits.shape() != target_logits.shape()) throw ShapeError("consistency_mse: shape mismatch");
  return consistency_mse_to_probabilities(student_logits, ad::softmax_rows(target_logits));
}

/// Two independent stochastic passes; the second is the target.
inline Expr pi_model_loss(const ParameterNodes& params, const Matrix& x_unlabeled, const StochasticConfig& stoch,
                          RngStream& rng) {
  Expr student = mlp_forward(params, x_unlabeled, stoch, rng);
  Expr target = mlp_forward(params, x_unlabeled, stoch, rng);
  return consistency_mse(student, ad::stop_gradient(target));
}

/// Student pass against a teacher pass with independent noise draws.
inline Expr mean_teacher_loss(const ParameterNodes& student, const ParameterNodes& teacher, const Matrix& x_unlabeled,
                              const StochasticConfig& stoch, RngStream& rng) {
  if (student.weights.size() != teacher.weights.size()) throw ShapeError("mean_teacher_loss: architecture mismatch");
  for (std::size_t i = 0; i < student.weights.size(); ++i) {
    if (student.weights[i].shape() != teacher.weights[i].shape() || student.biases[i].shape() != teacher.biases[i].shape()) {
      throw ShapeError("mean_teacher_loss: layer " + std::to_string(i) + " shape mismatch");
    }
  }
  Expr s = mlp_forward(student, x_unlabeled, stoch, rng);
  Expr t = mlp_forward(teacher, x_unlabeled, stoch, rng);
  return consistency_mse(s, ad::stop_gradient(t));
}

// ---------------------------------------------------------------------------
// Temporal ensembling

struct EnsembleState {
  Matrix accumulated;  // raw moving average, one row per unlabeled example
  Matrix corrected;    // accumulated / (1 - decay^step_count)
  double decay = 0.6;
  std::size_t step_count = 0;
};

inline EnsembleState make_ensemble_state(Eigen::Index rows, Eigen::Index classes, double decay) {
  return {Matrix::Zero(rows, classes), Matrix::Zero(rows, classes), decay, 0};
}

/// Accumulates new outputs and returns bias-corrected targets
/// accumulated' / (1 - decay^(step+1)).
///
/// The corrected average is advanced as T' = T + a (Z - T) with
/// a = (1 - decay) / (1 - decay^(step+1)), which equals the quotient above but
/// returns Z exactly on the first step and for constant outputs.
inline std::pair<EnsembleState, Matrix> temporal_ensemble_targets(const EnsembleState& state, const Matrix& new_outputs,
                                                                  double decay) {
  if (ad::shape_of(new_outputs) != ad::shape_of(state.accumulated) ||
      ad::shape_of(state.corrected) != ad::shape_of(state.accumulated)) {
    throw ShapeError("temporal_ensemble_targets: outputs " + ad::to_string(ad::shape_of(new_outputs)) +
                     " vs state " + ad::to_string(ad::shape_of(state.accumulated)));
  }
  if (!(decay >= 0.0 && decay < 1.0)) throw ConfigError("temporal ensembling decay must lie in [0, 1)");
  EnsembleState next;
  next.decay = decay;
  next.step_count = state.step_count + 1;
  next.accumulated = decay * state.accumulated + (1.0 - decay) * new_outputs;
  const double rate = (1.0 - decay) / (1.0 - std::pow(decay, static_cast<double>(next.step_count)));
  next.corrected = rate == 1.0 ? new_outputs : Matrix(state.corrected + rate * (new_outputs - state.corrected));
  Matrix targets = next.corrected;
  return {std::move(next), std::move(targets)};
}

// ---------------------------------------------------------------------------
// Virtual adversarial training

/// Mean over rows of KL(target || softmax(logits)); the target is held fixed.
inline Expr kl_to_fixed_target(const Expr& target_probs, const Expr& logits) {
  const Expr p = ad::stop_gradient(target_probs);
  const double n = static_cast<double>(logits.shape().rows);
  return scale(1.0 / n, ad::sum(p * (ad::log(p) - ad::log(ad::softmax_rows(logits)))));
}

struct VatPerturbation {
  Matrix r_adv;
  std::vector<bool> degenerate;  // rows whose gradient vanished

  bool any_degenerate() const {
    for (bool d : degenerate) {
      if (d) return true;
    }
    return false;
  }
};

/// Rescales each row of g to L2 norm epsilon; zero rows stay zero and are flagged.
inline VatPerturbation normalize_rows(const Matrix& g, double epsilon) {
  VatPerturbation out{Matrix::Zero(g.rows(), g.cols()), std::vector<bool>(static_cast<std::size_t>(g.rows()), false)};
  for (Eigen::Index r = 0; r < g.rows(); ++r) {
    const double norm = g.row(r).norm();
    if (norm == 0.0 || !std::isfinite(norm)) {
      out.degenerate[static_cast<std::size_t>(r)] = true;
      continue;
    }
    out.r_adv.row(r) = (epsilon / norm) * g.row(r);
  }
  return out;
}

/// One gradient step from a random draw r ~ N(0, (xi/sqrt(d))^2 I):
/// g = grad_r KL(f(x) || f(x + r)), r_adv = epsilon * g / ||g|| per row.
inline VatPerturbation vat_perturbation(const ParameterSet& params, const Matrix& x, double epsilon, double xi,
                                        RngStream& rng) {
  if (!(epsilon > 0.0) || !(xi > 0.0)) throw ConfigError("vat_perturbation: epsilon and xi must be positive");
  const double stddev = xi / std::sqrt(static_cast<double>(x.cols()));
  Matrix r0(x.rows(), x.cols());
  for (Eigen::Index k = 0; k < r0.size(); ++k) r0.data()[k] = rng.normal(0.0, stddev);

  const ParameterNodes frozen = constant_parameters(params);
  const Expr r = Expr::input(ad::shape_of(r0), "vat/r");
  ad::Bindings bindings;
  bindings.bind(r, r0);
  RngStream unused(0);
  const Expr xc = Expr::constant(x);
  const Expr clean = ad::softmax_rows(mlp_forward(frozen, xc, StochasticConfig{}, unused));
  const Expr perturbed = mlp_forward(frozen, xc + r, StochasticConfig{}, unused);
  // Summed (not averaged) so each row's gradient does not shrink with batch size.
  const Expr divergence = scale(static_cast<double>(x.rows()), kl_to_fixed_target(clean, perturbed));
  const Expr wrt[] = {r};
  const ad::Gradient g = ad::gradient(divergence, bindings, wrt);
  return normalize_rows(g[r], epsilon);
}

/// KL between the clean prediction and the prediction at x + perturbation.
/// Both the clean branch and the perturbation carry no gradient.
inline Expr vat_consistency(const ParameterNodes& params, const Matrix& x, const Expr& perturbation) {
  RngStream unused(0);
  const Expr xc = Expr::constant(x);
  const Expr clean = ad::softmax_rows(mlp_forward(params, xc, StochasticConfig{}, unused));
  const Expr adversarial = mlp_forward(params, xc + ad::stop_gradient(perturbation), StochasticConfig{}, unused);
  return kl_to_fixed_target(clean, adversarial);
}

inline Expr vat_loss(const ParameterNodes& params, const ParameterSet& values, const Matrix& x_unlabeled,
                     const MethodConfig& config, RngStream& rng) {
  const VatPerturbation r = vat_perturbation(values, x_unlabeled, config.vat_epsilon, config.vat_xi, rng);
  return vat_consistency(params, x_unlabeled, Expr::constant(r.r_adv));
}

// ---------------------------------------------------------------------------
// Entropy minimization and pseudo-labeling

/// Mean over rows of -sum_k p_k log p_k.
inline Expr entropy_loss(const Expr& logits) {
  const Eigen::Index n = logits.shape().rows;
  if (n < 1) throw SizeError("entropy_loss: empty batch");
  const Expr p = ad::softmax_rows(logits);
  return scale(-1.0 / static_cast<double>(n), ad::sum(p * ad::log(p)));
}

/// One-hot argmax rows where max probability exceeds the threshold, zero rows elsewhere.
inline Matrix pseudo_label_mask(const Matrix& logits_value, double threshold) {
  const Matrix p = softmax(logits_value);
  const std::vector<int> best = argmax_rows(p);
  Matrix mask = Matrix::Zero(p.rows(), p.cols());
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    const int k = best[static_cast<std::size_t>(r)];
    if (p(r, k) > threshold) mask(r, k) = 1.0;
  }
  return mask;
}

/// Cross-entropy against masked pseudo-labels, normalized by the full batch size.
inline Expr pseudo_label_loss_masked(const Expr& logits, const Expr& mask) {
  if (logits.shape() != mask.shape()) throw ShapeError("pseudo_label_loss: mask shape mismatch");
  const double n = static_cast<double>(logits.shape().rows);
  return scale(-1.0 / n, ad::sum(ad::stop_gradient(mask) * ad::log(ad::softmax_rows(logits))));
}

inline Expr pseudo_label_loss(const Expr& logits, const ad::Bindings& bindings, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("pseudo-label threshold must lie in (0, 1)");
  const Matrix mask = pseudo_label_mask(ad::evaluate(logits, bindings), threshold);
  return pseudo_label_loss_masked(logits, Expr::constant(mask));
}

// ---------------------------------------------------------------------------
// Ramp-up and composition

/// max_coefficient * exp(-5 (1 - t)^2), t = min(step / ramp_length, 1).
inline double ramp_weight(std::size_t step, std::size_t ramp_length, double max_coefficient) {
  if (ramp_length < 1) throw ConfigError("ramp_length must be >= 1");
  if (step >= ramp_length) return max_coefficient;
  const double t = static_cast<double>(step) / static_cast<double>(ramp_length);
  return max_coefficient * std::exp(-5.0 * (1.0 - t) * (1.0 - t));
}

struct LabeledBatch {
  Matrix x;
  std::vector<int> labels;
};

/// Per-run state some methods need when composing the loss.
struct MethodState {
  const ParameterSet* teacher = nullptr;       // mean teacher
  const Matrix* ensemble_targets = nullptr;    // temporal ensembling rows for this batch
};

struct LossGraph {
  Expr total;
  Expr supervised;
  std::optional<Expr> unlabeled_term;     // unweighted method loss
  std::optional<Expr> entropy_term;       // unweighted, vat-entmin only
  std::optional<Expr> unlabeled_logits;   // student pass on the unlabeled batch
  double weight = 0.0;
};

/// cross_entropy(labeled) + ramp_weight(step) * method_loss(unlabeled)
/// [+ entropy_multiplier * entropy(unlabeled) for vat-entmin].
inline LossGraph total_loss(const MethodConfig& config, const ParameterSet& values, const ParameterNodes& student,
                            const ad::Bindings& bindings, const MethodState& state, const LabeledBatch& labeled,
                            const Matrix& unlabeled, std::size_t step, RngStream& rng) {
  RngStream deterministic(0);
  const Expr labeled_logits = mlp_forward(student, labeled.x, StochasticConfig{}, deterministic);
  const Expr supervised = cross_entropy(labeled_logits, labeled.labels);
  LossGraph out{supervised, supervised, std::nullopt, std::nullopt, std::nullopt, 0.0};
  if (config.method == Method::supervised || unlabeled.rows() == 0) return out;

  out.weight = ramp_weight(step, config.ramp_length, config.max_consistency);
  std::optional<Expr> term;
  switch (config.method) {
    case Method::supervised: break;
    case Method::pi_model:
      term = pi_model_loss(student, unlabeled, config.stochastic, rng);
      break;
    case Method::mean_teacher: {
      if (state.teacher == nullptr) throw ConfigError("mean-teacher loss needs a teacher");
      term = mean_teacher_loss(student, constant_parameters(*state.teacher), unlabeled, config.stochastic, rng);
      break;
    }
    case Method::temporal_ensembling: {
      Expr logits = mlp_forward(student, unlabeled, config.stochastic, rng);
      out.unlabeled_logits = logits;
      if (state.ensemble_targets != nullptr) {
        term = consistency_mse_to_probabilities(logits, Expr::constant(*state.ensemble_targets));
      }
      break;
    }
    case Method::vat:
    case Method::vat_entmin:
      term = vat_loss(student, values, unlabeled, config, rng);
      break;
    case Method::pseudo_label: {
      Expr logits = mlp_forward(student, unlabeled, StochasticConfig{}, deterministic);
      out.unlabeled_logits = logits;
      term = pseudo_label_loss(logits, bindings, config.pseudo_threshold);
      break;
    }
  }
  if (term) {
    out.unlabeled_term = *term;
    out.total = out.total + scale(out.weight, *term);
  }
  if (config.method == Method::vat_entmin) {
    Expr logits = mlp_forward(student, unlabeled, StochasticConfig{}, deterministic);
    out.entropy_term = entropy_loss(logits);
    out.total = out.total + scale(config.entropy_multiplier, *out.entropy_term);
  }
  return out;
}

}  // namespace ssl_lab
