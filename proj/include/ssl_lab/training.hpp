#pragma once

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ssl_lab/autodiff.hpp"
#include "ssl_lab/datasets.hpp"
#include "ssl_lab/error.hpp"
#include "ssl_lab/losses.hpp"
#include "ssl_lab/model.hpp"
#include "ssl_lab/rng.hpp"

namespace ssl_lab {

// ---------------------------------------------------------------------------
// Adam

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps_hat = 1e-8;
};

struct OptimizerState {
  ParameterSet first_moment;
  ParameterSet second_moment;
  std::size_t step = 0;
};

inline OptimizerState make_optimizer_state(const ParameterSet& params) {
  return {zeros_like(params), zeros_like(params), 0};
}

/// Bias-corrected Adam update.
inline std::pair<ParameterSet, OptimizerState> adam_step(const ParameterSet& params, const ParameterSet& grads,
                                                         const OptimizerState& state, double lr,
                                                         const AdamHyper& hyper = {}) {
  require_same_shape(params, grads);
  require_same_shape(params, state.first_moment);
  require_same_shape(params, state.second_moment);
  ParameterSet next = params;
  OptimizerState s = state;
  s.step += 1;
  const double t = static_cast<double>(s.step);
  const double c1 = 1.0 - std::pow(hyper.beta1, t);
  const double c2 = 1.0 - std::pow(hyper.beta2, t);
  auto update = [&](Matrix& p, Matrix& m, Matrix& v, const Matrix& g) {
    if (autodiff::shape_of(p) != autodiff::shape_of(g)) throw ShapeError("adam_step: gradient shape mismatch");
    m = hyper.beta1 * m + (1.0 - hyper.beta1) * g;
    v = hyper.beta2 * v + (1.0 - hyper.beta2) * g.cwiseProduct(g);
    p.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + hyper.eps_hat);
  };
  for (std::size_t i = 0; i < next.layers.size(); ++i) {
    update(next.layers[i].weights, s.first_moment.layers[i].weights, s.second_moment.layers[i].weights,
           grads.layers[i].weights);
    update(next.layers[i].bias, s.first_moment.layers[i].bias, s.second_moment.layers[i].bias, grads.layers[i].bias);
  }
  return {std::move(next), std::move(s)};
}

// ---------------------------------------------------------------------------
// Configuration

struct TrainConfig {
  std::size_t total_steps = 2000;
  std::size_t batch_labeled = 32;  // capped at the labeled-set size
  std::size_t batch_unlabeled = 64;
  double initial_lr = 0.003;
  double lr_decay_factor = 0.2;
  std::size_t lr_decay_step = 1600;
  std::size_t eval_every = 50;
  double l1 = 0.0;
  double l2 = 0.0;
  std::vector<std::size_t> hidden_layers{10, 10, 10};

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

inline void validate(const TrainConfig& c) {
  if (c.total_steps < 1) throw ConfigError("total_steps must be >= 1");
  if (c.batch_labeled < 1 || c.batch_unlabeled < 1) throw ConfigError("batch sizes must be >= 1");
  if (!(c.initial_lr > 0.0) || !std::isfinite(c.initial_lr)) throw ConfigError("initial_lr must be > 0");
  if (!(c.lr_decay_factor > 0.0) || !std::isfinite(c.lr_decay_factor)) throw ConfigError("lr_decay_factor must be > 0");
  if (c.eval_every < 1) throw ConfigError("eval_every must be >= 1");
  if (!(c.l1 >= 0.0) || !(c.l2 >= 0.0)) throw ConfigError("weight penalties must be >= 0");
  for (std::size_t h : c.hidden_layers) {
    if (h == 0) throw ConfigError("hidden layer widths must be positive");
  }
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"total_steps", c.total_steps},   {"batch_labeled", c.batch_labeled},
          {"batch_unlabeled", c.batch_unlabeled}, {"initial_lr", c.initial_lr},
          {"lr_decay_factor", c.lr_decay_factor}, {"lr_decay_step", c.lr_decay_step},
          {"eval_every", c.eval_every},     {"l1", c.l1},
          {"l2", c.l2},                     {"hidden_layers", c.hidden_layers}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("train block must be an object");
  TrainConfig c;
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "total_steps") c.total_steps = value.get<std::size_t>();
      else if (key == "batch_labeled") c.batch_labeled = value.get<std::size_t>();
      else if (key == "batch_unlabeled") c.batch_unlabeled = value.get<std::size_t>();
      else if (key == "initial_lr") c.initial_lr = value.get<double>();
      else if (key == "lr_decay_factor") c.lr_decay_factor = value.get<double>();
      else if (key == "lr_decay_step") c.lr_decay_step = value.get<std::size_t>();
      else if (key == "eval_every") c.eval_every = value.get<std::size_t>();
      else if (key == "l1") c.l1 = value.get<double>();
      else if (key == "l2") c.l2 = value.get<double>();
      else if (key == "hidden_layers") c.hidden_layers = value.get<std::vector<std::size_t>>();
      else throw ConfigError("train block: unknown key '" + key + "'");
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("train block: key '" + key + "' has the wrong type");
    }
  }
  validate(c);
  return c;
}

/// Step learning rate: initial before lr_decay_step, initial * factor from it on.
inline double lr_at(std::size_t step, const TrainConfig& c) {
  return step < c.lr_decay_step ? c.initial_lr : c.initial_lr * c.lr_decay_factor;
}

// ---------------------------------------------------------------------------
// Evaluation helpers

inline double error_rate(const ParameterSet& p, const Matrix& x, const std::vector<int>& labels) {
  if (labels.empty()) return std::numeric_limits<double>::quiet_NaN();
  const std::vector<int> pred = argmax_rows(predict_logits(p, x));
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) wrong += pred[i] != labels[i];
  return static_cast<double>(wrong) / static_cast<double>(labels.size());
}

inline double error_rate(const ParameterSet& p, const Dataset& d) { return error_rate(p, d.points, d.labels); }

/// Regular g x g lattice over a rectangle; rows run over x fastest.
struct EvaluationGrid {
  double x_min = -1.5;
  double x_max = 2.5;
  double y_min = -1.0;
  double y_max = 1.5;
  std::size_t resolution = 50;

  friend bool operator==(const EvaluationGrid&, const EvaluationGrid&) = default;
};

inline Matrix grid_points(const EvaluationGrid& g) {
  if (g.resolution < 2) throw ConfigError("grid resolution must be >= 2");
  const auto n = static_cast<Eigen::Index>(g.resolution);
  Matrix pts(n * n, 2);
  for (Eigen::Index j = 0; j < n; ++j) {
    const double y = g.y_min + (g.y_max - g.y_min) * static_cast<double>(j) / static_cast<double>(n - 1);
    for (Eigen::Index i = 0; i < n; ++i) {
      pts(j * n + i, 0) = g.x_min + (g.x_max - g.x_min) * static_cast<double>(i) / static_cast<double>(n - 1);
      pts(j * n + i, 1) = y;
    }
  }
  return pts;
}

/// Mean over points of the largest class probability.
inline double mean_confidence(const ParameterSet& p, const Matrix& points) {
  return predict_proba(p, points).rowwise().maxCoeff().mean();
}

// ---------------------------------------------------------------------------
// Run records

struct TracePoint {
  std::size_t step = 0;
  double train_loss = 0.0;
  double val_error = 0.0;
  double test_error = 0.0;
  std::optional<double> unlabeled_error;

  friend bool operator==(const TracePoint&, const TracePoint&) = default;
};

struct ConfidencePoint {
  std::size_t step = 0;
  double confidence = 0.0;

  friend bool operator==(const ConfidencePoint&, const ConfidencePoint&) = default;
};

struct Selection {
  std::size_t step = 0;
  double val_error = 0.0;
  double test_error = 0.0;
  std::optional<double> unlabeled_error;

  friend bool operator==(const Selection&, const Selection&) = default;
};

struct RunRecord {
  std::uint64_t seed = 0;
  MethodConfig method;
  TrainConfig train;
  std::vector<TracePoint> trace;
  Selection selected;
  std::vector<ConfidencePoint> confidence;  // only filled by confidence_trace
  ParameterSet selected_parameters;         // checkpoint at the selected step
  ParameterSet final_parameters;

  friend bool operator==(const RunRecord&, const RunRecord&) = default;
};

/// Earliest trace entry with the lowest validation error.
inline Selection select_lowest_validation(const std::vector<TracePoint>& trace) {
  if (trace.empty()) throw SizeError("select_lowest_validation: empty trace");
  std::size_t best = 0;
  for (std::size_t i = 1; i < trace.size(); ++i) {
    if (trace[i].val_error < trace[best].val_error) best = i;
  }
  const TracePoint& t = trace[best];
  return {t.step, t.val_error, t.test_error, t.unlabeled_error};
}

inline nlohmann::json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

inline nlohmann::json to_json(const RunRecord& r) {
  nlohmann::json trace = nlohmann::json::array();
  for (const TracePoint& t : r.trace) {
    trace.push_back({{"step", t.step},
                     {"train_loss", t.train_loss},
                     {"val_error", t.val_error},
                     {"test_error", t.test_error},
                     {"unlabeled_error", optional_json(t.unlabeled_error)}});
  }
  nlohmann::json j = {{"seed", r.seed},
                      {"method", std::string(method_name(r.method.method))},
                      {"config", {{"method", to_json(r.method)}, {"train", to_json(r.train)}}},
                      {"trace", std::move(trace)},
                      {"selected",
                       {{"step", r.selected.step},
                        {"val_error", r.selected.val_error},
                        {"test_error", r.selected.test_error},
                        {"unlabeled_error", optional_json(r.selected.unlabeled_error)}}}};
  if (!r.confidence.empty()) {
    nlohmann::json conf = nlohmann::json::array();
    for (const ConfidencePoint& c : r.confidence) conf.push_back({{"step", c.step}, {"confidence", c.confidence}});
    j["confidence"] = std::move(conf);
  }
  return j;
}

// ---------------------------------------------------------------------------
// Training loop

/// Walks shuffled permutations of [0, n); reshuffles when one is exhausted.
class CycleSampler {
 public:
  CycleSampler(std::size_t n, RngStream rng) : order_(n), rng_(std::move(rng)) {
    for (std::size_t i = 0; i < n; ++i) order_[i] = i;
    reshuffle();
  }

  std::vector<std::size_t> next(std::size_t count) {
    std::vector<std::size_t> out;
    out.reserve(count);
    while (out.size() < count) {
      if (pos_ == order_.size()) {
        reshuffle();
        ++cycles_;
      }
      out.push_back(order_[pos_++]);
    }
    return out;
  }

  std::size_t cycles_completed() const { return cycles_; }

 private:
  void reshuffle() {
    pos_ = 0;
    for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng_.index(i)]);
  }

  std::vector<std::size_t> order_;
  RngStream rng_;
  std::size_t pos_ = 0;
  std::size_t cycles_ = 0;
};

inline Matrix gather_rows(const Matrix& m, const std::vector<std::size_t>& idx) {
  Matrix out(static_cast<Eigen::Index>(idx.size()), m.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(idx[i]));
  return out;
}

/// l1 * sum|W| + l2 * sum W^2 over weight matrices (biases are not penalized).
/// |W| is expressed as W * sign(W) with sign(0) = 0, giving the L1 subgradient.
inline std::optional<Expr> weight_penalty(const ParameterNodes& nodes, const ParameterSet& values, double l1, double l2) {
  std::optional<Expr> total;
  auto accumulate = [&](Expr term) { total = total ? *total + term : term; };
  for (std::size_t i = 0; i < nodes.weights.size(); ++i) {
    const Matrix& w = values.layers[i].weights;
    if (l1 > 0.0) {
      const Matrix sign = w.unaryExpr([](double v) { return static_cast<double>((v > 0.0) - (v < 0.0)); });
      accumulate(scale(l1, autodiff::sum(nodes.weights[i] * Expr::constant(sign))));
    }
    if (l2 > 0.0) accumulate(scale(l2, autodiff::sum(autodiff::square(nodes.weights[i]))));
  }
  return total;
}

namespace detail {

inline RunRecord run_training(const SslSplit& split, const MethodConfig& method, const TrainConfig& tconf,
                              std::uint64_t seed, const Matrix* confidence_points) {
  validate(method);
  validate(tconf);
  if (split.labeled.size() == 0) throw SizeError("train: labeled set is empty");

  const RngStream root(seed);
  std::vector<std::size_t> sizes{static_cast<std::size_t>(split.labeled.points.cols())};
  sizes.insert(sizes.end(), tconf.hidden_layers.begin(), tconf.hidden_layers.end());
  sizes.push_back(static_cast<std::size_t>(split.classes()));
  ParameterSet params = mlp_init(sizes, root.derive("init").seed());
  OptimizerState opt = make_optimizer_state(params);

  // Independent streams keep the labeled batch schedule identical across methods.
  CycleSampler labeled_sampler(split.labeled.size(), root.derive("labeled-batches"));
  const std::size_t n_unlabeled = static_cast<std::size_t>(split.unlabeled_points.rows());
  const bool uses_unlabeled = method.method != Method::supervised && n_unlabeled > 0;
  std::optional<CycleSampler> unlabeled_sampler;
  if (uses_unlabeled) unlabeled_sampler.emplace(n_unlabeled, root.derive("unlabeled-batches"));
  RngStream method_rng = root.derive("method");

  const std::size_t batch_l = std::min(tconf.batch_labeled, split.labeled.size());
  const std::size_t batch_u = std::min(tconf.batch_unlabeled, n_unlabeled);

  ParameterSet teacher = params;
  const auto classes = static_cast<Eigen::Index>(split.classes());
  EnsembleState ensemble = make_ensemble_state(static_cast<Eigen::Index>(n_unlabeled), classes, method.ema_decay);
  Matrix ensemble_targets;
  Matrix epoch_outputs = Matrix::Zero(static_cast<Eigen::Index>(n_unlabeled), classes);

  RunRecord record;
  record.seed = seed;
  record.method = method;
  record.train = tconf;
  const bool have_audit = !split.unlabeled_audit_labels.empty();

  auto evaluate_point = [&](std::size_t step, double loss) {
    TracePoint t;
    t.step = step;
    t.train_loss = loss;
    t.val_error = error_rate(params, split.validation);
    t.test_error = error_rate(params, split.test);
    if (have_audit) t.unlabeled_error = error_rate(params, split.unlabeled_points, split.unlabeled_audit_labels);
    const bool improves = record.trace.empty() || t.val_error < record.selected.val_error;
    record.trace.push_back(t);
    if (improves) {
      record.selected = {t.step, t.val_error, t.test_error, t.unlabeled_error};
      record.selected_parameters = params;
    }
    if (confidence_points != nullptr) record.confidence.push_back({step, mean_confidence(params, *confidence_points)});
  };

  if (confidence_points != nullptr) record.confidence.push_back({0, mean_confidence(params, *confidence_points)});

  for (std::size_t step = 0; step < tconf.total_steps; ++step) {
    const std::vector<std::size_t> lidx = labeled_sampler.next(batch_l);
    LabeledBatch labeled{gather_rows(split.labeled.points, lidx), {}};
    for (std::size_t i : lidx) labeled.labels.push_back(split.labeled.labels[i]);

    std::vector<std::size_t> uidx;
    std::size_t cycles_before = 0;
    Matrix unlabeled(0, split.labeled.points.cols());
    if (uses_unlabeled) {
      cycles_before = unlabeled_sampler->cycles_completed();
      uidx = unlabeled_sampler->next(batch_u);
      unlabeled = gather_rows(split.unlabeled_points, uidx);
    }

    MethodState state;
    Matrix batch_targets;
    if (method.method == Method::mean_teacher) state.teacher = &teacher;
    if (method.method == Method::temporal_ensembling && ensemble.step_count > 0 && uses_unlabeled) {
      batch_targets = gather_rows(ensemble_targets, uidx);
      state.ensemble_targets = &batch_targets;
    }

    autodiff::Bindings bindings;
    const ParameterNodes nodes = bind_parameters(params, bindings);
    const LossGraph graph = total_loss(method, params, nodes, bindings, state, labeled, unlabeled, step, method_rng);
    Expr objective = graph.total;
    if (auto penalty = weight_penalty(nodes, params, tconf.l1, tconf.l2)) objective = objective + *penalty;

    const std::vector<Expr> wrt = nodes.all();
    auto [loss, grad] = autodiff::value_and_gradient(objective, bindings, wrt);
    if (!std::isfinite(loss)) throw DivergenceError(step, "non-finite training loss");
    const ParameterSet grads = gradient_as_parameters(params, nodes, grad);
    std::tie(params, opt) = adam_step(params, grads, opt, lr_at(step, tconf));

    if (method.method == Method::mean_teacher) teacher = ema_update(teacher, params, method.ema_decay);
    if (method.method == Method::temporal_ensembling && graph.unlabeled_logits) {
      const Matrix probs = softmax(autodiff::evaluate(*graph.unlabeled_logits, bindings));
      for (std::size_t i = 0; i < uidx.size(); ++i) {
        epoch_outputs.row(static_cast<Eigen::Index>(uidx[i])) = probs.row(static_cast<Eigen::Index>(i));
      }
      if (unlabeled_sampler->cycles_completed() > cycles_before) {
        std::tie(ensemble, ensemble_targets) = temporal_ensemble_targets(ensemble, epoch_outputs, method.ema_decay);
      }
    }

    if ((step + 1) % tconf.eval_every == 0) evaluate_point(step + 1, loss);
  }
  if (record.trace.empty()) evaluate_point(tconf.total_steps, std::numeric_limits<double>::quiet_NaN());
  record.final_parameters = params;
  return record;
}

}  // namespace detail

/// Trains one seeded run and selects the test error at the lowest validation error.
inline RunRecord train(const SslSplit& split, const MethodConfig& method, const TrainConfig& tconf, std::uint64_t seed) {
  return detail::run_training(split, method, tconf, seed, nullptr);
}

/// As train, additionally recording mean max-probability over `grid` at step 0
/// and at every evaluation.
inline RunRecord confidence_trace(const SslSplit& split, const MethodConfig& method, const TrainConfig& tconf,
                                  std::uint64_t seed, const EvaluationGrid& grid) {
  const Matrix points = grid_points(grid);
  return detail::run_training(split, method, tconf, seed, &points);
}

}  // namespace ssl_lab
