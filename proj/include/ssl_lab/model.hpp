#pragma once

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "ssl_lab/autodiff.hpp"
#include "ssl_lab/error.hpp"
#include "ssl_lab/rng.hpp"

namespace ssl_lab {

using autodiff::Expr;

struct Layer {
  std::string name;
  Matrix weights;  // fan_in x fan_out
  Matrix bias;     // 1 x fan_out

  friend bool operator==(const Layer& a, const Layer& b) {
    return a.name == b.name && a.weights.rows() == b.weights.rows() && a.weights.cols() == b.weights.cols() &&
           a.bias.cols() == b.bias.cols() && a.weights == b.weights && a.bias == b.bias;
  }
};

/// Weights and biases of the MLP, layer by layer.
struct ParameterSet {
  std::vector<std::size_t> layer_sizes;
  std::vector<Layer> layers;

  std::size_t input_dim() const { return layer_sizes.front(); }
  std::size_t output_dim() const { return layer_sizes.back(); }

  friend bool operator==(const ParameterSet&, const ParameterSet&) = default;
};

inline void validate(const ParameterSet& p) {
  if (p.layer_sizes.size() < 2 || p.layers.size() + 1 != p.layer_sizes.size()) {
    throw ConfigError("parameter set needs at least two layer sizes and one layer per transition");
  }
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    const Layer& l = p.layers[i];
    const auto in = static_cast<Eigen::Index>(p.layer_sizes[i]);
    const auto out = static_cast<Eigen::Index>(p.layer_sizes[i + 1]);
    if (l.weights.rows() != in || l.weights.cols() != out || l.bias.rows() != 1 || l.bias.cols() != out) {
      throw ShapeError("layer '" + l.name + "' does not chain with layer sizes");
    }
    if (!l.weights.allFinite() || !l.bias.allFinite()) throw ConfigError("layer '" + l.name + "' has non-finite values");
  }
}

inline void require_same_shape(const ParameterSet& a, const ParameterSet& b) {
  if (a.layer_sizes != b.layer_sizes || a.layers.size() != b.layers.size()) {
    throw ShapeError("parameter sets have different architectures");
  }
}

inline ParameterSet zeros_like(const ParameterSet& p) {
  ParameterSet z = p;
  for (Layer& l : z.layers) {
    l.weights.setZero();
    l.bias.setZero();
  }
  return z;
}

/// Glorot-uniform weights, zero biases.
inline ParameterSet mlp_init(const std::vector<std::size_t>& layer_sizes, std::uint64_t seed) {
  if (layer_sizes.size() < 2) throw ConfigError("mlp_init needs at least two layer sizes");
  for (std::size_t s : layer_sizes) {
    if (s == 0) throw ConfigError("mlp_init: layer sizes must be positive");
  }
  RngStream rng(seed);
  ParameterSet p;
  p.layer_sizes = layer_sizes;
  for (std::size_t i = 0; i + 1 < layer_sizes.size(); ++i) {
    const auto in = static_cast<Eigen::Index>(layer_sizes[i]);
    const auto out = static_cast<Eigen::Index>(layer_sizes[i + 1]);
    const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
    Layer l;
    l.name = "dense_" + std::to_string(i);
    l.weights.resize(in, out);
    for (Eigen::Index r = 0; r < in; ++r) {
      for (Eigen::Index c = 0; c < out; ++c) l.weights(r, c) = rng.uniform(-limit, limit);
    }
    l.bias = Matrix::Zero(1, out);
    p.layers.push_back(std::move(l));
  }
  return p;
}

/// Two-moons classifier: three hidden layers of 10 ReLU units.
inline std::vector<std::size_t> default_layer_sizes(std::size_t input_dim, std::size_t classes) {
  return {input_dim, 10, 10, 10, classes};
}

struct StochasticConfig {
  double input_noise_std = 0.0;
  double dropout_rate = 0.0;

  bool deterministic() const { return input_noise_std == 0.0 && dropout_rate == 0.0; }
  friend bool operator==(const StochasticConfig&, const StochasticConfig&) = default;
};

inline void validate(const StochasticConfig& s) {
  if (!(s.input_noise_std >= 0.0) || !std::isfinite(s.input_noise_std)) throw ConfigError("input-noise-std must be >= 0");
  if (!(s.dropout_rate >= 0.0 && s.dropout_rate < 1.0)) throw ConfigError("dropout-rate must lie in [0, 1)");
}

// ---------------------------------------------------------------------------
// Graph binding

/// Graph handles for one ParameterSet. Either input nodes (differentiable)
/// or constants (for frozen copies such as a teacher).
struct ParameterNodes {
  std::vector<Expr> weights;
  std::vector<Expr> biases;

  std::vector<Expr> all() const {
    std::vector<Expr> out;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      out.push_back(weights[i]);
      out.push_back(biases[i]);
    }
    return out;
  }
};

inline ParameterNodes bind_parameters(const ParameterSet& p, autodiff::Bindings& bindings,
                                      const std::string& prefix = {}) {
  ParameterNodes nodes;
  for (const Layer& l : p.layers) {
    Expr w = Expr::input(autodiff::shape_of(l.weights), prefix + l.name + "/weights");
    Expr b = Expr::input(autodiff::shape_of(l.bias), prefix + l.name + "/bias");
    bindings.bind(w, l.weights);
    bindings.bind(b, l.bias);
    nodes.weights.push_back(std::move(w));
    nodes.biases.push_back(std::move(b));
  }
  return nodes;
}

inline ParameterNodes constant_parameters(const ParameterSet& p) {
  ParameterNodes nodes;
  for (const Layer& l : p.layers) {
    nodes.weights.push_back(Expr::constant(l.weights));
    nodes.biases.push_back(Expr::constant(l.bias));
  }
  return nodes;
}

/// Repackages gradients w.r.t. bound parameter nodes as a ParameterSet.
inline ParameterSet gradient_as_parameters(const ParameterSet& like, const ParameterNodes& nodes,
                                           const autodiff::Gradient& g) {
  ParameterSet out = like;
  for (std::size_t i = 0; i < out.layers.size(); ++i) {
    out.layers[i].weights = g[nodes.weights[i]];
    out.layers[i].bias = g[nodes.biases[i]];
  }
  return out;
}

/// Logits graph: (x + noise) -> [affine -> relu -> dropout] per hidden layer -> affine.
inline Expr mlp_forward(const ParameterNodes& params, const Expr& inputs, const StochasticConfig& stoch,
                        RngStream& rng) {
  if (params.weights.empty()) throw ConfigError("mlp_forward: empty parameter set");
  if (inputs.shape().cols != params.weights.front().shape().rows) {
    throw ShapeError("mlp_forward: input width " + std::to_string(inputs.shape().cols) + " does not match first layer " +
                     std::to_string(params.weights.front().shape().rows));
  }
  const Eigen::Index n = inputs.shape().rows;
  Expr h = inputs;
  if (stoch.input_noise_std > 0.0) {
    Matrix noise(n, inputs.shape().cols);
    for (Eigen::Index k = 0; k < noise.size(); ++k) noise.data()[k] = rng.normal(0.0, stoch.input_noise_std);
    h = h + Expr::constant(std::move(noise));
  }
  const std::size_t depth = params.weights.size();
  for (std::size_t i = 0; i < depth; ++i) {
    h = autodiff::matmul(h, params.weights[i]) + params.biases[i];
    if (i + 1 == depth) break;
    h = autodiff::relu(h);
    if (stoch.dropout_rate > 0.0) {
      const double keep = 1.0 - stoch.dropout_rate;
      Matrix mask(n, h.shape().cols);
      for (Eigen::Index k = 0; k < mask.size(); ++k) mask.data()[k] = rng.uniform() < keep ? 1.0 / keep : 0.0;
      h = h * Expr::constant(std::move(mask));
    }
  }
  return h;
}

inline Expr mlp_forward(const ParameterNodes& params, const Matrix& inputs, const StochasticConfig& stoch,
                        RngStream& rng) {
  return mlp_forward(params, Expr::constant(inputs), stoch, rng);
}

/// Deterministic logits for a batch, outside any training graph.
inline Matrix predict_logits(const ParameterSet& p, const Matrix& inputs) {
  if (inputs.cols() != static_cast<Eigen::Index>(p.input_dim())) throw ShapeError("predict: input width mismatch");
  Matrix h = inputs;
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    Matrix z = h * p.layers[i].weights;
    z.rowwise() += p.layers[i].bias.row(0);
    h = (i + 1 == p.layers.size()) ? z : Matrix(z.cwiseMax(0.0));
  }
  return h;
}

inline Matrix softmax(const Matrix& logits) {
  Matrix p(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double m = logits.row(r).maxCoeff();
    p.row(r) = (logits.row(r).array() - m).exp().matrix();
    p.row(r) /= p.row(r).sum();
  }
  return p;
}

inline Matrix predict_proba(const ParameterSet& p, const Matrix& inputs) { return softmax(predict_logits(p, inputs)); }

/// Row-wise argmax; ties go to the lowest index.
inline std::vector<int> argmax_rows(const Matrix& m) {
  std::vector<int> out(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < m.cols(); ++c) {
      if (m(r, c) > m(r, best)) best = c;
    }
    out[static_cast<std::size_t>(r)] = static_cast<int>(best);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Mean Teacher support

/// teacher' = decay * teacher + (1 - decay) * student.
inline ParameterSet ema_update(const ParameterSet& teacher, const ParameterSet& student, double decay) {
  if (!(decay >= 0.0 && decay <= 1.0)) throw ConfigError("ema decay must lie in [0, 1]");
  require_same_shape(teacher, student);
  ParameterSet out = teacher;
  for (std::size_t i = 0; i < out.layers.size(); ++i) {
    const Layer& t = teacher.layers[i];
    const Layer& s = student.layers[i];
    if (autodiff::shape_of(t.weights) != autodiff::shape_of(s.weights) ||
        autodiff::shape_of(t.bias) != autodiff::shape_of(s.bias)) {
      throw ShapeError("ema_update: layer '" + t.name + "' shape mismatch");
    }
    out.layers[i].weights = decay * t.weights + (1.0 - decay) * s.weights;
    out.layers[i].bias = decay * t.bias + (1.0 - decay) * s.bias;
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSON checkpoint: {layer_sizes, layers: [{name, weights: [[...]], bias: [...]}]}

inline nlohmann::json matrix_to_json(const Matrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline nlohmann::json to_json(const ParameterSet& p) {
  nlohmann::json layers = nlohmann::json::array();
  for (const Layer& l : p.layers) {
    nlohmann::json bias = nlohmann::json::array();
    for (Eigen::Index c = 0; c < l.bias.cols(); ++c) bias.push_back(l.bias(0, c));
    layers.push_back({{"name", l.name}, {"weights", matrix_to_json(l.weights)}, {"bias", std::move(bias)}});
  }
  return {{"layer_sizes", p.layer_sizes}, {"layers", std::move(layers)}};
}

inline ParameterSet parameters_from_json(const nlohmann::json& j) {
  try {
    ParameterSet p;
    p.layer_sizes = j.at("layer_sizes").get<std::vector<std::size_t>>();
    for (const auto& jl : j.at("layers")) {
      Layer l;
      l.name = jl.at("name").get<std::string>();
      const auto& w = jl.at("weights");
      const auto rows = static_cast<Eigen::Index>(w.size());
      const auto cols = rows == 0 ? 0 : static_cast<Eigen::Index>(w.at(0).size());
      l.weights.resize(rows, cols);
      for (Eigen::Index r = 0; r < rows; ++r) {
        if (static_cast<Eigen::Index>(w.at(r).size()) != cols) throw ShapeError("ragged weight matrix in '" + l.name + "'");
        for (Eigen::Index c = 0; c < cols; ++c) l.weights(r, c) = w.at(r).at(c).get<double>();
      }
      const auto& b = jl.at("bias");
      l.bias.resize(1, static_cast<Eigen::Index>(b.size()));
      for (std::size_t c = 0; c < b.size(); ++c) l.bias(0, static_cast<Eigen::Index>(c)) = b.at(c).get<double>();
      p.layers.push_back(std::move(l));
    }
    validate(p);
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed parameter document: ") + e.what());
  }
}

}  // namespace ssl_lab
