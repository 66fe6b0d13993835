#pragma once

// Experiment configuration documents (JSON). Every block is strict: unknown
// keys are rejected, missing keys take documented defaults.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ssl_lab/datasets.hpp"
#include "ssl_lab/error.hpp"
#include "ssl_lab/harness.hpp"
#include "ssl_lab/losses.hpp"
#include "ssl_lab/training.hpp"

namespace ssl_lab {

enum class ExperimentKind { train, sweep_labeled, sweep_unlabeled, sweep_mismatch, valsize_study, hoeffding, boundary };

inline constexpr ExperimentKind kAllExperiments[] = {
    ExperimentKind::train,         ExperimentKind::sweep_labeled, ExperimentKind::sweep_unlabeled,
    ExperimentKind::sweep_mismatch, ExperimentKind::valsize_study, ExperimentKind::hoeffding,
    ExperimentKind::boundary};

inline std::string_view experiment_name(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::train: return "train";
    case ExperimentKind::sweep_labeled: return "sweep-labeled";
    case ExperimentKind::sweep_unlabeled: return "sweep-unlabeled";
    case ExperimentKind::sweep_mismatch: return "sweep-mismatch";
    case ExperimentKind::valsize_study: return "valsize-study";
    case ExperimentKind::hoeffding: return "hoeffding";
    case ExperimentKind::boundary: return "boundary";
  }
  return "?";
}

inline ExperimentKind parse_experiment(std::string_view name) {
  for (ExperimentKind k : kAllExperiments) {
    if (experiment_name(k) == name) return k;
  }
  throw ConfigError("unknown experiment '" + std::string(name) + "'");
}

struct DatasetConfig {
  std::string kind = "two_moons";  // two_moons | clusters
  std::size_t n = 1000;            // two_moons
  double noise = 0.1;              // two_moons
  int classes = 10;                // clusters
  std::size_t per_class = 400;     // clusters
  double radius = 4.0;             // clusters
  double cluster_std = 0.6;        // clusters
  std::uint64_t seed = 0;

  friend bool operator==(const DatasetConfig&, const DatasetConfig&) = default;
};

struct ValsizeConfig {
  std::vector<double> fractions{0.1, 0.25, 0.5, 1.0};  // of the labeled-set size
  std::size_t k = 10;
  std::string mode = "absolute";  // absolute | relative
  std::string reference = "pi-model";

  friend bool operator==(const ValsizeConfig&, const ValsizeConfig&) = default;
};

struct HoeffdingConfig {
  double confidence = 0.95;
  double p = 0.01;

  friend bool operator==(const HoeffdingConfig&, const HoeffdingConfig&) = default;
};

struct ExperimentSpec {
  ExperimentKind kind = ExperimentKind::train;
  DatasetConfig dataset;
  SplitSizes split{6, 500, 100, 394};
  std::vector<MethodConfig> methods{default_method_config(Method::supervised)};
  TrainConfig train;
  std::optional<TuneSpec> tune;
  std::vector<std::uint64_t> seeds{0};
  std::string output_dir = "out";
  std::vector<double> sweep_values;  // counts or overlaps, depending on kind
  ValsizeConfig valsize;
  EvaluationGrid boundary;
  HoeffdingConfig hoeffding;

  friend bool operator==(const ExperimentSpec&, const ExperimentSpec&) = default;
};

inline std::vector<double> default_sweep_values(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::sweep_labeled: return {4, 8, 16, 32, 64, 128, 256};
    case ExperimentKind::sweep_unlabeled: return {0, 50, 100, 200, 400, 800};
    case ExperimentKind::sweep_mismatch: return {0.0, 0.25, 0.5, 0.75, 1.0};
    default: return {};
  }
}

namespace detail {

template <typename T>
T get_as(const nlohmann::json& v, const std::string& where) {
  try {
    return v.get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(where + " has the wrong type");
  }
}

/// Calls handle(key, value) for every key; collects unknown keys into one error.
template <typename Handler>
void for_each_key(const nlohmann::json& j, const std::string& block, const std::vector<std::string>& known,
                  Handler&& handle) {
  if (!j.is_object()) throw ConfigError(block + " must be an object");
  std::vector<std::string> unknown;
  for (const auto& [key, value] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      unknown.push_back(key);
      continue;
    }
    handle(key, value);
  }
  if (!unknown.empty()) {
    std::string msg = block + ": unknown key(s)";
    for (const auto& k : unknown) msg += " '" + k + "'";
    throw ConfigError(msg);
  }
}

inline std::size_t line_of(std::string_view text, std::size_t byte) {
  const std::size_t end = std::min(byte, text.size());
  return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(end), '\n'));
}

}  // namespace detail

inline nlohmann::json to_json(const DatasetConfig& d) {
  return {{"kind", d.kind},       {"n", d.n},         {"noise", d.noise},
          {"classes", d.classes}, {"per_class", d.per_class}, {"radius", d.radius},
          {"cluster_std", d.cluster_std}, {"seed", d.seed}};
}

inline nlohmann::json to_json(const ExperimentSpec& s) {
  nlohmann::json methods = nlohmann::json::array();
  for (const MethodConfig& m : s.methods) methods.push_back(to_json(m));
  nlohmann::json j = {
      {"experiment", std::string(experiment_name(s.kind))},
      {"dataset", to_json(s.dataset)},
      {"split",
       {{"labeled", s.split.labeled}, {"unlabeled", s.split.unlabeled}, {"validation", s.split.validation}, {"test", s.split.test}}},
      {"methods", std::move(methods)},
      {"train", to_json(s.train)},
      {"seeds", s.seeds},
      {"output_dir", s.output_dir},
      {"sweep_values", s.sweep_values},
      {"valsize",
       {{"fractions", s.valsize.fractions}, {"k", s.valsize.k}, {"mode", s.valsize.mode}, {"reference", s.valsize.reference}}},
      {"boundary",
       {{"x_min", s.boundary.x_min},
        {"x_max", s.boundary.x_max},
        {"y_min", s.boundary.y_min},
        {"y_max", s.boundary.y_max},
        {"resolution", s.boundary.resolution}}},
      {"hoeffding", {{"confidence", s.hoeffding.confidence}, {"p", s.hoeffding.p}}}};
  if (s.tune) j["tune"] = {{"budget", s.tune->budget}, {"seed", s.tune->seed}};
  return j;
}

inline void validate(const ExperimentSpec& s) {
  const DatasetConfig& d = s.dataset;
  if (d.kind != "two_moons" && d.kind != "clusters") throw ConfigError("dataset.kind must be 'two_moons' or 'clusters'");
  if (d.kind == "two_moons" && (d.n < 2 || d.n % 2 != 0)) throw ConfigError("dataset.n must be even and >= 2");
  if (d.kind == "clusters" && d.classes < 2) throw ConfigError("dataset.classes must be >= 2");
  if (s.methods.empty()) throw ConfigError("methods must not be empty");
  if (s.seeds.empty()) throw ConfigError("seeds must not be empty");
  if (s.valsize.mode != "absolute" && s.valsize.mode != "relative") throw ConfigError("valsize.mode must be 'absolute' or 'relative'");
  if (s.valsize.k < 1) throw ConfigError("valsize.k must be >= 1");
  if (s.boundary.resolution < 2) throw ConfigError("boundary.resolution must be >= 2");
  if (!(s.boundary.x_max > s.boundary.x_min) || !(s.boundary.y_max > s.boundary.y_min)) throw ConfigError("boundary extent is empty");
  if (s.tune && s.tune->budget < 1) throw ConfigError("tune.budget must be >= 1");
  if (s.kind == ExperimentKind::sweep_mismatch) {
    for (double v : s.sweep_values) mismatch_classes(v);
  }
}

inline ExperimentSpec spec_from_json(const nlohmann::json& j) {
  ExperimentSpec s;
  bool have_values = false;
  detail::for_each_key(
      j, "config",
      {"experiment", "dataset", "split", "methods", "train", "tune", "seeds", "output_dir", "sweep_values", "valsize",
       "boundary", "hoeffding"},
      [&](const std::string& key, const nlohmann::json& v) {
        using detail::get_as;
        if (key == "experiment") {
          s.kind = parse_experiment(get_as<std::string>(v, "experiment"));
        } else if (key == "dataset") {
          detail::for_each_key(v, "dataset", {"kind", "n", "noise", "classes", "per_class", "radius", "cluster_std", "seed"},
                               [&](const std::string& k, const nlohmann::json& x) {
                                 const std::string where = "dataset." + k;
                                 if (k == "kind") s.dataset.kind = get_as<std::string>(x, where);
                                 else if (k == "n") s.dataset.n = get_as<std::size_t>(x, where);
                                 else if (k == "noise") s.dataset.noise = get_as<double>(x, where);
                                 else if (k == "classes") s.dataset.classes = get_as<int>(x, where);
                                 else if (k == "per_class") s.dataset.per_class = get_as<std::size_t>(x, where);
                                 else if (k == "radius") s.dataset.radius = get_as<double>(x, where);
                                 else if (k == "cluster_std") s.dataset.cluster_std = get_as<double>(x, where);
                                 else if (k == "seed") s.dataset.seed = get_as<std::uint64_t>(x, where);
                               });
        } else if (key == "split") {
          detail::for_each_key(v, "split", {"labeled", "unlabeled", "validation", "test"},
                               [&](const std::string& k, const nlohmann::json& x) {
                                 const auto n = get_as<std::size_t>(x, "split." + k);
                                 if (k == "labeled") s.split.labeled = n;
                                 else if (k == "unlabeled") s.split.unlabeled = n;
                                 else if (k == "validation") s.split.validation = n;
                                 else if (k == "test") s.split.test = n;
                               });
        } else if (key == "methods") {
          if (!v.is_array()) throw ConfigError("methods must be an array");
          s.methods.clear();
          for (const auto& m : v) {
            if (m.is_string()) s.methods.push_back(default_method_config(parse_method(m.get<std::string>())));
            else s.methods.push_back(method_config_from_json(m));
          }
        } else if (key == "train") {
          s.train = train_config_from_json(v);
        } else if (key == "tune") {
          TuneSpec t;
          detail::for_each_key(v, "tune", {"budget", "seed"}, [&](const std::string& k, const nlohmann::json& x) {
            if (k == "budget") t.budget = get_as<std::size_t>(x, "tune.budget");
            else t.seed = get_as<std::uint64_t>(x, "tune.seed");
          });
          s.tune = t;
        } else if (key == "seeds") {
          s.seeds = get_as<std::vector<std::uint64_t>>(v, "seeds");
        } else if (key == "output_dir") {
          s.output_dir = get_as<std::string>(v, "output_dir");
        } else if (key == "sweep_values") {
          s.sweep_values = get_as<std::vector<double>>(v, "sweep_values");
          have_values = true;
        } else if (key == "valsize") {
          detail::for_each_key(v, "valsize", {"fractions", "k", "mode", "reference"},
                               [&](const std::string& k, const nlohmann::json& x) {
                                 const std::string where = "valsize." + k;
                                 if (k == "fractions") s.valsize.fractions = get_as<std::vector<double>>(x, where);
                                 else if (k == "k") s.valsize.k = get_as<std::size_t>(x, where);
                                 else if (k == "mode") s.valsize.mode = get_as<std::string>(x, where);
                                 else if (k == "reference") s.valsize.reference = get_as<std::string>(x, where);
                               });
        } else if (key == "boundary") {
          detail::for_each_key(v, "boundary", {"x_min", "x_max", "y_min", "y_max", "resolution"},
                               [&](const std::string& k, const nlohmann::json& x) {
                                 const std::string where = "boundary." + k;
                                 if (k == "x_min") s.boundary.x_min = get_as<double>(x, where);
                                 else if (k == "x_max") s.boundary.x_max = get_as<double>(x, where);
                                 else if (k == "y_min") s.boundary.y_min = get_as<double>(x, where);
                                 else if (k == "y_max") s.boundary.y_max = get_as<double>(x, where);
                                 else if (k == "resolution") s.boundary.resolution = get_as<std::size_t>(x, where);
                               });
        } else if (key == "hoeffding") {
          detail::for_each_key(v, "hoeffding", {"confidence", "p"}, [&](const std::string& k, const nlohmann::json& x) {
            if (k == "confidence") s.hoeffding.confidence = get_as<double>(x, "hoeffding.confidence");
            else s.hoeffding.p = get_as<double>(x, "hoeffding.p");
          });
        }
      });
  if (!have_values) s.sweep_values = default_sweep_values(s.kind);
  validate(s);
  return s;
}

/// Parses a JSON experiment document. Syntax errors carry the line number.
inline ExperimentSpec parse_config(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text.begin(), text.end());
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("parse error at line " + std::to_string(detail::line_of(text, e.byte)) + ": " + e.what());
  }
  return spec_from_json(j);
}

inline std::string emit_config(const ExperimentSpec& s) { return to_json(s).dump(2) + "\n"; }

/// Builds the source dataset and a JSON description of how it was generated.
inline std::pair<Dataset, nlohmann::json> make_dataset(const DatasetConfig& d) {
  if (d.kind == "two_moons") return {two_moons(d.n, d.noise, d.seed), to_json(d)};
  if (d.kind == "clusters") return {gaussian_clusters(d.classes, d.per_class, d.radius, d.cluster_std, d.seed), to_json(d)};
  throw ConfigError("dataset.kind must be 'two_moons' or 'clusters'");
}

}  // namespace ssl_lab
