#pragma once

// Experiment protocols: equal-budget tuning, labeled/unlabeled data-amount
// sweeps, class-mismatch sweeps, validation-set-size studies and the
// Hoeffding sample-size calculator.

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <limits>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "ssl_lab/datasets.hpp"
#include "ssl_lab/error.hpp"
#include "ssl_lab/losses.hpp"
#include "ssl_lab/model.hpp"
#include "ssl_lab/rng.hpp"
#include "ssl_lab/training.hpp"

namespace ssl_lab {

// ---------------------------------------------------------------------------
// Hoeffding bound: P(|V_hat - E[V]| < p) > 1 - 2 exp(-2 n p^2)

inline double hoeffding_confidence(std::size_t n, double p) {
  if (n < 1) throw ConfigError("hoeffding_confidence: n must be >= 1");
  if (!(p > 0.0 && p < 1.0)) throw ConfigError("hoeffding_confidence: p must lie in (0, 1)");
  return std::max(0.0, 1.0 - 2.0 * std::exp(-2.0 * static_cast<double>(n) * p * p));
}

/// Smallest n whose Hoeffding confidence reaches `confidence`.
inline std::size_t hoeffding_n(double confidence, double p) {
  if (!(confidence > 0.0 && confidence < 1.0)) throw ConfigError("hoeffding_n: confidence must lie in (0, 1)");
  if (!(p > 0.0 && p < 1.0)) throw ConfigError("hoeffding_n: p must lie in (0, 1)");
  const double closed_form = std::log(2.0 / (1.0 - confidence)) / (2.0 * p * p);
  auto n = static_cast<std::size_t>(std::max(1.0, std::ceil(closed_form)));
  // The closed form can land one off when it sits on an integer; settle it against the bound itself.
  while (n > 1 && hoeffding_confidence(n - 1, p) >= confidence) --n;
  while (hoeffding_confidence(n, p) < confidence) ++n;
  return n;
}

// ---------------------------------------------------------------------------
// Small statistics helpers

inline double mean_of(const std::vector<double>& v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

/// Sample standard deviation (n - 1 denominator); 0 for a single value.
inline double stddev_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

// ---------------------------------------------------------------------------
// Parallel cell execution

/// Runs fn(0..count-1) on up to `threads` workers. Results must be written
/// into preallocated slots by index; the first exception (by index) is rethrown.
template <typename Fn>
void run_cells(std::size_t count, std::size_t threads, Fn&& fn) {
  std::vector<std::exception_ptr> errors(count);
  if (threads <= 1 || count <= 1) {
    for (std::size_t i = 0; i < count; ++i) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < std::min(threads, count); ++t) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < count; i = next++) {
          try {
            fn(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    }
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

// ---------------------------------------------------------------------------
// Equal-budget tuning

struct Range {
  double lo = 0.0;
  double hi = 0.0;
  bool log_scale = false;

  double sample(RngStream& rng) const {
    if (log_scale) return std::exp(rng.uniform(std::log(lo), std::log(hi)));
    return rng.uniform(lo, hi);
  }
  friend bool operator==(const Range&, const Range&) = default;
};

/// Log-uniform for rates and coefficients, uniform otherwise. Only the
/// ranges relevant to a method are sampled for it.
struct SearchSpace {
  Range learning_rate{3e-4, 3e-2, true};
  Range coefficient_scale{0.1, 10.0, true};  // multiplies the method's default coefficient
  Range vat_epsilon{0.05, 1.0, true};
  Range ema_decay{0.9, 0.999, false};
  Range ensemble_decay{0.3, 0.9, false};
  Range pseudo_threshold{0.8, 0.99, false};
  Range entropy_multiplier{0.01, 1.0, true};
  Range input_noise_std{0.01, 0.3, true};

  friend bool operator==(const SearchSpace&, const SearchSpace&) = default;
};

struct TuneSpec {
  std::size_t budget = 40;
  std::uint64_t seed = 0;
  SearchSpace space;

  friend bool operator==(const TuneSpec&, const TuneSpec&) = default;
};

struct Trial {
  std::size_t index = 0;
  MethodConfig method;
  TrainConfig train;
  bool diverged = false;
  double val_error = std::numeric_limits<double>::quiet_NaN();
  double test_error = std::numeric_limits<double>::quiet_NaN();
};

struct TuneResult {
  MethodConfig best_method;
  TrainConfig best_train;
  std::size_t best_trial = 0;
  std::vector<Trial> trials;
};

inline std::pair<MethodConfig, TrainConfig> sample_configuration(const MethodConfig& base, const TrainConfig& tbase,
                                                                 const SearchSpace& space, RngStream& rng) {
  MethodConfig m = base;
  TrainConfig t = tbase;
  t.initial_lr = space.learning_rate.sample(rng);
  const MethodConfig defaults = default_method_config(base.method);
  if (base.method != Method::supervised) m.max_consistency = defaults.max_consistency * space.coefficient_scale.sample(rng);
  switch (base.method) {
    case Method::supervised: break;
    case Method::pi_model: m.stochastic.input_noise_std = space.input_noise_std.sample(rng); break;
    case Method::mean_teacher:
      m.ema_decay = space.ema_decay.sample(rng);
      m.stochastic.input_noise_std = space.input_noise_std.sample(rng);
      break;
    case Method::temporal_ensembling:
      m.ema_decay = space.ensemble_decay.sample(rng);
      m.stochastic.input_noise_std = space.input_noise_std.sample(rng);
      break;
    case Method::vat: m.vat_epsilon = space.vat_epsilon.sample(rng); break;
    case Method::vat_entmin:
      m.vat_epsilon = space.vat_epsilon.sample(rng);
      m.entropy_multiplier = space.entropy_multiplier.sample(rng);
      break;
    case Method::pseudo_label: m.pseudo_threshold = space.pseudo_threshold.sample(rng); break;
  }
  return {m, t};
}

/// Seeded random search minimizing the selected validation error.
inline TuneResult tune(const MethodConfig& method, const SslSplit& split, const TuneSpec& spec, const TrainConfig& tconf,
                       std::size_t threads = 1) {
  if (spec.budget < 1) throw ConfigError("tune: budget must be >= 1");
  const RngStream root(spec.seed);
  TuneResult result;
  result.trials.resize(spec.budget);
  for (std::size_t i = 0; i < spec.budget; ++i) {
    RngStream rng = root.derive(i);
    Trial& trial = result.trials[i];
    trial.index = i;
    std::tie(trial.method, trial.train) = sample_configuration(method, tconf, spec.space, rng);
  }
  run_cells(spec.budget, threads, [&](std::size_t i) {
    Trial& trial = result.trials[i];
    try {
      const RunRecord r = train(split, trial.method, trial.train, root.derive(i).derive("train").seed());
      trial.val_error = r.selected.val_error;
      trial.test_error = r.selected.test_error;
    } catch (const DivergenceError&) {
      trial.diverged = true;
    }
  });
  std::optional<std::size_t> best;
  for (const Trial& t : result.trials) {
    if (t.diverged) continue;
    if (!best || t.val_error < result.trials[*best].val_error) best = t.index;
  }
  if (!best) throw TuningError("tune: every trial diverged for " + std::string(method_name(method.method)));
  result.best_trial = *best;
  result.best_method = result.trials[*best].method;
  result.best_train = result.trials[*best].train;
  return result;
}

inline nlohmann::json to_json(const TuneResult& r) {
  nlohmann::json trials = nlohmann::json::array();
  for (const Trial& t : r.trials) {
    trials.push_back({{"index", t.index},
                      {"method", to_json(t.method)},
                      {"initial_lr", t.train.initial_lr},
                      {"diverged", t.diverged},
                      {"val_error", t.diverged ? nlohmann::json(nullptr) : nlohmann::json(t.val_error)},
                      {"test_error", t.diverged ? nlohmann::json(nullptr) : nlohmann::json(t.test_error)}});
  }
  return {{"best_trial", r.best_trial},
          {"best_method", to_json(r.best_method)},
          {"best_train", to_json(r.best_train)},
          {"trials", std::move(trials)}};
}

// ---------------------------------------------------------------------------
// Sweeps

struct SweepCell {
  double value = 0.0;
  std::string method;
  std::uint64_t seed = 0;
  double metric = 0.0;  // selected test error

  friend bool operator==(const SweepCell&, const SweepCell&) = default;
};

struct SweepAggregate {
  double value = 0.0;
  std::string method;
  double mean = 0.0;
  double std = 0.0;

  friend bool operator==(const SweepAggregate&, const SweepAggregate&) = default;
};

struct SweepResult {
  std::string axis;
  std::vector<double> values;
  std::vector<std::string> methods;
  std::size_t seeds = 0;
  std::vector<SweepCell> cells;            // ordered by (value, method, seed)
  std::vector<SweepAggregate> aggregates;  // ordered by (value, method)

  const SweepAggregate& at(double value, const std::string& method) const {
    for (const auto& a : aggregates) {
      if (a.value == value && a.method == method) return a;
    }
    throw ConfigError("sweep result has no cell for " + method);
  }

  friend bool operator==(const SweepResult&, const SweepResult&) = default;
};

struct SweepSettings {
  SplitSizes sizes;  // the swept axis overrides its own entry
  TrainConfig train;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::size_t threads = 1;
};

/// Name used for the no-unlabeled-data reference runs of the mismatch sweep.
inline constexpr const char* kSupervisedReference = "supervised-reference";

namespace detail {

inline void aggregate(SweepResult& r) {
  r.aggregates.clear();
  for (double v : r.values) {
    for (const std::string& m : r.methods) {
      std::vector<double> xs;
      for (const SweepCell& c : r.cells) {
        if (c.value == v && c.method == m) xs.push_back(c.metric);
      }
      r.aggregates.push_back({v, m, mean_of(xs), stddev_of(xs)});
    }
  }
}

template <typename MakeSplit>
SweepResult run_sweep(const std::string& axis, const std::vector<MethodConfig>& methods, const std::vector<double>& values,
                      const SweepSettings& settings, MakeSplit&& make_split) {
  if (settings.seeds.empty()) throw ConfigError("sweep: need at least one seed");
  SweepResult r;
  r.axis = axis;
  r.values = values;
  r.seeds = settings.seeds.size();
  for (const MethodConfig& m : methods) r.methods.emplace_back(method_name(m.method));
  std::set<std::string> unique(r.methods.begin(), r.methods.end());
  if (unique.size() != r.methods.size()) throw ConfigError("sweep: methods must be distinct");

  const std::size_t nm = methods.size();
  const std::size_t ns = settings.seeds.size();
  r.cells.resize(values.size() * nm * ns);
  run_cells(r.cells.size(), settings.threads, [&](std::size_t i) {
    const std::size_t vi = i / (nm * ns);
    const std::size_t mi = (i / ns) % nm;
    const std::size_t si = i % ns;
    const std::uint64_t seed = settings.seeds[si];
    const SslSplit split = make_split(values[vi], seed);
    const RunRecord rec = train(split, methods[mi], settings.train, seed);
    r.cells[i] = {values[vi], r.methods[mi], seed, rec.selected.test_error};
  });
  aggregate(r);
  return r;
}

}  // namespace detail

inline SweepResult sweep_labeled(const std::vector<MethodConfig>& methods, const Dataset& data,
                                 const std::vector<std::size_t>& counts, const SweepSettings& settings) {
  std::vector<double> values(counts.begin(), counts.end());
  return detail::run_sweep("labeled", methods, values, settings, [&](double v, std::uint64_t seed) {
    SplitSizes s = settings.sizes;
    s.labeled = static_cast<std::size_t>(v);
    return split_ssl(data, s, seed);
  });
}

inline SweepResult sweep_unlabeled(const std::vector<MethodConfig>& methods, const Dataset& data,
                                   const std::vector<std::size_t>& counts, const SweepSettings& settings) {
  std::vector<double> values(counts.begin(), counts.end());
  return detail::run_sweep("unlabeled", methods, values, settings, [&](double v, std::uint64_t seed) {
    SplitSizes s = settings.sizes;
    s.unlabeled = static_cast<std::size_t>(v);
    return split_ssl(data, s, seed);
  });
}

/// Six labeled classes {0..5}; four unlabeled classes of which round(4 * overlap)
/// are labeled classes {6-j..5} and the rest come from {6..9}.
inline std::pair<std::set<int>, std::set<int>> mismatch_classes(double overlap) {
  const double scaled = overlap * 4.0;
  const int shared = static_cast<int>(std::lround(scaled));
  if (!(overlap >= 0.0 && overlap <= 1.0) || std::abs(scaled - shared) > 1e-9) {
    throw ConfigError("mismatch overlap must be one of 0, 0.25, 0.5, 0.75, 1");
  }
  std::set<int> labeled{0, 1, 2, 3, 4, 5};
  std::set<int> unlabeled;
  for (int c = 6 - shared; c < 6; ++c) unlabeled.insert(c);
  for (int c = 6; c < 6 + (4 - shared); ++c) unlabeled.insert(c);
  return {labeled, unlabeled};
}

/// Class-mismatch sweep on a clustered dataset with at least 10 classes.
/// Adds a supervised run without unlabeled data per seed, repeated at every
/// overlap value under the name kSupervisedReference.
inline SweepResult sweep_mismatch(const std::vector<MethodConfig>& methods, const Dataset& cluster_data,
                                  const std::vector<double>& overlaps, const SweepSettings& settings) {
  if (cluster_data.classes < 10) throw ConfigError("sweep_mismatch: needs a dataset with at least 10 classes");
  auto make_split = [&](double overlap, std::uint64_t seed) {
    const auto [lab, unl] = mismatch_classes(overlap);
    return mismatch_split(cluster_data, lab, unl, settings.sizes, seed);
  };
  SweepResult r = detail::run_sweep("overlap", methods, overlaps, settings, make_split);

  std::vector<double> reference(settings.seeds.size());
  run_cells(settings.seeds.size(), settings.threads, [&](std::size_t si) {
    SslSplit split = make_split(1.0, settings.seeds[si]);
    split.unlabeled_points.resize(0, split.unlabeled_points.cols());
    split.unlabeled_audit_labels.clear();
    split.unlabeled_index.clear();
    reference[si] = train(split, default_method_config(Method::supervised), settings.train, settings.seeds[si])
                        .selected.test_error;
  });
  r.methods.emplace_back(kSupervisedReference);
  std::vector<SweepCell> cells;
  const std::size_t per_value = methods.size() * settings.seeds.size();
  for (std::size_t vi = 0; vi < overlaps.size(); ++vi) {
    cells.insert(cells.end(), r.cells.begin() + static_cast<std::ptrdiff_t>(vi * per_value),
                 r.cells.begin() + static_cast<std::ptrdiff_t>((vi + 1) * per_value));
    for (std::size_t si = 0; si < settings.seeds.size(); ++si) {
      cells.push_back({overlaps[vi], kSupervisedReference, settings.seeds[si], reference[si]});
    }
  }
  r.cells = std::move(cells);
  detail::aggregate(r);
  return r;
}

// ---------------------------------------------------------------------------
// Validation-set-size study

struct StudyModel {
  std::string name;
  ParameterSet params;
};

enum class StudyMode { absolute, relative };

struct StudyCell {
  std::string method;
  std::size_t set_size = 0;
  std::vector<double> errors;  // one per disjoint subset
  double mean = 0.0;
  double std = 0.0;

  friend bool operator==(const StudyCell&, const StudyCell&) = default;
};

/// Set sizes as fractions of the labeled training-set size (at least 1).
inline std::vector<std::size_t> study_sizes(const std::vector<double>& fractions, std::size_t training_size) {
  std::vector<std::size_t> out;
  for (double f : fractions) {
    if (!(f > 0.0)) throw ConfigError("validation-size fractions must be positive");
    out.push_back(std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(f * static_cast<double>(training_size)))));
  }
  return out;
}

/// Re-evaluates fixed models on k disjoint random subsets of `pool` per size.
/// In relative mode each subset error is reported minus the reference
/// model's error on the identical subset.
inline std::vector<StudyCell> validation_size_study(const std::vector<StudyModel>& models, const Dataset& pool,
                                                    const std::vector<std::size_t>& set_sizes, std::size_t k,
                                                    StudyMode mode, const std::string& reference, std::uint64_t seed) {
  const StudyModel* ref = nullptr;
  for (const StudyModel& m : models) {
    if (m.name == reference) ref = &m;
  }
  if (mode == StudyMode::relative && ref == nullptr) throw ConfigError("validation_size_study: unknown reference '" + reference + "'");
  const RngStream root(seed);
  std::vector<StudyCell> out;
  for (std::size_t si = 0; si < set_sizes.size(); ++si) {
    const auto subsets = subsample_indices(pool.size(), set_sizes[si], k, root.derive(si).seed());
    std::vector<Dataset> sets;
    for (const auto& idx : subsets) sets.push_back(select_rows(pool, idx));
    for (const StudyModel& m : models) {
      StudyCell cell{m.name, set_sizes[si], {}, 0.0, 0.0};
      for (const Dataset& s : sets) {
        double e = error_rate(m.params, s);
        if (mode == StudyMode::relative) e -= error_rate(ref->params, s);
        cell.errors.push_back(e);
      }
      cell.mean = mean_of(cell.errors);
      cell.std = stddev_of(cell.errors);
      out.push_back(std::move(cell));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// CSV output

inline std::string csv_number(double v) { return fmt::format("{}", v); }

/// axis,value,method,seed,metric
inline void write_cells_csv(std::ostream& os, const SweepResult& r) {
  os << "axis,value,method,seed,metric\n";
  for (const SweepCell& c : r.cells) {
    os << r.axis << ',' << csv_number(c.value) << ',' << c.method << ',' << c.seed << ',' << csv_number(c.metric) << '\n';
  }
}

/// axis,value,method,mean,std
inline void write_summary_csv(std::ostream& os, const SweepResult& r) {
  os << "axis,value,method,mean,std\n";
  for (const SweepAggregate& a : r.aggregates) {
    os << r.axis << ',' << csv_number(a.value) << ',' << a.method << ',' << csv_number(a.mean) << ','
       << csv_number(a.std) << '\n';
  }
}

/// Study cells in the sweep schemas; the seed column holds the subset index.
inline void write_cells_csv(std::ostream& os, const std::vector<StudyCell>& cells) {
  os << "axis,value,method,seed,metric\n";
  for (const StudyCell& c : cells) {
    for (std::size_t j = 0; j < c.errors.size(); ++j) {
      os << "validation_size," << c.set_size << ',' << c.method << ',' << j << ',' << csv_number(c.errors[j]) << '\n';
    }
  }
}

inline void write_summary_csv(std::ostream& os, const std::vector<StudyCell>& cells) {
  os << "axis,value,method,mean,std\n";
  for (const StudyCell& c : cells) {
    os << "validation_size," << c.set_size << ',' << c.method << ',' << csv_number(c.mean) << ',' << csv_number(c.std)
       << '\n';
  }
}

}  // namespace ssl_lab
