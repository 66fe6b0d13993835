#pragma once

// Command-line driver. Exit codes: 0 success, 1 configuration error,
// 2 runtime error (divergence, tuning failure, I/O).

#include <CLI11.hpp>
#include <fmt/format.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ssl_lab/config.hpp"
#include "ssl_lab/datasets.hpp"
#include "ssl_lab/error.hpp"
#include "ssl_lab/harness.hpp"
#include "ssl_lab/model.hpp"
#include "ssl_lab/report.hpp"
#include "ssl_lab/training.hpp"

namespace ssl_lab {

namespace cli_detail {

namespace fs = std::filesystem;

inline std::size_t threads_from_env() {
  const char* v = std::getenv("SSL_LAB_THREADS");
  if (v == nullptr || *v == '\0') return 1;
  try {
    const long n = std::stol(v);
    return n < 1 ? 1 : static_cast<std::size_t>(n);
  } catch (const std::exception&) {
    throw ConfigError("SSL_LAB_THREADS must be a positive integer");
  }
}

/// Collects output paths so they can be listed once everything is written.
class OutputDir {
 public:
  explicit OutputDir(fs::path root) : root_(std::move(root)) { fs::create_directories(root_); }

  template <typename Writer>
  void write(const std::string& name, Writer&& writer) {
    const fs::path p = root_ / name;
    std::ofstream f(p, std::ios::binary);
    if (!f) throw Error("cannot write " + p.string());
    writer(f);
    if (!f) throw Error("write failed for " + p.string());
    files_.push_back(p);
  }

  void json(const std::string& name, const nlohmann::json& j) {
    write(name, [&](std::ostream& os) { os << j.dump(2) << '\n'; });
  }

  void add(const std::vector<fs::path>& paths) { files_.insert(files_.end(), paths.begin(), paths.end()); }

  const fs::path& root() const { return root_; }
  const std::vector<fs::path>& files() const { return files_; }

 private:
  fs::path root_;
  std::vector<fs::path> files_;
};

inline std::string method_tag(const MethodConfig& m) { return std::string(method_name(m.method)); }

/// Tunes (when configured) and trains one method on one split.
inline RunRecord fit(const ExperimentSpec& spec, const MethodConfig& method, const SslSplit& split, std::uint64_t seed,
                     std::size_t threads, OutputDir& out) {
  MethodConfig m = method;
  TrainConfig t = spec.train;
  if (spec.tune) {
    const TuneResult tr = tune(method, split, *spec.tune, spec.train, threads);
    out.json(fmt::format("tune_{}_seed{}.json", method_tag(method), seed), to_json(tr));
    m = tr.best_method;
    t = tr.best_train;
  }
  return train(split, m, t, seed);
}

inline void run_train(const ExperimentSpec& spec, std::size_t threads, OutputDir& out) {
  auto [data, generator] = make_dataset(spec.dataset);
  for (std::uint64_t seed : spec.seeds) {
    SslSplit split = split_ssl(data, spec.split, seed);
    split.provenance.generator = generator;
    out.add(write_split(split, out.root(), fmt::format("split_seed{}", seed)));
    for (const MethodConfig& m : spec.methods) {
      const RunRecord r = fit(spec, m, split, seed, threads, out);
      out.json(fmt::format("run_{}_seed{}.json", method_tag(m), seed), to_json(r));
      out.json(fmt::format("params_{}_seed{}.json", method_tag(m), seed), to_json(r.selected_parameters));
    }
  }
}

inline void write_sweep(const SweepResult& r, OutputDir& out) {
  out.write("sweep_" + r.axis + "_cells.csv", [&](std::ostream& os) { write_cells_csv(os, r); });
  out.write("sweep_" + r.axis + "_summary.csv", [&](std::ostream& os) { write_summary_csv(os, r); });
}

inline std::vector<std::size_t> as_counts(const std::vector<double>& values) {
  std::vector<std::size_t> out;
  for (double v : values) {
    if (!(v >= 0.0) || v != static_cast<double>(static_cast<std::size_t>(v))) {
      throw ConfigError("sweep_values must be nonnegative integers for count sweeps");
    }
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

inline void run_sweep(const ExperimentSpec& spec, std::size_t threads, OutputDir& out) {
  const auto [data, generator] = make_dataset(spec.dataset);
  SweepSettings settings{spec.split, spec.train, spec.seeds, threads};
  switch (spec.kind) {
    case ExperimentKind::sweep_labeled:
      write_sweep(sweep_labeled(spec.methods, data, as_counts(spec.sweep_values), settings), out);
      break;
    case ExperimentKind::sweep_unlabeled:
      write_sweep(sweep_unlabeled(spec.methods, data, as_counts(spec.sweep_values), settings), out);
      break;
    case ExperimentKind::sweep_mismatch:
      write_sweep(sweep_mismatch(spec.methods, data, spec.sweep_values, settings), out);
      break;
    default: break;
  }
}

inline void run_valsize(const ExperimentSpec& spec, std::size_t threads, OutputDir& out) {
  auto [data, generator] = make_dataset(spec.dataset);
  const std::uint64_t seed = spec.seeds.front();
  SslSplit split = split_ssl(data, spec.split, seed);
  std::vector<StudyModel> models;
  for (const MethodConfig& m : spec.methods) {
    const RunRecord r = fit(spec, m, split, seed, threads, out);
    models.push_back({method_tag(m), r.selected_parameters});
  }
  const auto sizes = study_sizes(spec.valsize.fractions, split.labeled.size());
  const StudyMode mode = spec.valsize.mode == "relative" ? StudyMode::relative : StudyMode::absolute;
  const auto cells = validation_size_study(models, split.validation, sizes, spec.valsize.k, mode, spec.valsize.reference, seed);
  out.write("valsize_cells.csv", [&](std::ostream& os) { write_cells_csv(os, cells); });
  out.write("valsize_summary.csv", [&](std::ostream& os) { write_summary_csv(os, cells); });
}

inline void run_boundary(const ExperimentSpec& spec, const std::optional<std::string>& params_path, std::size_t threads,
                         OutputDir& out) {
  if (params_path) {
    std::ifstream f(*params_path);
    if (!f) throw ConfigError("cannot read parameter file " + *params_path);
    nlohmann::json j;
    try {
      f >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("parameter file: " + std::string(e.what()));
    }
    const ParameterSet p = parameters_from_json(j);
    const BoundaryGrid g = boundary_grid(p, spec.boundary);
    out.write("boundary.csv", [&](std::ostream& os) { write_boundary_csv(os, g); });
    return;
  }
  auto [data, generator] = make_dataset(spec.dataset);
  const std::uint64_t seed = spec.seeds.front();
  const SslSplit split = split_ssl(data, spec.split, seed);
  for (const MethodConfig& m : spec.methods) {
    const RunRecord r = fit(spec, m, split, seed, threads, out);
    const BoundaryGrid g = boundary_grid(r.selected_parameters, spec.boundary);
    out.write(fmt::format("boundary_{}.csv", method_tag(m)), [&](std::ostream& os) { write_boundary_csv(os, g); });
  }
}

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot read config file " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace cli_detail

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  using namespace cli_detail;
  CLI::App app{"Semi-supervised learning laboratory on synthetic 2-D data", "ssl_lab"};
  app.require_subcommand(1);

  struct Common {
    std::optional<std::string> config;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::vector<std::string> methods;
    std::optional<std::size_t> steps;
  };
  std::vector<Common> common(std::size(kAllExperiments));
  std::optional<double> confidence, p;
  std::optional<std::size_t> n;
  std::optional<std::string> params_path;
  std::optional<std::size_t> resolution;

  std::vector<CLI::App*> subs;
  for (std::size_t i = 0; i < std::size(kAllExperiments); ++i) {
    const ExperimentKind kind = kAllExperiments[i];
    CLI::App* sub = app.add_subcommand(std::string(experiment_name(kind)));
    Common& c = common[i];
    sub->add_option("--config", c.config, "experiment configuration (JSON)");
    sub->add_option("--seed", c.seed, "run a single seed instead of the configured list");
    sub->add_option("--out", c.out, "output directory");
    sub->add_option("--method", c.methods, "method to run with its defaults (repeatable)");
    if (kind == ExperimentKind::hoeffding) {
      sub->description("validation-set size needed for a Hoeffding guarantee");
      sub->add_option("--confidence", confidence, "required confidence in (0,1)");
      sub->add_option("--p", p, "maximum deviation in (0,1)");
      sub->add_option("--n", n, "report the confidence reached by this many examples instead");
    } else {
      sub->add_option("--steps", c.steps, "override train.total_steps");
    }
    if (kind == ExperimentKind::boundary) {
      sub->add_option("--params", params_path, "parameter checkpoint to grid instead of training");
      sub->add_option("--resolution", resolution, "grid resolution");
    }
    subs.push_back(sub);
  }

  try {
    std::vector<std::string> args;
    for (int i = argc - 1; i > 0; --i) args.emplace_back(argv[i]);
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }

  std::size_t which = 0;
  for (std::size_t i = 0; i < subs.size(); ++i) {
    if (subs[i]->parsed()) which = i;
  }
  const ExperimentKind kind = kAllExperiments[which];
  const Common& c = common[which];

  try {
    ExperimentSpec spec;
    spec.kind = kind;
    if (c.config) {
      spec = parse_config(read_file(*c.config));
      nlohmann::json raw = nlohmann::json::parse(read_file(*c.config));
      if (raw.contains("experiment") && spec.kind != kind) {
        throw ConfigError("config is for '" + std::string(experiment_name(spec.kind)) + "' but subcommand is '" +
                          std::string(experiment_name(kind)) + "'");
      }
      if (!raw.contains("experiment")) {
        spec.kind = kind;
        if (!raw.contains("sweep_values")) spec.sweep_values = default_sweep_values(kind);
      }
    } else if (kind != ExperimentKind::hoeffding && !(kind == ExperimentKind::boundary && params_path)) {
      err << "error: --config is required for " << experiment_name(kind) << "\n\n" << subs[which]->help();
      return 1;
    }

    if (kind == ExperimentKind::hoeffding) {
      const double conf = confidence.value_or(spec.hoeffding.confidence);
      const double dev = p.value_or(spec.hoeffding.p);
      if (n) {
        out << fmt::format("{}", hoeffding_confidence(*n, dev)) << '\n';
      } else {
        out << hoeffding_n(conf, dev) << '\n';
      }
      return 0;
    }

    if (c.seed) spec.seeds = {*c.seed};
    if (c.out) spec.output_dir = *c.out;
    if (!c.methods.empty()) {
      spec.methods.clear();
      for (const auto& m : c.methods) spec.methods.push_back(default_method_config(parse_method(m)));
    }
    if (c.steps) spec.train.total_steps = *c.steps;
    if (resolution) spec.boundary.resolution = *resolution;
    validate(spec.train);
    validate(spec);

    const std::size_t threads = threads_from_env();
    OutputDir dir(spec.output_dir);
    switch (kind) {
      case ExperimentKind::train: run_train(spec, threads, dir); break;
      case ExperimentKind::sweep_labeled:
      case ExperimentKind::sweep_unlabeled:
      case ExperimentKind::sweep_mismatch: run_sweep(spec, threads, dir); break;
      case ExperimentKind::valsize_study: run_valsize(spec, threads, dir); break;
      case ExperimentKind::boundary: run_boundary(spec, params_path, threads, dir); break;
      case ExperimentKind::hoeffding: break;
    }
    for (const auto& f : dir.files()) out << f.string() << '\n';
    return 0;
  } catch (const ConfigError& e) {
    err << "configuration error: " << e.what() << '\n';
    return 1;
  } catch (const SizeError& e) {
    err << "configuration error: " << e.what() << '\n';
    return 1;
  } catch (const LabelError& e) {
    err << "configuration error: " << e.what() << '\n';
    return 1;
  } catch (const nlohmann::json::exception& e) {
    err << "configuration error: " << e.what() << '\n';
    return 1;
  } catch (const DivergenceError& e) {
    err << "diverged: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
}

}  // namespace ssl_lab
