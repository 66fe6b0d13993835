#pragma once

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "ssl_lab/autodiff.hpp"
#include "ssl_lab/error.hpp"
#include "ssl_lab/rng.hpp"

namespace ssl_lab {

struct Dataset {
  Matrix points;            // n x d
  std::vector<int> labels;  // n entries in [0, classes)
  int classes = 0;

  std::size_t size() const { return labels.size(); }

  friend bool operator==(const Dataset& a, const Dataset& b) {
    return a.classes == b.classes && a.labels == b.labels && a.points.rows() == b.points.rows() &&
           a.points.cols() == b.points.cols() && a.points == b.points;
  }
};

inline void validate(const Dataset& d) {
  if (static_cast<std::size_t>(d.points.rows()) != d.labels.size()) throw ShapeError("dataset: point/label count mismatch");
  if (!d.points.allFinite()) throw ConfigError("dataset: non-finite point");
  for (int y : d.labels) {
    if (y < 0 || y >= d.classes) throw LabelError("dataset: label " + std::to_string(y) + " out of range");
  }
}

inline Dataset select_rows(const Dataset& d, const std::vector<std::size_t>& idx) {
  Dataset out;
  out.classes = d.classes;
  out.points.resize(static_cast<Eigen::Index>(idx.size()), d.points.cols());
  out.labels.reserve(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    out.points.row(static_cast<Eigen::Index>(i)) = d.points.row(static_cast<Eigen::Index>(idx[i]));
    out.labels.push_back(d.labels[idx[i]]);
  }
  return out;
}

/// Per-class counts.
inline std::vector<std::size_t> class_counts(const Dataset& d) {
  std::vector<std::size_t> counts(static_cast<std::size_t>(d.classes), 0);
  for (int y : d.labels) ++counts[static_cast<std::size_t>(y)];
  return counts;
}

// ---------------------------------------------------------------------------
// Generators

/// Upper moon (cos t, sin t) is class 0, lower moon (1 - cos t, 0.5 - sin t)
/// is class 1, t ~ U[0, pi], plus isotropic Gaussian noise.
inline Dataset two_moons(std::size_t n, double noise_std, std::uint64_t seed) {
  if (n < 2 || n % 2 != 0) throw ConfigError("two_moons: n must be even and >= 2");
  if (!(noise_std >= 0.0)) throw ConfigError("two_moons: noise_std must be >= 0");
  RngStream rng(seed);
  Dataset d;
  d.classes = 2;
  d.points.resize(static_cast<Eigen::Index>(n), 2);
  d.labels.resize(n);
  const std::size_t half = n / 2;
  for (std::size_t i = 0; i < n; ++i) {
    const double t = rng.uniform(0.0, std::numbers::pi);
    const bool upper = i < half;
    double x = upper ? std::cos(t) : 1.0 - std::cos(t);
    double y = upper ? std::sin(t) : 0.5 - std::sin(t);
    if (noise_std > 0.0) {
      x += rng.normal(0.0, noise_std);
      y += rng.normal(0.0, noise_std);
    }
    d.points(static_cast<Eigen::Index>(i), 0) = x;
    d.points(static_cast<Eigen::Index>(i), 1) = y;
    d.labels[i] = upper ? 0 : 1;
  }
  return d;
}

/// Mean of cluster k: radius * (cos(2 pi k / K), sin(2 pi k / K)).
inline Matrix cluster_means(int classes, double radius) {
  Matrix means(classes, 2);
  for (int k = 0; k < classes; ++k) {
    const double a = 2.0 * std::numbers::pi * k / classes;
    means(k, 0) = radius * std::cos(a);
    means(k, 1) = radius * std::sin(a);
  }
  return means;
}

inline Dataset gaussian_clusters(int classes, std::size_t per_class, double radius, double cluster_std,
                                 std::uint64_t seed) {
  if (classes < 2) throw ConfigError("gaussian_clusters: need at least 2 classes");
  if (!(cluster_std >= 0.0) || !(radius >= 0.0)) throw ConfigError("gaussian_clusters: radius and std must be >= 0");
  RngStream rng(seed);
  const Matrix means = cluster_means(classes, radius);
  Dataset d;
  d.classes = classes;
  const std::size_t n = per_class * static_cast<std::size_t>(classes);
  d.points.resize(static_cast<Eigen::Index>(n), 2);
  d.labels.resize(n);
  std::size_t i = 0;
  for (int k = 0; k < classes; ++k) {
    for (std::size_t j = 0; j < per_class; ++j, ++i) {
      const auto row = static_cast<Eigen::Index>(i);
      d.points(row, 0) = means(k, 0) + (cluster_std > 0.0 ? rng.normal(0.0, cluster_std) : 0.0);
      d.points(row, 1) = means(k, 1) + (cluster_std > 0.0 ? rng.normal(0.0, cluster_std) : 0.0);
      d.labels[i] = k;
    }
  }
  return d;
}

// ---------------------------------------------------------------------------
// Splits

struct SplitSizes {
  std::size_t labeled = 0;
  std::size_t unlabeled = 0;
  std::size_t validation = 0;
  std::size_t test = 0;

  std::size_t total() const { return labeled + unlabeled + validation + test; }
  friend bool operator==(const SplitSizes&, const SplitSizes&) = default;
};

struct SplitProvenance {
  std::uint64_t seed = 0;
  SplitSizes sizes;
  std::size_t source_size = 0;
  std::vector<int> labeled_classes;
  std::vector<int> unlabeled_classes;
  double overlap = 1.0;
  nlohmann::json generator;  // parameters of the source dataset, filled by callers
};

/// Labeled / unlabeled / validation / test partition of one source dataset.
/// Audit labels of the unlabeled part are kept apart from the points so
/// training code only ever sees `unlabeled_points`.
struct SslSplit {
  Dataset labeled;
  Matrix unlabeled_points;
  std::vector<int> unlabeled_audit_labels;
  Dataset validation;
  Dataset test;
  SplitProvenance provenance;

  // Row indices into the source dataset.
  std::vector<std::size_t> labeled_index, unlabeled_index, validation_index, test_index;

  int classes() const { return labeled.classes; }
};

namespace detail {

template <typename T>
void shuffle_in_place(std::vector<T>& v, RngStream& rng) {
  // Fisher-Yates with our own index draws so results do not depend on std::shuffle.
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.index(i)]);
}

/// Draws `total` indices spread as evenly as possible across `classes`
/// (earlier classes get the remainder), removing them from `pools`.
inline std::vector<std::size_t> stratified_take(std::vector<std::vector<std::size_t>>& pools,
                                                const std::vector<int>& classes, std::size_t total,
                                                const char* what) {
  std::vector<std::size_t> out;
  const std::size_t k = classes.size();
  for (std::size_t c = 0; c < k; ++c) {
    const std::size_t want = total / k + (c < total % k ? 1 : 0);
    auto& pool = pools[static_cast<std::size_t>(classes[c])];
    if (pool.size() < want) {
      throw SizeError(std::string(what) + ": class " + std::to_string(classes[c]) + " has " +
                      std::to_string(pool.size()) + " points, need " + std::to_string(want));
    }
    out.insert(out.end(), pool.end() - static_cast<std::ptrdiff_t>(want), pool.end());
    pool.resize(pool.size() - want);
  }
  return out;
}

inline std::vector<std::vector<std::size_t>> class_pools(const Dataset& d, RngStream& rng) {
  std::vector<std::vector<std::size_t>> pools(static_cast<std::size_t>(d.classes));
  for (std::size_t i = 0; i < d.size(); ++i) pools[static_cast<std::size_t>(d.labels[i])].push_back(i);
  for (auto& p : pools) shuffle_in_place(p, rng);
  return pools;
}

inline void fill_parts(const Dataset& data, SslSplit& s) {
  s.labeled = select_rows(data, s.labeled_index);
  const Dataset unl = select_rows(data, s.unlabeled_index);
  s.unlabeled_points = unl.points;
  s.unlabeled_audit_labels = unl.labels;
  s.validation = select_rows(data, s.validation_index);
  s.test = select_rows(data, s.test_index);
}

}  // namespace detail

/// Class-stratified labeled set; validation, test and unlabeled points are then
/// drawn (in that order) without replacement from the remainder.
inline SslSplit split_ssl(const Dataset& data, const SplitSizes& sizes, std::uint64_t seed) {
  validate(data);
  if (sizes.total() > data.size()) {
    throw SizeError("split_ssl: requested " + std::to_string(sizes.total()) + " points from " + std::to_string(data.size()));
  }
  if (sizes.labeled < static_cast<std::size_t>(data.classes)) {
    throw SizeError("split_ssl: need at least one labeled point per class");
  }
  RngStream rng(seed);
  auto pools = detail::class_pools(data, rng);
  std::vector<int> all_classes(static_cast<std::size_t>(data.classes));
  for (int k = 0; k < data.classes; ++k) all_classes[static_cast<std::size_t>(k)] = k;

  SslSplit s;
  s.labeled_index = detail::stratified_take(pools, all_classes, sizes.labeled, "split_ssl");
  std::vector<std::size_t> rest;
  for (const auto& p : pools) rest.insert(rest.end(), p.begin(), p.end());
  std::sort(rest.begin(), rest.end());
  detail::shuffle_in_place(rest, rng);
  auto take = [&rest, pos = std::size_t{0}](std::size_t n) mutable {
    std::vector<std::size_t> out(rest.begin() + static_cast<std::ptrdiff_t>(pos),
                                 rest.begin() + static_cast<std::ptrdiff_t>(pos + n));
    pos += n;
    return out;
  };
  s.validation_index = take(sizes.validation);
  s.test_index = take(sizes.test);
  s.unlabeled_index = take(sizes.unlabeled);
  detail::fill_parts(data, s);
  s.provenance.seed = seed;
  s.provenance.sizes = sizes;
  s.provenance.source_size = data.size();
  s.provenance.labeled_classes = all_classes;
  s.provenance.unlabeled_classes = all_classes;
  s.provenance.overlap = 1.0;
  return s;
}

/// Labeled, validation and test parts use only `labeled_classes`; the
/// unlabeled pool is drawn evenly from `unlabeled_classes`. The labeled-side
/// parts depend only on (data, labeled_classes, sizes, seed).
inline SslSplit mismatch_split(const Dataset& data, const std::set<int>& labeled_classes,
                               const std::set<int>& unlabeled_classes, const SplitSizes& sizes, std::uint64_t seed) {
  validate(data);
  if (labeled_classes.empty() || unlabeled_classes.empty()) throw ConfigError("mismatch_split: class sets must be nonempty");
  for (const auto* set : {&labeled_classes, &unlabeled_classes}) {
    for (int c : *set) {
      if (c < 0 || c >= data.classes) throw ConfigError("mismatch_split: class " + std::to_string(c) + " out of range");
    }
  }
  if (sizes.labeled < labeled_classes.size()) throw SizeError("mismatch_split: need one labeled point per labeled class");

  RngStream rng(seed);
  auto pools = detail::class_pools(data, rng);
  const std::vector<int> lab(labeled_classes.begin(), labeled_classes.end());
  const std::vector<int> unl(unlabeled_classes.begin(), unlabeled_classes.end());

  SslSplit s;
  s.labeled_index = detail::stratified_take(pools, lab, sizes.labeled, "mismatch_split");
  std::vector<std::size_t> rest;
  for (int c : lab) rest.insert(rest.end(), pools[static_cast<std::size_t>(c)].begin(), pools[static_cast<std::size_t>(c)].end());
  std::sort(rest.begin(), rest.end());
  detail::shuffle_in_place(rest, rng);
  if (sizes.validation + sizes.test > rest.size()) throw SizeError("mismatch_split: not enough labeled-class points");
  s.validation_index.assign(rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(sizes.validation));
  s.test_index.assign(rest.begin() + static_cast<std::ptrdiff_t>(sizes.validation),
                      rest.begin() + static_cast<std::ptrdiff_t>(sizes.validation + sizes.test));

  // Unused labeled-class points, then the untouched other classes, feed the unlabeled draw.
  std::vector<std::vector<std::size_t>> remaining(static_cast<std::size_t>(data.classes));
  const std::set<std::size_t> used_val_test(rest.begin(),
                                            rest.begin() + static_cast<std::ptrdiff_t>(sizes.validation + sizes.test));
  for (int c = 0; c < data.classes; ++c) {
    for (std::size_t i : pools[static_cast<std::size_t>(c)]) {
      if (!used_val_test.count(i)) remaining[static_cast<std::size_t>(c)].push_back(i);
    }
    std::sort(remaining[static_cast<std::size_t>(c)].begin(), remaining[static_cast<std::size_t>(c)].end());
  }
  RngStream unl_rng = rng.derive("unlabeled");
  for (auto& p : remaining) detail::shuffle_in_place(p, unl_rng);
  s.unlabeled_index = detail::stratified_take(remaining, unl, sizes.unlabeled, "mismatch_split");
  detail::fill_parts(data, s);

  std::size_t shared = 0;
  for (int c : unl) shared += labeled_classes.count(c);
  s.provenance.seed = seed;
  s.provenance.sizes = sizes;
  s.provenance.source_size = data.size();
  s.provenance.labeled_classes = lab;
  s.provenance.unlabeled_classes = unl;
  s.provenance.overlap = static_cast<double>(shared) / static_cast<double>(unl.size());
  return s;
}

/// k pairwise-disjoint index sets of exactly `set_size`, drawn without replacement.
inline std::vector<std::vector<std::size_t>> subsample_indices(std::size_t pool_size, std::size_t set_size,
                                                               std::size_t k, std::uint64_t seed) {
  if (set_size == 0 || k == 0) throw SizeError("subsample_validation: set size and count must be positive");
  if (k * set_size > pool_size) {
    throw SizeError("subsample_validation: " + std::to_string(k) + " x " + std::to_string(set_size) +
                    " exceeds pool of " + std::to_string(pool_size));
  }
  std::vector<std::size_t> order(pool_size);
  for (std::size_t i = 0; i < pool_size; ++i) order[i] = i;
  RngStream rng(seed);
  detail::shuffle_in_place(order, rng);
  std::vector<std::vector<std::size_t>> sets(k);
  for (std::size_t j = 0; j < k; ++j) {
    sets[j].assign(order.begin() + static_cast<std::ptrdiff_t>(j * set_size),
                   order.begin() + static_cast<std::ptrdiff_t>((j + 1) * set_size));
  }
  return sets;
}

inline std::vector<Dataset> subsample_validation(const Dataset& validation, std::size_t set_size, std::size_t k,
                                                 std::uint64_t seed) {
  std::vector<Dataset> out;
  for (const auto& idx : subsample_indices(validation.size(), set_size, k, seed)) out.push_back(select_rows(validation, idx));
  return out;
}

// ---------------------------------------------------------------------------
// Export

inline void write_csv(std::ostream& os, const Matrix& points, const std::vector<int>& labels) {
  for (Eigen::Index c = 0; c < points.cols(); ++c) os << 'x' << (c + 1) << ',';
  os << "label\n";
  for (Eigen::Index r = 0; r < points.rows(); ++r) {
    for (Eigen::Index c = 0; c < points.cols(); ++c) os << fmt::format("{}", points(r, c)) << ',';
    os << labels[static_cast<std::size_t>(r)] << '\n';
  }
}

inline void write_csv(std::ostream& os, const Dataset& d) { write_csv(os, d.points, d.labels); }

inline nlohmann::json to_json(const SplitProvenance& p) {
  return {{"seed", p.seed},
          {"sizes",
           {{"labeled", p.sizes.labeled},
            {"unlabeled", p.sizes.unlabeled},
            {"validation", p.sizes.validation},
            {"test", p.sizes.test}}},
          {"source_size", p.source_size},
          {"labeled_classes", p.labeled_classes},
          {"unlabeled_classes", p.unlabeled_classes},
          {"overlap", p.overlap},
          {"generator", p.generator.is_null() ? nlohmann::json::object() : p.generator}};
}

/// Writes <prefix>_{labeled,unlabeled,validation,test}.csv and <prefix>_provenance.json.
/// The unlabeled CSV carries audit labels for analysis. Returns the written paths.
inline std::vector<std::filesystem::path> write_split(const SslSplit& s, const std::filesystem::path& dir,
                                                      const std::string& prefix = "split") {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> written;
  auto open = [&](const std::string& name) {
    written.push_back(dir / (prefix + "_" + name));
    std::ofstream f(written.back(), std::ios::binary);
    if (!f) throw Error("cannot write " + written.back().string());
    return f;
  };
  {
    auto f = open("labeled.csv");
    write_csv(f, s.labeled);
  }
  {
    auto f = open("unlabeled.csv");
    write_csv(f, s.unlabeled_points, s.unlabeled_audit_labels);
  }
  {
    auto f = open("validation.csv");
    write_csv(f, s.validation);
  }
  {
    auto f = open("test.csv");
    write_csv(f, s.test);
  }
  {
    auto f = open("provenance.json");
    f << to_json(s.provenance).dump(2) << '\n';
  }
  return written;
}

}  // namespace ssl_lab
