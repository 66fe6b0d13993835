#pragma once

#include <fmt/format.h>

#include <cstddef>
#include <ostream>
#include <vector>

#include "ssl_lab/model.hpp"
#include "ssl_lab/training.hpp"

namespace ssl_lab {

/// Class probabilities of a model over a regular lattice, for decision-boundary plots.
struct BoundaryGrid {
  EvaluationGrid extent;
  Matrix points;         // g^2 x 2, x varies fastest
  Matrix probabilities;  // g^2 x K
  std::vector<int> argmax;
};

/// Deterministic forward pass at every lattice point.
inline BoundaryGrid boundary_grid(const ParameterSet& params, const EvaluationGrid& extent) {
  BoundaryGrid g;
  g.extent = extent;
  g.points = grid_points(extent);
  g.probabilities = predict_proba(params, g.points);
  g.argmax = argmax_rows(g.probabilities);
  return g;
}

/// x,y,p_0..p_{K-1},argmax
inline void write_boundary_csv(std::ostream& os, const BoundaryGrid& g) {
  os << "x,y";
  for (Eigen::Index k = 0; k < g.probabilities.cols(); ++k) os << ",p_" << k;
  os << ",argmax\n";
  for (Eigen::Index r = 0; r < g.points.rows(); ++r) {
    os << fmt::format("{},{}", g.points(r, 0), g.points(r, 1));
    for (Eigen::Index k = 0; k < g.probabilities.cols(); ++k) os << ',' << fmt::format("{}", g.probabilities(r, k));
    os << ',' << g.argmax[static_cast<std::size_t>(r)] << '\n';
  }
}

}  // namespace ssl_lab
