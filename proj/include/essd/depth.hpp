#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "essd/graph.hpp"
#include "essd/rational.hpp"

namespace essd {

/// Weighted average depth of `layer`: the data layer has depth 0, and
///   D(L) = sum_i w_i * (D(input_i) + [L is a weight layer])
/// with w_i = the layer's input weights (1/2 each for elementwise fusion),
/// 1/k for an unweighted k-input concat, and 1 for single-input layers.
/// BN, ReLU, pooling and merge layers add no depth of their own, so the first
/// conv on the data layer has depth 1.
Rational weighted_average_depth(const NetGraph& graph, const std::string& layer);

/// Depth of every layer, memoized over one topological sweep.
std::vector<Rational> all_depths(const NetGraph& graph);

/// Population coefficient of variation in percent: 100 * sqrt(var) / mean.
/// Throws std::invalid_argument on an empty list or zero mean.
double coefficient_of_variation(std::span<const Rational> depths);

struct SourceDepth {
  std::string name;
  std::size_t scale = 0;  // spatial extent of the source feature map
  Rational depth;
};

struct DepthReport {
  std::vector<SourceDepth> sources;
  double cv_percent = 0.0;

  std::vector<Rational> depths() const;
};

/// Depth of each prediction source (the head's feature input, excluding the
/// heads and any extra prediction conv) plus the coefficient of variation.
DepthReport analyze(const NetGraph& graph);

nlohmann::json to_json(const DepthReport& report);

}  // namespace essd
