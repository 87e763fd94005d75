#include "essd/depth.hpp"

#include <cmath>
#include <stdexcept>

namespace essd {
namespace {

Rational input_weight(const LayerSpec& l, std::size_t i) {
  if (!l.params.input_weights.empty()) return l.params.input_weights.at(i);
  return Rational(1, static_cast<std::int64_t>(l.inputs.size()));
}

}  // namespace

std::vector<Rational> all_depths(const NetGraph& graph) {
  const auto& layers = graph.layers();
  std::vector<Rational> depth(layers.size());
  std::map<std::string, std::size_t, std::less<>> index;
  for (std::size_t i = 0; i < layers.size(); ++i) index.emplace(layers[i].name, i);
  for (std::size_t i : graph.topo_order()) {
    const LayerSpec& l = layers[i];
    if (l.kind == LayerKind::data) continue;
    const Rational step = is_weight_layer(l.kind) ? Rational(1) : Rational(0);
    Rational d;
    for (std::size_t k = 0; k < l.inputs.size(); ++k) {
      d += input_weight(l, k) * (depth[index.at(l.inputs[k])] + step);
    }
    depth[i] = d;
  }
  return depth;
}

Rational weighted_average_depth(const NetGraph& graph, const std::string& layer) {
  if (!graph.contains(layer)) throw std::out_of_range("unknown layer '" + layer + "'");
  const auto depths = all_depths(graph);
  const auto& layers = graph.layers();
  for (std::size_t i = 0; i < layers.size(); ++i)
    if (layers[i].name == layer) return depths[i];
  throw std::out_of_range("unknown layer '" + layer + "'");
}

double coefficient_of_variation(std::span<const Rational> depths) {
  if (depths.empty()) throw std::invalid_argument("coefficient of variation of an empty list");
  const Rational n(static_cast<std::int64_t>(depths.size()));
  Rational sum;
  for (const auto& d : depths) sum += d;
  const Rational mean = sum / n;
  if (mean == Rational(0)) throw std::invalid_argument("coefficient of variation with zero mean");
  Rational sq;
  for (const auto& d : depths) sq += (d - mean) * (d - mean);
  const Rational var = sq / n;
  return 100.0 * std::sqrt(var.to_double()) / mean.to_double();
}

std::vector<Rational> DepthReport::depths() const {
  std::vector<Rational> out;
  out.reserve(sources.size());
  for (const auto& s : sources) out.push_back(s.depth);
  return out;
}

DepthReport analyze(const NetGraph& graph) {
  if (graph.prediction_sources().empty()) throw std::invalid_argument("graph has no prediction sources");
  const auto depths = all_depths(graph);
  const auto& layers = graph.layers();
  DepthReport report;
  for (const auto& src : graph.prediction_sources()) {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (layers[i].name == src) {
        report.sources.push_back({src, graph.shape(src).height, depths[i]});
        break;
      }
    }
  }
  const auto ds = report.depths();
  report.cv_percent = coefficient_of_variation(ds);
  return report;
}

nlohmann::json to_json(const DepthReport& report) {
  nlohmann::json sources = nlohmann::json::array();
  for (const auto& s : report.sources) {
    sources.push_back({{"name", s.name},
                       {"scale", s.scale},
                       {"depth_rational", s.depth.str()},
                       {"depth", s.depth.to_double()}});
  }
  return {{"sources", sources}, {"cv_percent", std::round(report.cv_percent * 100.0) / 100.0}};
}

}  // namespace essd
