#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "essd/anchors.hpp"
#include "essd/dataset.hpp"
#include "essd/graph.hpp"
#include "essd/loss.hpp"
#include "essd/model.hpp"

namespace essd {

struct Segment {
  double learning_rate = 0;
  std::size_t iterations = 0;
  bool operator==(const Segment&) const = default;
};

enum class PhaseScope {
  all,         // every parameter trains
  new_layers,  // only layers absent from the plain SSD graph
  listed,      // exactly the layers in Phase::trainable
};

struct Phase {
  PhaseScope scope = PhaseScope::all;
  std::vector<std::string> trainable;  // PhaseScope::listed only
  std::vector<Segment> segments;

  std::size_t total_iterations() const;
};

struct PhasePlan {
  std::vector<Phase> phases;

  /// Integer-divides every iteration count by `factor` (minimum 1).
  PhasePlan scaled(std::size_t factor) const;
  std::size_t total_iterations() const;
};

/// Three steps: (1) the plain SSD at 1e-3/80K, 1e-4/20K, 1e-5/20K; (2) only
/// the added layers at 1e-3/20K, 1e-4/25K; (3) everything at 1e-3/20K,
/// 1e-4/20K, 1e-5/30K, 1e-6/20K.
PhasePlan canonical_phase_plan();

/// Learning rate of a 1-based phase at a 0-based iteration within it.
double lr_at(const PhasePlan& plan, std::size_t phase, std::size_t iteration);

/// Throws std::invalid_argument when iteration counts are zero or learning
/// rates are non-positive or increase within a phase.
void check_plan(const PhasePlan& plan);

/// Momentum SGD velocity per parameter name.
using Velocity = std::map<std::string, Tensor>;

/// v <- momentum*v + grad + weight_decay*w; w <- w - lr*v. Parameters of
/// frozen layers (and their velocity) are left untouched. Throws when a
/// trainable parameter has no gradient.
void sgd_step(WeightStore& weights, const std::map<std::string, Tensor>& grads, Velocity& velocity, double lr,
              double momentum, double weight_decay, const std::set<std::string>& frozen_layers,
              const std::vector<ParamSpec>& specs);

struct AnchorConfig {
  double min_size = 0.1;
  double max_size = 0.8;
  std::vector<double> aspect_ratios{1.0, 2.0, 0.5};
};

/// Geometric progression of anchor sizes from min_size to max_size across the
/// graph's prediction sources, one box per aspect ratio per cell.
AnchorSet anchors_for(const NetGraph& graph, const AnchorConfig& cfg = {});

struct TrainConfig {
  std::size_t batch_size = 8;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::uint64_t seed = 0;
  PhasePlan plan;
  std::size_t dataset_size = 16;
  SynthConfig dataset;
  AnchorConfig anchors;
  MultiboxConfig loss;
  double match_threshold = 0.5;
};

struct LogRecord {
  std::size_t phase = 0;      // 1-based
  std::size_t iteration = 0;  // within the phase
  double learning_rate = 0;
  LossBreakdown loss;
};

nlohmann::json to_json(const LogRecord& rec);

struct TrainResult {
  WeightStore weights;
  std::vector<LogRecord> log;
};

using LogSink = std::function<void(const LogRecord&)>;

/// Runs one phase on `graph`. Velocity starts at zero. `frozen` names layers
/// whose parameters stay fixed; their batch norms run on running statistics.
TrainResult run_phase(const NetGraph& graph, WeightStore weights, const Phase& phase, std::size_t phase_number,
                      const TrainConfig& config, const std::vector<SynthSample>& data,
                      const std::set<std::string>& frozen, const LogSink& sink = {});

/// Frozen layer set for a phase: empty for `all`; every parameterized layer
/// of the SSD base for `new_layers`; the complement of the list for `listed`
/// (throws when the list names an unknown layer).
std::set<std::string> frozen_layers(const Phase& phase, const NetGraph& graph, const NetGraph* ssd_base);

/// Trains on the synthetic dataset described by the config. For an ESSD
/// graph, phase 1 trains `ssd_base`, later phases start from its weights
/// (new layers freshly initialized) and train `graph`. With no base, every
/// phase trains `graph`. A phase with nothing left to train (phase 2 when
/// `ssd_base` is `graph` itself) is skipped. `phases` selects 1-based phase numbers to run
/// (empty = all); `init` seeds the weights.
TrainResult train(const NetGraph& graph, const TrainConfig& config, const NetGraph* ssd_base = nullptr,
                  const std::vector<std::size_t>& phases = {}, const WeightStore* init = nullptr,
                  const LogSink& sink = {});

}  // namespace essd
