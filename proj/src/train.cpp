#include "essd/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

namespace essd {

std::size_t Phase::total_iterations() const {
  std::size_t n = 0;
  for (const auto& s : segments) n += s.iterations;
  return n;
}

PhasePlan PhasePlan::scaled(std::size_t factor) const {
  if (factor == 0) throw std::invalid_argument("plan scale factor must be positive");
  PhasePlan out = *this;
  for (auto& p : out.phases)
    for (auto& s : p.segments) s.iterations = std::max<std::size_t>(1, s.iterations / factor);
  return out;
}

std::size_t PhasePlan::total_iterations() const {
  std::size_t n = 0;
  for (const auto& p : phases) n += p.total_iterations();
  return n;
}

PhasePlan canonical_phase_plan() {
  PhasePlan plan;
  plan.phases.push_back({PhaseScope::all, {}, {{1e-3, 80000}, {1e-4, 20000}, {1e-5, 20000}}});
  plan.phases.push_back({PhaseScope::new_layers, {}, {{1e-3, 20000}, {1e-4, 25000}}});
  plan.phases.push_back({PhaseScope::all, {}, {{1e-3, 20000}, {1e-4, 20000}, {1e-5, 30000}, {1e-6, 20000}}});
  return plan;
}

double lr_at(const PhasePlan& plan, std::size_t phase, std::size_t iteration) {
  if (phase == 0 || phase > plan.phases.size()) {
    throw std::out_of_range("phase " + std::to_string(phase) + " outside 1.." + std::to_string(plan.phases.size()));
  }
  std::size_t start = 0;
  for (const auto& s : plan.phases[phase - 1].segments) {
    if (iteration < start + s.iterations) return s.learning_rate;
    start += s.iterations;
  }
  throw std::out_of_range("iteration " + std::to_string(iteration) + " beyond phase " + std::to_string(phase) +
                          " length " + std::to_string(start));
}

void check_plan(const PhasePlan& plan) {
  for (std::size_t p = 0; p < plan.phases.size(); ++p) {
    double prev = 0;
    for (const auto& s : plan.phases[p].segments) {
      if (s.iterations == 0) throw std::invalid_argument("phase " + std::to_string(p + 1) + " has an empty segment");
      if (!(s.learning_rate > 0)) throw std::invalid_argument("learning rates must be positive");
      if (prev > 0 && s.learning_rate > prev) {
        throw std::invalid_argument("learning rate increases within phase " + std::to_string(p + 1));
      }
      prev = s.learning_rate;
    }
  }
}

void sgd_step(WeightStore& weights, const std::map<std::string, Tensor>& grads, Velocity& velocity, double lr,
              double momentum, double weight_decay, const std::set<std::string>& frozen_layers,
              const std::vector<ParamSpec>& specs) {
  for (const auto& spec : specs) {
    if (!spec.learnable || frozen_layers.count(spec.layer)) continue;
    auto g = grads.find(spec.name);
    if (g == grads.end()) throw std::invalid_argument("no gradient for trainable parameter '" + spec.name + "'");
    Tensor& w = weights.at(spec.name);
    auto [it, inserted] = velocity.try_emplace(spec.name, w.shape());
    Tensor& v = it->second;
    const auto m = static_cast<float>(momentum), wd = static_cast<float>(weight_decay), rate = static_cast<float>(lr);
    for (std::size_t i = 0; i < w.size(); ++i) {
      v[i] = m * v[i] + g->second[i] + wd * w[i];
      w[i] -= rate * v[i];
    }
  }
}

AnchorSet anchors_for(const NetGraph& graph, const AnchorConfig& cfg) {
  const auto& heads = graph.heads();
  if (heads.empty()) throw std::invalid_argument("graph has no prediction heads");
  std::vector<ScaleSpec> scales;
  for (std::size_t s = 0; s < heads.size(); ++s) {
    if (heads[s].boxes_per_cell != cfg.aspect_ratios.size()) {
      throw std::invalid_argument("head '" + heads[s].conf + "' predicts " + std::to_string(heads[s].boxes_per_cell) +
                                  " boxes per cell but " + std::to_string(cfg.aspect_ratios.size()) +
                                  " aspect ratios are configured");
    }
    const double t = heads.size() == 1 ? 0.0 : static_cast<double>(s) / static_cast<double>(heads.size() - 1);
    const double size = cfg.min_size * std::pow(cfg.max_size / cfg.min_size, t);
    scales.push_back({size, cfg.aspect_ratios, heads[s].grid.height, heads[s].grid.width});
  }
  return generate_anchors(scales);
}

nlohmann::json to_json(const LogRecord& rec) {
  return {{"phase", rec.phase},
          {"iter", rec.iteration},
          {"lr", rec.learning_rate},
          {"loss", rec.loss.total},
          {"conf_pos", rec.loss.conf_pos},
          {"conf_neg", rec.loss.conf_neg},
          {"loc", rec.loss.loc},
          {"num_pos", rec.loss.num_pos},
          {"num_mined_neg", rec.loss.num_mined_neg}};
}

std::set<std::string> frozen_layers(const Phase& phase, const NetGraph& graph, const NetGraph* ssd_base) {
  std::set<std::string> frozen;
  switch (phase.scope) {
    case PhaseScope::all:
      break;
    case PhaseScope::new_layers:
      if (!ssd_base) throw std::invalid_argument("a new-layers phase needs the SSD base graph");
      for (const auto& l : graph.layers())
        if (ssd_base->contains(l.name)) frozen.insert(l.name);
      break;
    case PhaseScope::listed: {
      std::set<std::string> keep;
      for (const auto& name : phase.trainable) {
        if (!graph.contains(name)) throw std::invalid_argument("trainable set names unknown layer '" + name + "'");
        keep.insert(name);
      }
      for (const auto& l : graph.layers())
        if (!keep.count(l.name)) frozen.insert(l.name);
      break;
    }
  }
  return frozen;
}

TrainResult run_phase(const NetGraph& graph, WeightStore weights, const Phase& phase, std::size_t phase_number,
                      const TrainConfig& config, const std::vector<SynthSample>& data,
                      const std::set<std::string>& frozen, const LogSink& sink) {
  if (config.batch_size == 0) throw std::invalid_argument("batch size must be at least 1");
  if (data.empty()) throw std::invalid_argument("training data is empty");
  for (const auto& name : frozen)
    if (!graph.contains(name)) throw std::invalid_argument("frozen set names unknown layer '" + name + "'");
  check_weights(graph, weights);

  const AnchorSet anchors = anchors_for(graph, config.anchors);
  std::vector<MatchResult> matches;
  matches.reserve(data.size());
  for (const auto& s : data) matches.push_back(match(anchors, s.gts, config.match_threshold));

  const auto specs = parameter_specs(graph);
  ForwardOptions fopts;
  fopts.mode = ops::BatchNormMode::train;
  fopts.requires_grad = true;
  if (!frozen.empty()) {
    for (const auto& l : graph.layers())
      if (!frozen.count(l.name)) fopts.trainable.insert(l.name);
  }

  std::mt19937_64 rng(config.seed * 1000003ULL + phase_number);
  std::vector<std::size_t> order;
  std::size_t cursor = 0;
  auto next_index = [&]() {
    if (cursor == order.size()) {
      order.resize(data.size());
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::shuffle(order.begin(), order.end(), rng);
      cursor = 0;
    }
    return order[cursor++];
  };

  TrainResult result{std::move(weights), {}};
  Velocity velocity;
  std::size_t iteration = 0;
  for (const auto& segment : phase.segments) {
    for (std::size_t k = 0; k < segment.iterations; ++k, ++iteration) {
      std::vector<std::size_t> batch(config.batch_size);
      for (auto& b : batch) b = next_index();
      std::vector<MatchResult> batch_matches;
      for (std::size_t b : batch) batch_matches.push_back(matches[b]);

      ForwardPass pass = forward(graph, result.weights, stack_images(data, batch), fopts);
      const auto loss = multibox(pass.tape, pass.conf, pass.loc, batch_matches, config.loss);
      const auto grads = pass.tape.backward(loss.total);
      std::map<std::string, Tensor> grad_map;
      for (const auto& spec : specs) {
        if (!spec.learnable || frozen.count(spec.layer)) continue;
        grad_map.emplace(spec.name, grads.of(pass.params.at(spec.name)));
      }
      sgd_step(result.weights, grad_map, velocity, segment.learning_rate, config.momentum, config.weight_decay,
               frozen, specs);
      update_batch_norm_stats(result.weights, pass);

      LogRecord rec{phase_number, iteration, segment.learning_rate, loss.breakdown};
      if (sink) sink(rec);
      result.log.push_back(rec);
    }
  }
  return result;
}

TrainResult train(const NetGraph& graph, const TrainConfig& config, const NetGraph* ssd_base,
                  const std::vector<std::size_t>& phases, const WeightStore* init, const LogSink& sink) {
  check_plan(config.plan);
  std::vector<std::size_t> selected = phases;
  if (selected.empty()) {
    selected.resize(config.plan.phases.size());
    std::iota(selected.begin(), selected.end(), std::size_t{1});
  }
  const auto data = synth_dataset(config.seed, config.dataset_size, config.dataset);

  TrainResult result;
  if (init) result.weights = *init;
  for (std::size_t p : selected) {
    if (p == 0 || p > config.plan.phases.size()) throw std::out_of_range("no phase " + std::to_string(p));
    const Phase& phase = config.plan.phases[p - 1];
    const NetGraph& target = (p == 1 && ssd_base) ? *ssd_base : graph;
    WeightStore weights = init_weights(target, config.seed);
    overlay(weights, result.weights);
    const auto frozen = frozen_layers(phase, target, ssd_base);
    const auto specs = parameter_specs(target);
    if (std::all_of(specs.begin(), specs.end(), [&](const ParamSpec& s) { return frozen.count(s.layer) != 0; })) {
      result.weights = std::move(weights);
      continue;
    }
    auto step = run_phase(target, std::move(weights), phase, p, config, data, frozen, sink);
    result.weights = std::move(step.weights);
    result.log.insert(result.log.end(), step.log.begin(), step.log.end());
  }
  return result;
}

}  // namespace essd
