#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "essd/graph.hpp"
#include "essd/tape.hpp"
#include "essd/tensor.hpp"

namespace essd {

/// Parameter tensors keyed "<layer>.<role>", e.g. "conv1_1/conv.weight".
class WeightStore {
 public:
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);
  void set(const std::string& name, Tensor value) { tensors_[name] = std::move(value); }
  const std::map<std::string, Tensor>& tensors() const { return tensors_; }
  std::size_t size() const { return tensors_.size(); }

  bool operator==(const WeightStore&) const = default;

 private:
  std::map<std::string, Tensor> tensors_;
};

enum class ParamRole { weight, bias, gamma, beta, running_mean, running_var };

struct ParamSpec {
  std::string name;
  std::string layer;
  ParamRole role;
  Shape shape;
  /// False for batch-norm running statistics, which are updated by averaging.
  bool learnable = true;
};

std::string param_name(const std::string& layer, ParamRole role);
std::vector<ParamSpec> parameter_specs(const NetGraph& graph);

class MissingWeightError : public std::runtime_error {
 public:
  MissingWeightError(const std::string& layer, const std::string& detail);
  const std::string& layer() const { return layer_; }

 private:
  std::string layer_;
};

/// Throws MissingWeightError naming the first layer whose parameters are
/// absent or mis-shaped.
void check_weights(const NetGraph& graph, const WeightStore& weights);

/// He-uniform convs (bound sqrt(6 / fan_in)) with zero bias, identity batch norm,
/// and deconvs initialized as channel-wise bilinear upsamplers.
WeightStore init_weights(const NetGraph& graph, std::uint64_t seed);

/// Copies every tensor of `src` whose name and shape exist in `dst`.
/// Returns how many were copied.
std::size_t overlay(WeightStore& dst, const WeightStore& src);

/// Binary format: "ESWT", u32 version, u32 count, then per tensor u32 name
/// length, name bytes, u32 rank, u32 dims, float32 data. Little endian.
void save_weights(const WeightStore& weights, const std::string& path);
WeightStore load_weights(const std::string& path);
std::vector<std::uint8_t> serialize_weights(const WeightStore& weights);
WeightStore deserialize_weights(const std::vector<std::uint8_t>& bytes);

struct ForwardOptions {
  ops::BatchNormMode mode = ops::BatchNormMode::eval;
  bool requires_grad = false;
  /// Layers whose parameters are trained. Empty means every layer. Batch
  /// norm layers outside this set run on their running statistics.
  std::set<std::string> trainable;
  float bn_eps = 1e-5f;
};

struct ForwardPass {
  GradTape<float> tape;
  std::map<std::string, Var> params;
  std::map<std::string, Var> outputs;
  std::vector<Var> conf_scales;  // [N, H*W*boxes, classes+1] per source
  std::vector<Var> loc_scales;   // [N, H*W*boxes, 4] per source
  Var conf;                      // all scales, [N, A, classes+1]
  Var loc;                       // [N, A, 4]
  std::map<std::string, ops::BatchNormState<float>> batch_stats;

  explicit ForwardPass(bool record) : tape(record) {}
};

/// Runs the graph on images [N, C, H, W] (or a single [C, H, W] image).
ForwardPass forward(const NetGraph& graph, const WeightStore& weights, const Tensor& images,
                    const ForwardOptions& options = {});

/// Folds the batch statistics of a train-mode pass into running averages.
void update_batch_norm_stats(WeightStore& weights, const ForwardPass& pass, float momentum = 0.9f);

}  // namespace essd
