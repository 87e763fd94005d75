#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "essd/rational.hpp"

namespace essd {

enum class LayerKind {
  data,
  conv,
  deconv,
  bn,
  relu,
  pool,
  concat,
  eltwise_sum,
  eltwise_prod,
  conf_head,
  loc_head,
};

std::string_view to_string(LayerKind kind);
std::optional<LayerKind> parse_layer_kind(std::string_view text);

/// Layers that own a convolution kernel.
inline bool is_weight_layer(LayerKind k) {
  return k == LayerKind::conv || k == LayerKind::deconv || k == LayerKind::conf_head ||
         k == LayerKind::loc_head;
}
inline bool is_eltwise(LayerKind k) { return k == LayerKind::eltwise_sum || k == LayerKind::eltwise_prod; }

/// Kind-specific hyperparameters. Unused fields stay at their defaults.
struct LayerParams {
  std::size_t channels = 0;  // output channels (data: image channels)
  std::size_t height = 0;    // data only
  std::size_t width = 0;     // data only
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t pad = 0;
  std::size_t dilation = 1;
  bool ceil_mode = false;                   // pool
  std::vector<Rational> input_weights;      // eltwise / concat, one per input
  std::size_t num_classes = 0;              // heads, excluding background
  std::size_t boxes_per_cell = 0;           // heads
  std::size_t source = 0;                   // heads: prediction source index

  bool operator==(const LayerParams&) const = default;
};

struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::data;
  std::vector<std::string> inputs;
  LayerParams params;

  bool operator==(const LayerSpec&) const = default;
};

/// Mutable graph description used while building. Seal it into a NetGraph.
struct GraphDescriptor {
  std::vector<LayerSpec> layers;
  std::vector<std::string> prediction_sources;

  const LayerSpec* find(std::string_view name) const;
  LayerSpec& add(LayerSpec spec);
  bool operator==(const GraphDescriptor&) const = default;
};

struct FeatureShape {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  bool operator==(const FeatureShape&) const = default;
};

struct Violation {
  std::string layer;
  std::string message;
};

/// Every structural problem in the descriptor: naming, arity, dangling
/// references, cycles, eltwise weights, shape propagation and prediction
/// sources. Empty means valid.
std::vector<Violation> validate(const GraphDescriptor& graph);

class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(std::vector<Violation> violations);
  const std::vector<Violation>& violations() const { return violations_; }

 private:
  std::vector<Violation> violations_;
};

/// Output shape of every layer. Throws ValidationError when propagation fails.
std::map<std::string, FeatureShape> infer_shapes(const GraphDescriptor& graph);

/// Heads attached to one prediction source.
struct HeadBinding {
  std::string source;   // feature layer whose depth is reported
  std::string conf;
  std::string loc;
  std::size_t boxes_per_cell = 0;
  std::size_t num_classes = 0;
  FeatureShape grid;
};

/// Validated, immutable layer DAG.
class NetGraph {
 public:
  /// Throws ValidationError listing every violation.
  static NetGraph seal(GraphDescriptor descriptor);

  const GraphDescriptor& descriptor() const { return desc_; }
  const std::vector<LayerSpec>& layers() const { return desc_.layers; }
  const std::vector<std::string>& prediction_sources() const { return desc_.prediction_sources; }
  const LayerSpec& layer(std::string_view name) const;
  bool contains(std::string_view name) const;
  const FeatureShape& shape(std::string_view name) const;
  /// Layer indices in a topological order (data layer first).
  const std::vector<std::size_t>& topo_order() const { return topo_; }
  /// Names of layers that read `name`.
  const std::vector<std::string>& consumers(std::string_view name) const;
  const std::string& data_layer() const { return data_; }
  /// One entry per prediction source that has both heads attached, in
  /// prediction-source order.
  const std::vector<HeadBinding>& heads() const { return heads_; }
  std::size_t num_classes() const { return heads_.empty() ? 0 : heads_.front().num_classes; }

 private:
  NetGraph() = default;

  GraphDescriptor desc_;
  std::map<std::string, std::size_t, std::less<>> index_;
  std::vector<FeatureShape> shapes_;
  std::vector<std::vector<std::string>> consumers_;
  std::vector<std::size_t> topo_;
  std::vector<HeadBinding> heads_;
  std::string data_;
};

// --- JSON descriptor files -------------------------------------------------

nlohmann::json to_json(const GraphDescriptor& graph);
/// Throws std::invalid_argument on malformed structure.
GraphDescriptor descriptor_from_json(const nlohmann::json& j);
GraphDescriptor load_descriptor(const std::string& path);
void save_descriptor(const GraphDescriptor& graph, const std::string& path);

// --- Builders --------------------------------------------------------------

enum class Fusion { sum, prod, concat };
std::string_view to_string(Fusion f);
std::optional<Fusion> parse_fusion(std::string_view text);

/// Executable toy profile: conv-bn-relu VGG-style trunk followed by
/// stride-2 extra layers, mirroring SSD300's arrangement of prediction
/// sources at successively halved resolutions.
struct ToyConfig {
  std::size_t input_size = 64;
  std::size_t num_scales = 4;
  std::size_t base_channels = 8;
  std::size_t num_classes = 3;
  std::size_t boxes_per_cell = 3;
};

struct Profile {
  enum class Kind { canonical300, toy };
  Kind kind = Kind::toy;
  ToyConfig toy;

  static Profile canonical300() { return {Kind::canonical300, {}}; }
  static Profile make_toy(ToyConfig cfg = {}) { return {Kind::toy, cfg}; }
  std::size_t num_classes() const { return kind == Kind::canonical300 ? 20 : toy.num_classes; }
  std::vector<std::size_t> boxes_per_cell() const;
};

/// Plain SSD trunk without heads.
GraphDescriptor ssd_trunk(const Profile& profile);

/// Adds the extension module fusing `layer_n` with the next-deeper
/// `layer_n1`. High branch: deconv upsample of layer_n1, then conv-bn-relu.
/// Low branch: two conv-bn-relu blocks on layer_n. Returns the fusion
/// layer's name and substitutes it for layer_n in prediction_sources.
std::string make_extension_module(GraphDescriptor& graph, const std::string& layer_n,
                                  const std::string& layer_n1, Fusion fusion);

/// Sibling 3x3 conf/loc convs per prediction source. When extra_pred_conv is
/// set for a source, a 1x1 conv (`extra_channels` outputs) sits between the
/// source and its heads.
void attach_heads(GraphDescriptor& graph, std::size_t num_classes,
                  const std::vector<std::size_t>& boxes_per_cell,
                  const std::vector<bool>& extra_pred_conv = {}, std::size_t extra_channels = 0);

NetGraph build_ssd(const Profile& profile);
NetGraph build_essd(const Profile& profile, Fusion fusion, bool extra_pred_conv);

/// Names of the layers introduced by the extension modules and extra
/// prediction convs (everything not present in the SSD graph).
std::vector<std::string> layers_absent_from(const NetGraph& graph, const NetGraph& base);

}  // namespace essd
