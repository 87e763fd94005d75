#include "essd/graph.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <queue>
#include <set>
#include <utility>

#include "essd/ops.hpp"

namespace essd {
namespace {

constexpr std::array<std::pair<LayerKind, std::string_view>, 11> kKindNames{{
    {LayerKind::data, "data"},
    {LayerKind::conv, "conv"},
    {LayerKind::deconv, "deconv"},
    {LayerKind::bn, "bn"},
    {LayerKind::relu, "relu"},
    {LayerKind::pool, "pool"},
    {LayerKind::concat, "concat"},
    {LayerKind::eltwise_sum, "eltwise_sum"},
    {LayerKind::eltwise_prod, "eltwise_prod"},
    {LayerKind::conf_head, "conf_head"},
    {LayerKind::loc_head, "loc_head"},
}};

std::string describe(const FeatureShape& s) {
  return std::to_string(s.channels) + "x" + std::to_string(s.height) + "x" + std::to_string(s.width);
}

struct Structure {
  std::map<std::string, std::size_t, std::less<>> index;
  // Edges resolved to indices; unresolved references are dropped here and
  // reported separately.
  std::vector<std::vector<std::size_t>> inputs;
  std::vector<std::size_t> topo;
  bool acyclic = true;
  bool resolved = true;
};

Structure analyze_structure(const GraphDescriptor& g, std::vector<Violation>* out) {
  Structure st;
  const std::size_t n = g.layers.size();
  for (std::size_t i = 0; i < n; ++i) {
    const auto& name = g.layers[i].name;
    if (name.empty()) {
      if (out) out->push_back({"#" + std::to_string(i), "layer name is empty"});
      continue;
    }
    if (!st.index.emplace(name, i).second && out) {
      out->push_back({name, "duplicate layer name"});
    }
  }
  st.inputs.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (const auto& in : g.layers[i].inputs) {
      auto it = st.index.find(in);
      if (it == st.index.end()) {
        st.resolved = false;
        if (out) out->push_back({g.layers[i].name, "input '" + in + "' does not name a layer"});
      } else {
        st.inputs[i].push_back(it->second);
      }
    }
  }
  // Kahn's algorithm, lowest declaration index first for a stable order.
  std::vector<std::size_t> indegree(n, 0);
  std::vector<std::vector<std::size_t>> users(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p : st.inputs[i]) {
      ++indegree[i];
      users[p].push_back(i);
    }
  }
  std::priority_queue<std::size_t, std::vector<std::size_t>, std::greater<>> ready;
  for (std::size_t i = 0; i < n; ++i)
    if (indegree[i] == 0) ready.push(i);
  while (!ready.empty()) {
    const std::size_t i = ready.top();
    ready.pop();
    st.topo.push_back(i);
    for (std::size_t u : users[i])
      if (--indegree[u] == 0) ready.push(u);
  }
  if (st.topo.size() != n) {
    st.acyclic = false;
    if (out) {
      for (std::size_t i = 0; i < n; ++i) {
        if (indegree[i] > 0) out->push_back({g.layers[i].name, "layer participates in a cycle"});
      }
    }
  }
  return st;
}

void check_arity(const LayerSpec& l, std::vector<Violation>& out) {
  const std::size_t k = l.inputs.size();
  auto fail = [&](const std::string& want) {
    out.push_back({l.name, std::string(to_string(l.kind)) + " layer needs " + want + " input(s), has " +
                               std::to_string(k)});
  };
  switch (l.kind) {
    case LayerKind::data:
      if (k != 0) fail("0");
      break;
    case LayerKind::eltwise_sum:
    case LayerKind::eltwise_prod:
      if (k != 2) fail("exactly 2");
      break;
    case LayerKind::concat:
      if (k < 2) fail(">= 2");
      break;
    default:
      if (k != 1) fail("exactly 1");
  }
  const auto& w = l.params.input_weights;
  if (!w.empty()) {
    if (!is_eltwise(l.kind) && l.kind != LayerKind::concat) {
      out.push_back({l.name, "input weights only apply to eltwise and concat layers"});
    } else if (w.size() != k) {
      out.push_back({l.name, "has " + std::to_string(w.size()) + " input weights for " + std::to_string(k) +
                                 " inputs"});
    } else {
      Rational total;
      for (const auto& r : w) total += r;
      if (!(total == Rational(1))) out.push_back({l.name, "input weights sum to " + total.str() + ", not 1"});
    }
  }
  const auto& p = l.params;
  if ((l.kind == LayerKind::conv || l.kind == LayerKind::deconv || l.kind == LayerKind::pool ||
       l.kind == LayerKind::conf_head || l.kind == LayerKind::loc_head) &&
      (p.kernel == 0 || p.stride == 0)) {
    out.push_back({l.name, "kernel and stride must be positive"});
  }
  if ((is_weight_layer(l.kind) || l.kind == LayerKind::data) && p.channels == 0) {
    out.push_back({l.name, "channel count must be positive"});
  }
  if (l.kind == LayerKind::conf_head || l.kind == LayerKind::loc_head) {
    const std::size_t per_box = l.kind == LayerKind::conf_head ? p.num_classes + 1 : 4;
    if (p.boxes_per_cell == 0 || p.channels != p.boxes_per_cell * per_box) {
      out.push_back({l.name, "head channels " + std::to_string(p.channels) + " != boxes_per_cell(" +
                                 std::to_string(p.boxes_per_cell) + ") x " + std::to_string(per_box)});
    }
  }
}

// Shape propagation in topological order. Layers downstream of a failure
// stay unset and are not reported again.
std::vector<std::optional<FeatureShape>> propagate(const GraphDescriptor& g, const Structure& st,
                                                   std::vector<Violation>& out) {
  std::vector<std::optional<FeatureShape>> shapes(g.layers.size());
  for (std::size_t i : st.topo) {
    const LayerSpec& l = g.layers[i];
    const auto& p = l.params;
    std::vector<FeatureShape> in;
    bool ready = true;
    for (std::size_t src : st.inputs[i]) {
      if (!shapes[src]) {
        ready = false;
        break;
      }
      in.push_back(*shapes[src]);
    }
    if (!ready || in.size() != l.inputs.size()) continue;
    try {
      switch (l.kind) {
        case LayerKind::data:
          if (p.height == 0 || p.width == 0) {
            out.push_back({l.name, "data layer needs positive height and width"});
            continue;
          }
          shapes[i] = FeatureShape{p.channels, p.height, p.width};
          break;
        case LayerKind::conv:
        case LayerKind::conf_head:
        case LayerKind::loc_head: {
          if (in.size() != 1) continue;
          const ops::ConvGeometry geom{p.kernel, p.stride, p.pad, p.dilation};
          shapes[i] = FeatureShape{p.channels, ops::conv_output_extent(in[0].height, geom),
                                   ops::conv_output_extent(in[0].width, geom)};
          break;
        }
        case LayerKind::deconv: {
          if (in.size() != 1) continue;
          const ops::ConvGeometry geom{p.kernel, p.stride, p.pad, 1};
          shapes[i] = FeatureShape{p.channels, ops::deconv_output_extent(in[0].height, geom),
                                   ops::deconv_output_extent(in[0].width, geom)};
          break;
        }
        case LayerKind::bn:
        case LayerKind::relu:
          if (in.size() != 1) continue;
          shapes[i] = in[0];
          break;
        case LayerKind::pool: {
          if (in.size() != 1) continue;
          const ops::PoolGeometry geom{p.kernel, p.stride, p.pad, p.ceil_mode};
          shapes[i] = FeatureShape{in[0].channels, ops::pool_output_extent(in[0].height, geom),
                                   ops::pool_output_extent(in[0].width, geom)};
          break;
        }
        case LayerKind::concat: {
          if (in.size() < 2) continue;
          FeatureShape s = in[0];
          bool ok = true;
          for (std::size_t k = 1; k < in.size(); ++k) {
            if (in[k].height != s.height || in[k].width != s.width) {
              out.push_back({l.name, "concat input " + std::to_string(k) + " '" + l.inputs[k] + "' is " +
                                         describe(in[k]) + ", spatially incompatible with '" + l.inputs[0] +
                                         "' " + describe(in[0])});
              ok = false;
            } else {
              s.channels += in[k].channels;
            }
          }
          if (ok) shapes[i] = s;
          break;
        }
        case LayerKind::eltwise_sum:
        case LayerKind::eltwise_prod:
          if (in.size() != 2) continue;
          if (!(in[0] == in[1])) {
            out.push_back({l.name, "eltwise inputs '" + l.inputs[0] + "' (" + describe(in[0]) + ") and '" +
                                       l.inputs[1] + "' (" + describe(in[1]) + ") differ in shape"});
            continue;
          }
          shapes[i] = in[0];
          break;
      }
    } catch (const std::exception& e) {
      out.push_back({l.name, e.what()});
    }
  }
  return shapes;
}

void check_sources_and_heads(const GraphDescriptor& g, const Structure& st,
                             const std::vector<std::optional<FeatureShape>>& shapes,
                             std::vector<Violation>& out) {
  std::optional<std::size_t> prev_size;
  std::string prev_name;
  for (const auto& s : g.prediction_sources) {
    auto it = st.index.find(s);
    if (it == st.index.end()) {
      out.push_back({s, "prediction source does not name a layer"});
      continue;
    }
    if (!shapes[it->second]) continue;
    const std::size_t size = shapes[it->second]->height;
    if (prev_size && size >= *prev_size) {
      out.push_back({s, "prediction source spatial size " + std::to_string(size) +
                            " does not decrease after '" + prev_name + "' (" + std::to_string(*prev_size) + ")"});
    }
    prev_size = size;
    prev_name = s;
  }
  std::map<std::size_t, std::pair<int, int>> per_source;
  for (std::size_t i = 0; i < g.layers.size(); ++i) {
    const LayerSpec& l = g.layers[i];
    if (l.kind != LayerKind::conf_head && l.kind != LayerKind::loc_head) continue;
    if (l.params.source >= g.prediction_sources.size()) {
      out.push_back({l.name, "head refers to prediction source #" + std::to_string(l.params.source) +
                                 " but only " + std::to_string(g.prediction_sources.size()) + " exist"});
      continue;
    }
    auto& counts = per_source[l.params.source];
    (l.kind == LayerKind::conf_head ? counts.first : counts.second)++;
    const std::string& source = g.prediction_sources[l.params.source];
    if (l.inputs.size() != 1) continue;
    const LayerSpec* feed = g.find(l.inputs[0]);
    bool attached = l.inputs[0] == source;
    // One intermediate single-input layer chain is allowed (extra prediction conv).
    for (int hops = 0; !attached && feed && feed->inputs.size() == 1 && hops < 4; ++hops) {
      attached = feed->inputs[0] == source;
      feed = g.find(feed->inputs[0]);
    }
    if (!attached) out.push_back({l.name, "head is not fed by prediction source '" + source + "'"});
  }
  for (const auto& [src, counts] : per_source) {
    if (counts.first != 1 || counts.second != 1) {
      out.push_back({g.prediction_sources[src], "prediction source needs exactly one conf and one loc head"});
    }
  }
  std::size_t conf_classes = 0;
  for (const auto& l : g.layers) {
    if (l.kind != LayerKind::conf_head) continue;
    if (conf_classes == 0) conf_classes = l.params.num_classes;
    if (l.params.num_classes != conf_classes) out.push_back({l.name, "heads disagree on the class count"});
  }
}

}  // namespace

std::string_view to_string(LayerKind kind) {
  for (const auto& [k, name] : kKindNames)
    if (k == kind) return name;
  return "unknown";
}

std::optional<LayerKind> parse_layer_kind(std::string_view text) {
  for (const auto& [k, name] : kKindNames)
    if (name == text) return k;
  return std::nullopt;
}

const LayerSpec* GraphDescriptor::find(std::string_view name) const {
  auto it = std::find_if(layers.begin(), layers.end(), [&](const LayerSpec& l) { return l.name == name; });
  return it == layers.end() ? nullptr : &*it;
}

LayerSpec& GraphDescriptor::add(LayerSpec spec) {
  layers.push_back(std::move(spec));
  return layers.back();
}

std::vector<Violation> validate(const GraphDescriptor& graph) {
  std::vector<Violation> out;
  const Structure st = analyze_structure(graph, &out);
  std::size_t data_layers = 0;
  for (const auto& l : graph.layers) {
    if (l.kind == LayerKind::data) ++data_layers;
    check_arity(l, out);
  }
  if (data_layers != 1) {
    out.push_back({"<graph>", "expected exactly one data layer, found " + std::to_string(data_layers)});
  }
  if (!st.acyclic) return out;
  const auto shapes = propagate(graph, st, out);
  check_sources_and_heads(graph, st, shapes, out);
  return out;
}

namespace {
std::string join_violations(const std::vector<Violation>& v) {
  std::string msg = "graph validation failed:";
  for (const auto& x : v) msg += "\n  " + x.layer + ": " + x.message;
  return msg;
}
}  // namespace

ValidationError::ValidationError(std::vector<Violation> violations)
    : std::runtime_error(join_violations(violations)), violations_(std::move(violations)) {}

std::map<std::string, FeatureShape> infer_shapes(const GraphDescriptor& graph) {
  std::vector<Violation> out;
  const Structure st = analyze_structure(graph, &out);
  if (!st.acyclic) throw ValidationError(out);
  const auto shapes = propagate(graph, st, out);
  if (!out.empty()) throw ValidationError(out);
  std::map<std::string, FeatureShape> result;
  for (std::size_t i = 0; i < graph.layers.size(); ++i) {
    if (shapes[i]) result.emplace(graph.layers[i].name, *shapes[i]);
  }
  return result;
}

NetGraph NetGraph::seal(GraphDescriptor descriptor) {
  auto violations = validate(descriptor);
  if (!violations.empty()) throw ValidationError(std::move(violations));
  NetGraph g;
  std::vector<Violation> scratch;
  Structure st = analyze_structure(descriptor, nullptr);
  const auto shapes = propagate(descriptor, st, scratch);
  g.desc_ = std::move(descriptor);
  g.index_ = std::move(st.index);
  g.topo_ = std::move(st.topo);
  g.shapes_.reserve(shapes.size());
  for (const auto& s : shapes) g.shapes_.push_back(*s);
  g.consumers_.resize(g.desc_.layers.size());
  for (std::size_t i = 0; i < g.desc_.layers.size(); ++i) {
    const auto& l = g.desc_.layers[i];
    if (l.kind == LayerKind::data) g.data_ = l.name;
    for (const auto& in : l.inputs) g.consumers_[g.index_.at(in)].push_back(l.name);
  }
  std::map<std::size_t, HeadBinding> heads;
  for (const auto& l : g.desc_.layers) {
    if (l.kind != LayerKind::conf_head && l.kind != LayerKind::loc_head) continue;
    auto& h = heads[l.params.source];
    h.source = g.desc_.prediction_sources[l.params.source];
    h.boxes_per_cell = l.params.boxes_per_cell;
    h.grid = g.shapes_[g.index_.at(l.name)];
    if (l.kind == LayerKind::conf_head) {
      h.conf = l.name;
      h.num_classes = l.params.num_classes;
    } else {
      h.loc = l.name;
    }
  }
  for (auto& [idx, h] : heads) g.heads_.push_back(std::move(h));
  return g;
}

const LayerSpec& NetGraph::layer(std::string_view name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown layer '" + std::string(name) + "'");
  return desc_.layers[it->second];
}

bool NetGraph::contains(std::string_view name) const { return index_.find(name) != index_.end(); }

const FeatureShape& NetGraph::shape(std::string_view name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown layer '" + std::string(name) + "'");
  return shapes_[it->second];
}

const std::vector<std::string>& NetGraph::consumers(std::string_view name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown layer '" + std::string(name) + "'");
  return consumers_[it->second];
}

// --- JSON --------------------------------------------------------------------

namespace {

nlohmann::json weight_to_json(const Rational& r) {
  const auto den = static_cast<std::uint64_t>(r.den());
  if ((den & (den - 1)) == 0) return r.to_double();
  return r.str();
}

Rational weight_from_json(const nlohmann::json& j) {
  if (j.is_string()) return Rational::parse(j.get<std::string>());
  if (j.is_number()) return Rational::from_double(j.get<double>());
  throw std::invalid_argument("input weight must be a number or \"p/q\" string");
}

}  // namespace

nlohmann::json to_json(const GraphDescriptor& graph) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : graph.layers) {
    const auto& p = l.params;
    nlohmann::json params = nlohmann::json::object();
    switch (l.kind) {
      case LayerKind::data:
        params = {{"channels", p.channels}, {"height", p.height}, {"width", p.width}};
        break;
      case LayerKind::conv:
      case LayerKind::deconv:
      case LayerKind::conf_head:
      case LayerKind::loc_head:
        params = {{"channels", p.channels}, {"kernel", p.kernel}, {"stride", p.stride}, {"pad", p.pad}};
        if (p.dilation != 1) params["dilation"] = p.dilation;
        if (l.kind == LayerKind::conf_head || l.kind == LayerKind::loc_head) {
          params["num_classes"] = p.num_classes;
          params["boxes_per_cell"] = p.boxes_per_cell;
          params["source"] = p.source;
        }
        break;
      case LayerKind::pool:
        params = {{"kernel", p.kernel}, {"stride", p.stride}, {"pad", p.pad}};
        if (p.ceil_mode) params["ceil_mode"] = true;
        break;
      default:
        break;
    }
    if (!p.input_weights.empty()) {
      nlohmann::json w = nlohmann::json::array();
      for (const auto& r : p.input_weights) w.push_back(weight_to_json(r));
      params["weights"] = std::move(w);
    }
    layers.push_back({{"name", l.name}, {"kind", to_string(l.kind)}, {"inputs", l.inputs}, {"params", params}});
  }
  return {{"layers", layers}, {"prediction_sources", graph.prediction_sources}};
}

GraphDescriptor descriptor_from_json(const nlohmann::json& j) {
  try {
    if (!j.is_object()) throw std::invalid_argument("descriptor must be a JSON object");
    GraphDescriptor g;
    for (const auto& jl : j.at("layers")) {
      LayerSpec l;
      l.name = jl.at("name").get<std::string>();
      const auto kind_text = jl.at("kind").get<std::string>();
      const auto kind = parse_layer_kind(kind_text);
      if (!kind) throw std::invalid_argument("layer '" + l.name + "' has unknown kind '" + kind_text + "'");
      l.kind = *kind;
      if (jl.contains("inputs")) l.inputs = jl.at("inputs").get<std::vector<std::string>>();
      const auto params = jl.value("params", nlohmann::json::object());
      if (!params.is_object()) throw std::invalid_argument("layer '" + l.name + "' params must be an object");
      auto& p = l.params;
      p.channels = params.value("channels", std::size_t{0});
      p.height = params.value("height", std::size_t{0});
      p.width = params.value("width", std::size_t{0});
      p.kernel = params.value("kernel", std::size_t{0});
      p.stride = params.value("stride", std::size_t{1});
      p.pad = params.value("pad", std::size_t{0});
      p.dilation = params.value("dilation", std::size_t{1});
      p.ceil_mode = params.value("ceil_mode", false);
      p.num_classes = params.value("num_classes", std::size_t{0});
      p.boxes_per_cell = params.value("boxes_per_cell", std::size_t{0});
      p.source = params.value("source", std::size_t{0});
      if (params.contains("weights")) {
        for (const auto& w : params.at("weights")) p.input_weights.push_back(weight_from_json(w));
      }
      g.layers.push_back(std::move(l));
    }
    g.prediction_sources = j.at("prediction_sources").get<std::vector<std::string>>();
    return g;
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("malformed graph descriptor: ") + e.what());
  }
}

GraphDescriptor load_descriptor(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open descriptor '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument("descriptor '" + path + "' is not valid JSON: " + e.what());
  }
  return descriptor_from_json(j);
}

void save_descriptor(const GraphDescriptor& graph, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write descriptor '" + path + "'");
  out << to_json(graph).dump(2) << '\n';
}

// --- Builders ----------------------------------------------------------------

std::string_view to_string(Fusion f) {
  switch (f) {
    case Fusion::sum: return "sum";
    case Fusion::prod: return "prod";
    case Fusion::concat: return "concat";
  }
  return "unknown";
}

std::optional<Fusion> parse_fusion(std::string_view text) {
  if (text == "sum") return Fusion::sum;
  if (text == "prod") return Fusion::prod;
  if (text == "concat") return Fusion::concat;
  return std::nullopt;
}

std::vector<std::size_t> Profile::boxes_per_cell() const {
  if (kind == Kind::canonical300) return {4, 6, 6, 6, 4, 4};
  return std::vector<std::size_t>(toy.num_scales, toy.boxes_per_cell);
}

namespace {

struct Conv {
  std::size_t channels, kernel, stride = 1, pad = 0, dilation = 1;
};

// Appends conv [+ bn] + relu; the relu carries the block name and is returned.
std::string block(GraphDescriptor& g, const std::string& name, const std::string& input, const Conv& c,
                  bool batch_norm) {
  LayerParams p;
  p.channels = c.channels;
  p.kernel = c.kernel;
  p.stride = c.stride;
  p.pad = c.pad;
  p.dilation = c.dilation;
  g.add({name + "/conv", LayerKind::conv, {input}, p});
  std::string last = name + "/conv";
  if (batch_norm) {
    g.add({name + "/bn", LayerKind::bn, {last}, {}});
    last = name + "/bn";
  }
  g.add({name, LayerKind::relu, {last}, {}});
  return name;
}

std::string pool(GraphDescriptor& g, const std::string& name, const std::string& input, std::size_t k,
                 std::size_t s, std::size_t pad = 0, bool ceil_mode = false) {
  LayerParams p;
  p.kernel = k;
  p.stride = s;
  p.pad = pad;
  p.ceil_mode = ceil_mode;
  g.add({name, LayerKind::pool, {input}, p});
  return name;
}

GraphDescriptor canonical_trunk() {
  GraphDescriptor g;
  LayerParams data;
  data.channels = 3;
  data.height = data.width = 300;
  g.add({"data", LayerKind::data, {}, data});
  std::string x = "data";
  // Reduced VGG-16.
  x = block(g, "conv1_1", x, {64, 3, 1, 1}, false);
  x = block(g, "conv1_2", x, {64, 3, 1, 1}, false);
  x = pool(g, "pool1", x, 2, 2);
  x = block(g, "conv2_1", x, {128, 3, 1, 1}, false);
  x = block(g, "conv2_2", x, {128, 3, 1, 1}, false);
  x = pool(g, "pool2", x, 2, 2);
  x = block(g, "conv3_1", x, {256, 3, 1, 1}, false);
  x = block(g, "conv3_2", x, {256, 3, 1, 1}, false);
  x = block(g, "conv3_3", x, {256, 3, 1, 1}, false);
  x = pool(g, "pool3", x, 2, 2, 0, true);
  x = block(g, "conv4_1", x, {512, 3, 1, 1}, false);
  x = block(g, "conv4_2", x, {512, 3, 1, 1}, false);
  const std::string conv4_3 = x = block(g, "conv4_3", x, {512, 3, 1, 1}, false);
  x = pool(g, "pool4", x, 2, 2);
  x = block(g, "conv5_1", x, {512, 3, 1, 1}, false);
  x = block(g, "conv5_2", x, {512, 3, 1, 1}, false);
  x = block(g, "conv5_3", x, {512, 3, 1, 1}, false);
  x = pool(g, "pool5", x, 3, 1, 1);
  x = block(g, "fc6", x, {1024, 3, 1, 6, 6}, false);
  const std::string fc7 = x = block(g, "fc7", x, {1024, 1}, false);
  // Extra feature layers.
  x = block(g, "conv8_1", x, {256, 1}, false);
  const std::string conv8_2 = x = block(g, "conv8_2", x, {512, 3, 2, 1}, false);
  x = block(g, "conv9_1", x, {128, 1}, false);
  const std::string conv9_2 = x = block(g, "conv9_2", x, {256, 3, 2, 1}, false);
  x = block(g, "conv10_1", x, {128, 1}, false);
  const std::string conv10_2 = x = block(g, "conv10_2", x, {256, 3, 1, 0}, false);
  x = block(g, "conv11_1", x, {128, 1}, false);
  const std::string conv11_2 = x = block(g, "conv11_2", x, {256, 3, 1, 0}, false);
  g.prediction_sources = {conv4_3, fc7, conv8_2, conv9_2, conv10_2, conv11_2};
  return g;
}

GraphDescriptor toy_trunk(const ToyConfig& cfg) {
  if (cfg.num_scales < 4) throw std::invalid_argument("toy profile needs at least 4 prediction scales");
  if (cfg.base_channels == 0 || cfg.num_classes == 0 || cfg.boxes_per_cell == 0) {
    throw std::invalid_argument("toy profile channel, class and box counts must be positive");
  }
  const std::size_t divisor = std::size_t{4} << (cfg.num_scales - 1);
  if (cfg.input_size == 0 || cfg.input_size % divisor != 0) {
    throw std::invalid_argument("toy input size " + std::to_string(cfg.input_size) + " must be a multiple of " +
                                std::to_string(divisor) + " for " + std::to_string(cfg.num_scales) + " scales");
  }
  const std::size_t c = cfg.base_channels;
  GraphDescriptor g;
  LayerParams data;
  data.channels = 3;
  data.height = data.width = cfg.input_size;
  g.add({"data", LayerKind::data, {}, data});
  std::string x = "data";
  x = block(g, "conv1_1", x, {c, 3, 1, 1}, true);
  x = pool(g, "pool1", x, 2, 2);
  x = block(g, "conv2_1", x, {2 * c, 3, 1, 1}, true);
  x = pool(g, "pool2", x, 2, 2);
  x = block(g, "conv3_1", x, {4 * c, 3, 1, 1}, true);
  x = block(g, "conv3_2", x, {4 * c, 3, 1, 1}, true);
  std::vector<std::string> sources{x};
  x = pool(g, "pool3", x, 2, 2);
  x = block(g, "fc6", x, {4 * c, 3, 1, 1}, true);
  x = block(g, "fc7", x, {4 * c, 1}, true);
  sources.push_back(x);
  for (std::size_t s = 2; s < cfg.num_scales; ++s) {
    const std::string stem = "conv" + std::to_string(6 + s);
    x = block(g, stem + "_1", x, {2 * c, 1}, true);
    x = block(g, stem + "_2", x, {4 * c, 3, 2, 1}, true);
    sources.push_back(x);
  }
  g.prediction_sources = std::move(sources);
  return g;
}

}  // namespace

GraphDescriptor ssd_trunk(const Profile& profile) {
  return profile.kind == Profile::Kind::canonical300 ? canonical_trunk() : toy_trunk(profile.toy);
}

std::string make_extension_module(GraphDescriptor& graph, const std::string& layer_n,
                                  const std::string& layer_n1, Fusion fusion) {
  const auto shapes = infer_shapes(graph);
  const auto sn = shapes.find(layer_n), sn1 = shapes.find(layer_n1);
  if (sn == shapes.end()) throw std::invalid_argument("extension module: unknown layer '" + layer_n + "'");
  if (sn1 == shapes.end()) throw std::invalid_argument("extension module: unknown layer '" + layer_n1 + "'");
  const FeatureShape& low = sn->second;
  const FeatureShape& high = sn1->second;
  // Upsampler geometry: exact doubling uses k2 s2 p0; an odd target one less
  // than double (SSD300's 10 -> 19 step) uses k3 s2 p1.
  auto upsample_for = [&](std::size_t from, std::size_t to) -> std::optional<ops::ConvGeometry> {
    if (to == 2 * from) return ops::ConvGeometry{2, 2, 0, 1};
    if (to + 1 == 2 * from) return ops::ConvGeometry{3, 2, 1, 1};
    return std::nullopt;
  };
  const auto geom_h = upsample_for(high.height, low.height);
  const auto geom_w = upsample_for(high.width, low.width);
  if (!geom_h || !geom_w || geom_h->kernel != geom_w->kernel) {
    throw std::invalid_argument("extension module: '" + layer_n1 + "' (" + describe(high) +
                                ") cannot be upsampled x2 onto '" + layer_n + "' (" + describe(low) + ")");
  }
  const std::string stem = layer_n + "/ext";
  LayerParams dp;
  dp.channels = high.channels;
  dp.kernel = geom_h->kernel;
  dp.stride = geom_h->stride;
  dp.pad = geom_h->pad;
  graph.add({stem + "/deconv", LayerKind::deconv, {layer_n1}, dp});
  const std::string high_out = block(graph, stem + "/high", stem + "/deconv", {low.channels, 3, 1, 1}, true);
  std::string low_out = block(graph, stem + "/low1", layer_n, {low.channels, 3, 1, 1}, true);
  low_out = block(graph, stem + "/low2", low_out, {low.channels, 3, 1, 1}, true);

  LayerParams fp;
  LayerKind kind = LayerKind::concat;
  if (fusion != Fusion::concat) {
    kind = fusion == Fusion::sum ? LayerKind::eltwise_sum : LayerKind::eltwise_prod;
    fp.input_weights = {Rational(1, 2), Rational(1, 2)};
  }
  const std::string fused = stem + "/fuse";
  graph.add({fused, kind, {high_out, low_out}, fp});
  for (auto& s : graph.prediction_sources)
    if (s == layer_n) s = fused;
  return fused;
}

void attach_heads(GraphDescriptor& graph, std::size_t num_classes, const std::vector<std::size_t>& boxes_per_cell,
                  const std::vector<bool>& extra_pred_conv, std::size_t extra_channels) {
  if (graph.prediction_sources.empty()) throw std::invalid_argument("attach_heads: no prediction sources");
  if (boxes_per_cell.size() != graph.prediction_sources.size()) {
    throw std::invalid_argument("attach_heads: " + std::to_string(boxes_per_cell.size()) +
                                " box counts for " + std::to_string(graph.prediction_sources.size()) + " sources");
  }
  const auto shapes = infer_shapes(graph);
  for (std::size_t i = 0; i < graph.prediction_sources.size(); ++i) {
    const std::string& src = graph.prediction_sources[i];
    std::string feed = src;
    if (i < extra_pred_conv.size() && extra_pred_conv[i]) {
      const std::size_t ch = extra_channels ? extra_channels : shapes.at(src).channels;
      feed = block(graph, src + "/pred", src, {ch, 1}, false);
    }
    LayerParams hp;
    hp.kernel = 3;
    hp.stride = 1;
    hp.pad = 1;
    hp.num_classes = num_classes;
    hp.boxes_per_cell = boxes_per_cell[i];
    hp.source = i;
    hp.channels = boxes_per_cell[i] * (num_classes + 1);
    graph.add({src + "/mbox_conf", LayerKind::conf_head, {feed}, hp});
    hp.channels = boxes_per_cell[i] * 4;
    graph.add({src + "/mbox_loc", LayerKind::loc_head, {feed}, hp});
  }
}

NetGraph build_ssd(const Profile& profile) {
  GraphDescriptor g = ssd_trunk(profile);
  attach_heads(g, profile.num_classes(), profile.boxes_per_cell());
  return NetGraph::seal(std::move(g));
}

NetGraph build_essd(const Profile& profile, Fusion fusion, bool extra_pred_conv) {
  GraphDescriptor g = ssd_trunk(profile);
  const std::vector<std::string> trunk_sources = g.prediction_sources;
  for (std::size_t i = 0; i < 3; ++i) make_extension_module(g, trunk_sources[i], trunk_sources[i + 1], fusion);
  std::vector<bool> extra(trunk_sources.size(), false);
  if (extra_pred_conv) std::fill_n(extra.begin(), 3, true);
  const std::size_t extra_channels = profile.kind == Profile::Kind::canonical300 ? 512 : 0;
  attach_heads(g, profile.num_classes(), profile.boxes_per_cell(), extra, extra_channels);
  return NetGraph::seal(std::move(g));
}

std::vector<std::string> layers_absent_from(const NetGraph& graph, const NetGraph& base) {
  std::vector<std::string> out;
  for (const auto& l : graph.layers())
    if (!base.contains(l.name)) out.push_back(l.name);
  return out;
}

}  // namespace essd
