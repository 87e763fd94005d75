#include "essd/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <random>

namespace essd {

const Tensor& WeightStore::at(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw std::out_of_range("no weight named '" + name + "'");
  return it->second;
}

Tensor& WeightStore::at(const std::string& name) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw std::out_of_range("no weight named '" + name + "'");
  return it->second;
}

std::string param_name(const std::string& layer, ParamRole role) {
  switch (role) {
    case ParamRole::weight: return layer + ".weight";
    case ParamRole::bias: return layer + ".bias";
    case ParamRole::gamma: return layer + ".gamma";
    case ParamRole::beta: return layer + ".beta";
    case ParamRole::running_mean: return layer + ".running_mean";
    case ParamRole::running_var: return layer + ".running_var";
  }
  return layer;
}

std::vector<ParamSpec> parameter_specs(const NetGraph& graph) {
  std::vector<ParamSpec> specs;
  for (const auto& l : graph.layers()) {
    const auto& p = l.params;
    auto add = [&](ParamRole role, Shape shape, bool learnable = true) {
      specs.push_back({param_name(l.name, role), l.name, role, std::move(shape), learnable});
    };
    switch (l.kind) {
      case LayerKind::conv:
      case LayerKind::conf_head:
      case LayerKind::loc_head: {
        const std::size_t cin = graph.shape(l.inputs[0]).channels;
        add(ParamRole::weight, {p.channels, cin, p.kernel, p.kernel});
        add(ParamRole::bias, {p.channels});
        break;
      }
      case LayerKind::deconv: {
        const std::size_t cin = graph.shape(l.inputs[0]).channels;
        add(ParamRole::weight, {cin, p.channels, p.kernel, p.kernel});
        add(ParamRole::bias, {p.channels});
        break;
      }
      case LayerKind::bn: {
        const std::size_t c = graph.shape(l.name).channels;
        add(ParamRole::gamma, {c});
        add(ParamRole::beta, {c});
        add(ParamRole::running_mean, {c}, false);
        add(ParamRole::running_var, {c}, false);
        break;
      }
      default:
        break;
    }
  }
  return specs;
}

MissingWeightError::MissingWeightError(const std::string& layer, const std::string& detail)
    : std::runtime_error("layer '" + layer + "': " + detail), layer_(layer) {}

void check_weights(const NetGraph& graph, const WeightStore& weights) {
  for (const auto& spec : parameter_specs(graph)) {
    if (!weights.contains(spec.name)) throw MissingWeightError(spec.layer, "missing weight '" + spec.name + "'");
    if (weights.at(spec.name).shape() != spec.shape) {
      throw MissingWeightError(spec.layer, "weight '" + spec.name + "' has shape " +
                                               to_string(weights.at(spec.name).shape()) + ", expected " +
                                               to_string(spec.shape));
    }
  }
}

namespace {

// Per-channel bilinear upsampling kernel. When kernel == stride the bilinear
// kernel degenerates to replication, so use ones.
Tensor upsampler(const Shape& shape, std::size_t stride) {
  Tensor w(shape);
  const std::size_t cin = shape[0], cout = shape[1], k = shape[2];
  std::vector<double> profile(k, 1.0);
  if (k != stride) {
    const double factor = static_cast<double>((k + 1) / 2);
    const double center = k % 2 == 1 ? factor - 1 : factor - 0.5;
    for (std::size_t i = 0; i < k; ++i) profile[i] = 1.0 - std::abs(static_cast<double>(i) - center) / factor;
  }
  for (std::size_t c = 0; c < std::min(cin, cout); ++c)
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < k; ++j) w.at(c, c, i, j) = static_cast<float>(profile[i] * profile[j]);
  return w;
}

}  // namespace

WeightStore init_weights(const NetGraph& graph, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  WeightStore store;
  for (const auto& spec : parameter_specs(graph)) {
    const LayerSpec& layer = graph.layer(spec.layer);
    Tensor t(spec.shape);
    switch (spec.role) {
      case ParamRole::weight:
        if (layer.kind == LayerKind::deconv) {
          t = upsampler(spec.shape, layer.params.stride);
        } else {
          const double fan_in = static_cast<double>(spec.shape[1] * spec.shape[2] * spec.shape[3]);
          const double bound = std::sqrt(6.0 / fan_in);
          std::uniform_real_distribution<double> dist(-bound, bound);
          for (float& v : t.storage()) v = static_cast<float>(dist(rng));
        }
        break;
      case ParamRole::gamma:
      case ParamRole::running_var:
        t = Tensor(spec.shape, 1.0f);
        break;
      default:
        break;
    }
    store.set(spec.name, std::move(t));
  }
  return store;
}

std::size_t overlay(WeightStore& dst, const WeightStore& src) {
  std::size_t copied = 0;
  for (const auto& [name, t] : src.tensors()) {
    if (dst.contains(name) && dst.at(name).shape() == t.shape()) {
      dst.set(name, t);
      ++copied;
    }
  }
  return copied;
}

namespace {

constexpr char kMagic[4] = {'E', 'S', 'W', 'T'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

struct Reader {
  const std::vector<std::uint8_t>& bytes;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (bytes.size() - pos < n) throw std::runtime_error("weight file truncated at byte " + std::to_string(pos));
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[pos + i]) << (8 * i);
    pos += 4;
    return v;
  }
};

}  // namespace

std::vector<std::uint8_t> serialize_weights(const WeightStore& weights) {
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(weights.size()));
  for (const auto& [name, t] : weights.tensors()) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (float v : t.storage()) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      put_u32(out, bits);
    }
  }
  return out;
}

WeightStore deserialize_weights(const std::vector<std::uint8_t>& bytes) {
  Reader r{bytes};
  r.need(4);
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw std::runtime_error("not a weight file (bad magic)");
  r.pos = 4;
  if (const auto version = r.u32(); version != kVersion) {
    throw std::runtime_error("unsupported weight file version " + std::to_string(version));
  }
  const std::uint32_t count = r.u32();
  WeightStore store;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t len = r.u32();
    r.need(len);
    std::string name(bytes.begin() + static_cast<std::ptrdiff_t>(r.pos),
                     bytes.begin() + static_cast<std::ptrdiff_t>(r.pos + len));
    r.pos += len;
    const std::uint32_t rank = r.u32();
    Shape shape(rank);
    for (auto& d : shape) d = r.u32();
    std::vector<float> data(element_count(shape));
    for (float& v : data) {
      const std::uint32_t bits = r.u32();
      std::memcpy(&v, &bits, sizeof v);
    }
    store.set(name, Tensor(std::move(shape), std::move(data)));
  }
  if (r.pos != bytes.size()) throw std::runtime_error("trailing bytes after weight tensors");
  return store;
}

void save_weights(const WeightStore& weights, const std::string& path) {
  const auto bytes = serialize_weights(weights);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write weight file '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

WeightStore load_weights(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open weight file '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_weights(bytes);
}

ForwardPass forward(const NetGraph& graph, const WeightStore& weights, const Tensor& images,
                    const ForwardOptions& options) {
  check_weights(graph, weights);
  const FeatureShape& in_shape = graph.shape(graph.data_layer());
  Tensor batch = images.rank() == 3 ? images.reshaped({1, images.dim(0), images.dim(1), images.dim(2)}) : images;
  if (batch.rank() != 4 || batch.dim(1) != in_shape.channels || batch.dim(2) != in_shape.height ||
      batch.dim(3) != in_shape.width) {
    throw ShapeError("image batch " + to_string(images.shape()) + " does not match data layer " +
                     std::to_string(in_shape.channels) + "x" + std::to_string(in_shape.height) + "x" +
                     std::to_string(in_shape.width));
  }

  ForwardPass pass(options.requires_grad);
  auto& tape = pass.tape;
  auto trainable = [&](const std::string& layer) {
    return options.trainable.empty() || options.trainable.count(layer) != 0;
  };
  auto param = [&](const std::string& layer, ParamRole role) {
    const std::string name = param_name(layer, role);
    Var v = tape.leaf(weights.at(name), options.requires_grad && trainable(layer));
    pass.params.emplace(name, v);
    return v;
  };

  for (std::size_t idx : graph.topo_order()) {
    const LayerSpec& l = graph.layers()[idx];
    const auto& p = l.params;
    std::vector<Var> in;
    for (const auto& name : l.inputs) in.push_back(pass.outputs.at(name));
    Var out;
    switch (l.kind) {
      case LayerKind::data:
        out = tape.leaf(batch, false);
        break;
      case LayerKind::conv:
      case LayerKind::conf_head:
      case LayerKind::loc_head:
        out = tape.conv2d(in[0], param(l.name, ParamRole::weight), param(l.name, ParamRole::bias), p.stride, p.pad,
                          p.dilation);
        break;
      case LayerKind::deconv:
        out = tape.deconv2d(in[0], param(l.name, ParamRole::weight), param(l.name, ParamRole::bias), p.stride,
                            p.pad);
        break;
      case LayerKind::bn: {
        const bool batch_mode = options.mode == ops::BatchNormMode::train && trainable(l.name);
        const auto mode = batch_mode ? ops::BatchNormMode::train : ops::BatchNormMode::eval;
        ops::BatchNormState<float> stats;
        out = tape.batch_norm(in[0], param(l.name, ParamRole::gamma), param(l.name, ParamRole::beta),
                              options.bn_eps, mode, &weights.at(param_name(l.name, ParamRole::running_mean)),
                              &weights.at(param_name(l.name, ParamRole::running_var)), batch_mode ? &stats : nullptr);
        if (batch_mode) {
          stats.normalized = Tensor();
          pass.batch_stats.emplace(l.name, std::move(stats));
        }
        break;
      }
      case LayerKind::relu:
        out = tape.relu(in[0]);
        break;
      case LayerKind::pool:
        out = tape.max_pool2d(in[0], {p.kernel, p.stride, p.pad, p.ceil_mode});
        break;
      case LayerKind::concat:
        out = tape.concat_channels(in);
        break;
      case LayerKind::eltwise_sum:
        out = tape.eltwise(in[0], in[1], ops::EltwiseMode::sum);
        break;
      case LayerKind::eltwise_prod:
        out = tape.eltwise(in[0], in[1], ops::EltwiseMode::prod);
        break;
    }
    pass.outputs.emplace(l.name, out);
  }

  for (const auto& h : graph.heads()) {
    pass.conf_scales.push_back(tape.flatten_head(pass.outputs.at(h.conf), h.num_classes + 1));
    pass.loc_scales.push_back(tape.flatten_head(pass.outputs.at(h.loc), 4));
  }
  if (!pass.conf_scales.empty()) {
    pass.conf = tape.concat_rows(pass.conf_scales);
    pass.loc = tape.concat_rows(pass.loc_scales);
  }
  return pass;
}

void update_batch_norm_stats(WeightStore& weights, const ForwardPass& pass, float momentum) {
  for (const auto& [layer, stats] : pass.batch_stats) {
    ops::update_running_stats(weights.at(param_name(layer, ParamRole::running_mean)),
                              weights.at(param_name(layer, ParamRole::running_var)), stats, momentum);
  }
}

}  // namespace essd
