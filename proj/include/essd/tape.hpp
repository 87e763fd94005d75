#pragma once

#include <algorithm>
#include <cstddef>
#include <deque>
#include <initializer_list>
#include <memory>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "essd/ops.hpp"
#include "essd/tensor.hpp"

namespace essd {

/// Handle to a value recorded on a GradTape.
struct Var {
  std::size_t id = 0;
  bool operator==(const Var&) const = default;
};

template <typename T>
class Gradients {
 public:
  using TensorT = BasicTensor<T>;

  Gradients(std::vector<std::optional<TensorT>> grads, std::vector<Shape> shapes)
      : grads_(std::move(grads)), shapes_(std::move(shapes)) {}

  /// Gradient of the loss w.r.t. v; zeros when v is not on a path to the loss.
  TensorT of(Var v) const {
    const auto& g = grads_.at(v.id);
    return g ? *g : TensorT(shapes_.at(v.id));
  }
  bool reached(Var v) const { return grads_.at(v.id).has_value(); }

 private:
  std::vector<std::optional<TensorT>> grads_;
  std::vector<Shape> shapes_;
};

/// Reverse-mode tape. Every op appends its output value and, when any input
/// requires a gradient, a backward record. Records are appended in execution
/// order, so the tape is topologically sorted by construction. One tape per
/// training step; not thread-safe.
template <typename T>
class GradTape {
 public:
  using TensorT = BasicTensor<T>;

  explicit GradTape(bool record = true) : record_(record) {}

  Var leaf(TensorT value, bool requires_grad = false) {
    return push(std::move(value), requires_grad && record_);
  }

  const TensorT& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }
  std::size_t record_count() const { return records_.size(); }

  Var conv2d(Var x, Var w, std::optional<Var> b, std::size_t stride, std::size_t pad,
             std::size_t dilation = 1) {
    const TensorT* bias = b ? &value(*b) : nullptr;
    Var out = push(ops::conv2d(value(x), value(w), bias, stride, pad, dilation), false);
    std::vector<Var> inputs{x, w};
    if (b) inputs.push_back(*b);
    record(out, std::move(inputs), [=](const GradTape& t, const TensorT& g, std::vector<TensorT>& gin) {
      auto r = ops::conv2d_backward(t.value(x), t.value(w), b.has_value(), g, stride, pad, dilation);
      gin[0] = std::move(r.input);
      gin[1] = std::move(r.weight);
      if (b) gin[2] = std::move(r.bias);
    });
    return out;
  }

  Var deconv2d(Var x, Var w, std::optional<Var> b, std::size_t stride, std::size_t pad) {
    const TensorT* bias = b ? &value(*b) : nullptr;
    Var out = push(ops::deconv2d(value(x), value(w), bias, stride, pad), false);
    std::vector<Var> inputs{x, w};
    if (b) inputs.push_back(*b);
    record(out, std::move(inputs), [=](const GradTape& t, const TensorT& g, std::vector<TensorT>& gin) {
      auto r = ops::deconv2d_backward(t.value(x), t.value(w), b.has_value(), g, stride, pad);
      gin[0] = std::move(r.input);
      gin[1] = std::move(r.weight);
      if (b) gin[2] = std::move(r.bias);
    });
    return out;
  }

  /// When batch_stats is non-null it receives the statistics used, so the
  /// caller can fold them into running averages.
  Var batch_norm(Var x, Var gamma, Var beta, T eps, ops::BatchNormMode mode,
                 const TensorT* running_mean = nullptr, const TensorT* running_var = nullptr,
                 ops::BatchNormState<T>* batch_stats = nullptr) {
    auto r = ops::batch_norm(value(x), value(gamma), value(beta), eps, mode, running_mean, running_var);
    if (batch_stats) *batch_stats = r.state;
    Var out = push(std::move(r.output), false);
    if (record_ && any_requires_grad({x, gamma, beta})) {
      auto state = std::make_shared<ops::BatchNormState<T>>(std::move(r.state));
      record(out, {x, gamma, beta}, [=](const GradTape& t, const TensorT& g, std::vector<TensorT>& gin) {
        auto bg = ops::batch_norm_backward(t.value(gamma), *state, mode, g);
        gin[0] = std::move(bg.input);
        gin[1] = std::move(bg.gamma);
        gin[2] = std::move(bg.beta);
      });
    }
    return out;
  }

  Var relu(Var x) {
    Var out = push(ops::relu(value(x)), false);
    record(out, {x}, [=](const GradTape& t, const TensorT& g, std::vector<TensorT>& gin) {
      gin[0] = ops::relu_backward(t.value(x), g);
    });
    return out;
  }

  Var max_pool2d(Var x, const ops::PoolGeometry& geom) {
    auto r = ops::max_pool2d(value(x), geom);
    Var out = push(std::move(r.output), false);
    if (record_ && any_requires_grad({x})) {
      auto argmax = std::make_shared<std::vector<std::size_t>>(std::move(r.argmax));
      record(out, {x}, [=](const GradTape& t, const TensorT& g, std::vector<TensorT>& gin) {
        gin[0] = ops::max_pool2d_backward(t.value(x).shape(), *argmax, g);
      });
    }
    return out;
  }

  Var concat_channels(std::span<const Var> xs) {
    std::vector<const TensorT*> ptrs;
    std::vector<std::size_t> channels;
    for (Var v : xs) {
      ptrs.push_back(&value(v));
      channels.push_back(value(v).rank() == 4 ? value(v).dim(1) : 0);
    }
    Var out = push(ops::concat_channels<T>(ptrs), false);
    record(out, {xs.begin(), xs.end()}, [channels](const GradTape&, const TensorT& g, std::vector<TensorT>& gin) {
      auto parts = ops::split_channels(g, channels);
      for (std::size_t i = 0; i < parts.size(); ++i) gin[i] = std::move(parts[i]);
    });
    return out;
  }

  Var eltwise(Var a, Var b, ops::EltwiseMode mode) {
    Var out = push(ops::eltwise(value(a), value(b), mode), false);
    record(out, {a, b}, [=](const GradTape& t, const TensorT& g, std::vector<TensorT>& gin) {
      if (mode == ops::EltwiseMode::sum) {
        gin[0] = g;
        gin[1] = g;
      } else {
        gin[0] = ops::eltwise(g, t.value(b), ops::EltwiseMode::prod);
        gin[1] = ops::eltwise(g, t.value(a), ops::EltwiseMode::prod);
      }
    });
    return out;
  }

  Var flatten_head(Var x, std::size_t per_box) {
    Var out = push(ops::flatten_head(value(x), per_box), false);
    record(out, {x}, [=](const GradTape& t, const TensorT& g, std::vector<TensorT>& gin) {
      gin[0] = ops::flatten_head_backward(t.value(x).shape(), g);
    });
    return out;
  }

  Var concat_rows(std::span<const Var> xs) {
    std::vector<const TensorT*> ptrs;
    std::vector<std::size_t> rows;
    for (Var v : xs) {
      ptrs.push_back(&value(v));
      rows.push_back(value(v).rank() == 3 ? value(v).dim(1) : 0);
    }
    Var out = push(ops::concat_rows<T>(ptrs), false);
    record(out, {xs.begin(), xs.end()}, [rows](const GradTape&, const TensorT& g, std::vector<TensorT>& gin) {
      const std::size_t n = g.dim(0), k = g.dim(2);
      for (std::size_t i = 0; i < rows.size(); ++i) gin[i] = TensorT({n, rows[i], k});
      const T* src = g.data().data();
      for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t i = 0; i < rows.size(); ++i) {
          const std::size_t block = rows[i] * k;
          std::copy(src, src + block, gin[i].data().data() + b * block);
          src += block;
        }
      }
    });
    return out;
  }

  Var softmax_ce_sum(Var logits, std::vector<std::size_t> rows, std::vector<std::size_t> labels) {
    const T loss = ops::softmax_ce_sum<T>(value(logits), rows, labels);
    Var out = push(TensorT(Shape{}, std::vector<T>{loss}), false);
    record(out, {logits}, [=](const GradTape& t, const TensorT& g, std::vector<TensorT>& gin) {
      gin[0] = ops::softmax_ce_sum_backward<T>(t.value(logits), rows, labels, g[0]);
    });
    return out;
  }

  Var smooth_l1_sum(Var pred, std::vector<std::size_t> rows, std::vector<T> targets) {
    const T loss = ops::smooth_l1_sum<T>(value(pred), rows, targets);
    Var out = push(TensorT(Shape{}, std::vector<T>{loss}), false);
    record(out, {pred}, [=](const GradTape& t, const TensorT& g, std::vector<TensorT>& gin) {
      gin[0] = ops::smooth_l1_sum_backward<T>(t.value(pred), rows, targets, g[0]);
    });
    return out;
  }

  Var add(Var a, Var b) { return eltwise(a, b, ops::EltwiseMode::sum); }

  Var scale(Var x, T factor) {
    TensorT y = value(x);
    for (T& v : y.storage()) v *= factor;
    Var out = push(std::move(y), false);
    record(out, {x}, [factor](const GradTape&, const TensorT& g, std::vector<TensorT>& gin) {
      gin[0] = g;
      for (T& v : gin[0].storage()) v *= factor;
    });
    return out;
  }

  /// Sum of all elements, as a scalar.
  Var sum(Var x) {
    T s{0};
    for (T v : value(x).storage()) s += v;
    Var out = push(TensorT(Shape{}, std::vector<T>{s}), false);
    record(out, {x}, [=](const GradTape& t, const TensorT& g, std::vector<TensorT>& gin) {
      gin[0] = TensorT(t.value(x).shape(), g[0]);
    });
    return out;
  }

  /// Reverse sweep from a scalar loss. A value consumed by several records
  /// receives the sum of their partials.
  Gradients<T> backward(Var loss) const {
    if (value(loss).size() != 1) {
      throw ShapeError("backward requires a scalar loss, got shape " + to_string(value(loss).shape()));
    }
    std::vector<std::optional<TensorT>> grads(nodes_.size());
    grads[loss.id] = TensorT(value(loss).shape(), T{1});
    std::vector<TensorT> gin;
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
      const auto& rec = *it;
      if (!grads[rec.output]) continue;
      gin.assign(rec.inputs.size(), TensorT());
      rec.backward(*this, *grads[rec.output], gin);
      for (std::size_t i = 0; i < rec.inputs.size(); ++i) {
        const std::size_t id = rec.inputs[i];
        if (!nodes_[id].requires_grad || gin[i].empty()) continue;
        if (!grads[id]) {
          grads[id] = std::move(gin[i]);
        } else {
          auto& acc = grads[id]->storage();
          const auto& add = gin[i].storage();
          for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += add[j];
        }
      }
    }
    std::vector<Shape> shapes;
    shapes.reserve(nodes_.size());
    for (const auto& n : nodes_) shapes.push_back(n.value.shape());
    return Gradients<T>(std::move(grads), std::move(shapes));
  }

 private:
  using BackwardFn = std::function<void(const GradTape&, const TensorT&, std::vector<TensorT>&)>;

  struct Node {
    TensorT value;
    bool requires_grad = false;
  };
  struct Record {
    std::vector<std::size_t> inputs;
    std::size_t output;
    BackwardFn backward;
  };

  Var push(TensorT value, bool requires_grad) {
    nodes_.push_back(Node{std::move(value), requires_grad});
    return Var{nodes_.size() - 1};
  }

  bool any_requires_grad(std::initializer_list<Var> vs) const {
    for (Var v : vs)
      if (requires_grad(v)) return true;
    return false;
  }

  void record(Var out, std::vector<Var> inputs, BackwardFn fn) {
    if (!record_) return;
    bool needed = false;
    for (Var v : inputs) needed = needed || requires_grad(v);
    if (!needed) return;
    nodes_[out.id].requires_grad = true;
    Record rec{{}, out.id, std::move(fn)};
    for (Var v : inputs) rec.inputs.push_back(v.id);
    records_.push_back(std::move(rec));
  }

  bool record_;
  std::deque<Node> nodes_;
  std::vector<Record> records_;
};

}  // namespace essd
