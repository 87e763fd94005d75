#pragma once

// Forward and backward kernels for the differentiable ops. These are pure
// functions over tensors; GradTape wires them together.

#include <cstddef>
#include <span>
#include <vector>

#include "essd/tensor.hpp"

namespace essd::ops {

struct ConvGeometry {
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t pad = 0;
  std::size_t dilation = 1;
};

/// floor((in + 2*pad - dilation*(k-1) - 1) / stride) + 1; throws when the
/// window does not fit or the result would be empty.
std::size_t conv_output_extent(std::size_t in, const ConvGeometry& g);
/// (in-1)*stride - 2*pad + dilation*(k-1) + 1; throws when non-positive.
std::size_t deconv_output_extent(std::size_t in, const ConvGeometry& g);

template <typename T>
struct ConvGrads {
  BasicTensor<T> input;
  BasicTensor<T> weight;
  BasicTensor<T> bias;
};

// conv2d: x [N,Cin,H,W], w [Cout,Cin,k,k], b [Cout] (may be empty).
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>* b,
                      std::size_t stride, std::size_t pad, std::size_t dilation = 1);
template <typename T>
ConvGrads<T> conv2d_backward(const BasicTensor<T>& x, const BasicTensor<T>& w, bool has_bias,
                             const BasicTensor<T>& grad_out, std::size_t stride, std::size_t pad,
                             std::size_t dilation = 1);

// deconv2d (transposed conv): x [N,Cin,H,W], w [Cin,Cout,k,k], b [Cout].
template <typename T>
BasicTensor<T> deconv2d(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>* b,
                        std::size_t stride, std::size_t pad);
template <typename T>
ConvGrads<T> deconv2d_backward(const BasicTensor<T>& x, const BasicTensor<T>& w, bool has_bias,
                               const BasicTensor<T>& grad_out, std::size_t stride, std::size_t pad);

enum class BatchNormMode { train, eval };

template <typename T>
struct BatchNormState {
  // Per-channel batch statistics (train) or the running statistics (eval).
  std::vector<T> mean;
  std::vector<T> var;
  std::vector<T> inv_std;
  BasicTensor<T> normalized;
};

template <typename T>
struct BatchNormResult {
  BasicTensor<T> output;
  BatchNormState<T> state;
};

/// Train mode normalizes with population batch variance. Eval mode reads
/// running_mean / running_var, which must be populated.
template <typename T>
BatchNormResult<T> batch_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                              const BasicTensor<T>& beta, T eps, BatchNormMode mode,
                              const BasicTensor<T>* running_mean = nullptr,
                              const BasicTensor<T>* running_var = nullptr);

template <typename T>
struct BatchNormGrads {
  BasicTensor<T> input;
  BasicTensor<T> gamma;
  BasicTensor<T> beta;
};

template <typename T>
BatchNormGrads<T> batch_norm_backward(const BasicTensor<T>& gamma, const BatchNormState<T>& state,
                                      BatchNormMode mode, const BasicTensor<T>& grad_out);

/// running <- momentum * running + (1 - momentum) * batch.
template <typename T>
void update_running_stats(BasicTensor<T>& running_mean, BasicTensor<T>& running_var,
                          const BatchNormState<T>& batch, T momentum);

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x);
template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& x, const BasicTensor<T>& grad_out);

template <typename T>
struct PoolResult {
  BasicTensor<T> output;
  std::vector<std::size_t> argmax;  // flat input index per output element
};

struct PoolGeometry {
  std::size_t kernel = 2;
  std::size_t stride = 2;
  std::size_t pad = 0;
  bool ceil_mode = false;
};

std::size_t pool_output_extent(std::size_t in, const PoolGeometry& g);

/// Window maximum; ties resolve to the first position in row-major window order.
template <typename T>
PoolResult<T> max_pool2d(const BasicTensor<T>& x, const PoolGeometry& g);
template <typename T>
BasicTensor<T> max_pool2d_backward(const Shape& input_shape, const std::vector<std::size_t>& argmax,
                                   const BasicTensor<T>& grad_out);

template <typename T>
BasicTensor<T> concat_channels(std::span<const BasicTensor<T>* const> inputs);
template <typename T>
std::vector<BasicTensor<T>> split_channels(const BasicTensor<T>& grad_out,
                                           std::span<const std::size_t> channels);

enum class EltwiseMode { sum, prod };

template <typename T>
BasicTensor<T> eltwise(const BasicTensor<T>& a, const BasicTensor<T>& b, EltwiseMode mode);

/// [N, boxes*K, H, W] -> [N, H*W*boxes, K]; rows ordered (h, w, box).
template <typename T>
BasicTensor<T> flatten_head(const BasicTensor<T>& x, std::size_t per_box);
template <typename T>
BasicTensor<T> flatten_head_backward(const Shape& input_shape, const BasicTensor<T>& grad_out);

/// Concatenate [N, A_i, K] along axis 1.
template <typename T>
BasicTensor<T> concat_rows(std::span<const BasicTensor<T>* const> inputs);

/// Sum over the selected rows of -log softmax(logits[row])[label]. logits is
/// viewed as [R, K] where K is the last extent.
template <typename T>
T softmax_ce_sum(const BasicTensor<T>& logits, std::span<const std::size_t> rows,
                 std::span<const std::size_t> labels);
template <typename T>
BasicTensor<T> softmax_ce_sum_backward(const BasicTensor<T>& logits,
                                       std::span<const std::size_t> rows,
                                       std::span<const std::size_t> labels, T grad_out);

/// Per-row cross entropy against a single label, used for mining.
template <typename T>
std::vector<T> row_cross_entropy(const BasicTensor<T>& logits, std::size_t label);

/// Sum over the selected rows (viewed as [R, 4]) of smooth-L1(pred - target).
/// targets holds 4 values per selected row.
template <typename T>
T smooth_l1_sum(const BasicTensor<T>& pred, std::span<const std::size_t> rows,
                std::span<const T> targets);
template <typename T>
BasicTensor<T> smooth_l1_sum_backward(const BasicTensor<T>& pred,
                                      std::span<const std::size_t> rows,
                                      std::span<const T> targets, T grad_out);

}  // namespace essd::ops
