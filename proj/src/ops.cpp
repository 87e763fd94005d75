#include "essd/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace essd {

std::string to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

template <typename T>
bool all_finite(const BasicTensor<T>& t) {
  return std::all_of(t.storage().begin(), t.storage().end(),
                     [](T v) { return std::isfinite(v); });
}

template bool all_finite(const BasicTensor<float>&);
template bool all_finite(const BasicTensor<double>&);

}  // namespace essd

namespace essd::ops {
namespace {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

void require_rank4(const Shape& s, const char* what) {
  if (s.size() != 4) {
    throw ShapeError(std::string(what) + " must be rank 4 (N,C,H,W), got " + to_string(s));
  }
}

// Spatial gather for one image: cols[(c*k + ki)*k + kj, oh*Wo + ow].
template <typename T>
void im2col(const T* img, std::size_t channels, std::size_t height, std::size_t width,
            const ConvGeometry& g, std::size_t out_h, std::size_t out_w, T* cols) {
  const std::size_t k = g.kernel;
  const auto pad = static_cast<std::ptrdiff_t>(g.pad);
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        T* row = cols + ((c * k + ki) * k + kj) * out_h * out_w;
        for (std::size_t oh = 0; oh < out_h; ++oh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki * g.dilation) - pad;
          T* dst = row + oh * out_w;
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(height)) {
            std::fill(dst, dst + out_w, T{0});
            continue;
          }
          const T* src = img + (c * height + static_cast<std::size_t>(ih)) * width;
          for (std::size_t ow = 0; ow < out_w; ++ow) {
            const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * g.stride + kj * g.dilation) - pad;
            dst[ow] = (iw < 0 || iw >= static_cast<std::ptrdiff_t>(width)) ? T{0} : src[iw];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-add columns back into the image.
template <typename T>
void col2im(const T* cols, std::size_t channels, std::size_t height, std::size_t width,
            const ConvGeometry& g, std::size_t out_h, std::size_t out_w, T* img) {
  const std::size_t k = g.kernel;
  const auto pad = static_cast<std::ptrdiff_t>(g.pad);
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        const T* row = cols + ((c * k + ki) * k + kj) * out_h * out_w;
        for (std::size_t oh = 0; oh < out_h; ++oh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki * g.dilation) - pad;
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(height)) continue;
          T* dst = img + (c * height + static_cast<std::size_t>(ih)) * width;
          const T* src = row + oh * out_w;
          for (std::size_t ow = 0; ow < out_w; ++ow) {
            const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * g.stride + kj * g.dilation) - pad;
            if (iw >= 0 && iw < static_cast<std::ptrdiff_t>(width)) dst[iw] += src[ow];
          }
        }
      }
    }
  }
}

bool is_pointwise(const ConvGeometry& g) {
  return g.kernel == 1 && g.stride == 1 && g.pad == 0;
}

}  // namespace

std::size_t conv_output_extent(std::size_t in, const ConvGeometry& g) {
  if (g.stride == 0 || g.kernel == 0 || g.dilation == 0) {
    throw ShapeError("conv kernel, stride and dilation must be positive");
  }
  const std::size_t span = g.dilation * (g.kernel - 1) + 1;
  if (span > in + 2 * g.pad) {
    throw ShapeError("conv window " + std::to_string(span) + " exceeds padded input extent " +
                     std::to_string(in + 2 * g.pad));
  }
  return (in + 2 * g.pad - span) / g.stride + 1;
}

std::size_t deconv_output_extent(std::size_t in, const ConvGeometry& g) {
  if (g.stride == 0 || g.kernel == 0 || g.dilation == 0) {
    throw ShapeError("deconv kernel, stride and dilation must be positive");
  }
  const auto out = static_cast<std::ptrdiff_t>((in - 1) * g.stride + g.dilation * (g.kernel - 1) + 1) -
                   2 * static_cast<std::ptrdiff_t>(g.pad);
  if (out <= 0) {
    throw ShapeError("deconv output extent is non-positive (" + std::to_string(out) + ")");
  }
  return static_cast<std::size_t>(out);
}

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>* b,
                      std::size_t stride, std::size_t pad, std::size_t dilation) {
  require_rank4(x.shape(), "conv2d input");
  require_rank4(w.shape(), "conv2d weight");
  const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t cout = w.dim(0), k = w.dim(2);
  if (w.dim(1) != cin) {
    throw ShapeError("conv2d weight expects " + std::to_string(w.dim(1)) + " input channels, input " +
                     to_string(x.shape()) + " has " + std::to_string(cin));
  }
  if (w.dim(3) != k) throw ShapeError("conv2d kernel must be square, got " + to_string(w.shape()));
  if (b && !b->empty() && b->size() != cout) {
    throw ShapeError("conv2d bias has " + std::to_string(b->size()) + " entries, expected " +
                     std::to_string(cout));
  }
  const ConvGeometry g{k, stride, pad, dilation};
  const std::size_t oh = conv_output_extent(h, g), ow = conv_output_extent(wd, g);
  const std::size_t ckk = cin * k * k, area = oh * ow;

  BasicTensor<T> y({n, cout, oh, ow});
  std::vector<T> cols(is_pointwise(g) ? 0 : ckk * area);
  ConstMatrixMap<T> wm(w.data().data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(ckk));
  for (std::size_t i = 0; i < n; ++i) {
    const T* img = x.data().data() + i * cin * h * wd;
    const T* col_ptr = img;
    if (!is_pointwise(g)) {
      im2col(img, cin, h, wd, g, oh, ow, cols.data());
      col_ptr = cols.data();
    }
    ConstMatrixMap<T> cm(col_ptr, static_cast<Eigen::Index>(ckk), static_cast<Eigen::Index>(area));
    MatrixMap<T> ym(y.data().data() + i * cout * area, static_cast<Eigen::Index>(cout),
                    static_cast<Eigen::Index>(area));
    ym.noalias() = wm * cm;
    if (b && !b->empty()) {
      for (std::size_t c = 0; c < cout; ++c) ym.row(static_cast<Eigen::Index>(c)).array() += (*b)[c];
    }
  }
  return y;
}

template <typename T>
ConvGrads<T> conv2d_backward(const BasicTensor<T>& x, const BasicTensor<T>& w, bool has_bias,
                             const BasicTensor<T>& grad_out, std::size_t stride, std::size_t pad,
                             std::size_t dilation) {
  const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t cout = w.dim(0), k = w.dim(2);
  const ConvGeometry g{k, stride, pad, dilation};
  const std::size_t oh = grad_out.dim(2), ow = grad_out.dim(3);
  const std::size_t ckk = cin * k * k, area = oh * ow;

  ConvGrads<T> grads{BasicTensor<T>(x.shape()), BasicTensor<T>(w.shape()),
                     has_bias ? BasicTensor<T>({cout}) : BasicTensor<T>()};
  std::vector<T> cols(is_pointwise(g) ? 0 : ckk * area);
  std::vector<T> grad_cols(is_pointwise(g) ? 0 : ckk * area);
  ConstMatrixMap<T> wm(w.data().data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(ckk));
  MatrixMap<T> gwm(grads.weight.data().data(), static_cast<Eigen::Index>(cout),
                   static_cast<Eigen::Index>(ckk));
  for (std::size_t i = 0; i < n; ++i) {
    const T* img = x.data().data() + i * cin * h * wd;
    T* gimg = grads.input.data().data() + i * cin * h * wd;
    ConstMatrixMap<T> gym(grad_out.data().data() + i * cout * area, static_cast<Eigen::Index>(cout),
                          static_cast<Eigen::Index>(area));
    if (is_pointwise(g)) {
      ConstMatrixMap<T> cm(img, static_cast<Eigen::Index>(ckk), static_cast<Eigen::Index>(area));
      gwm.noalias() += gym * cm.transpose();
      MatrixMap<T> gcm(gimg, static_cast<Eigen::Index>(ckk), static_cast<Eigen::Index>(area));
      gcm.noalias() = wm.transpose() * gym;
    } else {
      im2col(img, cin, h, wd, g, oh, ow, cols.data());
      ConstMatrixMap<T> cm(cols.data(), static_cast<Eigen::Index>(ckk), static_cast<Eigen::Index>(area));
      gwm.noalias() += gym * cm.transpose();
      MatrixMap<T> gcm(grad_cols.data(), static_cast<Eigen::Index>(ckk), static_cast<Eigen::Index>(area));
      gcm.noalias() = wm.transpose() * gym;
      col2im(grad_cols.data(), cin, h, wd, g, oh, ow, gimg);
    }
    if (has_bias) {
      for (std::size_t c = 0; c < cout; ++c) grads.bias[c] += gym.row(static_cast<Eigen::Index>(c)).sum();
    }
  }
  return grads;
}

template <typename T>
BasicTensor<T> deconv2d(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>* b,
                        std::size_t stride, std::size_t pad) {
  require_rank4(x.shape(), "deconv2d input");
  require_rank4(w.shape(), "deconv2d weight");
  const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t cout = w.dim(1), k = w.dim(2);
  if (w.dim(0) != cin) {
    throw ShapeError("deconv2d weight expects " + std::to_string(w.dim(0)) + " input channels, input " +
                     to_string(x.shape()) + " has " + std::to_string(cin));
  }
  if (w.dim(3) != k) throw ShapeError("deconv2d kernel must be square, got " + to_string(w.shape()));
  if (b && !b->empty() && b->size() != cout) {
    throw ShapeError("deconv2d bias has " + std::to_string(b->size()) + " entries, expected " +
                     std::to_string(cout));
  }
  const ConvGeometry g{k, stride, pad, 1};
  const std::size_t oh = deconv_output_extent(h, g), ow = deconv_output_extent(wd, g);
  // The equivalent forward conv maps (oh, ow) back onto (h, w).
  if (conv_output_extent(oh, g) != h || conv_output_extent(ow, g) != wd) {
    throw ShapeError("deconv2d geometry is not invertible for input " + to_string(x.shape()));
  }
  const std::size_t ckk = cout * k * k, area = h * wd;

  BasicTensor<T> y({n, cout, oh, ow});
  std::vector<T> cols(ckk * area);
  ConstMatrixMap<T> wm(w.data().data(), static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(ckk));
  for (std::size_t i = 0; i < n; ++i) {
    ConstMatrixMap<T> xm(x.data().data() + i * cin * area, static_cast<Eigen::Index>(cin),
                         static_cast<Eigen::Index>(area));
    MatrixMap<T> cm(cols.data(), static_cast<Eigen::Index>(ckk), static_cast<Eigen::Index>(area));
    cm.noalias() = wm.transpose() * xm;
    T* out = y.data().data() + i * cout * oh * ow;
    col2im(cols.data(), cout, oh, ow, g, h, wd, out);
    if (b && !b->empty()) {
      for (std::size_t c = 0; c < cout; ++c) {
        std::for_each(out + c * oh * ow, out + (c + 1) * oh * ow, [v = (*b)[c]](T& e) { e += v; });
      }
    }
  }
  return y;
}

template <typename T>
ConvGrads<T> deconv2d_backward(const BasicTensor<T>& x, const BasicTensor<T>& w, bool has_bias,
                               const BasicTensor<T>& grad_out, std::size_t stride, std::size_t pad) {
  const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t cout = w.dim(1), k = w.dim(2);
  const std::size_t oh = grad_out.dim(2), ow = grad_out.dim(3);
  const ConvGeometry g{k, stride, pad, 1};
  const std::size_t ckk = cout * k * k, area = h * wd;

  ConvGrads<T> grads{BasicTensor<T>(x.shape()), BasicTensor<T>(w.shape()),
                     has_bias ? BasicTensor<T>({cout}) : BasicTensor<T>()};
  std::vector<T> cols(ckk * area);
  ConstMatrixMap<T> wm(w.data().data(), static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(ckk));
  MatrixMap<T> gwm(grads.weight.data().data(), static_cast<Eigen::Index>(cin),
                   static_cast<Eigen::Index>(ckk));
  for (std::size_t i = 0; i < n; ++i) {
    const T* gout = grad_out.data().data() + i * cout * oh * ow;
    im2col(gout, cout, oh, ow, g, h, wd, cols.data());
    ConstMatrixMap<T> cm(cols.data(), static_cast<Eigen::Index>(ckk), static_cast<Eigen::Index>(area));
    ConstMatrixMap<T> xm(x.data().data() + i * cin * area, static_cast<Eigen::Index>(cin),
                         static_cast<Eigen::Index>(area));
    MatrixMap<T> gxm(grads.input.data().data() + i * cin * area, static_cast<Eigen::Index>(cin),
                     static_cast<Eigen::Index>(area));
    gxm.noalias() = wm * cm;
    gwm.noalias() += xm * cm.transpose();
    if (has_bias) {
      for (std::size_t c = 0; c < cout; ++c) {
        const T* plane = gout + c * oh * ow;
        T acc{0};
        for (std::size_t j = 0; j < oh * ow; ++j) acc += plane[j];
        grads.bias[c] += acc;
      }
    }
  }
  return grads;
}

template <typename T>
BatchNormResult<T> batch_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                              const BasicTensor<T>& beta, T eps, BatchNormMode mode,
                              const BasicTensor<T>* running_mean, const BasicTensor<T>* running_var) {
  require_rank4(x.shape(), "batch_norm input");
  if (!(eps > T{0})) throw std::invalid_argument("batch_norm eps must be positive");
  const std::size_t n = x.dim(0), c = x.dim(1), area = x.dim(2) * x.dim(3);
  if (gamma.size() != c || beta.size() != c) {
    throw ShapeError("batch_norm gamma/beta must have " + std::to_string(c) + " entries");
  }
  BatchNormResult<T> r{BasicTensor<T>(x.shape()),
                       {std::vector<T>(c), std::vector<T>(c), std::vector<T>(c), BasicTensor<T>(x.shape())}};
  auto& st = r.state;
  if (mode == BatchNormMode::eval) {
    if (!running_mean || !running_var || running_mean->size() != c || running_var->size() != c) {
      throw std::invalid_argument("batch_norm eval mode requires populated running statistics");
    }
    for (std::size_t ch = 0; ch < c; ++ch) {
      st.mean[ch] = (*running_mean)[ch];
      st.var[ch] = (*running_var)[ch];
    }
  } else {
    const T count = static_cast<T>(n * area);
    for (std::size_t ch = 0; ch < c; ++ch) {
      T sum{0};
      for (std::size_t i = 0; i < n; ++i) {
        const T* p = x.data().data() + (i * c + ch) * area;
        for (std::size_t j = 0; j < area; ++j) sum += p[j];
      }
      const T mean = sum / count;
      T sq{0};
      for (std::size_t i = 0; i < n; ++i) {
        const T* p = x.data().data() + (i * c + ch) * area;
        for (std::size_t j = 0; j < area; ++j) sq += (p[j] - mean) * (p[j] - mean);
      }
      st.mean[ch] = mean;
      st.var[ch] = sq / count;
    }
  }
  for (std::size_t ch = 0; ch < c; ++ch) {
    st.inv_std[ch] = T{1} / std::sqrt(st.var[ch] + eps);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t off = (i * c + ch) * area;
      for (std::size_t j = 0; j < area; ++j) {
        const T xh = (x[off + j] - st.mean[ch]) * st.inv_std[ch];
        st.normalized[off + j] = xh;
        r.output[off + j] = gamma[ch] * xh + beta[ch];
      }
    }
  }
  return r;
}

template <typename T>
BatchNormGrads<T> batch_norm_backward(const BasicTensor<T>& gamma, const BatchNormState<T>& st,
                                      BatchNormMode mode, const BasicTensor<T>& grad_out) {
  const Shape& s = grad_out.shape();
  const std::size_t n = s[0], c = s[1], area = s[2] * s[3];
  BatchNormGrads<T> g{BasicTensor<T>(s), BasicTensor<T>({c}), BasicTensor<T>({c})};
  const T count = static_cast<T>(n * area);
  for (std::size_t ch = 0; ch < c; ++ch) {
    T sum_g{0}, sum_gx{0};
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t off = (i * c + ch) * area;
      for (std::size_t j = 0; j < area; ++j) {
        sum_g += grad_out[off + j];
        sum_gx += grad_out[off + j] * st.normalized[off + j];
      }
    }
    g.beta[ch] = sum_g;
    g.gamma[ch] = sum_gx;
    const T scale = gamma[ch] * st.inv_std[ch];
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t off = (i * c + ch) * area;
      for (std::size_t j = 0; j < area; ++j) {
        if (mode == BatchNormMode::eval) {
          g.input[off + j] = scale * grad_out[off + j];
        } else {
          g.input[off + j] =
              scale * (grad_out[off + j] - sum_g / count - st.normalized[off + j] * sum_gx / count);
        }
      }
    }
  }
  return g;
}

template <typename T>
void update_running_stats(BasicTensor<T>& running_mean, BasicTensor<T>& running_var,
                          const BatchNormState<T>& batch, T momentum) {
  for (std::size_t ch = 0; ch < batch.mean.size(); ++ch) {
    running_mean[ch] = momentum * running_mean[ch] + (T{1} - momentum) * batch.mean[ch];
    running_var[ch] = momentum * running_var[ch] + (T{1} - momentum) * batch.var[ch];
  }
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  BasicTensor<T> y = x;
  for (T& v : y.storage()) v = v > T{0} ? v : T{0};
  return y;
}

template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& x, const BasicTensor<T>& grad_out) {
  BasicTensor<T> g(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) g[i] = x[i] > T{0} ? grad_out[i] : T{0};
  return g;
}

std::size_t pool_output_extent(std::size_t in, const PoolGeometry& g) {
  if (g.kernel == 0 || g.stride == 0) throw ShapeError("pool kernel and stride must be positive");
  if (g.kernel > in + 2 * g.pad) {
    throw ShapeError("pool window " + std::to_string(g.kernel) + " exceeds padded input extent " +
                     std::to_string(in + 2 * g.pad));
  }
  const std::size_t span = in + 2 * g.pad - g.kernel;
  std::size_t out = (g.ceil_mode ? (span + g.stride - 1) / g.stride : span / g.stride) + 1;
  // A ceil-mode window must start inside the input or its left padding.
  if (g.ceil_mode && (out - 1) * g.stride >= in + g.pad) --out;
  return out;
}

template <typename T>
PoolResult<T> max_pool2d(const BasicTensor<T>& x, const PoolGeometry& g) {
  require_rank4(x.shape(), "max_pool2d input");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = pool_output_extent(h, g), ow = pool_output_extent(w, g);
  PoolResult<T> r{BasicTensor<T>({n, c, oh, ow}), std::vector<std::size_t>(n * c * oh * ow)};
  const auto pad = static_cast<std::ptrdiff_t>(g.pad);
  std::size_t out_idx = 0;
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const std::size_t base = plane * h * w;
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j, ++out_idx) {
        T best = -std::numeric_limits<T>::infinity();
        std::size_t best_idx = base;
        bool found = false;
        for (std::size_t ki = 0; ki < g.kernel; ++ki) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(i * g.stride + ki) - pad;
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t kj = 0; kj < g.kernel; ++kj) {
            const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(j * g.stride + kj) - pad;
            if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(w)) continue;
            const std::size_t idx = base + static_cast<std::size_t>(ih) * w + static_cast<std::size_t>(iw);
            if (!found || x[idx] > best) {
              best = x[idx];
              best_idx = idx;
              found = true;
            }
          }
        }
        r.output[out_idx] = best;
        r.argmax[out_idx] = best_idx;
      }
    }
  }
  return r;
}

template <typename T>
BasicTensor<T> max_pool2d_backward(const Shape& input_shape, const std::vector<std::size_t>& argmax,
                                   const BasicTensor<T>& grad_out) {
  BasicTensor<T> g(input_shape);
  for (std::size_t i = 0; i < argmax.size(); ++i) g[argmax[i]] += grad_out[i];
  return g;
}

template <typename T>
BasicTensor<T> concat_channels(std::span<const BasicTensor<T>* const> inputs) {
  if (inputs.empty()) throw ShapeError("concat_channels needs at least one input");
  const Shape& first = inputs[0]->shape();
  require_rank4(first, "concat_channels input 0");
  std::size_t channels = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Shape& s = inputs[i]->shape();
    require_rank4(s, "concat_channels input");
    if (s[0] != first[0] || s[2] != first[2] || s[3] != first[3]) {
      throw ShapeError("concat_channels input " + std::to_string(i) + " has shape " + to_string(s) +
                       ", incompatible with input 0 shape " + to_string(first));
    }
    channels += s[1];
  }
  const std::size_t n = first[0], area = first[2] * first[3];
  BasicTensor<T> y({n, channels, first[2], first[3]});
  T* out = y.data().data();
  for (std::size_t b = 0; b < n; ++b) {
    for (const auto* in : inputs) {
      const std::size_t block = in->dim(1) * area;
      const T* src = in->data().data() + b * block;
      out = std::copy(src, src + block, out);
    }
  }
  return y;
}

template <typename T>
std::vector<BasicTensor<T>> split_channels(const BasicTensor<T>& grad_out,
                                           std::span<const std::size_t> channels) {
  const std::size_t n = grad_out.dim(0), h = grad_out.dim(2), w = grad_out.dim(3), area = h * w;
  std::vector<BasicTensor<T>> parts;
  parts.reserve(channels.size());
  for (std::size_t c : channels) parts.emplace_back(Shape{n, c, h, w});
  const T* src = grad_out.data().data();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t p = 0; p < channels.size(); ++p) {
      const std::size_t block = channels[p] * area;
      std::copy(src, src + block, parts[p].data().data() + b * block);
      src += block;
    }
  }
  return parts;
}

template <typename T>
BasicTensor<T> eltwise(const BasicTensor<T>& a, const BasicTensor<T>& b, EltwiseMode mode) {
  if (a.shape() != b.shape()) {
    throw ShapeError("eltwise operands differ in shape: " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
  BasicTensor<T> y = a;
  for (std::size_t i = 0; i < y.size(); ++i) {
    y[i] = mode == EltwiseMode::sum ? a[i] + b[i] : a[i] * b[i];
  }
  return y;
}

template <typename T>
BasicTensor<T> flatten_head(const BasicTensor<T>& x, std::size_t per_box) {
  require_rank4(x.shape(), "flatten_head input");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (per_box == 0 || c % per_box != 0) {
    throw ShapeError("head channels " + std::to_string(c) + " not divisible by " + std::to_string(per_box));
  }
  const std::size_t boxes = c / per_box;
  BasicTensor<T> y({n, h * w * boxes, per_box});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) {
          const std::size_t row = (i * w + j) * boxes + ch / per_box;
          y[(b * h * w * boxes + row) * per_box + ch % per_box] = x.at(b, ch, i, j);
        }
  return y;
}

template <typename T>
BasicTensor<T> flatten_head_backward(const Shape& input_shape, const BasicTensor<T>& grad_out) {
  const std::size_t n = input_shape[0], c = input_shape[1], h = input_shape[2], w = input_shape[3];
  const std::size_t per_box = grad_out.dim(2), boxes = c / per_box;
  BasicTensor<T> g(input_shape);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) {
          const std::size_t row = (i * w + j) * boxes + ch / per_box;
          g.at(b, ch, i, j) = grad_out[(b * h * w * boxes + row) * per_box + ch % per_box];
        }
  return g;
}

template <typename T>
BasicTensor<T> concat_rows(std::span<const BasicTensor<T>* const> inputs) {
  if (inputs.empty()) throw ShapeError("concat_rows needs at least one input");
  const std::size_t n = inputs[0]->dim(0), k = inputs[0]->dim(2);
  std::size_t rows = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Shape& s = inputs[i]->shape();
    if (s.size() != 3 || s[0] != n || s[2] != k) {
      throw ShapeError("concat_rows input " + std::to_string(i) + " has shape " + to_string(s));
    }
    rows += s[1];
  }
  BasicTensor<T> y({n, rows, k});
  T* out = y.data().data();
  for (std::size_t b = 0; b < n; ++b) {
    for (const auto* in : inputs) {
      const std::size_t block = in->dim(1) * k;
      const T* src = in->data().data() + b * block;
      out = std::copy(src, src + block, out);
    }
  }
  return y;
}

namespace {

template <typename T>
T log_sum_exp(const T* row, std::size_t k) {
  const T mx = *std::max_element(row, row + k);
  T s{0};
  for (std::size_t j = 0; j < k; ++j) s += std::exp(row[j] - mx);
  return mx + std::log(s);
}

template <typename T>
std::size_t last_extent(const BasicTensor<T>& t) {
  if (t.rank() == 0) throw ShapeError("expected at least rank 1");
  return t.shape().back();
}

}  // namespace

template <typename T>
T softmax_ce_sum(const BasicTensor<T>& logits, std::span<const std::size_t> rows,
                 std::span<const std::size_t> labels) {
  const std::size_t k = last_extent(logits), total_rows = logits.size() / k;
  if (rows.size() != labels.size()) throw ShapeError("softmax_ce rows/labels length mismatch");
  T loss{0};
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= total_rows) throw std::out_of_range("softmax_ce row index out of range");
    if (labels[i] >= k) {
      throw std::out_of_range("softmax_ce label " + std::to_string(labels[i]) + " outside [0, " +
                              std::to_string(k - 1) + "]");
    }
    const T* row = logits.data().data() + rows[i] * k;
    loss += log_sum_exp(row, k) - row[labels[i]];
  }
  return loss;
}

template <typename T>
BasicTensor<T> softmax_ce_sum_backward(const BasicTensor<T>& logits, std::span<const std::size_t> rows,
                                       std::span<const std::size_t> labels, T grad_out) {
  const std::size_t k = last_extent(logits);
  BasicTensor<T> g(logits.shape());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const T* row = logits.data().data() + rows[i] * k;
    T* grow = g.data().data() + rows[i] * k;
    const T lse = log_sum_exp(row, k);
    for (std::size_t j = 0; j < k; ++j) grow[j] += grad_out * std::exp(row[j] - lse);
    grow[labels[i]] -= grad_out;
  }
  return g;
}

template <typename T>
std::vector<T> row_cross_entropy(const BasicTensor<T>& logits, std::size_t label) {
  const std::size_t k = last_extent(logits), total_rows = logits.size() / k;
  std::vector<T> out(total_rows);
  for (std::size_t r = 0; r < total_rows; ++r) {
    const T* row = logits.data().data() + r * k;
    out[r] = log_sum_exp(row, k) - row[label];
  }
  return out;
}

template <typename T>
T smooth_l1_sum(const BasicTensor<T>& pred, std::span<const std::size_t> rows, std::span<const T> targets) {
  if (last_extent(pred) != 4) throw ShapeError("smooth_l1 expects rows of 4 offsets, got " + to_string(pred.shape()));
  if (targets.size() != rows.size() * 4) throw ShapeError("smooth_l1 target count mismatch");
  T loss{0};
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < 4; ++j) {
      const T d = pred[rows[i] * 4 + j] - targets[i * 4 + j];
      const T a = std::abs(d);
      loss += a < T{1} ? T{0.5} * d * d : a - T{0.5};
    }
  }
  return loss;
}

template <typename T>
BasicTensor<T> smooth_l1_sum_backward(const BasicTensor<T>& pred, std::span<const std::size_t> rows,
                                      std::span<const T> targets, T grad_out) {
  BasicTensor<T> g(pred.shape());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < 4; ++j) {
      const T d = pred[rows[i] * 4 + j] - targets[i * 4 + j];
      const T slope = std::abs(d) < T{1} ? d : (d > T{0} ? T{1} : T{-1});
      g[rows[i] * 4 + j] += grad_out * slope;
    }
  }
  return g;
}

#define ESSD_INSTANTIATE_OPS(T)                                                                        \
  template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>*, \
                                 std::size_t, std::size_t, std::size_t);                              \
  template ConvGrads<T> conv2d_backward(const BasicTensor<T>&, const BasicTensor<T>&, bool,           \
                                        const BasicTensor<T>&, std::size_t, std::size_t, std::size_t); \
  template BasicTensor<T> deconv2d(const BasicTensor<T>&, const BasicTensor<T>&,                      \
                                   const BasicTensor<T>*, std::size_t, std::size_t);                  \
  template ConvGrads<T> deconv2d_backward(const BasicTensor<T>&, const BasicTensor<T>&, bool,         \
                                          const BasicTensor<T>&, std::size_t, std::size_t);           \
  template BatchNormResult<T> batch_norm(const BasicTensor<T>&, const BasicTensor<T>&,                \
                                         const BasicTensor<T>&, T, BatchNormMode,                     \
                                         const BasicTensor<T>*, const BasicTensor<T>*);               \
  template BatchNormGrads<T> batch_norm_backward(const BasicTensor<T>&, const BatchNormState<T>&,     \
                                                 BatchNormMode, const BasicTensor<T>&);               \
  template void update_running_stats(BasicTensor<T>&, BasicTensor<T>&, const BatchNormState<T>&, T); \
  template BasicTensor<T> relu(const BasicTensor<T>&);                                                \
  template BasicTensor<T> relu_backward(const BasicTensor<T>&, const BasicTensor<T>&);                \
  template PoolResult<T> max_pool2d(const BasicTensor<T>&, const PoolGeometry&);                      \
  template BasicTensor<T> max_pool2d_backward(const Shape&, const std::vector<std::size_t>&,           \
                                              const BasicTensor<T>&);                                 \
  template BasicTensor<T> concat_channels(std::span<const BasicTensor<T>* const>);                    \
  template std::vector<BasicTensor<T>> split_channels(const BasicTensor<T>&,                          \
                                                      std::span<const std::size_t>);                  \
  template BasicTensor<T> eltwise(const BasicTensor<T>&, const BasicTensor<T>&, EltwiseMode);         \
  template BasicTensor<T> flatten_head(const BasicTensor<T>&, std::size_t);                           \
  template BasicTensor<T> flatten_head_backward(const Shape&, const BasicTensor<T>&);                 \
  template BasicTensor<T> concat_rows(std::span<const BasicTensor<T>* const>);                        \
  template T softmax_ce_sum(const BasicTensor<T>&, std::span<const std::size_t>,                      \
                            std::span<const std::size_t>);                                            \
  template BasicTensor<T> softmax_ce_sum_backward(const BasicTensor<T>&, std::span<const std::size_t>, \
                                                  std::span<const std::size_t>, T);                   \
  template std::vector<T> row_cross_entropy(const BasicTensor<T>&, std::size_t);                      \
  template T smooth_l1_sum(const BasicTensor<T>&, std::span<const std::size_t>, std::span<const T>);  \
  template BasicTensor<T> smooth_l1_sum_backward(const BasicTensor<T>&, std::span<const std::size_t>, \
                                                 std::span<const T>, T);

ESSD_INSTANTIATE_OPS(float)
ESSD_INSTANTIATE_OPS(double)

#undef ESSD_INSTANTIATE_OPS

}  // namespace essd::ops
