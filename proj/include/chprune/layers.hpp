#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "chprune/tensor.hpp"

namespace chprune {

enum class LayerKind { conv2d, relu, maxpool2d, flatten, linear };

inline std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool2d: return "maxpool2d";
    case LayerKind::flatten: return "flatten";
    case LayerKind::linear: return "linear";
  }
  return "unknown";
}

/// One layer of a sequential network.
///
/// conv2d: weights [out, in, k, k], bias [out], square kernel.
/// linear: weights [out, in], bias [out].
/// maxpool2d: `kernel` is the pool window, `stride` its step.
/// relu and flatten carry no weights.
struct LayerParams {
  LayerKind kind = LayerKind::relu;
  std::optional<Tensor> weights;
  std::optional<Tensor> bias;
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;

  bool has_params() const { return weights.has_value(); }
  std::size_t parameter_count() const {
    return (weights ? weights->size() : 0) + (bias ? bias->size() : 0);
  }
  bool operator==(const LayerParams&) const = default;
};

/// Gradients with respect to a layer's own parameters. Both empty for
/// weightless layers.
struct ParamGrads {
  std::optional<Tensor> weights;
  std::optional<Tensor> bias;
};

struct LayerGrads {
  Tensor input;
  ParamGrads params;
};

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMat>;
using ConstRowMap = Eigen::Map<const RowMat>;

[[noreturn]] inline void shape_error(LayerKind kind, const std::string& expected, const Shape& got) {
  throw Error(std::string(to_string(kind)) + ": expected input shape " + expected + ", got " +
              shape_str(got));
}

inline std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                                   std::size_t pad) {
  return (in + 2 * pad - kernel) / stride + 1;
}

struct ConvGeometry {
  std::size_t batch, in_c, in_h, in_w, out_c, k, stride, pad, out_h, out_w;
  std::size_t patch() const { return in_c * k * k; }
  std::size_t positions() const { return out_h * out_w; }
};

inline ConvGeometry conv_geometry(const LayerParams& layer, const Shape& in) {
  const auto& w = *layer.weights;
  const std::size_t out_c = w.dim(0), in_c = w.dim(1), k = w.dim(2);
  if (in.size() != 4 || in[1] != in_c || in[2] + 2 * layer.padding < k ||
      in[3] + 2 * layer.padding < k) {
    shape_error(LayerKind::conv2d,
                "[batch, " + std::to_string(in_c) + ", >=" + std::to_string(k) + ", >=" +
                    std::to_string(k) + "] (after padding " + std::to_string(layer.padding) + ")",
                in);
  }
  ConvGeometry g{in[0], in_c, in[2], in[3], out_c, k, layer.stride, layer.padding, 0, 0};
  g.out_h = conv_out_extent(g.in_h, k, g.stride, g.pad);
  g.out_w = conv_out_extent(g.in_w, k, g.stride, g.pad);
  return g;
}

// Unfolds one sample [in_c, h, w] into columns [in_c*k*k, out_h*out_w].
inline void im2col(const ConvGeometry& g, const double* img, double* col) {
  const std::size_t positions = g.positions();
  for (std::size_t c = 0; c < g.in_c; ++c) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        double* row = col + ((c * g.k + ky) * g.k + kx) * positions;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                          static_cast<std::ptrdiff_t>(g.pad);
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                            static_cast<std::ptrdiff_t>(g.pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.in_h) &&
                                ix < static_cast<std::ptrdiff_t>(g.in_w);
            row[oy * g.out_w + ox] =
                inside ? img[(c * g.in_h + static_cast<std::size_t>(iy)) * g.in_w +
                             static_cast<std::size_t>(ix)]
                       : 0.0;
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatters columns back, accumulating into img.
inline void col2im(const ConvGeometry& g, const double* col, double* img) {
  const std::size_t positions = g.positions();
  for (std::size_t c = 0; c < g.in_c; ++c) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const double* row = col + ((c * g.k + ky) * g.k + kx) * positions;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                          static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                            static_cast<std::ptrdiff_t>(g.pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.in_w)) continue;
            img[(c * g.in_h + static_cast<std::size_t>(iy)) * g.in_w +
                static_cast<std::size_t>(ix)] += row[oy * g.out_w + ox];
          }
        }
      }
    }
  }
}

inline bool conv_is_pointwise(const ConvGeometry& g) {
  return g.k == 1 && g.stride == 1 && g.pad == 0;
}

inline Tensor conv2d_forward(const LayerParams& layer, const Tensor& input) {
  const auto g = conv_geometry(layer, input.shape());
  Tensor out({g.batch, g.out_c, g.out_h, g.out_w});
  const ConstRowMap w(layer.weights->raw(), static_cast<Eigen::Index>(g.out_c),
                      static_cast<Eigen::Index>(g.patch()));
  const std::size_t in_stride = g.in_c * g.in_h * g.in_w;
  const std::size_t out_stride = g.out_c * g.positions();
  AlignedBuffer col(conv_is_pointwise(g) ? 0 : g.patch() * g.positions());
  for (std::size_t n = 0; n < g.batch; ++n) {
    const double* src = input.raw() + n * in_stride;
    if (!conv_is_pointwise(g)) {
      im2col(g, src, col.data());
      src = col.data();
    }
    const ConstRowMap cols(src, static_cast<Eigen::Index>(g.patch()),
                           static_cast<Eigen::Index>(g.positions()));
    RowMap dst(out.raw() + n * out_stride, static_cast<Eigen::Index>(g.out_c),
               static_cast<Eigen::Index>(g.positions()));
    dst.noalias() = w * cols;
    if (layer.bias) {
      for (std::size_t c = 0; c < g.out_c; ++c) dst.row(static_cast<Eigen::Index>(c)).array() += (*layer.bias)[c];
    }
  }
  return out;
}

inline LayerGrads conv2d_backward(const LayerParams& layer, const Tensor& input,
                                  const Tensor& grad_out) {
  const auto g = conv_geometry(layer, input.shape());
  const Shape expected{g.batch, g.out_c, g.out_h, g.out_w};
  if (grad_out.shape() != expected) {
    throw Error("conv2d: expected grad_output shape " + shape_str(expected) + ", got " +
                shape_str(grad_out.shape()));
  }
  LayerGrads grads{Tensor(input.shape()), {Tensor(layer.weights->shape()), std::nullopt}};
  if (layer.bias) grads.params.bias = Tensor(layer.bias->shape());

  const auto rows = static_cast<Eigen::Index>(g.out_c);
  const auto patch = static_cast<Eigen::Index>(g.patch());
  const auto positions = static_cast<Eigen::Index>(g.positions());
  const ConstRowMap w(layer.weights->raw(), rows, patch);
  RowMap dw(grads.params.weights->raw(), rows, patch);
  const std::size_t in_stride = g.in_c * g.in_h * g.in_w;
  const std::size_t out_stride = g.out_c * g.positions();
  const bool pointwise = conv_is_pointwise(g);
  AlignedBuffer col(pointwise ? 0 : g.patch() * g.positions());
  AlignedBuffer dcol(pointwise ? 0 : g.patch() * g.positions());

  for (std::size_t n = 0; n < g.batch; ++n) {
    const ConstRowMap dy(grad_out.raw() + n * out_stride, rows, positions);
    const double* src = input.raw() + n * in_stride;
    if (!pointwise) {
      im2col(g, src, col.data());
      src = col.data();
    }
    const ConstRowMap cols(src, patch, positions);
    dw.noalias() += dy * cols.transpose();
    if (grads.params.bias) {
      const double* d = grad_out.raw() + n * out_stride;
      for (std::size_t c = 0; c < g.out_c; ++c) {
        double s = 0.0;
        for (std::size_t p = 0; p < g.positions(); ++p) s += d[c * g.positions() + p];
        (*grads.params.bias)[c] += s;
      }
    }
    if (pointwise) {
      RowMap dx(grads.input.raw() + n * in_stride, patch, positions);
      dx.noalias() = w.transpose() * dy;
    } else {
      RowMap dc(dcol.data(), patch, positions);
      dc.noalias() = w.transpose() * dy;
      col2im(g, dcol.data(), grads.input.raw() + n * in_stride);
    }
  }
  return grads;
}

struct PoolGeometry {
  std::size_t batch, channels, in_h, in_w, size, stride, out_h, out_w;
};

inline PoolGeometry pool_geometry(const LayerParams& layer, const Shape& in) {
  if (in.size() != 4 || in[2] < layer.kernel || in[3] < layer.kernel) {
    shape_error(LayerKind::maxpool2d,
                "[batch, channels, >=" + std::to_string(layer.kernel) + ", >=" +
                    std::to_string(layer.kernel) + "]",
                in);
  }
  return {in[0], in[1], in[2], in[3], layer.kernel, layer.stride,
          (in[2] - layer.kernel) / layer.stride + 1, (in[3] - layer.kernel) / layer.stride + 1};
}

// Row-major index of the first maximum inside window (oy, ox) of plane.
inline std::size_t pool_argmax(const PoolGeometry& g, const double* plane, std::size_t oy,
                               std::size_t ox) {
  std::size_t best = (oy * g.stride) * g.in_w + ox * g.stride;
  for (std::size_t ky = 0; ky < g.size; ++ky) {
    for (std::size_t kx = 0; kx < g.size; ++kx) {
      const std::size_t idx = (oy * g.stride + ky) * g.in_w + ox * g.stride + kx;
      if (plane[idx] > plane[best]) best = idx;
    }
  }
  return best;
}

inline Tensor maxpool_forward(const LayerParams& layer, const Tensor& input) {
  const auto g = pool_geometry(layer, input.shape());
  Tensor out({g.batch, g.channels, g.out_h, g.out_w});
  const std::size_t planes = g.batch * g.channels;
  for (std::size_t p = 0; p < planes; ++p) {
    const double* plane = input.raw() + p * g.in_h * g.in_w;
    double* dst = out.raw() + p * g.out_h * g.out_w;
    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
      for (std::size_t ox = 0; ox < g.out_w; ++ox) {
        dst[oy * g.out_w + ox] = plane[pool_argmax(g, plane, oy, ox)];
      }
    }
  }
  return out;
}

inline LayerGrads maxpool_backward(const LayerParams& layer, const Tensor& input,
                                   const Tensor& grad_out) {
  const auto g = pool_geometry(layer, input.shape());
  const Shape expected{g.batch, g.channels, g.out_h, g.out_w};
  if (grad_out.shape() != expected) {
    throw Error("maxpool2d: expected grad_output shape " + shape_str(expected) + ", got " +
                shape_str(grad_out.shape()));
  }
  LayerGrads grads{Tensor(input.shape()), {}};
  const std::size_t planes = g.batch * g.channels;
  for (std::size_t p = 0; p < planes; ++p) {
    const double* plane = input.raw() + p * g.in_h * g.in_w;
    double* dplane = grads.input.raw() + p * g.in_h * g.in_w;
    const double* dy = grad_out.raw() + p * g.out_h * g.out_w;
    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
      for (std::size_t ox = 0; ox < g.out_w; ++ox) {
        dplane[pool_argmax(g, plane, oy, ox)] += dy[oy * g.out_w + ox];
      }
    }
  }
  return grads;
}

inline void check_linear_input(const LayerParams& layer, const Shape& in) {
  const std::size_t in_f = layer.weights->dim(1);
  if (in.size() != 2 || in[1] != in_f) {
    shape_error(LayerKind::linear, "[batch, " + std::to_string(in_f) + "]", in);
  }
}

inline Tensor linear_forward(const LayerParams& layer, const Tensor& input) {
  check_linear_input(layer, input.shape());
  const auto& wt = *layer.weights;
  const auto batch = static_cast<Eigen::Index>(input.dim(0));
  const auto out_f = static_cast<Eigen::Index>(wt.dim(0));
  const auto in_f = static_cast<Eigen::Index>(wt.dim(1));
  Tensor out({input.dim(0), wt.dim(0)});
  const ConstRowMap x(input.raw(), batch, in_f);
  const ConstRowMap w(wt.raw(), out_f, in_f);
  RowMap y(out.raw(), batch, out_f);
  y.noalias() = x * w.transpose();
  if (layer.bias) {
    const Eigen::Map<const Eigen::RowVectorXd> b(layer.bias->raw(), out_f);
    y.rowwise() += b;
  }
  return out;
}

inline LayerGrads linear_backward(const LayerParams& layer, const Tensor& input,
                                  const Tensor& grad_out) {
  check_linear_input(layer, input.shape());
  const auto& wt = *layer.weights;
  const Shape expected{input.dim(0), wt.dim(0)};
  if (grad_out.shape() != expected) {
    throw Error("linear: expected grad_output shape " + shape_str(expected) + ", got " +
                shape_str(grad_out.shape()));
  }
  const auto batch = static_cast<Eigen::Index>(input.dim(0));
  const auto out_f = static_cast<Eigen::Index>(wt.dim(0));
  const auto in_f = static_cast<Eigen::Index>(wt.dim(1));
  LayerGrads grads{Tensor(input.shape()), {Tensor(wt.shape()), std::nullopt}};
  const ConstRowMap x(input.raw(), batch, in_f);
  const ConstRowMap w(wt.raw(), out_f, in_f);
  const ConstRowMap dy(grad_out.raw(), batch, out_f);
  RowMap(grads.input.raw(), batch, in_f).noalias() = dy * w;
  RowMap(grads.params.weights->raw(), out_f, in_f).noalias() = dy.transpose() * x;
  if (layer.bias) {
    grads.params.bias = Tensor(layer.bias->shape());
    double* db = grads.params.bias->raw();
    for (Eigen::Index n = 0; n < batch; ++n) {
      for (Eigen::Index f = 0; f < out_f; ++f) db[f] += grad_out.raw()[n * out_f + f];
    }
  }
  return grads;
}

inline Shape flatten_shape(const Shape& in) {
  if (in.size() < 2) shape_error(LayerKind::flatten, "[batch, ...] with rank >= 2", in);
  std::size_t features = 1;
  for (std::size_t i = 1; i < in.size(); ++i) features *= in[i];
  return {in[0], features};
}

}  // namespace detail

/// Output shape of `layer` applied to an input of shape `in`.
inline Shape output_shape(const LayerParams& layer, const Shape& in) {
  switch (layer.kind) {
    case LayerKind::conv2d: {
      const auto g = detail::conv_geometry(layer, in);
      return {g.batch, g.out_c, g.out_h, g.out_w};
    }
    case LayerKind::relu: return in;
    case LayerKind::maxpool2d: {
      const auto g = detail::pool_geometry(layer, in);
      return {g.batch, g.channels, g.out_h, g.out_w};
    }
    case LayerKind::flatten: return detail::flatten_shape(in);
    case LayerKind::linear:
      detail::check_linear_input(layer, in);
      return {in[0], layer.weights->dim(0)};
  }
  throw Error("unknown layer kind");
}

inline Tensor forward(const LayerParams& layer, const Tensor& input) {
  switch (layer.kind) {
    case LayerKind::conv2d: return detail::conv2d_forward(layer, input);
    case LayerKind::relu: {
      Tensor out = input;
      for (auto& v : out.data()) v = v > 0.0 ? v : 0.0;
      return out;
    }
    case LayerKind::maxpool2d: return detail::maxpool_forward(layer, input);
    case LayerKind::flatten: return input.reshaped(detail::flatten_shape(input.shape()));
    case LayerKind::linear: return detail::linear_forward(layer, input);
  }
  throw Error("unknown layer kind");
}

inline LayerGrads backward(const LayerParams& layer, const Tensor& input, const Tensor& grad_output) {
  switch (layer.kind) {
    case LayerKind::conv2d: return detail::conv2d_backward(layer, input, grad_output);
    case LayerKind::relu: {
      if (grad_output.shape() != input.shape()) {
        throw Error("relu: expected grad_output shape " + shape_str(input.shape()) + ", got " +
                    shape_str(grad_output.shape()));
      }
      LayerGrads grads{grad_output, {}};
      for (std::size_t i = 0; i < input.size(); ++i) {
        if (!(input[i] > 0.0)) grads.input[i] = 0.0;
      }
      return grads;
    }
    case LayerKind::maxpool2d: return detail::maxpool_backward(layer, input, grad_output);
    case LayerKind::flatten: {
      const Shape expected = detail::flatten_shape(input.shape());
      if (grad_output.shape() != expected) {
        throw Error("flatten: expected grad_output shape " + shape_str(expected) + ", got " +
                    shape_str(grad_output.shape()));
      }
      return {grad_output.reshaped(input.shape()), {}};
    }
    case LayerKind::linear: return detail::linear_backward(layer, input, grad_output);
  }
  throw Error("unknown layer kind");
}

struct LossResult {
  double loss = 0.0;
  Tensor grad_logits;
};

/// Mean softmax cross-entropy over the batch and its gradient
/// (softmax - one_hot) / batch.
inline LossResult softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw Error("softmax_cross_entropy: expected logits [" + std::to_string(labels.size()) +
                ", classes], got " + shape_str(logits.shape()));
  }
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  LossResult result{0.0, Tensor(logits.shape())};
  const double inv_batch = 1.0 / static_cast<double>(batch);
  for (std::size_t n = 0; n < batch; ++n) {
    const int label = labels[n];
    if (label < 0 || static_cast<std::size_t>(label) >= classes) {
      throw Error("softmax_cross_entropy: label " + std::to_string(label) + " at row " +
                  std::to_string(n) + " outside [0, " + std::to_string(classes) + ")");
    }
    const double* z = logits.raw() + n * classes;
    double* dz = result.grad_logits.raw() + n * classes;
    const double zmax = *std::max_element(z, z + classes);
    double denom = 0.0;
    for (std::size_t c = 0; c < classes; ++c) denom += std::exp(z[c] - zmax);
    const double log_denom = std::log(denom);
    result.loss -= (z[label] - zmax - log_denom) * inv_batch;
    for (std::size_t c = 0; c < classes; ++c) {
      dz[c] = std::exp(z[c] - zmax - log_denom) * inv_batch;
    }
    dz[label] -= inv_batch;
  }
  return result;
}

/// Plain SGD: w <- w - lr * grad for every parameter that has a gradient.
inline void sgd_step(std::span<LayerParams> layers, std::span<const ParamGrads> grads,
                     double learning_rate) {
  if (layers.size() != grads.size()) {
    throw Error("sgd_step: " + std::to_string(grads.size()) + " gradient sets for " +
                std::to_string(layers.size()) + " layers");
  }
  auto check = [](const Tensor& param, const std::optional<Tensor>& grad) {
    if (grad && grad->shape() != param.shape()) {
      throw Error("sgd_step: gradient shape " + shape_str(grad->shape()) +
                  " does not match parameter shape " + shape_str(param.shape()));
    }
  };
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].weights) check(*layers[i].weights, grads[i].weights);
    if (layers[i].bias) check(*layers[i].bias, grads[i].bias);
  }
  auto apply = [learning_rate](Tensor& param, const std::optional<Tensor>& grad) {
    if (!grad) return;
    auto p = param.data();
    auto g = grad->data();
    for (std::size_t i = 0; i < p.size(); ++i) p[i] -= learning_rate * g[i];
  };
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].weights) apply(*layers[i].weights, grads[i].weights);
    if (layers[i].bias) apply(*layers[i].bias, grads[i].bias);
  }
}

}  // namespace chprune
