#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <utility>

#include "dydet/tensor.hpp"

namespace dydet {

enum class LayerKind { kConv3x3, kLinear, kReLU, kSigmoid, kGlobalAvgPool, kAdd };

inline const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::kConv3x3: return "conv3x3";
    case LayerKind::kLinear: return "linear";
    case LayerKind::kReLU: return "relu";
    case LayerKind::kSigmoid: return "sigmoid";
    case LayerKind::kGlobalAvgPool: return "global-avg-pool";
    case LayerKind::kAdd: return "elementwise-add";
  }
  return "unknown";
}

struct LayerHyper {
  Index in_channels = 0;
  Index out_channels = 0;
  int stride = 1;
  bool bias = true;
};

template <typename Scalar>
using ParamMap = std::map<std::string, Tensor<Scalar>>;

template <typename Scalar>
struct Layer {
  LayerKind kind = LayerKind::kReLU;
  std::string name;
  LayerHyper hyper;
  ParamMap<Scalar> params;
};

template <typename Scalar>
struct LayerGradients {
  Tensor<Scalar> input;
  ParamMap<Scalar> params;
};

template <typename Scalar>
Layer<Scalar> make_conv3x3(std::string name, Index in, Index out, int stride) {
  if (stride != 1 && stride != 2) {
    throw std::invalid_argument(name + ": conv3x3 stride must be 1 or 2");
  }
  Layer<Scalar> layer{LayerKind::kConv3x3, std::move(name), {in, out, stride, true}, {}};
  layer.params.emplace("weight", Tensor<Scalar>({out, in, 3, 3}));
  layer.params.emplace("bias", Tensor<Scalar>({out}));
  return layer;
}

template <typename Scalar>
Layer<Scalar> make_linear(std::string name, Index in, Index out, bool bias = true) {
  Layer<Scalar> layer{LayerKind::kLinear, std::move(name), {in, out, 1, bias}, {}};
  layer.params.emplace("weight", Tensor<Scalar>({out, in}));
  if (bias) layer.params.emplace("bias", Tensor<Scalar>({out}));
  return layer;
}

template <typename Scalar>
Layer<Scalar> make_activation(std::string name, LayerKind kind) {
  return Layer<Scalar>{kind, std::move(name), {}, {}};
}

namespace detail {

[[noreturn]] inline void shape_fail(const std::string& layer, LayerKind kind,
                                    const std::string& expected, const Shape& got) {
  throw ShapeError("layer '" + layer + "' (" + to_string(kind) + "): expected input " +
                   expected + ", got " + shape_string(got));
}

template <typename Scalar>
const Tensor<Scalar>& param(const Layer<Scalar>& layer, const std::string& key,
                            const Shape& expected) {
  auto it = layer.params.find(key);
  if (it == layer.params.end() || it->second.empty()) {
    throw std::logic_error("layer '" + layer.name + "': parameter '" + key +
                           "' is uninitialized");
  }
  if (it->second.shape() != expected) {
    throw ShapeError("layer '" + layer.name + "': parameter '" + key + "' has shape " +
                     shape_string(it->second.shape()) + ", expected " +
                     shape_string(expected));
  }
  return it->second;
}

inline Index conv_out_side(Index side, int stride) { return (side - 1) / stride + 1; }

// Rows ordered (channel, ky, kx) to match a [out, in, 3, 3] weight.
template <typename Scalar>
typename Tensor<Scalar>::Matrix im2col(const Tensor<Scalar>& x, int stride) {
  const Index channels = x.dim(0), height = x.dim(1), width = x.dim(2);
  const Index out_h = conv_out_side(height, stride), out_w = conv_out_side(width, stride);
  typename Tensor<Scalar>::Matrix cols(channels * 9, out_h * out_w);
  const Scalar* src = x.data().data();
  for (Index c = 0; c < channels; ++c) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        Scalar* row = cols.row((c * 3 + ky) * 3 + kx).data();
        for (Index oy = 0; oy < out_h; ++oy) {
          const Index iy = oy * stride + ky - 1;
          for (Index ox = 0; ox < out_w; ++ox) {
            const Index ix = ox * stride + kx - 1;
            const bool inside = iy >= 0 && iy < height && ix >= 0 && ix < width;
            row[oy * out_w + ox] = inside ? src[(c * height + iy) * width + ix] : Scalar(0);
          }
        }
      }
    }
  }
  return cols;
}

template <typename Scalar>
void col2im_add(const typename Tensor<Scalar>::Matrix& cols, int stride, Tensor<Scalar>& dx) {
  const Index channels = dx.dim(0), height = dx.dim(1), width = dx.dim(2);
  const Index out_h = conv_out_side(height, stride), out_w = conv_out_side(width, stride);
  Scalar* dst = dx.data().data();
  for (Index c = 0; c < channels; ++c) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const Scalar* row = cols.row((c * 3 + ky) * 3 + kx).data();
        for (Index oy = 0; oy < out_h; ++oy) {
          const Index iy = oy * stride + ky - 1;
          if (iy < 0 || iy >= height) continue;
          for (Index ox = 0; ox < out_w; ++ox) {
            const Index ix = ox * stride + kx - 1;
            if (ix < 0 || ix >= width) continue;
            dst[(c * height + iy) * width + ix] += row[oy * out_w + ox];
          }
        }
      }
    }
  }
}

// Clamped so the result stays strictly inside (0, 1) even where the exact
// value rounds to an endpoint.
template <typename Scalar>
Scalar sigmoid(Scalar v) {
  constexpr Scalar kLow = std::numeric_limits<Scalar>::min();
  constexpr Scalar kHigh = Scalar(1) - std::numeric_limits<Scalar>::epsilon() / 2;
  if (v >= 0) return std::min(kHigh, Scalar(1) / (Scalar(1) + std::exp(-v)));
  const Scalar e = std::exp(v);
  return std::max(kLow, e / (Scalar(1) + e));
}

}  // namespace detail

/// Output shape of `layer` applied to an input of shape `in`; throws
/// ShapeError naming the layer when the input does not fit its hyperparameters.
template <typename Scalar>
Shape output_shape(const Layer<Scalar>& layer, const Shape& in) {
  const auto& h = layer.hyper;
  switch (layer.kind) {
    case LayerKind::kConv3x3:
      if (in.size() != 3 || in[0] != h.in_channels || in[1] < 1 || in[2] < 1) {
        detail::shape_fail(layer.name, layer.kind,
                           "[" + std::to_string(h.in_channels) + ", H, W]", in);
      }
      return {h.out_channels, detail::conv_out_side(in[1], h.stride),
              detail::conv_out_side(in[2], h.stride)};
    case LayerKind::kLinear: {
      if (in.empty() || in[0] != h.in_channels) {
        detail::shape_fail(layer.name, layer.kind,
                           "[" + std::to_string(h.in_channels) + ", ...]", in);
      }
      Shape out = in;
      out[0] = h.out_channels;
      return out;
    }
    case LayerKind::kGlobalAvgPool:
      if (in.size() != 3 || in[1] * in[2] == 0) {
        detail::shape_fail(layer.name, layer.kind, "[C, H, W] with H*W > 0", in);
      }
      return {in[0]};
    case LayerKind::kReLU:
    case LayerKind::kSigmoid:
    case LayerKind::kAdd:
      return in;
  }
  return in;
}

template <typename Scalar>
Tensor<Scalar> forward(const Layer<Scalar>& layer, const Tensor<Scalar>& input) {
  using Vector = typename Tensor<Scalar>::Vector;
  const Shape out_shape = output_shape(layer, input.shape());
  const auto& h = layer.hyper;
  switch (layer.kind) {
    case LayerKind::kConv3x3: {
      const auto& w = detail::param(layer, "weight", {h.out_channels, h.in_channels, 3, 3});
      const auto& b = detail::param(layer, "bias", {h.out_channels});
      const auto cols = detail::im2col(input, h.stride);
      Tensor<Scalar> out(out_shape);
      const typename Tensor<Scalar>::ConstMatrixMap wmat(w.data().data(), h.out_channels,
                                                         h.in_channels * 9);
      out.matrix().noalias() = wmat * cols;
      out.matrix().colwise() += b.data();
      return out;
    }
    case LayerKind::kLinear: {
      const auto& w = detail::param(layer, "weight", {h.out_channels, h.in_channels});
      Tensor<Scalar> out(out_shape);
      out.matrix().noalias() = w.matrix() * input.matrix();
      if (h.bias) out.matrix().colwise() += detail::param(layer, "bias", {h.out_channels}).data();
      return out;
    }
    case LayerKind::kReLU:
      return Tensor<Scalar>(out_shape, input.data().cwiseMax(Scalar(0)));
    case LayerKind::kSigmoid:
      return Tensor<Scalar>(out_shape,
                            input.data().unaryExpr([](Scalar v) { return detail::sigmoid(v); }));
    case LayerKind::kGlobalAvgPool:
      return Tensor<Scalar>(out_shape, Vector(input.matrix().rowwise().mean()));
    case LayerKind::kAdd:
      throw std::invalid_argument("layer '" + layer.name + "': elementwise-add takes two inputs");
  }
  return input;
}

/// Binary overload for elementwise-add.
template <typename Scalar>
Tensor<Scalar> forward(const Layer<Scalar>& layer, const Tensor<Scalar>& a,
                       const Tensor<Scalar>& b) {
  if (layer.kind != LayerKind::kAdd) {
    throw std::invalid_argument("layer '" + layer.name + "' is not elementwise-add");
  }
  if (a.shape() != b.shape()) {
    detail::shape_fail(layer.name, layer.kind, shape_string(a.shape()), b.shape());
  }
  return Tensor<Scalar>(a.shape(), a.data() + b.data());
}

/// Gradients with respect to the input and every parameter. For
/// elementwise-add the returned input gradient applies to both operands.
template <typename Scalar>
LayerGradients<Scalar> backward(const Layer<Scalar>& layer, const Tensor<Scalar>& input,
                                const Tensor<Scalar>& grad_out) {
  using Vector = typename Tensor<Scalar>::Vector;
  const Shape out_shape = output_shape(layer, input.shape());
  if (grad_out.shape() != out_shape) {
    throw ShapeError("layer '" + layer.name + "': grad_out has shape " +
                     shape_string(grad_out.shape()) + ", expected " + shape_string(out_shape));
  }
  const auto& h = layer.hyper;
  LayerGradients<Scalar> g;
  switch (layer.kind) {
    case LayerKind::kConv3x3: {
      const auto& w = detail::param(layer, "weight", {h.out_channels, h.in_channels, 3, 3});
      detail::param(layer, "bias", {h.out_channels});
      const auto cols = detail::im2col(input, h.stride);
      const auto go = grad_out.matrix();
      Tensor<Scalar> gw({h.out_channels, h.in_channels, 3, 3});
      typename Tensor<Scalar>::MatrixMap(gw.data().data(), h.out_channels, h.in_channels * 9)
          .noalias() = go * cols.transpose();
      g.params.emplace("weight", std::move(gw));
      g.params.emplace("bias", Tensor<Scalar>({h.out_channels}, Vector(go.rowwise().sum())));
      const typename Tensor<Scalar>::ConstMatrixMap wmat(w.data().data(), h.out_channels,
                                                         h.in_channels * 9);
      typename Tensor<Scalar>::Matrix gcols = wmat.transpose() * go;
      g.input = Tensor<Scalar>(input.shape());
      detail::col2im_add(gcols, h.stride, g.input);
      return g;
    }
    case LayerKind::kLinear: {
      const auto& w = detail::param(layer, "weight", {h.out_channels, h.in_channels});
      const auto go = grad_out.matrix();
      Tensor<Scalar> gw({h.out_channels, h.in_channels});
      gw.matrix().noalias() = go * input.matrix().transpose();
      g.params.emplace("weight", std::move(gw));
      if (h.bias) {
        detail::param(layer, "bias", {h.out_channels});
        g.params.emplace("bias", Tensor<Scalar>({h.out_channels}, Vector(go.rowwise().sum())));
      }
      g.input = Tensor<Scalar>(input.shape());
      g.input.matrix().noalias() = w.matrix().transpose() * go;
      return g;
    }
    case LayerKind::kReLU:
      g.input = Tensor<Scalar>(
          input.shape(),
          Vector((input.data().array() > Scalar(0)).select(grad_out.data().array(), Scalar(0))));
      return g;
    case LayerKind::kSigmoid: {
      const Vector s = input.data().unaryExpr([](Scalar v) { return detail::sigmoid(v); });
      g.input = Tensor<Scalar>(
          input.shape(),
          Vector(grad_out.data().array() * s.array() * (Scalar(1) - s.array())));
      return g;
    }
    case LayerKind::kGlobalAvgPool: {
      const Index spatial = input.dim(1) * input.dim(2);
      g.input = Tensor<Scalar>(input.shape());
      g.input.matrix().colwise() = grad_out.data() / Scalar(spatial);
      return g;
    }
    case LayerKind::kAdd:
      g.input = grad_out;
      return g;
  }
  return g;
}

/// Nearest-neighbour upsampling of a [C, H, W] map by an integer factor.
template <typename Scalar>
Tensor<Scalar> upsample_nearest(const Tensor<Scalar>& x, Index factor) {
  if (factor == 1) return x;
  const Index channels = x.dim(0), height = x.dim(1), width = x.dim(2);
  Tensor<Scalar> out({channels, height * factor, width * factor});
  for (Index c = 0; c < channels; ++c)
    for (Index y = 0; y < height * factor; ++y)
      for (Index xx = 0; xx < width * factor; ++xx)
        out.at(c, y, xx) = x.at(c, y / factor, xx / factor);
  return out;
}

template <typename Scalar>
Tensor<Scalar> upsample_nearest_backward(const Tensor<Scalar>& grad_out, Index factor) {
  if (factor == 1) return grad_out;
  const Index channels = grad_out.dim(0);
  const Index height = grad_out.dim(1) / factor, width = grad_out.dim(2) / factor;
  Tensor<Scalar> g({channels, height, width});
  for (Index c = 0; c < channels; ++c)
    for (Index y = 0; y < height * factor; ++y)
      for (Index xx = 0; xx < width * factor; ++xx)
        g.at(c, y / factor, xx / factor) += grad_out.at(c, y, xx);
  return g;
}

}  // namespace dydet
