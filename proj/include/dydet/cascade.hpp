#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dydet/layers.hpp"
#include "dydet/scene.hpp"

namespace dydet {

using RealLayer = Layer<Real>;
using LayerStack = std::vector<RealLayer>;
/// Gradients keyed by "<layer name>.<param name>".
using GradMap = ParamMap<Real>;

/// Architecture of one toy detector. Level l (1-based) has side
/// image_size / (4 * 2^(l-1)) and base_channels * 2^(l-1) channels.
struct ArchConfig {
  int image_size = 64;
  int levels = 3;
  int base_channels = 8;
  int num_classes = 3;
  int stem_channels = 16;

  void validate() const;
  Index level_channels(int level) const { return Index{base_channels} << level; }
  Index level_side(int level) const { return Index{image_size} >> (level + 2); }
  Index level_stride(int level) const { return Index{4} << level; }
  Index head_outputs() const { return 5 + num_classes; }
  /// Sum of channel counts over all levels, i.e. the pooled router input width.
  Index pooled_width() const;

  friend bool operator==(const ArchConfig&, const ArchConfig&) = default;
};

void to_json(nlohmann::json& j, const ArchConfig& a);
void from_json(const nlohmann::json& j, ArchConfig& a);

struct MultiScaleFeatures {
  std::vector<RealTensor> levels;

  /// Throws ShapeError unless the levels form a strictly shrinking,
  /// strictly widening pyramid.
  void validate() const;
  friend bool operator==(const MultiScaleFeatures&, const MultiScaleFeatures&) = default;
};

struct Backbone {
  LayerStack stem;
  std::vector<LayerStack> stages;
};

/// Per level: conv3x3 + ReLU, then a 1x1 projection to 5 + num_classes maps.
struct Head {
  std::vector<LayerStack> levels;
};

struct DetectorParams {
  Backbone backbone;
  Head head;
};

/// projections[l][j - l] maps source level j >= l of the first pyramid onto
/// level l's channel count (bias-free 1x1); the result is upsampled to level l.
struct CompositeConnectionParams {
  std::vector<std::vector<RealLayer>> projections;
};

/// Per level [5 + num_classes, h, w]: objectness logit, (dx, dy) offset
/// logits, (log w, log h) relative to the stride, then class logits.
struct RawPredictions {
  std::vector<RealTensor> levels;
  friend bool operator==(const RawPredictions&, const RawPredictions&) = default;
};

struct StackTrace {
  std::vector<RealTensor> inputs;
};

struct BackboneTrace {
  StackTrace stem;
  std::vector<StackTrace> stages;
};

struct HeadTrace {
  std::vector<StackTrace> levels;
};

DetectorParams make_detector(const ArchConfig& arch, const std::string& prefix);
CompositeConnectionParams make_connection(const ArchConfig& arch, const std::string& prefix);

void init_detector(DetectorParams& params, std::uint64_t seed);
void init_connection(CompositeConnectionParams& params, std::uint64_t seed);

void for_each_layer(DetectorParams& params, const std::function<void(RealLayer&)>& fn);
void for_each_layer(const DetectorParams& params, const std::function<void(const RealLayer&)>& fn);
void for_each_layer(CompositeConnectionParams& params, const std::function<void(RealLayer&)>& fn);
void for_each_layer(const CompositeConnectionParams& params,
                    const std::function<void(const RealLayer&)>& fn);

RealTensor run_stack(const LayerStack& layers, const RealTensor& x, StackTrace* trace);
/// Accumulates parameter gradients into `grads` and returns the input gradient.
RealTensor backprop_stack(const LayerStack& layers, const StackTrace& trace, RealTensor grad,
                          GradMap& grads);

void accumulate(GradMap& into, const std::string& prefix, ParamMap<Real>&& grads);

MultiScaleFeatures backbone_forward(const DetectorParams& params, const RealTensor& x,
                                    BackboneTrace* trace = nullptr);

/// Adds h.levels[l] to the output of stage l before stage l + 1 consumes it.
MultiScaleFeatures backbone2_forward(const DetectorParams& params, const RealTensor& x,
                                     const MultiScaleFeatures& h, BackboneTrace* trace = nullptr);

MultiScaleFeatures composite_connect(const CompositeConnectionParams& g,
                                     const MultiScaleFeatures& f1);

RawPredictions head_forward(const DetectorParams& params, const MultiScaleFeatures& f,
                            HeadTrace* trace = nullptr);

/// Returns the gradient with respect to each pyramid level.
MultiScaleFeatures head_backward(const DetectorParams& params, const HeadTrace& trace,
                                 const RawPredictions& grad, GradMap& grads);

/// `grad_levels` is the external gradient on each level output. Returns the
/// total gradient at each stage output, which is also the gradient with
/// respect to the additive input h of backbone2_forward.
MultiScaleFeatures backbone_backward(const DetectorParams& params, const BackboneTrace& trace,
                                     const MultiScaleFeatures& grad_levels, GradMap& grads);

/// Returns the gradient with respect to f1.
MultiScaleFeatures composite_connect_backward(const CompositeConnectionParams& g,
                                              const MultiScaleFeatures& f1,
                                              const MultiScaleFeatures& grad_h, GradMap& grads);

}  // namespace dydet
