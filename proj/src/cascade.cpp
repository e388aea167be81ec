#include "dydet/cascade.hpp"

#include <cmath>
#include <stdexcept>

#include "dydet/rng.hpp"

namespace dydet {

void ArchConfig::validate() const {
  auto fail = [](const std::string& what) {
    throw std::invalid_argument("invalid architecture: " + what);
  };
  if (levels < 1) fail("levels must be >= 1");
  if (base_channels < 1 || stem_channels < 1) fail("channel counts must be >= 1");
  if (num_classes < 1) fail("num_classes must be >= 1");
  const int deepest_stride = 4 << (levels - 1);
  if (image_size < deepest_stride || image_size % deepest_stride != 0) {
    fail("image_size " + std::to_string(image_size) + " must be a multiple of " +
         std::to_string(deepest_stride));
  }
}

Index ArchConfig::pooled_width() const {
  Index d = 0;
  for (int l = 0; l < levels; ++l) d += level_channels(l);
  return d;
}

void to_json(nlohmann::json& j, const ArchConfig& a) {
  j = nlohmann::json{{"image_size", a.image_size},
                     {"levels", a.levels},
                     {"base_channels", a.base_channels},
                     {"num_classes", a.num_classes},
                     {"stem_channels", a.stem_channels}};
}

void from_json(const nlohmann::json& j, ArchConfig& a) {
  a = ArchConfig{};
  if (j.contains("image_size")) j.at("image_size").get_to(a.image_size);
  if (j.contains("levels")) j.at("levels").get_to(a.levels);
  if (j.contains("base_channels")) j.at("base_channels").get_to(a.base_channels);
  if (j.contains("num_classes")) j.at("num_classes").get_to(a.num_classes);
  if (j.contains("stem_channels")) j.at("stem_channels").get_to(a.stem_channels);
}

void MultiScaleFeatures::validate() const {
  if (levels.empty()) throw ShapeError("feature pyramid has no levels");
  for (std::size_t l = 0; l < levels.size(); ++l) {
    const Shape& s = levels[l].shape();
    if (s.size() != 3 || s[1] != s[2]) {
      throw ShapeError("pyramid level " + std::to_string(l) + " must be [C, S, S], got " +
                       shape_string(s));
    }
    if (l > 0) {
      const Shape& p = levels[l - 1].shape();
      if (!(s[1] < p[1]) || !(s[0] > p[0])) {
        throw ShapeError("pyramid level " + std::to_string(l) + " " + shape_string(s) +
                         " must be smaller and wider than level " + std::to_string(l - 1) +
                         " " + shape_string(p));
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Construction

DetectorParams make_detector(const ArchConfig& arch, const std::string& prefix) {
  arch.validate();
  DetectorParams p;
  const Index stem = arch.stem_channels;
  auto relu = [](const std::string& name) { return make_activation<Real>(name, LayerKind::kReLU); };
  p.backbone.stem = {
      make_conv3x3<Real>(prefix + ".stem.0", 1, stem, 1),          relu(prefix + ".stem.1"),
      make_conv3x3<Real>(prefix + ".stem.2", stem, stem, 1),       relu(prefix + ".stem.3"),
      make_conv3x3<Real>(prefix + ".stem.4", stem, arch.base_channels, 2), relu(prefix + ".stem.5"),
  };
  Index in = arch.base_channels;
  for (int l = 0; l < arch.levels; ++l) {
    const Index out = arch.level_channels(l);
    const std::string s = prefix + ".stage" + std::to_string(l + 1);
    p.backbone.stages.push_back({make_conv3x3<Real>(s + ".0", in, out, 2), relu(s + ".1"),
                                 make_conv3x3<Real>(s + ".2", out, out, 1), relu(s + ".3")});
    const std::string h = prefix + ".head" + std::to_string(l + 1);
    p.head.levels.push_back({make_conv3x3<Real>(h + ".0", out, out, 1), relu(h + ".1"),
                             make_linear<Real>(h + ".2", out, arch.head_outputs())});
    in = out;
  }
  return p;
}

CompositeConnectionParams make_connection(const ArchConfig& arch, const std::string& prefix) {
  arch.validate();
  CompositeConnectionParams g;
  for (int l = 0; l < arch.levels; ++l) {
    std::vector<RealLayer> row;
    for (int j = l; j < arch.levels; ++j) {
      row.push_back(make_linear<Real>(
          prefix + ".to" + std::to_string(l + 1) + ".from" + std::to_string(j + 1),
          arch.level_channels(j), arch.level_channels(l), false));
    }
    g.projections.push_back(std::move(row));
  }
  return g;
}

namespace {

void fill_uniform(RealTensor& t, Real bound, Rng& rng) {
  std::uniform_real_distribution<Real> u(-bound, bound);
  for (Index i = 0; i < t.size(); ++i) t[i] = u(rng);
}

Index fan_in(const RealLayer& layer) {
  return layer.kind == LayerKind::kConv3x3 ? layer.hyper.in_channels * 9 : layer.hyper.in_channels;
}

}  // namespace

void init_detector(DetectorParams& params, std::uint64_t seed) {
  Rng rng(splitmix64(seed));
  for_each_layer(params, [&](RealLayer& layer) {
    if (layer.params.empty()) return;
    const auto fan = static_cast<Real>(fan_in(layer));
    // He-uniform ahead of a ReLU; plain 1/sqrt(fan_in) for the output projection.
    const Real bound = layer.kind == LayerKind::kConv3x3 ? std::sqrt(6.0 / fan) : 1.0 / std::sqrt(fan);
    fill_uniform(layer.params.at("weight"), bound, rng);
    if (auto it = layer.params.find("bias"); it != layer.params.end()) it->second.data().setZero();
  });
  // Prior objectness of about 2% keeps the initial loss from being dominated
  // by the background cells.
  for (auto& level : params.head.levels) level.back().params.at("bias")[0] = -4.0;
}

void init_connection(CompositeConnectionParams& params, std::uint64_t seed) {
  Rng rng(splitmix64(seed));
  for_each_layer(params, [&](RealLayer& layer) {
    fill_uniform(layer.params.at("weight"), 0.5 / std::sqrt(static_cast<Real>(fan_in(layer))), rng);
  });
}

template <typename Params, typename Fn>
static void visit_detector(Params& p, Fn&& fn) {
  for (auto& layer : p.backbone.stem) fn(layer);
  for (auto& stage : p.backbone.stages)
    for (auto& layer : stage) fn(layer);
  for (auto& level : p.head.levels)
    for (auto& layer : level) fn(layer);
}

void for_each_layer(DetectorParams& params, const std::function<void(RealLayer&)>& fn) {
  visit_detector(params, fn);
}
void for_each_layer(const DetectorParams& params,
                    const std::function<void(const RealLayer&)>& fn) {
  visit_detector(params, fn);
}
void for_each_layer(CompositeConnectionParams& params, const std::function<void(RealLayer&)>& fn) {
  for (auto& row : params.projections)
    for (auto& layer : row) fn(layer);
}
void for_each_layer(const CompositeConnectionParams& params,
                    const std::function<void(const RealLayer&)>& fn) {
  for (const auto& row : params.projections)
    for (const auto& layer : row) fn(layer);
}

// ---------------------------------------------------------------------------
// Forward / backward

RealTensor run_stack(const LayerStack& layers, const RealTensor& x, StackTrace* trace) {
  if (trace) trace->inputs.clear();
  RealTensor cur = x;
  for (const auto& layer : layers) {
    RealTensor next = forward(layer, cur);
    if (trace) trace->inputs.push_back(std::move(cur));
    cur = std::move(next);
  }
  return cur;
}

void accumulate(GradMap& into, const std::string& prefix, ParamMap<Real>&& grads) {
  for (auto& [name, g] : grads) {
    const std::string key = prefix + "." + name;
    auto it = into.find(key);
    if (it == into.end()) {
      into.emplace(key, std::move(g));
    } else {
      it->second.data() += g.data();
    }
  }
}

RealTensor backprop_stack(const LayerStack& layers, const StackTrace& trace, RealTensor grad,
                          GradMap& grads) {
  if (trace.inputs.size() != layers.size()) {
    throw std::logic_error("backprop_stack: missing forward trace");
  }
  for (std::size_t i = layers.size(); i-- > 0;) {
    auto g = backward(layers[i], trace.inputs[i], grad);
    accumulate(grads, layers[i].name, std::move(g.params));
    grad = std::move(g.input);
  }
  return grad;
}

namespace {

void check_image(const DetectorParams& params, const RealTensor& x) {
  const auto& first = params.backbone.stem.front();
  if (x.rank() != 3 || x.dim(0) != first.hyper.in_channels || x.dim(1) != x.dim(2)) {
    throw ShapeError("backbone '" + first.name + "': expected image [1, S, S], got " +
                     shape_string(x.shape()));
  }
}

MultiScaleFeatures run_backbone(const DetectorParams& params, const RealTensor& x,
                                const MultiScaleFeatures* h, BackboneTrace* trace) {
  check_image(params, x);
  const auto& bb = params.backbone;
  if (h && h->levels.size() != bb.stages.size()) {
    throw ShapeError("backbone2: expected " + std::to_string(bb.stages.size()) +
                     " composite levels, got " + std::to_string(h->levels.size()));
  }
  if (trace) trace->stages.assign(bb.stages.size(), {});
  MultiScaleFeatures out;
  RealTensor cur = run_stack(bb.stem, x, trace ? &trace->stem : nullptr);
  for (std::size_t l = 0; l < bb.stages.size(); ++l) {
    cur = run_stack(bb.stages[l], cur, trace ? &trace->stages[l] : nullptr);
    if (h) {
      const RealTensor& add = h->levels[l];
      if (add.shape() != cur.shape()) {
        throw ShapeError("backbone2 stage " + std::to_string(l + 1) + ": composite level has shape " +
                         shape_string(add.shape()) + ", expected " + shape_string(cur.shape()));
      }
      cur.data() += add.data();
    }
    out.levels.push_back(cur);
  }
  return out;
}

}  // namespace

MultiScaleFeatures backbone_forward(const DetectorParams& params, const RealTensor& x,
                                    BackboneTrace* trace) {
  return run_backbone(params, x, nullptr, trace);
}

MultiScaleFeatures backbone2_forward(const DetectorParams& params, const RealTensor& x,
                                     const MultiScaleFeatures& h, BackboneTrace* trace) {
  return run_backbone(params, x, &h, trace);
}

MultiScaleFeatures backbone_backward(const DetectorParams& params, const BackboneTrace& trace,
                                     const MultiScaleFeatures& grad_levels, GradMap& grads) {
  const auto& bb = params.backbone;
  const std::size_t levels = bb.stages.size();
  if (grad_levels.levels.size() != levels || trace.stages.size() != levels) {
    throw std::logic_error("backbone_backward: level count mismatch or missing trace");
  }
  MultiScaleFeatures total;
  total.levels.resize(levels);
  RealTensor carry;
  for (std::size_t l = levels; l-- > 0;) {
    RealTensor g = grad_levels.levels[l];
    if (l + 1 < levels) g.data() += carry.data();
    total.levels[l] = g;
    carry = backprop_stack(bb.stages[l], trace.stages[l], std::move(g), grads);
  }
  backprop_stack(bb.stem, trace.stem, std::move(carry), grads);
  return total;
}

MultiScaleFeatures composite_connect(const CompositeConnectionParams& g,
                                     const MultiScaleFeatures& f1) {
  f1.validate();
  const std::size_t levels = f1.levels.size();
  if (g.projections.size() != levels) {
    throw ShapeError("composite connection expects " + std::to_string(g.projections.size()) +
                     " levels, got " + std::to_string(levels));
  }
  MultiScaleFeatures h;
  for (std::size_t l = 0; l < levels; ++l) {
    const Index side = f1.levels[l].dim(1);
    RealTensor sum({g.projections[l].front().hyper.out_channels, side, side});
    for (std::size_t j = l; j < levels; ++j) {
      const RealTensor proj = forward(g.projections[l][j - l], f1.levels[j]);
      sum.data() += upsample_nearest(proj, side / f1.levels[j].dim(1)).data();
    }
    h.levels.push_back(std::move(sum));
  }
  return h;
}

MultiScaleFeatures composite_connect_backward(const CompositeConnectionParams& g,
                                              const MultiScaleFeatures& f1,
                                              const MultiScaleFeatures& grad_h, GradMap& grads) {
  const std::size_t levels = f1.levels.size();
  MultiScaleFeatures grad_f1;
  for (const auto& level : f1.levels) grad_f1.levels.emplace_back(level.shape());
  for (std::size_t l = 0; l < levels; ++l) {
    const Index side = f1.levels[l].dim(1);
    for (std::size_t j = l; j < levels; ++j) {
      const RealTensor gproj = upsample_nearest_backward(grad_h.levels[l], side / f1.levels[j].dim(1));
      auto lg = backward(g.projections[l][j - l], f1.levels[j], gproj);
      accumulate(grads, g.projections[l][j - l].name, std::move(lg.params));
      grad_f1.levels[j].data() += lg.input.data();
    }
  }
  return grad_f1;
}

RawPredictions head_forward(const DetectorParams& params, const MultiScaleFeatures& f,
                            HeadTrace* trace) {
  f.validate();
  if (f.levels.size() != params.head.levels.size()) {
    throw ShapeError("head expects " + std::to_string(params.head.levels.size()) +
                     " pyramid levels, got " + std::to_string(f.levels.size()));
  }
  if (trace) trace->levels.assign(f.levels.size(), {});
  RawPredictions out;
  for (std::size_t l = 0; l < f.levels.size(); ++l) {
    out.levels.push_back(
        run_stack(params.head.levels[l], f.levels[l], trace ? &trace->levels[l] : nullptr));
  }
  return out;
}

MultiScaleFeatures head_backward(const DetectorParams& params, const HeadTrace& trace,
                                 const RawPredictions& grad, GradMap& grads) {
  MultiScaleFeatures out;
  for (std::size_t l = 0; l < params.head.levels.size(); ++l) {
    out.levels.push_back(
        backprop_stack(params.head.levels[l], trace.levels.at(l), grad.levels.at(l), grads));
  }
  return out;
}

}  // namespace dydet
