#include "dydet/router.hpp"

#include <cmath>
#include <cstring>

#include "dydet/rng.hpp"

namespace dydet {

RouterParams make_router(Index pooled_width, const std::string& prefix) {
  const Index hidden = pooled_width / 4;
  if (hidden < 1) throw std::invalid_argument("router input width must be >= 4");
  return {make_linear<Real>(prefix + ".fc1", pooled_width, hidden),
          make_linear<Real>(prefix + ".fc2", hidden, 1)};
}

void init_router(RouterParams& router, std::uint64_t seed) {
  Rng rng(splitmix64(seed));
  for_each_layer(router, [&](RealLayer& layer) {
    const Real bound = 1.0 / std::sqrt(static_cast<Real>(layer.hyper.in_channels));
    std::uniform_real_distribution<Real> u(-bound, bound);
    auto& w = layer.params.at("weight");
    for (Index i = 0; i < w.size(); ++i) w[i] = u(rng);
    layer.params.at("bias").data().setZero();
  });
}

void for_each_layer(RouterParams& router, const std::function<void(RealLayer&)>& fn) {
  fn(router.fc1);
  fn(router.fc2);
}

void for_each_layer(const RouterParams& router, const std::function<void(const RealLayer&)>& fn) {
  fn(router.fc1);
  fn(router.fc2);
}

Vector pool_concat(const MultiScaleFeatures& f1) {
  f1.validate();
  Index d = 0;
  for (const auto& level : f1.levels) d += level.dim(0);
  Vector pooled(d);
  Index offset = 0;
  for (const auto& level : f1.levels) {
    pooled.segment(offset, level.dim(0)) = level.matrix().rowwise().mean();
    offset += level.dim(0);
  }
  return pooled;
}

DifficultyScore router_forward(const RouterParams& router, const Vector& pooled,
                               RouterCache* cache) {
  if (pooled.size() != router.input_width()) {
    throw ShapeError("router: pooled vector has length " + std::to_string(pooled.size()) +
                     ", expected d = " + std::to_string(router.input_width()));
  }
  static const RealLayer relu = make_activation<Real>("router.relu", LayerKind::kReLU);
  RealTensor in({pooled.size()}, pooled);
  RealTensor pre = forward(router.fc1, in);
  RealTensor hidden = forward(relu, pre);
  RealTensor logit = forward(router.fc2, hidden);
  const Real phi = detail::sigmoid(logit[0]);
  if (cache) {
    cache->valid = true;
    cache->pooled = std::move(in);
    cache->hidden_pre = std::move(pre);
    cache->hidden = std::move(hidden);
    cache->logit = std::move(logit);
    cache->phi = phi;
  }
  return {phi};
}

GradMap router_backward_logit(const RouterParams& router, const RouterCache& cache,
                              Real grad_logit) {
  if (!cache.valid) throw std::logic_error("router_backward: forward cache is not populated");
  static const RealLayer relu = make_activation<Real>("router.relu", LayerKind::kReLU);
  GradMap grads;
  RealTensor g({1}, Vector::Constant(1, grad_logit));
  auto g2 = backward(router.fc2, cache.hidden, g);
  accumulate(grads, router.fc2.name, std::move(g2.params));
  auto gr = backward(relu, cache.hidden_pre, g2.input);
  auto g1 = backward(router.fc1, cache.pooled, gr.input);
  accumulate(grads, router.fc1.name, std::move(g1.params));
  return grads;
}

GradMap router_backward(const RouterParams& router, const RouterCache& cache, Real coeff) {
  if (!cache.valid) throw std::logic_error("router_backward: forward cache is not populated");
  // dL/dlogit = dL/dphi * phi (1 - phi), with dL/dphi = -coeff.
  return router_backward_logit(router, cache, -coeff * cache.phi * (1 - cache.phi));
}

std::int64_t router_macs(const RouterParams& router) {
  const std::int64_t d = router.input_width(), h = router.hidden_width();
  return d * h + h + h + 1;
}

std::uint64_t hash_image(const RealTensor& image) {
  std::uint64_t hash = 0xcbf29ce484222325ULL;
  for (Index i = 0; i < image.size(); ++i) {
    std::uint64_t bits;
    const Real v = image[i];
    std::memcpy(&bits, &v, sizeof bits);
    hash = (hash ^ bits) * 0x100000001b3ULL;
  }
  return hash;
}

Real RandomScorer::score_hash(std::uint64_t image_hash) const {
  const std::uint64_t mixed = splitmix64(image_hash ^ splitmix64(seed));
  // 53 random bits mapped to (0, 1).
  return (static_cast<Real>(mixed >> 11) + 0.5) * 0x1.0p-53;
}

}  // namespace dydet
