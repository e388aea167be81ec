#pragma once

#include <cstdint>
#include <optional>

#include "dydet/cascade.hpp"

namespace dydet {

/// Difficulty scorer: sigmoid(W2 relu(W1 p + b1) + b2) over the pooled
/// first-backbone pyramid p. Hidden width is floor(d / 4).
struct RouterParams {
  RealLayer fc1;  // d -> floor(d/4)
  RealLayer fc2;  // floor(d/4) -> 1

  Index input_width() const { return fc1.hyper.in_channels; }
  Index hidden_width() const { return fc1.hyper.out_channels; }
};

RouterParams make_router(Index pooled_width, const std::string& prefix = "router");
/// W uniform in +-1/sqrt(fan_in), biases zero.
void init_router(RouterParams& router, std::uint64_t seed);

void for_each_layer(RouterParams& router, const std::function<void(RealLayer&)>& fn);
void for_each_layer(const RouterParams& router, const std::function<void(const RealLayer&)>& fn);

/// Global average pool of every channel, concatenated in level order.
Vector pool_concat(const MultiScaleFeatures& f1);

struct DifficultyScore {
  Real phi = 0.5;
};

struct RouterCache {
  bool valid = false;
  RealTensor pooled;
  RealTensor hidden_pre;
  RealTensor hidden;
  RealTensor logit;
  Real phi = 0.5;
};

DifficultyScore router_forward(const RouterParams& router, const Vector& pooled,
                               RouterCache* cache = nullptr);

/// Gradient of the routing objective through the difficulty score:
/// -coeff * d(phi)/d(theta_R), with coeff = L1 - L2 - offset.
GradMap router_backward(const RouterParams& router, const RouterCache& cache, Real coeff);

/// Gradient for an arbitrary upstream derivative with respect to the logit.
GradMap router_backward_logit(const RouterParams& router, const RouterCache& cache,
                              Real grad_logit);

/// Multiply-accumulates of the two fully connected layers including bias adds.
std::int64_t router_macs(const RouterParams& router);

/// FNV-1a over the pixel bytes.
std::uint64_t hash_image(const RealTensor& image);

/// Seeded scorer that ignores image content beyond hashing it; the random
/// routing baseline.
struct RandomScorer {
  std::uint64_t seed = 0;
  Real score(const RealTensor& image) const { return score_hash(hash_image(image)); }
  Real score_hash(std::uint64_t image_hash) const;
};

}  // namespace dydet
