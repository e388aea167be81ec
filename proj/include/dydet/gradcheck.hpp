#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>

#include <Eigen/Core>

namespace dydet {

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Central finite-difference check of an analytic gradient.
///
/// `objective` is a nullary callable that reads `params` (a live view into the
/// parameter storage); each checked coordinate is perturbed in place by +-eps
/// and restored. Returns max |analytic - numeric| / max(1, |numeric|) over the
/// checked coordinates, which are all coordinates when `coords` is empty.
template <typename Scalar, typename Objective>
Scalar finite_diff_check(Objective&& objective,
                         Eigen::Ref<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> params,
                         const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& analytic, Scalar eps,
                         std::span<const Eigen::Index> coords = {}) {
  if (analytic.size() != params.size()) {
    throw std::invalid_argument("finite_diff_check: gradient length " +
                                std::to_string(analytic.size()) + " != parameter length " +
                                std::to_string(params.size()));
  }
  Scalar worst = 0;
  auto check_one = [&](Eigen::Index i) {
    const Scalar saved = params[i];
    params[i] = saved + eps;
    const Scalar plus = objective();
    params[i] = saved - eps;
    const Scalar minus = objective();
    params[i] = saved;
    if (!std::isfinite(plus) || !std::isfinite(minus)) {
      throw NonFiniteError("finite_diff_check: objective is non-finite at coordinate " +
                           std::to_string(i));
    }
    const Scalar numeric = (plus - minus) / (Scalar(2) * eps);
    const Scalar err = std::abs(analytic[i] - numeric) / std::max(Scalar(1), std::abs(numeric));
    worst = std::max(worst, err);
  };
  if (coords.empty()) {
    for (Eigen::Index i = 0; i < params.size(); ++i) check_one(i);
  } else {
    for (Eigen::Index i : coords) check_one(i);
  }
  return worst;
}

}  // namespace dydet
