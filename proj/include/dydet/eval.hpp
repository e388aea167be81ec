#pragma once

#include <optional>
#include <vector>

#include "dydet/loss.hpp"

namespace dydet {

struct GroundTruth {
  std::vector<Box> boxes;
  std::vector<int> classes;
};

GroundTruth ground_truth(const SyntheticScene& scene);
std::vector<GroundTruth> ground_truths(const std::vector<SyntheticScene>& scenes);

struct EvalResult {
  Real ap = 0;
  /// Empty for classes without ground truth.
  std::vector<std::optional<Real>> per_class_ap;
  int num_images = 0;
};

/// AP at IoU 0.5 per class (all-point interpolation), averaged over classes
/// that have ground truth. Detections are ranked by score across the set;
/// equal scores keep image order, then detection order.
EvalResult evaluate_ap(const std::vector<std::vector<Detection>>& detections,
                       const std::vector<GroundTruth>& truths, int num_classes,
                       Real iou_thresh = 0.5);

}  // namespace dydet
