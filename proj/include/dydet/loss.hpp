#pragma once

#include <vector>

#include "dydet/cascade.hpp"

namespace dydet {

struct LossBreakdown {
  Real objectness = 0;
  Real box = 0;
  Real classification = 0;
  Real total = 0;
};

/// Regression target of one object at its assigned cell.
struct BoxTarget {
  Real dx = 0, dy = 0;  // centre offset inside the cell, in [0, 1)
  Real log_w = 0, log_h = 0;  // log of size over stride
};

struct Assignment {
  int level = 0;
  Index cell_x = 0, cell_y = 0;
  int object = 0;  // index into the scene's boxes
  int cls = 0;
  BoxTarget target;
};

/// Level whose stride (ascending) is nearest sqrt(w * h) in log scale; ties go
/// to the finer level.
int assign_level(const Box& box, const std::vector<Index>& strides);

BoxTarget encode_box(const Box& box, Index stride, Index cell_x, Index cell_y);
Box decode_box(const BoxTarget& target, Index stride, Index cell_x, Index cell_y);

/// One assignment per occupied cell; on collisions the larger object wins.
std::vector<Assignment> assign_targets(const std::vector<Index>& sides, int image_size,
                                       const std::vector<Box>& boxes,
                                       const std::vector<int>& classes);

/// Objectness BCE averaged over every cell, smooth-L1 box loss (summed over the
/// four components) and class cross-entropy averaged over assigned cells.
/// When `grad` is non-null it receives d(total)/d(pred).
LossBreakdown detection_loss(const RawPredictions& pred, const SyntheticScene& gt,
                             RawPredictions* grad = nullptr);

struct Detection {
  Box box;
  int cls = 0;
  Real score = 0;
  friend bool operator==(const Detection&, const Detection&) = default;
};

std::vector<Detection> decode_predictions(const RawPredictions& pred, int image_size,
                                          Real conf_thresh, Real nms_iou);

/// Greedy per-class suppression; input and output sorted by score descending.
std::vector<Detection> non_max_suppression(std::vector<Detection> dets, Real nms_iou);

}  // namespace dydet
