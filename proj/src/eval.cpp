#include "dydet/eval.hpp"

#include <algorithm>
#include <stdexcept>

namespace dydet {

GroundTruth ground_truth(const SyntheticScene& scene) { return {scene.boxes, scene.classes}; }

std::vector<GroundTruth> ground_truths(const std::vector<SyntheticScene>& scenes) {
  std::vector<GroundTruth> out;
  out.reserve(scenes.size());
  for (const auto& s : scenes) out.push_back(ground_truth(s));
  return out;
}

namespace {

struct Ranked {
  Real score;
  std::size_t image;
  std::size_t index;
};

Real class_ap(const std::vector<std::vector<Detection>>& detections,
              const std::vector<GroundTruth>& truths, int cls, int num_gt, Real iou_thresh) {
  std::vector<Ranked> ranked;
  for (std::size_t i = 0; i < detections.size(); ++i) {
    for (std::size_t d = 0; d < detections[i].size(); ++d) {
      if (detections[i][d].cls == cls) ranked.push_back({detections[i][d].score, i, d});
    }
  }
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const Ranked& a, const Ranked& b) { return a.score > b.score; });

  std::vector<std::vector<bool>> used(truths.size());
  for (std::size_t i = 0; i < truths.size(); ++i) used[i].assign(truths[i].boxes.size(), false);

  std::vector<Real> precision, recall;
  int tp = 0, fp = 0;
  for (const Ranked& r : ranked) {
    const Detection& det = detections[r.image][r.index];
    const GroundTruth& gt = truths[r.image];
    Real best = iou_thresh;
    int match = -1;
    for (std::size_t g = 0; g < gt.boxes.size(); ++g) {
      if (gt.classes[g] != cls || used[r.image][g]) continue;
      const Real o = iou(det.box, gt.boxes[g]);
      if (o >= best) {
        if (match < 0 || o > best) {
          best = o;
          match = static_cast<int>(g);
        }
      }
    }
    if (match >= 0) {
      used[r.image][static_cast<std::size_t>(match)] = true;
      ++tp;
    } else {
      ++fp;
    }
    precision.push_back(static_cast<Real>(tp) / (tp + fp));
    recall.push_back(static_cast<Real>(tp) / num_gt);
  }

  // Precision envelope, then area under the step curve.
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  Real ap = 0, prev_recall = 0;
  for (std::size_t i = 0; i < precision.size(); ++i) {
    ap += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return ap;
}

}  // namespace

EvalResult evaluate_ap(const std::vector<std::vector<Detection>>& detections,
                       const std::vector<GroundTruth>& truths, int num_classes, Real iou_thresh) {
  if (detections.size() != truths.size()) {
    throw std::invalid_argument("evaluate_ap: " + std::to_string(detections.size()) +
                                " detection lists for " + std::to_string(truths.size()) + " images");
  }
  if (num_classes < 1) throw std::invalid_argument("evaluate_ap: num_classes must be >= 1");
  std::vector<int> counts(static_cast<std::size_t>(num_classes), 0);
  for (const auto& gt : truths) {
    if (gt.boxes.size() != gt.classes.size()) throw std::invalid_argument("evaluate_ap: box/class length mismatch");
    for (int c : gt.classes) {
      if (c < 0 || c >= num_classes) throw std::invalid_argument("evaluate_ap: class out of range");
      ++counts[static_cast<std::size_t>(c)];
    }
  }
  EvalResult out;
  out.num_images = static_cast<int>(truths.size());
  out.per_class_ap.resize(static_cast<std::size_t>(num_classes));
  Real sum = 0;
  int present = 0;
  for (int c = 0; c < num_classes; ++c) {
    const int n = counts[static_cast<std::size_t>(c)];
    if (n == 0) continue;
    const Real ap = class_ap(detections, truths, c, n, iou_thresh);
    out.per_class_ap[static_cast<std::size_t>(c)] = ap;
    sum += ap;
    ++present;
  }
  out.ap = present ? sum / present : 0;
  return out;
}

}  // namespace dydet
