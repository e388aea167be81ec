#include "dydet/loss.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace dydet {

namespace {

using detail::sigmoid;

Real smooth_l1(Real e) {
  const Real a = std::abs(e);
  return a < 1 ? 0.5 * e * e : a - 0.5;
}

Real smooth_l1_grad(Real e) {
  if (std::abs(e) < 1) return e;
  return e > 0 ? 1.0 : -1.0;
}

// Numerically stable BCE-with-logits for target t in {0, 1}.
Real bce_logits(Real z, Real t) {
  return std::max(z, Real(0)) - z * t + std::log1p(std::exp(-std::abs(z)));
}

std::vector<Index> level_sides(const RawPredictions& pred) {
  std::vector<Index> sides;
  for (const auto& level : pred.levels) sides.push_back(level.dim(1));
  return sides;
}

}  // namespace

int assign_level(const Box& box, const std::vector<Index>& strides) {
  // With ascending strides the log-scale midpoint between s_l and s_{l+1} is
  // sqrt(s_l s_{l+1}), so comparing areas against s_l s_{l+1} avoids logs and
  // resolves exact ties toward the finer level.
  const Real area = box.w * box.h;
  int level = 0;
  while (static_cast<std::size_t>(level) + 1 < strides.size() &&
         area > static_cast<Real>(strides[static_cast<std::size_t>(level)] *
                                  strides[static_cast<std::size_t>(level) + 1])) {
    ++level;
  }
  return level;
}

BoxTarget encode_box(const Box& box, Index stride, Index cell_x, Index cell_y) {
  const auto s = static_cast<Real>(stride);
  return {box.cx / s - static_cast<Real>(cell_x), box.cy / s - static_cast<Real>(cell_y),
          std::log(box.w / s), std::log(box.h / s)};
}

Box decode_box(const BoxTarget& t, Index stride, Index cell_x, Index cell_y) {
  const auto s = static_cast<Real>(stride);
  return {(static_cast<Real>(cell_x) + t.dx) * s, (static_cast<Real>(cell_y) + t.dy) * s,
          std::exp(t.log_w) * s, std::exp(t.log_h) * s};
}

std::vector<Assignment> assign_targets(const std::vector<Index>& sides, int image_size,
                                       const std::vector<Box>& boxes,
                                       const std::vector<int>& classes) {
  std::vector<Index> strides;
  for (Index side : sides) strides.push_back(image_size / side);
  std::vector<Assignment> out;
  for (std::size_t k = 0; k < boxes.size(); ++k) {
    const Box& b = boxes[k];
    const int level = assign_level(b, strides);
    const Index stride = strides[static_cast<std::size_t>(level)];
    const Index side = sides[static_cast<std::size_t>(level)];
    const Index cx = std::clamp<Index>(static_cast<Index>(std::floor(b.cx / stride)), 0, side - 1);
    const Index cy = std::clamp<Index>(static_cast<Index>(std::floor(b.cy / stride)), 0, side - 1);
    Assignment a{level, cx, cy, static_cast<int>(k), classes[k], encode_box(b, stride, cx, cy)};
    auto clash = std::find_if(out.begin(), out.end(), [&](const Assignment& o) {
      return o.level == level && o.cell_x == cx && o.cell_y == cy;
    });
    if (clash == out.end()) {
      out.push_back(a);
    } else if (b.area() > boxes[static_cast<std::size_t>(clash->object)].area()) {
      *clash = a;
    }
  }
  return out;
}

LossBreakdown detection_loss(const RawPredictions& pred, const SyntheticScene& gt,
                             RawPredictions* grad) {
  const int image_size = gt.image_size();
  const std::vector<Index> sides = level_sides(pred);
  if (pred.levels.empty()) throw ShapeError("detection_loss: empty prediction pyramid");
  const Index channels = pred.levels.front().dim(0);
  for (const auto& level : pred.levels) {
    if (level.rank() != 3 || level.dim(0) != channels || level.dim(1) != level.dim(2) ||
        image_size % level.dim(1) != 0) {
      throw ShapeError("detection_loss: prediction level " + shape_string(level.shape()) +
                       " incompatible with image size " + std::to_string(image_size));
    }
  }
  const Index num_classes = channels - 5;
  const auto assignments = assign_targets(sides, image_size, gt.boxes, gt.classes);

  if (grad) {
    grad->levels.clear();
    for (const auto& level : pred.levels) grad->levels.emplace_back(level.shape());
  }

  Index cells = 0;
  for (Index side : sides) cells += side * side;
  const Real inv_cells = 1.0 / static_cast<Real>(cells);

  // Objectness target map: 1 on assigned cells.
  std::vector<std::vector<char>> positive(pred.levels.size());
  for (std::size_t l = 0; l < pred.levels.size(); ++l) {
    positive[l].assign(static_cast<std::size_t>(sides[l] * sides[l]), 0);
  }
  for (const auto& a : assignments) {
    positive[static_cast<std::size_t>(a.level)]
            [static_cast<std::size_t>(a.cell_y * sides[static_cast<std::size_t>(a.level)] + a.cell_x)] = 1;
  }

  LossBreakdown loss;
  for (std::size_t l = 0; l < pred.levels.size(); ++l) {
    const Index area = sides[l] * sides[l];
    const Real* z = pred.levels[l].data().data();  // channel 0 block
    for (Index i = 0; i < area; ++i) {
      const Real t = positive[l][static_cast<std::size_t>(i)];
      loss.objectness += bce_logits(z[i], t);
      if (grad) grad->levels[l][i] = (sigmoid(z[i]) - t) * inv_cells;
    }
  }
  loss.objectness *= inv_cells;

  if (!assignments.empty()) {
    const Real inv_pos = 1.0 / static_cast<Real>(assignments.size());
    for (const auto& a : assignments) {
      const auto l = static_cast<std::size_t>(a.level);
      const RealTensor& p = pred.levels[l];
      auto value = [&](Index c) { return p.at(c, a.cell_y, a.cell_x); };

      const Real sx = sigmoid(value(1)), sy = sigmoid(value(2));
      const Real ex = sx - a.target.dx, ey = sy - a.target.dy;
      const Real ew = value(3) - a.target.log_w, eh = value(4) - a.target.log_h;
      loss.box += smooth_l1(ex) + smooth_l1(ey) + smooth_l1(ew) + smooth_l1(eh);

      Real max_logit = -std::numeric_limits<Real>::infinity();
      for (Index c = 0; c < num_classes; ++c) max_logit = std::max(max_logit, value(5 + c));
      Real denom = 0;
      for (Index c = 0; c < num_classes; ++c) denom += std::exp(value(5 + c) - max_logit);
      loss.classification += max_logit + std::log(denom) - value(5 + a.cls);

      if (grad) {
        RealTensor& g = grad->levels[l];
        g.at(1, a.cell_y, a.cell_x) += smooth_l1_grad(ex) * sx * (1 - sx) * inv_pos;
        g.at(2, a.cell_y, a.cell_x) += smooth_l1_grad(ey) * sy * (1 - sy) * inv_pos;
        g.at(3, a.cell_y, a.cell_x) += smooth_l1_grad(ew) * inv_pos;
        g.at(4, a.cell_y, a.cell_x) += smooth_l1_grad(eh) * inv_pos;
        for (Index c = 0; c < num_classes; ++c) {
          const Real prob = std::exp(value(5 + c) - max_logit) / denom;
          g.at(5 + c, a.cell_y, a.cell_x) += (prob - (c == a.cls ? 1.0 : 0.0)) * inv_pos;
        }
      }
    }
    loss.box *= inv_pos;
    loss.classification *= inv_pos;
  }
  loss.total = loss.objectness + loss.box + loss.classification;
  return loss;
}

std::vector<Detection> non_max_suppression(std::vector<Detection> dets, Real nms_iou) {
  std::stable_sort(dets.begin(), dets.end(),
                   [](const Detection& a, const Detection& b) { return a.score > b.score; });
  std::vector<Detection> kept;
  for (const auto& d : dets) {
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const Detection& k) {
      return k.cls == d.cls && iou(k.box, d.box) > nms_iou;
    });
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

std::vector<Detection> decode_predictions(const RawPredictions& pred, int image_size,
                                          Real conf_thresh, Real nms_iou) {
  std::vector<Detection> dets;
  for (const auto& level : pred.levels) {
    const Index side = level.dim(1);
    const Index stride = image_size / side;
    const Index num_classes = level.dim(0) - 5;
    for (Index y = 0; y < side; ++y) {
      for (Index x = 0; x < side; ++x) {
        const Real obj = sigmoid(level.at(0, y, x));
        if (obj < conf_thresh) continue;
        int best = 0;
        Real max_logit = level.at(5, y, x);
        for (Index c = 1; c < num_classes; ++c) {
          if (level.at(5 + c, y, x) > max_logit) {
            max_logit = level.at(5 + c, y, x);
            best = static_cast<int>(c);
          }
        }
        Real denom = 0;
        for (Index c = 0; c < num_classes; ++c) denom += std::exp(level.at(5 + c, y, x) - max_logit);
        const BoxTarget t{sigmoid(level.at(1, y, x)), sigmoid(level.at(2, y, x)), level.at(3, y, x),
                          level.at(4, y, x)};
        dets.push_back({decode_box(t, stride, x, y), best, obj / denom});
      }
    }
  }
  return non_max_suppression(std::move(dets), nms_iou);
}

}  // namespace dydet
