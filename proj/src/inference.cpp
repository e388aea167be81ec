#include "dydet/inference.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "dydet/csv.hpp"
#include "dydet/rng.hpp"

namespace dydet {

void to_json(nlohmann::json& j, const DecodeConfig& c) {
  j = nlohmann::json{{"conf_thresh", c.conf_thresh}, {"nms_iou", c.nms_iou}, {"max_detections", c.max_detections}};
}

void from_json(const nlohmann::json& j, DecodeConfig& c) {
  if (j.contains("conf_thresh")) j.at("conf_thresh").get_to(c.conf_thresh);
  if (j.contains("nms_iou")) j.at("nms_iou").get_to(c.nms_iou);
  if (j.contains("max_detections")) j.at("max_detections").get_to(c.max_detections);
}

namespace {

using Clock = std::chrono::steady_clock;

std::vector<Detection> decode(const RawPredictions& pred, int image_size, const DecodeConfig& c) {
  auto dets = decode_predictions(pred, image_size, c.conf_thresh, c.nms_iou);
  if (dets.size() > c.max_detections) dets.resize(c.max_detections);
  return dets;
}

int image_side(const RealTensor& x) {
  if (x.rank() != 3) throw ShapeError("image must have shape [C, H, W], got " + shape_string(x.shape()));
  return static_cast<int>(x.dim(1));
}

std::vector<Detection> second_route(const CascadeModel& model, const RealTensor& x,
                                    const MultiScaleFeatures& f1, const DecodeConfig& decode_cfg) {
  const MultiScaleFeatures h = composite_connect(model.connection, f1);
  const MultiScaleFeatures f2 = backbone2_forward(model.second, x, h);
  return decode(head_forward(model.second, f2), image_side(x), decode_cfg);
}

}  // namespace

DynamicResult infer_dynamic(const CascadeModel& model, Real tau, const RealTensor& x,
                            const DecodeConfig& decode_cfg) {
  if (std::isnan(tau)) throw std::invalid_argument("infer_dynamic: tau is NaN");
  const auto start = Clock::now();
  DynamicResult out;
  const MultiScaleFeatures f1 = backbone_forward(model.first, x);
  const Real phi = score_image(model, f1, x);
  const Route route = route_for(phi, tau);
  if (route == Route::kEasy) {
    out.detections = decode(head_forward(model.first, f1), image_side(x), decode_cfg);
  } else {
    out.detections = second_route(model, x, f1, decode_cfg);
  }
  out.decision = {phi, tau, route, count_flops(model, route),
                  std::chrono::duration<double>(Clock::now() - start).count()};
  return out;
}

std::vector<Detection> infer_first(const CascadeModel& model, const RealTensor& x,
                                   const DecodeConfig& decode_cfg) {
  return decode(head_forward(model.first, backbone_forward(model.first, x)), image_side(x), decode_cfg);
}

std::vector<Detection> infer_cascade(const CascadeModel& model, const RealTensor& x,
                                     const DecodeConfig& decode_cfg) {
  return second_route(model, x, backbone_forward(model.first, x), decode_cfg);
}

Real compute_k(Real lat1, Real lat2, Real lat_t) {
  if (!(lat1 < lat2)) {
    throw std::invalid_argument("compute_k: easy-route latency must be below hard-route latency");
  }
  if (!(lat_t >= lat1 && lat_t <= lat2)) {
    throw std::invalid_argument("compute_k: target latency " + format_real(lat_t) + " outside [" +
                                format_real(lat1) + ", " + format_real(lat2) + "]");
  }
  return (lat_t - lat1) / (lat2 - lat1);
}

Real calibrate_threshold(std::vector<Real> scores, Real k) {
  if (scores.empty()) throw std::invalid_argument("calibrate_threshold: no scores");
  if (!(k >= 0 && k <= 1)) throw std::invalid_argument("calibrate_threshold: k must lie in [0, 1]");
  for (Real s : scores) {
    if (!std::isfinite(s)) throw std::invalid_argument("calibrate_threshold: non-finite score");
  }
  std::sort(scores.begin(), scores.end());
  if (k == 1) return std::nextafter(scores.front(), -std::numeric_limits<Real>::infinity());
  const Real pos = (1 - k) * static_cast<Real>(scores.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, scores.size() - 1);
  const Real frac = pos - static_cast<Real>(lo);
  return scores[lo] + frac * (scores[hi] - scores[lo]);
}

void to_json(nlohmann::json& j, const ThresholdCalibration& c) {
  j = nlohmann::json{{"k", c.k},       {"tau", c.tau},   {"scores_source", c.scores_source},
                     {"num_scores", c.num_scores}, {"lat1", c.lat1}, {"lat2", c.lat2},
                     {"lat_t", c.lat_t}};
}

void from_json(const nlohmann::json& j, ThresholdCalibration& c) {
  j.at("k").get_to(c.k);
  j.at("tau").get_to(c.tau);
  j.at("scores_source").get_to(c.scores_source);
  j.at("num_scores").get_to(c.num_scores);
  c.lat1 = j.value("lat1", 0.0);
  c.lat2 = j.value("lat2", 0.0);
  c.lat_t = j.value("lat_t", 0.0);
}

std::vector<Real> score_scenes(const CascadeModel& model, const std::vector<SyntheticScene>& scenes) {
  std::vector<Real> out;
  out.reserve(scenes.size());
  for (const auto& s : scenes) out.push_back(score_image(model, backbone_forward(model.first, s.image), s.image));
  return out;
}

// ---------------------------------------------------------------------------

void to_json(nlohmann::json& j, const LatencyModel& c) {
  j = nlohmann::json{{"mode", c.mode == LatencyModel::Mode::kAnalytic ? "analytic" : "measured"},
                     {"macs_per_ms", c.macs_per_ms},
                     {"timed_runs", c.timed_runs}};
}

void from_json(const nlohmann::json& j, LatencyModel& c) {
  if (j.contains("mode")) {
    const auto mode = j.at("mode").get<std::string>();
    if (mode == "analytic") {
      c.mode = LatencyModel::Mode::kAnalytic;
    } else if (mode == "measured") {
      c.mode = LatencyModel::Mode::kMeasured;
    } else {
      throw std::invalid_argument("latency mode must be analytic or measured, got '" + mode + "'");
    }
  }
  if (j.contains("macs_per_ms")) j.at("macs_per_ms").get_to(c.macs_per_ms);
  if (j.contains("timed_runs")) j.at("timed_runs").get_to(c.timed_runs);
  if (!(c.macs_per_ms > 0)) throw std::invalid_argument("latency macs_per_ms must be > 0");
  if (c.timed_runs < 1) throw std::invalid_argument("latency timed_runs must be >= 1");
}

RouteLatency route_latency(const CascadeModel& model, const LatencyModel& latency, const RealTensor& probe) {
  if (latency.mode == LatencyModel::Mode::kAnalytic) {
    return {static_cast<Real>(count_flops(model, Route::kEasy)) / latency.macs_per_ms,
            static_cast<Real>(count_flops(model, Route::kHard)) / latency.macs_per_ms};
  }
  auto median_ms = [&](Real tau) {
    std::vector<Real> times;
    for (int r = 0; r < latency.timed_runs; ++r) {
      times.push_back(infer_dynamic(model, tau, probe).decision.wall_time * 1e3);
    }
    std::nth_element(times.begin(), times.begin() + static_cast<std::ptrdiff_t>(times.size() / 2), times.end());
    return times[times.size() / 2];
  };
  const Real inf = std::numeric_limits<Real>::infinity();
  return {median_ms(inf), median_ms(-inf)};
}

RouteOutcomes evaluate_routes(const CascadeModel& model, const std::vector<SyntheticScene>& scenes,
                              const DecodeConfig& decode_cfg) {
  RouteOutcomes out;
  out.flops_easy = count_flops(model, Route::kEasy);
  out.flops_hard = count_flops(model, Route::kHard);
  for (const auto& s : scenes) {
    const MultiScaleFeatures f1 = backbone_forward(model.first, s.image);
    out.phi.push_back(score_image(model, f1, s.image));
    out.easy.push_back(decode(head_forward(model.first, f1), s.image_size(), decode_cfg));
    out.hard.push_back(second_route(model, s.image, f1, decode_cfg));
    out.truths.push_back(ground_truth(s));
  }
  return out;
}

std::vector<std::vector<Detection>> select_routes(const RouteOutcomes& outcomes, Real tau) {
  std::vector<std::vector<Detection>> out;
  out.reserve(outcomes.phi.size());
  for (std::size_t i = 0; i < outcomes.phi.size(); ++i) {
    out.push_back(route_for(outcomes.phi[i], tau) == Route::kEasy ? outcomes.easy[i] : outcomes.hard[i]);
  }
  return out;
}

Real sweep_threshold(const std::vector<Real>& val_scores, Real k) {
  if (k == 0) return std::numeric_limits<Real>::infinity();
  if (k == 1) return -std::numeric_limits<Real>::infinity();
  return calibrate_threshold(val_scores, k);
}

std::vector<TradeOffPoint> sweep_tradeoff(const RouteOutcomes& outcomes, const std::vector<Real>& val_scores,
                                          std::vector<Real> k_list, int num_classes,
                                          const RouteLatency& latency) {
  if (outcomes.phi.empty()) throw std::invalid_argument("sweep_tradeoff: empty evaluation set");
  for (Real k : k_list) {
    if (!(k >= 0 && k <= 1)) throw std::invalid_argument("sweep_tradeoff: k must lie in [0, 1]");
  }
  std::sort(k_list.begin(), k_list.end());
  const auto n = static_cast<std::int64_t>(outcomes.phi.size());
  std::vector<TradeOffPoint> rows;
  for (Real k : k_list) {
    TradeOffPoint p;
    p.k = k;
    p.tau = sweep_threshold(val_scores, k);
    for (Real phi : outcomes.phi) {
      const bool hard = route_for(phi, p.tau) == Route::kHard;
      p.hard_count += hard;
      p.total_flops += hard ? outcomes.flops_hard : outcomes.flops_easy;
    }
    p.hard_fraction = static_cast<Real>(p.hard_count) / static_cast<Real>(n);
    p.mean_flops = static_cast<Real>(p.total_flops) / static_cast<Real>(n);
    p.mean_latency_ms = latency.easy_ms + p.hard_fraction * (latency.hard_ms - latency.easy_ms);
    p.ap = evaluate_ap(select_routes(outcomes, p.tau), outcomes.truths, num_classes).ap;
    rows.push_back(p);
  }
  return rows;
}

void write_sweep_csv(const std::vector<TradeOffPoint>& rows, const std::filesystem::path& file) {
  CsvWriter csv(file, {"k", "tau", "ap", "mean_flops", "mean_latency_ms", "hard_fraction"});
  for (const auto& r : rows) csv.row(r.k, r.tau, r.ap, r.mean_flops, r.mean_latency_ms, r.hard_fraction);
}

// ---------------------------------------------------------------------------

Real hard_fraction(const std::vector<Real>& scores, Real tau) {
  if (scores.empty()) return 0;
  const auto hard = std::count_if(scores.begin(), scores.end(), [tau](Real s) { return route_for(s, tau) == Route::kHard; });
  return static_cast<Real>(hard) / static_cast<Real>(scores.size());
}

std::vector<RobustnessRow> threshold_robustness(const std::vector<Real>& val_pool,
                                                const std::vector<std::size_t>& sizes, Real k,
                                                const std::vector<Real>& test_scores, int resamples,
                                                std::uint64_t seed) {
  if (resamples < 1) throw std::invalid_argument("threshold_robustness: resamples must be >= 1");
  const Real tau_ref = calibrate_threshold(test_scores, k);
  std::vector<RobustnessRow> rows;
  for (std::size_t size : sizes) {
    if (size == 0 || size > val_pool.size()) {
      throw std::invalid_argument("threshold_robustness: size " + std::to_string(size) +
                                  " outside [1, " + std::to_string(val_pool.size()) + "]");
    }
    RobustnessRow row;
    row.val_size = size;
    row.tau_ref = tau_ref;
    const int draws = size == val_pool.size() ? 1 : resamples;
    for (int r = 0; r < draws; ++r) {
      std::vector<Real> subset;
      if (size == val_pool.size()) {
        subset = val_pool;
      } else {
        std::vector<std::size_t> idx(val_pool.size());
        std::iota(idx.begin(), idx.end(), 0);
        Rng rng(derive_seed(derive_seed(seed, size), static_cast<std::uint64_t>(r)));
        std::shuffle(idx.begin(), idx.end(), rng);
        for (std::size_t i = 0; i < size; ++i) subset.push_back(val_pool[idx[i]]);
      }
      const Real tau = calibrate_threshold(std::move(subset), k);
      const Real achieved = hard_fraction(test_scores, tau);
      row.tau_val += tau;
      row.abs_dev += std::abs(tau - tau_ref);
      row.max_abs_dev = std::max(row.max_abs_dev, std::abs(tau - tau_ref));
      row.achieved_hard_fraction += achieved;
      row.hard_fraction_error += std::abs(achieved - k);
    }
    row.tau_val /= draws;
    row.abs_dev /= draws;
    row.achieved_hard_fraction /= draws;
    row.hard_fraction_error /= draws;
    rows.push_back(row);
  }
  return rows;
}

void write_robustness_csv(const std::vector<RobustnessRow>& rows, const std::filesystem::path& file) {
  CsvWriter csv(file, {"val_size", "tau_val", "tau_ref", "abs_dev", "achieved_hard_fraction"});
  for (const auto& r : rows) csv.row(r.val_size, r.tau_val, r.tau_ref, r.abs_dev, r.achieved_hard_fraction);
}

// ---------------------------------------------------------------------------

namespace {

std::vector<Real> average_ranks(const std::vector<Real>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<Real> ranks(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const Real r = (static_cast<Real>(i) + static_cast<Real>(j)) / 2 + 1;
    for (std::size_t t = i; t <= j; ++t) ranks[idx[t]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

SpearmanResult spearman(const std::vector<Real>& a, const std::vector<Real>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("spearman: length mismatch");
  if (a.size() < 3) throw std::invalid_argument("spearman: need at least 3 pairs");
  const auto ra = average_ranks(a), rb = average_ranks(b);
  const Eigen::Map<const Vector> x(ra.data(), static_cast<Index>(ra.size()));
  const Eigen::Map<const Vector> y(rb.data(), static_cast<Index>(rb.size()));
  const Vector dx = x.array() - x.mean(), dy = y.array() - y.mean();
  const Real denom = std::sqrt(dx.squaredNorm() * dy.squaredNorm());
  SpearmanResult out;
  if (denom == 0) return out;
  out.rho = dx.dot(dy) / denom;
  const Real z = out.rho * std::sqrt(static_cast<Real>(a.size() - 1));
  out.p_value = std::erfc(std::abs(z) / std::sqrt(2.0));
  return out;
}

DifficultyReport difficulty_report(const std::vector<SyntheticScene>& scenes, const std::vector<Real>& phi,
                                   std::size_t n_extremes) {
  if (phi.size() != scenes.size()) throw std::invalid_argument("difficulty_report: score count mismatch");
  DifficultyReport rep;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const auto& s = scenes[i];
    DifficultyRow row{s.scene_id, phi[i], static_cast<int>(s.boxes.size()), 0, 0};
    for (std::size_t a = 0; a < s.boxes.size(); ++a) {
      row.mean_size += std::sqrt(s.boxes[a].area()) / s.image_size();
      for (std::size_t b = a + 1; b < s.boxes.size(); ++b) {
        row.max_pair_iou = std::max(row.max_pair_iou, iou(s.boxes[a], s.boxes[b]));
      }
    }
    if (!s.boxes.empty()) row.mean_size /= static_cast<Real>(s.boxes.size());
    rep.rows.push_back(row);
  }
  std::stable_sort(rep.rows.begin(), rep.rows.end(), [](const DifficultyRow& a, const DifficultyRow& b) {
    if (a.phi != b.phi) return a.phi < b.phi;
    return a.scene_id < b.scene_id;
  });
  const std::size_t n = std::min(n_extremes, rep.rows.size());
  rep.easiest.assign(rep.rows.begin(), rep.rows.begin() + static_cast<std::ptrdiff_t>(n));
  rep.hardest.assign(rep.rows.end() - static_cast<std::ptrdiff_t>(n), rep.rows.end());
  std::reverse(rep.hardest.begin(), rep.hardest.end());
  if (rep.rows.size() >= 3) {
    std::vector<Real> p, c;
    for (const auto& r : rep.rows) {
      p.push_back(r.phi);
      c.push_back(r.num_objects);
    }
    rep.phi_vs_count = spearman(p, c);
  }
  return rep;
}

DifficultyReport difficulty_report(const CascadeModel& model, const std::vector<SyntheticScene>& scenes,
                                   std::size_t n_extremes) {
  return difficulty_report(scenes, score_scenes(model, scenes), n_extremes);
}

void write_difficulty_csv(const std::vector<DifficultyRow>& rows, const std::filesystem::path& file) {
  CsvWriter csv(file, {"scene_id", "phi", "num_objects", "mean_size", "max_pair_iou"});
  for (const auto& r : rows) csv.row(r.scene_id, r.phi, r.num_objects, r.mean_size, r.max_pair_iou);
}

}  // namespace dydet
