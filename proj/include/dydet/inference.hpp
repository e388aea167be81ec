#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dydet/eval.hpp"
#include "dydet/model.hpp"

namespace dydet {

struct DecodeConfig {
  Real conf_thresh = 0.05;
  Real nms_iou = 0.5;
  std::size_t max_detections = 100;
};

void to_json(nlohmann::json& j, const DecodeConfig& c);
void from_json(const nlohmann::json& j, DecodeConfig& c);

struct RoutingDecision {
  Real phi = 0;
  Real tau = 0;
  Route route = Route::kEasy;
  std::int64_t flops = 0;
  double wall_time = 0;  // seconds
};

/// Easy iff phi <= tau.
inline Route route_for(Real phi, Real tau) { return phi <= tau ? Route::kEasy : Route::kHard; }

struct DynamicResult {
  std::vector<Detection> detections;
  RoutingDecision decision;
};

/// Scores the first pyramid and runs the second detector only when phi > tau.
/// tau may be infinite; NaN is rejected.
DynamicResult infer_dynamic(const CascadeModel& model, Real tau, const RealTensor& x,
                            const DecodeConfig& decode = {});

/// D1(B1(x)) without the router.
std::vector<Detection> infer_first(const CascadeModel& model, const RealTensor& x,
                                   const DecodeConfig& decode = {});
/// D2(B2(x, G(B1(x)))) without the router.
std::vector<Detection> infer_cascade(const CascadeModel& model, const RealTensor& x,
                                     const DecodeConfig& decode = {});

/// Target hard fraction for a latency budget between the two routes.
Real compute_k(Real lat1, Real lat2, Real lat_t);

/// (1 - k)-quantile of the scores with linear interpolation, so that about a
/// fraction k of scores lies strictly above it. k = 1 returns the value just
/// below the minimum.
Real calibrate_threshold(std::vector<Real> scores, Real k);

struct ThresholdCalibration {
  Real k = 0;
  Real tau = 0;
  std::string scores_source;
  std::size_t num_scores = 0;
  Real lat1 = 0, lat2 = 0, lat_t = 0;  // zero when k was given directly
};

void to_json(nlohmann::json& j, const ThresholdCalibration& c);
void from_json(const nlohmann::json& j, ThresholdCalibration& c);

/// Difficulty scores of a scene set (learned router or random scorer).
std::vector<Real> score_scenes(const CascadeModel& model, const std::vector<SyntheticScene>& scenes);

// ---------------------------------------------------------------------------
// Trade-off sweep

/// Latency is either derived from MACs at a fixed throughput (reproducible)
/// or measured as the median wall time of each route.
struct LatencyModel {
  enum class Mode { kAnalytic, kMeasured } mode = Mode::kAnalytic;
  Real macs_per_ms = 1e6;
  int timed_runs = 100;  // measured mode, per route
};

void to_json(nlohmann::json& j, const LatencyModel& c);
void from_json(const nlohmann::json& j, LatencyModel& c);

struct RouteLatency {
  Real easy_ms = 0;
  Real hard_ms = 0;
};

/// Per-route latency; measured mode times the routes on `probe`.
RouteLatency route_latency(const CascadeModel& model, const LatencyModel& latency,
                           const RealTensor& probe);

struct TradeOffPoint {
  Real k = 0;
  Real tau = 0;
  Real ap = 0;
  Real mean_flops = 0;
  Real mean_latency_ms = 0;
  Real hard_fraction = 0;
  std::int64_t hard_count = 0;
  std::int64_t total_flops = 0;
};

/// Both routes' outputs for an eval set, computed once so a sweep can pick per
/// threshold without rerunning the detectors.
struct RouteOutcomes {
  std::vector<Real> phi;
  std::vector<std::vector<Detection>> easy;
  std::vector<std::vector<Detection>> hard;
  std::vector<GroundTruth> truths;
  std::int64_t flops_easy = 0;
  std::int64_t flops_hard = 0;
};

RouteOutcomes evaluate_routes(const CascadeModel& model, const std::vector<SyntheticScene>& scenes,
                              const DecodeConfig& decode = {});

/// Detections of every image when routed with tau.
std::vector<std::vector<Detection>> select_routes(const RouteOutcomes& outcomes, Real tau);

/// One row per k (sorted ascending). tau comes from the validation scores,
/// except k = 0 and k = 1 which use +inf and -inf so the rows reproduce the
/// single detector and the full cascade exactly.
std::vector<TradeOffPoint> sweep_tradeoff(const RouteOutcomes& outcomes,
                                          const std::vector<Real>& val_scores,
                                          std::vector<Real> k_list, int num_classes,
                                          const RouteLatency& latency);
/// Threshold for k used by the sweep.
Real sweep_threshold(const std::vector<Real>& val_scores, Real k);

void write_sweep_csv(const std::vector<TradeOffPoint>& rows, const std::filesystem::path& file);

// ---------------------------------------------------------------------------
// Threshold robustness

struct RobustnessRow {
  std::size_t val_size = 0;
  Real tau_val = 0;   // mean over resamples
  Real tau_ref = 0;   // threshold from the full test scores
  Real abs_dev = 0;   // mean |tau_val - tau_ref|
  Real achieved_hard_fraction = 0;  // mean over resamples
  Real max_abs_dev = 0;
  Real hard_fraction_error = 0;  // mean |achieved - k|
};

/// For each size, draws `resamples` subsets (without replacement) from the
/// validation pool, calibrates tau and applies it to the test scores. A size
/// equal to the pool uses the pool as-is.
std::vector<RobustnessRow> threshold_robustness(const std::vector<Real>& val_pool,
                                                const std::vector<std::size_t>& sizes, Real k,
                                                const std::vector<Real>& test_scores,
                                                int resamples, std::uint64_t seed);

void write_robustness_csv(const std::vector<RobustnessRow>& rows, const std::filesystem::path& file);

Real hard_fraction(const std::vector<Real>& scores, Real tau);

// ---------------------------------------------------------------------------
// Difficulty report

struct DifficultyRow {
  std::uint64_t scene_id = 0;
  Real phi = 0;
  int num_objects = 0;
  Real mean_size = 0;     // mean sqrt(w h) over the image side
  Real max_pair_iou = 0;
};

struct SpearmanResult {
  Real rho = 0;
  Real p_value = 1;  // two-sided, normal approximation
};

/// Rank correlation with average ranks for ties.
SpearmanResult spearman(const std::vector<Real>& a, const std::vector<Real>& b);

struct DifficultyReport {
  std::vector<DifficultyRow> rows;  // phi ascending, ties by scene id
  std::vector<DifficultyRow> easiest;
  std::vector<DifficultyRow> hardest;
  SpearmanResult phi_vs_count;
};

DifficultyReport difficulty_report(const std::vector<SyntheticScene>& scenes,
                                   const std::vector<Real>& phi, std::size_t n_extremes);
DifficultyReport difficulty_report(const CascadeModel& model, const std::vector<SyntheticScene>& scenes,
                                   std::size_t n_extremes);

void write_difficulty_csv(const std::vector<DifficultyRow>& rows, const std::filesystem::path& file);

}  // namespace dydet
