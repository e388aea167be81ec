#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dydet/loss.hpp"
#include "dydet/model.hpp"

namespace dydet {

enum class OptimizerKind { kSgd, kAdamW };

struct TrainConfig {
  int epochs = 1;
  int batch_size = 1;
  Real lr = 1e-3;
  Real weight_decay = 0;
  std::uint64_t seed = 0;
  OptimizerKind optimizer = OptimizerKind::kAdamW;
  Real momentum = 0.9;  // sgd only

  /// Constant-lr AdamW, lr 1e-5, weight decay 5e-3, batch 1, 2 epochs.
  static TrainConfig router_defaults();
  static TrainConfig detector_defaults();
  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
/// Missing keys keep the values already in `c`.
void from_json(const nlohmann::json& j, TrainConfig& c);

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& phase, std::int64_t step)
      : std::runtime_error(phase + ": non-finite loss at step " + std::to_string(step)), step_(step) {}
  std::int64_t step() const { return step_; }

 private:
  std::int64_t step_;
};

/// SGD with momentum or AdamW with decoupled weight decay; state keyed by
/// gradient name. Layers without a gradient entry see a zero gradient.
class Optimizer {
 public:
  explicit Optimizer(const TrainConfig& config) : config_(config) {}

  void step(const std::vector<RealLayer*>& layers, const GradMap& grads);

 private:
  struct Slot {
    Vector m, v;
  };
  TrainConfig config_;
  std::map<std::string, Slot> state_;
  std::int64_t t_ = 0;
};

std::vector<RealLayer*> detector_layers(CascadeModel& model);
std::vector<RealLayer*> router_layers(CascadeModel& model);

// ---------------------------------------------------------------------------
// Detector phase

struct JointLoss {
  LossBreakdown first;
  LossBreakdown second;
};

/// Both detector losses for one scene; with `grads`, accumulates the gradient
/// of L1 + L2 with respect to B1, D1, G, B2 and D2.
JointLoss joint_loss(const CascadeModel& model, const SyntheticScene& scene, GradMap* grads = nullptr);

struct DetectorStepLog {
  std::int64_t step = 0;
  int epoch = 0;
  Real loss1 = 0, loss2 = 0;  // batch means
};

struct DetectorTrainLog {
  std::vector<DetectorStepLog> steps;
  std::vector<Real> epoch_mean_total;
};

/// Minimises L1 + L2 over the scenes. The router is untouched.
DetectorTrainLog train_detectors_joint(CascadeModel& model, const std::vector<SyntheticScene>& scenes,
                                       const TrainConfig& config);

void write_detector_log_csv(const DetectorTrainLog& log, const std::filesystem::path& file);

// ---------------------------------------------------------------------------
// Router phase (detectors frozen)

/// Frozen-detector quantities the router objective needs for one image.
struct BranchRecord {
  std::uint64_t scene_id = 0;
  Real loss1 = 0, loss2 = 0;  // total detection losses
  Vector pooled;               // router input
  std::uint64_t image_hash = 0;
  int num_objects = 0;
};

std::vector<BranchRecord> evaluate_branches(const CascadeModel& model,
                                            const std::vector<SyntheticScene>& scenes);

/// Smaller of the two middle elements for even lengths.
Real lower_median(std::vector<Real> values);

struct DeltaOffset {
  Real delta = 0;
  std::string dataset_id;
  std::size_t size = 0;
};

DeltaOffset calibrate_delta(const std::vector<BranchRecord>& records, std::string dataset_id = "");
DeltaOffset calibrate_delta(const CascadeModel& model, const std::vector<SyntheticScene>& scenes,
                            std::string dataset_id = "");

enum class Strategy { kProposed, kUnconstrained, kLambdaPenalty, kRandom, kApBased };

const char* to_string(Strategy s);
Strategy parse_strategy(const std::string& name);

struct AblationConfig {
  Strategy strategy = Strategy::kProposed;
  std::optional<Real> lambda;

  void validate() const;
};

struct RouterEpochLog {
  int epoch = 0;  // 0 = before training
  Real mean_phi = 0;
  Real mean_loss = 0;
};

Real record_score(const CascadeModel& model, const BranchRecord& record);

/// Minimises (1 - phi)(L1 - delta/2) + phi (L2 + delta/2) over the router
/// parameters, one step per batch in seeded order. Sets model.delta.
std::vector<RouterEpochLog> train_router(CascadeModel& model, const DeltaOffset& delta,
                                         const std::vector<BranchRecord>& records,
                                         const TrainConfig& config);
std::vector<RouterEpochLog> train_router(CascadeModel& model, const DeltaOffset& delta,
                                         const std::vector<SyntheticScene>& scenes,
                                         const TrainConfig& config);

/// Comparison strategies. unconstrained: (1 - phi) L1 + phi L2; lambda-penalty
/// adds lambda * phi; random installs a seeded uniform scorer (config.seed);
/// ap-based fits BCE to "hard" labels (L1 - L2 above the median gap). The
/// proposed strategy calibrates delta from the records and defers to train_router.
std::vector<RouterEpochLog> train_router_ablation(CascadeModel& model,
                                                  const std::vector<BranchRecord>& records,
                                                  const AblationConfig& ablation,
                                                  const TrainConfig& config);

void write_router_log_csv(const std::vector<RouterEpochLog>& log, const std::filesystem::path& file);

struct LossCurveRow {
  std::uint64_t scene_id = 0;
  Real loss1 = 0, loss2 = 0, loss1_adjusted = 0, loss2_adjusted = 0, phi = 0;
};

/// Rows sorted by L1 - L2 ascending (ties by scene id).
std::vector<LossCurveRow> loss_curve_report(const CascadeModel& model, Real delta,
                                            const std::vector<BranchRecord>& records);
void write_loss_curve_csv(const std::vector<LossCurveRow>& rows, const std::filesystem::path& file);

}  // namespace dydet
