#include "dydet/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "dydet/csv.hpp"
#include "dydet/rng.hpp"

namespace dydet {

TrainConfig TrainConfig::router_defaults() {
  TrainConfig c;
  c.epochs = 2;
  c.batch_size = 1;
  c.lr = 1e-5;
  c.weight_decay = 5e-3;
  c.optimizer = OptimizerKind::kAdamW;
  return c;
}

TrainConfig TrainConfig::detector_defaults() {
  TrainConfig c;
  c.epochs = 4;
  c.batch_size = 4;
  c.lr = 2e-3;
  c.weight_decay = 1e-4;
  c.optimizer = OptimizerKind::kAdamW;
  return c;
}

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("train config: epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("train config: batch_size must be >= 1");
  if (!(lr > 0)) throw std::invalid_argument("train config: lr must be > 0");
  if (weight_decay < 0) throw std::invalid_argument("train config: weight_decay must be >= 0");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"lr", c.lr},
                     {"weight_decay", c.weight_decay},
                     {"seed", c.seed},
                     {"optimizer", c.optimizer == OptimizerKind::kSgd ? "sgd" : "adamw"},
                     {"momentum", c.momentum}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  if (j.contains("epochs")) j.at("epochs").get_to(c.epochs);
  if (j.contains("batch_size")) j.at("batch_size").get_to(c.batch_size);
  if (j.contains("lr")) j.at("lr").get_to(c.lr);
  if (j.contains("weight_decay")) j.at("weight_decay").get_to(c.weight_decay);
  if (j.contains("seed")) j.at("seed").get_to(c.seed);
  if (j.contains("momentum")) j.at("momentum").get_to(c.momentum);
  if (j.contains("optimizer")) {
    const auto name = j.at("optimizer").get<std::string>();
    if (name == "sgd") {
      c.optimizer = OptimizerKind::kSgd;
    } else if (name == "adamw" || name == "adamw-style") {
      c.optimizer = OptimizerKind::kAdamW;
    } else {
      throw std::invalid_argument("unknown optimizer '" + name + "'");
    }
  }
}

// ---------------------------------------------------------------------------

void Optimizer::step(const std::vector<RealLayer*>& layers, const GradMap& grads) {
  ++t_;
  constexpr Real kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  const Real lr = config_.lr, wd = config_.weight_decay;
  const Real bc1 = 1 - std::pow(kBeta1, static_cast<Real>(t_));
  const Real bc2 = 1 - std::pow(kBeta2, static_cast<Real>(t_));
  for (RealLayer* layer : layers) {
    for (auto& [pname, p] : layer->params) {
      const std::string key = layer->name + "." + pname;
      auto& slot = state_[key];
      if (slot.m.size() == 0) {
        slot.m = Vector::Zero(p.size());
        slot.v = Vector::Zero(p.size());
      }
      auto git = grads.find(key);
      const Vector g = git == grads.end() ? Vector::Zero(p.size()) : git->second.data();
      auto& w = p.data();
      if (config_.optimizer == OptimizerKind::kAdamW) {
        slot.m = kBeta1 * slot.m + (1 - kBeta1) * g;
        slot.v = kBeta2 * slot.v + (1 - kBeta2) * g.cwiseAbs2();
        const Vector update =
            (slot.m / bc1).array() / ((slot.v / bc2).array().sqrt() + kEps);
        w -= lr * (update + wd * w);
      } else {
        slot.m = config_.momentum * slot.m + g + wd * w;
        w -= lr * slot.m;
      }
    }
  }
}

std::vector<RealLayer*> detector_layers(CascadeModel& model) {
  std::vector<RealLayer*> out;
  auto add = [&](RealLayer& l) {
    if (!l.params.empty()) out.push_back(&l);
  };
  for_each_layer(model.first, add);
  for_each_layer(model.second, add);
  for_each_layer(model.connection, add);
  return out;
}

std::vector<RealLayer*> router_layers(CascadeModel& model) {
  return {&model.router.fc1, &model.router.fc2};
}

// ---------------------------------------------------------------------------

JointLoss joint_loss(const CascadeModel& model, const SyntheticScene& scene, GradMap* grads) {
  const RealTensor& x = scene.image;
  JointLoss out;
  if (!grads) {
    const MultiScaleFeatures f1 = backbone_forward(model.first, x);
    out.first = detection_loss(head_forward(model.first, f1), scene);
    const MultiScaleFeatures h = composite_connect(model.connection, f1);
    out.second = detection_loss(head_forward(model.second, backbone2_forward(model.second, x, h)), scene);
    return out;
  }
  BackboneTrace bt1, bt2;
  HeadTrace ht1, ht2;
  const MultiScaleFeatures f1 = backbone_forward(model.first, x, &bt1);
  RawPredictions gp1, gp2;
  out.first = detection_loss(head_forward(model.first, f1, &ht1), scene, &gp1);
  const MultiScaleFeatures h = composite_connect(model.connection, f1);
  const MultiScaleFeatures f2 = backbone2_forward(model.second, x, h, &bt2);
  out.second = detection_loss(head_forward(model.second, f2, &ht2), scene, &gp2);

  const MultiScaleFeatures gf2 = head_backward(model.second, ht2, gp2, *grads);
  const MultiScaleFeatures gh = backbone_backward(model.second, bt2, gf2, *grads);
  MultiScaleFeatures gf1 = composite_connect_backward(model.connection, f1, gh, *grads);
  const MultiScaleFeatures gf1_head = head_backward(model.first, ht1, gp1, *grads);
  for (std::size_t l = 0; l < gf1.levels.size(); ++l) gf1.levels[l].data() += gf1_head.levels[l].data();
  backbone_backward(model.first, bt1, gf1, *grads);
  return out;
}

namespace {

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, static_cast<std::uint64_t>(epoch)));
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

void scale(GradMap& grads, Real factor) {
  for (auto& [_, g] : grads) g.data() *= factor;
}

}  // namespace

DetectorTrainLog train_detectors_joint(CascadeModel& model, const std::vector<SyntheticScene>& scenes,
                                       const TrainConfig& config) {
  config.validate();
  if (scenes.empty()) throw std::invalid_argument("train_detectors_joint: empty dataset");
  Optimizer opt(config);
  const auto layers = detector_layers(model);
  DetectorTrainLog log;
  std::int64_t step = 0;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto order = epoch_order(scenes.size(), config.seed, epoch);
    Real epoch_total = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      GradMap grads;
      Real l1 = 0, l2 = 0;
      for (std::size_t i = start; i < end; ++i) {
        const JointLoss jl = joint_loss(model, scenes[order[i]], &grads);
        l1 += jl.first.total;
        l2 += jl.second.total;
      }
      ++step;
      if (!std::isfinite(l1) || !std::isfinite(l2)) throw TrainingDiverged("train-detectors", step);
      const auto count = static_cast<Real>(end - start);
      scale(grads, 1 / count);
      opt.step(layers, grads);
      log.steps.push_back({step, epoch, l1 / count, l2 / count});
      epoch_total += l1 + l2;
    }
    log.epoch_mean_total.push_back(epoch_total / static_cast<Real>(scenes.size()));
  }
  return log;
}

void write_detector_log_csv(const DetectorTrainLog& log, const std::filesystem::path& file) {
  CsvWriter csv(file, {"step", "epoch", "loss1", "loss2", "total"});
  for (const auto& s : log.steps) csv.row(s.step, s.epoch, s.loss1, s.loss2, s.loss1 + s.loss2);
}

// ---------------------------------------------------------------------------

std::vector<BranchRecord> evaluate_branches(const CascadeModel& model,
                                            const std::vector<SyntheticScene>& scenes) {
  std::vector<BranchRecord> out;
  out.reserve(scenes.size());
  for (const auto& scene : scenes) {
    const MultiScaleFeatures f1 = backbone_forward(model.first, scene.image);
    const Real l1 = detection_loss(head_forward(model.first, f1), scene).total;
    const MultiScaleFeatures h = composite_connect(model.connection, f1);
    const Real l2 =
        detection_loss(head_forward(model.second, backbone2_forward(model.second, scene.image, h)), scene)
            .total;
    out.push_back({scene.scene_id, l1, l2, pool_concat(f1), hash_image(scene.image),
                   static_cast<int>(scene.boxes.size())});
  }
  return out;
}

Real lower_median(std::vector<Real> values) {
  if (values.empty()) throw std::invalid_argument("median of an empty set");
  const std::size_t k = (values.size() - 1) / 2;
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(k), values.end());
  return values[k];
}

DeltaOffset calibrate_delta(const std::vector<BranchRecord>& records, std::string dataset_id) {
  if (records.empty()) throw std::invalid_argument("calibrate_delta: empty set");
  std::vector<Real> diffs;
  diffs.reserve(records.size());
  for (const auto& r : records) diffs.push_back(r.loss1 - r.loss2);
  return {lower_median(std::move(diffs)), std::move(dataset_id), records.size()};
}

DeltaOffset calibrate_delta(const CascadeModel& model, const std::vector<SyntheticScene>& scenes,
                            std::string dataset_id) {
  return calibrate_delta(evaluate_branches(model, scenes), std::move(dataset_id));
}

const char* to_string(Strategy s) {
  switch (s) {
    case Strategy::kProposed: return "proposed";
    case Strategy::kUnconstrained: return "unconstrained";
    case Strategy::kLambdaPenalty: return "lambda";
    case Strategy::kRandom: return "random";
    case Strategy::kApBased: return "ap-based";
  }
  return "unknown";
}

Strategy parse_strategy(const std::string& name) {
  if (name == "proposed") return Strategy::kProposed;
  if (name == "unconstrained") return Strategy::kUnconstrained;
  if (name == "lambda" || name == "lambda-penalty") return Strategy::kLambdaPenalty;
  if (name == "random") return Strategy::kRandom;
  if (name == "ap-based") return Strategy::kApBased;
  throw std::invalid_argument("unknown routing strategy '" + name + "'");
}

void AblationConfig::validate() const {
  if (strategy == Strategy::kLambdaPenalty) {
    if (!lambda || *lambda < 0) throw std::invalid_argument("lambda-penalty strategy needs lambda >= 0");
  } else if (lambda) {
    throw std::invalid_argument("lambda is only valid with the lambda-penalty strategy");
  }
}

Real record_score(const CascadeModel& model, const BranchRecord& record) {
  if (model.random_scorer_seed) return RandomScorer{*model.random_scorer_seed}.score_hash(record.image_hash);
  return router_forward(model.router, record.pooled).phi;
}

namespace {

// The linear-in-phi objectives share one form: (1 - phi)(L1 - a) + phi (L2 + b),
// whose gradient is phi' * (L2 + b - L1 + a) = -phi' * (L1 - L2 - (a + b)).
struct LinearObjective {
  Real reward1 = 0;   // a
  Real penalty2 = 0;  // b

  Real value(Real phi, const BranchRecord& r) const {
    return (1 - phi) * (r.loss1 - reward1) + phi * (r.loss2 + penalty2);
  }
  Real coeff(const BranchRecord& r) const { return r.loss1 - r.loss2 - (reward1 + penalty2); }
};

template <typename Grad, typename Value>
std::vector<RouterEpochLog> run_router_training(CascadeModel& model,
                                                const std::vector<BranchRecord>& records,
                                                const TrainConfig& config, Grad&& grad_of,
                                                Value&& value_of) {
  config.validate();
  if (records.empty()) throw std::invalid_argument("train_router: empty training set");
  for (const auto& r : records) {
    if (!std::isfinite(r.loss1) || !std::isfinite(r.loss2)) {
      throw std::invalid_argument("train_router: non-finite detector loss for scene " +
                                  std::to_string(r.scene_id));
    }
  }
  Optimizer opt(config);
  const auto layers = router_layers(model);
  auto summary = [&](int epoch) {
    RouterEpochLog e{epoch, 0, 0};
    for (const auto& r : records) {
      const Real phi = router_forward(model.router, r.pooled).phi;
      e.mean_phi += phi;
      e.mean_loss += value_of(phi, r);
    }
    e.mean_phi /= static_cast<Real>(records.size());
    e.mean_loss /= static_cast<Real>(records.size());
    return e;
  };
  std::vector<RouterEpochLog> log{summary(0)};
  std::int64_t step = 0;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto order = epoch_order(records.size(), config.seed, epoch);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      GradMap grads;
      for (std::size_t i = start; i < end; ++i) {
        const BranchRecord& r = records[order[i]];
        RouterCache cache;
        router_forward(model.router, r.pooled, &cache);
        for (auto& [name, g] : grad_of(cache, r)) {
          auto it = grads.find(name);
          if (it == grads.end()) {
            grads.emplace(name, std::move(g));
          } else {
            it->second.data() += g.data();
          }
        }
      }
      ++step;
      scale(grads, 1 / static_cast<Real>(end - start));
      for (const auto& [_, g] : grads) {
        if (!g.all_finite()) throw TrainingDiverged("train-router", step);
      }
      opt.step(layers, grads);
    }
    log.push_back(summary(epoch));
  }
  return log;
}

std::vector<RouterEpochLog> train_linear_objective(CascadeModel& model,
                                                   const std::vector<BranchRecord>& records,
                                                   const TrainConfig& config, LinearObjective obj) {
  return run_router_training(
      model, records, config,
      [&](const RouterCache& cache, const BranchRecord& r) {
        return router_backward(model.router, cache, obj.coeff(r));
      },
      [&](Real phi, const BranchRecord& r) { return obj.value(phi, r); });
}

}  // namespace

std::vector<RouterEpochLog> train_router(CascadeModel& model, const DeltaOffset& delta,
                                         const std::vector<BranchRecord>& records,
                                         const TrainConfig& config) {
  model.delta = delta.delta;
  model.random_scorer_seed.reset();
  return train_linear_objective(model, records, config, {delta.delta / 2, delta.delta / 2});
}

std::vector<RouterEpochLog> train_router(CascadeModel& model, const DeltaOffset& delta,
                                         const std::vector<SyntheticScene>& scenes,
                                         const TrainConfig& config) {
  return train_router(model, delta, evaluate_branches(model, scenes), config);
}

std::vector<RouterEpochLog> train_router_ablation(CascadeModel& model,
                                                  const std::vector<BranchRecord>& records,
                                                  const AblationConfig& ablation,
                                                  const TrainConfig& config) {
  ablation.validate();
  switch (ablation.strategy) {
    case Strategy::kProposed:
      return train_router(model, calibrate_delta(records), records, config);
    case Strategy::kUnconstrained:
      model.random_scorer_seed.reset();
      return train_linear_objective(model, records, config, {0, 0});
    case Strategy::kLambdaPenalty:
      model.random_scorer_seed.reset();
      return train_linear_objective(model, records, config, {0, *ablation.lambda});
    case Strategy::kRandom: {
      model.random_scorer_seed = config.seed;
      return {};
    }
    case Strategy::kApBased: {
      model.random_scorer_seed.reset();
      const Real gap = calibrate_delta(records).delta;
      auto label = [gap](const BranchRecord& r) { return r.loss1 - r.loss2 > gap ? 1.0 : 0.0; };
      return run_router_training(
          model, records, config,
          [&](const RouterCache& cache, const BranchRecord& r) {
            return router_backward_logit(model.router, cache, cache.phi - label(r));
          },
          [&](Real phi, const BranchRecord& r) {
            const Real y = label(r);
            return -(y * std::log(phi) + (1 - y) * std::log(1 - phi));
          });
    }
  }
  throw std::invalid_argument("unknown routing strategy");
}

void write_router_log_csv(const std::vector<RouterEpochLog>& log, const std::filesystem::path& file) {
  CsvWriter csv(file, {"epoch", "mean_phi", "mean_loss"});
  for (const auto& e : log) csv.row(e.epoch, e.mean_phi, e.mean_loss);
}

std::vector<LossCurveRow> loss_curve_report(const CascadeModel& model, Real delta,
                                            const std::vector<BranchRecord>& records) {
  std::vector<LossCurveRow> rows;
  rows.reserve(records.size());
  for (const auto& r : records) {
    rows.push_back({r.scene_id, r.loss1, r.loss2, r.loss1 - delta / 2, r.loss2 + delta / 2,
                    record_score(model, r)});
  }
  std::stable_sort(rows.begin(), rows.end(), [](const LossCurveRow& a, const LossCurveRow& b) {
    const Real da = a.loss1 - a.loss2, db = b.loss1 - b.loss2;
    if (da != db) return da < db;
    return a.scene_id < b.scene_id;
  });
  return rows;
}

void write_loss_curve_csv(const std::vector<LossCurveRow>& rows, const std::filesystem::path& file) {
  CsvWriter csv(file, {"scene_id", "l1", "l2", "l1_adjusted", "l2_adjusted", "phi"});
  for (const auto& r : rows) {
    csv.row(r.scene_id, r.loss1, r.loss2, r.loss1_adjusted, r.loss2_adjusted, r.phi);
  }
}

}  // namespace dydet
