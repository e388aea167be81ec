#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>

#include "doctest.h"
#include "dydet/rng.hpp"
#include "dydet/training.hpp"
#include "test_util.hpp"

using namespace dydet;
using dydet::testing::scratch_dir;

namespace {

ArchConfig small_arch() {
  ArchConfig a;
  a.image_size = 32;
  return a;
}

SceneConfig small_scenes() {
  SceneConfig s;
  s.image_size = 32;
  return s;
}

std::vector<Vector> snapshot(const std::vector<RealLayer*>& layers) {
  std::vector<Vector> out;
  for (auto* l : layers)
    for (const auto& [_, p] : l->params) out.push_back(p.data());
  return out;
}

bool same(const std::vector<Vector>& a, const std::vector<Vector>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].size() != b[i].size() || a[i] != b[i]) return false;
  }
  return true;
}

// Synthetic frozen-detector records with random router inputs.
std::vector<BranchRecord> fake_records(Index width, std::size_t n, std::uint64_t seed,
                                       const std::function<std::pair<Real, Real>(std::size_t, const Vector&)>& losses) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<Real> g(0.0, 1.0);
  std::vector<BranchRecord> out;
  for (std::size_t i = 0; i < n; ++i) {
    BranchRecord r;
    r.scene_id = i;
    r.pooled = Vector(width);
    for (Index j = 0; j < width; ++j) r.pooled[j] = g(rng);
    std::tie(r.loss1, r.loss2) = losses(i, r.pooled);
    r.image_hash = splitmix64(seed + i);
    out.push_back(std::move(r));
  }
  return out;
}

Real mean_total(const CascadeModel& m, const std::vector<SyntheticScene>& scenes) {
  Real sum = 0;
  for (const auto& s : scenes) {
    const auto l = joint_loss(m, s);
    sum += l.first.total + l.second.total;
  }
  return sum / static_cast<Real>(scenes.size());
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

}  // namespace

TEST_CASE("train config validation and json") {
  TrainConfig c = TrainConfig::router_defaults();
  CHECK(c.lr == 1e-5);
  CHECK(c.weight_decay == 5e-3);
  CHECK(c.batch_size == 1);
  CHECK(c.epochs == 2);
  CHECK(c.optimizer == OptimizerKind::kAdamW);
  c.lr = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = TrainConfig::router_defaults();
  c.epochs = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);

  TrainConfig d = TrainConfig::detector_defaults();
  d.optimizer = OptimizerKind::kSgd;
  d.seed = 42;
  nlohmann::json j = d;
  TrainConfig back;
  from_json(j, back);
  CHECK(nlohmann::json(back) == j);
}

TEST_CASE("one epoch with batch 1 logs one step per image") {
  const auto scenes = generate_scenes(small_scenes(), 7, 3);
  auto m = make_cascade(small_arch(), 1);
  TrainConfig c = TrainConfig::detector_defaults();
  c.epochs = 1;
  c.batch_size = 1;
  const auto log = train_detectors_joint(m, scenes, c);
  REQUIRE(log.steps.size() == 7);
  for (std::size_t i = 0; i < 7; ++i) {
    CHECK(log.steps[i].step == static_cast<std::int64_t>(i + 1));
    CHECK(log.steps[i].epoch == 1);
  }
  CHECK(log.epoch_mean_total.size() == 1);

  auto m2 = make_cascade(small_arch(), 1);
  c.batch_size = 3;
  CHECK(train_detectors_joint(m2, scenes, c).steps.size() == 3);

  const auto dir = scratch_dir("detlog");
  std::filesystem::create_directories(dir);
  write_detector_log_csv(log, dir / "log.csv");
  std::ifstream is(dir / "log.csv");
  std::string header;
  std::getline(is, header);
  CHECK(header == "step,epoch,loss1,loss2,total");
}

TEST_CASE("detector training is deterministic") {
  const auto scenes = generate_scenes(small_scenes(), 12, 5);
  TrainConfig c = TrainConfig::detector_defaults();
  c.epochs = 2;
  c.seed = 9;
  const auto dir = scratch_dir("det_determinism");
  std::filesystem::create_directories(dir);
  for (int run = 0; run < 2; ++run) {
    auto m = make_cascade(small_arch(), 4);
    train_detectors_joint(m, scenes, c);
    save_checkpoint(m, dir / ("run" + std::to_string(run) + ".ckpt"));
  }
  CHECK(slurp(dir / "run0.ckpt") == slurp(dir / "run1.ckpt"));
}

TEST_CASE("detector training leaves the router alone") {
  const auto scenes = generate_scenes(small_scenes(), 4, 5);
  auto m = make_cascade(small_arch(), 4);
  const auto before = snapshot(router_layers(m));
  TrainConfig c = TrainConfig::detector_defaults();
  c.epochs = 1;
  train_detectors_joint(m, scenes, c);
  CHECK(same(before, snapshot(router_layers(m))));
}

TEST_CASE("non-finite loss aborts with the step index") {
  auto scenes = generate_scenes(small_scenes(), 1, 5);
  scenes[0].image[10] = std::numeric_limits<Real>::quiet_NaN();
  auto m = make_cascade(small_arch(), 4);
  TrainConfig c = TrainConfig::detector_defaults();
  c.batch_size = 1;
  try {
    train_detectors_joint(m, scenes, c);
    FAIL("expected divergence");
  } catch (const TrainingDiverged& e) {
    CHECK(e.step() == 1);
  }
  CHECK_THROWS_AS(train_detectors_joint(m, {}, c), std::invalid_argument);
}

TEST_CASE("joint training lowers the mean total loss on 500 default scenes") {
  const auto scenes = generate_scenes(SceneConfig{}, 500, 11);
  auto m = make_cascade(ArchConfig{}, 2);
  const Real initial = mean_total(m, scenes);
  const auto log = train_detectors_joint(m, scenes, TrainConfig::detector_defaults());
  const Real final_loss = mean_total(m, scenes);
  MESSAGE("mean total loss " << initial << " -> " << final_loss);
  CHECK(final_loss < initial);
  CHECK(log.epoch_mean_total.back() < log.epoch_mean_total.front());
}

TEST_CASE("lower median") {
  CHECK(lower_median({1, 2, 3}) == 2);
  CHECK(lower_median({4, 1, 3, 2}) == 2);
  CHECK(lower_median({5}) == 5);
  CHECK_THROWS_AS(lower_median({}), std::invalid_argument);
}

TEST_CASE("delta is the lower median of the loss gaps") {
  const std::vector<Real> gaps{3, 1, 4, 2};
  const auto records = fake_records(56, gaps.size(), 1, [&](std::size_t i, const Vector&) {
    return std::pair<Real, Real>{10 + gaps[i], 10};
  });
  const auto d = calibrate_delta(records, "fake");
  CHECK(d.delta == doctest::Approx(2).epsilon(1e-12));
  CHECK(d.size == 4);
  CHECK(d.dataset_id == "fake");
  CHECK_THROWS_AS(calibrate_delta(std::vector<BranchRecord>{}), std::invalid_argument);
}

TEST_CASE("identical detectors and a zero connection give delta 0") {
  auto m = make_cascade(small_arch(), 6);
  std::vector<RealLayer*> a, b;
  for_each_layer(m.first, [&](RealLayer& l) {
    if (!l.params.empty()) a.push_back(&l);
  });
  for_each_layer(m.second, [&](RealLayer& l) {
    if (!l.params.empty()) b.push_back(&l);
  });
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (auto& [name, p] : b[i]->params) {
      REQUIRE(p.shape() == a[i]->params.at(name).shape());
      p = a[i]->params.at(name);
    }
  }
  for_each_layer(m.connection, [](RealLayer& l) {
    for (auto& [_, p] : l.params) p.data().setZero();
  });
  const auto records = evaluate_branches(m, generate_scenes(small_scenes(), 9, 2));
  for (const auto& r : records) CHECK(r.loss1 == r.loss2);
  CHECK(calibrate_delta(records).delta == 0);
}

TEST_CASE("router is unchanged when every coefficient is zero") {
  auto m = make_cascade(ArchConfig{}, 3);
  const auto records = fake_records(m.router.input_width(), 20, 4, [](std::size_t i, const Vector&) {
    return std::pair<Real, Real>{2.75, 2.5};
  });
  // L1 - L2 is the constant 0.25, so delta = 0.25 and L1 - L2 - delta = 0.
  TrainConfig c = TrainConfig::router_defaults();
  c.weight_decay = 0;
  c.epochs = 3;
  c.lr = 1e-2;
  const auto before = snapshot(router_layers(m));
  train_router(m, calibrate_delta(records), records, c);
  CHECK(same(before, snapshot(router_layers(m))));
}

TEST_CASE("router training freezes the detectors and connection") {
  const auto scenes = generate_scenes(small_scenes(), 6, 8);
  auto m = make_cascade(small_arch(), 3);
  const auto records = evaluate_branches(m, scenes);
  const auto before = snapshot(detector_layers(m));
  const auto router_before = snapshot(router_layers(m));
  TrainConfig c = TrainConfig::router_defaults();
  c.lr = 1e-2;
  train_router(m, calibrate_delta(records), records, c);
  CHECK(same(before, snapshot(detector_layers(m))));
  CHECK_FALSE(same(router_before, snapshot(router_layers(m))));
  // Records computed after training match the frozen ones.
  const auto again = evaluate_branches(m, scenes);
  for (std::size_t i = 0; i < records.size(); ++i) {
    CHECK(again[i].loss1 == records[i].loss1);
    CHECK(again[i].loss2 == records[i].loss2);
  }
}

TEST_CASE("one full-batch sgd step follows the finite-difference gradient") {
  auto m = make_cascade(ArchConfig{}, 3);
  const Index d = m.router.input_width();
  const auto records = fake_records(d, 16, 12, [](std::size_t, const Vector& p) {
    return std::pair<Real, Real>{1.0 + 0.3 * p[0] + 0.1 * p[1] * p[1], 0.9 - 0.2 * p[2]};
  });
  const auto delta = calibrate_delta(records);
  auto objective = [&](const RouterParams& r) {
    Real sum = 0;
    for (const auto& rec : records) {
      const Real phi = router_forward(r, rec.pooled).phi;
      sum += (1 - phi) * (rec.loss1 - delta.delta / 2) + phi * (rec.loss2 + delta.delta / 2);
    }
    return sum / static_cast<Real>(records.size());
  };

  TrainConfig c;
  c.optimizer = OptimizerKind::kSgd;
  c.momentum = 0;
  c.weight_decay = 0;
  c.lr = 1e-3;
  c.batch_size = static_cast<int>(records.size());
  c.epochs = 1;
  const RouterParams start = m.router;
  train_router(m, delta, records, c);

  Real worst = 0;
  RouterParams probe = start;
  for (auto [layer, moved, orig] : {std::tuple{&probe.fc1, &m.router.fc1, &start.fc1},
                                    std::tuple{&probe.fc2, &m.router.fc2, &start.fc2}}) {
    for (auto& [name, p] : layer->params) {
      const Vector step = (orig->params.at(name).data() - moved->params.at(name).data()) / c.lr;
      for (Index i = 0; i < p.size(); i += std::max<Index>(1, p.size() / 40)) {
        const Real h = 1e-6, saved = p[i];
        p[i] = saved + h;
        const Real up = objective(probe);
        p[i] = saved - h;
        const Real down = objective(probe);
        p[i] = saved;
        const Real fd = (up - down) / (2 * h);
        worst = std::max(worst, std::abs(fd - step[i]) / std::max({std::abs(fd), std::abs(step[i]), 1e-8}));
      }
    }
  }
  MESSAGE("worst relative error " << worst);
  CHECK(worst < 1e-4);
}

TEST_CASE("router training is deterministic under a fixed seed") {
  auto run = [](std::uint64_t seed) {
    auto m = make_cascade(ArchConfig{}, 3);
    const auto records = fake_records(m.router.input_width(), 30, 2, [](std::size_t i, const Vector& p) {
      return std::pair<Real, Real>{1 + p[0] * 0.5, 1 - static_cast<Real>(i % 3) * 0.1};
    });
    TrainConfig c = TrainConfig::router_defaults();
    c.lr = 1e-3;
    c.seed = seed;
    train_router(m, calibrate_delta(records), records, c);
    return snapshot(router_layers(m));
  };
  CHECK(same(run(5), run(5)));
  CHECK_FALSE(same(run(5), run(6)));
}

TEST_CASE("router log has one entry per epoch plus the start") {
  auto m = make_cascade(ArchConfig{}, 3);
  const auto records = fake_records(m.router.input_width(), 10, 2, [](std::size_t, const Vector& p) {
    return std::pair<Real, Real>{1 + p[0], 1};
  });
  TrainConfig c = TrainConfig::router_defaults();
  c.epochs = 3;
  const auto log = train_router(m, calibrate_delta(records), records, c);
  REQUIRE(log.size() == 4);
  for (int e = 0; e < 4; ++e) CHECK(log[e].epoch == e);
  const auto dir = scratch_dir("routerlog");
  std::filesystem::create_directories(dir);
  write_router_log_csv(log, dir / "router.csv");
  std::ifstream is(dir / "router.csv");
  std::string header;
  std::getline(is, header);
  CHECK(header == "epoch,mean_phi,mean_loss");
}

TEST_CASE("strategy parsing and ablation validation") {
  CHECK(parse_strategy("proposed") == Strategy::kProposed);
  CHECK(parse_strategy("unconstrained") == Strategy::kUnconstrained);
  CHECK(parse_strategy("lambda") == Strategy::kLambdaPenalty);
  CHECK(parse_strategy("lambda-penalty") == Strategy::kLambdaPenalty);
  CHECK(parse_strategy("random") == Strategy::kRandom);
  CHECK(parse_strategy("ap-based") == Strategy::kApBased);
  CHECK_THROWS_AS(parse_strategy("median"), std::invalid_argument);

  CHECK_THROWS_AS((AblationConfig{Strategy::kLambdaPenalty, std::nullopt}.validate()), std::invalid_argument);
  CHECK_THROWS_AS((AblationConfig{Strategy::kLambdaPenalty, -1.0}.validate()), std::invalid_argument);
  CHECK_THROWS_AS((AblationConfig{Strategy::kProposed, 0.5}.validate()), std::invalid_argument);
  CHECK_NOTHROW((AblationConfig{Strategy::kLambdaPenalty, 0.0}.validate()));
}

TEST_CASE("unconstrained objective drives phi toward 1 when the second detector always wins") {
  auto m = make_cascade(ArchConfig{}, 3);
  const auto records = fake_records(m.router.input_width(), 64, 3, [](std::size_t i, const Vector& p) {
    const Real l2 = 1 + 0.1 * std::abs(p[0]);
    return std::pair<Real, Real>{l2 + 0.2 + 0.01 * static_cast<Real>(i % 5), l2};
  });
  TrainConfig c = TrainConfig::router_defaults();
  c.lr = 1e-3;
  c.epochs = 12;
  const auto log = train_router_ablation(m, records, {Strategy::kUnconstrained, std::nullopt}, c);
  REQUIRE(log.size() == 13);
  for (std::size_t e = 1; e < log.size(); ++e) CHECK(log[e].mean_phi > log[e - 1].mean_phi);
  MESSAGE("mean phi " << log.front().mean_phi << " -> " << log.back().mean_phi);
  CHECK(log.back().mean_phi > 0.9);
}

TEST_CASE("lambda 0 reproduces the unconstrained trajectory") {
  auto records_for = [](const CascadeModel& m) {
    return fake_records(m.router.input_width(), 20, 8, [](std::size_t, const Vector& p) {
      return std::pair<Real, Real>{1 + 0.4 * p[3], 1 - 0.2 * p[4]};
    });
  };
  TrainConfig c = TrainConfig::router_defaults();
  c.lr = 1e-3;
  c.epochs = 3;
  auto a = make_cascade(ArchConfig{}, 1), b = make_cascade(ArchConfig{}, 1);
  const auto la = train_router_ablation(a, records_for(a), {Strategy::kUnconstrained, std::nullopt}, c);
  const auto lb = train_router_ablation(b, records_for(b), {Strategy::kLambdaPenalty, 0.0}, c);
  REQUIRE(la.size() == lb.size());
  for (std::size_t i = 0; i < la.size(); ++i) {
    CHECK(la[i].mean_phi == lb[i].mean_phi);
    CHECK(la[i].mean_loss == lb[i].mean_loss);
  }
  CHECK(same(snapshot(router_layers(a)), snapshot(router_layers(b))));
}

TEST_CASE("lambda penalty lowers the hard fraction") {
  auto records_for = [](const CascadeModel& m) {
    return fake_records(m.router.input_width(), 40, 8, [](std::size_t, const Vector& p) {
      return std::pair<Real, Real>{1 + 0.3 * p[0], 1};
    });
  };
  TrainConfig c = TrainConfig::router_defaults();
  c.lr = 1e-3;
  c.epochs = 5;
  auto a = make_cascade(ArchConfig{}, 1), b = make_cascade(ArchConfig{}, 1);
  const auto la = train_router_ablation(a, records_for(a), {Strategy::kLambdaPenalty, 0.0}, c);
  const auto lb = train_router_ablation(b, records_for(b), {Strategy::kLambdaPenalty, 1.0}, c);
  CHECK(lb.back().mean_phi < la.back().mean_phi);
}

TEST_CASE("random strategy installs a reproducible scorer") {
  auto m1 = make_cascade(ArchConfig{}, 1), m2 = make_cascade(ArchConfig{}, 1), m3 = make_cascade(ArchConfig{}, 1);
  const auto records = fake_records(m1.router.input_width(), 50, 2, [](std::size_t, const Vector&) {
    return std::pair<Real, Real>{1, 1};
  });
  TrainConfig c = TrainConfig::router_defaults();
  c.seed = 77;
  train_router_ablation(m1, records, {Strategy::kRandom, std::nullopt}, c);
  train_router_ablation(m2, records, {Strategy::kRandom, std::nullopt}, c);
  c.seed = 78;
  train_router_ablation(m3, records, {Strategy::kRandom, std::nullopt}, c);
  REQUIRE(m1.random_scorer_seed);
  int differ = 0, hard = 0;
  for (const auto& r : records) {
    const Real s1 = record_score(m1, r);
    CHECK(s1 == record_score(m2, r));
    if (s1 != record_score(m3, r)) ++differ;
    if (s1 > 0.5) ++hard;
  }
  CHECK(differ == 50);
  CHECK(hard > 10);
  CHECK(hard < 40);
}

TEST_CASE("ap-based strategy separates images with a large loss gain") {
  auto m = make_cascade(ArchConfig{}, 3);
  const auto records = fake_records(m.router.input_width(), 80, 5, [](std::size_t, const Vector& p) {
    return std::pair<Real, Real>{1 + 0.5 * p[0], 1};
  });
  std::vector<Real> gaps;
  for (const auto& r : records) gaps.push_back(r.loss1 - r.loss2);
  const Real gap = lower_median(gaps);
  TrainConfig c = TrainConfig::router_defaults();
  c.lr = 3e-3;
  c.epochs = 10;
  const auto log = train_router_ablation(m, records, {Strategy::kApBased, std::nullopt}, c);
  CHECK(log.back().mean_loss < log.front().mean_loss);
  Real hard_phi = 0, easy_phi = 0;
  int nh = 0;
  for (const auto& r : records) {
    const Real phi = record_score(m, r);
    if (r.loss1 - r.loss2 > gap) {
      hard_phi += phi;
      ++nh;
    } else {
      easy_phi += phi;
    }
  }
  CHECK(nh == 40);
  CHECK(hard_phi / nh > easy_phi / (80 - nh));
}

TEST_CASE("loss curve report") {
  auto m = make_cascade(ArchConfig{}, 3);
  const auto records = fake_records(m.router.input_width(), 25, 5, [](std::size_t i, const Vector& p) {
    return std::pair<Real, Real>{1 + p[0], 1 + 0.01 * static_cast<Real>(i)};
  });
  const auto raw = loss_curve_report(m, 0, records);
  REQUIRE(raw.size() == records.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    CHECK(raw[i].loss1_adjusted == raw[i].loss1);
    CHECK(raw[i].loss2_adjusted == raw[i].loss2);
    if (i > 0) CHECK(raw[i - 1].loss1 - raw[i - 1].loss2 <= raw[i].loss1 - raw[i].loss2);
  }
  const auto adj = loss_curve_report(m, 0.5, records);
  for (const auto& r : adj) {
    CHECK(r.loss1_adjusted == doctest::Approx(r.loss1 - 0.25));
    CHECK(r.loss2_adjusted == doctest::Approx(r.loss2 + 0.25));
    CHECK(r.phi == record_score(m, records[r.scene_id]));
  }
  const auto dir = scratch_dir("losscurve");
  std::filesystem::create_directories(dir);
  write_loss_curve_csv(adj, dir / "curve.csv");
  std::ifstream is(dir / "curve.csv");
  std::string line;
  std::getline(is, line);
  CHECK(line == "scene_id,l1,l2,l1_adjusted,l2_adjusted,phi");
  std::size_t rows = 0;
  while (std::getline(is, line)) ++rows;
  CHECK(rows == records.size());
}
