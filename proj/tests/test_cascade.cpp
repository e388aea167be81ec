#include <cmath>
#include <fstream>

#include "doctest.h"
#include "dydet/loss.hpp"
#include "dydet/model.hpp"
#include "dydet/training.hpp"
#include "test_util.hpp"

using namespace dydet;
using dydet::testing::param_layers;
using dydet::testing::params_gradient_error;
using dydet::testing::random_tensor;

namespace {

SyntheticScene one_object_scene(int image_size, Box box, int cls) {
  SyntheticScene s;
  s.image = RealTensor({1, image_size, image_size});
  s.boxes = {box};
  s.classes = {cls};
  s.requested_objects = 1;
  return s;
}

RawPredictions constant_predictions(const ArchConfig& arch, Real value) {
  RawPredictions p;
  for (int l = 0; l < arch.levels; ++l) {
    p.levels.push_back(RealTensor::constant({arch.head_outputs(), arch.level_side(l), arch.level_side(l)}, value));
  }
  return p;
}

void zero_biases(DetectorParams& d) {
  for_each_layer(d, [](RealLayer& l) {
    if (auto it = l.params.find("bias"); it != l.params.end()) it->second.data().setZero();
  });
}

void zero_all(DetectorParams& d) {
  for_each_layer(d, [](RealLayer& l) {
    for (auto& [_, p] : l.params) p.data().setZero();
  });
}

Real inv_sigmoid(Real p) { return std::log(p / (1 - p)); }

}  // namespace

TEST_CASE("pyramid shapes at the default architecture") {
  const auto m = make_cascade(ArchConfig{}, 1);
  const auto f = backbone_forward(m.first, random_tensor({1, 64, 64}, 2));
  REQUIRE(f.levels.size() == 3);
  CHECK(f.levels[0].shape() == Shape{8, 16, 16});
  CHECK(f.levels[1].shape() == Shape{16, 8, 8});
  CHECK(f.levels[2].shape() == Shape{32, 4, 4});
  CHECK_NOTHROW(f.validate());
}

TEST_CASE("zero image with zero biases gives zero features") {
  auto m = make_cascade(ArchConfig{}, 3);
  zero_biases(m.first);
  const auto f = backbone_forward(m.first, RealTensor({1, 64, 64}));
  for (const auto& level : f.levels) CHECK(level.data().cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("backbone rejects wrong image shapes") {
  const auto m = make_cascade(ArchConfig{}, 3);
  CHECK_THROWS_AS(backbone_forward(m.first, RealTensor({2, 64, 64})), ShapeError);
  CHECK_THROWS_AS(backbone_forward(m.first, RealTensor({64, 64})), ShapeError);
}

TEST_CASE("pyramid validation") {
  MultiScaleFeatures f{{RealTensor({8, 4, 4}), RealTensor({8, 2, 2})}};
  CHECK_THROWS_AS(f.validate(), ShapeError);
  f = {{RealTensor({8, 4, 4}), RealTensor({16, 4, 4})}};
  CHECK_THROWS_AS(f.validate(), ShapeError);
  f = {{RealTensor({8, 4, 4}), RealTensor({16, 2, 2})}};
  CHECK_NOTHROW(f.validate());
}

TEST_CASE("backbone gradient of the deepest-level sum") {
  auto m = make_cascade(ArchConfig{}, 4);
  const auto x = random_tensor({1, 64, 64}, 5, 0.5);
  auto probe = [&] { return backbone_forward(m.first, x).levels.back().data().sum(); };
  BackboneTrace trace;
  const auto f = backbone_forward(m.first, x, &trace);
  MultiScaleFeatures g;
  for (const auto& level : f.levels) g.levels.emplace_back(level.shape());
  g.levels.back().data().setOnes();
  GradMap grads;
  backbone_backward(m.first, trace, g, grads);
  std::vector<RealLayer*> layers;
  for (auto* l : param_layers(m.first)) {
    if (l->name.find("head") == std::string::npos) layers.push_back(l);
  }
  // The full-resolution stem has ~10^5 ReLUs, so steps of 1e-5 already cross
  // kinks; 1e-6 keeps the central difference on one linear piece.
  CHECK(params_gradient_error(probe, layers, grads, 1e-6, 12, 6) < 1e-4);
}

TEST_CASE("composite connection with zero weights is all zero") {
  auto m = make_cascade(ArchConfig{}, 7);
  for_each_layer(m.connection, [](RealLayer& l) { l.params.at("weight").data().setZero(); });
  const auto h = composite_connect(m.connection, backbone_forward(m.first, random_tensor({1, 64, 64}, 8)));
  for (const auto& level : h.levels) CHECK(level.data().cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("single-level identity connection returns f1") {
  const ArchConfig arch{32, 1, 4, 3, 8};
  auto g = make_connection(arch, "g");
  REQUIRE(g.projections.size() == 1);
  g.projections[0][0].params.at("weight").matrix().setIdentity();
  const MultiScaleFeatures f1{{random_tensor({4, 8, 8}, 9)}};
  CHECK(composite_connect(g, f1) == f1);
}

TEST_CASE("two-level connection on a hand-built pyramid") {
  // Level 1: 1 channel at 2x2; level 2: 2 channels at 1x1.
  CompositeConnectionParams g;
  g.projections.resize(2);
  g.projections[0].push_back(make_linear<Real>("g.to1.from1", 1, 1, false));
  g.projections[0].push_back(make_linear<Real>("g.to1.from2", 2, 1, false));
  g.projections[1].push_back(make_linear<Real>("g.to2.from2", 2, 2, false));
  g.projections[0][0].params.at("weight")[0] = 2;
  g.projections[0][1].params.at("weight").data() << 1, -1;
  g.projections[1][0].params.at("weight").data() << 1, 0, 1, 1;
  MultiScaleFeatures f1;
  f1.levels.push_back(RealTensor({1, 2, 2}, (Vector(4) << 1, 2, 3, 4).finished()));
  f1.levels.push_back(RealTensor({2, 1, 1}, (Vector(2) << 5, 3).finished()));
  const auto h = composite_connect(g, f1);
  // to1 = 2 * f1^1 + upsample(5 - 3); to2 = [5, 8].
  CHECK(h.levels[0] == RealTensor({1, 2, 2}, (Vector(4) << 4, 6, 8, 10).finished()));
  CHECK(h.levels[1] == RealTensor({2, 1, 1}, (Vector(2) << 5, 8).finished()));
}

TEST_CASE("zero composite input leaves the second backbone unchanged") {
  auto m = make_cascade(ArchConfig{}, 10);
  const auto x = random_tensor({1, 64, 64}, 11);
  MultiScaleFeatures zero;
  for (const auto& level : backbone_forward(m.second, x).levels) zero.levels.emplace_back(level.shape());
  CHECK(backbone2_forward(m.second, x, zero) == backbone_forward(m.second, x));

  for_each_layer(m.connection, [](RealLayer& l) { l.params.at("weight").data().setZero(); });
  const auto h = composite_connect(m.connection, backbone_forward(m.first, x));
  CHECK(backbone2_forward(m.second, x, h) == backbone_forward(m.second, x));
}

TEST_CASE("zero image propagates only the composite input") {
  const ArchConfig arch{16, 2, 2, 1, 2};
  auto m = make_cascade(arch, 12);
  zero_biases(m.second);
  MultiScaleFeatures h{{random_tensor({2, 4, 4}, 13), random_tensor({4, 2, 2}, 14)}};
  const auto f2 = backbone2_forward(m.second, RealTensor({1, 16, 16}), h);
  // Stage 1 sees zeros, so level 1 is h^1; level 2 is stage 2 applied to h^1, plus h^2.
  CHECK(f2.levels[0] == h.levels[0]);
  const auto& st = m.second.backbone.stages[1];
  RealTensor expected = forward(st[3], forward(st[2], forward(st[1], forward(st[0], h.levels[0]))));
  expected.data() += h.levels[1].data();
  CHECK(f2.levels[1] == expected);
}

TEST_CASE("composite input shape mismatch is rejected") {
  const auto m = make_cascade(ArchConfig{}, 15);
  MultiScaleFeatures h{{RealTensor({8, 16, 16}), RealTensor({16, 4, 4}), RealTensor({32, 4, 4})}};
  CHECK_THROWS_AS(backbone2_forward(m.second, RealTensor({1, 64, 64}), h), ShapeError);
}

TEST_CASE("second backbone gradient of a scalar probe") {
  auto m = make_cascade(ArchConfig{32, 3, 4, 3, 4}, 16);
  const auto x = random_tensor({1, 32, 32}, 17, 0.5);
  const auto h = composite_connect(m.connection, backbone_forward(m.first, x));
  const auto w = random_tensor({16, 2, 2}, 18);
  auto probe = [&] { return backbone2_forward(m.second, x, h).levels.back().data().dot(w.data()); };
  BackboneTrace trace;
  const auto f2 = backbone2_forward(m.second, x, h, &trace);
  MultiScaleFeatures g;
  for (const auto& level : f2.levels) g.levels.emplace_back(level.shape());
  g.levels.back() = w;
  GradMap grads;
  backbone_backward(m.second, trace, g, grads);
  std::vector<RealLayer*> layers;
  for (auto* l : param_layers(m.second)) {
    if (l->name.find("head") == std::string::npos) layers.push_back(l);
  }
  CHECK(params_gradient_error(probe, layers, grads, 1e-5, 16, 19) < 1e-4);
}

TEST_CASE("head with zero parameters predicts zero logits") {
  auto m = make_cascade(ArchConfig{}, 20);
  zero_all(m.first);
  const auto f = backbone_forward(m.first, random_tensor({1, 64, 64}, 21));
  for (const auto& level : head_forward(m.first, f).levels) {
    CHECK(level.data().cwiseAbs().maxCoeff() == 0.0);
    CHECK(detail::sigmoid(level[0]) == 0.5);
  }
}

TEST_CASE("bias-only head gives spatially constant maps") {
  const ArchConfig arch;
  auto m = make_cascade(arch, 22);
  zero_all(m.first);
  for (auto& level : m.first.head.levels) {
    auto& b = level.back().params.at("bias");
    for (Index i = 0; i < b.size(); ++i) b[i] = 0.25 * static_cast<Real>(i) - 1;
  }
  const auto pred = head_forward(m.first, backbone_forward(m.first, random_tensor({1, 64, 64}, 23)));
  for (std::size_t l = 0; l < pred.levels.size(); ++l) {
    const auto& bias = m.first.head.levels[l].back().params.at("bias");
    for (Index c = 0; c < arch.head_outputs(); ++c) {
      CHECK(pred.levels[l].matrix().row(c).minCoeff() == bias[c]);
      CHECK(pred.levels[l].matrix().row(c).maxCoeff() == bias[c]);
    }
  }
}

TEST_CASE("loss through the head matches finite differences") {
  const ArchConfig arch{32, 3, 4, 3, 4};
  auto m = make_cascade(arch, 24);
  SceneConfig sc;
  sc.image_size = 32;
  const auto scene = generate_scene(sc, 25);
  const auto f = backbone_forward(m.first, scene.image);
  auto objective = [&] { return detection_loss(head_forward(m.first, f), scene).total; };
  HeadTrace trace;
  RawPredictions gp;
  detection_loss(head_forward(m.first, f, &trace), scene, &gp);
  GradMap grads;
  head_backward(m.first, trace, gp, grads);
  std::vector<RealLayer*> layers;
  for (auto* l : param_layers(m.first)) {
    if (l->name.find("head") != std::string::npos) layers.push_back(l);
  }
  CHECK(params_gradient_error(objective, layers, grads, 1e-4, 30, 26) < 1e-3);
}

TEST_CASE("empty scene with confident background has near-zero loss") {
  const ArchConfig arch;
  SyntheticScene s;
  s.image = RealTensor({1, 64, 64});
  const auto loss = detection_loss(constant_predictions(arch, -20), s);
  CHECK(loss.total < 1e-8);
  CHECK(loss.box == 0);
  CHECK(loss.classification == 0);
  CHECK(loss.total == loss.objectness + loss.box + loss.classification);
}

TEST_CASE("perfect predictions on a one-object scene") {
  const ArchConfig arch;
  const Box box{21, 13, 14, 10};
  const auto s = one_object_scene(64, box, 2);
  auto pred = constant_predictions(arch, 0);
  for (auto& level : pred.levels) level.matrix().row(0).setConstant(-20);
  const auto a = assign_targets({16, 8, 4}, 64, s.boxes, s.classes);
  REQUIRE(a.size() == 1);
  auto& level = pred.levels[static_cast<std::size_t>(a[0].level)];
  const auto& t = a[0].target;
  level.at(0, a[0].cell_y, a[0].cell_x) = 20;
  level.at(1, a[0].cell_y, a[0].cell_x) = inv_sigmoid(t.dx);
  level.at(2, a[0].cell_y, a[0].cell_x) = inv_sigmoid(t.dy);
  level.at(3, a[0].cell_y, a[0].cell_x) = t.log_w;
  level.at(4, a[0].cell_y, a[0].cell_x) = t.log_h;
  for (int c = 0; c < 3; ++c) level.at(5 + c, a[0].cell_y, a[0].cell_x) = c == 2 ? 20 : -20;
  CHECK(detection_loss(pred, s).total < 1e-6);
}

TEST_CASE("zero predictions on a one-object scene, hand evaluated") {
  // 8x8 box centred at (10, 10): nearest stride is 8 (level 2), cell (1, 1),
  // targets dx = dy = 0.25, log w = log h = 0.
  const ArchConfig arch;
  const auto s = one_object_scene(64, Box{10, 10, 8, 8}, 1);
  const auto loss = detection_loss(constant_predictions(arch, 0), s);
  CHECK(loss.objectness == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(loss.box == doctest::Approx(2 * 0.5 * 0.25 * 0.25).epsilon(1e-12));
  CHECK(loss.classification == doctest::Approx(std::log(3.0)).epsilon(1e-12));
  CHECK(loss.total == doctest::Approx(std::log(2.0) + 0.0625 + std::log(3.0)).epsilon(1e-12));
}

TEST_CASE("target assignment") {
  const std::vector<Index> strides{4, 8, 16};
  CHECK(assign_level(Box{0, 0, 4, 4}, strides) == 0);
  CHECK(assign_level(Box{0, 0, 9, 9}, strides) == 1);
  CHECK(assign_level(Box{0, 0, 30, 30}, strides) == 2);
  // sqrt(4 * 8) is equidistant in log scale from 4 and 8; the finer level wins.
  CHECK(assign_level(Box{0, 0, 4, 8}, strides) == 0);
  CHECK(assign_level(Box{0, 0, 4, 8.001}, strides) == 1);
  CHECK(assign_level(Box{0, 0, 8, 16}, strides) == 1);

  // Two objects in one cell keep the larger.
  const std::vector<Box> boxes{{10, 10, 7, 7}, {11, 11, 9, 9}};
  const auto a = assign_targets({16, 8, 4}, 64, boxes, {0, 1});
  REQUIRE(a.size() == 1);
  CHECK(a[0].object == 1);
  CHECK(a[0].cls == 1);
}

TEST_CASE("box encoding round trip") {
  for (const Box b : {Box{10, 10, 8, 8}, Box{33.5, 7.25, 12.5, 6}, Box{60, 60, 7, 7}}) {
    const auto a = assign_targets({16, 8, 4}, 64, {b}, {0});
    const Index stride = 4 << a[0].level;
    const Box back = decode_box(a[0].target, stride, a[0].cell_x, a[0].cell_y);
    CHECK(back.cx == doctest::Approx(b.cx).epsilon(1e-12));
    CHECK(back.cy == doctest::Approx(b.cy).epsilon(1e-12));
    CHECK(back.w == doctest::Approx(b.w).epsilon(1e-12));
    CHECK(back.h == doctest::Approx(b.h).epsilon(1e-12));
  }
}

TEST_CASE("decoding") {
  const ArchConfig arch;
  CHECK(decode_predictions(constant_predictions(arch, -20), 64, 0.5, 0.5).empty());

  const Box gt{21, 13, 14, 10};
  const auto a = assign_targets({16, 8, 4}, 64, {gt}, {1})[0];
  auto pred = constant_predictions(arch, -20);
  auto& level = pred.levels[static_cast<std::size_t>(a.level)];
  level.at(0, a.cell_y, a.cell_x) = 5;
  level.at(1, a.cell_y, a.cell_x) = inv_sigmoid(a.target.dx);
  level.at(2, a.cell_y, a.cell_x) = inv_sigmoid(a.target.dy);
  level.at(3, a.cell_y, a.cell_x) = a.target.log_w;
  level.at(4, a.cell_y, a.cell_x) = a.target.log_h;
  level.at(6, a.cell_y, a.cell_x) = 20;
  auto dets = decode_predictions(pred, 64, 0.5, 0.5);
  REQUIRE(dets.size() == 1);
  CHECK(dets[0].cls == 1);
  CHECK(dets[0].box.cx == doctest::Approx(gt.cx).epsilon(1e-12));
  CHECK(dets[0].box.w == doctest::Approx(gt.w).epsilon(1e-12));
  CHECK(iou(dets[0].box, gt) == doctest::Approx(1.0));

  // A less confident cell on the finer level predicting the same box is suppressed.
  const int fine = a.level - 1;
  REQUIRE(fine >= 0);
  const Index fs = 4 << fine;
  const Index fx = static_cast<Index>(gt.cx) / fs, fy = static_cast<Index>(gt.cy) / fs;
  const auto ft = encode_box(gt, fs, fx, fy);
  auto& flevel = pred.levels[static_cast<std::size_t>(fine)];
  flevel.at(0, fy, fx) = 3;
  flevel.at(1, fy, fx) = inv_sigmoid(ft.dx);
  flevel.at(2, fy, fx) = inv_sigmoid(ft.dy);
  flevel.at(3, fy, fx) = ft.log_w;
  flevel.at(4, fy, fx) = ft.log_h;
  flevel.at(6, fy, fx) = 20;
  dets = decode_predictions(pred, 64, 0.5, 0.5);
  REQUIRE(dets.size() == 1);
  CHECK(dets[0].score == doctest::Approx(detail::sigmoid(5.0)).epsilon(1e-9));
}

TEST_CASE("nms keeps the best per class") {
  std::vector<Detection> d{{Box{10, 10, 8, 8}, 0, 0.6}, {Box{11, 10, 8, 8}, 0, 0.9},
                           {Box{11, 10, 8, 8}, 1, 0.7}, {Box{40, 40, 8, 8}, 0, 0.5}};
  const auto kept = non_max_suppression(d, 0.5);
  REQUIRE(kept.size() == 3);
  CHECK(kept[0].score == 0.9);
  CHECK(kept[1].cls == 1);
  CHECK(kept[2].box.cx == 40);
}

TEST_CASE("analytic cost at the default architecture") {
  const auto m = make_cascade(ArchConfig{}, 27);
  // conv: outputs * (Cin * 9 + 1); linear per position: out * (in + 1).
  auto conv = [](std::int64_t cout, std::int64_t side, std::int64_t cin) { return cout * side * side * (cin * 9 + 1); };
  auto lin = [](std::int64_t positions, std::int64_t in, std::int64_t out, bool bias) {
    return positions * (out * in + (bias ? out : 0));
  };
  const std::int64_t backbone = conv(16, 64, 1) + conv(16, 64, 16) + conv(8, 32, 16) + conv(8, 16, 8) +
                                conv(8, 16, 8) + conv(16, 8, 8) + conv(16, 8, 16) + conv(32, 4, 16) +
                                conv(32, 4, 32);
  const std::int64_t head = conv(8, 16, 8) + lin(256, 8, 8, true) + conv(16, 8, 16) + lin(64, 16, 8, true) +
                            conv(32, 4, 32) + lin(16, 32, 8, true);
  const std::int64_t router = 56 * 14 + 14 + 14 + 1;
  const std::int64_t connection = lin(256, 8, 8, false) + lin(64, 16, 8, false) + lin(16, 32, 8, false) +
                                  lin(64, 16, 16, false) + lin(16, 32, 16, false) + lin(16, 32, 32, false);
  const auto f = flops_breakdown(m);
  CHECK(f.backbone1 == backbone);
  CHECK(f.head1 == head);
  CHECK(f.router == router);
  CHECK(f.connection == connection);
  CHECK(count_flops(m, Route::kEasy) == backbone + head + router);
  CHECK(count_flops(m, Route::kHard) == 2 * backbone + router + connection + head);
  CHECK(count_flops(m, Route::kHard) > count_flops(m, Route::kEasy));
  CHECK(count_flops(m, Route::kHard) - count_flops(m, Route::kEasy) ==
        f.connection + f.backbone2 + f.head2 - f.head1);

  // Pinned regression values.
  CHECK(count_flops(m, Route::kEasy) == 12568493);
  CHECK(router == 813);
  const double ratio = static_cast<double>(router) / static_cast<double>(count_flops(m, Route::kEasy));
  CHECK(ratio == doctest::Approx(6.468616e-5).epsilon(1e-6));
  CHECK(ratio < 1e-4);
}

TEST_CASE("linear layer costs m times n") {
  const auto l = make_linear<Real>("l", 7, 5, false);
  CHECK(layer_macs(l, {7}) == 35);
  CHECK(layer_macs(make_linear<Real>("b", 7, 5), {7}) == 40);
}

TEST_CASE("joint loss gradient on a 32x32 scene") {
  const ArchConfig arch{32, 3, 4, 3, 4};
  auto m = make_cascade(arch, 28);
  SceneConfig sc;
  sc.image_size = 32;
  sc.min_objects = 2;
  const auto scene = generate_scene(sc, 29);
  GradMap grads;
  joint_loss(m, scene, &grads);
  auto objective = [&] {
    const auto l = joint_loss(m, scene);
    return l.first.total + l.second.total;
  };
  CHECK(params_gradient_error(objective, detector_layers(m), grads, 1e-4, 8, 30) < 1e-3);
}

TEST_CASE("checkpoint round trip is bit exact") {
  const auto dir = dydet::testing::scratch_dir("ckpt");
  std::filesystem::create_directories(dir);
  auto m = make_cascade(ArchConfig{}, 31);
  m.delta = 0.123456789;
  save_checkpoint(m, dir / "m.ckpt");
  const auto back = load_checkpoint(dir / "m.ckpt");
  CHECK(back.arch == m.arch);
  CHECK(back.delta == m.delta);
  CHECK_FALSE(back.random_scorer_seed.has_value());
  std::vector<const RealLayer*> a, b;
  for_each_layer(m, [&](const RealLayer& l) { a.push_back(&l); });
  for_each_layer(back, [&](const RealLayer& l) { b.push_back(&l); });
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i]->name == b[i]->name);
    for (const auto& [name, p] : a[i]->params) CHECK(b[i]->params.at(name) == p);
  }
  save_checkpoint(back, dir / "again.ckpt");
  CHECK(std::filesystem::file_size(dir / "m.ckpt") == std::filesystem::file_size(dir / "again.ckpt"));

  m.random_scorer_seed = 99;
  save_checkpoint(m, dir / "r.ckpt");
  CHECK(load_checkpoint(dir / "r.ckpt").random_scorer_seed == 99);
  std::filesystem::remove_all(dir);
}

TEST_CASE("corrupt checkpoints are rejected") {
  const auto dir = dydet::testing::scratch_dir("ckpt_bad");
  std::filesystem::create_directories(dir);
  {
    std::ofstream os(dir / "junk.ckpt", std::ios::binary);
    os << "NOPE1234";
  }
  CHECK_THROWS_AS(load_checkpoint(dir / "junk.ckpt"), std::runtime_error);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), std::runtime_error);
  save_checkpoint(make_cascade(ArchConfig{}, 1), dir / "ok.ckpt");
  const auto size = std::filesystem::file_size(dir / "ok.ckpt");
  std::filesystem::resize_file(dir / "ok.ckpt", size - 9);
  CHECK_THROWS_AS(load_checkpoint(dir / "ok.ckpt"), std::runtime_error);
  std::filesystem::remove_all(dir);
}

TEST_CASE("architecture validation") {
  CHECK_THROWS_AS(ArchConfig({60, 3, 8, 3, 16}).validate(), std::invalid_argument);
  CHECK_THROWS_AS(ArchConfig({64, 0, 8, 3, 16}).validate(), std::invalid_argument);
  CHECK_THROWS_AS(ArchConfig({64, 3, 8, 0, 16}).validate(), std::invalid_argument);
  CHECK(ArchConfig{}.pooled_width() == 56);
}
