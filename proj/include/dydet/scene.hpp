#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dydet/tensor.hpp"

namespace dydet {

using Real = double;
using RealTensor = Tensor<Real>;
using Vector = RealTensor::Vector;

/// Axis-aligned box in pixels, centre + extent.
struct Box {
  Real cx = 0, cy = 0, w = 0, h = 0;

  Real x0() const { return cx - w / 2; }
  Real y0() const { return cy - h / 2; }
  Real x1() const { return cx + w / 2; }
  Real y1() const { return cy + h / 2; }
  Real area() const { return w * h; }

  friend bool operator==(const Box&, const Box&) = default;
};

Real iou(const Box& a, const Box& b);

enum class ShapeKind { kRectangle, kDisk, kTriangle, kRectangleOutline, kRing, kTriangleOutline };
inline constexpr int kMaxShapeClasses = 6;

struct SceneConfig {
  int image_size = 64;
  int min_objects = 1;
  int max_objects = 6;
  Real min_size = 0.1;  // fraction of the image side
  Real max_size = 0.35;
  Real max_overlap_iou = 0.3;
  Real noise_sigma = 0.05;
  int num_classes = 3;

  void validate() const;
  friend bool operator==(const SceneConfig&, const SceneConfig&) = default;
};

void to_json(nlohmann::json& j, const SceneConfig& c);
void from_json(const nlohmann::json& j, SceneConfig& c);

struct SyntheticScene {
  RealTensor image;  // [1, S, S], values in [0, 1], float-representable
  std::vector<Box> boxes;
  std::vector<int> classes;
  std::uint64_t scene_id = 0;
  int requested_objects = 0;

  int image_size() const { return static_cast<int>(image.dim(1)); }
  bool placement_shortfall() const {
    return static_cast<int>(boxes.size()) < requested_objects;
  }
  friend bool operator==(const SyntheticScene&, const SyntheticScene&) = default;
};

/// Deterministic in (config, seed). The scene id defaults to the seed.
SyntheticScene generate_scene(const SceneConfig& config, std::uint64_t seed);
SyntheticScene generate_scene(const SceneConfig& config, std::uint64_t seed,
                              std::uint64_t scene_id);

/// Scene id of item `index` in a dataset generated with `seed`.
inline std::uint64_t dataset_scene_id(std::uint64_t seed, std::uint64_t index) {
  return (seed << 32) | (index & 0xFFFFFFFFULL);
}

struct SceneRecord {
  std::uint64_t scene_id = 0;
  std::string file;
  int requested_objects = 0;
  int placed_objects = 0;
};

struct DatasetManifest {
  static constexpr int kVersion = 1;
  SceneConfig config;
  std::uint64_t seed = 0;
  int count = 0;
  int version = kVersion;
  std::vector<SceneRecord> scenes;
};

void to_json(nlohmann::json& j, const DatasetManifest& m);
void from_json(const nlohmann::json& j, DatasetManifest& m);

std::vector<SyntheticScene> generate_scenes(const SceneConfig& config, int n, std::uint64_t seed);

/// Writes `n` scenes plus manifest.json into `dir` (created if missing).
DatasetManifest generate_dataset(const SceneConfig& config, int n, std::uint64_t seed,
                                 const std::filesystem::path& dir);
DatasetManifest write_dataset(const SceneConfig& config, std::uint64_t seed,
                              const std::vector<SyntheticScene>& scenes,
                              const std::filesystem::path& dir);

std::vector<SyntheticScene> load_dataset(const std::filesystem::path& dir,
                                         DatasetManifest* manifest = nullptr);

void write_scene_record(const SyntheticScene& scene, const std::filesystem::path& file);
SyntheticScene read_scene_record(const std::filesystem::path& file);

}  // namespace dydet
