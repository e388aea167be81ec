#include "dydet/scene.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include "dydet/rng.hpp"

namespace dydet {

static_assert(std::endian::native == std::endian::little,
              "scene records are written in host order and assume little-endian");

Real iou(const Box& a, const Box& b) {
  const Real iw = std::min(a.x1(), b.x1()) - std::max(a.x0(), b.x0());
  const Real ih = std::min(a.y1(), b.y1()) - std::max(a.y0(), b.y0());
  if (iw <= 0 || ih <= 0) return 0;
  const Real inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

void SceneConfig::validate() const {
  auto fail = [](const std::string& what) {
    throw std::invalid_argument("invalid scene config: " + what);
  };
  if (image_size < 32) fail("image_size must be >= 32");
  if (min_objects < 0 || min_objects > max_objects) fail("num_objects_range must satisfy 0 <= min <= max");
  if (!(min_size > 0) || min_size > max_size || max_size > 1) fail("size_range must satisfy 0 < min <= max <= 1");
  if (max_overlap_iou < 0 || max_overlap_iou > 1) fail("max_overlap_iou must lie in [0, 1]");
  if (noise_sigma < 0) fail("noise_sigma must be >= 0");
  if (num_classes < 1 || num_classes > kMaxShapeClasses) {
    fail("num_classes must lie in [1, " + std::to_string(kMaxShapeClasses) + "]");
  }
}

void to_json(nlohmann::json& j, const SceneConfig& c) {
  j = nlohmann::json{{"image_size", c.image_size},
                     {"num_objects_range", {c.min_objects, c.max_objects}},
                     {"size_range", {c.min_size, c.max_size}},
                     {"max_overlap_iou", c.max_overlap_iou},
                     {"noise_sigma", c.noise_sigma},
                     {"num_classes", c.num_classes}};
}

void from_json(const nlohmann::json& j, SceneConfig& c) {
  c = SceneConfig{};
  if (j.contains("image_size")) j.at("image_size").get_to(c.image_size);
  if (j.contains("num_objects_range")) {
    c.min_objects = j.at("num_objects_range").at(0).get<int>();
    c.max_objects = j.at("num_objects_range").at(1).get<int>();
  }
  if (j.contains("size_range")) {
    c.min_size = j.at("size_range").at(0).get<Real>();
    c.max_size = j.at("size_range").at(1).get<Real>();
  }
  if (j.contains("max_overlap_iou")) j.at("max_overlap_iou").get_to(c.max_overlap_iou);
  if (j.contains("noise_sigma")) j.at("noise_sigma").get_to(c.noise_sigma);
  if (j.contains("num_classes")) j.at("num_classes").get_to(c.num_classes);
}

namespace {

bool inside_shape(ShapeKind kind, const Box& b, Real px, Real py) {
  const Real dx = px - b.cx, dy = py - b.cy;
  const Real hw = b.w / 2, hh = b.h / 2;
  auto rect = [&](Real shrink) {
    return std::abs(dx) <= hw - shrink && std::abs(dy) <= hh - shrink;
  };
  auto ellipse = [&](Real shrink) {
    const Real a = hw - shrink, c = hh - shrink;
    if (a <= 0 || c <= 0) return false;
    return (dx * dx) / (a * a) + (dy * dy) / (c * c) <= 1;
  };
  // Apex at the top centre, base along the bottom edge.
  auto triangle = [&](Real shrink) {
    const Real top = b.y0() + 2 * shrink, bottom = b.y1() - shrink;
    if (py < top || py > bottom || bottom <= top) return false;
    return std::abs(dx) <= (hw - shrink) * (py - top) / (bottom - top);
  };
  constexpr Real kStroke = 2.0;
  switch (kind) {
    case ShapeKind::kRectangle: return rect(0);
    case ShapeKind::kDisk: return ellipse(0);
    case ShapeKind::kTriangle: return triangle(0);
    case ShapeKind::kRectangleOutline: return rect(0) && !rect(kStroke);
    case ShapeKind::kRing: return ellipse(0) && !ellipse(kStroke);
    case ShapeKind::kTriangleOutline: return triangle(0) && !triangle(kStroke);
  }
  return false;
}

Real to_f32(Real v) { return static_cast<Real>(static_cast<float>(v)); }

}  // namespace

SyntheticScene generate_scene(const SceneConfig& config, std::uint64_t seed) {
  return generate_scene(config, seed, seed);
}

SyntheticScene generate_scene(const SceneConfig& config, std::uint64_t seed,
                              std::uint64_t scene_id) {
  config.validate();
  Rng rng(splitmix64(seed));
  std::uniform_real_distribution<Real> unit(0.0, 1.0);
  const int side = config.image_size;
  const Real fside = side;

  SyntheticScene scene;
  scene.scene_id = scene_id;
  scene.requested_objects =
      std::uniform_int_distribution<int>(config.min_objects, config.max_objects)(rng);

  std::vector<Real> intensities;
  for (int k = 0; k < scene.requested_objects; ++k) {
    constexpr int kMaxAttempts = 100;
    for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
      Box b;
      b.w = to_f32(fside * (config.min_size + (config.max_size - config.min_size) * unit(rng)));
      b.h = to_f32(fside * (config.min_size + (config.max_size - config.min_size) * unit(rng)));
      b.cx = to_f32(b.w / 2 + (fside - b.w) * unit(rng));
      b.cy = to_f32(b.h / 2 + (fside - b.h) * unit(rng));
      const int cls = std::uniform_int_distribution<int>(0, config.num_classes - 1)(rng);
      const Real intensity = 0.4 + 0.6 * unit(rng);
      if (b.x0() < 0 || b.y0() < 0 || b.x1() > fside || b.y1() > fside) continue;
      const bool clash = std::any_of(scene.boxes.begin(), scene.boxes.end(), [&](const Box& o) {
        return iou(b, o) > config.max_overlap_iou;
      });
      if (clash) continue;
      scene.boxes.push_back(b);
      scene.classes.push_back(cls);
      intensities.push_back(intensity);
      break;
    }
  }

  // Later objects are painted over earlier ones, which produces occlusion.
  RealTensor image({1, side, side});
  for (std::size_t k = 0; k < scene.boxes.size(); ++k) {
    const Box& b = scene.boxes[k];
    const auto kind = static_cast<ShapeKind>(scene.classes[k]);
    const int y0 = std::max(0, static_cast<int>(std::floor(b.y0())));
    const int y1 = std::min(side - 1, static_cast<int>(std::ceil(b.y1())));
    const int x0 = std::max(0, static_cast<int>(std::floor(b.x0())));
    const int x1 = std::min(side - 1, static_cast<int>(std::ceil(b.x1())));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x)
        if (inside_shape(kind, b, x + 0.5, y + 0.5)) image.at(0, y, x) = intensities[k];
  }
  if (config.noise_sigma > 0) {
    std::normal_distribution<Real> noise(0.0, config.noise_sigma);
    for (Index i = 0; i < image.size(); ++i) image[i] += noise(rng);
  }
  for (Index i = 0; i < image.size(); ++i) image[i] = to_f32(std::clamp(image[i], 0.0, 1.0));
  scene.image = std::move(image);
  return scene;
}

std::vector<SyntheticScene> generate_scenes(const SceneConfig& config, int n, std::uint64_t seed) {
  if (n <= 0) throw std::invalid_argument("dataset size must be >= 1");
  std::vector<SyntheticScene> scenes;
  scenes.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    scenes.push_back(generate_scene(config, derive_seed(seed, static_cast<std::uint64_t>(i)),
                                    dataset_scene_id(seed, static_cast<std::uint64_t>(i))));
  }
  return scenes;
}

// ---------------------------------------------------------------------------
// Binary scene records

namespace {

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::filesystem::path& file) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) {
    throw std::runtime_error("truncated scene record: " + file.string());
  }
  return v;
}

std::string record_name(std::size_t index) {
  std::ostringstream os;
  os << "scene_" << std::setw(6) << std::setfill('0') << index << ".bin";
  return os.str();
}

}  // namespace

void write_scene_record(const SyntheticScene& scene, const std::filesystem::path& file) {
  std::ofstream os(file, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write scene record: " + file.string());
  put<std::uint64_t>(os, scene.scene_id);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(scene.image_size()));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(scene.boxes.size()));
  for (Index i = 0; i < scene.image.size(); ++i) put<float>(os, static_cast<float>(scene.image[i]));
  for (const Box& b : scene.boxes) {
    for (Real v : {b.cx, b.cy, b.w, b.h}) put<float>(os, static_cast<float>(v));
  }
  for (int c : scene.classes) put<std::uint32_t>(os, static_cast<std::uint32_t>(c));
  if (!os) throw std::runtime_error("I/O failure writing " + file.string());
}

SyntheticScene read_scene_record(const std::filesystem::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open scene record: " + file.string());
  SyntheticScene scene;
  scene.scene_id = get<std::uint64_t>(is, file);
  const auto side = static_cast<Index>(get<std::uint32_t>(is, file));
  const auto num_boxes = get<std::uint32_t>(is, file);
  scene.image = RealTensor({1, side, side});
  for (Index i = 0; i < scene.image.size(); ++i) scene.image[i] = get<float>(is, file);
  scene.boxes.resize(num_boxes);
  for (Box& b : scene.boxes) {
    b.cx = get<float>(is, file);
    b.cy = get<float>(is, file);
    b.w = get<float>(is, file);
    b.h = get<float>(is, file);
    if (!(b.w > 0) || !(b.h > 0)) {
      throw std::runtime_error("degenerate ground-truth box in " + file.string());
    }
  }
  scene.classes.resize(num_boxes);
  for (int& c : scene.classes) c = static_cast<int>(get<std::uint32_t>(is, file));
  scene.requested_objects = static_cast<int>(num_boxes);
  return scene;
}

void to_json(nlohmann::json& j, const DatasetManifest& m) {
  nlohmann::json scenes = nlohmann::json::array();
  for (const auto& r : m.scenes) {
    scenes.push_back({{"scene_id", r.scene_id},
                      {"file", r.file},
                      {"requested_objects", r.requested_objects},
                      {"placed_objects", r.placed_objects},
                      {"placement_shortfall", r.placed_objects < r.requested_objects}});
  }
  j = nlohmann::json{{"version", m.version}, {"seed", m.seed},   {"count", m.count},
                     {"config", m.config},   {"scenes", scenes}};
}

void from_json(const nlohmann::json& j, DatasetManifest& m) {
  j.at("version").get_to(m.version);
  j.at("seed").get_to(m.seed);
  j.at("count").get_to(m.count);
  j.at("config").get_to(m.config);
  m.scenes.clear();
  for (const auto& s : j.at("scenes")) {
    m.scenes.push_back({s.at("scene_id").get<std::uint64_t>(), s.at("file").get<std::string>(),
                        s.at("requested_objects").get<int>(), s.at("placed_objects").get<int>()});
  }
}

DatasetManifest write_dataset(const SceneConfig& config, std::uint64_t seed,
                              const std::vector<SyntheticScene>& scenes,
                              const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  DatasetManifest manifest;
  manifest.config = config;
  manifest.seed = seed;
  manifest.count = static_cast<int>(scenes.size());
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const std::string name = record_name(i);
    write_scene_record(scenes[i], dir / name);
    manifest.scenes.push_back({scenes[i].scene_id, name, scenes[i].requested_objects,
                               static_cast<int>(scenes[i].boxes.size())});
  }
  std::ofstream os(dir / "manifest.json", std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write manifest in " + dir.string());
  os << nlohmann::json(manifest).dump(2) << '\n';
  if (!os) throw std::runtime_error("I/O failure writing manifest in " + dir.string());
  return manifest;
}

DatasetManifest generate_dataset(const SceneConfig& config, int n, std::uint64_t seed,
                                 const std::filesystem::path& dir) {
  return write_dataset(config, seed, generate_scenes(config, n, seed), dir);
}

std::vector<SyntheticScene> load_dataset(const std::filesystem::path& dir,
                                         DatasetManifest* manifest_out) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw std::runtime_error("missing manifest.json in " + dir.string());
  DatasetManifest manifest = nlohmann::json::parse(is).get<DatasetManifest>();
  if (manifest.version != DatasetManifest::kVersion) {
    throw std::runtime_error("unsupported dataset version " + std::to_string(manifest.version));
  }
  std::vector<SyntheticScene> scenes;
  scenes.reserve(manifest.scenes.size());
  for (const auto& record : manifest.scenes) {
    SyntheticScene scene = read_scene_record(dir / record.file);
    if (scene.scene_id != record.scene_id) {
      throw std::runtime_error("scene id mismatch in " + record.file);
    }
    scene.requested_objects = record.requested_objects;
    scenes.push_back(std::move(scene));
  }
  if (manifest_out) *manifest_out = std::move(manifest);
  return scenes;
}

}  // namespace dydet
