#include "dydet/model.hpp"

#include <bit>
#include <fstream>
#include <map>
#include <stdexcept>

#include "dydet/rng.hpp"

namespace dydet {

CascadeModel make_cascade(const ArchConfig& arch, std::uint64_t seed) {
  arch.validate();
  CascadeModel m;
  m.arch = arch;
  m.first = make_detector(arch, "d1");
  m.second = make_detector(arch, "d2");
  m.connection = make_connection(arch, "g");
  m.router = make_router(arch.pooled_width());
  init_detector(m.first, derive_seed(seed, 1));
  init_detector(m.second, derive_seed(seed, 2));
  init_connection(m.connection, derive_seed(seed, 3));
  init_router(m.router, derive_seed(seed, 4));
  return m;
}

void for_each_layer(CascadeModel& model, const std::function<void(RealLayer&)>& fn) {
  for_each_layer(model.first, fn);
  for_each_layer(model.second, fn);
  for_each_layer(model.connection, fn);
  for_each_layer(model.router, fn);
}

void for_each_layer(const CascadeModel& model, const std::function<void(const RealLayer&)>& fn) {
  for_each_layer(model.first, fn);
  for_each_layer(model.second, fn);
  for_each_layer(model.connection, fn);
  for_each_layer(model.router, fn);
}

Real score_image(const CascadeModel& model, const MultiScaleFeatures& f1, const RealTensor& image) {
  if (model.random_scorer_seed) return RandomScorer{*model.random_scorer_seed}.score(image);
  return router_forward(model.router, pool_concat(f1)).phi;
}

// ---------------------------------------------------------------------------

std::int64_t layer_macs(const RealLayer& layer, const Shape& in) {
  const Shape out = output_shape(layer, in);
  const auto& h = layer.hyper;
  switch (layer.kind) {
    case LayerKind::kConv3x3: {
      const std::int64_t outputs = shape_size(out);
      return outputs * h.in_channels * 9 + outputs;
    }
    case LayerKind::kLinear: {
      const std::int64_t positions = shape_size(in) / h.in_channels;
      return positions * (h.out_channels * h.in_channels + (h.bias ? h.out_channels : 0));
    }
    default:
      return 0;
  }
}

namespace {

std::int64_t stack_macs(const LayerStack& layers, Shape& shape) {
  std::int64_t total = 0;
  for (const auto& layer : layers) {
    total += layer_macs(layer, shape);
    shape = output_shape(layer, shape);
  }
  return total;
}

std::int64_t backbone_macs(const DetectorParams& d, const ArchConfig& arch) {
  Shape shape{1, arch.image_size, arch.image_size};
  std::int64_t total = stack_macs(d.backbone.stem, shape);
  for (const auto& stage : d.backbone.stages) total += stack_macs(stage, shape);
  return total;
}

std::int64_t head_macs(const DetectorParams& d, const ArchConfig& arch) {
  std::int64_t total = 0;
  for (int l = 0; l < arch.levels; ++l) {
    Shape shape{arch.level_channels(l), arch.level_side(l), arch.level_side(l)};
    total += stack_macs(d.head.levels[static_cast<std::size_t>(l)], shape);
  }
  return total;
}

// Projections run at the source resolution; upsampling and sums are free.
std::int64_t connection_macs(const CompositeConnectionParams& g, const ArchConfig& arch) {
  std::int64_t total = 0;
  for (int l = 0; l < arch.levels; ++l) {
    for (int j = l; j < arch.levels; ++j) {
      const Shape src{arch.level_channels(j), arch.level_side(j), arch.level_side(j)};
      total += layer_macs(g.projections[static_cast<std::size_t>(l)][static_cast<std::size_t>(j - l)], src);
    }
  }
  return total;
}

}  // namespace

FlopsBreakdown flops_breakdown(const CascadeModel& m) {
  return {backbone_macs(m.first, m.arch),  head_macs(m.first, m.arch),
          router_macs(m.router),           connection_macs(m.connection, m.arch),
          backbone_macs(m.second, m.arch), head_macs(m.second, m.arch)};
}

std::int64_t count_flops(const CascadeModel& model, Route route) {
  const FlopsBreakdown f = flops_breakdown(model);
  if (route == Route::kEasy) return f.backbone1 + f.head1 + f.router;
  return f.backbone1 + f.router + f.connection + f.backbone2 + f.head2;
}

// ---------------------------------------------------------------------------

namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoints are written in host order and assume little-endian");

constexpr char kMagic[4] = {'D', 'Y', 'D', 'T'};

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) {
    throw std::runtime_error("truncated checkpoint");
  }
  return v;
}

std::vector<std::pair<std::string, RealTensor>> collect(const CascadeModel& m) {
  std::vector<std::pair<std::string, RealTensor>> out;
  const auto& a = m.arch;
  out.emplace_back("arch", RealTensor({5}, (Vector(5) << a.image_size, a.levels, a.base_channels,
                                             a.num_classes, a.stem_channels)
                                                .finished()));
  out.emplace_back("delta", RealTensor({1}, Vector::Constant(1, m.delta)));
  if (m.random_scorer_seed) {
    if (*m.random_scorer_seed >= (std::uint64_t{1} << 53)) {
      throw std::invalid_argument("random scorer seed must be < 2^53 to be checkpointed");
    }
    out.emplace_back("router.random_seed",
                     RealTensor({1}, Vector::Constant(1, static_cast<Real>(*m.random_scorer_seed))));
  }
  for_each_layer(m, [&](const RealLayer& layer) {
    for (const auto& [name, t] : layer.params) out.emplace_back(layer.name + "." + name, t);
  });
  return out;
}

}  // namespace

void save_checkpoint(const CascadeModel& model, const std::filesystem::path& file) {
  const auto params = collect(model);
  std::ofstream os(file, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write checkpoint " + file.string());
  os.write(kMagic, 4);
  put<std::uint32_t>(os, kCheckpointVersion);
  put<std::uint64_t>(os, params.size());
  for (const auto& [name, t] : params) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (Index d : t.shape()) put<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    os.write(reinterpret_cast<const char*>(t.data().data()),
             static_cast<std::streamsize>(t.size() * sizeof(Real)));
  }
  if (!os) throw std::runtime_error("I/O failure writing checkpoint " + file.string());
}

CascadeModel load_checkpoint(const std::filesystem::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + file.string());
  char magic[4];
  if (!is.read(magic, 4) || !std::equal(magic, magic + 4, kMagic)) {
    throw std::runtime_error("not a checkpoint (bad magic): " + file.string());
  }
  const auto version = get<std::uint32_t>(is);
  if (version != kCheckpointVersion) {
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = get<std::uint64_t>(is);
  std::map<std::string, RealTensor> params;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = get<std::uint32_t>(is);
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw std::runtime_error("truncated checkpoint");
    const auto rank = get<std::uint32_t>(is);
    Shape shape;
    for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(get<std::uint32_t>(is));
    RealTensor t(shape);
    if (!is.read(reinterpret_cast<char*>(t.data().data()),
                 static_cast<std::streamsize>(t.size() * sizeof(Real)))) {
      throw std::runtime_error("truncated checkpoint");
    }
    params.emplace(std::move(name), std::move(t));
  }

  auto take = [&](const std::string& name) -> RealTensor {
    auto it = params.find(name);
    if (it == params.end()) throw std::runtime_error("checkpoint is missing parameter " + name);
    RealTensor t = std::move(it->second);
    params.erase(it);
    return t;
  };
  const RealTensor arch_t = take("arch");
  if (arch_t.size() != 5) throw std::runtime_error("checkpoint arch record is malformed");
  ArchConfig arch{static_cast<int>(arch_t[0]), static_cast<int>(arch_t[1]),
                  static_cast<int>(arch_t[2]), static_cast<int>(arch_t[3]),
                  static_cast<int>(arch_t[4])};
  CascadeModel m = make_cascade(arch, 0);
  m.delta = take("delta")[0];
  if (params.count("router.random_seed")) {
    m.random_scorer_seed = static_cast<std::uint64_t>(take("router.random_seed")[0]);
  }
  for_each_layer(m, [&](RealLayer& layer) {
    for (auto& [name, t] : layer.params) {
      RealTensor loaded = take(layer.name + "." + name);
      if (loaded.shape() != t.shape()) {
        throw std::runtime_error("checkpoint parameter " + layer.name + "." + name + " has shape " +
                                 shape_string(loaded.shape()) + ", expected " +
                                 shape_string(t.shape()));
      }
      t = std::move(loaded);
    }
  });
  if (!params.empty()) {
    throw std::runtime_error("checkpoint has unexpected parameter " + params.begin()->first);
  }
  return m;
}

}  // namespace dydet
