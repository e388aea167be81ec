#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>

#include "dydet/cascade.hpp"
#include "dydet/router.hpp"

namespace dydet {

enum class Route { kEasy, kHard };

inline const char* to_string(Route r) { return r == Route::kEasy ? "easy" : "hard"; }

/// Two detectors, the composite connection, the router and the calibrated offset.
struct CascadeModel {
  ArchConfig arch;
  DetectorParams first;
  DetectorParams second;
  CompositeConnectionParams connection;
  RouterParams router;
  Real delta = 0;
  /// When set, the learned router is bypassed by a seeded uniform scorer.
  std::optional<std::uint64_t> random_scorer_seed;
};

CascadeModel make_cascade(const ArchConfig& arch, std::uint64_t seed);

void for_each_layer(CascadeModel& model, const std::function<void(RealLayer&)>& fn);
void for_each_layer(const CascadeModel& model, const std::function<void(const RealLayer&)>& fn);

/// Difficulty score from the first pyramid (or the random scorer when active).
Real score_image(const CascadeModel& model, const MultiScaleFeatures& f1, const RealTensor& image);

// ---------------------------------------------------------------------------
// Analytic cost

/// MACs of one layer for an input of shape `in`; bias adds count one per output.
std::int64_t layer_macs(const RealLayer& layer, const Shape& in);

struct FlopsBreakdown {
  std::int64_t backbone1 = 0;
  std::int64_t head1 = 0;
  std::int64_t router = 0;
  std::int64_t connection = 0;
  std::int64_t backbone2 = 0;
  std::int64_t head2 = 0;
};

FlopsBreakdown flops_breakdown(const CascadeModel& model);

/// easy = B1 + D1 + router; hard = B1 + router + G + B2 + D2.
std::int64_t count_flops(const CascadeModel& model, Route route);

// ---------------------------------------------------------------------------
// Checkpoints: "DYDT", u32 version, u64 count, then per parameter
// u32 name length, name bytes, u32 rank, u32 dims..., f64 data.

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const CascadeModel& model, const std::filesystem::path& file);
CascadeModel load_checkpoint(const std::filesystem::path& file);

}  // namespace dydet
