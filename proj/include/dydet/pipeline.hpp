#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dydet/inference.hpp"
#include "dydet/training.hpp"

namespace dydet {

struct DataConfig {
  SceneConfig scene;
  int train_size = 2000;
  int val_size = 2000;
  int test_size = 2000;
  /// Existing dataset directories; when all three are set, data generation
  /// is skipped.
  std::optional<std::filesystem::path> train_dir, val_dir, test_dir;

  bool external() const { return train_dir && val_dir && test_dir; }
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::filesystem::path out = "run";
  ArchConfig arch;
  DataConfig data;
  /// Phase seeds are derived from `seed`; the seed fields here are ignored.
  TrainConfig detector_train = TrainConfig::detector_defaults();
  /// Router phase: the library defaults with lr 1e-3. At lr 1e-5 the router
  /// barely leaves its initialisation within the desk-scale step budget.
  TrainConfig router_train = [] {
    TrainConfig c = TrainConfig::router_defaults();
    c.lr = 1e-3;
    return c;
  }();
  AblationConfig routing;
  DecodeConfig decode;
  LatencyModel latency;
  /// Hard fraction for calibrate-threshold; a latency target (ms) overrides it.
  Real calibration_k = 0.5;
  std::optional<Real> target_latency_ms;
  std::vector<Real> k_list{0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1};
  Real robustness_k = 0.5;
  std::vector<std::size_t> robustness_sizes{50, 100, 200, 500, 1000, 2000};
  int robustness_resamples = 10;
  std::size_t n_extremes = 10;

  void validate() const;
  /// SHA-1 of the canonical JSON without the output directory.
  std::string hash() const;
};

void to_json(nlohmann::json& j, const RunConfig& c);
/// Missing keys keep their defaults.
void from_json(const nlohmann::json& j, RunConfig& c);
RunConfig load_run_config(const std::filesystem::path& file);

/// Seeds derived from the run seed.
std::uint64_t model_seed(std::uint64_t run_seed);
std::uint64_t data_seed(std::uint64_t run_seed, int split);  // 0 train, 1 val, 2 test
std::uint64_t phase_seed(std::uint64_t run_seed, int phase);  // 0 detectors, 1 router

class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& cause)
      : std::runtime_error("stage '" + stage + "': " + cause), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

// Files written under the output directory.
namespace artifacts {
inline constexpr const char* kManifest = "manifest.json";
inline constexpr const char* kDetectors = "detectors.ckpt";
inline constexpr const char* kDetectorLog = "detector_log.csv";
inline constexpr const char* kDelta = "delta.json";
inline constexpr const char* kModel = "model.ckpt";
inline constexpr const char* kRouterLog = "router_log.csv";
inline constexpr const char* kThreshold = "threshold.json";
inline constexpr const char* kValScores = "val_scores.csv";
inline constexpr const char* kSweep = "sweep.csv";
inline constexpr const char* kRobustness = "robustness.csv";
inline constexpr const char* kDifficulty = "difficulty.csv";
inline constexpr const char* kLossCurve = "loss_curve.csv";
}  // namespace artifacts

struct StageRecord {
  std::string name;
  std::string config_hash;
  std::map<std::string, std::string> inputs;   // path -> content hash
  std::map<std::string, std::string> outputs;  // path -> content hash
};

struct RunManifest {
  std::string config_hash;
  std::vector<StageRecord> stages;
};

void to_json(nlohmann::json& j, const RunManifest& m);
void from_json(const nlohmann::json& j, RunManifest& m);

struct PipelineReport {
  std::vector<std::string> executed;
  std::vector<std::string> skipped;
  RunManifest manifest;
};

/// gen-data (unless external data is configured), train-detectors,
/// calibrate-delta, train-router, calibrate-threshold, sweep, reports. A stage
/// is skipped when its manifest record matches the config hash and the current
/// hashes of its inputs and outputs. `log` receives one line per stage.
PipelineReport run_pipeline(const RunConfig& config,
                            const std::function<void(const std::string&)>& log = {});

/// Stage names in execution order for this configuration.
std::vector<std::string> stage_names(const RunConfig& config);

/// Runs one stage regardless of the manifest and records it there. Its inputs
/// must already exist.
void run_stage(const RunConfig& config, const std::string& name,
               const std::function<void(const std::string&)>& log = {});

/// Empty manifest when the file is missing or unreadable.
RunManifest read_manifest(const std::filesystem::path& out);

// ---------------------------------------------------------------------------
// Stage building blocks, shared with the command-line tool.

std::vector<SyntheticScene> load_split(const RunConfig& config, int split);
std::filesystem::path split_dir(const RunConfig& config, int split);

void write_delta(const DeltaOffset& delta, const std::filesystem::path& file);
DeltaOffset read_delta(const std::filesystem::path& file);

void write_scores_csv(const std::vector<std::uint64_t>& ids, const std::vector<Real>& scores,
                      const std::filesystem::path& file);
std::vector<Real> read_scores_csv(const std::filesystem::path& file);

void write_json(const nlohmann::json& j, const std::filesystem::path& file);
nlohmann::json read_json(const std::filesystem::path& file);

}  // namespace dydet
