#include "dydet/pipeline.hpp"

#include <fstream>
#include <sstream>

#include "dydet/csv.hpp"
#include "dydet/hash.hpp"
#include "dydet/rng.hpp"

namespace dydet {

namespace fs = std::filesystem;

void RunConfig::validate() const {
  arch.validate();
  data.scene.validate();
  if (data.scene.image_size != arch.image_size) {
    throw std::invalid_argument("scene image_size " + std::to_string(data.scene.image_size) +
                                " differs from arch image_size " + std::to_string(arch.image_size));
  }
  if (data.scene.num_classes != arch.num_classes) {
    throw std::invalid_argument("scene num_classes differs from arch num_classes");
  }
  if (data.train_size < 1 || data.val_size < 1 || data.test_size < 1) {
    throw std::invalid_argument("dataset sizes must be >= 1");
  }
  const bool any_dir = data.train_dir || data.val_dir || data.test_dir;
  if (any_dir && !data.external()) {
    throw std::invalid_argument("train_dir, val_dir and test_dir must be given together");
  }
  if (data.external()) {
    for (const auto& dir : {*data.train_dir, *data.val_dir, *data.test_dir}) {
      if (!fs::exists(dir / "manifest.json")) throw std::invalid_argument("dataset not found: " + dir.string());
    }
  }
  detector_train.validate();
  router_train.validate();
  routing.validate();
  if (!(calibration_k >= 0 && calibration_k <= 1)) throw std::invalid_argument("calibration k must lie in [0, 1]");
  if (!(robustness_k >= 0 && robustness_k <= 1)) throw std::invalid_argument("robustness k must lie in [0, 1]");
  if (robustness_resamples < 1) throw std::invalid_argument("robustness resamples must be >= 1");
  for (Real k : k_list) {
    if (!(k >= 0 && k <= 1)) throw std::invalid_argument("sweep k values must lie in [0, 1]");
  }
}

void to_json(nlohmann::json& j, const RunConfig& c) {
  nlohmann::json data{{"scene", c.data.scene},
                      {"train_size", c.data.train_size},
                      {"val_size", c.data.val_size},
                      {"test_size", c.data.test_size}};
  if (c.data.train_dir) data["train_dir"] = c.data.train_dir->string();
  if (c.data.val_dir) data["val_dir"] = c.data.val_dir->string();
  if (c.data.test_dir) data["test_dir"] = c.data.test_dir->string();
  nlohmann::json routing{{"strategy", to_string(c.routing.strategy)}};
  if (c.routing.lambda) routing["lambda"] = *c.routing.lambda;
  nlohmann::json calibration{{"k", c.calibration_k}};
  if (c.target_latency_ms) calibration["target_latency_ms"] = *c.target_latency_ms;
  j = nlohmann::json{{"seed", c.seed},
                     {"out", c.out.string()},
                     {"arch", c.arch},
                     {"data", data},
                     {"detector_train", c.detector_train},
                     {"router_train", c.router_train},
                     {"routing", routing},
                     {"decode", c.decode},
                     {"latency", c.latency},
                     {"calibration", calibration},
                     {"sweep", {{"k_list", c.k_list}}},
                     {"robustness",
                      {{"k", c.robustness_k}, {"sizes", c.robustness_sizes}, {"resamples", c.robustness_resamples}}},
                     {"difficulty", {{"n_extremes", c.n_extremes}}}};
}

void from_json(const nlohmann::json& j, RunConfig& c) {
  static const std::vector<std::string> kKeys{"seed",    "out",     "arch",        "data",  "detector_train",
                                              "router_train", "routing", "decode", "latency", "calibration",
                                              "sweep", "robustness", "difficulty"};
  for (const auto& [key, _] : j.items()) {
    if (std::find(kKeys.begin(), kKeys.end(), key) == kKeys.end()) {
      throw std::invalid_argument("unknown config key '" + key + "'");
    }
  }
  if (j.contains("seed")) j.at("seed").get_to(c.seed);
  if (j.contains("out")) c.out = j.at("out").get<std::string>();
  if (j.contains("arch")) {
    nlohmann::json merged = c.arch;
    merged.update(j.at("arch"));
    merged.get_to(c.arch);
  }
  if (j.contains("data")) {
    const auto& d = j.at("data");
    if (d.contains("scene")) {
      nlohmann::json merged = c.data.scene;
      merged.update(d.at("scene"));
      merged.get_to(c.data.scene);
    }
    if (d.contains("train_size")) d.at("train_size").get_to(c.data.train_size);
    if (d.contains("val_size")) d.at("val_size").get_to(c.data.val_size);
    if (d.contains("test_size")) d.at("test_size").get_to(c.data.test_size);
    if (d.contains("train_dir")) c.data.train_dir = d.at("train_dir").get<std::string>();
    if (d.contains("val_dir")) c.data.val_dir = d.at("val_dir").get<std::string>();
    if (d.contains("test_dir")) c.data.test_dir = d.at("test_dir").get<std::string>();
  }
  if (j.contains("detector_train")) from_json(j.at("detector_train"), c.detector_train);
  if (j.contains("router_train")) from_json(j.at("router_train"), c.router_train);
  if (j.contains("routing")) {
    const auto& r = j.at("routing");
    if (r.contains("strategy")) c.routing.strategy = parse_strategy(r.at("strategy").get<std::string>());
    if (r.contains("lambda")) c.routing.lambda = r.at("lambda").get<Real>();
  }
  if (j.contains("decode")) from_json(j.at("decode"), c.decode);
  if (j.contains("latency")) from_json(j.at("latency"), c.latency);
  if (j.contains("calibration")) {
    const auto& cal = j.at("calibration");
    if (cal.contains("k")) cal.at("k").get_to(c.calibration_k);
    if (cal.contains("target_latency_ms")) c.target_latency_ms = cal.at("target_latency_ms").get<Real>();
  }
  if (j.contains("sweep") && j.at("sweep").contains("k_list")) j.at("sweep").at("k_list").get_to(c.k_list);
  if (j.contains("robustness")) {
    const auto& r = j.at("robustness");
    if (r.contains("k")) r.at("k").get_to(c.robustness_k);
    if (r.contains("sizes")) r.at("sizes").get_to(c.robustness_sizes);
    if (r.contains("resamples")) r.at("resamples").get_to(c.robustness_resamples);
  }
  if (j.contains("difficulty") && j.at("difficulty").contains("n_extremes")) {
    j.at("difficulty").at("n_extremes").get_to(c.n_extremes);
  }
}

std::string RunConfig::hash() const {
  nlohmann::json j = *this;
  j.erase("out");
  return sha1_hex(j.dump());
}

RunConfig load_run_config(const fs::path& file) {
  RunConfig c;
  read_json(file).get_to(c);
  return c;
}

std::uint64_t model_seed(std::uint64_t run_seed) { return derive_seed(run_seed, 0x100); }
std::uint64_t data_seed(std::uint64_t run_seed, int split) {
  return derive_seed(run_seed, 0x200 + static_cast<std::uint64_t>(split));
}
std::uint64_t phase_seed(std::uint64_t run_seed, int phase) {
  return derive_seed(run_seed, 0x300 + static_cast<std::uint64_t>(phase));
}

// ---------------------------------------------------------------------------

void write_json(const nlohmann::json& j, const fs::path& file) {
  std::ofstream os(file, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + file.string());
  os << j.dump(2) << '\n';
  if (!os) throw std::runtime_error("I/O failure writing " + file.string());
}

nlohmann::json read_json(const fs::path& file) {
  std::ifstream is(file);
  if (!is) throw std::runtime_error("cannot read " + file.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error("malformed JSON in " + file.string() + ": " + e.what());
  }
}

void write_delta(const DeltaOffset& delta, const fs::path& file) {
  write_json({{"delta", delta.delta}, {"dataset_id", delta.dataset_id}, {"size", delta.size}}, file);
}

DeltaOffset read_delta(const fs::path& file) {
  const auto j = read_json(file);
  return {j.at("delta").get<Real>(), j.at("dataset_id").get<std::string>(), j.at("size").get<std::size_t>()};
}

void write_scores_csv(const std::vector<std::uint64_t>& ids, const std::vector<Real>& scores, const fs::path& file) {
  if (ids.size() != scores.size()) throw std::invalid_argument("write_scores_csv: length mismatch");
  CsvWriter csv(file, {"scene_id", "phi"});
  for (std::size_t i = 0; i < ids.size(); ++i) csv.row(ids[i], scores[i]);
}

std::vector<Real> read_scores_csv(const fs::path& file) {
  std::ifstream is(file);
  if (!is) throw std::runtime_error("cannot read " + file.string());
  std::string line;
  std::getline(is, line);
  if (line != "scene_id,phi") throw std::runtime_error("unexpected score file header in " + file.string());
  std::vector<Real> out;
  while (std::getline(is, line)) {
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw std::runtime_error("malformed score row in " + file.string());
    out.push_back(std::stod(line.substr(comma + 1)));
  }
  return out;
}

void to_json(nlohmann::json& j, const RunManifest& m) {
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& s : m.stages) {
    stages.push_back({{"name", s.name}, {"config_hash", s.config_hash}, {"inputs", s.inputs}, {"outputs", s.outputs}});
  }
  j = nlohmann::json{{"config_hash", m.config_hash}, {"stages", stages}};
}

void from_json(const nlohmann::json& j, RunManifest& m) {
  j.at("config_hash").get_to(m.config_hash);
  m.stages.clear();
  for (const auto& s : j.at("stages")) {
    m.stages.push_back({s.at("name").get<std::string>(), s.at("config_hash").get<std::string>(),
                        s.at("inputs").get<std::map<std::string, std::string>>(),
                        s.at("outputs").get<std::map<std::string, std::string>>()});
  }
}

fs::path split_dir(const RunConfig& config, int split) {
  if (config.data.external()) {
    switch (split) {
      case 0: return *config.data.train_dir;
      case 1: return *config.data.val_dir;
      default: return *config.data.test_dir;
    }
  }
  static const char* kNames[] = {"train", "val", "test"};
  return config.out / "data" / kNames[split];
}

std::vector<SyntheticScene> load_split(const RunConfig& config, int split) {
  return load_dataset(split_dir(config, split));
}

// ---------------------------------------------------------------------------

namespace {

struct Stage {
  std::string name;
  std::vector<fs::path> inputs;
  std::vector<fs::path> outputs;
  std::function<void()> run;
};

std::string key_for(const fs::path& p, const fs::path& out) {
  const auto rel = p.lexically_relative(out);
  return (rel.empty() || rel.native().starts_with("..")) ? p.generic_string() : rel.generic_string();
}

std::map<std::string, std::string> hash_all(const std::vector<fs::path>& paths, const fs::path& out) {
  std::map<std::string, std::string> m;
  for (const auto& p : paths) m[key_for(p, out)] = content_hash(p);
  return m;
}

bool up_to_date(const StageRecord* rec, const Stage& st, const std::string& config_hash, const fs::path& out) {
  if (!rec || rec->config_hash != config_hash) return false;
  for (const auto& p : st.outputs) {
    if (!fs::exists(p)) return false;
  }
  for (const auto& p : st.inputs) {
    if (!fs::exists(p)) return false;
  }
  return rec->inputs == hash_all(st.inputs, out) && rec->outputs == hash_all(st.outputs, out);
}

std::vector<BranchRecord> train_records(const RunConfig& config, const CascadeModel& model) {
  return evaluate_branches(model, load_split(config, 0));
}

std::string dataset_id(const RunConfig& config, int split, std::size_t n) {
  static const char* kNames[] = {"train", "val", "test"};
  return std::string(kNames[split]) + ":" + content_hash(split_dir(config, split) / "manifest.json").substr(0, 12) +
         ":" + std::to_string(n);
}

}  // namespace

RunManifest read_manifest(const fs::path& out) {
  RunManifest m;
  if (fs::exists(out / artifacts::kManifest)) {
    try {
      read_json(out / artifacts::kManifest).get_to(m);
    } catch (const std::exception&) {
      m = {};
    }
  }
  return m;
}

static std::vector<Stage> build_stages(const RunConfig& config) {
  const fs::path out = config.out;
  const fs::path train = split_dir(config, 0), val = split_dir(config, 1), test = split_dir(config, 2);
  const fs::path detectors = out / artifacts::kDetectors, delta_file = out / artifacts::kDelta,
                 model_file = out / artifacts::kModel, scores_file = out / artifacts::kValScores;

  std::vector<Stage> stages;
  if (!config.data.external()) {
    stages.push_back({"gen-data", {}, {train, val, test}, [=, &config] {
                        const int sizes[] = {config.data.train_size, config.data.val_size, config.data.test_size};
                        for (int s = 0; s < 3; ++s) {
                          fs::remove_all(split_dir(config, s));
                          generate_dataset(config.data.scene, sizes[s], data_seed(config.seed, s), split_dir(config, s));
                        }
                      }});
  }
  stages.push_back({"train-detectors", {train}, {detectors, out / artifacts::kDetectorLog}, [=, &config] {
                      CascadeModel m = make_cascade(config.arch, model_seed(config.seed));
                      TrainConfig tc = config.detector_train;
                      tc.seed = phase_seed(config.seed, 0);
                      const auto log_rows = train_detectors_joint(m, load_split(config, 0), tc);
                      save_checkpoint(m, detectors);
                      write_detector_log_csv(log_rows, out / artifacts::kDetectorLog);
                    }});
  stages.push_back({"calibrate-delta", {detectors, train}, {delta_file}, [=, &config] {
                      const auto m = load_checkpoint(detectors);
                      const auto records = train_records(config, m);
                      write_delta(calibrate_delta(records, dataset_id(config, 0, records.size())), delta_file);
                    }});
  stages.push_back({"train-router", {detectors, delta_file, train}, {model_file, out / artifacts::kRouterLog}, [=, &config] {
                      CascadeModel m = load_checkpoint(detectors);
                      const auto records = train_records(config, m);
                      TrainConfig rc = config.router_train;
                      rc.seed = phase_seed(config.seed, 1);
                      std::vector<RouterEpochLog> epochs;
                      if (config.routing.strategy == Strategy::kProposed) {
                        epochs = train_router(m, read_delta(delta_file), records, rc);
                      } else {
                        epochs = train_router_ablation(m, records, config.routing, rc);
                        m.delta = read_delta(delta_file).delta;
                      }
                      save_checkpoint(m, model_file);
                      write_router_log_csv(epochs, out / artifacts::kRouterLog);
                    }});
  stages.push_back({"calibrate-threshold", {model_file, val}, {out / artifacts::kThreshold, scores_file}, [=, &config] {
                      const auto m = load_checkpoint(model_file);
                      const auto scenes = load_split(config, 1);
                      const auto scores = score_scenes(m, scenes);
                      ThresholdCalibration cal;
                      cal.k = config.calibration_k;
                      if (config.target_latency_ms) {
                        const auto lat = route_latency(m, config.latency, scenes.front().image);
                        cal.lat1 = lat.easy_ms;
                        cal.lat2 = lat.hard_ms;
                        cal.lat_t = *config.target_latency_ms;
                        cal.k = compute_k(lat.easy_ms, lat.hard_ms, cal.lat_t);
                      }
                      cal.tau = calibrate_threshold(scores, cal.k);
                      cal.scores_source = dataset_id(config, 1, scores.size());
                      cal.num_scores = scores.size();
                      std::vector<std::uint64_t> ids;
                      for (const auto& s : scenes) ids.push_back(s.scene_id);
                      write_scores_csv(ids, scores, scores_file);
                      write_json(cal, out / artifacts::kThreshold);
                    }});
  stages.push_back({"sweep", {model_file, scores_file, test}, {out / artifacts::kSweep}, [=, &config] {
                      const auto m = load_checkpoint(model_file);
                      const auto scenes = load_split(config, 2);
                      const auto outcomes = evaluate_routes(m, scenes, config.decode);
                      const auto lat = route_latency(m, config.latency, scenes.front().image);
                      write_sweep_csv(sweep_tradeoff(outcomes, read_scores_csv(scores_file), config.k_list,
                                                     config.arch.num_classes, lat),
                                      out / artifacts::kSweep);
                    }});
  stages.push_back({"reports",
                    {model_file, scores_file, delta_file, train, test},
                    {out / artifacts::kRobustness, out / artifacts::kDifficulty, out / artifacts::kLossCurve},
                    [=, &config] {
                      const auto m = load_checkpoint(model_file);
                      const auto test_scenes = load_split(config, 2);
                      const auto test_scores = score_scenes(m, test_scenes);
                      write_robustness_csv(threshold_robustness(read_scores_csv(scores_file), config.robustness_sizes,
                                                                config.robustness_k, test_scores,
                                                                config.robustness_resamples, config.seed),
                                           out / artifacts::kRobustness);
                      write_difficulty_csv(difficulty_report(test_scenes, test_scores, config.n_extremes).rows,
                                           out / artifacts::kDifficulty);
                      write_loss_curve_csv(loss_curve_report(m, read_delta(delta_file).delta, train_records(config, m)),
                                           out / artifacts::kLossCurve);
                    }});

  return stages;
}

PipelineReport run_pipeline(const RunConfig& config, const std::function<void(const std::string&)>& log) {
  config.validate();
  const fs::path out = config.out;
  fs::create_directories(out);
  const std::string config_hash = config.hash();
  auto say = [&](const std::string& s) {
    if (log) log(s);
  };
  const RunManifest previous = read_manifest(out);
  const auto stages = build_stages(config);

  PipelineReport report;
  report.manifest.config_hash = config_hash;
  for (const auto& st : stages) {
    const StageRecord* rec = nullptr;
    for (const auto& r : previous.stages) {
      if (r.name == st.name) rec = &r;
    }
    if (up_to_date(rec, st, config_hash, out)) {
      say("[skip] " + st.name);
      report.skipped.push_back(st.name);
      report.manifest.stages.push_back(*rec);
      continue;
    }
    say("[run]  " + st.name);
    try {
      st.run();
      report.manifest.stages.push_back({st.name, config_hash, hash_all(st.inputs, out), hash_all(st.outputs, out)});
    } catch (const std::exception& e) {
      // Keep what completed so a rerun resumes here.
      write_json(report.manifest, out / artifacts::kManifest);
      throw StageError(st.name, e.what());
    }
    report.executed.push_back(st.name);
    write_json(report.manifest, out / artifacts::kManifest);
  }
  write_json(report.manifest, out / artifacts::kManifest);
  return report;
}

std::vector<std::string> stage_names(const RunConfig& config) {
  std::vector<std::string> names;
  for (const auto& st : build_stages(config)) names.push_back(st.name);
  return names;
}

void run_stage(const RunConfig& config, const std::string& name,
               const std::function<void(const std::string&)>& log) {
  config.validate();
  const fs::path out = config.out;
  fs::create_directories(out);
  const auto stages = build_stages(config);
  const auto it = std::find_if(stages.begin(), stages.end(), [&](const Stage& s) { return s.name == name; });
  if (it == stages.end()) throw StageError(name, "no such stage in this configuration");
  for (const auto& p : it->inputs) {
    if (!fs::exists(p)) throw StageError(name, "missing input " + p.string() + " (run the earlier stages first)");
  }
  if (log) log("[run]  " + name);
  try {
    it->run();
  } catch (const std::exception& e) {
    throw StageError(name, e.what());
  }
  RunManifest m = read_manifest(out);
  const std::string config_hash = config.hash();
  m.config_hash = config_hash;
  StageRecord rec{name, config_hash, hash_all(it->inputs, out), hash_all(it->outputs, out)};
  // Keep records in pipeline order.
  std::vector<StageRecord> ordered;
  for (const auto& st : stages) {
    if (st.name == name) {
      ordered.push_back(rec);
      continue;
    }
    for (const auto& r : m.stages) {
      if (r.name == st.name) ordered.push_back(r);
    }
  }
  m.stages = std::move(ordered);
  write_json(m, out / artifacts::kManifest);
}

}  // namespace dydet
