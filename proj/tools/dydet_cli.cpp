// Command-line front end: one subcommand per pipeline stage plus `run`.

#include <charconv>
#include <cmath>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "dydet/csv.hpp"
#include "dydet/eval.hpp"
#include "dydet/pipeline.hpp"

using namespace dydet;
namespace fs = std::filesystem;

namespace {

struct Globals {
  std::string config_file;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
};

RunConfig base_config(const Globals& g) {
  RunConfig c = g.config_file.empty() ? RunConfig{} : load_run_config(g.config_file);
  if (g.seed) c.seed = *g.seed;
  if (g.out) c.out = *g.out;
  return c;
}

std::vector<Real> parse_real_list(const std::string& text) {
  std::vector<Real> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    Real v = 0;
    const auto [ptr, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
    if (ec != std::errc{} || ptr != item.data() + item.size()) {
      throw std::invalid_argument("not a number in list: '" + item + "'");
    }
    out.push_back(v);
  }
  if (out.empty()) throw std::invalid_argument("empty list");
  return out;
}

void log_line(const std::string& s) { std::cerr << s << '\n'; }

int split_index(const std::string& name) {
  if (name == "train") return 0;
  if (name == "val") return 1;
  if (name == "test") return 2;
  throw std::invalid_argument("unknown split '" + name + "'");
}

void cmd_infer(const RunConfig& c, std::optional<Real> tau_opt, const std::string& split,
               const std::string& data_dir, int limit) {
  const auto model = load_checkpoint(c.out / artifacts::kModel);
  Real tau;
  if (tau_opt) {
    tau = *tau_opt;
  } else {
    ThresholdCalibration cal;
    read_json(c.out / artifacts::kThreshold).get_to(cal);
    tau = cal.tau;
  }
  auto scenes = data_dir.empty() ? load_split(c, split_index(split)) : load_dataset(data_dir);
  if (limit > 0 && static_cast<std::size_t>(limit) < scenes.size()) scenes.resize(limit);

  CsvWriter csv(c.out / "infer.csv", {"scene_id", "phi", "route", "flops", "cls", "score", "cx", "cy", "w", "h"});
  std::vector<std::vector<Detection>> dets;
  std::vector<GroundTruth> truths;
  std::size_t hard = 0;
  std::int64_t flops = 0;
  for (const auto& s : scenes) {
    auto r = infer_dynamic(model, tau, s.image, c.decode);
    if (r.decision.route == Route::kHard) ++hard;
    flops += r.decision.flops;
    for (const auto& d : r.detections) {
      csv.row(s.scene_id, r.decision.phi, to_string(r.decision.route), r.decision.flops, d.cls, d.score, d.box.cx,
              d.box.cy, d.box.w, d.box.h);
    }
    dets.push_back(std::move(r.detections));
    truths.push_back(ground_truth(s));
  }
  const auto ev = evaluate_ap(dets, truths, c.arch.num_classes);
  std::cout << "images " << scenes.size() << "\ntau " << format_real(tau) << "\nhard_fraction "
            << format_real(static_cast<Real>(hard) / scenes.size()) << "\nmean_flops "
            << format_real(static_cast<Real>(flops) / scenes.size()) << "\nap " << format_real(ev.ap) << '\n';
}

void cmd_robustness(const RunConfig& c) {
  const auto model = load_checkpoint(c.out / artifacts::kModel);
  const auto test_scores = score_scenes(model, load_split(c, 2));
  const auto rows = threshold_robustness(read_scores_csv(c.out / artifacts::kValScores), c.robustness_sizes,
                                         c.robustness_k, test_scores, c.robustness_resamples, c.seed);
  write_robustness_csv(rows, c.out / artifacts::kRobustness);
  std::cout << "val_size abs_dev hard_fraction_error\n";
  for (const auto& r : rows) {
    std::cout << r.val_size << ' ' << format_real(r.abs_dev) << ' ' << format_real(r.hard_fraction_error) << '\n';
  }
}

void cmd_difficulty(const RunConfig& c) {
  const auto model = load_checkpoint(c.out / artifacts::kModel);
  const auto scenes = load_split(c, 2);
  const auto report = difficulty_report(scenes, score_scenes(model, scenes), c.n_extremes);
  write_difficulty_csv(report.rows, c.out / artifacts::kDifficulty);
  auto show = [](const char* title, const std::vector<DifficultyRow>& rows) {
    std::cout << title << '\n';
    for (const auto& r : rows) {
      std::cout << "  scene " << r.scene_id << " phi " << format_real(r.phi) << " objects " << r.num_objects
                << " mean_size " << format_real(r.mean_size) << '\n';
    }
  };
  show("easiest", report.easiest);
  show("hardest", report.hardest);
  std::cout << "spearman(phi, objects) " << format_real(report.phi_vs_count.rho) << " p "
            << format_real(report.phi_vs_count.p_value) << '\n';
}

void cmd_flops(const RunConfig& c) {
  const fs::path ckpt = c.out / artifacts::kModel;
  const auto model = fs::exists(ckpt) ? load_checkpoint(ckpt) : make_cascade(c.arch, model_seed(c.seed));
  const auto b = flops_breakdown(model);
  std::cout << "backbone1 " << b.backbone1 << "\nhead1 " << b.head1 << "\nrouter " << b.router << "\nconnection "
            << b.connection << "\nbackbone2 " << b.backbone2 << "\nhead2 " << b.head2 << "\neasy "
            << count_flops(model, Route::kEasy) << "\nhard " << count_flops(model, Route::kHard) << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-detector cascade with a learned difficulty router"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config_file, "JSON run configuration")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Run seed");
  app.add_option("--out", g.out, "Output directory");

  auto* run = app.add_subcommand("run", "Run every stage, resuming from the manifest");

  auto* gen = app.add_subcommand("gen-data", "Generate the train/val/test scene sets");
  std::optional<int> train_size, val_size, test_size;
  gen->add_option("--train-size", train_size);
  gen->add_option("--val-size", val_size);
  gen->add_option("--test-size", test_size);

  auto* train_det = app.add_subcommand("train-detectors", "Train both detectors jointly");
  std::optional<int> det_epochs;
  train_det->add_option("--epochs", det_epochs);

  auto* delta = app.add_subcommand("calibrate-delta", "Median loss gap on the training set");

  auto* train_router = app.add_subcommand("train-router", "Train the router with frozen detectors");
  std::optional<std::string> strategy;
  std::optional<Real> lambda;
  std::optional<int> router_epochs;
  std::optional<Real> router_lr;
  train_router->add_option("--strategy", strategy)
      ->check(CLI::IsMember({"proposed", "unconstrained", "lambda", "random", "ap-based"}));
  train_router->add_option("--lambda", lambda);
  train_router->add_option("--epochs", router_epochs);
  train_router->add_option("--lr", router_lr);

  auto* calib = app.add_subcommand("calibrate-threshold", "Threshold from validation scores");
  std::optional<Real> k_opt, target_latency;
  auto* k_flag = calib->add_option("--k", k_opt, "Fraction of images sent to the second detector");
  calib->add_option("--target-latency", target_latency, "Target mean latency in ms")->excludes(k_flag);

  auto* infer = app.add_subcommand("infer", "Dynamic inference over a scene set");
  std::optional<Real> tau;
  std::string split = "test", data_dir;
  int limit = 0;
  infer->add_option("--tau", tau, "Routing threshold; defaults to threshold.json");
  infer->add_option("--split", split)->check(CLI::IsMember({"train", "val", "test"}));
  infer->add_option("--data", data_dir, "Dataset directory instead of a split")->check(CLI::ExistingDirectory);
  infer->add_option("--limit", limit);

  auto* sweep = app.add_subcommand("sweep", "Accuracy/cost trade-off over k");
  std::string k_list;
  sweep->add_option("--k-list", k_list, "Comma-separated k values");

  auto* robust = app.add_subcommand("robustness", "Threshold stability versus validation size");
  std::optional<Real> robust_k;
  std::string sizes;
  std::optional<int> resamples;
  robust->add_option("--k", robust_k);
  robust->add_option("--sizes", sizes, "Comma-separated validation sizes");
  robust->add_option("--resamples", resamples);

  auto* diff = app.add_subcommand("difficulty-report", "Easiest/hardest test scenes by score");
  std::optional<std::size_t> n_extremes;
  diff->add_option("--n", n_extremes);

  auto* flops = app.add_subcommand("flops", "Multiply-accumulate counts per component and route");

  CLI11_PARSE(app, argc, argv);

  std::string stage = app.get_subcommands().front()->get_name();
  try {
    RunConfig c = base_config(g);
    if (train_size) c.data.train_size = *train_size;
    if (val_size) c.data.val_size = *val_size;
    if (test_size) c.data.test_size = *test_size;
    if (det_epochs) c.detector_train.epochs = *det_epochs;
    if (strategy) c.routing.strategy = parse_strategy(*strategy);
    if (lambda) c.routing.lambda = *lambda;
    if (router_epochs) c.router_train.epochs = *router_epochs;
    if (router_lr) c.router_train.lr = *router_lr;
    if (k_opt) {
      c.calibration_k = *k_opt;
      c.target_latency_ms.reset();
    }
    if (target_latency) c.target_latency_ms = *target_latency;
    if (!k_list.empty()) c.k_list = parse_real_list(k_list);
    if (robust_k) c.robustness_k = *robust_k;
    if (!sizes.empty()) {
      c.robustness_sizes.clear();
      for (Real v : parse_real_list(sizes)) {
        if (v < 1 || v != std::floor(v)) throw std::invalid_argument("sizes must be positive integers");
        c.robustness_sizes.push_back(static_cast<std::size_t>(v));
      }
    }
    if (resamples) c.robustness_resamples = *resamples;
    if (n_extremes) c.n_extremes = *n_extremes;

    if (*run) {
      const auto report = run_pipeline(c, log_line);
      std::cout << "executed " << report.executed.size() << " skipped " << report.skipped.size() << '\n';
    } else if (*gen || *train_det || *delta || *train_router || *calib || *sweep) {
      run_stage(c, stage, log_line);
      if (*calib) {
        ThresholdCalibration cal;
        read_json(c.out / artifacts::kThreshold).get_to(cal);
        std::cout << "k " << format_real(cal.k) << "\ntau " << format_real(cal.tau) << '\n';
      } else if (*delta) {
        std::cout << "delta " << format_real(read_delta(c.out / artifacts::kDelta).delta) << '\n';
      }
    } else {
      c.validate();
      if (*infer) cmd_infer(c, tau, split, data_dir, limit);
      if (*robust) cmd_robustness(c);
      if (*diff) cmd_difficulty(c);
      if (*flops) cmd_flops(c);
    }
  } catch (const StageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: stage '" << stage << "': " << e.what() << '\n';
    return 1;
  }
  return 0;
}
