// bimrl: train, evaluate, plot and ablate from the command line.
//
// Exit codes: 0 success, 1 runtime failure, 2 missing input file or bad
// usage, 3 invalid configuration, 4 checkpoint/config hash mismatch.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "bimrl/harness.h"

extern char** environ;

namespace fs = std::filesystem;
using namespace bimrl;
using namespace bimrl::harness;

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kMissingInput = 2, kBadConfig = 3, kHashMismatch = 4 };

ExperimentConfig load(const std::string& path, const std::vector<std::string>& sets) {
  return load_config(path, env_overrides(environ), sets);
}

void print_record(std::uint64_t seed, const MetricsRecord& m) {
  std::printf("seed %llu it %4d frames %8lld  return %.3f %.3f %.3f %.3f  ent %.3f  int %.4f  %.0fs\n",
              static_cast<unsigned long long>(seed), m.iteration, m.frames,
              m.return_by_episode[0], m.return_by_episode[1], m.return_by_episode[2],
              m.return_by_episode[3], m.entropy, m.intrinsic_mean, m.wall_clock);
  std::fflush(stdout);
}

int run_train(const std::string& config_path, const std::vector<std::string>& sets,
              const std::string& out_root, const std::string& name, bool parallel, bool quiet) {
  ExperimentConfig c = load(config_path, sets);
  if (parallel) c.run.parallel = true;
  TrainOptions opts;
  opts.out_root = out_root;
  opts.run_name = name;
  if (!quiet) opts.on_record = print_record;
  std::printf("config hash %s\n", hash_hex(config_hash(c)).c_str());
  RunResult r = train(c, opts);
  for (const auto& [seed, records] : r.metrics) {
    const MetricsRecord& last = records.back();
    std::printf("seed %llu: %d iterations, %lld frames, final episode-4 return %.3f, AUC %.3f\n",
                static_cast<unsigned long long>(seed), last.iteration + 1, last.frames,
                last.return_by_episode[3], area_under_curve(records));
  }
  std::printf("run directory: %s\n", r.dir.string().c_str());
  return kOk;
}

int run_eval(const std::vector<std::string>& checkpoints, const std::string& config_path,
             const std::vector<std::string>& sets, int n_tasks, std::uint64_t seed) {
  ExperimentConfig expected;
  const bool check = !config_path.empty();
  if (check) expected = load(config_path, sets);
  std::vector<EvalReport> reports;
  for (const std::string& ckpt : checkpoints) {
    EvalReport rep = evaluate_checkpoint(ckpt, n_tasks, seed, check ? &expected : nullptr);
    std::printf("%s\n%s", ckpt.c_str(), format_report(rep).c_str());
    reports.push_back(std::move(rep));
  }
  if (reports.size() > 1 && n_tasks > 0) {
    std::printf("across %zu checkpoints (mean of per-checkpoint means):\n", reports.size());
    for (int e = 0; e < env::kEpisodesPerTask; ++e) {
      double s = 0.0;
      for (const auto& r : reports) s += r.mean[e];
      std::printf("  episode %d: %.4f\n", e + 1, s / reports.size());
    }
  }
  return kOk;
}

int run_ablate(const std::string& config_path, const std::vector<std::string>& sets,
               const std::string& out_dir, bool train_them, const std::string& runs_root) {
  ExperimentConfig base = load(config_path, sets);
  fs::create_directories(out_dir);
  for (const auto& [name, cfg] : ablations(base)) {
    const fs::path file = fs::path(out_dir) / (name + ".json");
    std::ofstream(file) << to_json(cfg).dump(2) << "\n";
    std::printf("%-14s %s  %s\n", name.c_str(), hash_hex(config_hash(cfg)).c_str(),
                file.string().c_str());
  }
  if (!train_them) return kOk;
  for (const auto& [name, cfg] : ablations(base)) {
    TrainOptions opts;
    opts.out_root = runs_root;
    opts.run_name = name;
    opts.on_record = print_record;
    RunResult r = train(cfg, opts);
    std::printf("%s -> %s\n", name.c_str(), r.dir.string().c_str());
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Meta-reinforcement-learning agent with episodic and Hebbian memory"};
  app.require_subcommand(1);

  std::string config_path, out_root = "runs", run_name, out_path, ablate_dir = "ablations";
  std::vector<std::string> sets, checkpoints, run_dirs;
  bool parallel = false, quiet = false, ablate_train = false;
  int n_tasks = 100;
  std::uint64_t eval_seed = 0;

  auto* train_cmd = app.add_subcommand("train", "Train every seed of a config");
  train_cmd->add_option("-c,--config", config_path, "JSON config file")->required();
  train_cmd->add_option("-s,--set", sets, "Override, e.g. optim.lr=3e-4 (repeatable)");
  train_cmd->add_option("-o,--out", out_root, "Root directory for run directories");
  train_cmd->add_option("--name", run_name, "Run directory name (default <timestamp>-<hash>)");
  train_cmd->add_flag("--parallel", parallel, "Train seeds in parallel threads");
  train_cmd->add_flag("-q,--quiet", quiet, "Do not print per-iteration progress");

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate checkpoints on held-out tasks");
  eval_cmd->add_option("checkpoints", checkpoints, "Checkpoint files")->required();
  eval_cmd->add_option("-c,--config", config_path, "Refuse checkpoints trained with another config");
  eval_cmd->add_option("-s,--set", sets, "Override applied to --config");
  eval_cmd->add_option("-n,--tasks", n_tasks, "Number of evaluation tasks");
  eval_cmd->add_option("--seed", eval_seed, "Evaluation seed");

  auto* plot_cmd = app.add_subcommand("plot", "Plot episode-4 return against frames");
  plot_cmd->add_option("runs", run_dirs, "Run directories")->required();
  plot_cmd->add_option("-o,--out", out_path, "Output SVG file")->required();

  auto* ablate_cmd = app.add_subcommand("ablate", "Write (and optionally train) the ablations");
  ablate_cmd->add_option("-c,--config", config_path, "Base JSON config")->required();
  ablate_cmd->add_option("-s,--set", sets, "Override applied to the base config");
  ablate_cmd->add_option("-o,--out", ablate_dir, "Directory for the ablation configs");
  ablate_cmd->add_flag("--train", ablate_train, "Train each ablation after writing it");
  ablate_cmd->add_option("--runs", out_root, "Root directory for run directories");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kMissingInput;
  }

  try {
    if (*train_cmd) return run_train(config_path, sets, out_root, run_name, parallel, quiet);
    if (*eval_cmd) return run_eval(checkpoints, config_path, sets, n_tasks, eval_seed);
    if (*plot_cmd) {
      std::vector<fs::path> dirs(run_dirs.begin(), run_dirs.end());
      plot_runs(dirs, out_path);
      std::printf("wrote %s (%zu curves)\n", out_path.c_str(), dirs.size());
      return kOk;
    }
    if (*ablate_cmd) return run_ablate(config_path, sets, ablate_dir, ablate_train, out_root);
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.code().message() << ": " << e.path1().string() << "\n";
    return kMissingInput;
  } catch (const ConfigError& e) {
    std::cerr << "invalid config: " << e.what() << "\n";
    return kBadConfig;
  } catch (const HashMismatch& e) {
    std::cerr << "refusing to evaluate: checkpoint config hash " << hash_hex(e.checkpoint_hash())
              << " differs from config hash " << hash_hex(e.config_hash()) << "\n";
    return kHashMismatch;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kOk;
}
