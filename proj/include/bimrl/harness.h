#pragma once

// Experiment configuration, run directories, metrics files, evaluation
// reports, ablation expansion and SVG learning curves.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "bimrl/agentcore.h"

namespace bimrl::harness {

using Json = nlohmann::json;

class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& field, const std::string& message)
      : std::runtime_error(field + ": " + message), field_(field) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

struct RunConfig {
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  long long frame_budget = 300000;
  int checkpoint_every = 25;  // iterations; the final state is always saved
  int eval_every = 0;         // iterations; 0 disables in-training evaluation
  int eval_tasks = 100;
  bool parallel = false;
};

struct ExperimentConfig {
  TaskDistribution env;
  AgentConfig agent;
  RunConfig run;
};

// Nested JSON with every field present.
Json to_json(const ExperimentConfig& config);
// Strict parse: unknown keys and wrong types raise ConfigError naming the
// dotted field path. Missing keys keep their defaults.
ExperimentConfig from_json(const Json& j);
// Range checks on an already parsed config.
void validate(const ExperimentConfig& config);

// Compact, key-sorted text of the full config.
std::string canonical_text(const ExperimentConfig& config);
std::uint64_t fnv1a64(const std::string& text);
std::uint64_t config_hash(const ExperimentConfig& config);
std::string hash_hex(std::uint64_t hash);

// "section.field=value"; the value is parsed as JSON when possible and taken
// as a string otherwise.
void apply_override(Json& j, const std::string& assignment);
// BIMRL_SECTION__FIELD=value entries of the environment, in sorted order.
std::vector<std::string> env_overrides(char** envp);

// Reads the file (missing → std::filesystem::filesystem_error), then applies
// environment and command-line overrides in that order.
ExperimentConfig load_config(const std::filesystem::path& path,
                             const std::vector<std::string>& env_assignments,
                             const std::vector<std::string>& cli_assignments);

nlohmann::ordered_json metrics_to_json(const MetricsRecord& m, std::uint64_t seed,
                                        std::uint64_t hash);
MetricsRecord metrics_from_json(const Json& j);
std::vector<MetricsRecord> read_metrics(const std::filesystem::path& file);

// Trapezoidal area under the episode-4 return curve over frames, divided by
// the frame span.
double area_under_curve(const std::vector<MetricsRecord>& records);

struct TrainOptions {
  std::filesystem::path out_root = "runs";
  // Name of the run directory; empty selects <timestamp>-<hash8>.
  std::string run_name;
  std::function<void(std::uint64_t seed, const MetricsRecord&)> on_record;
};

struct RunResult {
  std::filesystem::path dir;
  std::map<std::uint64_t, std::vector<MetricsRecord>> metrics;
};

RunResult train(const ExperimentConfig& config, const TrainOptions& options);

// Checkpoint file name of a seed's final state inside a run directory.
std::filesystem::path final_checkpoint(const std::filesystem::path& run_dir, std::uint64_t seed);

class HashMismatch : public std::runtime_error {
 public:
  HashMismatch(std::uint64_t checkpoint, std::uint64_t config);
  std::uint64_t checkpoint_hash() const { return checkpoint_; }
  std::uint64_t config_hash() const { return config_; }

 private:
  std::uint64_t checkpoint_;
  std::uint64_t config_;
};

// Evaluates a checkpoint. When expected is non-null the checkpoint's config
// hash must equal config_hash(*expected).
EvalReport evaluate_checkpoint(const std::filesystem::path& checkpoint, int n_tasks,
                               std::uint64_t seed, const ExperimentConfig* expected = nullptr);

std::string format_report(const EvalReport& report);

// The four ablation variants keyed by name: full, no_mem, no_value_pred,
// no_nstep.
std::vector<std::pair<std::string, ExperimentConfig>> ablations(const ExperimentConfig& base);

// One curve per run directory: mean episode-4 return over seeds against
// frames, with the min/max band across seeds.
void plot_runs(const std::vector<std::filesystem::path>& run_dirs,
               const std::filesystem::path& out_svg);

}  // namespace bimrl::harness
