#pragma once

// Level-3 controller, actor-critic heads, the four-episode rollout loop and
// the clipped policy-gradient trainer that assembles every loss.

#include <array>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "bimrl/autodiff.h"
#include "bimrl/beliefnet.h"
#include "bimrl/curiosity.h"
#include "bimrl/envgrid.h"
#include "bimrl/neuromem.h"
#include "bimrl/nn.h"
#include "bimrl/planner.h"
#include "bimrl/worldmodel.h"

namespace bimrl {

struct ModelConfig {
  int obs_embed = 32;
  int conv_channels = 8;
  int latent = 10;
  int encoder_hidden = 128;
  int h1 = 64;
  int h2 = 64;
  int h3 = 64;
  int action_agg = 16;
  int state_agg = 32;
  int decoder_hidden = 64;
  int value_hidden = 64;
  int head_hidden = 64;
  int memory_heads = 4;
  int memory_head_dim = 16;
  int combine_dim = 32;
  int n = 3;          // lookahead of the reconstruction loss
  int planner_n = 3;  // action window of the level-2 cell and value predictor
  bool persist_h3 = true;
};

struct MemoryConfig {
  bool enabled = true;
  int capacity = 256;
  double top_fraction = 0.25;
  double gamma_plus = 0.1;
  double gamma_minus = 0.01;
  double w_max = 1.0;
};

struct CuriosityConfig {
  bool enabled = true;
  double beta = 0.1;
  int knn_k = 10;
  double alpha_default = 1.0;
  CuriosityWeights weights;
};

struct LossConfig {
  double gamma = 0.95;
  double gae_lambda = 0.95;
  double clip = 0.2;
  double c_value = 0.5;
  double c_ent = 0.01;
  double c_elbo = 1.0;
  double kl_weight = 1.0;
  double c_plan = 0.5;
  int td_k = 5;
  bool planner_intrinsic = true;
  int elbo_stride = 1;
  // When false the reconstruction terms see the observation embeddings as
  // constants, so only the belief path carries ELBO gradient to the embedder.
  bool elbo_embed_grad = true;
  double stale_ratio_bound = 10.0;
};

struct OptimConfig {
  double lr = 7e-4;
  double adam_eps = 1e-5;
  double max_grad_norm = 0.5;
  int epochs = 4;
  int num_minibatches = 4;
  int tasks_per_batch = 16;
};

struct AgentConfig {
  ModelConfig model;
  MemoryConfig memory;
  CuriosityConfig curiosity;
  LossConfig loss;
  OptimConfig optim;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Agent {
 public:
  Agent(const AgentConfig& config, std::uint64_t init_seed);
  Agent(const Agent&) = delete;
  Agent& operator=(const Agent&) = delete;

  const AgentConfig& config() const { return config_; }
  ParameterStore& params() { return store_; }
  const ParameterStore& params() const { return store_; }

  const BeliefNet& belief() const { return belief_; }
  const WorldModel& world_model() const { return world_; }
  const Planner& planner() const { return planner_; }
  const MemoryModule& memory() const { return memory_; }

  int key_dim() const { return config_.model.obs_embed + 2 * config_.model.latent; }

  ad::Var embed(ad::Tape& tape, const env::Observation& obs) const;
  Vec embed_observation(const env::Observation& obs) const;

  ad::Var controller_step(ad::Tape& tape, ad::Var h3, ad::Var h2, ad::Var obs_embed,
                          ad::Var belief_features, ad::Var memory_readout) const;
  Vec controller_step(const Vec& h3, const Vec& h2, const Vec& obs_embed,
                      const Vec& belief_features, const Vec& memory_readout) const;

  // Policy logits (7x1) and value (1x1).
  std::pair<ad::Var, ad::Var> act(ad::Tape& tape, ad::Var h3) const;
  // Policy probabilities and value.
  std::pair<Vec, double> act(const Vec& h3) const;

 private:
  AgentConfig config_;
  ParameterStore store_;
  Linear conv_;
  Linear embed_out_;
  BeliefNet belief_;
  WorldModel world_;
  Planner planner_;
  MemoryModule memory_;
  GruCell controller_;
  Mlp actor_;
  Mlp critic_;
};

struct StepRecord {
  env::Observation obs;
  env::Observation next_obs;
  int action = 0;
  double log_prob = 0.0;
  double reward = 0.0;     // extrinsic r_{t+1}
  double intrinsic = 0.0;  // beta * alpha * curiosity
  double alpha = 0.0;
  double curiosity = 0.0;
  double value = 0.0;
  int episode = 0;
  int step_in_episode = 0;
  bool episode_done = false;
  bool task_done = false;
  Vec belief_noise;  // standard-normal draw behind this step's belief sample
  Vec belief_mean;
  Vec belief_logvar;
  Vec h3;
  Vec memory_readout;
  // Memory state seen by this step's read.
  int memory_slots = 0;
  double hebbian_norm = 0.0;
};

struct TaskRollout {
  env::TaskSpec task;
  std::vector<StepRecord> steps;
  std::array<double, env::kEpisodesPerTask> episode_return{};
  std::array<int, env::kEpisodesPerTask> episode_length{};
  std::array<bool, env::kEpisodesPerTask> episode_success{};
  EpisodicMemory final_memory;
  HebbianStore final_hebbian;

  int length() const { return static_cast<int>(steps.size()); }
};

// Runs the four episodes of one task under the current parameters.
TaskRollout meta_rollout(const Agent& agent, const env::TaskSpec& task, Rng& rng);

struct AdvantageTargets {
  std::vector<double> advantages;
  std::vector<double> returns;
};

// GAE over the extrinsic + intrinsic reward of one task (value 0 after the
// last step).
AdvantageTargets compute_advantages(const TaskRollout& rollout, double gamma, double lambda);

struct LossBreakdown {
  ad::Var total;
  double policy = 0.0;
  double value = 0.0;
  double entropy = 0.0;
  double recon_state = 0.0;
  double recon_reward = 0.0;
  double recon_action = 0.0;
  double recon_initial = 0.0;
  double kl = 0.0;
  double planner = 0.0;
  double mean_ratio = 1.0;
  double max_logp_diff = 0.0;
  double clip_fraction = 0.0;
};

// Loss of one task on the given tape. advantages are used as given (callers
// normalize them).
LossBreakdown total_loss(ad::Tape& tape, const Agent& agent, const TaskRollout& rollout,
                         const AdvantageTargets& targets, const LossConfig& coeffs);

struct MetricsRecord {
  int iteration = 0;
  long long frames = 0;
  std::array<double, env::kEpisodesPerTask> return_by_episode{};
  std::array<double, env::kEpisodesPerTask> success_by_episode{};
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double recon_state = 0.0;
  double recon_reward = 0.0;
  double recon_action = 0.0;
  double recon_initial = 0.0;
  double kl = 0.0;
  double planner_loss = 0.0;
  double intrinsic_mean = 0.0;
  double intrinsic_max = 0.0;
  double alpha_mean = 0.0;
  double grad_norm = 0.0;
  int updates = 0;               // optimizer steps taken this iteration
  bool updates_stopped = false;  // remaining epochs skipped after ratio drift
  double logp_diff_epoch0 = 0.0;
  double mean_ratio = 1.0;
  double clip_fraction = 0.0;
  double gamma_plus = 0.0;
  double gamma_minus = 0.0;
  double w_max = 0.0;
  double wall_clock = 0.0;
};

struct TaskDistribution {
  env::Family family = env::Family::kMultiRoom;
  env::FamilyParams params;
};

// Task seeds for training and evaluation come from disjoint halves of the
// 64-bit range.
std::uint64_t training_task_seed(std::uint64_t run_seed, long long index);
std::uint64_t evaluation_task_seed(std::uint64_t eval_seed, long long index);

class Trainer {
 public:
  Trainer(const AgentConfig& config, const TaskDistribution& tasks, std::uint64_t seed);

  MetricsRecord iterate();

  int iteration() const { return iteration_; }
  long long frames() const { return frames_; }
  Agent& agent() { return agent_; }
  const Agent& agent() const { return agent_; }
  Adam& optimizer() { return adam_; }
  const TaskRollout* last_rollout() const { return last_.empty() ? nullptr : &last_.back(); }

  // Versioned binary checkpoint: parameters, optimizer state, counters,
  // config text + hash and a snapshot of the last task's memory.
  void save_checkpoint(std::ostream& out, const std::string& config_text,
                       std::uint64_t config_hash) const;
  void load_checkpoint(std::istream& in);

 private:
  AgentConfig config_;
  TaskDistribution tasks_;
  std::uint64_t seed_;
  Agent agent_;
  Adam adam_;
  int iteration_ = 0;
  long long frames_ = 0;
  long long tasks_seen_ = 0;
  double wall_start_ = 0.0;
  std::vector<TaskRollout> last_;
};

struct CheckpointHeader {
  std::uint32_t version = 0;
  std::uint64_t config_hash = 0;
  std::string config_text;
};

inline constexpr char kCheckpointMagic[8] = {'B', 'I', 'M', 'R', 'L', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

// Reads only the header of a checkpoint stream.
CheckpointHeader read_checkpoint_header(std::istream& in);
// Loads parameters from a checkpoint into an agent (header already consumed
// or not; the stream is read from its start).
void load_agent_parameters(std::istream& in, Agent& agent);

struct EvalReport {
  int n_tasks = 0;
  std::array<double, env::kEpisodesPerTask> mean{};
  std::array<double, env::kEpisodesPerTask> stderr_{};
  std::vector<std::array<double, env::kEpisodesPerTask>> per_task;
};

EvalReport evaluate(const Agent& agent, const TaskDistribution& tasks, int n_tasks,
                    std::uint64_t seed);

}  // namespace bimrl
