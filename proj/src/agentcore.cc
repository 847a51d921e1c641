#include "bimrl/agentcore.h"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>

#include "bimrl/binio.h"

namespace bimrl {

namespace {

constexpr int kA = env::kNumActions;
constexpr int kCells = env::kViewSize * env::kViewSize;

WorldModelDims world_dims(const ModelConfig& m) {
  WorldModelDims d;
  d.obs_embed = m.obs_embed;
  d.latent = m.latent;
  d.h1 = m.h1;
  d.action_agg = m.action_agg;
  d.state_agg = m.state_agg;
  d.decoder_hidden = m.decoder_hidden;
  d.n = m.n;
  return d;
}

PlannerDims planner_dims(const ModelConfig& m) {
  PlannerDims d;
  d.obs_embed = m.obs_embed;
  d.h1 = m.h1;
  d.h2 = m.h2;
  d.action_agg = m.action_agg;
  d.value_hidden = m.value_hidden;
  d.n = m.planner_n;
  return d;
}

MemoryDims memory_dims(const AgentConfig& c) {
  MemoryDims d;
  d.key_dim = c.model.obs_embed + 2 * c.model.latent;
  d.value_dim = c.model.h3;
  d.query_dim = c.model.h3;
  d.heads = c.model.memory_heads;
  d.head_dim = c.model.memory_head_dim;
  d.combine_dim = c.model.combine_dim;
  d.gamma_plus = c.memory.gamma_plus;
  d.gamma_minus = c.memory.gamma_minus;
  d.w_max = c.memory.w_max;
  return d;
}

double now_seconds() {
  using namespace std::chrono;
  return duration<double>(steady_clock::now().time_since_epoch()).count();
}

// Recurrent state of the hierarchy and memories over one task, on one tape.
// Collection and loss evaluation both run through this, so the policy seen
// at update time is computed by exactly the same operations.
class Unroll {
 public:
  struct Out {
    ad::Var embed;
    ad::Var mean;
    ad::Var logvar;
    ad::Var belief_features;
    ad::Var h2;
    ad::Var h2_tf;
    ad::Var h3;
    ad::Var readout;
    ad::Var logits;
    ad::Var value;
    ad::Var key_var;
    Vec key;
  };

  Unroll(const Agent& agent, ad::Tape& tape, bool teacher_forced)
      : agent_(agent),
        tape_(tape),
        teacher_forced_(teacher_forced),
        memory_(agent.config().memory.capacity) {
    const ModelConfig& m = agent.config().model;
    enc_ = tape.constant(Vec::Zero(m.encoder_hidden));
    h1_ = tape.constant(Vec::Zero(m.h1));
    h2_ = tape.constant(Vec::Zero(m.h2));
    h2_tf_ = h2_;
    h3_ = tape.constant(Vec::Zero(m.h3));
    w_assoc_ = tape.constant(Mat::Zero(m.h3, agent.key_dim()));
  }

  Out step(const env::Observation& obs, std::span<const int> future_actions) {
    const AgentConfig& cfg = agent_.config();
    Out o;
    o.embed = agent_.embed(tape_, obs);
    BeliefNet::Output b = agent_.belief().step(tape_, enc_, o.embed, prev_action_, prev_reward_);
    enc_ = b.hidden;
    o.mean = b.mean;
    o.logvar = b.logvar;
    o.belief_features = ad::concat_rows({b.mean, b.logvar});
    h1_ = agent_.world_model().level1_step(tape_, h1_, o.embed, prev_action_, prev_reward_,
                                           o.belief_features);
    h2_ = agent_.planner().level2_step(tape_, h2_, h1_, o.embed, {});
    o.h2 = h2_;
    if (teacher_forced_) {
      h2_tf_ = agent_.planner().level2_step(tape_, h2_tf_, h1_, o.embed, future_actions);
      o.h2_tf = h2_tf_;
    }
    ad::Var key = ad::concat_rows({o.embed, o.belief_features});
    o.key_var = key;
    o.key = key.value();
    if (cfg.memory.enabled) {
      Vec weights;
      ad::Var epi = agent_.memory().read_projected(tape_, pkeys_, pvals_, h3_, &weights);
      if (weights.size() > 0) memory_.add_attention(weights);
      ad::Var heb = ad::matmul(w_assoc_, key);
      o.readout = agent_.memory().combine(tape_, h3_, epi, heb);
    } else {
      o.readout = tape_.constant(Vec::Zero(cfg.model.h3));
    }
    h3_ = agent_.controller_step(tape_, h3_, h2_, o.embed, o.belief_features, o.readout);
    o.h3 = h3_;
    std::tie(o.logits, o.value) = agent_.act(tape_, h3_);
    return o;
  }

  // Memory write, episode-end consolidation and the transition inputs of the
  // next step.
  void finish(const Out& o, int action, double reward, int step_in_episode, bool episode_done) {
    const AgentConfig& cfg = agent_.config();
    if (cfg.memory.enabled) {
      if (static_cast<int>(memory_.size()) == memory_.capacity()) {
        pkeys_.erase(pkeys_.begin());
        pvals_.erase(pvals_.begin());
        keys_.erase(keys_.begin());
        vals_.erase(vals_.begin());
      }
      memory_.write(o.key, o.h3.value(), step_in_episode + 1);
      pkeys_.push_back(agent_.memory().project_key(tape_, o.key_var));
      pvals_.push_back(agent_.memory().project_value(tape_, o.h3));
      keys_.push_back(o.key_var);
      vals_.push_back(o.h3);
    }
    if (episode_done) {
      if (cfg.memory.enabled && !memory_.empty()) {
        if (!gamma_plus_.valid()) {
          gamma_plus_ = agent_.memory().gamma_plus(tape_);
          gamma_minus_ = agent_.memory().gamma_minus(tape_);
          w_max_ = agent_.memory().w_max(tape_);
        }
        const Vec ref = reference_times(memory_, step_in_episode + 1);
        for (int i : consolidation_order(ref, cfg.memory.top_fraction)) {
          w_assoc_ = ad::hebbian_step(w_assoc_, vals_[i], keys_[i], gamma_plus_, gamma_minus_,
                                      w_max_);
        }
      }
      memory_.clear();
      pkeys_.clear();
      pvals_.clear();
      keys_.clear();
      vals_.clear();
      if (!cfg.model.persist_h3) h3_ = tape_.constant(Vec::Zero(cfg.model.h3));
    }
    prev_action_ = action;
    prev_reward_ = reward;
  }

  const EpisodicMemory& memory() const { return memory_; }
  double hebbian_norm() const { return w_assoc_.value().norm(); }

  HebbianStore hebbian() const {
    HebbianStore s = agent_.memory().make_store();
    s.w_assoc = w_assoc_.value();
    return s;
  }

 private:
  const Agent& agent_;
  ad::Tape& tape_;
  bool teacher_forced_;
  ad::Var enc_, h1_, h2_, h2_tf_, h3_, w_assoc_;
  ad::Var gamma_plus_, gamma_minus_, w_max_;
  int prev_action_ = -1;
  double prev_reward_ = 0.0;
  EpisodicMemory memory_;
  // Projected and raw slot contents, aligned with memory_.
  std::vector<ad::Var> pkeys_, pvals_, keys_, vals_;
};

std::vector<int> future_window(const TaskRollout& r, int t, int n) {
  std::vector<int> w;
  for (int s = t; s < std::min(r.length(), t + n); ++s) w.push_back(r.steps[s].action);
  return w;
}

}  // namespace

Agent::Agent(const AgentConfig& config, std::uint64_t init_seed) : config_(config) {
  const ModelConfig& m = config.model;
  Rng rng(init_seed);
  conv_ = Linear(store_, "embed.conv", env::kChannels, m.conv_channels, rng);
  embed_out_ = Linear(store_, "embed.out", m.conv_channels * kCells, m.obs_embed, rng);
  belief_ = BeliefNet(store_, rng, m.obs_embed, m.encoder_hidden, m.latent);
  world_ = WorldModel(store_, rng, world_dims(m));
  planner_ = Planner(store_, rng, planner_dims(m));
  memory_ = MemoryModule(store_, rng, memory_dims(config));
  controller_ = GruCell(store_, "controller", m.h2 + m.obs_embed + 2 * m.latent + m.h3, m.h3, rng);
  actor_ = Mlp(store_, "actor", m.h3, m.head_hidden, kA, rng, Activation::kTanh, Init::kZero);
  critic_ = Mlp(store_, "critic", m.h3, m.head_hidden, 1, rng, Activation::kTanh, Init::kZero);
}

ad::Var Agent::embed(ad::Tape& tape, const env::Observation& obs) const {
  Mat x = Eigen::Map<const Mat>(obs.values.data(), env::kChannels, kCells);
  ad::Var conv = ad::relu(conv_(tape, tape.constant(std::move(x))));
  ad::Var flat = ad::reshape(conv, config_.model.conv_channels * kCells, 1);
  return ad::tanh(embed_out_(tape, flat));
}

Vec Agent::embed_observation(const env::Observation& obs) const {
  ad::Tape tape;
  return embed(tape, obs).value();
}

ad::Var Agent::controller_step(ad::Tape& tape, ad::Var h3, ad::Var h2, ad::Var obs_embed,
                               ad::Var belief_features, ad::Var memory_readout) const {
  if (memory_readout.rows() != config_.model.h3) {
    throw ShapeError("controller: memory readout must have d_h3 entries");
  }
  return controller_(tape, ad::concat_rows({h2, obs_embed, belief_features, memory_readout}), h3);
}

Vec Agent::controller_step(const Vec& h3, const Vec& h2, const Vec& obs_embed,
                           const Vec& belief_features, const Vec& memory_readout) const {
  ad::Tape t;
  return controller_step(t, t.constant(h3), t.constant(h2), t.constant(obs_embed),
                         t.constant(belief_features), t.constant(memory_readout))
      .value();
}

std::pair<ad::Var, ad::Var> Agent::act(ad::Tape& tape, ad::Var h3) const {
  return {actor_(tape, h3), critic_(tape, h3)};
}

std::pair<Vec, double> Agent::act(const Vec& h3) const {
  ad::Tape t;
  auto [logits, value] = act(t, t.constant(h3));
  Vec p = ad::softmax(logits).value();
  return {p, value.scalar()};
}

TaskRollout meta_rollout(const Agent& agent, const env::TaskSpec& task, Rng& rng) {
  const AgentConfig& cfg = agent.config();
  const int latent = cfg.model.latent;
  TaskRollout out;
  out.task = task;
  out.steps.reserve(static_cast<std::size_t>(task.task_horizon));
  ad::Tape tape;
  Unroll unroll(agent, tape, false);
  env::GridEnv env;
  for (int ep = 0; ep < env::kEpisodesPerTask; ++ep) {
    env::Observation obs = env.reset(task, ep);
    for (int u = 0;; ++u) {
      const int slots = static_cast<int>(unroll.memory().size());
      const double hebb = unroll.hebbian_norm();
      Unroll::Out o = unroll.step(obs, {});
      const Vec logp = ad::log_softmax(o.logits).value();
      double draw = rng.uniform();
      int action = kA - 1;
      for (int a = 0; a < kA; ++a) {
        draw -= std::exp(logp(a));
        if (draw < 0.0) {
          action = a;
          break;
        }
      }
      StepRecord rec;
      rec.obs = obs;
      rec.action = action;
      rec.log_prob = logp(action);
      rec.value = o.value.scalar();
      rec.episode = ep;
      rec.step_in_episode = u;
      rec.belief_noise.resize(latent);
      for (int k = 0; k < latent; ++k) rec.belief_noise(k) = rng.normal();
      rec.belief_mean = o.mean.value();
      rec.belief_logvar = o.logvar.value();
      rec.h3 = o.h3.value();
      rec.memory_readout = o.readout.value();
      rec.memory_slots = slots;
      rec.hebbian_norm = hebb;

      env::Transition tr = env.step(action);
      rec.next_obs = tr.obs;
      rec.reward = tr.reward;
      rec.episode_done = tr.episode_done;
      rec.task_done = tr.task_done;

      if (cfg.curiosity.enabled && cfg.curiosity.beta != 0.0) {
        ad::Tape ct;
        const WorldModel& wm = agent.world_model();
        Vec next_embed = agent.embed(ct, tr.obs).value();
        Vec bfeat = o.belief_features.value();
        Vec query(agent.key_dim());
        query << next_embed, bfeat;
        rec.alpha = newness(query, unroll.memory(), cfg.curiosity.knn_k, cfg.curiosity.alpha_default);
        Vec m = sample(BeliefPosterior{rec.belief_mean, rec.belief_logvar}, rec.belief_noise);
        ad::Var e = ct.constant(o.embed.value());
        ad::Var mv = ct.constant(m);
        const int window[] = {action};
        Vec s_pred = wm.decode_state(ct, e, window, mv).value();
        Eigen::Map<const Vec> target(tr.obs.values.data(), env::kObsSize);
        const double state_err = (s_pred - target).squaredNorm() / env::kObsSize;
        const double r_pred = wm.decode_reward(ct, e, window, mv).scalar();
        const double reward_err = (r_pred - tr.reward) * (r_pred - tr.reward);
        const ad::Var states[] = {e, ct.constant(next_embed)};
        const double action_err = -wm.decode_action_log_probs(ct, states, mv).value()(action);
        rec.curiosity = curiosity_term(state_err, action_err, reward_err, cfg.curiosity.weights);
        rec.intrinsic = intrinsic_reward(rec.alpha, rec.curiosity, cfg.curiosity.beta);
      }
      unroll.finish(o, action, tr.reward, u, tr.episode_done);
      out.episode_return[ep] += tr.reward;
      if (tr.reward > 0.0) out.episode_success[ep] = true;
      out.steps.push_back(std::move(rec));
      if (tr.episode_done) {
        out.episode_length[ep] = u + 1;
        break;
      }
      obs = tr.obs;
    }
  }
  out.final_memory = unroll.memory();
  out.final_hebbian = unroll.hebbian();
  return out;
}

AdvantageTargets compute_advantages(const TaskRollout& r, double gamma, double lambda) {
  const int T = r.length();
  AdvantageTargets out;
  out.advantages.assign(T, 0.0);
  out.returns.assign(T, 0.0);
  double next_value = 0.0, gae = 0.0;
  for (int t = T - 1; t >= 0; --t) {
    const StepRecord& s = r.steps[t];
    const double delta = s.reward + s.intrinsic + gamma * next_value - s.value;
    gae = delta + gamma * lambda * gae;
    out.advantages[t] = gae;
    out.returns[t] = gae + s.value;
    next_value = s.value;
  }
  return out;
}

LossBreakdown total_loss(ad::Tape& tape, const Agent& agent, const TaskRollout& r,
                         const AdvantageTargets& targets, const LossConfig& c) {
  const int T = r.length();
  if (T < 2) throw ContractError("total_loss: rollout shorter than 2 steps");
  if (static_cast<int>(targets.advantages.size()) != T ||
      static_cast<int>(targets.returns.size()) != T) {
    throw ShapeError("total_loss: targets do not match the rollout length");
  }
  const ModelConfig& m = agent.config().model;
  const bool use_planner = c.c_plan != 0.0;
  Unroll unroll(agent, tape, use_planner);

  std::vector<ad::Var> logits, values, embeds, next_embeds, means, logvars, h2s;
  logits.reserve(T);
  values.reserve(T);
  embeds.reserve(T);
  next_embeds.assign(T, ad::Var{});
  for (int t = 0; t < T; ++t) {
    const StepRecord& s = r.steps[t];
    std::vector<int> future = use_planner ? future_window(r, t, m.planner_n) : std::vector<int>{};
    Unroll::Out o = unroll.step(s.obs, future);
    logits.push_back(o.logits);
    values.push_back(o.value);
    embeds.push_back(o.embed);
    means.push_back(o.mean);
    logvars.push_back(o.logvar);
    if (use_planner) h2s.push_back(o.h2_tf);
    if (t > 0 && !r.steps[t - 1].episode_done) next_embeds[t - 1] = o.embed;
    unroll.finish(o, s.action, s.reward, s.step_in_episode, s.episode_done);
    if (s.episode_done || t == T - 1) next_embeds[t] = agent.embed(tape, s.next_obs);
  }

  LossBreakdown out;

  // Clipped surrogate, entropy and value regression.
  ad::Var L = ad::concat_cols(logits);
  ad::Var logp_all = ad::log_softmax(L);
  Mat mask = Mat::Zero(kA, T);
  Mat old_logp(1, T), adv(1, T), ret(1, T);
  for (int t = 0; t < T; ++t) {
    mask(r.steps[t].action, t) = 1.0;
    old_logp(0, t) = r.steps[t].log_prob;
    adv(0, t) = targets.advantages[t];
    ret(0, t) = targets.returns[t];
  }
  ad::Var ones = tape.constant(Mat::Ones(1, kA));
  ad::Var logp = ad::matmul(ones, ad::mul(logp_all, tape.constant(mask)));
  ad::Var ratio = ad::exp(logp - tape.constant(old_logp));
  ad::Var advv = tape.constant(adv);
  ad::Var surr = ad::minimum(ad::mul(ratio, advv),
                             ad::mul(ad::clamp(ratio, 1.0 - c.clip, 1.0 + c.clip), advv));
  ad::Var policy = -ad::sum(surr) * (1.0 / T);
  ad::Var entropy = -ad::sum(ad::mul(ad::softmax(L), logp_all)) * (1.0 / T);
  ad::Var V = ad::concat_cols(values);
  ad::Var value_loss = ad::mean(ad::square(V - tape.constant(ret)));

  {
    const Mat rv = ratio.value();
    const Mat lp = logp.value();
    out.mean_ratio = rv.mean();
    out.max_logp_diff = (lp - old_logp).cwiseAbs().maxCoeff();
    int clipped = 0;
    for (int t = 0; t < T; ++t) clipped += std::abs(rv(0, t) - 1.0) > c.clip;
    out.clip_fraction = static_cast<double>(clipped) / T;
  }
  if (!(out.mean_ratio <= c.stale_ratio_bound && out.mean_ratio >= 1.0 / c.stale_ratio_bound)) {
    std::ostringstream msg;
    msg << "stale batch: mean probability ratio " << out.mean_ratio << " outside [1/"
        << c.stale_ratio_bound << ", " << c.stale_ratio_bound << "]";
    throw StaleBatchError(msg.str());
  }

  ad::Var total = policy + value_loss * c.c_value - entropy * c.c_ent;
  out.policy = policy.scalar();
  out.value = value_loss.scalar();
  out.entropy = entropy.scalar();

  if (c.c_elbo != 0.0) {
    ad::Var M = ad::concat_cols(means);
    ad::Var LV = ad::concat_cols(logvars);
    Mat noise(m.latent, T);
    for (int t = 0; t < T; ++t) noise.col(t) = r.steps[t].belief_noise;
    ad::Var beliefs = M + ad::mul(ad::exp(LV * 0.5), tape.constant(noise));

    ReconBatch b;
    b.embeds = ad::concat_cols(embeds);
    b.next_embeds = ad::concat_cols(next_embeds);
    if (!c.elbo_embed_grad) {
      b.embeds = tape.constant(b.embeds.value());
      b.next_embeds = tape.constant(b.next_embeds.value());
    }
    b.beliefs = beliefs;
    b.next_obs.resize(env::kObsSize, T);
    b.rewards.resize(T);
    for (int t = 0; t < T; ++t) {
      b.next_obs.col(t) = Eigen::Map<const Vec>(r.steps[t].next_obs.values.data(), env::kObsSize);
      b.rewards(t) = r.steps[t].reward;
      b.actions.push_back(r.steps[t].action);
      b.episode.push_back(r.steps[t].episode);
    }
    b.initial_obs = Eigen::Map<const Vec>(r.steps[0].obs.values.data(), env::kObsSize);
    b.anchor_stride = c.elbo_stride;
    ReconLoss recon = agent.world_model().reconstruction_loss(tape, b);

    std::vector<int> kept;
    for (int t = 0; t < T; t += c.elbo_stride) kept.push_back(t);
    ad::Var kl = kl_to_prior(ad::gather_cols(M, kept), ad::gather_cols(LV, kept)) *
                 (1.0 / static_cast<double>(kept.size()));
    total = total + (recon.total + kl * c.kl_weight) * c.c_elbo;
    out.recon_state = recon.state.scalar();
    out.recon_reward = recon.reward.scalar();
    out.recon_action = recon.action.scalar();
    out.recon_initial = recon.initial.scalar();
    out.kl = kl.scalar();
  }

  if (use_planner) {
    PlannerBatch pb;
    pb.embeds = ad::concat_cols(embeds);
    pb.h2 = ad::concat_cols(h2s);
    for (const StepRecord& s : r.steps) {
      pb.actions.push_back(s.action);
      pb.rewards.push_back(s.reward + (c.planner_intrinsic ? s.intrinsic : 0.0));
      pb.critic.push_back(s.value);
    }
    ad::Var pl = agent.planner().planner_loss(tape, pb, c.td_k, c.gamma);
    total = total + pl * c.c_plan;
    out.planner = pl.scalar();
  }
  out.total = total;
  return out;
}

std::uint64_t training_task_seed(std::uint64_t run_seed, long long index) {
  return Rng::mix(run_seed, static_cast<std::uint64_t>(index)) & ~(1ULL << 63);
}

std::uint64_t evaluation_task_seed(std::uint64_t eval_seed, long long index) {
  return Rng::mix(eval_seed ^ 0xe7a1e7a1e7a1ULL, static_cast<std::uint64_t>(index)) | (1ULL << 63);
}

Trainer::Trainer(const AgentConfig& config, const TaskDistribution& tasks, std::uint64_t seed)
    : config_(config),
      tasks_(tasks),
      seed_(seed),
      agent_(config, Rng::mix(seed, 0x1417)),
      adam_(agent_.params(), AdamOptions{config.optim.lr, 0.9, 0.999, config.optim.adam_eps}),
      wall_start_(now_seconds()) {}

MetricsRecord Trainer::iterate() {
  const OptimConfig& opt = config_.optim;
  const LossConfig& lc = config_.loss;
  MetricsRecord rec;

  std::vector<TaskRollout> batch;
  batch.reserve(static_cast<std::size_t>(opt.tasks_per_batch));
  for (int k = 0; k < opt.tasks_per_batch; ++k) {
    const std::uint64_t task_seed = training_task_seed(seed_, tasks_seen_);
    env::TaskSpec task = env::generate_task(tasks_.family, task_seed, tasks_.params);
    Rng rng(Rng::mix(seed_ ^ 0x0c011ec7ULL, static_cast<std::uint64_t>(tasks_seen_)));
    ++tasks_seen_;
    batch.push_back(meta_rollout(agent_, task, rng));
  }

  long long steps = 0;
  double intrinsic_sum = 0.0, alpha_sum = 0.0;
  for (const TaskRollout& r : batch) {
    steps += r.length();
    for (int e = 0; e < env::kEpisodesPerTask; ++e) {
      rec.return_by_episode[e] += r.episode_return[e] / batch.size();
      rec.success_by_episode[e] += (r.episode_success[e] ? 1.0 : 0.0) / batch.size();
    }
    for (const StepRecord& s : r.steps) {
      intrinsic_sum += s.intrinsic;
      alpha_sum += s.alpha;
      rec.intrinsic_max = std::max(rec.intrinsic_max, s.intrinsic);
    }
  }
  frames_ += steps;
  rec.intrinsic_mean = intrinsic_sum / static_cast<double>(steps);
  rec.alpha_mean = alpha_sum / static_cast<double>(steps);

  std::vector<AdvantageTargets> targets;
  double sum = 0.0, sq = 0.0;
  for (const TaskRollout& r : batch) {
    targets.push_back(compute_advantages(r, lc.gamma, lc.gae_lambda));
    for (double a : targets.back().advantages) {
      sum += a;
      sq += a * a;
    }
  }
  const double mean = sum / static_cast<double>(steps);
  const double sd = std::sqrt(std::max(0.0, sq / static_cast<double>(steps) - mean * mean));
  for (AdvantageTargets& t : targets) {
    for (double& a : t.advantages) a = (a - mean) / (sd + 1e-8);
  }

  Rng shuffle(Rng::mix(seed_ ^ 0x5b0ffULL, static_cast<std::uint64_t>(iteration_)));
  const int n_tasks = static_cast<int>(batch.size());
  const int groups = std::max(1, std::min(opt.num_minibatches, n_tasks));
  int evaluations = 0;
  double grad_norm_sum = 0.0;
  int updates = 0;
  bool stopped = false;
  for (int epoch = 0; epoch < opt.epochs && !stopped; ++epoch) {
    std::vector<int> order(n_tasks);
    std::iota(order.begin(), order.end(), 0);
    for (int i = n_tasks - 1; i > 0; --i) std::swap(order[i], order[shuffle.uniform_int(0, i + 1)]);
    for (int g = 0; g < groups && !stopped; ++g) {
      const int begin = g * n_tasks / groups, end = (g + 1) * n_tasks / groups;
      agent_.params().zero_grad();
      for (int p = begin; p < end; ++p) {
        const int idx = order[p];
        ad::Tape tape;
        LossBreakdown lb;
        try {
          lb = total_loss(tape, agent_, batch[idx], targets[idx], lc);
        } catch (const StaleBatchError&) {
          // Before any update the batch itself is stale. After updates the
          // policy has drifted past the sanity bound within this iteration:
          // stop updating until fresh data is collected.
          if (updates == 0) throw;
          stopped = true;
          break;
        }
        if (!std::isfinite(lb.total.scalar())) {
          std::ostringstream msg;
          msg << "non-finite loss at iteration " << iteration_ << " epoch " << epoch
              << ": policy=" << lb.policy << " value=" << lb.value << " entropy=" << lb.entropy
              << " recon_state=" << lb.recon_state << " recon_reward=" << lb.recon_reward
              << " recon_action=" << lb.recon_action << " kl=" << lb.kl
              << " planner=" << lb.planner << " mean_ratio=" << lb.mean_ratio
              << " steps=" << steps << " intrinsic_mean=" << rec.intrinsic_mean
              << " intrinsic_max=" << rec.intrinsic_max;
          throw TrainingError(msg.str());
        }
        tape.backward(lb.total * (1.0 / (end - begin)));
        tape.flush_param_grads();
        if (epoch == 0 && g == 0) rec.logp_diff_epoch0 = std::max(rec.logp_diff_epoch0, lb.max_logp_diff);
        rec.policy_loss += lb.policy;
        rec.value_loss += lb.value;
        rec.entropy += lb.entropy;
        rec.recon_state += lb.recon_state;
        rec.recon_reward += lb.recon_reward;
        rec.recon_action += lb.recon_action;
        rec.recon_initial += lb.recon_initial;
        rec.kl += lb.kl;
        rec.planner_loss += lb.planner;
        rec.mean_ratio += lb.mean_ratio;
        rec.clip_fraction += lb.clip_fraction;
        ++evaluations;
      }
      if (stopped) break;
      const double gn = agent_.params().clip_grad_norm(opt.max_grad_norm);
      if (!std::isfinite(gn)) {
        throw TrainingError("non-finite gradient norm at iteration " + std::to_string(iteration_));
      }
      grad_norm_sum += gn;
      ++updates;
      adam_.step();
    }
  }
  if (evaluations > 0) {
    const double inv = 1.0 / evaluations;
    for (double* v : {&rec.policy_loss, &rec.value_loss, &rec.entropy, &rec.recon_state,
                      &rec.recon_reward, &rec.recon_action, &rec.recon_initial, &rec.kl,
                      &rec.planner_loss, &rec.mean_ratio, &rec.clip_fraction}) {
      *v *= inv;
    }
  }
  rec.grad_norm = updates > 0 ? grad_norm_sum / updates : 0.0;
  rec.updates = updates;
  rec.updates_stopped = stopped;
  HebbianStore meta = agent_.memory().make_store();
  rec.gamma_plus = meta.gamma_plus;
  rec.gamma_minus = meta.gamma_minus;
  rec.w_max = meta.w_max;
  rec.iteration = iteration_++;
  rec.frames = frames_;
  rec.wall_clock = now_seconds() - wall_start_;
  last_.clear();
  last_.push_back(std::move(batch.back()));
  return rec;
}

void Trainer::save_checkpoint(std::ostream& out, const std::string& config_text,
                              std::uint64_t config_hash) const {
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  binio::put<std::uint32_t>(out, kCheckpointVersion);
  binio::put<std::uint64_t>(out, config_hash);
  binio::put_string(out, config_text);
  binio::put<std::int32_t>(out, iteration_);
  binio::put<std::int64_t>(out, frames_);
  binio::put<std::int64_t>(out, tasks_seen_);
  binio::put<std::uint64_t>(out, seed_);
  const auto& params = agent_.params().all();
  binio::put<std::uint64_t>(out, params.size());
  for (const auto& p : params) {
    binio::put_string(out, p->name);
    binio::put_mat(out, p->value);
  }
  binio::put<std::int64_t>(out, adam_.steps());
  for (const Mat& mm : adam_.first_moments()) binio::put_mat(out, mm);
  for (const Mat& vv : adam_.second_moments()) binio::put_mat(out, vv);
  const TaskRollout* last = last_rollout();
  binio::put<std::uint8_t>(out, last ? 1 : 0);
  if (last) write_memory(out, last->final_memory, last->final_hebbian);
  if (!out) throw std::runtime_error("checkpoint write failed");
}

CheckpointHeader read_checkpoint_header(std::istream& in) {
  char magic[sizeof(kCheckpointMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw binio::FormatError("not a checkpoint (bad magic)");
  }
  CheckpointHeader h;
  h.version = binio::get<std::uint32_t>(in);
  if (h.version != kCheckpointVersion) {
    throw binio::FormatError("unsupported checkpoint version " + std::to_string(h.version));
  }
  h.config_hash = binio::get<std::uint64_t>(in);
  h.config_text = binio::get_string(in);
  return h;
}

namespace {

struct CheckpointBody {
  int iteration = 0;
  long long frames = 0;
  long long tasks_seen = 0;
  std::uint64_t seed = 0;
};

CheckpointBody read_body_and_params(std::istream& in, Agent& agent) {
  CheckpointBody b;
  b.iteration = binio::get<std::int32_t>(in);
  b.frames = binio::get<std::int64_t>(in);
  b.tasks_seen = binio::get<std::int64_t>(in);
  b.seed = binio::get<std::uint64_t>(in);
  const auto count = binio::get<std::uint64_t>(in);
  auto& params = agent.params().all();
  if (count != params.size()) {
    throw binio::FormatError("checkpoint holds " + std::to_string(count) +
                             " parameters, model expects " + std::to_string(params.size()));
  }
  for (auto& p : params) {
    const std::string name = binio::get_string(in);
    Mat value = binio::get_mat(in);
    if (name != p->name || value.rows() != p->value.rows() || value.cols() != p->value.cols()) {
      throw binio::FormatError("checkpoint parameter " + name + " does not match " + p->name);
    }
    p->value = std::move(value);
  }
  return b;
}

}  // namespace

void load_agent_parameters(std::istream& in, Agent& agent) {
  read_checkpoint_header(in);
  read_body_and_params(in, agent);
}

void Trainer::load_checkpoint(std::istream& in) {
  read_checkpoint_header(in);
  CheckpointBody b = read_body_and_params(in, agent_);
  iteration_ = b.iteration;
  frames_ = b.frames;
  tasks_seen_ = b.tasks_seen;
  seed_ = b.seed;
  adam_.set_steps(binio::get<std::int64_t>(in));
  for (Mat& mm : adam_.first_moments()) mm = binio::get_mat(in);
  for (Mat& vv : adam_.second_moments()) vv = binio::get_mat(in);
  last_.clear();
  if (binio::get<std::uint8_t>(in)) {
    TaskRollout snapshot;
    read_memory(in, snapshot.final_memory, snapshot.final_hebbian);
    last_.push_back(std::move(snapshot));
  }
}

EvalReport evaluate(const Agent& agent, const TaskDistribution& tasks, int n_tasks,
                    std::uint64_t seed) {
  EvalReport rep;
  rep.n_tasks = std::max(0, n_tasks);
  for (int i = 0; i < rep.n_tasks; ++i) {
    const std::uint64_t task_seed = evaluation_task_seed(seed, i);
    env::TaskSpec task = env::generate_task(tasks.family, task_seed, tasks.params);
    Rng rng(Rng::mix(task_seed, 0xe7a1));
    TaskRollout r = meta_rollout(agent, task, rng);
    rep.per_task.push_back(r.episode_return);
  }
  if (rep.n_tasks == 0) return rep;
  for (int e = 0; e < env::kEpisodesPerTask; ++e) {
    double s = 0.0, sq = 0.0;
    for (const auto& row : rep.per_task) {
      s += row[e];
      sq += row[e] * row[e];
    }
    const double n = rep.n_tasks;
    rep.mean[e] = s / n;
    const double var = n > 1 ? std::max(0.0, (sq - n * rep.mean[e] * rep.mean[e]) / (n - 1)) : 0.0;
    rep.stderr_[e] = std::sqrt(var / n);
  }
  return rep;
}

}  // namespace bimrl
