#include "bimrl/worldmodel.h"

#include <algorithm>
#include <string>

#include "bimrl/beliefnet.h"
#include "bimrl/envgrid.h"

namespace bimrl {

namespace {

constexpr int kA = env::kNumActions;

Mat one_hot_cols(const std::vector<int>& actions, int offset, int count) {
  Mat m = Mat::Zero(kA, count);
  for (int a = 0; a < count; ++a) {
    const int t = a + offset;
    if (t < static_cast<int>(actions.size())) m(actions[t], a) = 1.0;
  }
  return m;
}

}  // namespace

std::vector<std::pair<int, int>> recon_pairs(int length, int n, std::span<const int> episode) {
  std::vector<std::pair<int, int>> pairs;
  for (int i = 0; i < length; ++i) {
    for (int j = 0; j <= std::min(n, i); ++j) {
      if (!episode.empty() && episode[i - j] != episode[i]) continue;
      pairs.emplace_back(i, j);
    }
  }
  return pairs;
}

WorldModel::WorldModel(ParameterStore& store, Rng& rng, const WorldModelDims& dims)
    : dims_(dims) {
  const int belief_features = 2 * dims.latent;
  level1_ = GruCell(store, "wm.level1", dims.obs_embed + kA + 1 + belief_features, dims.h1, rng);
  action_agg_ = GruCell(store, "wm.action_agg", kA, dims.action_agg, rng);
  state_agg_ = GruCell(store, "wm.state_agg", dims.obs_embed, dims.state_agg, rng);
  const int dec_in = dims.obs_embed + dims.action_agg + dims.latent;
  state_dec_ = Mlp(store, "wm.state_dec", dec_in, dims.decoder_hidden, env::kObsSize, rng,
                   Activation::kRelu);
  reward_dec_ =
      Mlp(store, "wm.reward_dec", dec_in, dims.decoder_hidden, 1, rng, Activation::kRelu);
  action_dec_ = Mlp(store, "wm.action_dec", dims.state_agg + dims.latent, dims.decoder_hidden, kA,
                    rng, Activation::kRelu, Init::kZero);
  initial_dec_ = Mlp(store, "wm.initial_dec", dims.latent, dims.decoder_hidden, env::kObsSize,
                     rng, Activation::kRelu);
}

ad::Var WorldModel::level1_step(ad::Tape& tape, ad::Var h1, ad::Var obs_embed, int action,
                                double reward, ad::Var belief_features) const {
  if (obs_embed.rows() != dims_.obs_embed) throw ShapeError("level1: obs_embed size mismatch");
  if (belief_features.rows() != 2 * dims_.latent) {
    throw ShapeError("level1: belief features must have 2*d_m entries");
  }
  ad::Var x = ad::concat_rows(
      {obs_embed, tape.constant(action_reward_features(action, reward)), belief_features});
  return level1_(tape, x, h1);
}

void WorldModel::check_action_window(std::size_t len) const {
  if (len == 0) throw ContractError("decoder: empty action window");
  if (len > static_cast<std::size_t>(dims_.n) + 1) {
    throw ContractError("decoder: action window longer than n + 1 = " +
                        std::to_string(dims_.n + 1));
  }
}

ad::Var WorldModel::aggregate_actions(ad::Tape& tape, std::span<const int> actions) const {
  ad::Var h = tape.constant(Vec::Zero(dims_.action_agg));
  for (int a : actions) {
    if (a < 0 || a >= kA) throw ShapeError("decoder: action out of range");
    h = action_agg_(tape, tape.constant(one_hot(a, kA)), h);
  }
  return h;
}

ad::Var WorldModel::state_head(ad::Tape& tape, ad::Var x) const {
  return ad::sigmoid(state_dec_(tape, x));
}

ad::Var WorldModel::reward_head(ad::Tape& tape, ad::Var x) const {
  return ad::sigmoid(reward_dec_(tape, x));
}

ad::Var WorldModel::decode_state(ad::Tape& tape, ad::Var anchor_embed,
                                 std::span<const int> actions, ad::Var m) const {
  check_action_window(actions.size());
  ad::Var agg = aggregate_actions(tape, actions);
  return state_head(tape, ad::concat_rows({anchor_embed, agg, m}));
}

ad::Var WorldModel::decode_reward(ad::Tape& tape, ad::Var anchor_embed,
                                  std::span<const int> actions, ad::Var m) const {
  check_action_window(actions.size());
  ad::Var agg = aggregate_actions(tape, actions);
  return reward_head(tape, ad::concat_rows({anchor_embed, agg, m}));
}

ad::Var WorldModel::decode_action_log_probs(ad::Tape& tape, std::span<const ad::Var> states,
                                            ad::Var m) const {
  if (states.size() < 2) throw ContractError("decode_action: window must include s_{i+1}");
  if (states.size() > static_cast<std::size_t>(dims_.n) + 2) {
    throw ContractError("decode_action: state window longer than n + 2");
  }
  ad::Var h = tape.constant(Vec::Zero(dims_.state_agg));
  for (const ad::Var& s : states) h = state_agg_(tape, s, h);
  return ad::log_softmax(action_dec_(tape, ad::concat_rows({h, m})));
}

ad::Var WorldModel::decode_action(ad::Tape& tape, std::span<const ad::Var> states,
                                  ad::Var m) const {
  return ad::exp(decode_action_log_probs(tape, states, m));
}

ad::Var WorldModel::decode_initial_state(ad::Tape& tape, ad::Var m) const {
  return ad::sigmoid(initial_dec_(tape, m));
}

ReconLoss WorldModel::reconstruction_loss(ad::Tape& tape, const ReconBatch& b) const {
  const int T = static_cast<int>(b.embeds.cols());
  if (T < 2) throw ContractError("reconstruction_loss: trajectory shorter than 2 steps");
  if (b.next_embeds.cols() != T || b.beliefs.cols() != T || b.next_obs.cols() != T ||
      b.rewards.size() != T || static_cast<int>(b.actions.size()) != T ||
      (!b.episode.empty() && static_cast<int>(b.episode.size()) != T)) {
    throw ShapeError("reconstruction_loss: per-step inputs disagree on length");
  }
  if (b.beliefs.rows() != dims_.latent) throw ShapeError("reconstruction_loss: belief size");
  if (b.anchor_stride < 1) throw ContractError("reconstruction_loss: anchor stride must be >= 1");

  ad::Var act_h = tape.constant(Mat::Zero(dims_.action_agg, T));
  ad::Var st_h = tape.constant(Mat::Zero(dims_.state_agg, T));
  std::vector<ad::Var> state_terms, reward_terms, action_terms;
  int count = 0;
  std::vector<int> shifted(T);
  for (int j = 0; j <= dims_.n; ++j) {
    std::vector<int> anchors, targets;
    for (int a = 0; a + j < T; ++a) {
      if (a % b.anchor_stride != 0) continue;
      if (!b.episode.empty() && b.episode[a] != b.episode[a + j]) continue;
      anchors.push_back(a);
      targets.push_back(a + j);
    }
    if (anchors.empty()) break;
    const int v = static_cast<int>(anchors.size());
    count += v;

    act_h = action_agg_(tape, tape.constant(one_hot_cols(b.actions, j, T)), act_h);
    for (int a = 0; a < T; ++a) shifted[a] = std::min(a + j, T - 1);
    st_h = state_agg_(tape, ad::gather_cols(b.embeds, shifted), st_h);

    ad::Var m = ad::gather_cols(b.beliefs, anchors);
    ad::Var dec_in = ad::concat_rows({ad::gather_cols(b.embeds, anchors),
                                      ad::gather_cols(act_h, anchors), m});

    Mat s_target(env::kObsSize, v);
    Mat r_target(1, v);
    Mat a_mask = Mat::Zero(kA, v);
    for (int c = 0; c < v; ++c) {
      s_target.col(c) = b.next_obs.col(targets[c]);
      r_target(0, c) = b.rewards(targets[c]);
      a_mask(b.actions[targets[c]], c) = 1.0;
    }
    ad::Var s_err = state_head(tape, dec_in) - tape.constant(std::move(s_target));
    state_terms.push_back(ad::sum(ad::square(s_err)) * (1.0 / env::kObsSize));
    ad::Var r_err = reward_head(tape, dec_in) - tape.constant(std::move(r_target));
    reward_terms.push_back(ad::sum(ad::square(r_err)));

    ad::Var last = state_agg_(tape, ad::gather_cols(b.next_embeds, targets),
                              ad::gather_cols(st_h, anchors));
    ad::Var logp = ad::log_softmax(action_dec_(tape, ad::concat_rows({last, m})));
    action_terms.push_back(-ad::sum(ad::mul(logp, tape.constant(std::move(a_mask)))));
  }

  auto total_of = [&](const std::vector<ad::Var>& parts) {
    ad::Var s = parts.front();
    for (std::size_t p = 1; p < parts.size(); ++p) s = s + parts[p];
    return s * (1.0 / count);
  };
  ReconLoss out;
  out.pair_count = count;
  out.state = total_of(state_terms);
  out.reward = total_of(reward_terms);
  out.action = total_of(action_terms);
  Mat s0 = b.initial_obs.replicate(1, T);
  ad::Var init_err = decode_initial_state(tape, b.beliefs) - tape.constant(std::move(s0));
  out.initial = ad::sum(ad::square(init_err)) * (1.0 / (static_cast<double>(env::kObsSize) * T));
  out.total = out.state + out.reward + out.action + out.initial;
  return out;
}

}  // namespace bimrl
