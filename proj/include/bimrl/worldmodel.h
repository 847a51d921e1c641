#pragma once

// Level 1 of the hierarchy: a recurrent cell fed with the last transition and
// the current belief, plus the state / reward / action decoders behind the
// n-step factorized reconstruction loss.
//
// Term (i, j) of the loss is anchored at a = i - j. It predicts s_{i+1} and
// r_{i+1} from (s_a, a_a..a_i, m_a) and the action a_i from the state window
// (s_a..s_{i+1}, m_a), where m_a is the belief sample drawn at the anchor.

#include <span>
#include <utility>
#include <vector>

#include "bimrl/autodiff.h"
#include "bimrl/nn.h"

namespace bimrl {

struct WorldModelDims {
  int obs_embed = 32;
  int latent = 10;          // d_m
  int h1 = 64;
  int action_agg = 16;      // recurrent aggregator over action windows
  int state_agg = 32;       // recurrent aggregator over state windows
  int decoder_hidden = 64;
  int n = 3;
};

// All (i, j) pairs of the double sums for a trajectory of the given length.
// Pairs whose window would span two episodes are skipped when episode ids are
// supplied; an empty span treats the trajectory as one segment.
std::vector<std::pair<int, int>> recon_pairs(int length, int n,
                                             std::span<const int> episode = {});

// One trajectory in column-major layout (T columns, one per processed step).
struct ReconBatch {
  ad::Var embeds;            // d_obs x T, e(s_t)
  ad::Var next_embeds;       // d_obs x T, e(s'_t), the observation returned by step t
  ad::Var beliefs;           // d_m x T, belief samples m_t
  Mat next_obs;              // 147 x T, targets s_{t+1}
  Vec rewards;               // T, r_{t+1}
  std::vector<int> actions;  // T, a_t
  std::vector<int> episode;  // T, episode index per step (may be empty)
  Vec initial_obs;           // 147, s_0
  int anchor_stride = 1;     // keep only anchors a with a % stride == 0
};

struct ReconLoss {
  ad::Var total;
  ad::Var state;
  ad::Var reward;
  ad::Var action;
  ad::Var initial;
  int pair_count = 0;
};

class WorldModel {
 public:
  WorldModel() = default;
  WorldModel(ParameterStore& store, Rng& rng, const WorldModelDims& dims);

  const WorldModelDims& dims() const { return dims_; }

  // belief_features is the posterior mean ++ logvar (2 d_m).
  ad::Var level1_step(ad::Tape& tape, ad::Var h1, ad::Var obs_embed, int action, double reward,
                      ad::Var belief_features) const;

  // Single-term decoders. The action window has length j + 1 in [1, n + 1];
  // the state window has length j + 2 in [2, n + 2] and ends with the
  // successor state.
  ad::Var decode_state(ad::Tape& tape, ad::Var anchor_embed, std::span<const int> actions,
                       ad::Var m) const;
  ad::Var decode_reward(ad::Tape& tape, ad::Var anchor_embed, std::span<const int> actions,
                        ad::Var m) const;
  ad::Var decode_action_log_probs(ad::Tape& tape, std::span<const ad::Var> state_embeds,
                                  ad::Var m) const;
  ad::Var decode_action(ad::Tape& tape, std::span<const ad::Var> state_embeds, ad::Var m) const;
  ad::Var decode_initial_state(ad::Tape& tape, ad::Var m) const;

  ReconLoss reconstruction_loss(ad::Tape& tape, const ReconBatch& batch) const;

 private:
  void check_action_window(std::size_t len) const;
  ad::Var aggregate_actions(ad::Tape& tape, std::span<const int> actions) const;
  ad::Var state_head(ad::Tape& tape, ad::Var x) const;
  ad::Var reward_head(ad::Tape& tape, ad::Var x) const;

  WorldModelDims dims_;
  GruCell level1_;
  GruCell action_agg_;
  GruCell state_agg_;
  Mlp state_dec_;
  Mlp reward_dec_;
  Mlp action_dec_;
  Mlp initial_dec_;
};

}  // namespace bimrl
