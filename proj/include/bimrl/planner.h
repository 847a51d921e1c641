#pragma once

// Level 2 of the hierarchy: a recurrent cell over h1, the current state and
// the next n actions, and an n-step value predictor V_psi(s_i, a_{i..i+j}, h2)
// regressed onto k-step TD returns.

#include <span>
#include <utility>
#include <vector>

#include "bimrl/autodiff.h"
#include "bimrl/nn.h"

namespace bimrl {

struct PlannerDims {
  int obs_embed = 32;
  int h1 = 64;
  int h2 = 64;
  int action_agg = 16;
  int value_hidden = 64;
  int n = 3;
};

// R_{t+1} + gamma R_{t+2} + ... + gamma^{k-1} R_{t+k} + gamma^k V(S_{t+k}).
double td_return(std::span<const double> rewards, double bootstrap_value, double gamma);

// (i, j) pairs with a complete k-step target inside a trajectory of the given
// length: j <= n and i + j + k <= length.
std::vector<std::pair<int, int>> planner_pairs(int length, int n, int k);

struct PlannerBatch {
  ad::Var embeds;                // d_obs x T
  ad::Var h2;                    // d_h2 x T
  std::vector<int> actions;      // T
  std::vector<double> rewards;   // T, reward following a_t
  std::vector<double> critic;    // T, V_theta(s_t); treated as constants
};

class Planner {
 public:
  Planner() = default;
  Planner(ParameterStore& store, Rng& rng, const PlannerDims& dims);

  const PlannerDims& dims() const { return dims_; }

  // next_actions may be shorter than n (or empty); missing slots are zero.
  ad::Var level2_step(ad::Tape& tape, ad::Var h2, ad::Var h1, ad::Var obs_embed,
                      std::span<const int> next_actions) const;

  ad::Var predict_value(ad::Tape& tape, ad::Var obs_embed, std::span<const int> actions,
                        ad::Var h2) const;

  // Mean squared error over planner_pairs(T, n, k); the bootstrap value at
  // the end of the trajectory is 0.
  ad::Var planner_loss(ad::Tape& tape, const PlannerBatch& batch, int k, double gamma,
                       int* pair_count = nullptr) const;

 private:
  PlannerDims dims_;
  GruCell level2_;
  GruCell action_agg_;
  Mlp value_;
};

}  // namespace bimrl
