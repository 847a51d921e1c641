#pragma once

// Intrinsic reward: a decoder-error curiosity term scaled by a kNN "newness"
// coefficient measured against the episodic memory keys.

#include <span>

#include "bimrl/autodiff.h"
#include "bimrl/neuromem.h"

namespace bimrl {

struct CuriosityWeights {
  double state = 1.0 / 3.0;
  double action = 1.0 / 3.0;
  double reward = 1.0 / 3.0;
};

// Euclidean projection of (state, action, reward) onto the probability simplex.
CuriosityWeights project_to_simplex(double state, double action, double reward);

// Convex combination of the three error surrogates, floored at 0.
double curiosity_term(double neg_log_state, double neg_log_action, double neg_log_reward,
                      const CuriosityWeights& w);

// Distance from key to its k-th nearest stored key; alpha_default when fewer
// than k keys are stored.
double newness(const Vec& key, std::span<const Vec> keys, int k, double alpha_default = 1.0);
double newness(const Vec& key, const EpisodicMemory& memory, int k, double alpha_default = 1.0);

// beta * alpha * r_curiosity with both factors floored at 0.
double intrinsic_reward(double alpha, double r_curiosity, double beta);

}  // namespace bimrl
