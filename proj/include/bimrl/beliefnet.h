#pragma once

// Recurrent task-inference encoder. Produces a diagonal Gaussian posterior
// over the task latent m from the (observation, action, reward) history.

#include <utility>

#include "bimrl/autodiff.h"
#include "bimrl/nn.h"

namespace bimrl {

inline constexpr double kLogvarMin = -10.0;
inline constexpr double kLogvarMax = 10.0;

struct BeliefPosterior {
  Vec mean;
  Vec logvar;
};

struct EncoderState {
  Vec hidden;
};

class BeliefNet {
 public:
  BeliefNet() = default;
  BeliefNet(ParameterStore& store, Rng& rng, int obs_embed, int hidden, int latent);

  struct Output {
    ad::Var hidden;
    ad::Var mean;
    ad::Var logvar;
  };

  // action < 0 means "no previous action" (first step of a task) and is
  // encoded as an all-zero one-hot.
  Output step(ad::Tape& tape, ad::Var hidden, ad::Var obs_embed, int action,
              double reward) const;

  std::pair<EncoderState, BeliefPosterior> encode_step(const EncoderState& state,
                                                       const Vec& obs_embed, int action,
                                                       double reward) const;

  EncoderState initial_state() const { return {Vec::Zero(hidden_)}; }
  int obs_dim() const { return obs_embed_; }
  int hidden_dim() const { return hidden_; }
  int latent_dim() const { return latent_; }

 private:
  int obs_embed_ = 0;
  int hidden_ = 0;
  int latent_ = 0;
  GruCell gru_;
  Linear mean_head_;
  Linear logvar_head_;
};

// Input vector [one_hot(action); reward] shared by the recurrent cells that
// consume the last transition.
Vec action_reward_features(int action, double reward);

// KL(N(mean, exp(logvar)) || N(0, I)), summed over dimensions.
ad::Var kl_to_prior(ad::Var mean, ad::Var logvar);
double kl_to_prior(const BeliefPosterior& post);

// Reparameterized sample mean + exp(logvar / 2) * noise.
ad::Var sample(ad::Var mean, ad::Var logvar, const Vec& noise);
Vec sample(const BeliefPosterior& post, const Vec& noise);

}  // namespace bimrl
