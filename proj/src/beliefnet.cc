#include "bimrl/beliefnet.h"

#include <string>

#include "bimrl/envgrid.h"

namespace bimrl {

BeliefNet::BeliefNet(ParameterStore& store, Rng& rng, int obs_embed, int hidden, int latent)
    : obs_embed_(obs_embed), hidden_(hidden), latent_(latent) {
  gru_ = GruCell(store, "belief.gru", obs_embed + env::kNumActions + 1, hidden, rng);
  mean_head_ = Linear(store, "belief.mean", hidden, latent, rng);
  logvar_head_ = Linear(store, "belief.logvar", hidden, latent, rng);
}

Vec action_reward_features(int action, double reward) {
  Vec f = Vec::Zero(env::kNumActions + 1);
  if (action >= 0) {
    if (action >= env::kNumActions) throw ShapeError("action index out of range");
    f(action) = 1.0;
  }
  f(env::kNumActions) = reward;
  return f;
}

BeliefNet::Output BeliefNet::step(ad::Tape& tape, ad::Var hidden, ad::Var obs_embed, int action,
                                  double reward) const {
  if (obs_embed.rows() != obs_embed_ || obs_embed.cols() != 1) {
    throw ShapeError("belief: obs_embed must be " + std::to_string(obs_embed_) + "x1");
  }
  ad::Var x =
      ad::concat_rows({obs_embed, tape.constant(action_reward_features(action, reward))});
  Output out;
  out.hidden = gru_(tape, x, hidden);
  out.mean = mean_head_(tape, out.hidden);
  out.logvar = ad::clamp(logvar_head_(tape, out.hidden), kLogvarMin, kLogvarMax);
  return out;
}

std::pair<EncoderState, BeliefPosterior> BeliefNet::encode_step(const EncoderState& state,
                                                                const Vec& obs_embed,
                                                                int action, double reward) const {
  if (state.hidden.size() != hidden_) throw ShapeError("belief: hidden state size mismatch");
  ad::Tape tape;
  Output o = step(tape, tape.constant(state.hidden), tape.constant(obs_embed), action, reward);
  return {EncoderState{o.hidden.value()}, BeliefPosterior{o.mean.value(), o.logvar.value()}};
}

ad::Var kl_to_prior(ad::Var mean, ad::Var logvar) {
  if (mean.rows() != logvar.rows() || mean.cols() != logvar.cols()) {
    throw ShapeError("kl_to_prior: mean/logvar shape mismatch");
  }
  ad::Var terms = ad::square(mean) + ad::exp(logvar) - logvar;
  return ad::add_scalar(ad::sum(terms), -static_cast<double>(mean.value().size())) * 0.5;
}

double kl_to_prior(const BeliefPosterior& post) {
  if (post.mean.size() != post.logvar.size()) {
    throw ShapeError("kl_to_prior: mean/logvar length mismatch");
  }
  return 0.5 * (post.mean.array().square() + post.logvar.array().exp() - 1.0 - post.logvar.array())
                   .sum();
}

ad::Var sample(ad::Var mean, ad::Var logvar, const Vec& noise) {
  if (noise.size() != mean.rows() || mean.cols() != 1 || logvar.rows() != mean.rows()) {
    throw ShapeError("sample: noise length must match the latent size");
  }
  ad::Var std = ad::exp(logvar * 0.5);
  return mean + ad::mul(std, mean.tape->constant(noise));
}

Vec sample(const BeliefPosterior& post, const Vec& noise) {
  if (noise.size() != post.mean.size() || post.logvar.size() != post.mean.size()) {
    throw ShapeError("sample: noise length must match the latent size");
  }
  return post.mean.array() + (0.5 * post.logvar.array()).exp() * noise.array();
}

}  // namespace bimrl
