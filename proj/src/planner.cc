#include "bimrl/planner.h"

#include <cmath>
#include <string>

#include "bimrl/envgrid.h"

namespace bimrl {

namespace {
constexpr int kA = env::kNumActions;
}

double td_return(std::span<const double> rewards, double bootstrap_value, double gamma) {
  if (rewards.empty()) throw ContractError("td_return: k must be at least 1");
  double g = 0.0;
  double discount = 1.0;
  for (double r : rewards) {
    g += discount * r;
    discount *= gamma;
  }
  return g + discount * bootstrap_value;
}

std::vector<std::pair<int, int>> planner_pairs(int length, int n, int k) {
  std::vector<std::pair<int, int>> pairs;
  for (int i = 0; i < length; ++i) {
    for (int j = 0; j <= n; ++j) {
      if (i + j + k <= length) pairs.emplace_back(i, j);
    }
  }
  return pairs;
}

Planner::Planner(ParameterStore& store, Rng& rng, const PlannerDims& dims) : dims_(dims) {
  level2_ = GruCell(store, "plan.level2", dims.h1 + dims.obs_embed + dims.n * kA, dims.h2, rng);
  action_agg_ = GruCell(store, "plan.action_agg", kA, dims.action_agg, rng);
  value_ = Mlp(store, "plan.value", dims.obs_embed + dims.action_agg + dims.h2,
               dims.value_hidden, 1, rng, Activation::kTanh);
}

ad::Var Planner::level2_step(ad::Tape& tape, ad::Var h2, ad::Var h1, ad::Var obs_embed,
                             std::span<const int> next_actions) const {
  if (static_cast<int>(next_actions.size()) > dims_.n) {
    throw ShapeError("level2: more than n next actions");
  }
  std::vector<ad::Var> parts{h1, obs_embed};
  if (dims_.n > 0) {
    Vec window = Vec::Zero(dims_.n * kA);
    for (std::size_t p = 0; p < next_actions.size(); ++p) {
      if (next_actions[p] < 0 || next_actions[p] >= kA) throw ShapeError("level2: bad action");
      window(static_cast<Eigen::Index>(p) * kA + next_actions[p]) = 1.0;
    }
    parts.push_back(tape.constant(std::move(window)));
  }
  return level2_(tape, ad::concat_rows(parts), h2);
}

ad::Var Planner::predict_value(ad::Tape& tape, ad::Var obs_embed, std::span<const int> actions,
                               ad::Var h2) const {
  if (actions.empty() || static_cast<int>(actions.size()) > dims_.n + 1) {
    throw ContractError("predict_value: action window must hold 1..n+1 actions");
  }
  ad::Var h = tape.constant(Vec::Zero(dims_.action_agg));
  for (int a : actions) h = action_agg_(tape, tape.constant(one_hot(a, kA)), h);
  return value_(tape, ad::concat_rows({obs_embed, h, h2}));
}

ad::Var Planner::planner_loss(ad::Tape& tape, const PlannerBatch& b, int k, double gamma,
                              int* pair_count) const {
  const int T = static_cast<int>(b.embeds.cols());
  if (T < 2) throw ContractError("planner_loss: trajectory shorter than 2 steps");
  if (k < 1) throw ContractError("planner_loss: k must be at least 1");
  if (b.h2.cols() != T || static_cast<int>(b.actions.size()) != T ||
      static_cast<int>(b.rewards.size()) != T || static_cast<int>(b.critic.size()) != T) {
    throw ShapeError("planner_loss: per-step inputs disagree on length");
  }
  auto value_at = [&](int t) { return t >= T ? 0.0 : b.critic[t]; };

  ad::Var h = tape.constant(Mat::Zero(dims_.action_agg, T));
  std::vector<ad::Var> terms;
  int count = 0;
  for (int j = 0; j <= dims_.n; ++j) {
    Mat x = Mat::Zero(kA, T);
    for (int i = 0; i + j < T; ++i) x(b.actions[i + j], i) = 1.0;
    h = action_agg_(tape, tape.constant(std::move(x)), h);

    std::vector<int> anchors;
    for (int i = 0; i + j + k <= T; ++i) anchors.push_back(i);
    if (anchors.empty()) break;
    Mat target(1, static_cast<Eigen::Index>(anchors.size()));
    for (std::size_t c = 0; c < anchors.size(); ++c) {
      const int t = anchors[c] + j;
      target(0, static_cast<Eigen::Index>(c)) =
          td_return(std::span<const double>(b.rewards).subspan(t, k), value_at(t + k), gamma);
    }
    ad::Var in = ad::concat_rows({ad::gather_cols(b.embeds, anchors), ad::gather_cols(h, anchors),
                                  ad::gather_cols(b.h2, anchors)});
    ad::Var err = value_(tape, in) - tape.constant(std::move(target));
    terms.push_back(ad::sum(ad::square(err)));
    count += static_cast<int>(anchors.size());
  }
  if (pair_count) *pair_count = count;
  if (count == 0) return tape.constant(0.0);
  ad::Var total = terms.front();
  for (std::size_t p = 1; p < terms.size(); ++p) total = total + terms[p];
  return total * (1.0 / count);
}

}  // namespace bimrl
