#include "bimrl/curiosity.h"

#include <algorithm>
#include <array>
#include <functional>
#include <vector>

namespace bimrl {

CuriosityWeights project_to_simplex(double state, double action, double reward) {
  std::array<double, 3> v{state, action, reward};
  std::array<double, 3> u = v;
  std::sort(u.begin(), u.end(), std::greater<>());
  double cumsum = 0.0, theta = 0.0;
  for (int i = 0; i < 3; ++i) {
    cumsum += u[i];
    const double t = (cumsum - 1.0) / (i + 1);
    if (u[i] - t > 0.0) theta = t;
  }
  return {std::max(v[0] - theta, 0.0), std::max(v[1] - theta, 0.0),
          std::max(v[2] - theta, 0.0)};
}

double curiosity_term(double neg_log_state, double neg_log_action, double neg_log_reward,
                      const CuriosityWeights& w) {
  const double c = w.state * std::max(0.0, neg_log_state) +
                   w.action * std::max(0.0, neg_log_action) +
                   w.reward * std::max(0.0, neg_log_reward);
  return std::max(0.0, c);
}

double newness(const Vec& key, std::span<const Vec> keys, int k, double alpha_default) {
  if (k < 1) throw ContractError("newness: k must be at least 1");
  if (static_cast<int>(keys.size()) < k) return alpha_default;
  std::vector<double> d;
  d.reserve(keys.size());
  for (const Vec& other : keys) {
    if (other.size() != key.size()) throw ShapeError("newness: key size mismatch");
    d.push_back((other - key).squaredNorm());
  }
  std::nth_element(d.begin(), d.begin() + (k - 1), d.end());
  return std::sqrt(d[k - 1]);
}

double newness(const Vec& key, const EpisodicMemory& memory, int k, double alpha_default) {
  std::vector<Vec> keys;
  keys.reserve(memory.size());
  for (const MemorySlot& s : memory.slots()) keys.push_back(s.key);
  return newness(key, keys, k, alpha_default);
}

double intrinsic_reward(double alpha, double r_curiosity, double beta) {
  return beta * std::max(0.0, alpha) * std::max(0.0, r_curiosity);
}

}  // namespace bimrl
