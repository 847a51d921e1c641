#pragma once

// Dual memory: a slot-based episodic store read by multi-head attention and
// a Hebbian associative matrix filled by consolidation at episode ends.
//
// Timing convention: a slot written after the agent's s-th step of an episode
// carries written_at = s and is readable at steps s+1 .. H, so its reference
// time attention_mass / (H - s) is its mean attention weight per read.

#include <deque>
#include <iosfwd>
#include <span>
#include <utility>
#include <vector>

#include "bimrl/autodiff.h"
#include "bimrl/nn.h"

namespace bimrl {

struct MemorySlot {
  Vec key;
  Vec value;
  int written_at = 0;
  double attention_mass = 0.0;
};

class EpisodicMemory {
 public:
  explicit EpisodicMemory(int capacity = 256);

  // Appends a slot; the oldest slot is evicted when full.
  void write(const Vec& key, const Vec& value, int step);
  void clear() { slots_.clear(); }
  // Adds per-slot read weights into the attention-mass accumulators.
  void add_attention(const Vec& weights);

  std::size_t size() const { return slots_.size(); }
  bool empty() const { return slots_.empty(); }
  int capacity() const { return capacity_; }
  const std::deque<MemorySlot>& slots() const { return slots_; }
  const MemorySlot& slot(std::size_t i) const { return slots_[i]; }

 private:
  int capacity_;
  std::deque<MemorySlot> slots_;
};

struct HebbianStore {
  Mat w_assoc;  // d_val x d_key
  double gamma_plus = 0.1;
  double gamma_minus = 0.01;
  double w_max = 1.0;

  void reset() { w_assoc.setZero(); }
};

Vec reference_times(const EpisodicMemory& memory, int episode_length);

// W + dW with dW_kl = g+ (w_max - W_kl) v_k k_l - g- W_kl k_l^2.
Mat hebbian_update(const HebbianStore& store, const Vec& key, const Vec& value);

// Indices of the slots to consolidate, highest reference time first (ties
// keep slot order): the top ceil(top_fraction * |slots|).
std::vector<int> consolidation_order(const Vec& ref_times, double top_fraction);

// Applies hebbian_update for the selected slots and clears the episodic store.
void consolidate(EpisodicMemory& memory, HebbianStore& store, double top_fraction,
                 int episode_length);

Vec read_hebbian(const HebbianStore& store, const Vec& query_key);

struct MemoryDims {
  int key_dim = 52;    // d_obs_embed + 2 d_m
  int value_dim = 64;  // d_h3
  int query_dim = 64;  // d_h3
  int heads = 4;
  int head_dim = 16;
  int combine_dim = 32;
  double gamma_plus = 0.1;
  double gamma_minus = 0.01;
  double w_max = 1.0;
};

// Trainable parts of the memory: attention projections, the two-way combiner
// and the softplus-parameterized plasticity coefficients.
class MemoryModule {
 public:
  MemoryModule() = default;
  MemoryModule(ParameterStore& store, Rng& rng, const MemoryDims& dims);

  const MemoryDims& dims() const { return dims_; }

  ad::Var project_key(ad::Tape& tape, const Vec& key) const;
  ad::Var project_value(ad::Tape& tape, const Vec& value) const;
  ad::Var project_key(ad::Tape& tape, ad::Var key) const;
  ad::Var project_value(ad::Tape& tape, ad::Var value) const;

  // Attention of the query over already projected slots. Returns the d_val
  // readout; per-slot weights averaged over heads go to *weights.
  ad::Var read_projected(ad::Tape& tape, std::span<const ad::Var> keys,
                         std::span<const ad::Var> values, ad::Var query, Vec* weights) const;

  // Value-level read that also accumulates attention mass into the memory.
  std::pair<Vec, Vec> read_episodic(EpisodicMemory& memory, const Vec& query) const;

  ad::Var combine(ad::Tape& tape, ad::Var query, ad::Var episodic, ad::Var hebbian,
                  Vec* weights = nullptr) const;
  Vec combine(const Vec& query, const Vec& episodic, const Vec& hebbian,
              Vec* weights = nullptr) const;

  ad::Var gamma_plus(ad::Tape& tape) const;
  ad::Var gamma_minus(ad::Tape& tape) const;
  ad::Var w_max(ad::Tape& tape) const;
  // Fresh store for a new task with the current coefficient values.
  HebbianStore make_store() const;

 private:
  MemoryDims dims_;
  Linear key_proj_;
  Linear value_proj_;
  Linear query_proj_;
  Linear out_proj_;
  Linear combine_query_;
  Linear combine_source_;
  Parameter* u_plus_ = nullptr;
  Parameter* u_minus_ = nullptr;
  Parameter* u_max_ = nullptr;
};

// Inverse of softplus, for initializing positive coefficients.
double inverse_softplus(double y);

// Binary (de)serialization of memory contents for checkpoints.
void write_memory(std::ostream& out, const EpisodicMemory& memory, const HebbianStore& store);
void read_memory(std::istream& in, EpisodicMemory& memory, HebbianStore& store);

}  // namespace bimrl
