#include "bimrl/neuromem.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "bimrl/binio.h"

namespace bimrl {

EpisodicMemory::EpisodicMemory(int capacity) : capacity_(capacity) {
  if (capacity <= 0) throw ContractError("episodic memory capacity must be positive");
}

void EpisodicMemory::write(const Vec& key, const Vec& value, int step) {
  if (!slots_.empty() && (key.size() != slots_.front().key.size() ||
                          value.size() != slots_.front().value.size())) {
    throw ShapeError("episodic write: key/value size differs from stored slots");
  }
  if (static_cast<int>(slots_.size()) == capacity_) slots_.pop_front();
  slots_.push_back(MemorySlot{key, value, step, 0.0});
}

void EpisodicMemory::add_attention(const Vec& weights) {
  if (weights.size() != static_cast<Eigen::Index>(slots_.size())) {
    throw ShapeError("add_attention: one weight per slot expected");
  }
  for (std::size_t i = 0; i < slots_.size(); ++i) {
    slots_[i].attention_mass += std::max(0.0, weights(static_cast<Eigen::Index>(i)));
  }
}

Vec reference_times(const EpisodicMemory& memory, int episode_length) {
  Vec r(static_cast<Eigen::Index>(memory.size()));
  for (std::size_t i = 0; i < memory.size(); ++i) {
    const MemorySlot& s = memory.slot(i);
    const int reads = episode_length - s.written_at;
    r(static_cast<Eigen::Index>(i)) = reads > 0 ? s.attention_mass / reads : 0.0;
  }
  return r;
}

Mat hebbian_update(const HebbianStore& store, const Vec& key, const Vec& value) {
  const Mat& w = store.w_assoc;
  if (w.rows() != value.size() || w.cols() != key.size()) {
    throw ShapeError("hebbian_update: W must be d_val x d_key");
  }
  Mat outer = value * key.transpose();
  Mat decay = Vec::Ones(value.size()) * key.array().square().matrix().transpose();
  return w + store.gamma_plus * ((store.w_max - w.array()) * outer.array()).matrix() -
         store.gamma_minus * (w.array() * decay.array()).matrix();
}

std::vector<int> consolidation_order(const Vec& ref_times, double top_fraction) {
  if (!(top_fraction > 0.0 && top_fraction <= 1.0)) {
    throw ContractError("top_fraction must lie in (0, 1]");
  }
  const int n = static_cast<int>(ref_times.size());
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](int a, int b) { return ref_times(a) > ref_times(b); });
  // The small epsilon keeps e.g. 0.25 * 8 from rounding up to 3.
  const int keep = std::min(n, static_cast<int>(std::ceil(top_fraction * n - 1e-9)));
  idx.resize(keep);
  return idx;
}

void consolidate(EpisodicMemory& memory, HebbianStore& store, double top_fraction,
                 int episode_length) {
  if (memory.empty()) return;
  for (int i : consolidation_order(reference_times(memory, episode_length), top_fraction)) {
    store.w_assoc = hebbian_update(store, memory.slot(i).key, memory.slot(i).value);
  }
  memory.clear();
}

Vec read_hebbian(const HebbianStore& store, const Vec& query_key) {
  if (store.w_assoc.cols() != query_key.size()) throw ShapeError("read_hebbian: key size");
  return store.w_assoc * query_key;
}

double inverse_softplus(double y) {
  if (y <= 0.0) throw ContractError("inverse_softplus: argument must be positive");
  return y > 30.0 ? y : std::log(std::expm1(y));
}

MemoryModule::MemoryModule(ParameterStore& store, Rng& rng, const MemoryDims& dims)
    : dims_(dims) {
  const int hk = dims.heads * dims.head_dim;
  key_proj_ = Linear(store, "mem.key_proj", dims.key_dim, hk, rng);
  value_proj_ = Linear(store, "mem.value_proj", dims.value_dim, hk, rng);
  query_proj_ = Linear(store, "mem.query_proj", dims.query_dim, hk, rng);
  out_proj_ = Linear(store, "mem.out_proj", hk, dims.value_dim, rng);
  combine_query_ = Linear(store, "mem.combine_query", dims.query_dim, dims.combine_dim, rng);
  combine_source_ = Linear(store, "mem.combine_source", dims.value_dim, dims.combine_dim, rng);
  u_plus_ = &store.add_value("mem.gamma_plus", Mat::Constant(1, 1, inverse_softplus(dims.gamma_plus)));
  u_minus_ =
      &store.add_value("mem.gamma_minus", Mat::Constant(1, 1, inverse_softplus(dims.gamma_minus)));
  u_max_ = &store.add_value("mem.w_max", Mat::Constant(1, 1, inverse_softplus(dims.w_max)));
}

ad::Var MemoryModule::project_key(ad::Tape& tape, const Vec& key) const {
  if (key.size() != dims_.key_dim) throw ShapeError("memory: key size mismatch");
  return key_proj_(tape, tape.constant(key));
}

ad::Var MemoryModule::project_value(ad::Tape& tape, const Vec& value) const {
  if (value.size() != dims_.value_dim) throw ShapeError("memory: value size mismatch");
  return value_proj_(tape, tape.constant(value));
}

ad::Var MemoryModule::project_key(ad::Tape& tape, ad::Var key) const {
  if (key.rows() != dims_.key_dim || key.cols() != 1) throw ShapeError("memory: key size mismatch");
  return key_proj_(tape, key);
}

ad::Var MemoryModule::project_value(ad::Tape& tape, ad::Var value) const {
  if (value.rows() != dims_.value_dim || value.cols() != 1) {
    throw ShapeError("memory: value size mismatch");
  }
  return value_proj_(tape, value);
}

ad::Var MemoryModule::read_projected(ad::Tape& tape, std::span<const ad::Var> keys,
                                     std::span<const ad::Var> values, ad::Var query,
                                     Vec* weights) const {
  if (keys.size() != values.size()) throw ShapeError("memory read: keys/values differ in count");
  if (query.rows() != dims_.query_dim) throw ShapeError("memory read: query size mismatch");
  if (keys.empty()) {
    if (weights) weights->resize(0);
    return tape.constant(Vec::Zero(dims_.value_dim));
  }
  ad::Var q = query_proj_(tape, query);
  Mat per_head;
  ad::Var heads = ad::multihead_attention(ad::concat_cols(keys), ad::concat_cols(values), q,
                                          dims_.heads, weights ? &per_head : nullptr);
  if (weights) *weights = per_head.rowwise().mean();
  return out_proj_(tape, heads);
}

std::pair<Vec, Vec> MemoryModule::read_episodic(EpisodicMemory& memory, const Vec& query) const {
  ad::Tape tape;
  std::vector<ad::Var> keys, values;
  for (const MemorySlot& s : memory.slots()) {
    keys.push_back(project_key(tape, s.key));
    values.push_back(project_value(tape, s.value));
  }
  Vec w;
  Vec out = read_projected(tape, keys, values, tape.constant(query), &w).value();
  if (w.size() > 0) memory.add_attention(w);
  return {out, w};
}

ad::Var MemoryModule::combine(ad::Tape& tape, ad::Var query, ad::Var episodic, ad::Var hebbian,
                              Vec* weights) const {
  if (episodic.rows() != dims_.value_dim || hebbian.rows() != dims_.value_dim) {
    throw ShapeError("combine: sources must have d_val entries");
  }
  ad::Var pq = combine_query_(tape, query);
  const ad::Var parts[] = {episodic, hebbian};
  ad::Var sources = ad::concat_cols(parts);
  ad::Var ps = combine_source_(tape, sources);
  ad::Var scores = ad::matmul(ad::transpose(ps), pq) * (1.0 / std::sqrt(double(dims_.combine_dim)));
  ad::Var w = ad::softmax(scores);
  if (weights) *weights = w.value();
  return ad::matmul(sources, w);
}

Vec MemoryModule::combine(const Vec& query, const Vec& episodic, const Vec& hebbian,
                          Vec* weights) const {
  ad::Tape tape;
  return combine(tape, tape.constant(query), tape.constant(episodic), tape.constant(hebbian),
                 weights)
      .value();
}

ad::Var MemoryModule::gamma_plus(ad::Tape& tape) const { return ad::softplus(tape.param(*u_plus_)); }
ad::Var MemoryModule::gamma_minus(ad::Tape& tape) const {
  return ad::softplus(tape.param(*u_minus_));
}
ad::Var MemoryModule::w_max(ad::Tape& tape) const { return ad::softplus(tape.param(*u_max_)); }

HebbianStore MemoryModule::make_store() const {
  auto sp = [](double u) { return u > 30.0 ? u : std::log1p(std::exp(u)); };
  HebbianStore s;
  s.w_assoc = Mat::Zero(dims_.value_dim, dims_.key_dim);
  s.gamma_plus = sp(u_plus_->value(0, 0));
  s.gamma_minus = sp(u_minus_->value(0, 0));
  s.w_max = sp(u_max_->value(0, 0));
  return s;
}

void write_memory(std::ostream& out, const EpisodicMemory& memory, const HebbianStore& store) {
  binio::put<std::int32_t>(out, memory.capacity());
  binio::put<std::uint64_t>(out, memory.size());
  for (const MemorySlot& s : memory.slots()) {
    binio::put_mat(out, s.key);
    binio::put_mat(out, s.value);
    binio::put<std::int32_t>(out, s.written_at);
    binio::put<double>(out, s.attention_mass);
  }
  binio::put_mat(out, store.w_assoc);
  binio::put<double>(out, store.gamma_plus);
  binio::put<double>(out, store.gamma_minus);
  binio::put<double>(out, store.w_max);
}

void read_memory(std::istream& in, EpisodicMemory& memory, HebbianStore& store) {
  const int capacity = binio::get<std::int32_t>(in);
  const auto n = binio::get<std::uint64_t>(in);
  if (capacity <= 0 || n > static_cast<std::uint64_t>(capacity)) {
    throw binio::FormatError("memory block: bad slot count");
  }
  EpisodicMemory m(capacity);
  for (std::uint64_t i = 0; i < n; ++i) {
    Vec key = binio::get_mat(in);
    Vec value = binio::get_mat(in);
    const int at = binio::get<std::int32_t>(in);
    m.write(key, value, at);
    Vec w = Vec::Zero(static_cast<Eigen::Index>(m.size()));
    w(w.size() - 1) = binio::get<double>(in);
    m.add_attention(w);
  }
  memory = std::move(m);
  store.w_assoc = binio::get_mat(in);
  store.gamma_plus = binio::get<double>(in);
  store.gamma_minus = binio::get<double>(in);
  store.w_max = binio::get<double>(in);
}

}  // namespace bimrl
