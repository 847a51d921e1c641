#include "bimrl/nn.h"

#include <cmath>

namespace bimrl {

Parameter& ParameterStore::add(const std::string& name, Eigen::Index rows, Eigen::Index cols,
                               Init init, Rng& rng) {
  Mat value = Mat::Zero(rows, cols);
  if (init == Init::kUniformFanIn) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(cols));
    for (Eigen::Index j = 0; j < cols; ++j) {
      for (Eigen::Index i = 0; i < rows; ++i) value(i, j) = rng.uniform(-bound, bound);
    }
  }
  return add_value(name, std::move(value));
}

Parameter& ParameterStore::add_value(const std::string& name, Mat value) {
  if (find(name) != nullptr) throw std::invalid_argument("duplicate parameter name: " + name);
  auto p = std::make_unique<Parameter>();
  p->name = name;
  p->value = std::move(value);
  p->grad = Mat::Zero(p->value.rows(), p->value.cols());
  params_.push_back(std::move(p));
  return *params_.back();
}

Parameter* ParameterStore::find(const std::string& name) {
  for (auto& p : params_) {
    if (p->name == name) return p.get();
  }
  return nullptr;
}

const Parameter* ParameterStore::find(const std::string& name) const {
  for (const auto& p : params_) {
    if (p->name == name) return p.get();
  }
  return nullptr;
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p->value.size());
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) p->grad.setZero(p->value.rows(), p->value.cols());
}

double ParameterStore::grad_norm() const {
  double sq = 0.0;
  for (const auto& p : params_) {
    if (p->grad.size() != 0) sq += p->grad.squaredNorm();
  }
  return std::sqrt(sq);
}

double ParameterStore::clip_grad_norm(double max_norm) {
  const double norm = grad_norm();
  if (norm > max_norm && norm > 0.0) {
    const double s = max_norm / norm;
    for (auto& p : params_) p->grad *= s;
  }
  return norm;
}

Linear::Linear(ParameterStore& store, const std::string& name, Eigen::Index in,
               Eigen::Index out, Rng& rng, Init init)
    : w_(&store.add(name + ".w", out, in, init, rng)),
      b_(&store.add(name + ".b", out, 1, Init::kZero, rng)) {}

ad::Var Linear::operator()(ad::Tape& tape, ad::Var x) const {
  return ad::linear(tape.param(*w_), x, tape.param(*b_));
}

GruCell::GruCell(ParameterStore& store, const std::string& name, Eigen::Index in,
                 Eigen::Index hidden, Rng& rng)
    : ih_(store, name + ".ih", in, 3 * hidden, rng),
      hh_(store, name + ".hh", hidden, 3 * hidden, rng),
      hidden_(hidden) {}

ad::Var GruCell::operator()(ad::Tape& tape, ad::Var x, ad::Var h) const {
  if (x.rows() != ih_.in() || h.rows() != hidden_) {
    throw ShapeError("gru: input " + std::to_string(x.rows()) + " (want " +
                     std::to_string(ih_.in()) + "), hidden " + std::to_string(h.rows()) +
                     " (want " + std::to_string(hidden_) + ")");
  }
  return ad::gru_cell(x, h, tape.param(ih_.weight()), tape.param(ih_.bias()),
                      tape.param(hh_.weight()), tape.param(hh_.bias()));
}

Mlp::Mlp(ParameterStore& store, const std::string& name, Eigen::Index in, Eigen::Index hidden,
         Eigen::Index out, Rng& rng, Activation act, Init out_init)
    : hidden_(store, name + ".0", in, hidden, rng),
      out_(store, name + ".1", hidden, out, rng, out_init),
      act_(act) {}

ad::Var Mlp::operator()(ad::Tape& tape, ad::Var x) const {
  ad::Var h = hidden_(tape, x);
  h = act_ == Activation::kTanh ? ad::tanh(h) : ad::relu(h);
  return out_(tape, h);
}

Adam::Adam(ParameterStore& store, AdamOptions opts) : store_(&store), opts_(opts) {
  for (const auto& p : store.all()) {
    m_.push_back(Mat::Zero(p->value.rows(), p->value.cols()));
    v_.push_back(Mat::Zero(p->value.rows(), p->value.cols()));
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
  auto& params = store_->all();
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = *params[i];
    if (p.grad.size() == 0) continue;
    m_[i] = opts_.beta1 * m_[i] + (1.0 - opts_.beta1) * p.grad;
    v_[i] = opts_.beta2 * v_[i] + (1.0 - opts_.beta2) * p.grad.cwiseAbs2();
    p.value.array() -= opts_.lr * (m_[i].array() / bc1) /
                       ((v_[i].array() / bc2).sqrt() + opts_.eps);
  }
}

Vec one_hot(int index, int size) {
  Vec v = Vec::Zero(size);
  if (index >= 0 && index < size) v(index) = 1.0;
  return v;
}

}  // namespace bimrl
