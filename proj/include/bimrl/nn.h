#pragma once

// Trainable building blocks on top of the autodiff tape.

#include <memory>
#include <string>
#include <vector>

#include "bimrl/autodiff.h"
#include "bimrl/rng.h"

namespace bimrl {

enum class Init { kUniformFanIn, kZero };

class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;

  Parameter& add(const std::string& name, Eigen::Index rows, Eigen::Index cols, Init init,
                 Rng& rng);
  Parameter& add_value(const std::string& name, Mat value);

  Parameter* find(const std::string& name);
  const Parameter* find(const std::string& name) const;

  std::vector<std::unique_ptr<Parameter>>& all() { return params_; }
  const std::vector<std::unique_ptr<Parameter>>& all() const { return params_; }
  std::size_t scalar_count() const;

  void zero_grad();
  double grad_norm() const;
  // Rescales all gradients so their global norm is at most max_norm.
  // Returns the norm before clipping.
  double clip_grad_norm(double max_norm);

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
};

class Linear {
 public:
  Linear() = default;
  Linear(ParameterStore& store, const std::string& name, Eigen::Index in, Eigen::Index out,
         Rng& rng, Init init = Init::kUniformFanIn);

  ad::Var operator()(ad::Tape& tape, ad::Var x) const;
  Eigen::Index in() const { return w_->value.cols(); }
  Eigen::Index out() const { return w_->value.rows(); }
  Parameter& weight() const { return *w_; }
  Parameter& bias() const { return *b_; }

 private:
  Parameter* w_ = nullptr;
  Parameter* b_ = nullptr;
};

// Gated recurrent unit (reset/update/candidate gates).
class GruCell {
 public:
  GruCell() = default;
  GruCell(ParameterStore& store, const std::string& name, Eigen::Index in, Eigen::Index hidden,
          Rng& rng);

  ad::Var operator()(ad::Tape& tape, ad::Var x, ad::Var h) const;
  Eigen::Index in() const { return ih_.in(); }
  Eigen::Index hidden() const { return hidden_; }

 private:
  Linear ih_;
  Linear hh_;
  Eigen::Index hidden_ = 0;
};

enum class Activation { kTanh, kRelu };

// Two-layer perceptron: out(act(hidden(x))).
class Mlp {
 public:
  Mlp() = default;
  Mlp(ParameterStore& store, const std::string& name, Eigen::Index in, Eigen::Index hidden,
      Eigen::Index out, Rng& rng, Activation act = Activation::kTanh,
      Init out_init = Init::kUniformFanIn);

  ad::Var operator()(ad::Tape& tape, ad::Var x) const;
  const Linear& output_layer() const { return out_; }

 private:
  Linear hidden_;
  Linear out_;
  Activation act_ = Activation::kTanh;
};

struct AdamOptions {
  double lr = 7e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-5;
};

class Adam {
 public:
  Adam(ParameterStore& store, AdamOptions opts);

  void step();
  long long steps() const { return t_; }
  AdamOptions& options() { return opts_; }

  // Moment estimates in parameter order, for checkpointing.
  std::vector<Mat>& first_moments() { return m_; }
  std::vector<Mat>& second_moments() { return v_; }
  const std::vector<Mat>& first_moments() const { return m_; }
  const std::vector<Mat>& second_moments() const { return v_; }
  void set_steps(long long t) { t_ = t; }

 private:
  ParameterStore* store_;
  AdamOptions opts_;
  std::vector<Mat> m_;
  std::vector<Mat> v_;
  long long t_ = 0;
};

Vec one_hot(int index, int size);

}  // namespace bimrl
