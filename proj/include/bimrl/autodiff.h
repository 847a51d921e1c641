#pragma once

// Reverse-mode automatic differentiation over small dense Eigen matrices.
//
// A Tape records every operation of one forward pass. Values are stored as
// column-major double matrices; vectors are n x 1 and scalars are 1 x 1.
// Calling backward() on a scalar node propagates adjoints to every node that
// requires a gradient. Parameters enter a tape through Tape::param() and their
// gradients are flushed back with Tape::flush_param_grads().

#include <Eigen/Dense>

#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "bimrl/errors.h"

namespace bimrl {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

struct Parameter {
  std::string name;
  Mat value;
  Mat grad;
};

namespace ad {

class Tape;

// Lightweight handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Mat& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Mat value);
  Var constant(double value);
  // A leaf whose gradient is retained after backward().
  Var leaf(Mat value);
  Var param(Parameter& p);

  void backward(Var loss);
  const Mat& grad(Var v) const;
  // Adds the gradients of every parameter used on this tape into
  // Parameter::grad.
  void flush_param_grads() const;

  void clear();
  void reserve(std::size_t n) { nodes_.reserve(n); }
  std::size_t size() const { return nodes_.size(); }

  // Low-level construction used by the op library.
  // Closures receive the tape, their own node id and the node's adjoint.
  using Backward = std::function<void(Tape&, int self, const Mat& grad)>;
  Var push(Mat value, bool requires_grad, Backward back);
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  const Mat& value(int id) const { return nodes_[id].value; }
  template <typename Expr>
  void add_grad(int id, const Expr& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }
  // Queues grad(id) += g * value(x)^T. For leaves the products are batched
  // into one matrix product at the end of backward().
  void add_outer_grad(int id, Mat g, int x);

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool requires_grad = false;
    Backward back;
    std::vector<std::pair<Mat, int>> pending;
  };
  void apply_pending(Node& n);
  std::vector<Node> nodes_;
  std::unordered_map<Parameter*, int> param_nodes_;
  Mat empty_;
};

// ---- elementwise and structural ops ----
Var operator+(Var a, Var b);
Var operator-(Var a, Var b);
Var operator-(Var a);
Var operator*(Var a, double s);
Var operator*(double s, Var a);
Var add_scalar(Var a, double s);
// Hadamard product.
Var mul(Var a, Var b);
// Multiplies every entry of a by the 1x1 node s.
Var scale_by(Var a, Var s);
// a + b where b is a column vector broadcast across the columns of a.
Var add_col(Var a, Var b);
Var matmul(Var a, Var b);
Var transpose(Var a);
// W x + b with b broadcast across the columns of x.
Var linear(Var w, Var x, Var b);
// Gated recurrent unit step as a single node. Gate order in the stacked
// weights is reset, update, candidate:
//   r = sig(Wr x + br + Ur h + cr), z = sig(Wz x + bz + Uz h + cz)
//   n = tanh(Wn x + bn + r .* (Un h + cn)),  h' = n + z .* (h - n)
Var gru_cell(Var x, Var h, Var w_ih, Var b_ih, Var w_hh, Var b_hh);

Var sigmoid(Var a);
Var tanh(Var a);
Var relu(Var a);
Var exp(Var a);
Var log(Var a);
Var softplus(Var a);
Var square(Var a);
// Entries outside [lo, hi] are clamped and receive zero gradient.
Var clamp(Var a, double lo, double hi);
Var minimum(Var a, Var b);

Var sum(Var a);
Var mean(Var a);
Var dot(Var a, Var b);

Var concat_rows(std::span<const Var> parts);
Var concat_rows(std::initializer_list<Var> parts);
Var concat_cols(std::span<const Var> parts);
Var slice_rows(Var a, Eigen::Index start, Eigen::Index count);
Var col(Var a, Eigen::Index j);
Var reshape(Var a, Eigen::Index rows, Eigen::Index cols);
// Selects columns of a (indices may repeat).
Var gather_cols(Var a, std::span<const int> index);

// Column-wise softmax / log-softmax.
Var softmax(Var a);
Var log_softmax(Var a);

// Multi-head scaled dot-product attention of one query against S slots.
// keys: (heads*dk) x S, values: (heads*dv) x S, query: (heads*dk) x 1.
// Returns (heads*dv) x 1; per-slot weights (S x heads) are written to
// *weights when non-null.
Var multihead_attention(Var keys, Var values, Var query, int heads,
                        Mat* weights = nullptr);

// One application of the bounded Hebbian rule to every synapse:
//   W' = W + g_plus (w_max - W) .* (v k^T) - g_minus W .* (1 (k.^2)^T)
// Every argument is differentiable; the Vec overload takes v and k as constants.
Var hebbian_step(Var w, Var value, Var key, Var g_plus, Var g_minus, Var w_max);
Var hebbian_step(Var w, const Vec& value, const Vec& key, Var g_plus,
                 Var g_minus, Var w_max);

}  // namespace ad
}  // namespace bimrl
