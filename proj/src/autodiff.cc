#include "bimrl/autodiff.h"

#include <cmath>
#include <sstream>

namespace bimrl::ad {

namespace {

std::string shape_of(const Mat& m) {
  std::ostringstream os;
  os << m.rows() << "x" << m.cols();
  return os.str();
}

void check_same_shape(const char* op, Var a, Var b) {
  if (a.tape != b.tape) throw std::logic_error(std::string(op) + ": mixed tapes");
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_of(a.value()) +
                     " vs " + shape_of(b.value()));
  }
}

bool rg(Var v) { return v.tape->requires_grad(v.id); }

}  // namespace

const Mat& Var::value() const { return tape->value(id); }

double Var::scalar() const {
  const Mat& v = value();
  if (v.size() != 1) throw ShapeError("scalar() on non-scalar node " + shape_of(v));
  return v(0, 0);
}

Var Tape::push(Mat value, bool requires_grad, Backward back) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::constant(Mat value) { return push(std::move(value), false, nullptr); }

Var Tape::constant(double value) {
  Mat m(1, 1);
  m(0, 0) = value;
  return constant(std::move(m));
}

Var Tape::leaf(Mat value) { return push(std::move(value), true, nullptr); }

Var Tape::param(Parameter& p) {
  auto it = param_nodes_.find(&p);
  if (it != param_nodes_.end()) return Var{this, it->second};
  Var v = leaf(p.value);
  param_nodes_.emplace(&p, v.id);
  return v;
}

void Tape::backward(Var loss) {
  if (loss.tape != this) throw std::logic_error("backward: foreign node");
  if (loss.value().size() != 1) throw ShapeError("backward: loss must be a scalar");
  for (auto& n : nodes_) {
    n.grad.resize(0, 0);
    n.pending.clear();
  }
  if (!nodes_[loss.id].requires_grad) return;
  nodes_[loss.id].grad = Mat::Ones(1, 1);
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.size() == 0 || !n.back) continue;
    // The closure may append to grads of earlier nodes only, so the
    // reference into nodes_ stays valid.
    n.back(*this, i, n.grad);
  }
  for (auto& n : nodes_) {
    if (!n.pending.empty()) apply_pending(n);
  }
}

void Tape::add_outer_grad(int id, Mat g, int x) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return;
  if (n.back) {
    add_grad(id, g * nodes_[x].value.transpose());
    return;
  }
  n.pending.emplace_back(std::move(g), x);
}

void Tape::apply_pending(Node& n) {
  Eigen::Index cols = 0;
  for (const auto& [g, x] : n.pending) cols += g.cols();
  const Eigen::Index out = n.pending.front().first.rows();
  const Eigen::Index in = nodes_[n.pending.front().second].value.rows();
  Mat gs(out, cols);
  Mat xs(in, cols);
  Eigen::Index c = 0;
  for (const auto& [g, x] : n.pending) {
    gs.middleCols(c, g.cols()) = g;
    xs.middleCols(c, g.cols()) = nodes_[x].value;
    c += g.cols();
  }
  n.pending.clear();
  if (n.grad.size() == 0) {
    n.grad.noalias() = gs * xs.transpose();
  } else {
    n.grad.noalias() += gs * xs.transpose();
  }
}

const Mat& Tape::grad(Var v) const {
  const Node& n = nodes_[v.id];
  return n.grad.size() == 0 ? empty_ : n.grad;
}

void Tape::flush_param_grads() const {
  for (const auto& [p, id] : param_nodes_) {
    const Mat& g = nodes_[id].grad;
    if (g.size() == 0) continue;
    if (p->grad.size() == 0) {
      p->grad = g;
    } else {
      p->grad += g;
    }
  }
}

void Tape::clear() {
  nodes_.clear();
  param_nodes_.clear();
}

// ---------------------------------------------------------------------------

Var operator+(Var a, Var b) {
  check_same_shape("add", a, b);
  Tape& t = *a.tape;
  int ia = a.id, ib = b.id;
  return t.push(a.value() + b.value(), rg(a) || rg(b), [ia, ib](Tape& t, int, const Mat& g) {
    t.add_grad(ia, g);
    t.add_grad(ib, g);
  });
}

Var operator-(Var a, Var b) {
  check_same_shape("sub", a, b);
  Tape& t = *a.tape;
  int ia = a.id, ib = b.id;
  return t.push(a.value() - b.value(), rg(a) || rg(b), [ia, ib](Tape& t, int, const Mat& g) {
    t.add_grad(ia, g);
    t.add_grad(ib, -g);
  });
}

Var operator-(Var a) { return a * -1.0; }

Var operator*(Var a, double s) {
  int ia = a.id;
  return a.tape->push(a.value() * s, rg(a),
                      [ia, s](Tape& t, int, const Mat& g) { t.add_grad(ia, g * s); });
}

Var operator*(double s, Var a) { return a * s; }

Var add_scalar(Var a, double s) {
  int ia = a.id;
  return a.tape->push(a.value().array() + s, rg(a),
                      [ia](Tape& t, int, const Mat& g) { t.add_grad(ia, g); });
}

Var mul(Var a, Var b) {
  check_same_shape("mul", a, b);
  int ia = a.id, ib = b.id;
  return a.tape->push(a.value().cwiseProduct(b.value()), rg(a) || rg(b),
                      [ia, ib](Tape& t, int, const Mat& g) {
                        if (t.requires_grad(ia)) t.add_grad(ia, g.cwiseProduct(t.value(ib)));
                        if (t.requires_grad(ib)) t.add_grad(ib, g.cwiseProduct(t.value(ia)));
                      });
}

Var scale_by(Var a, Var s) {
  if (s.value().size() != 1) throw ShapeError("scale_by: scale must be 1x1");
  int ia = a.id, is = s.id;
  double sv = s.scalar();
  return a.tape->push(a.value() * sv, rg(a) || rg(s), [ia, is, sv](Tape& t, int, const Mat& g) {
    if (t.requires_grad(ia)) t.add_grad(ia, g * sv);
    if (t.requires_grad(is)) {
      Mat gs(1, 1);
      gs(0, 0) = g.cwiseProduct(t.value(ia)).sum();
      t.add_grad(is, gs);
    }
  });
}

Var add_col(Var a, Var b) {
  if (b.cols() != 1 || b.rows() != a.rows()) {
    throw ShapeError("add_col: expected column of " + std::to_string(a.rows()) + " rows, got " +
                     shape_of(b.value()));
  }
  int ia = a.id, ib = b.id;
  Mat out = a.value().colwise() + b.value().col(0);
  return a.tape->push(std::move(out), rg(a) || rg(b), [ia, ib](Tape& t, int, const Mat& g) {
    t.add_grad(ia, g);
    if (t.requires_grad(ib)) t.add_grad(ib, g.rowwise().sum());
  });
}

Var matmul(Var a, Var b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + shape_of(a.value()) + " * " + shape_of(b.value()));
  }
  int ia = a.id, ib = b.id;
  Mat out = a.value() * b.value();
  return a.tape->push(std::move(out), rg(a) || rg(b), [ia, ib](Tape& t, int, const Mat& g) {
    if (t.requires_grad(ia)) t.add_outer_grad(ia, g, ib);
    if (t.requires_grad(ib)) t.add_grad(ib, t.value(ia).transpose() * g);
  });
}

Var transpose(Var a) {
  int ia = a.id;
  return a.tape->push(a.value().transpose(), rg(a),
                      [ia](Tape& t, int, const Mat& g) { t.add_grad(ia, g.transpose()); });
}

Var linear(Var w, Var x, Var b) {
  if (w.cols() != x.rows() || b.cols() != 1 || b.rows() != w.rows()) {
    throw ShapeError("linear: W " + shape_of(w.value()) + ", x " + shape_of(x.value()) + ", b " +
                     shape_of(b.value()));
  }
  int iw = w.id, ix = x.id, ib = b.id;
  Mat out = w.value() * x.value();
  out.colwise() += b.value().col(0);
  return w.tape->push(std::move(out), rg(w) || rg(x) || rg(b),
                      [iw, ix, ib](Tape& t, int, const Mat& g) {
                        if (t.requires_grad(iw)) t.add_outer_grad(iw, g, ix);
                        if (t.requires_grad(ix)) t.add_grad(ix, t.value(iw).transpose() * g);
                        if (t.requires_grad(ib)) t.add_grad(ib, g.rowwise().sum());
                      });
}

Var gru_cell(Var x, Var h, Var w_ih, Var b_ih, Var w_hh, Var b_hh) {
  const Eigen::Index d = h.rows();
  if (w_ih.rows() != 3 * d || w_hh.rows() != 3 * d || w_hh.cols() != d ||
      w_ih.cols() != x.rows() || b_ih.rows() != 3 * d || b_hh.rows() != 3 * d ||
      x.cols() != h.cols()) {
    throw ShapeError("gru_cell: x " + shape_of(x.value()) + ", h " + shape_of(h.value()) +
                     ", W_ih " + shape_of(w_ih.value()) + ", W_hh " + shape_of(w_hh.value()));
  }
  Mat gi = w_ih.value() * x.value();
  gi.colwise() += b_ih.value().col(0);
  Mat gh = w_hh.value() * h.value();
  gh.colwise() += b_hh.value().col(0);
  const Mat& hv = h.value();
  Mat r = (1.0 + (-(gi.topRows(d) + gh.topRows(d)).array()).exp()).inverse().matrix();
  Mat z = (1.0 + (-(gi.middleRows(d, d) + gh.middleRows(d, d)).array()).exp()).inverse().matrix();
  Mat ghn = gh.bottomRows(d);
  Mat n = (gi.bottomRows(d).array() + r.array() * ghn.array()).tanh().matrix();
  Mat out = (n.array() + z.array() * (hv.array() - n.array())).matrix();
  int ix = x.id, ih = h.id, iwi = w_ih.id, ibi = b_ih.id, iwh = w_hh.id, ibh = b_hh.id;
  bool needs = rg(x) || rg(h) || rg(w_ih) || rg(b_ih) || rg(w_hh) || rg(b_hh);
  return x.tape->push(
      std::move(out), needs,
      [=, r = std::move(r), z = std::move(z), n = std::move(n), ghn = std::move(ghn)](
          Tape& t, int, const Mat& g) {
        const Mat& hv = t.value(ih);
        auto ga = g.array();
        Mat dn_pre = (ga * (1.0 - z.array()) * (1.0 - n.array().square())).matrix();
        Mat dr_pre = (dn_pre.array() * ghn.array() * r.array() * (1.0 - r.array())).matrix();
        Mat dz_pre =
            (ga * (hv.array() - n.array()) * z.array() * (1.0 - z.array())).matrix();
        const Eigen::Index cols = g.cols();
        Mat dgi(3 * d, cols);
        dgi.topRows(d) = dr_pre;
        dgi.middleRows(d, d) = dz_pre;
        dgi.bottomRows(d) = dn_pre;
        Mat dgh = dgi;
        dgh.bottomRows(d) = (dn_pre.array() * r.array()).matrix();
        if (t.requires_grad(ix)) t.add_grad(ix, t.value(iwi).transpose() * dgi);
        if (t.requires_grad(ih)) {
          Mat dh = t.value(iwh).transpose() * dgh;
          dh.array() += ga * z.array();
          t.add_grad(ih, dh);
        }
        if (t.requires_grad(ibi)) t.add_grad(ibi, dgi.rowwise().sum());
        if (t.requires_grad(ibh)) t.add_grad(ibh, dgh.rowwise().sum());
        if (t.requires_grad(iwi)) t.add_outer_grad(iwi, std::move(dgi), ix);
        if (t.requires_grad(iwh)) t.add_outer_grad(iwh, std::move(dgh), ih);
      });
}

namespace {

// Elementwise op whose derivative is expressed through input x and output y.
template <typename F, typename D>
Var unary(Var a, F forward, D derivative) {
  int ia = a.id;
  Mat out = forward(a.value());
  return a.tape->push(std::move(out), rg(a), [ia, derivative](Tape& t, int self, const Mat& g) {
    t.add_grad(ia, g.cwiseProduct(derivative(t.value(ia), t.value(self))));
  });
}

}  // namespace

Var sigmoid(Var a) {
  return unary(
      a, [](const Mat& x) -> Mat { return (1.0 + (-x.array()).exp()).inverse().matrix(); },
      [](const Mat&, const Mat& y) -> Mat { return (y.array() * (1.0 - y.array())).matrix(); });
}

Var tanh(Var a) {
  return unary(
      a, [](const Mat& x) -> Mat { return x.array().tanh().matrix(); },
      [](const Mat&, const Mat& y) -> Mat { return (1.0 - y.array().square()).matrix(); });
}

Var relu(Var a) {
  return unary(
      a, [](const Mat& x) -> Mat { return x.cwiseMax(0.0); },
      [](const Mat& x, const Mat&) -> Mat { return (x.array() > 0.0).cast<double>().matrix(); });
}

Var exp(Var a) {
  return unary(
      a, [](const Mat& x) -> Mat { return x.array().exp().matrix(); },
      [](const Mat&, const Mat& y) -> Mat { return y; });
}

Var log(Var a) {
  return unary(
      a, [](const Mat& x) -> Mat { return x.array().log().matrix(); },
      [](const Mat& x, const Mat&) -> Mat { return x.array().inverse().matrix(); });
}

Var softplus(Var a) {
  return unary(
      a,
      [](const Mat& x) -> Mat {
        // log(1 + e^x) = max(x, 0) + log1p(e^{-|x|})
        return (x.array().max(0.0) + (-x.array().abs()).exp().log1p()).matrix();
      },
      [](const Mat& x, const Mat&) -> Mat {
        return (1.0 + (-x.array()).exp()).inverse().matrix();
      });
}

Var square(Var a) {
  return unary(
      a, [](const Mat& x) -> Mat { return x.array().square().matrix(); },
      [](const Mat& x, const Mat&) -> Mat { return 2.0 * x; });
}

Var clamp(Var a, double lo, double hi) {
  return unary(
      a, [lo, hi](const Mat& x) -> Mat { return x.cwiseMax(lo).cwiseMin(hi); },
      [lo, hi](const Mat& x, const Mat&) -> Mat {
        return ((x.array() >= lo) && (x.array() <= hi)).cast<double>().matrix();
      });
}

Var minimum(Var a, Var b) {
  check_same_shape("minimum", a, b);
  int ia = a.id, ib = b.id;
  return a.tape->push(a.value().cwiseMin(b.value()), rg(a) || rg(b),
                      [ia, ib](Tape& t, int, const Mat& g) {
                        // Ties route the gradient to the first argument.
                        Mat pick_a = (t.value(ia).array() <= t.value(ib).array()).cast<double>();
                        if (t.requires_grad(ia)) t.add_grad(ia, g.cwiseProduct(pick_a));
                        if (t.requires_grad(ib)) {
                          t.add_grad(ib, g.cwiseProduct((1.0 - pick_a.array()).matrix()));
                        }
                      });
}

Var sum(Var a) {
  int ia = a.id;
  Mat out(1, 1);
  out(0, 0) = a.value().sum();
  Eigen::Index r = a.rows(), c = a.cols();
  return a.tape->push(std::move(out), rg(a), [ia, r, c](Tape& t, int, const Mat& g) {
    t.add_grad(ia, Mat::Constant(r, c, g(0, 0)));
  });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  if (n == 0) throw ShapeError("mean of empty node");
  return sum(a) * (1.0 / n);
}

Var dot(Var a, Var b) { return sum(mul(a, b)); }

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  Tape* tape = parts[0].tape;
  const Eigen::Index cols = parts[0].cols();
  Eigen::Index rows = 0;
  bool any = false;
  for (const Var& p : parts) {
    if (p.cols() != cols) throw ShapeError("concat_rows: column mismatch");
    rows += p.rows();
    any = any || rg(p);
  }
  Mat out(rows, cols);
  std::vector<std::pair<int, Eigen::Index>> pieces;
  pieces.reserve(parts.size());
  Eigen::Index off = 0;
  for (const Var& p : parts) {
    out.middleRows(off, p.rows()) = p.value();
    pieces.emplace_back(p.id, off);
    off += p.rows();
  }
  return tape->push(std::move(out), any, [pieces](Tape& t, int, const Mat& g) {
    for (const auto& [id, start] : pieces) {
      if (t.requires_grad(id)) t.add_grad(id, g.middleRows(start, t.value(id).rows()));
    }
  });
}

Var concat_rows(std::initializer_list<Var> parts) {
  return concat_rows(std::span<const Var>(parts.begin(), parts.size()));
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  Tape* tape = parts[0].tape;
  const Eigen::Index rows = parts[0].rows();
  Eigen::Index cols = 0;
  bool any = false;
  for (const Var& p : parts) {
    if (p.rows() != rows) throw ShapeError("concat_cols: row mismatch");
    cols += p.cols();
    any = any || rg(p);
  }
  Mat out(rows, cols);
  std::vector<std::pair<int, Eigen::Index>> pieces;
  pieces.reserve(parts.size());
  Eigen::Index off = 0;
  for (const Var& p : parts) {
    out.middleCols(off, p.cols()) = p.value();
    pieces.emplace_back(p.id, off);
    off += p.cols();
  }
  return tape->push(std::move(out), any, [pieces](Tape& t, int, const Mat& g) {
    for (const auto& [id, start] : pieces) {
      if (t.requires_grad(id)) t.add_grad(id, g.middleCols(start, t.value(id).cols()));
    }
  });
}

Var slice_rows(Var a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) {
    throw ShapeError("slice_rows: range out of bounds");
  }
  int ia = a.id;
  Eigen::Index r = a.rows(), c = a.cols();
  return a.tape->push(a.value().middleRows(start, count), rg(a),
                      [ia, r, c, start, count](Tape& t, int, const Mat& g) {
                        Mat full = Mat::Zero(r, c);
                        full.middleRows(start, count) = g;
                        t.add_grad(ia, full);
                      });
}

Var col(Var a, Eigen::Index j) {
  if (j < 0 || j >= a.cols()) throw ShapeError("col: index out of bounds");
  int ia = a.id;
  Eigen::Index r = a.rows(), c = a.cols();
  return a.tape->push(a.value().col(j), rg(a), [ia, r, c, j](Tape& t, int, const Mat& g) {
    Mat full = Mat::Zero(r, c);
    full.col(j) = g;
    t.add_grad(ia, full);
  });
}

Var reshape(Var a, Eigen::Index rows, Eigen::Index cols) {
  if (rows * cols != a.value().size()) throw ShapeError("reshape: size mismatch");
  int ia = a.id;
  Eigen::Index r = a.rows(), c = a.cols();
  Mat out = a.value().reshaped(rows, cols);
  return a.tape->push(std::move(out), rg(a), [ia, r, c](Tape& t, int, const Mat& g) {
    t.add_grad(ia, g.reshaped(r, c));
  });
}

Var gather_cols(Var a, std::span<const int> index) {
  const Mat& v = a.value();
  Mat out(v.rows(), static_cast<Eigen::Index>(index.size()));
  for (std::size_t c = 0; c < index.size(); ++c) {
    if (index[c] < 0 || index[c] >= v.cols()) throw ShapeError("gather_cols: index out of bounds");
    out.col(static_cast<Eigen::Index>(c)) = v.col(index[c]);
  }
  int ia = a.id;
  Eigen::Index r = v.rows(), cols = v.cols();
  std::vector<int> idx(index.begin(), index.end());
  return a.tape->push(std::move(out), rg(a), [ia, r, cols, idx](Tape& t, int, const Mat& g) {
    Mat full = Mat::Zero(r, cols);
    for (std::size_t c = 0; c < idx.size(); ++c) full.col(idx[c]) += g.col(static_cast<Eigen::Index>(c));
    t.add_grad(ia, full);
  });
}

Var softmax(Var a) {
  int ia = a.id;
  Mat out = a.value();
  for (Eigen::Index j = 0; j < out.cols(); ++j) {
    auto c = out.col(j);
    c.array() = (c.array() - c.maxCoeff()).exp();
    c /= c.sum();
  }
  return a.tape->push(std::move(out), rg(a), [ia](Tape& t, int self, const Mat& g) {
    const Mat& y = t.value(self);
    Mat gy = g.cwiseProduct(y);
    Eigen::RowVectorXd s = gy.colwise().sum();
    Mat gx = gy - (y.array().rowwise() * s.array()).matrix();
    t.add_grad(ia, gx);
  });
}

Var log_softmax(Var a) {
  int ia = a.id;
  Mat out = a.value();
  for (Eigen::Index j = 0; j < out.cols(); ++j) {
    auto c = out.col(j);
    const double m = c.maxCoeff();
    const double lse = m + std::log((c.array() - m).exp().sum());
    c.array() -= lse;
  }
  return a.tape->push(std::move(out), rg(a), [ia](Tape& t, int self, const Mat& g) {
    Mat p = t.value(self).array().exp().matrix();
    Eigen::RowVectorXd s = g.colwise().sum();
    Mat gx = g - (p.array().rowwise() * s.array()).matrix();
    t.add_grad(ia, gx);
  });
}

Var multihead_attention(Var keys, Var values, Var query, int heads, Mat* weights) {
  const Eigen::Index slots = keys.cols();
  if (heads <= 0 || keys.rows() % heads != 0 || values.rows() % heads != 0) {
    throw ShapeError("multihead_attention: dimensions not divisible by head count");
  }
  if (values.cols() != slots || query.rows() != keys.rows() || query.cols() != 1) {
    throw ShapeError("multihead_attention: keys " + shape_of(keys.value()) + ", values " +
                     shape_of(values.value()) + ", query " + shape_of(query.value()));
  }
  if (slots == 0) throw ShapeError("multihead_attention: no slots");
  const Eigen::Index dk = keys.rows() / heads;
  const Eigen::Index dv = values.rows() / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dk));
  const Mat& k = keys.value();
  const Mat& v = values.value();
  const Mat& q = query.value();

  Mat w(slots, heads);
  Mat out(heads * dv, 1);
  for (int h = 0; h < heads; ++h) {
    Vec s = k.middleRows(h * dk, dk).transpose() * q.middleRows(h * dk, dk) * inv_sqrt;
    s.array() = (s.array() - s.maxCoeff()).exp();
    s /= s.sum();
    w.col(h) = s;
    out.middleRows(h * dv, dv) = v.middleRows(h * dv, dv) * s;
  }
  if (weights != nullptr) *weights = w;

  int ik = keys.id, iv = values.id, iq = query.id;
  bool any = rg(keys) || rg(values) || rg(query);
  return keys.tape->push(
      std::move(out), any,
      [ik, iv, iq, heads, dk, dv, inv_sqrt, w](Tape& t, int, const Mat& g) {
        const Mat& k = t.value(ik);
        const Mat& v = t.value(iv);
        const Mat& q = t.value(iq);
        Mat gk = Mat::Zero(k.rows(), k.cols());
        Mat gv = Mat::Zero(v.rows(), v.cols());
        Mat gq = Mat::Zero(q.rows(), 1);
        for (int h = 0; h < heads; ++h) {
          auto go = g.middleRows(h * dv, dv);
          Vec wh = w.col(h);
          gv.middleRows(h * dv, dv) += go * wh.transpose();
          Vec dw = v.middleRows(h * dv, dv).transpose() * go;
          Vec ds = wh.cwiseProduct((dw.array() - wh.dot(dw)).matrix()) * inv_sqrt;
          gq.middleRows(h * dk, dk) += k.middleRows(h * dk, dk) * ds;
          gk.middleRows(h * dk, dk) += q.middleRows(h * dk, dk) * ds.transpose();
        }
        t.add_grad(ik, gk);
        t.add_grad(iv, gv);
        t.add_grad(iq, gq);
      });
}

Var hebbian_step(Var w, Var value, Var key, Var g_plus, Var g_minus, Var w_max) {
  if (value.cols() != 1 || key.cols() != 1 || w.rows() != value.rows() ||
      w.cols() != key.rows()) {
    throw ShapeError("hebbian_step: W " + shape_of(w.value()) + " vs value " +
                     shape_of(value.value()) + ", key " + shape_of(key.value()));
  }
  const double gp = g_plus.scalar();
  const double gm = g_minus.scalar();
  const double wm = w_max.scalar();
  const Vec& v = value.value();
  const Vec& k = key.value();
  Eigen::RowVectorXd key_sq = k.array().square().matrix().transpose();
  const Mat& wv = w.value();
  Mat out = wv + gp * ((wm - wv.array()) * (v * k.transpose()).array()).matrix() -
            gm * (wv.array().rowwise() * key_sq.array()).matrix();

  int iw = w.id, iv = value.id, ik = key.id, igp = g_plus.id, igm = g_minus.id, iwm = w_max.id;
  bool any = rg(w) || rg(value) || rg(key) || rg(g_plus) || rg(g_minus) || rg(w_max);
  return w.tape->push(
      std::move(out), any, [iw, iv, ik, igp, igm, iwm, gp, gm, wm](Tape& t, int, const Mat& g) {
        const Mat& wv = t.value(iw);
        const Vec v = t.value(iv);
        const Vec k = t.value(ik);
        const Mat outer = v * k.transpose();
        const Eigen::RowVectorXd key_sq = k.array().square().matrix().transpose();
        if (t.requires_grad(iw)) {
          Mat gw = g.array() - gp * g.array() * outer.array() -
                   gm * (g.array().rowwise() * key_sq.array());
          t.add_grad(iw, gw);
        }
        if (t.requires_grad(iv) || t.requires_grad(ik)) {
          // Adjoint of the outer product v k^T.
          const Mat go = gp * (g.array() * (wm - wv.array())).matrix();
          if (t.requires_grad(iv)) t.add_grad(iv, go * k);
          if (t.requires_grad(ik)) {
            Vec gk = go.transpose() * v;
            gk.array() -= 2.0 * gm * k.array() * (g.array() * wv.array()).colwise().sum().transpose();
            t.add_grad(ik, gk);
          }
        }
        Mat s(1, 1);
        if (t.requires_grad(igp)) {
          s(0, 0) = (g.array() * (wm - wv.array()) * outer.array()).sum();
          t.add_grad(igp, s);
        }
        if (t.requires_grad(igm)) {
          s(0, 0) = -(g.array() * (wv.array().rowwise() * key_sq.array())).sum();
          t.add_grad(igm, s);
        }
        if (t.requires_grad(iwm)) {
          s(0, 0) = gp * (g.array() * outer.array()).sum();
          t.add_grad(iwm, s);
        }
      });
}

Var hebbian_step(Var w, const Vec& value, const Vec& key, Var g_plus, Var g_minus, Var w_max) {
  Tape& t = *w.tape;
  return hebbian_step(w, t.constant(value), t.constant(key), g_plus, g_minus, w_max);
}

}  // namespace bimrl::ad
