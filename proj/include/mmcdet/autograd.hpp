#pragma once

// Reverse-mode automatic differentiation over dense double matrices.
//
// A Tape records every operation of one forward pass. Values are Eigen
// matrices; a scalar is a 1x1 matrix. Leaves are constants (no gradient),
// variables (gradient kept on the tape) or parameters (gradient accumulated
// into the owning Parameter on backward()). A tape is single-use: build the
// graph, call backward() once, discard.

#include <Eigen/Dense>

#include <cassert>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mmcdet/error.hpp"

namespace mmcdet::ag {

using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;

  Parameter() = default;
  Parameter(std::string n, Matrix v)
      : name(std::move(n)), value(std::move(v)), grad(Matrix::Zero(value.rows(), value.cols())) {}

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

class Tape;

class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  double scalar() const {
    assert(rows() == 1 && cols() == 1);
    return value()(0, 0);
  }
  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  // Called with the gradient of the node's output; must accumulate into the
  // node's inputs through Tape::accumulate.
  using BackwardFn = std::function<void(Tape&, const Matrix&)>;

  Tape() { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value) { return push(std::move(value), false, nullptr, {}); }
  Var variable(Matrix value) { return push(std::move(value), true, nullptr, {}); }
  Var parameter(Parameter& p) { return push(p.value, true, &p, {}); }

  // Adds an interior node. requires_grad is inherited from the inputs.
  Var record(Matrix value, std::initializer_list<Var> inputs, BackwardFn fn) {
    bool rg = false;
    for (const Var& v : inputs) rg = rg || nodes_[v.id_].requires_grad;
    return push(std::move(value), rg, nullptr, rg ? std::move(fn) : BackwardFn{});
  }
  Var record(Matrix value, std::span<const Var> inputs, BackwardFn fn) {
    bool rg = false;
    for (const Var& v : inputs) rg = rg || nodes_[v.id_].requires_grad;
    return push(std::move(value), rg, nullptr, rg ? std::move(fn) : BackwardFn{});
  }

  const Matrix& value(const Var& v) const { return nodes_[v.id_].value; }
  bool requires_grad(const Var& v) const { return nodes_[v.id_].requires_grad; }

  // Gradient of the last backward() target with respect to v; zeros if v
  // did not influence it.
  Matrix grad(const Var& v) const {
    const Node& n = nodes_[v.id_];
    if (n.grad.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  template <typename Expr>
  void accumulate(const Var& v, const Expr& g) {
    Node& n = nodes_[v.id_];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  void backward(const Var& loss) {
    if (loss.tape_ != this) throw Error("backward: variable belongs to another tape");
    if (loss.rows() != 1 || loss.cols() != 1) throw Error("backward: loss must be a scalar");
    for (Node& n : nodes_) n.grad.resize(0, 0);
    if (!nodes_[loss.id_].requires_grad) return;
    nodes_[loss.id_].grad = Matrix::Ones(1, 1);
    for (int i = loss.id_; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.grad.size() == 0) continue;
      if (n.backward) {
        n.backward(*this, n.grad);
      } else if (n.param != nullptr) {
        n.param->grad += n.grad;
      }
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    BackwardFn backward;
    Parameter* param = nullptr;
    bool requires_grad = false;
  };

  Var push(Matrix value, bool rg, Parameter* p, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), Matrix(), std::move(fn), p, rg});
    return Var(this, static_cast<int>(nodes_.size()) - 1);
  }

  std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape_->value(*this); }

// ---------------------------------------------------------------------------
// Operations

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw Error(std::string(op) + ": shape mismatch");
  }
}

inline Var detach(const Var& a) { return a.tape()->constant(a.value()); }

inline Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  return a.tape()->record(a.value() + b.value(), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

inline Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  return a.tape()->record(a.value() - b.value(), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, -g);
  });
}

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }

// Elementwise product.
inline Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  return a.tape()->record(a.value().cwiseProduct(b.value()), {a, b},
                          [a, b](Tape& t, const Matrix& g) {
                            t.accumulate(a, g.cwiseProduct(b.value()));
                            t.accumulate(b, g.cwiseProduct(a.value()));
                          });
}

inline Var scale(const Var& a, double s) {
  return a.tape()->record(a.value() * s, {a},
                          [a, s](Tape& t, const Matrix& g) { t.accumulate(a, g * s); });
}

inline Var operator*(double s, const Var& a) { return scale(a, s); }

inline Var add_scalar(const Var& a, double s) {
  return a.tape()->record(a.value().array() + s, {a},
                          [a](Tape& t, const Matrix& g) { t.accumulate(a, g); });
}

inline Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw Error("matmul: inner dimension mismatch");
  return a.tape()->record(a.value() * b.value(), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (t.requires_grad(a)) t.accumulate(a, g * b.value().transpose());
    if (t.requires_grad(b)) t.accumulate(b, a.value().transpose() * g);
  });
}

// a * b^T
inline Var matmul_nt(const Var& a, const Var& b) {
  if (a.cols() != b.cols()) throw Error("matmul_nt: inner dimension mismatch");
  return a.tape()->record(a.value() * b.value().transpose(), {a, b},
                          [a, b](Tape& t, const Matrix& g) {
                            if (t.requires_grad(a)) t.accumulate(a, g * b.value());
                            if (t.requires_grad(b)) t.accumulate(b, g.transpose() * a.value());
                          });
}

inline Var transpose(const Var& a) {
  return a.tape()->record(a.value().transpose(), {a},
                          [a](Tape& t, const Matrix& g) { t.accumulate(a, g.transpose()); });
}

// Adds a 1 x c row vector to every row of a.
inline Var add_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw Error("add_row: shape mismatch");
  Matrix out = a.value().rowwise() + row.value().row(0);
  return a.tape()->record(std::move(out), {a, row}, [a, row](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    if (t.requires_grad(row)) t.accumulate(row, g.colwise().sum());
  });
}

inline Var relu(const Var& a) {
  Matrix out = a.value().cwiseMax(0.0);
  return a.tape()->record(std::move(out), {a}, [a](Tape& t, const Matrix& g) {
    t.accumulate(a, (a.value().array() > 0.0).cast<double>().matrix().cwiseProduct(g));
  });
}

inline Var sigmoid(const Var& a) {
  Matrix out = (1.0 + (-a.value().array()).exp()).inverse().matrix();
  Matrix y = out;
  return a.tape()->record(std::move(out), {a}, [a, y](Tape& t, const Matrix& g) {
    const auto s = y.array();
    t.accumulate(a, (g.array() * s * (1.0 - s)).matrix());
  });
}

inline Var exp(const Var& a) {
  Matrix out = a.value().array().exp().matrix();
  Matrix copy = out;
  return a.tape()->record(std::move(out), {a}, [a, copy](Tape& t, const Matrix& g) {
    t.accumulate(a, g.cwiseProduct(copy));
  });
}

inline Var log(const Var& a) {
  return a.tape()->record(a.value().array().log().matrix(), {a}, [a](Tape& t, const Matrix& g) {
    t.accumulate(a, g.cwiseQuotient(a.value()));
  });
}

inline Var sum(const Var& a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return a.tape()->record(std::move(out), {a}, [a](Tape& t, const Matrix& g) {
    t.accumulate(a, Matrix::Constant(a.rows(), a.cols(), g(0, 0)));
  });
}

inline Var mean(const Var& a) {
  const double n = static_cast<double>(a.value().size());
  return scale(sum(a), 1.0 / n);
}

// r x c -> r x 1
inline Var row_sum(const Var& a) {
  return a.tape()->record(a.value().rowwise().sum(), {a}, [a](Tape& t, const Matrix& g) {
    t.accumulate(a, g.replicate(1, a.cols()));
  });
}

// r x c -> 1 x c
inline Var col_sum(const Var& a) {
  return a.tape()->record(a.value().colwise().sum(), {a}, [a](Tape& t, const Matrix& g) {
    t.accumulate(a, g.replicate(a.rows(), 1));
  });
}

inline Var element(const Var& a, Index r, Index c) {
  Matrix out(1, 1);
  out(0, 0) = a.value()(r, c);
  return a.tape()->record(std::move(out), {a}, [a, r, c](Tape& t, const Matrix& g) {
    Matrix d = Matrix::Zero(a.rows(), a.cols());
    d(r, c) = g(0, 0);
    t.accumulate(a, d);
  });
}

inline Var slice_rows(const Var& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw Error("slice_rows: out of range");
  return a.tape()->record(a.value().middleRows(start, count), {a},
                          [a, start, count](Tape& t, const Matrix& g) {
                            Matrix d = Matrix::Zero(a.rows(), a.cols());
                            d.middleRows(start, count) = g;
                            t.accumulate(a, d);
                          });
}

inline Var slice_cols(const Var& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw Error("slice_cols: out of range");
  return a.tape()->record(a.value().middleCols(start, count), {a},
                          [a, start, count](Tape& t, const Matrix& g) {
                            Matrix d = Matrix::Zero(a.rows(), a.cols());
                            d.middleCols(start, count) = g;
                            t.accumulate(a, d);
                          });
}

inline Var gather_rows(const Var& a, std::vector<int> rows) {
  Matrix out(static_cast<Index>(rows.size()), a.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= a.rows()) throw Error("gather_rows: index out of range");
    out.row(static_cast<Index>(i)) = a.value().row(rows[i]);
  }
  return a.tape()->record(std::move(out), {a}, [a, rows = std::move(rows)](Tape& t, const Matrix& g) {
    Matrix d = Matrix::Zero(a.rows(), a.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) d.row(rows[i]) += g.row(static_cast<Index>(i));
    t.accumulate(a, d);
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw Error("concat_rows: no inputs");
  const Index cols = parts.front().cols();
  Index rows = 0;
  for (const Var& p : parts) {
    if (p.cols() != cols) throw Error("concat_rows: column mismatch");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  Index at = 0;
  for (const Var& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return parts.front().tape()->record(std::move(out), std::span<const Var>(parts),
                                      [parts](Tape& t, const Matrix& g) {
                                        Index off = 0;
                                        for (const Var& p : parts) {
                                          t.accumulate(p, g.middleRows(off, p.rows()));
                                          off += p.rows();
                                        }
                                      });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw Error("concat_cols: no inputs");
  const Index rows = parts.front().rows();
  Index cols = 0;
  for (const Var& p : parts) {
    if (p.rows() != rows) throw Error("concat_cols: row mismatch");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  Index at = 0;
  for (const Var& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return parts.front().tape()->record(std::move(out), std::span<const Var>(parts),
                                      [parts](Tape& t, const Matrix& g) {
                                        Index off = 0;
                                        for (const Var& p : parts) {
                                          t.accumulate(p, g.middleCols(off, p.cols()));
                                          off += p.cols();
                                        }
                                      });
}

inline Matrix softmax_rows_value(const Matrix& x) {
  Matrix out = x.colwise() - x.rowwise().maxCoeff();
  out = out.array().exp().matrix();
  out.array().colwise() /= out.rowwise().sum().array();
  return out;
}

inline Matrix log_softmax_rows_value(const Matrix& x) {
  Matrix shifted = x.colwise() - x.rowwise().maxCoeff();
  const Eigen::VectorXd lse = shifted.array().exp().rowwise().sum().log().matrix();
  shifted.colwise() -= lse;
  return shifted;
}

inline Var softmax_rows(const Var& a) {
  Matrix out = softmax_rows_value(a.value());
  Matrix y = out;
  return a.tape()->record(std::move(out), {a}, [a, y](Tape& t, const Matrix& g) {
    const Eigen::VectorXd dot = g.cwiseProduct(y).rowwise().sum();
    t.accumulate(a, y.cwiseProduct(g.colwise() - dot));
  });
}

inline Var log_softmax_rows(const Var& a) {
  Matrix out = log_softmax_rows_value(a.value());
  Matrix p = out.array().exp().matrix();
  return a.tape()->record(std::move(out), {a}, [a, p](Tape& t, const Matrix& g) {
    const Eigen::VectorXd gs = g.rowwise().sum();
    t.accumulate(a, g - (p.array().colwise() * gs.array()).matrix());
  });
}

// Picks a(i, idx[i]) for every row; returns r x 1.
inline Var pick(const Var& a, std::vector<int> idx) {
  if (static_cast<Index>(idx.size()) != a.rows()) throw Error("pick: one index per row required");
  Matrix out(a.rows(), 1);
  for (Index i = 0; i < a.rows(); ++i) {
    if (idx[i] < 0 || idx[i] >= a.cols()) throw Error("pick: index out of range");
    out(i, 0) = a.value()(i, idx[i]);
  }
  return a.tape()->record(std::move(out), {a}, [a, idx = std::move(idx)](Tape& t, const Matrix& g) {
    Matrix d = Matrix::Zero(a.rows(), a.cols());
    for (Index i = 0; i < a.rows(); ++i) d(i, idx[i]) = g(i, 0);
    t.accumulate(a, d);
  });
}

// Mean cross-entropy of each row of logits against its target column.
inline Var cross_entropy(const Var& logits, std::vector<int> targets) {
  return scale(sum(pick(log_softmax_rows(logits), std::move(targets))),
               -1.0 / static_cast<double>(logits.rows()));
}

// Mean binary cross-entropy of sigmoid(logits) against targets in {0,1}.
inline Var bce_with_logits(const Var& logits, const Matrix& targets) {
  if (targets.rows() != logits.rows() || targets.cols() != logits.cols()) {
    throw Error("bce_with_logits: shape mismatch");
  }
  const auto x = logits.value().array();
  const auto z = targets.array();
  // max(x,0) - x z + log(1 + exp(-|x|))
  Matrix out(1, 1);
  out(0, 0) = (x.max(0.0) - x * z + (1.0 + (-x.abs()).exp()).log()).sum() /
              static_cast<double>(logits.value().size());
  return logits.tape()->record(std::move(out), {logits}, [logits, targets](Tape& t, const Matrix& g) {
    const auto xs = logits.value().array();
    const Matrix s = (1.0 + (-xs).exp()).inverse().matrix();
    const double n = static_cast<double>(logits.value().size());
    t.accumulate(logits, ((s - targets) * (g(0, 0) / n)).eval());
  });
}

// Elementwise smooth-L1 with transition point beta.
inline Var smooth_l1(const Var& a, double beta = 1.0) {
  const auto x = a.value().array();
  Matrix out = (x.abs() < beta).select(0.5 * x.square() / beta, x.abs() - 0.5 * beta).matrix();
  return a.tape()->record(std::move(out), {a}, [a, beta](Tape& t, const Matrix& g) {
    const auto xv = a.value().array();
    Matrix d = (xv.abs() < beta).select(xv / beta, xv.sign()).matrix();
    t.accumulate(a, d.cwiseProduct(g));
  });
}

// Row-wise x / sum(x); rows must have a positive sum.
inline Var normalize_rows_sum(const Var& a) {
  const Eigen::VectorXd sums = a.value().rowwise().sum();
  Matrix out = a.value().array().colwise() / sums.array();
  Matrix y = out;
  return a.tape()->record(std::move(out), {a}, [a, y, sums](Tape& t, const Matrix& g) {
    const Eigen::VectorXd dot = g.cwiseProduct(y).rowwise().sum();
    Matrix d = g.colwise() - dot;
    d.array().colwise() /= sums.array();
    t.accumulate(a, d);
  });
}

// Row-wise x / max(||x||, eps).
inline Var l2_normalize_rows(const Var& a, double eps = 1e-12) {
  const Eigen::VectorXd norms = a.value().rowwise().norm().cwiseMax(eps);
  Matrix out = a.value().array().colwise() / norms.array();
  Matrix y = out;
  return a.tape()->record(std::move(out), {a}, [a, y, norms](Tape& t, const Matrix& g) {
    const Eigen::VectorXd dot = g.cwiseProduct(y).rowwise().sum();
    Matrix d = (g - (y.array().colwise() * dot.array()).matrix());
    d.array().colwise() /= norms.array();
    t.accumulate(a, d);
  });
}

// Row-wise layer normalisation with learned gain and bias (both 1 x c).
inline Var layer_norm_rows(const Var& a, const Var& gain, const Var& bias, double eps = 1e-5) {
  const auto c = static_cast<double>(a.cols());
  const Eigen::VectorXd mu = a.value().rowwise().mean();
  Matrix centered = a.value().colwise() - mu;
  const Eigen::VectorXd inv_std =
      ((centered.array().square().rowwise().sum() / c) + eps).rsqrt().matrix();
  Matrix xhat = centered.array().colwise() * inv_std.array();
  Matrix out = (xhat.array().rowwise() * gain.value().row(0).array()).rowwise() +
               bias.value().row(0).array();
  return a.tape()->record(
      std::move(out), {a, gain, bias}, [a, gain, bias, xhat, inv_std](Tape& t, const Matrix& g) {
        if (t.requires_grad(gain)) t.accumulate(gain, g.cwiseProduct(xhat).colwise().sum());
        if (t.requires_grad(bias)) t.accumulate(bias, g.colwise().sum());
        if (!t.requires_grad(a)) return;
        Matrix gx = g.array().rowwise() * gain.value().row(0).array();
        const Eigen::VectorXd m1 = gx.rowwise().mean();
        const Eigen::VectorXd m2 = gx.cwiseProduct(xhat).rowwise().mean();
        Matrix d = gx.colwise() - m1;
        d -= (xhat.array().colwise() * m2.array()).matrix();
        d.array().colwise() *= inv_std.array();
        t.accumulate(a, d);
      });
}

}  // namespace mmcdet::ag
