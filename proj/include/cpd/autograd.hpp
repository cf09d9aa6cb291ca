// Copyright 2026 The cpd-toolkit Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cassert>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numbers>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace cpd {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

namespace ag {

class Tape;

// Handle to a node recorded on a Tape. Cheap to copy; only valid while the
// tape is alive.
class Var {
 public:
  Var() = default;
  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }
  Tape* tape() const { return tape_; }
  int id() const { return id_; }

 private:
  friend class Tape;
  Var(Tape* t, int id) : tape_(t), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

// Reverse-mode autodiff over dense matrices. Nodes are recorded in creation
// order, so reverse creation order is a valid topological order.
//
// A tape built with record = false stores values only; it is used for
// inference where no backward pass is needed.
class Tape {
 public:
  using Backward = std::function<void(Tape&)>;

  explicit Tape(bool record = true) : record_(record) { nodes_.reserve(512); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var constant(Matrix m) { return push(std::move(m), false, nullptr); }

  // Leaf whose gradient is reported under `slot` by accumulate_parameter_grads.
  // The matrix is referenced, not copied, and must outlive the tape.
  Var parameter(const Matrix& m, std::size_t slot) {
    Node n;
    n.external = &m;
    n.needs_grad = record_;
    n.param_slot = static_cast<long>(slot);
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<int>(nodes_.size()) - 1);
  }

  const Matrix& value(int id) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    return n.external ? *n.external : n.value;
  }

  bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }

  // Gradient buffer of a node, allocated (zeroed) on first use.
  Matrix& grad(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.size() == 0) {
      const Matrix& v = value(id);
      n.grad = Matrix::Zero(v.rows(), v.cols());
    }
    return n.grad;
  }

  bool has_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].grad.size() != 0; }

  Var push(Matrix value, bool needs_grad, Backward back) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = record_ && needs_grad;
    if (n.needs_grad) n.backward = std::move(back);
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<int>(nodes_.size()) - 1);
  }

  // Seeds d(root)/d(root) = 1 and runs every recorded backward closure.
  void backward(Var root) {
    if (!record_) throw std::logic_error("backward on a non-recording tape");
    if (root.rows() != 1 || root.cols() != 1) throw std::logic_error("backward root must be a scalar");
    grad(root.id())(0, 0) += 1.0;
    for (int id = root.id(); id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (n.backward && n.grad.size() != 0) n.backward(*this);
    }
  }

  // Adds every parameter leaf's gradient into grads[slot].
  void accumulate_parameter_grads(std::vector<Matrix>& grads) const {
    for (const Node& n : nodes_) {
      if (n.param_slot < 0 || n.grad.size() == 0) continue;
      grads[static_cast<std::size_t>(n.param_slot)] += n.grad;
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    const Matrix* external = nullptr;
    Matrix grad;
    Backward backward;
    bool needs_grad = false;
    long param_slot = -1;
  };

  bool record_;
  std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape_->value(id_); }

namespace detail {

inline Tape& tape_of(Var a) {
  assert(a.tape());
  return *a.tape();
}

inline bool any_grad(std::initializer_list<Var> vs) {
  for (Var v : vs)
    if (v.tape()->needs_grad(v.id())) return true;
  return false;
}

}  // namespace detail

inline Var detach(Var a) { return detail::tape_of(a).constant(a.value()); }

inline Var add(Var a, Var b) {
  Tape& t = detail::tape_of(a);
  return t.push(a.value() + b.value(), detail::any_grad({a, b}), [a, b, self = static_cast<int>(t.size())](Tape& t) {
    const Matrix& g = t.grad(self);
    if (t.needs_grad(a.id())) t.grad(a.id()) += g;
    if (t.needs_grad(b.id())) t.grad(b.id()) += g;
  });
}

inline Var sub(Var a, Var b) {
  Tape& t = detail::tape_of(a);
  return t.push(a.value() - b.value(), detail::any_grad({a, b}), [a, b, self = static_cast<int>(t.size())](Tape& t) {
    const Matrix& g = t.grad(self);
    if (t.needs_grad(a.id())) t.grad(a.id()) += g;
    if (t.needs_grad(b.id())) t.grad(b.id()) -= g;
  });
}

// a + broadcast(row) where row is 1 x cols.
inline Var add_row(Var a, Var row) {
  Tape& t = detail::tape_of(a);
  Matrix out = a.value();
  out.rowwise() += row.value().row(0);
  return t.push(std::move(out), detail::any_grad({a, row}), [a, row, self = static_cast<int>(t.size())](Tape& t) {
    const Matrix& g = t.grad(self);
    if (t.needs_grad(a.id())) t.grad(a.id()) += g;
    if (t.needs_grad(row.id())) t.grad(row.id()) += g.colwise().sum();
  });
}

inline Var matmul(Var a, Var b) {
  Tape& t = detail::tape_of(a);
  return t.push(a.value() * b.value(), detail::any_grad({a, b}), [a, b, self = static_cast<int>(t.size())](Tape& t) {
    const Matrix& g = t.grad(self);
    if (t.needs_grad(a.id())) t.grad(a.id()).noalias() += g * b.value().transpose();
    if (t.needs_grad(b.id())) t.grad(b.id()).noalias() += a.value().transpose() * g;
  });
}

// a * b^T
inline Var matmul_nt(Var a, Var b) {
  Tape& t = detail::tape_of(a);
  return t.push(a.value() * b.value().transpose(), detail::any_grad({a, b}),
                [a, b, self = static_cast<int>(t.size())](Tape& t) {
                  const Matrix& g = t.grad(self);
                  if (t.needs_grad(a.id())) t.grad(a.id()).noalias() += g * b.value();
                  if (t.needs_grad(b.id())) t.grad(b.id()).noalias() += g.transpose() * a.value();
                });
}

inline Var mul(Var a, Var b) {
  Tape& t = detail::tape_of(a);
  return t.push(a.value().cwiseProduct(b.value()), detail::any_grad({a, b}),
                [a, b, self = static_cast<int>(t.size())](Tape& t) {
                  const Matrix& g = t.grad(self);
                  if (t.needs_grad(a.id())) t.grad(a.id()) += g.cwiseProduct(b.value());
                  if (t.needs_grad(b.id())) t.grad(b.id()) += g.cwiseProduct(a.value());
                });
}

// Elementwise product with a constant matrix.
inline Var mul_const(Var a, Matrix mask) {
  Tape& t = detail::tape_of(a);
  Matrix out = a.value().cwiseProduct(mask);
  return t.push(std::move(out), detail::any_grad({a}),
                [a, mask = std::move(mask), self = static_cast<int>(t.size())](Tape& t) {
                  t.grad(a.id()) += t.grad(self).cwiseProduct(mask);
                });
}

inline Var scale(Var a, double s) {
  Tape& t = detail::tape_of(a);
  return t.push(a.value() * s, detail::any_grad({a}), [a, s, self = static_cast<int>(t.size())](Tape& t) {
    t.grad(a.id()) += t.grad(self) * s;
  });
}

// a * s where s is a 1x1 node.
inline Var scale_by(Var a, Var s) {
  Tape& t = detail::tape_of(a);
  const double sv = s.scalar();
  return t.push(a.value() * sv, detail::any_grad({a, s}), [a, s, self = static_cast<int>(t.size())](Tape& t) {
    const Matrix& g = t.grad(self);
    if (t.needs_grad(a.id())) t.grad(a.id()) += g * s.scalar();
    if (t.needs_grad(s.id())) t.grad(s.id())(0, 0) += g.cwiseProduct(a.value()).sum();
  });
}

// Ratio of two 1x1 nodes.
inline Var divide_scalar(Var num, Var den) {
  Tape& t = detail::tape_of(num);
  Matrix out(1, 1);
  out(0, 0) = num.scalar() / den.scalar();
  return t.push(std::move(out), detail::any_grad({num, den}),
                [num, den, self = static_cast<int>(t.size())](Tape& t) {
                  const double g = t.grad(self)(0, 0);
                  const double d = den.scalar();
                  if (t.needs_grad(num.id())) t.grad(num.id())(0, 0) += g / d;
                  if (t.needs_grad(den.id())) t.grad(den.id())(0, 0) -= g * num.scalar() / (d * d);
                });
}

inline Var sum(Var a) {
  Tape& t = detail::tape_of(a);
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return t.push(std::move(out), detail::any_grad({a}), [a, self = static_cast<int>(t.size())](Tape& t) {
    t.grad(a.id()).array() += t.grad(self)(0, 0);
  });
}

inline Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

// Rows of `table` selected by ids (embedding lookup).
inline Var gather_rows(Var table, std::span<const int> ids) {
  Tape& t = detail::tape_of(table);
  const Matrix& tv = table.value();
  Matrix out(static_cast<Eigen::Index>(ids.size()), tv.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = tv.row(ids[i]);
  std::vector<int> idv(ids.begin(), ids.end());
  return t.push(std::move(out), detail::any_grad({table}),
                [table, idv = std::move(idv), self = static_cast<int>(t.size())](Tape& t) {
                  const Matrix& g = t.grad(self);
                  Matrix& gt = t.grad(table.id());
                  for (std::size_t i = 0; i < idv.size(); ++i) gt.row(idv[i]) += g.row(static_cast<Eigen::Index>(i));
                });
}

inline Var select_rows(Var a, std::span<const int> rows) { return gather_rows(a, rows); }

inline Var slice_cols(Var a, Eigen::Index begin, Eigen::Index count) {
  Tape& t = detail::tape_of(a);
  Matrix out = a.value().middleCols(begin, count);
  return t.push(std::move(out), detail::any_grad({a}),
                [a, begin, count, self = static_cast<int>(t.size())](Tape& t) {
                  t.grad(a.id()).middleCols(begin, count) += t.grad(self);
                });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  Tape& t = detail::tape_of(parts.front());
  Eigen::Index cols = 0;
  bool needs = false;
  for (Var p : parts) {
    cols += p.cols();
    needs = needs || t.needs_grad(p.id());
  }
  Matrix out(parts.front().rows(), cols);
  Eigen::Index c = 0;
  for (Var p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  return t.push(std::move(out), needs, [parts, self = static_cast<int>(t.size())](Tape& t) {
    const Matrix& g = t.grad(self);
    Eigen::Index c = 0;
    for (Var p : parts) {
      if (t.needs_grad(p.id())) t.grad(p.id()) += g.middleCols(c, p.cols());
      c += p.cols();
    }
  });
}

// Row-wise RMS normalization with a learned 1 x d gain.
inline Var rms_norm(Var x, Var gain, double eps = 1e-6) {
  Tape& t = detail::tape_of(x);
  const Matrix& xv = x.value();
  const Eigen::Index d = xv.cols();
  Vector inv(xv.rows());
  for (Eigen::Index r = 0; r < xv.rows(); ++r)
    inv(r) = 1.0 / std::sqrt(xv.row(r).squaredNorm() / static_cast<double>(d) + eps);
  Matrix normed = inv.asDiagonal() * xv;
  Matrix out = normed.array().rowwise() * gain.value().row(0).array();
  return t.push(std::move(out), detail::any_grad({x, gain}),
                [x, gain, inv, normed, d, self = static_cast<int>(t.size())](Tape& t) {
                  const Matrix& g = t.grad(self);
                  if (t.needs_grad(gain.id())) t.grad(gain.id()) += g.cwiseProduct(normed).colwise().sum();
                  if (t.needs_grad(x.id())) {
                    Matrix gn = g.array().rowwise() * gain.value().row(0).array();
                    Matrix& gx = t.grad(x.id());
                    for (Eigen::Index r = 0; r < gn.rows(); ++r) {
                      const double dot = gn.row(r).dot(normed.row(r)) / static_cast<double>(d);
                      gx.row(r) += inv(r) * (gn.row(r) - dot * normed.row(r));
                    }
                  }
                });
}

inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

// tanh-approximated GELU.
inline Var gelu(Var x) {
  Tape& t = detail::tape_of(x);
  const Matrix& xv = x.value();
  Matrix th = (kGeluC * (xv.array() + 0.044715 * xv.array().cube())).tanh().matrix();
  Matrix out = (0.5 * xv.array() * (1.0 + th.array())).matrix();
  return t.push(std::move(out), detail::any_grad({x}), [x, th, self = static_cast<int>(t.size())](Tape& t) {
    const auto xa = x.value().array();
    const auto ta = th.array();
    const auto dydx = 0.5 * (1.0 + ta) + 0.5 * xa * (1.0 - ta.square()) * kGeluC * (1.0 + 3.0 * 0.044715 * xa.square());
    t.grad(x.id()).array() += t.grad(self).array() * dydx;
  });
}

// Rotary position encoding applied independently to each head block of
// width head_dim. Row r is rotated by angle positions[r] * theta_j on pair j.
inline Matrix rotary_angles_cos_sin(std::span<const int> positions, Eigen::Index head_dim, double base, bool sine) {
  const Eigen::Index half = head_dim / 2;
  Matrix out(static_cast<Eigen::Index>(positions.size()), half);
  for (std::size_t r = 0; r < positions.size(); ++r)
    for (Eigen::Index j = 0; j < half; ++j) {
      const double theta = std::pow(base, -2.0 * static_cast<double>(j) / static_cast<double>(head_dim));
      const double ang = static_cast<double>(positions[r]) * theta;
      out(static_cast<Eigen::Index>(r), j) = sine ? std::sin(ang) : std::cos(ang);
    }
  return out;
}

namespace detail {

inline Matrix rotate(const Matrix& x, const Matrix& cosm, const Matrix& sinm, Eigen::Index head_dim, double dir) {
  Matrix out(x.rows(), x.cols());
  const Eigen::Index half = head_dim / 2;
  for (Eigen::Index r = 0; r < x.rows(); ++r)
    for (Eigen::Index h = 0; h < x.cols(); h += head_dim)
      for (Eigen::Index j = 0; j < half; ++j) {
        const double a = x(r, h + 2 * j), b = x(r, h + 2 * j + 1);
        const double cs = cosm(r, j), sn = dir * sinm(r, j);
        out(r, h + 2 * j) = a * cs - b * sn;
        out(r, h + 2 * j + 1) = a * sn + b * cs;
      }
  return out;
}

}  // namespace detail

inline Var rotary(Var x, std::span<const int> positions, Eigen::Index head_dim, double base = 10000.0) {
  Tape& t = detail::tape_of(x);
  Matrix cosm = rotary_angles_cos_sin(positions, head_dim, base, false);
  Matrix sinm = rotary_angles_cos_sin(positions, head_dim, base, true);
  Matrix out = detail::rotate(x.value(), cosm, sinm, head_dim, 1.0);
  return t.push(std::move(out), detail::any_grad({x}),
                [x, cosm, sinm, head_dim, self = static_cast<int>(t.size())](Tape& t) {
                  t.grad(x.id()) += detail::rotate(t.grad(self), cosm, sinm, head_dim, -1.0);
                });
}

// Row-wise softmax restricted to the causal support s <= t; entries above the
// diagonal are exactly zero. Rows index queries, columns keys.
inline Var causal_softmax(Var scores) {
  Tape& t = detail::tape_of(scores);
  const Matrix& s = scores.value();
  Matrix out = Matrix::Zero(s.rows(), s.cols());
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    const Eigen::Index n = std::min<Eigen::Index>(r + 1, s.cols());
    const double mx = s.row(r).head(n).maxCoeff();
    double z = 0.0;
    for (Eigen::Index c = 0; c < n; ++c) {
      out(r, c) = std::exp(s(r, c) - mx);
      z += out(r, c);
    }
    out.row(r).head(n) /= z;
  }
  return t.push(std::move(out), detail::any_grad({scores}), [scores, self = static_cast<int>(t.size())](Tape& t) {
    const Matrix& a = t.value(self);
    const Matrix& g = t.grad(self);
    Matrix& gs = t.grad(scores.id());
    for (Eigen::Index r = 0; r < a.rows(); ++r) {
      const double dot = a.row(r).dot(g.row(r));
      gs.row(r).array() += a.row(r).array() * (g.row(r).array() - dot);
    }
  });
}

// Mean over the causal-valid (lower-triangular, diagonal included) entries.
inline Var lower_triangular_mean(Var a) {
  Tape& t = detail::tape_of(a);
  const Matrix& v = a.value();
  double total = 0.0;
  double count = 0.0;
  for (Eigen::Index r = 0; r < v.rows(); ++r)
    for (Eigen::Index c = 0; c <= r && c < v.cols(); ++c) {
      total += v(r, c);
      count += 1.0;
    }
  Matrix out(1, 1);
  out(0, 0) = total / count;
  return t.push(std::move(out), detail::any_grad({a}), [a, count, self = static_cast<int>(t.size())](Tape& t) {
    const double g = t.grad(self)(0, 0) / count;
    Matrix& ga = t.grad(a.id());
    for (Eigen::Index r = 0; r < ga.rows(); ++r)
      for (Eigen::Index c = 0; c <= r && c < ga.cols(); ++c) ga(r, c) += g;
  });
}

// Divides each row by its sum.
inline Var row_normalize(Var a) {
  Tape& t = detail::tape_of(a);
  const Matrix& v = a.value();
  Vector sums = v.rowwise().sum();
  Matrix out = sums.cwiseInverse().asDiagonal() * v;
  return t.push(std::move(out), detail::any_grad({a}), [a, sums, self = static_cast<int>(t.size())](Tape& t) {
    const Matrix& y = t.value(self);
    const Matrix& g = t.grad(self);
    Matrix& ga = t.grad(a.id());
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const double dot = g.row(r).dot(y.row(r));
      ga.row(r).array() += (g.row(r).array() - dot) / sums(r);
    }
  });
}

inline Var log_softmax(Var x) {
  Tape& t = detail::tape_of(x);
  const Matrix& v = x.value();
  Matrix out(v.rows(), v.cols());
  for (Eigen::Index r = 0; r < v.rows(); ++r) {
    const double mx = v.row(r).maxCoeff();
    const double lse = mx + std::log((v.row(r).array() - mx).exp().sum());
    out.row(r) = v.row(r).array() - lse;
  }
  return t.push(std::move(out), detail::any_grad({x}), [x, self = static_cast<int>(t.size())](Tape& t) {
    const Matrix& y = t.value(self);
    const Matrix& g = t.grad(self);
    Matrix& gx = t.grad(x.id());
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const double gs = g.row(r).sum();
      gx.row(r).array() += g.row(r).array() - y.row(r).array().exp() * gs;
    }
  });
}

// Column vector of x(r, cols[r]).
inline Var pick(Var x, std::span<const int> cols) {
  Tape& t = detail::tape_of(x);
  Matrix out(static_cast<Eigen::Index>(cols.size()), 1);
  for (std::size_t r = 0; r < cols.size(); ++r) out(static_cast<Eigen::Index>(r), 0) = x.value()(static_cast<Eigen::Index>(r), cols[r]);
  std::vector<int> cv(cols.begin(), cols.end());
  return t.push(std::move(out), detail::any_grad({x}), [x, cv = std::move(cv), self = static_cast<int>(t.size())](Tape& t) {
    const Matrix& g = t.grad(self);
    Matrix& gx = t.grad(x.id());
    for (std::size_t r = 0; r < cv.size(); ++r) gx(static_cast<Eigen::Index>(r), cv[r]) += g(static_cast<Eigen::Index>(r), 0);
  });
}

// Per-row KL(p_r || q_r) with p a constant distribution and log q on the tape.
// Zero-probability entries of p contribute nothing.
inline Var kl_rows(const Matrix& p, Var log_q) {
  Tape& t = detail::tape_of(log_q);
  const Matrix& lq = log_q.value();
  Matrix out(p.rows(), 1);
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    double kl = 0.0;
    for (Eigen::Index c = 0; c < p.cols(); ++c)
      if (p(r, c) > 0.0) kl += p(r, c) * (std::log(p(r, c)) - lq(r, c));
    out(r, 0) = kl;
  }
  return t.push(std::move(out), detail::any_grad({log_q}), [p, log_q, self = static_cast<int>(t.size())](Tape& t) {
    const Matrix& g = t.grad(self);
    t.grad(log_q.id()) -= g.col(0).asDiagonal() * p;
  });
}

// Elementwise min(x, cap); the gradient is zero where the cap binds.
inline Var clip_max(Var x, double cap) {
  Tape& t = detail::tape_of(x);
  Matrix out = x.value().cwiseMin(cap);
  return t.push(std::move(out), detail::any_grad({x}), [x, cap, self = static_cast<int>(t.size())](Tape& t) {
    const Matrix& g = t.grad(self);
    t.grad(x.id()) += (x.value().array() < cap).cast<double>().matrix().cwiseProduct(g);
  });
}

}  // namespace ag
}  // namespace cpd
