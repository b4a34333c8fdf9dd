#pragma once

// Reverse-mode automatic differentiation on a tape of matrix-valued nodes,
// plus the Adam update rule. Scalars are 1x1 matrices; broadcasting between
// a scalar node and a matrix node is supported for the elementwise ops.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace vf::ad {

// Row-major so that the per-row gather/scatter ops used by graph message
// passing touch contiguous memory.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class DomainError : public std::runtime_error {
 public:
  DomainError(const std::string& what, int node_id)
      : std::runtime_error(what + " (tape node " + std::to_string(node_id) + ")"),
        node_id_(node_id) {}
  int node_id() const { return node_id_; }

 private:
  int node_id_;
};

class Tape {
 public:
  struct Node {
    Mat value;
    Mat grad;                      // allocated lazily during backward
    std::function<void()> back;    // empty for leaves/constants
    bool requires_grad = false;
  };

  int emplace(Mat value, bool requires_grad) {
    nodes_.push_back(Node{std::move(value), Mat(), {}, requires_grad});
    return static_cast<int>(nodes_.size()) - 1;
  }

  void set_back(int id, std::function<void()> back) {
    nodes_[id].back = std::move(back);
  }

  const Mat& value(int id) const { return nodes_[id].value; }
  const Mat& grad(int id) const { return nodes_[id].grad; }
  bool has_grad(int id) const { return nodes_[id].grad.size() != 0; }

  // Zero-initialized gradient buffer for accumulation in backward closures.
  Mat& grad_buffer(int id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Reverse sweep from a scalar root. Gradients of earlier backward passes
  // are discarded first, so repeated passes over one tape are independent.
  void backward(int root) {
    if (nodes_[root].value.size() != 1)
      throw std::invalid_argument("backward: root must be a scalar node");
    for (Node& n : nodes_) n.grad.resize(0, 0);
    grad_buffer(root)(0, 0) = 1.0;
    for (int i = root; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.back && n.grad.size() != 0) n.back();
    }
  }

 private:
  std::vector<Node> nodes_;
};

class Var {
 public:
  Var() = default;
  Var(Tape& tape, int id) : tape_(&tape), id_(id) {}

  static Var leaf(Tape& tape, Mat value, bool requires_grad = true) {
    return Var(tape, tape.emplace(std::move(value), requires_grad));
  }
  static Var scalar(Tape& tape, double v, bool requires_grad = false) {
    Mat m(1, 1);
    m(0, 0) = v;
    return Var(tape, tape.emplace(std::move(m), requires_grad));
  }

  Tape& tape() const { return *tape_; }
  int id() const { return id_; }
  const Mat& val() const { return tape_->value(id_); }
  const Mat& grad() const { return tape_->grad(id_); }
  double s() const { return tape_->value(id_)(0, 0); }
  bool is_scalar() const { return val().size() == 1; }
  long rows() const { return val().rows(); }
  long cols() const { return val().cols(); }
  bool requires_grad() const { return tape_->requires_grad(id_); }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

namespace detail {

inline void check_same_tape(const Var& a, const Var& b) {
  if (&a.tape() != &b.tape())
    throw std::invalid_argument("autodiff: operands live on different tapes");
}

inline void check_broadcast(const Var& a, const Var& b, const char* op) {
  if (a.is_scalar() || b.is_scalar()) return;
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument(std::string("autodiff: shape mismatch in ") + op);
}

inline Mat broadcast_to(const Mat& m, long r, long c) {
  if (m.size() == 1 && (r != 1 || c != 1)) return Mat::Constant(r, c, m(0, 0));
  return m;
}

// g * v with scalar-aware broadcasting (v may be 1x1).
inline Mat mul_bc(const Mat& g, const Mat& v) {
  if (v.size() == 1) return g * v(0, 0);
  return g.cwiseProduct(v);
}

// g / v with scalar-aware broadcasting (v may be 1x1).
inline Mat div_bc(const Mat& g, const Mat& v) {
  if (v.size() == 1) return g / v(0, 0);
  return g.cwiseQuotient(v);
}

// Accumulate a gradient onto an operand, summing when the operand is a
// scalar that was broadcast.
inline void accumulate(Tape& t, int id, const Mat& g) {
  if (!t.requires_grad(id)) return;
  Mat& buf = t.grad_buffer(id);
  if (buf.size() == 1 && g.size() != 1)
    buf(0, 0) += g.sum();
  else
    buf += g;
}

// Build a node whose backward closure is written against the final node id.
template <typename MakeBack>
Var make_node(Tape& t, Mat value, bool requires_grad, MakeBack&& make_back) {
  int out = t.emplace(std::move(value), requires_grad);
  if (requires_grad) t.set_back(out, make_back(out));
  return Var(t, out);
}

}  // namespace detail

inline bool any_requires(const Var& a) { return a.requires_grad(); }
inline bool any_requires(const Var& a, const Var& b) {
  return a.requires_grad() || b.requires_grad();
}

// ---- elementwise arithmetic -------------------------------------------------

inline Var operator+(const Var& a, const Var& b) {
  detail::check_same_tape(a, b);
  detail::check_broadcast(a, b, "+");
  Tape& t = a.tape();
  Mat v;
  if (a.is_scalar() && !b.is_scalar())
    v = (b.val().array() + a.s()).matrix();
  else if (b.is_scalar() && !a.is_scalar())
    v = (a.val().array() + b.s()).matrix();
  else
    v = a.val() + b.val();
  int ia = a.id(), ib = b.id();
  return detail::make_node(t, std::move(v), any_requires(a, b), [&t, ia, ib](int out) {
    return [&t, out, ia, ib] {
      const Mat& g = t.grad(out);
      detail::accumulate(t, ia, g);
      detail::accumulate(t, ib, g);
    };
  });
}

inline Var operator-(const Var& a, const Var& b) {
  detail::check_same_tape(a, b);
  detail::check_broadcast(a, b, "-");
  Tape& t = a.tape();
  Mat v;
  if (a.is_scalar() && !b.is_scalar())
    v = (a.s() - b.val().array()).matrix();
  else if (b.is_scalar() && !a.is_scalar())
    v = (a.val().array() - b.s()).matrix();
  else
    v = a.val() - b.val();
  int ia = a.id(), ib = b.id();
  return detail::make_node(t, std::move(v), any_requires(a, b), [&t, ia, ib](int out) {
    return [&t, out, ia, ib] {
      const Mat& g = t.grad(out);
      detail::accumulate(t, ia, g);
      detail::accumulate(t, ib, -g);
    };
  });
}

inline Var operator-(const Var& a) {
  Tape& t = a.tape();
  int ia = a.id();
  return detail::make_node(t, -a.val(), a.requires_grad(), [&t, ia](int out) {
    return [&t, out, ia] { detail::accumulate(t, ia, -t.grad(out)); };
  });
}

inline Var operator*(const Var& a, const Var& b) {
  detail::check_same_tape(a, b);
  detail::check_broadcast(a, b, "*");
  Tape& t = a.tape();
  Mat v = a.is_scalar() && !b.is_scalar() ? detail::mul_bc(b.val(), a.val())
                                          : detail::mul_bc(a.val(), b.val());
  int ia = a.id(), ib = b.id();
  return detail::make_node(t, std::move(v), any_requires(a, b), [&t, ia, ib](int out) {
    return [&t, out, ia, ib] {
      const Mat& g = t.grad(out);
      detail::accumulate(t, ia, detail::mul_bc(g, t.value(ib)));
      detail::accumulate(t, ib, detail::mul_bc(g, t.value(ia)));
    };
  });
}

inline Var operator/(const Var& a, const Var& b) {
  detail::check_same_tape(a, b);
  detail::check_broadcast(a, b, "/");
  Tape& t = a.tape();
  if ((b.val().array() == 0.0).any())
    throw DomainError("division by zero", static_cast<int>(t.size()));
  Mat v;
  if (a.is_scalar() && !b.is_scalar())
    v = (a.s() / b.val().array()).matrix();
  else
    v = detail::div_bc(a.val(), b.val());
  int ia = a.id(), ib = b.id();
  return detail::make_node(t, std::move(v), any_requires(a, b), [&t, ia, ib](int out) {
    return [&t, out, ia, ib] {
      const Mat& g = t.grad(out);
      detail::accumulate(t, ia, detail::div_bc(g, t.value(ib)));
      Mat gb = detail::div_bc(detail::div_bc(g, t.value(ib)), t.value(ib));
      detail::accumulate(t, ib, -detail::mul_bc(gb, t.value(ia)));
    };
  });
}

inline Var operator+(const Var& a, double b) { return a + Var::scalar(a.tape(), b); }
inline Var operator+(double a, const Var& b) { return Var::scalar(b.tape(), a) + b; }
inline Var operator-(const Var& a, double b) { return a - Var::scalar(a.tape(), b); }
inline Var operator-(double a, const Var& b) { return Var::scalar(b.tape(), a) - b; }
inline Var operator*(const Var& a, double b) { return a * Var::scalar(a.tape(), b); }
inline Var operator*(double a, const Var& b) { return Var::scalar(b.tape(), a) * b; }
inline Var operator/(const Var& a, double b) { return a / Var::scalar(a.tape(), b); }
inline Var operator/(double a, const Var& b) { return Var::scalar(b.tape(), a) / b; }

// ---- elementwise functions --------------------------------------------------

inline Var sqrt(const Var& a) {
  Tape& t = a.tape();
  if ((a.val().array() < 0.0).any())
    throw DomainError("sqrt of negative value", a.id());
  Mat v = a.val().cwiseSqrt();
  int ia = a.id();
  return detail::make_node(t, std::move(v), a.requires_grad(), [&t, ia](int out) {
    return [&t, out, ia] {
      detail::accumulate(
          t, ia, (t.grad(out).array() / (2.0 * t.value(out).array())).matrix());
    };
  });
}

inline Var exp(const Var& a) {
  Tape& t = a.tape();
  Mat v = a.val().array().exp().matrix();
  int ia = a.id();
  return detail::make_node(t, std::move(v), a.requires_grad(), [&t, ia](int out) {
    return [&t, out, ia] {
      detail::accumulate(t, ia, t.grad(out).cwiseProduct(t.value(out)));
    };
  });
}

inline Var tanh(const Var& a) {
  Tape& t = a.tape();
  // via the vectorized exp: Eigen's double-precision tanh is scalar, and this
  // sits on the training hot path (absolute error ~1e-16, limits exact)
  Mat v = (1.0 - 2.0 / ((2.0 * a.val().array()).exp() + 1.0)).matrix();
  int ia = a.id();
  return detail::make_node(t, std::move(v), a.requires_grad(), [&t, ia](int out) {
    return [&t, out, ia] {
      detail::accumulate(t, ia,
                         (t.grad(out).array() *
                          (1.0 - t.value(out).array().square()))
                             .matrix());
    };
  });
}

// Subgradient 0 at the kink (left branch).
inline Var relu(const Var& a) {
  Tape& t = a.tape();
  Mat v = a.val().cwiseMax(0.0);
  int ia = a.id();
  return detail::make_node(t, std::move(v), a.requires_grad(), [&t, ia](int out) {
    return [&t, out, ia] {
      Mat mask = (t.value(ia).array() > 0.0).cast<double>().matrix();
      detail::accumulate(t, ia, t.grad(out).cwiseProduct(mask));
    };
  });
}

inline Var square(const Var& a) { return a * a; }

inline Var pow(const Var& a, double p) {
  Tape& t = a.tape();
  Mat v = a.val().array().pow(p).matrix();
  int ia = a.id();
  return detail::make_node(t, std::move(v), a.requires_grad(), [&t, ia, p](int out) {
    return [&t, out, ia, p] {
      Mat d = (p * t.value(ia).array().pow(p - 1.0)).matrix();
      detail::accumulate(t, ia, t.grad(out).cwiseProduct(d));
    };
  });
}

// Elementwise max; ties take the first argument (deterministic subgradient).
inline Var cmax(const Var& a, const Var& b) {
  detail::check_same_tape(a, b);
  detail::check_broadcast(a, b, "cmax");
  Tape& t = a.tape();
  long r = std::max(a.rows(), b.rows()), c = std::max(a.cols(), b.cols());
  Mat av = detail::broadcast_to(a.val(), r, c);
  Mat bv = detail::broadcast_to(b.val(), r, c);
  Mat take_a = (av.array() >= bv.array()).cast<double>().matrix();
  Mat v = av.cwiseProduct(take_a) + bv.cwiseProduct((1.0 - take_a.array()).matrix());
  int ia = a.id(), ib = b.id();
  return detail::make_node(t, std::move(v), any_requires(a, b),
                           [&t, ia, ib, take_a](int out) {
    return [&t, out, ia, ib, take_a] {
      const Mat& g = t.grad(out);
      detail::accumulate(t, ia, g.cwiseProduct(take_a));
      detail::accumulate(t, ib, g.cwiseProduct((1.0 - take_a.array()).matrix()));
    };
  });
}

inline Var cmin(const Var& a, const Var& b) { return -cmax(-a, -b); }

// ---- reductions and linear algebra -----------------------------------------

inline Var sum(const Var& a) {
  Tape& t = a.tape();
  Mat v(1, 1);
  v(0, 0) = a.val().sum();
  int ia = a.id();
  long r = a.rows(), c = a.cols();
  return detail::make_node(t, std::move(v), a.requires_grad(), [&t, ia, r, c](int out) {
    return [&t, out, ia, r, c] {
      detail::accumulate(t, ia, Mat::Constant(r, c, t.grad(out)(0, 0)));
    };
  });
}

inline Var mean(const Var& a) { return sum(a) / static_cast<double>(a.val().size()); }

// Flattened inner product of two same-shaped nodes.
inline Var dot(const Var& a, const Var& b) {
  detail::check_same_tape(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument("autodiff: shape mismatch in dot");
  Tape& t = a.tape();
  Mat v(1, 1);
  v(0, 0) = a.val().cwiseProduct(b.val()).sum();
  int ia = a.id(), ib = b.id();
  return detail::make_node(t, std::move(v), any_requires(a, b), [&t, ia, ib](int out) {
    return [&t, out, ia, ib] {
      double g = t.grad(out)(0, 0);
      detail::accumulate(t, ia, g * t.value(ib));
      detail::accumulate(t, ib, g * t.value(ia));
    };
  });
}

inline Var matmul(const Var& a, const Var& b) {
  detail::check_same_tape(a, b);
  if (a.cols() != b.rows())
    throw std::invalid_argument("autodiff: inner dimension mismatch in matmul");
  Tape& t = a.tape();
  Mat v = a.val() * b.val();
  int ia = a.id(), ib = b.id();
  return detail::make_node(t, std::move(v), any_requires(a, b), [&t, ia, ib](int out) {
    return [&t, out, ia, ib] {
      const Mat& g = t.grad(out);
      detail::accumulate(t, ia, g * t.value(ib).transpose());
      detail::accumulate(t, ib, t.value(ia).transpose() * g);
    };
  });
}

// Add a 1xH row vector to every row of an NxH matrix (bias broadcast).
inline Var add_rowwise(const Var& a, const Var& bias) {
  detail::check_same_tape(a, bias);
  if (bias.rows() != 1 || bias.cols() != a.cols())
    throw std::invalid_argument("autodiff: bias shape mismatch in add_rowwise");
  Tape& t = a.tape();
  Mat v = a.val().rowwise() + bias.val().row(0);
  int ia = a.id(), ib = bias.id();
  return detail::make_node(t, std::move(v), any_requires(a, bias),
                           [&t, ia, ib](int out) {
    return [&t, out, ia, ib] {
      const Mat& g = t.grad(out);
      detail::accumulate(t, ia, g);
      detail::accumulate(t, ib, g.colwise().sum());
    };
  });
}

// Select rows by index (duplicates allowed); backward scatter-adds.
inline Var gather_rows(const Var& a, const std::vector<int>& idx) {
  Tape& t = a.tape();
  Mat v(static_cast<long>(idx.size()), a.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) v.row(static_cast<long>(i)) = a.val().row(idx[i]);
  int ia = a.id();
  long rows = a.rows(), cols = a.cols();
  auto idx_p = std::make_shared<const std::vector<int>>(idx);
  return detail::make_node(t, std::move(v), a.requires_grad(),
                           [&t, ia, idx_p, rows, cols](int out) {
    return [&t, out, ia, idx_p, rows, cols] {
      const Mat& g = t.grad(out);
      Mat acc = Mat::Zero(rows, cols);
      for (std::size_t i = 0; i < idx_p->size(); ++i)
        acc.row((*idx_p)[i]) += g.row(static_cast<long>(i));
      detail::accumulate(t, ia, acc);
    };
  });
}

// Sum rows of `src` into `n_rows` buckets. `order[k]` lists, in a fixed
// caller-chosen order, the source rows that feed bucket k; the forward
// accumulation follows that order so results are reproducible under any
// relabeling that preserves it.
inline Var scatter_sum_ordered(const Var& src, const std::vector<std::vector<int>>& order,
                               long n_rows) {
  Tape& t = src.tape();
  Mat v = Mat::Zero(n_rows, src.cols());
  for (long k = 0; k < n_rows; ++k)
    for (int r : order[static_cast<std::size_t>(k)]) v.row(k) += src.val().row(r);
  int is = src.id();
  long src_rows = src.rows(), cols = src.cols();
  auto order_p = std::make_shared<const std::vector<std::vector<int>>>(order);
  return detail::make_node(t, std::move(v), src.requires_grad(),
                           [&t, is, order_p, src_rows, cols](int out) {
    return [&t, out, is, order_p, src_rows, cols] {
      const Mat& g = t.grad(out);
      Mat acc = Mat::Zero(src_rows, cols);
      for (std::size_t k = 0; k < order_p->size(); ++k)
        for (int r : (*order_p)[k]) acc.row(r) += g.row(static_cast<long>(k));
      detail::accumulate(t, is, acc);
    };
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty input");
  Tape& t = parts[0].tape();
  long rows = parts[0].rows(), cols = 0;
  for (const Var& p : parts) {
    if (p.rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
    cols += p.cols();
  }
  Mat v(rows, cols);
  std::vector<int> ids;
  std::vector<long> widths;
  bool req = false;
  long at = 0;
  for (const Var& p : parts) {
    v.middleCols(at, p.cols()) = p.val();
    ids.push_back(p.id());
    widths.push_back(p.cols());
    req = req || p.requires_grad();
    at += p.cols();
  }
  return detail::make_node(t, std::move(v), req, [&t, ids, widths](int out) {
    return [&t, out, ids, widths] {
      const Mat& g = t.grad(out);
      long at = 0;
      for (std::size_t i = 0; i < ids.size(); ++i) {
        detail::accumulate(t, ids[i], g.middleCols(at, widths[i]));
        at += widths[i];
      }
    };
  });
}

// A custom primitive: caller supplies the forward value, the parent nodes,
// and a vector-Jacobian product that maps the output gradient to per-parent
// gradients (returned in parent order, empty Mat meaning "no contribution").
inline Var custom(Tape& t, Mat value, const std::vector<Var>& parents,
                  std::function<std::vector<Mat>(const Mat& gout)> vjp) {
  std::vector<int> ids;
  bool req = false;
  for (const Var& p : parents) {
    ids.push_back(p.id());
    req = req || p.requires_grad();
  }
  auto vjp_p = std::make_shared<const std::function<std::vector<Mat>(const Mat&)>>(
      std::move(vjp));
  return detail::make_node(t, std::move(value), req, [&t, ids, vjp_p](int out) {
    return [&t, out, ids, vjp_p] {
      std::vector<Mat> gs = (*vjp_p)(t.grad(out));
      for (std::size_t i = 0; i < ids.size(); ++i)
        if (gs[i].size() != 0) detail::accumulate(t, ids[i], gs[i]);
    };
  });
}

// ---- Adam -------------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  Eigen::VectorXd m;
  Eigen::VectorXd v;
  long t = 0;
  AdamConfig cfg;

  explicit AdamState(long n, AdamConfig c = {})
      : m(Eigen::VectorXd::Zero(n)), v(Eigen::VectorXd::Zero(n)), cfg(c) {}
};

// Standard bias-corrected Adam update, in place.
inline void adam_step(Eigen::VectorXd& params, const Eigen::VectorXd& grads,
                      AdamState& st) {
  if (params.size() != grads.size() || params.size() != st.m.size())
    throw std::invalid_argument("adam_step: shape mismatch");
  for (long i = 0; i < grads.size(); ++i)
    if (!std::isfinite(grads[i]))
      throw std::runtime_error("adam_step: non-finite gradient at index " +
                               std::to_string(i));
  st.t += 1;
  st.m = st.cfg.beta1 * st.m + (1.0 - st.cfg.beta1) * grads;
  st.v = st.cfg.beta2 * st.v.array().matrix() +
         (1.0 - st.cfg.beta2) * grads.array().square().matrix();
  double bc1 = 1.0 - std::pow(st.cfg.beta1, static_cast<double>(st.t));
  double bc2 = 1.0 - std::pow(st.cfg.beta2, static_cast<double>(st.t));
  Eigen::ArrayXd mhat = st.m.array() / bc1;
  Eigen::ArrayXd vhat = st.v.array() / bc2;
  params.array() -= st.cfg.lr * mhat / (vhat.sqrt() + st.cfg.eps);
}

}  // namespace vf::ad
