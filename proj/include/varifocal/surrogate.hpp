#pragma once

// Edge-augmented encode-process-decode graph network mapping (mesh, design)
// to the per-node z-displacement field, with training and R-squared
// evaluation. Aggregation is an ordered sum over incident edges, sorted by
// neighbor coordinates, which makes the forward pass exactly equivariant
// under node relabeling.

#include "varifocal/autodiff.hpp"
#include "varifocal/io.hpp"
#include "varifocal/mesh.hpp"
#include "varifocal/pseudofem.hpp"

#include <algorithm>
#include <chrono>
#ifdef __GLIBC__
#include <malloc.h>
#endif
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace vf::sur {

class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---- featurization ----------------------------------------------------------

inline constexpr int kNodeFeatures = 5;  // x, y, boundary flag, stiffness, v1
inline constexpr int kEdgeFeatures = 4;  // dx, dy, length, augmented flag

struct GraphSample {
  ad::Mat node_feat;  // N x kNodeFeatures
  ad::Mat edge_feat;  // 2E x kEdgeFeatures (both directions of every edge)
  std::vector<int> src, dst;               // directed edge endpoints
  std::vector<std::vector<int>> incident;  // per node: directed-edge ids, sorted
                                           // by source-node coordinates
  Eigen::VectorXd target;                  // dz per node (mm); may be empty
};

// Normalized stiffness feature: 0 at the 100 N/m floor, 1 at the 200000 ceiling.
inline double stiffness_feature(double w) {
  return (std::log10(w) - std::log10(fem::kStiffnessLo)) /
         (std::log10(fem::kStiffnessHi) - std::log10(fem::kStiffnessLo));
}

inline GraphSample build_graph_features(const mesh::AugmentedMesh& am,
                                        const fem::DesignVariables& design,
                                        const Eigen::VectorXd* target = nullptr) {
  const mesh::Mesh& m = am.base;
  design.validate(static_cast<long>(m.boundary_node_ids.size()));
  const long n = m.n_nodes();
  // centroid summed in sorted-coordinate order: bitwise invariant under node
  // relabeling, which the equivariance guarantee depends on
  Eigen::Vector2d c;
  for (int axis = 0; axis < 2; ++axis) {
    std::vector<double> vals(static_cast<std::size_t>(n));
    for (long i = 0; i < n; ++i) vals[static_cast<std::size_t>(i)] = m.node_positions(i, axis);
    std::sort(vals.begin(), vals.end());
    double sum = 0;
    for (double v : vals) sum += v;
    c(axis) = sum / static_cast<double>(n);
  }
  double radius = 0;
  for (long i = 0; i < n; ++i)
    radius = std::max(radius, (Eigen::Vector2d(m.node_positions.row(i).head<2>()) - c).norm());
  if (radius <= 0) throw ModelError("build_graph_features: degenerate mesh radius");

  GraphSample s;
  s.node_feat.setZero(n, kNodeFeatures);
  for (long i = 0; i < n; ++i) {
    s.node_feat(i, 0) = (m.node_positions(i, 0) - c.x()) / radius;
    s.node_feat(i, 1) = (m.node_positions(i, 1) - c.y()) / radius;
    s.node_feat(i, 4) = design.v1;
  }
  for (std::size_t b = 0; b < m.boundary_node_ids.size(); ++b) {
    int i = m.boundary_node_ids[b];
    s.node_feat(i, 2) = 1.0;
    s.node_feat(i, 3) = stiffness_feature(design.W(static_cast<long>(b)));
  }

  auto push_edge = [&](int a, int b, double aug) {
    s.src.push_back(a);
    s.dst.push_back(b);
    long e = static_cast<long>(s.src.size()) - 1;
    if (s.edge_feat.rows() <= e) s.edge_feat.conservativeResize(e + 256, kEdgeFeatures);
    Eigen::Vector2d d = (m.node_positions.row(b) - m.node_positions.row(a)).head<2>();
    s.edge_feat(e, 0) = d.x() / radius;
    s.edge_feat(e, 1) = d.y() / radius;
    s.edge_feat(e, 2) = d.norm() / radius;
    s.edge_feat(e, 3) = aug;
  };
  s.edge_feat.resize(0, kEdgeFeatures);
  for (const auto& e : m.edges) {
    push_edge(e.first, e.second, 0.0);
    push_edge(e.second, e.first, 0.0);
  }
  for (const auto& e : am.augmented_edges) {
    push_edge(e.first, e.second, 1.0);
    push_edge(e.second, e.first, 1.0);
  }
  s.edge_feat.conservativeResize(static_cast<long>(s.src.size()), kEdgeFeatures);

  // canonical accumulation order: incident edges sorted by the coordinates of
  // the sending node (label-independent, so relabeling cannot reorder the sum)
  s.incident.assign(static_cast<std::size_t>(n), {});
  for (std::size_t e = 0; e < s.src.size(); ++e)
    s.incident[static_cast<std::size_t>(s.dst[e])].push_back(static_cast<int>(e));
  for (auto& lst : s.incident) {
    std::sort(lst.begin(), lst.end(), [&](int a, int b) {
      const auto pa = m.node_positions.row(s.src[static_cast<std::size_t>(a)]);
      const auto pb = m.node_positions.row(s.src[static_cast<std::size_t>(b)]);
      if (pa(0) != pb(0)) return pa(0) < pb(0);
      if (pa(1) != pb(1)) return pa(1) < pb(1);
      return s.edge_feat(a, 3) < s.edge_feat(b, 3);
    });
  }
  if (target) {
    if (target->size() != n)
      throw ModelError("build_graph_features: target length does not match node count");
    s.target = *target;
  }
  return s;
}

// ---- model ------------------------------------------------------------------

struct SurrogateConfig {
  int message_steps = 6;  // K
  int latent = 32;        // H
  unsigned seed = 0;
};

// Two-layer perceptron block: out = W2 * tanh(W1 * x + b1) + b2, stored as
// four consecutive parameter matrices.
struct SurrogateModel {
  SurrogateConfig cfg;
  std::vector<ad::Mat> params;  // fixed order: node enc, edge enc, K x (edge
                                // mlp, node mlp), decoder
  double target_mean = 0.0;     // training-set standardization of dz
  double target_std = 1.0;

  long n_params() const {
    long n = 0;
    for (const auto& p : params) n += p.size();
    return n;
  }
};

namespace detail {

inline void push_mlp(std::vector<ad::Mat>& out, std::mt19937_64& rng, int in, int hidden,
                     int outdim) {
  std::normal_distribution<double> g;
  auto mat = [&](int r, int c, double scale) {
    ad::Mat m(r, c);
    for (long k = 0; k < m.size(); ++k) m.data()[k] = scale * g(rng);
    return m;
  };
  out.push_back(mat(in, hidden, std::sqrt(1.0 / in)));
  out.push_back(ad::Mat::Zero(1, hidden));
  out.push_back(mat(hidden, outdim, std::sqrt(1.0 / hidden)));
  out.push_back(ad::Mat::Zero(1, outdim));
}

// Apply one MLP block; `at` indexes into the parameter Var list.
inline ad::Var mlp(const std::vector<ad::Var>& p, std::size_t at, const ad::Var& x) {
  ad::Var h = ad::tanh(ad::add_rowwise(ad::matmul(x, p[at]), p[at + 1]));
  return ad::add_rowwise(ad::matmul(h, p[at + 2]), p[at + 3]);
}

}  // namespace detail

inline SurrogateModel make_model(const SurrogateConfig& cfg) {
  if (cfg.message_steps < 1 || cfg.latent < 1)
    throw ModelError("make_model: message_steps and latent width must be positive");
  SurrogateModel m;
  m.cfg = cfg;
  std::mt19937_64 rng(cfg.seed);
  const int H = cfg.latent;
  detail::push_mlp(m.params, rng, kNodeFeatures, H, H);  // node encoder
  detail::push_mlp(m.params, rng, kEdgeFeatures, H, H);  // edge encoder
  for (int k = 0; k < cfg.message_steps; ++k) {
    detail::push_mlp(m.params, rng, 3 * H, H, H);  // edge update
    detail::push_mlp(m.params, rng, 2 * H, H, H);  // node update
  }
  detail::push_mlp(m.params, rng, H, H, 1);  // decoder
  return m;
}

inline std::vector<ad::Var> make_param_vars(ad::Tape& t, const SurrogateModel& m,
                                            bool requires_grad) {
  std::vector<ad::Var> vars;
  vars.reserve(m.params.size());
  for (const auto& p : m.params) vars.push_back(ad::Var::leaf(t, p, requires_grad));
  return vars;
}

// Full differentiable forward pass. `node_feat` is supplied by the caller so
// gradients can flow to design-derived features; returns the standardized-space
// prediction rescaled to mm.
inline ad::Var forward_t(ad::Tape& t, const SurrogateModel& m,
                         const std::vector<ad::Var>& p, const GraphSample& s,
                         const ad::Var& node_feat) {
  if (node_feat.val().cols() != kNodeFeatures)
    throw ModelError("forward: node feature width mismatch");
  if (s.edge_feat.cols() != kEdgeFeatures)
    throw ModelError("forward: edge feature width mismatch");
  const long n_nodes = node_feat.val().rows();
  ad::Var edge_feat = ad::Var::leaf(t, s.edge_feat, false);
  ad::Var h = detail::mlp(p, 0, node_feat);
  ad::Var e = detail::mlp(p, 4, edge_feat);
  // row-slice indices splitting the edge-update first layer [Wsrc; Wdst; We]
  const int H = m.cfg.latent;
  std::vector<int> rs(static_cast<std::size_t>(H)), rd(rs), re(rs);
  for (int i = 0; i < H; ++i) {
    rs[static_cast<std::size_t>(i)] = i;
    rd[static_cast<std::size_t>(i)] = H + i;
    re[static_cast<std::size_t>(i)] = 2 * H + i;
  }
  std::size_t at = 8;
  for (int k = 0; k < m.cfg.message_steps; ++k) {
    // edge update, algebraically identical to mlp(p, at, [h_src, h_dst, e])
    // but multiplying node latents by the weight slices before the gather,
    // which keeps the large GEMMs at node count instead of edge count
    ad::Var pre = ad::gather_rows(ad::matmul(h, ad::gather_rows(p[at], rs)), s.src) +
                  ad::gather_rows(ad::matmul(h, ad::gather_rows(p[at], rd)), s.dst) +
                  ad::matmul(e, ad::gather_rows(p[at], re));
    ad::Var hidden = ad::tanh(ad::add_rowwise(pre, p[at + 1]));
    e = e + ad::add_rowwise(ad::matmul(hidden, p[at + 2]), p[at + 3]);
    at += 4;
    ad::Var agg = ad::scatter_sum_ordered(e, s.incident, n_nodes);
    h = h + detail::mlp(p, at, ad::concat_cols({h, agg}));
    at += 4;
  }
  ad::Var out = detail::mlp(p, at, h);  // N x 1
  return out * m.target_std + m.target_mean;
}

// Value-only forward pass.
inline Eigen::VectorXd forward(const SurrogateModel& m, const GraphSample& s) {
  ad::Tape t;
  std::vector<ad::Var> p = make_param_vars(t, m, false);
  ad::Var nf = ad::Var::leaf(t, s.node_feat, false);
  return forward_t(t, m, p, s, nf).val().col(0);
}

// ---- training ---------------------------------------------------------------

inline double r_squared(const Eigen::VectorXd& pred, const Eigen::VectorXd& truth) {
  if (pred.size() != truth.size())
    throw std::invalid_argument("r_squared: length mismatch");
  double mean = truth.mean();
  double ss_tot = (truth.array() - mean).square().sum();
  if (ss_tot < 1e-300) throw std::invalid_argument("r_squared: zero variance in truth");
  double ss_res = (pred - truth).squaredNorm();
  return 1.0 - ss_res / ss_tot;
}

struct TrainConfig {
  int iterations = 2000;
  int batch_size = 4;
  double lr = 3e-3;
  unsigned split_seed = 0;
  double train_fraction = 0.8;
};

struct TrainReport {
  std::vector<double> loss;  // one entry per iteration
  double train_mse = 0;
  double test_mse = 0;
  double test_r2 = 0;
  double wall_seconds = 0;
  unsigned split_seed = 0;
  std::vector<std::size_t> train_idx, test_idx;
};

namespace detail {

inline Eigen::VectorXd flatten(const std::vector<ad::Mat>& ms) {
  long n = 0;
  for (const auto& m : ms) n += m.size();
  Eigen::VectorXd v(n);
  long at = 0;
  for (const auto& m : ms) {
    std::copy(m.data(), m.data() + m.size(), v.data() + at);
    at += m.size();
  }
  return v;
}

inline void unflatten(const Eigen::VectorXd& v, std::vector<ad::Mat>& ms) {
  long at = 0;
  for (auto& m : ms) {
    std::copy(v.data() + at, v.data() + at + m.size(), m.data());
    at += m.size();
  }
}

}  // namespace detail

// MSE loss of one sample on the current tape, in standardized units.
inline ad::Var sample_loss_t(ad::Tape& t, const SurrogateModel& m,
                             const std::vector<ad::Var>& p, const GraphSample& s) {
  ad::Var nf = ad::Var::leaf(t, s.node_feat, false);
  ad::Var pred = forward_t(t, m, p, s, nf);
  ad::Mat target(s.target.size(), 1);
  target.col(0) = s.target;
  ad::Var tgt = ad::Var::leaf(t, target, false);
  ad::Var diff = (pred - tgt) * (1.0 / m.target_std);
  return ad::mean(diff * diff);
}

inline TrainReport train(SurrogateModel& model, const std::vector<GraphSample>& samples,
                         const TrainConfig& cfg = {}) {
  if (samples.size() < 10) throw ModelError("train: need at least 10 samples");
#ifdef __GLIBC__
  // the training loop allocates and frees multi-megabyte tape buffers at high
  // rate; keep them in the heap instead of round-tripping through mmap
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  for (const auto& s : samples)
    if (s.target.size() == 0) throw ModelError("train: sample without a target field");
  auto t_start = std::chrono::steady_clock::now();

  std::vector<std::size_t> idx(samples.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::mt19937_64 split_rng(cfg.split_seed);
  std::shuffle(idx.begin(), idx.end(), split_rng);
  std::size_t n_train =
      std::max<std::size_t>(1, static_cast<std::size_t>(
                                   std::llround(cfg.train_fraction *
                                                static_cast<double>(samples.size()))));
  n_train = std::min(n_train, samples.size() - 1);
  TrainReport rep;
  rep.split_seed = cfg.split_seed;
  rep.train_idx.assign(idx.begin(), idx.begin() + static_cast<long>(n_train));
  rep.test_idx.assign(idx.begin() + static_cast<long>(n_train), idx.end());

  // standardize the prediction target over the training split
  double mean = 0, sq = 0;
  long cnt = 0;
  for (std::size_t i : rep.train_idx) {
    mean += samples[i].target.sum();
    cnt += samples[i].target.size();
  }
  mean /= static_cast<double>(cnt);
  for (std::size_t i : rep.train_idx) sq += (samples[i].target.array() - mean).square().sum();
  double sd = std::sqrt(sq / static_cast<double>(cnt));
  model.target_mean = mean;
  model.target_std = sd > 1e-30 ? sd : 1.0;

  Eigen::VectorXd theta = detail::flatten(model.params);
  ad::AdamConfig acfg;
  acfg.lr = cfg.lr;
  ad::AdamState astate(theta.size(), acfg);
  std::mt19937_64 batch_rng(cfg.split_seed + 0x9e3779b97f4a7c15ULL);
  std::uniform_int_distribution<std::size_t> pick(0, rep.train_idx.size() - 1);

  rep.loss.reserve(static_cast<std::size_t>(cfg.iterations));
  for (int it = 0; it < cfg.iterations; ++it) {
    detail::unflatten(theta, model.params);
    Eigen::VectorXd grad = Eigen::VectorXd::Zero(theta.size());
    double loss_val = 0;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const GraphSample& s = samples[rep.train_idx[pick(batch_rng)]];
      ad::Tape t;
      std::vector<ad::Var> p = make_param_vars(t, model, true);
      ad::Var loss = sample_loss_t(t, model, p, s);
      t.backward(loss.id());
      loss_val += loss.s();
      std::vector<ad::Mat> gs;
      gs.reserve(p.size());
      for (std::size_t k = 0; k < p.size(); ++k) {
        ad::Mat g = p[k].grad();
        if (g.size() == 0) g = ad::Mat::Zero(model.params[k].rows(), model.params[k].cols());
        gs.push_back(std::move(g));
      }
      grad += detail::flatten(gs);
    }
    loss_val /= cfg.batch_size;
    grad /= static_cast<double>(cfg.batch_size);
    if (!std::isfinite(loss_val))
      throw ModelError("train: non-finite loss at iteration " + std::to_string(it));
    rep.loss.push_back(loss_val);
    ad::adam_step(theta, grad, astate);
  }
  detail::unflatten(theta, model.params);

  auto mse_over = [&](const std::vector<std::size_t>& set) {
    double sse = 0;
    long n = 0;
    for (std::size_t i : set) {
      Eigen::VectorXd pred = forward(model, samples[i]);
      sse += (pred - samples[i].target).squaredNorm();
      n += pred.size();
    }
    return sse / static_cast<double>(n);
  };
  rep.train_mse = mse_over(rep.train_idx);
  rep.test_mse = mse_over(rep.test_idx);
  Eigen::VectorXd all_pred, all_truth;
  for (std::size_t i : rep.test_idx) {
    Eigen::VectorXd pred = forward(model, samples[i]);
    long at = all_pred.size();
    all_pred.conservativeResize(at + pred.size());
    all_truth.conservativeResize(at + pred.size());
    all_pred.tail(pred.size()) = pred;
    all_truth.tail(pred.size()) = samples[i].target;
  }
  rep.test_r2 = r_squared(all_pred, all_truth);
  rep.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return rep;
}

// ---- checkpoint persistence -------------------------------------------------

inline constexpr const char* kModelFormatVersion = "varifocal-model v1";

inline std::string serialize_model(const SurrogateModel& m) {
  std::ostringstream os;
  os << kModelFormatVersion << "\n";
  os << "config " << m.cfg.message_steps << " " << m.cfg.latent << " " << m.cfg.seed << "\n";
  os << "standardize " << io::fmt_g17(m.target_mean) << " " << io::fmt_g17(m.target_std)
     << "\n";
  os << "params " << m.n_params() << "\n";
  for (const auto& p : m.params)
    for (long k = 0; k < p.size(); ++k) os << io::fmt_g17(p.data()[k]) << "\n";
  return os.str();
}

inline SurrogateModel deserialize_model(std::istream& in) {
  std::string line, tok;
  if (!std::getline(in, line) || line != kModelFormatVersion)
    throw ModelError("model file: unsupported format header '" + line + "'");
  SurrogateConfig cfg;
  in >> tok >> cfg.message_steps >> cfg.latent >> cfg.seed;
  if (tok != "config") throw ModelError("model file: expected 'config'");
  SurrogateModel m = make_model(cfg);
  in >> tok >> m.target_mean >> m.target_std;
  if (tok != "standardize") throw ModelError("model file: expected 'standardize'");
  long n;
  in >> tok >> n;
  if (tok != "params") throw ModelError("model file: expected 'params'");
  if (n != m.n_params())
    throw ModelError("model file: parameter count " + std::to_string(n) +
                     " does not match the config");
  for (auto& p : m.params)
    for (long k = 0; k < p.size(); ++k) in >> p.data()[k];
  if (!in) throw ModelError("model file: truncated");
  return m;
}

inline void save_model(const std::string& path, const SurrogateModel& m) {
  io::write_file(path, serialize_model(m));
}

inline SurrogateModel load_model(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ModelError("cannot open model file: " + path);
  return deserialize_model(f);
}

}  // namespace vf::sur
