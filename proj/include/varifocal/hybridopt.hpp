#pragma once

// Hybrid evolutionary + gradient design optimizer: coarse voltage sweep,
// Bezier-hypothesis design of experiments, neighborhood sampling, Adam descent
// over log-stiffness through the surrogate + differentiable fit + ray tracer
// chain, an iterate-with-fresh-data loop, a final linear voltage fine-tune,
// and PCA projection for reporting.

#include "varifocal/optics.hpp"
#include "varifocal/pseudofem.hpp"
#include "varifocal/raytrace.hpp"
#include "varifocal/surrogate.hpp"

#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace vf::hyb {

class OptError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Objectives {
  double target_focal_mm = 590.0;
  double rms_tolerance_nm = 500.0;
};

struct TraceSettings {
  int n_rays = 80;             // grid source over the ROI disc
  double aperture_frac = 0.9;  // source aperture as a fraction of roi_radius
  double source_z = 50.0;      // mm above the undeformed surface
  double focus_lo = -4000.0;   // virtual-image-side search bracket (mm)
  double focus_hi = -50.0;
};

// ---- simulation-backed evaluation ------------------------------------------

struct SimEval {
  double surface_rms_nm = 0;  // deviation from the best-fit sphere
  double focal_mm = 0;        // |best-focus plane| of the traced surface
  double spot_rms_nm = 0;     // spot size at that plane
  optics::ZernikeSurface surface;  // fitted about the load center
};

// Evaluate a displacement field that has already been simulated.
inline SimEval evaluate_deformation(const fem::PseudoFem& f, const Eigen::VectorXd& dz,
                                    const TraceSettings& ts = {}) {
  optics::PointSet pts = f.roi_points(dz);
  optics::SphereFit sf = optics::fit_sphere(pts);
  SimEval ev;
  ev.surface_rms_nm = sf.rms_nm;
  const Eigen::Vector2d c = f.calibration().load_center;
  optics::PointSet local = pts;
  local.col(0).array() -= c.x();
  local.col(1).array() -= c.y();
  ev.surface = optics::fit_zernike(local, f.calibration().roi_radius);
  rt::RayBundle src = rt::make_source(ts.aperture_frac * f.calibration().roi_radius,
                                      ts.n_rays, rt::SourcePattern::grid, ts.source_z);
  rt::ReflectedBundle rb = rt::reflect_bundle(ev.surface, src);
  rt::FocusResult fr = rt::find_best_focus(rb, ts.focus_lo, ts.focus_hi);
  ev.focal_mm = std::abs(fr.plane_z);
  ev.spot_rms_nm = fr.spot_rms_nm;
  return ev;
}

inline SimEval evaluate_design(const fem::PseudoFem& f, const fem::DesignVariables& d,
                               const TraceSettings& ts = {}) {
  return evaluate_deformation(f, f.simulate(d), ts);
}

// ---- pipeline step 1: coarse voltage sweep ---------------------------------

// Returns the sweep voltage whose traced focal length is closest to the
// target; ties break to the smaller voltage.
inline double coarse_voltage_sweep(const fem::PseudoFem& f, const Eigen::VectorXd& W0,
                                   const std::vector<double>& sweep, double target_focal_mm,
                                   const TraceSettings& ts = {}) {
  if (sweep.empty()) throw OptError("coarse_voltage_sweep: empty sweep");
  std::vector<double> vs = sweep;
  std::sort(vs.begin(), vs.end());
  double best_v = 0, best_err = std::numeric_limits<double>::infinity();
  std::string last_err = "no voltage evaluated";
  for (double v : vs) {
    fem::DesignVariables d;
    d.v1 = v;
    d.W = W0;
    try {
      SimEval ev = evaluate_design(f, d, ts);
      double err = std::abs(ev.focal_mm - target_focal_mm);
      if (err < best_err) {
        best_err = err;
        best_v = v;
      }
    } catch (const std::exception& e) {
      last_err = e.what();
    }
  }
  if (!std::isfinite(best_err))
    throw OptError("coarse_voltage_sweep: every voltage failed (" + last_err + ")");
  return best_v;
}

// ---- pipeline step 2: Bezier-hypothesis DOE --------------------------------

struct BezierHypothesis {
  double a = 0.5;  // control point, fixed endpoints (0,0) and (1,1)
  double b = 0.5;
};

// Normalized distance of each boundary node from the center: 0 at the closest
// node, 1 at the farthest.
inline Eigen::VectorXd normalized_boundary_distances(const mesh::Mesh& m,
                                                     const Eigen::Vector2d& center) {
  const long n = static_cast<long>(m.boundary_node_ids.size());
  Eigen::VectorXd d(n);
  for (long i = 0; i < n; ++i)
    d(i) = (Eigen::Vector2d(
                m.node_positions.row(m.boundary_node_ids[static_cast<std::size_t>(i)])
                    .head<2>()) -
            center)
               .norm();
  double lo = d.minCoeff(), hi = d.maxCoeff();
  if (hi - lo < 1e-12) return Eigen::VectorXd::Zero(n);
  return (d.array() - lo) / (hi - lo);
}

// Map normalized distances to stiffness through the quadratic Bezier curve
// y(x) with control point (a, b); the stiffness scale is log-linear over
// [100, 200000] N/m, with the endpoints mapped exactly.
inline Eigen::VectorXd bezier_stiffness(const BezierHypothesis& hyp,
                                        const Eigen::VectorXd& dnorm) {
  if (!(hyp.a >= 0 && hyp.a <= 1 && hyp.b >= 0 && hyp.b <= 1))
    throw OptError("bezier_stiffness: control point outside the unit box");
  const double la = std::log10(fem::kStiffnessLo), lb = std::log10(fem::kStiffnessHi);
  Eigen::VectorXd W(dnorm.size());
  for (long i = 0; i < dnorm.size(); ++i) {
    double d = dnorm(i);
    if (!(d >= 0.0 && d <= 1.0))
      throw OptError("bezier_stiffness: normalized distance outside [0, 1]");
    if (d == 0.0) {
      W(i) = fem::kStiffnessLo;
      continue;
    }
    if (d == 1.0) {
      W(i) = fem::kStiffnessHi;
      continue;
    }
    // invert x(s) = 2 a s (1-s) + s^2 = d by bisection (monotone for a in [0,1])
    double lo = 0.0, hi = 1.0;
    for (int it = 0; it < 60; ++it) {
      double s = 0.5 * (lo + hi);
      double x = 2.0 * hyp.a * s * (1.0 - s) + s * s;
      (x < d ? lo : hi) = s;
    }
    double s = 0.5 * (lo + hi);
    double y = 2.0 * hyp.b * s * (1.0 - s) + s * s;
    W(i) = std::pow(10.0, la + y * (lb - la));
  }
  return W;
}

struct DoeEntry {
  double a, b;
  double rms_nm;
};

struct DoeResult {
  std::vector<DoeEntry> table;  // coarse grid first, then the refined grid
  BezierHypothesis best;
  Eigen::VectorXd W_best;
  double best_rms_nm = 0;
};

// Surface-RMS landscape over the Bezier control lattice: a coarse pass over
// [0,1]^2, then a refined pass around the coarse minimum.
inline DoeResult doe_bezier(const fem::PseudoFem& f, double v_bar,
                            double coarse_step = 0.1, double refine_step = 0.02,
                            const TraceSettings& ts = {}) {
  if (coarse_step <= 0 || refine_step <= 0) throw OptError("doe_bezier: step must be positive");
  Eigen::VectorXd dn = normalized_boundary_distances(
      f.mesh(), f.calibration().load_center);
  DoeResult out;
  out.best_rms_nm = std::numeric_limits<double>::infinity();
  auto eval_grid = [&](double a0, double a1, double b0, double b1, double step) {
    for (double a = a0; a <= a1 + 1e-12; a += step) {
      for (double b = b0; b <= b1 + 1e-12; b += step) {
        BezierHypothesis h{std::min(a, 1.0), std::min(b, 1.0)};
        fem::DesignVariables d;
        d.v1 = v_bar;
        d.W = bezier_stiffness(h, dn);
        double rms;
        try {
          rms = optics::fit_sphere(f.roi_points(f.simulate(d))).rms_nm;
        } catch (const std::exception&) {
          continue;
        }
        out.table.push_back({h.a, h.b, rms});
        if (rms < out.best_rms_nm) {
          out.best_rms_nm = rms;
          out.best = h;
        }
      }
    }
  };
  eval_grid(0.0, 1.0, 0.0, 1.0, coarse_step);
  if (!std::isfinite(out.best_rms_nm))
    throw OptError("doe_bezier: every lattice point failed to simulate");
  eval_grid(std::max(0.0, out.best.a - coarse_step), std::min(1.0, out.best.a + coarse_step),
            std::max(0.0, out.best.b - coarse_step), std::min(1.0, out.best.b + coarse_step),
            refine_step);
  out.W_best = bezier_stiffness(out.best, dn);
  (void)ts;
  return out;
}

// ---- pipeline step 3: neighborhood sampling --------------------------------

// k designs, each element multiplied by an independent uniform draw from
// [0.8, 1.2] and clipped to the stiffness bounds.
inline std::vector<Eigen::VectorXd> sample_neighbors(const Eigen::VectorXd& W_center,
                                                     int k, unsigned seed) {
  if (k < 1) throw OptError("sample_neighbors: k must be at least 1");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.8, 1.2);
  std::vector<Eigen::VectorXd> out;
  out.reserve(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) {
    Eigen::VectorXd W(W_center.size());
    for (long j = 0; j < W.size(); ++j)
      W(j) = std::clamp(W_center(j) * u(rng), fem::kStiffnessLo, fem::kStiffnessHi);
    out.push_back(std::move(W));
  }
  return out;
}

// ---- pipeline step 4: gradient descent on the surrogate --------------------

// What the descent minimizes.
//  - trace: spot RMS of the predicted surface traced through the 6-term
//    Zernike fit; exercises the full differentiable-optics chain, but is
//    blind to surface error the 6 terms cannot represent.
//  - surface: pointwise RMS of the predicted ROI deflection about its
//    best-fit quadric (the projection residual), which sees *all* shape
//    error and matches the pipeline's acceptance metric.
enum class GdObjective { trace, surface };

struct GdConfig {
  int epochs = 500;
  double lr = 0.02;        // Adam step in log10-stiffness space
  int refocus_every = 25;  // refresh the best-focus plane this often (trace)
  // >1: keep every weight within this factor of its start value, so the
  // proposal stays where the surrogate has training data; <=1 disables
  double trust_factor = 0;
  GdObjective objective = GdObjective::trace;
  TraceSettings trace;
};

struct GdReport {
  std::vector<double> loss_nm;  // objective value in nm per descent epoch
  Eigen::VectorXd W_opt;
};

// Residual projector about the best-fit quadric a + b x + c y + d (x^2 + y^2)
// over the oracle's ROI nodes: P = I - Q Q^T with Q from a thin QR. The RMS of
// P z is the pointwise deviation of z from its own best-fit quadric, which for
// the shallow bowls here matches the best-fit-sphere RMS.
inline Eigen::MatrixXd quadric_projector(const fem::PseudoFem& geom) {
  const std::vector<int>& roi = geom.roi_nodes();
  const long nr = static_cast<long>(roi.size());
  Eigen::MatrixXd X(nr, 4);
  for (long k = 0; k < nr; ++k) {
    double x = geom.mesh().node_positions(roi[static_cast<std::size_t>(k)], 0);
    double y = geom.mesh().node_positions(roi[static_cast<std::size_t>(k)], 1);
    X(k, 0) = 1;
    X(k, 1) = x;
    X(k, 2) = y;
    X(k, 3) = x * x + y * y;
  }
  Eigen::MatrixXd Q =
      Eigen::HouseholderQR<Eigen::MatrixXd>(X).householderQ() * Eigen::MatrixXd::Identity(nr, 4);
  return Eigen::MatrixXd::Identity(nr, nr) - Q * Q.transpose();
}

// Minimize the traced spot RMS of the surrogate-predicted surface over
// boundary stiffness, optimized in log10 space with Adam, clipped to bounds.
// Uses the oracle object only for its geometry; no simulation calls.
// If ref_dz (the simulated deflection at W_init) is given, predictions are
// shifted so the model is exact at the start design; the surrogate then only
// supplies the local change, which removes its absolute bias from the loss.
inline GdReport optimize_design(const sur::SurrogateModel& model,
                                const mesh::AugmentedMesh& am, const fem::PseudoFem& geom,
                                double v_bar, const Eigen::VectorXd& W_init,
                                const GdConfig& cfg = {},
                                const Eigen::VectorXd* ref_dz = nullptr) {
  const long nb = static_cast<long>(am.base.boundary_node_ids.size());
  if (W_init.size() != nb) throw OptError("optimize_design: stiffness length mismatch");
  const double la = std::log10(fem::kStiffnessLo), lb = std::log10(fem::kStiffnessHi);
  Eigen::VectorXd theta(nb);
  for (long j = 0; j < nb; ++j)
    theta(j) = std::clamp(std::log10(W_init(j)), la, lb);
  Eigen::VectorXd th_lo = Eigen::VectorXd::Constant(nb, la);
  Eigen::VectorXd th_hi = Eigen::VectorXd::Constant(nb, lb);
  if (cfg.trust_factor > 1.0) {
    const double r = std::log10(cfg.trust_factor);
    th_lo = (theta.array() - r).max(la).matrix();
    th_hi = (theta.array() + r).min(lb).matrix();
  }

  const std::vector<int>& roi = geom.roi_nodes();
  const double roi_radius = geom.calibration().roi_radius;
  const Eigen::Vector2d c = geom.calibration().load_center;
  Eigen::VectorXd xs(static_cast<long>(roi.size())), ys(xs.size());
  for (std::size_t k = 0; k < roi.size(); ++k) {
    xs(static_cast<long>(k)) = am.base.node_positions(roi[k], 0);
    ys(static_cast<long>(k)) = am.base.node_positions(roi[k], 1);
  }
  rt::RayBundle src = rt::make_source(cfg.trace.aperture_frac * roi_radius,
                                      cfg.trace.n_rays, rt::SourcePattern::grid,
                                      cfg.trace.source_z);

  ad::Mat proj;
  if (cfg.objective == GdObjective::surface) proj = quadric_projector(geom);

  // pow/log10 round-tripping can land a hair outside the legal range
  auto to_w = [&](const Eigen::VectorXd& th) {
    return th.unaryExpr([](double v) { return std::pow(10.0, v); })
        .cwiseMax(fem::kStiffnessLo)
        .cwiseMin(fem::kStiffnessHi)
        .eval();
  };

  Eigen::VectorXd corr;  // simulated-minus-predicted deflection at W_init, roi order
  if (ref_dz) {
    fem::DesignVariables d0;
    d0.v1 = v_bar;
    d0.W = to_w(theta);
    sur::GraphSample s0 = sur::build_graph_features(am, d0);
    ad::Tape t0;
    std::vector<ad::Var> p0 = sur::make_param_vars(t0, model, false);
    ad::Var nf0 = ad::Var::leaf(t0, s0.node_feat, false);
    ad::Var pred0 = sur::forward_t(t0, model, p0, s0, nf0);
    corr.resize(static_cast<long>(roi.size()));
    for (std::size_t k = 0; k < roi.size(); ++k)
      corr(static_cast<long>(k)) = (*ref_dz)(roi[k]) - pred0.val()(roi[k], 0);
  }

  ad::AdamConfig acfg;
  acfg.lr = cfg.lr;
  ad::AdamState astate(nb, acfg);
  GdReport rep;
  double plane_z = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    fem::DesignVariables d;
    d.v1 = v_bar;
    d.W = to_w(theta);
    sur::GraphSample s = sur::build_graph_features(am, d);

    ad::Tape t;
    std::vector<ad::Var> p = sur::make_param_vars(t, model, false);
    ad::Var nf = ad::Var::leaf(t, s.node_feat, true);
    ad::Var pred = sur::forward_t(t, model, p, s, nf);
    ad::Var zroi = ad::gather_rows(pred, roi);
    if (ref_dz) zroi = zroi + ad::Var::leaf(t, corr, false);

    ad::Var loss = [&] {
      if (cfg.objective == GdObjective::surface) {
        ad::Var resid = ad::matmul(ad::Var::leaf(t, proj, false), zroi);
        return ad::sqrt(ad::mean(ad::square(resid))) * optics::kMmToNm;
      }
      ad::Var x0 = ad::Var::scalar(t, c.x(), false);
      ad::Var y0 = ad::Var::scalar(t, c.y(), false);
      std::array<ad::Var, 6> coeff = optics::fit_zernike_t(t, xs, ys, x0, y0, zroi, roi_radius);
      if (epoch % cfg.refocus_every == 0) {
        optics::ZernikeSurface surf;
        surf.roi_radius = roi_radius;
        for (int j = 0; j < 6; ++j)
          surf.c[static_cast<std::size_t>(j)] = coeff[static_cast<std::size_t>(j)].s();
        rt::ReflectedBundle rb = rt::reflect_bundle(surf, src);
        plane_z = rt::find_best_focus(rb, cfg.trace.focus_lo, cfg.trace.focus_hi).plane_z;
      }
      return rt::trace_loss_t(t, coeff, roi_radius, src, plane_z).loss_nm;
    }();
    if (!std::isfinite(loss.s()))
      throw OptError("optimize_design: non-finite loss at epoch " + std::to_string(epoch));
    rep.loss_nm.push_back(loss.s());
    t.backward(loss.id());

    ad::Mat g = nf.grad();
    Eigen::VectorXd grad = Eigen::VectorXd::Zero(nb);
    if (g.size() != 0) {
      for (long j = 0; j < nb; ++j)
        grad(j) = g(am.base.boundary_node_ids[static_cast<std::size_t>(j)], 3) / (lb - la);
    }
    ad::adam_step(theta, grad, astate);
    theta = theta.cwiseMax(th_lo).cwiseMin(th_hi);
  }
  rep.W_opt = to_w(theta);
  return rep;
}

// Local linear response identified from single-spring probe designs: column j
// holds the change of the ROI deflection per decade of stiffness j around the
// center design. Because the oracle is one linear solve, a single probe per
// spring pins its influence field exactly (up to the probe's step size).
struct ProbeModel {
  Eigen::VectorXd theta0;  // log10 of the center stiffness
  Eigen::VectorXd r0;      // center ROI deflection (roi order)
  Eigen::MatrixXd G;       // n_roi x n_boundary sensitivities per decade
};

// Box-constrained least squares on the probe model under the quadric-residual
// objective: minimize ||P (r0 + G a)|| over per-spring log10 steps a with
// |a_j| <= log10(trust) and the result inside the stiffness bounds. Solved by
// projected gradient with a fixed step; deterministic.
inline Eigen::VectorXd propose_from_probes(const ProbeModel& pm, const Eigen::MatrixXd& proj,
                                           double trust, int iters = 20000) {
  const long nb = pm.theta0.size();
  const double la = std::log10(fem::kStiffnessLo), lb = std::log10(fem::kStiffnessHi);
  const double cap = std::log10(std::max(trust, 1.0 + 1e-12));
  Eigen::MatrixXd A = proj * pm.G;
  Eigen::VectorXd b = -proj * pm.r0;
  Eigen::MatrixXd AtA = A.transpose() * A;
  Eigen::VectorXd Atb = A.transpose() * b;
  Eigen::VectorXd a = Eigen::VectorXd::Zero(nb);
  double step = 1.0 / AtA.norm();
  for (int it = 0; it < iters; ++it) {
    a += step * (Atb - AtA * a);
    for (long j = 0; j < nb; ++j)
      a(j) = std::clamp(a(j), std::max(-cap, la - pm.theta0(j)),
                        std::min(cap, lb - pm.theta0(j)));
  }
  Eigen::VectorXd W(nb);
  for (long j = 0; j < nb; ++j) W(j) = std::pow(10.0, pm.theta0(j) + a(j));
  return W;
}

// ---- pipeline step 5: the hybrid loop --------------------------------------

// How each epoch spends its simulation batch.
//  - random_neighbors: multiplicative perturbations of every spring at once
//    (blind mutation; cheap signal per call).
//  - coordinate_probes: one design per spring with only that spring changed,
//    which identifies the local response exactly and makes the descent step
//    far better informed for the same call budget.
enum class Exploration { random_neighbors, coordinate_probes };

struct LoopConfig {
  int max_epochs = 5;
  int first_epoch = 0;  // resume support: epoch numbering (and seeds) are absolute
  int neighbors_per_epoch = 50;
  Exploration exploration = Exploration::random_neighbors;
  double probe_bump = 4.0;   // single-spring multiplier for probe designs
  double probe_trust = 4.0;  // per-epoch box for the probe-model descent
  bool retrain_from_scratch = true;  // false: keep fine-tuning the same model
  unsigned seed = 0;
  sur::SurrogateConfig model_cfg{6, 32, 0};
  sur::TrainConfig train_cfg;  // applied with a fresh seed each epoch
  // In-loop descent defaults differ from standalone optimize_design: a trust
  // region (the surrogate is trained on residuals around the incumbent, so
  // far-field extrapolation is meaningless) and the surface objective (the
  // acceptance metric is sphere-fit RMS, much of which the 6-term Zernike
  // bottleneck of the trace objective cannot see).
  GdConfig gd = [] {
    GdConfig g;
    g.trust_factor = 2.0;
    g.objective = GdObjective::surface;
    return g;
  }();
  TraceSettings trace;
};

struct EpochRecord {
  int epoch = 0;
  Eigen::VectorXd center_W;
  std::vector<double> neighbor_rms_nm;
  double best_rms_nm = 0;           // best simulated RMS after this epoch
  double train_r2 = 0;              // surrogate quality on its held-out split
  Eigen::VectorXd proposed_W;       // gradient-descent proposal
  double proposed_rms_nm = std::numeric_limits<double>::quiet_NaN();
};

struct LoopResult {
  Eigen::VectorXd W_star;
  double best_rms_nm = 0;
  double focal_mm = 0;
  bool converged = false;
  std::vector<EpochRecord> history;
  long oracle_calls = 0;  // simulations spent inside the loop
  sur::SurrogateModel last_model;
  // everything simulated so far (seed data first, then per-epoch batches, in
  // insertion order); feed back as seed_data to resume a run
  std::vector<std::pair<fem::DesignVariables, Eigen::VectorXd>> data;
};

// Alternates neighborhood simulation, surrogate retraining on all accumulated
// data, and gradient descent, until a simulated design meets the RMS
// tolerance or the epoch budget runs out.
inline LoopResult hybrid_loop(
    const fem::PseudoFem& f, const mesh::AugmentedMesh& am, double v_bar,
    const Eigen::VectorXd& W_start,
    const std::vector<std::pair<fem::DesignVariables, Eigen::VectorXd>>& seed_data,
    const Objectives& obj = {}, const LoopConfig& cfg = {}) {
  const long nb = static_cast<long>(am.base.boundary_node_ids.size());
  if (W_start.size() != nb) throw OptError("hybrid_loop: stiffness length mismatch");
  long calls_before = f.oracle_calls();

  LoopResult res;
  res.best_rms_nm = std::numeric_limits<double>::infinity();
  Eigen::VectorXd best_dz;
  auto note_design = [&](const fem::DesignVariables& d, const Eigen::VectorXd& dz) {
    res.data.emplace_back(d, dz);
    double rms = optics::fit_sphere(f.roi_points(dz)).rms_nm;
    if (rms < res.best_rms_nm) {
      res.best_rms_nm = rms;
      res.W_star = d.W;
      best_dz = dz;
    }
    return rms;
  };
  for (const auto& [d, dz] : seed_data) note_design(d, dz);
  if (!res.W_star.size()) {
    // no seed data: spend one simulation on the start design
    fem::DesignVariables d;
    d.v1 = v_bar;
    d.W = W_start;
    note_design(d, f.simulate(d));
  }

  // seed batch may already satisfy the gate (e.g. infinite tolerance)
  if (res.best_rms_nm < obj.rms_tolerance_nm) res.converged = true;

  sur::SurrogateModel model;
  bool have_model = false;
  Eigen::MatrixXd proj;
  if (cfg.exploration == Exploration::coordinate_probes) proj = quadric_projector(f);
  for (int epoch = cfg.first_epoch; epoch < cfg.max_epochs && !res.converged; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    rec.center_W = res.W_star;
    // the epoch is anchored at its starting incumbent: neighbors are sampled
    // around it, residual targets are taken against it, and descent starts
    // from it — even if a lucky neighbor overtakes the best mid-epoch
    const Eigen::VectorXd center_W = res.W_star;
    const Eigen::VectorXd center_dz = best_dz;
    std::vector<Eigen::VectorXd> batch;
    std::vector<double> probe_steps;  // log10 step of the probed spring
    if (cfg.exploration == Exploration::coordinate_probes) {
      for (long j = 0; j < nb; ++j) {
        Eigen::VectorXd W = center_W;
        W(j) = std::clamp(W(j) * cfg.probe_bump, fem::kStiffnessLo, fem::kStiffnessHi);
        if (W(j) == center_W(j)) W(j) = center_W(j) / cfg.probe_bump;  // pinned at the top
        probe_steps.push_back(std::log10(W(j) / center_W(j)));
        batch.push_back(std::move(W));
      }
    } else {
      batch = sample_neighbors(center_W, cfg.neighbors_per_epoch,
                               cfg.seed + 1000u * static_cast<unsigned>(epoch + 1));
    }
    std::vector<Eigen::VectorXd> batch_dz;  // kept only for the probe model
    for (const Eigen::VectorXd& W : batch) {
      fem::DesignVariables d;
      d.v1 = v_bar;
      d.W = W;
      Eigen::VectorXd dz = f.simulate(d);
      rec.neighbor_rms_nm.push_back(note_design(d, dz));
      if (cfg.exploration == Exploration::coordinate_probes)
        batch_dz.push_back(std::move(dz));
      if (res.best_rms_nm < obj.rms_tolerance_nm) {
        res.converged = true;
        break;
      }
    }
    if (!res.converged) {
      // retrain from scratch on everything collected so far (default), or
      // keep fine-tuning the carried-over model
      if (cfg.retrain_from_scratch || !have_model) {
        sur::SurrogateConfig mc = cfg.model_cfg;
        mc.seed = cfg.model_cfg.seed + static_cast<unsigned>(epoch);
        model = sur::make_model(mc);
        have_model = true;
      }
      sur::TrainConfig tc = cfg.train_cfg;
      tc.split_seed = cfg.seed + static_cast<unsigned>(epoch);
      // train on residual deflections relative to the epoch center: the
      // absolute field is dominated by the bulk bowl shape, and a model of
      // the *change* is what the descent direction actually needs
      std::vector<sur::GraphSample> tdata;
      tdata.reserve(res.data.size());
      for (const auto& [dd, dzz] : res.data) {
        Eigen::VectorXd resid = dzz - center_dz;
        tdata.push_back(sur::build_graph_features(am, dd, &resid));
      }
      sur::TrainReport tr = sur::train(model, tdata, tc);
      rec.train_r2 = tr.test_r2;

      // ref_dz anchors the prediction at the center, so the surrogate is
      // composed as center_dz + (residual prediction drift)
      GdReport gd = optimize_design(model, am, f, v_bar, center_W, cfg.gd, &center_dz);
      rec.proposed_W = gd.W_opt;
      fem::DesignVariables d;
      d.v1 = v_bar;
      d.W = gd.W_opt;
      rec.proposed_rms_nm = note_design(d, f.simulate(d));
      if (res.best_rms_nm < obj.rms_tolerance_nm) res.converged = true;
    }
    rec.best_rms_nm = res.best_rms_nm;
    res.history.push_back(std::move(rec));
  }
  res.oracle_calls = f.oracle_calls() - calls_before;
  res.focal_mm = evaluate_deformation(f, best_dz, cfg.trace).focal_mm;
  res.last_model = model;
  return res;
}

// ---- pipeline step 6: linear voltage fine-tune -----------------------------

// Pure arithmetic shared with the closed-loop version: solve the fitted line
// focal(v) = slope * v + intercept for the target.
inline double v_star_from_fit(double slope, double intercept, double target_focal_mm) {
  if (std::abs(slope) < 1e-9)
    throw OptError("v_star_from_fit: focal length is insensitive to the voltage");
  return (target_focal_mm - intercept) / slope;
}

struct FineTuneResult {
  double v_star = 0;
  double slope = 0, intercept = 0;
  std::vector<std::pair<double, double>> probes;  // (v, focal)
  double focal_at_vstar_mm = 0;
  double rms_at_vstar_nm = 0;
};

// Probe voltages within +-5% of v_bar, fit focal(v) by least squares, solve
// for the target, and verify the solution in simulation.
inline FineTuneResult fine_tune_voltage(const fem::PseudoFem& f,
                                        const Eigen::VectorXd& W_star, double v_bar,
                                        double target_focal_mm, int n_probes = 5,
                                        const TraceSettings& ts = {}) {
  if (n_probes < 2) throw OptError("fine_tune_voltage: need at least 2 probes");
  FineTuneResult out;
  for (int i = 0; i < n_probes; ++i) {
    double v = v_bar * (0.95 + 0.10 * static_cast<double>(i) / (n_probes - 1));
    fem::DesignVariables d;
    d.v1 = v;
    d.W = W_star;
    out.probes.emplace_back(v, evaluate_design(f, d, ts).focal_mm);
  }
  const long n = static_cast<long>(out.probes.size());
  Eigen::MatrixXd A(n, 2);
  Eigen::VectorXd y(n);
  for (long i = 0; i < n; ++i) {
    A(i, 0) = out.probes[static_cast<std::size_t>(i)].first;
    A(i, 1) = 1.0;
    y(i) = out.probes[static_cast<std::size_t>(i)].second;
  }
  Eigen::Vector2d fit = A.colPivHouseholderQr().solve(y);
  out.slope = fit(0);
  out.intercept = fit(1);
  out.v_star = v_star_from_fit(out.slope, out.intercept, target_focal_mm);
  if (!(out.v_star > 0.0 && out.v_star <= 1.0))
    throw OptError("fine_tune_voltage: solved voltage " + std::to_string(out.v_star) +
                   " is outside (0, 1]");
  fem::DesignVariables d;
  d.v1 = out.v_star;
  d.W = W_star;
  SimEval ev = evaluate_design(f, d, ts);
  out.focal_at_vstar_mm = ev.focal_mm;
  out.rms_at_vstar_nm = ev.surface_rms_nm;
  return out;
}

// ---- PCA reporting ----------------------------------------------------------

struct PcaResult {
  Eigen::MatrixXd coords;      // n_designs x 2
  Eigen::Vector2d explained;   // fraction of total variance per component
  Eigen::MatrixXd components;  // 2 x dim, sign: first nonzero loading positive
};

// Project log-normalized stiffness vectors onto the top two principal axes.
inline PcaResult pca_project(const std::vector<Eigen::VectorXd>& designs) {
  if (designs.size() < 3) throw OptError("pca_project: need at least 3 designs");
  const long dim = designs[0].size();
  const long n = static_cast<long>(designs.size());
  const double la = std::log10(fem::kStiffnessLo), lb = std::log10(fem::kStiffnessHi);
  Eigen::MatrixXd X(n, dim);
  for (long i = 0; i < n; ++i) {
    if (designs[static_cast<std::size_t>(i)].size() != dim)
      throw OptError("pca_project: inconsistent design lengths");
    X.row(i) =
        ((designs[static_cast<std::size_t>(i)].array().log10() - la) / (lb - la)).matrix();
  }
  Eigen::RowVectorXd mean = X.colwise().mean();
  X.rowwise() -= mean;
  Eigen::MatrixXd cov = X.transpose() * X / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) throw OptError("pca_project: eigen-decomposition failed");
  Eigen::VectorXd evals = eig.eigenvalues();  // ascending
  double total = std::max(evals.sum(), 0.0);
  double l1 = evals(dim - 1), l2 = evals(dim - 2);
  if (!(l2 > 1e-12 * std::max(l1, 1e-300)))
    throw OptError("pca_project: designs span fewer than 2 directions");
  PcaResult out;
  out.components.resize(2, dim);
  out.components.row(0) = eig.eigenvectors().col(dim - 1).transpose();
  out.components.row(1) = eig.eigenvectors().col(dim - 2).transpose();
  for (int k = 0; k < 2; ++k) {
    for (long j = 0; j < dim; ++j) {
      if (std::abs(out.components(k, j)) > 1e-12) {
        if (out.components(k, j) < 0) out.components.row(k) = -out.components.row(k);
        break;
      }
    }
  }
  out.coords = X * out.components.transpose();
  out.explained << l1 / total, l2 / total;
  return out;
}

}  // namespace vf::hyb
