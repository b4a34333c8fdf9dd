#include "varifocal/hybridopt.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <array>
#include <cmath>
#include <random>
#include <vector>

using namespace vf;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

mesh::Mesh small_mesh() {
  static mesh::Mesh m = mesh::generate_eyepiece_mesh({}, 300, 21);
  return m;
}

const fem::PseudoFem& small_oracle() {
  static fem::PseudoFem f = fem::make_calibrated_oracle(small_mesh());
  return f;
}

mesh::AugmentedMesh small_augmented() {
  static mesh::AugmentedMesh am = mesh::augment_edges(
      small_mesh(), small_oracle().calibration().load_center, 10.0,
      small_mesh().anchor_node_ids);
  return am;
}

long n_boundary() { return static_cast<long>(small_mesh().boundary_node_ids.size()); }

// Closed-form quadratic Bezier inversion for a != 1/2:
// x(s) = 2 a s (1-s) + s^2 = d  =>  (1-2a) s^2 + 2a s - d = 0.
double bezier_s_closed_form(double a, double d) {
  double A = 1.0 - 2.0 * a, B = 2.0 * a, C = -d;
  if (std::abs(A) < 1e-15) return d / B;
  double disc = B * B - 4.0 * A * C;
  return (-B + std::sqrt(disc)) / (2.0 * A);
}

// A small surrogate trained on simulated neighbors of the mid-range design.
struct TrainedSetup {
  sur::SurrogateModel model;
  Eigen::VectorXd W_center;
};

const TrainedSetup& trained_setup() {
  static TrainedSetup s = [] {
    const fem::PseudoFem& f = small_oracle();
    mesh::AugmentedMesh am = small_augmented();
    TrainedSetup out;
    out.W_center = fem::uniform_midrange_stiffness(n_boundary());
    std::vector<sur::GraphSample> data;
    for (const Eigen::VectorXd& W : hyb::sample_neighbors(out.W_center, 40, 11)) {
      fem::DesignVariables d;
      d.v1 = 0.5;
      d.W = W;
      Eigen::VectorXd dz = f.simulate(d);
      data.push_back(sur::build_graph_features(am, d, &dz));
    }
    out.model = sur::make_model({3, 16, 5});
    sur::TrainConfig tc;
    tc.iterations = 400;
    tc.split_seed = 3;
    sur::train(out.model, data, tc);
    return out;
  }();
  return s;
}

// Extended-precision cyclic Jacobi eigen-solver for the PCA oracle.
void jacobi_long_double(std::vector<std::vector<long double>>& A,
                        std::vector<std::vector<long double>>& V) {
  const std::size_t n = A.size();
  V.assign(n, std::vector<long double>(n, 0.0L));
  for (std::size_t i = 0; i < n; ++i) V[i][i] = 1.0L;
  for (int sweep = 0; sweep < 100; ++sweep) {
    long double off = 0.0L;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += A[p][q] * A[p][q];
    if (off < 1e-40L) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        if (std::abs((double)A[p][q]) < 1e-300) continue;
        long double theta = (A[q][q] - A[p][p]) / (2.0L * A[p][q]);
        long double t = (theta >= 0 ? 1.0L : -1.0L) /
                        (std::abs((long double)theta) + std::sqrt(theta * theta + 1.0L));
        long double c = 1.0L / std::sqrt(t * t + 1.0L), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          long double akp = A[k][p], akq = A[k][q];
          A[k][p] = c * akp - s * akq;
          A[k][q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          long double apk = A[p][k], aqk = A[q][k];
          A[p][k] = c * apk - s * aqk;
          A[q][k] = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          long double vkp = V[k][p], vkq = V[k][q];
          V[k][p] = c * vkp - s * vkq;
          V[k][q] = s * vkp + c * vkq;
        }
      }
    }
  }
}

}  // namespace

// ---- bezier_stiffness -------------------------------------------------------

TEST_CASE("bezier endpoints map exactly to the stiffness bounds") {
  Eigen::VectorXd d(4);
  d << 0.0, 0.3, 0.9, 1.0;
  for (auto [a, b] : std::vector<std::pair<double, double>>{
           {0.5, 0.5}, {0.0, 0.38}, {1.0, 0.0}, {0.2, 0.9}}) {
    Eigen::VectorXd W = hyb::bezier_stiffness({a, b}, d);
    CHECK(W(0) == 100.0);
    CHECK(W(3) == 200000.0);
    CHECK(W(1) > 100.0);
    CHECK(W(2) < 200000.0);
  }
}

TEST_CASE("identity bezier maps the midpoint to the log-linear midpoint") {
  Eigen::VectorXd d(1);
  d << 0.5;
  Eigen::VectorXd W = hyb::bezier_stiffness({0.5, 0.5}, d);
  // 10^(2 + 0.5 (log10 2e5 - 2)) = sqrt(100 * 200000) = 4472.13...
  CHECK_THAT(W(0), WithinRel(std::sqrt(100.0 * 200000.0), 1e-9));
  CHECK_THAT(W(0), WithinAbs(4472.136, 1e-3));
}

TEST_CASE("bezier inversion matches the closed-form quadratic root") {
  for (auto [a, b] : std::vector<std::pair<double, double>>{
           {0.3, 0.7}, {0.0, 0.38}, {0.9, 0.1}}) {
    for (double dv : {0.05, 0.25, 0.5, 0.75, 0.95}) {
      Eigen::VectorXd d(1);
      d << dv;
      double s = bezier_s_closed_form(a, dv);
      double y = 2.0 * b * s * (1.0 - s) + s * s;
      double expect = std::pow(10.0, 2.0 + y * (std::log10(2e5) - 2.0));
      CHECK_THAT(hyb::bezier_stiffness({a, b}, d)(0), WithinRel(expect, 1e-9));
    }
  }
}

TEST_CASE("bezier stiffness is monotone in the normalized distance") {
  Eigen::VectorXd d = Eigen::VectorXd::LinSpaced(41, 0.0, 1.0);
  for (auto [a, b] : std::vector<std::pair<double, double>>{{0.1, 0.9}, {0.8, 0.2}}) {
    Eigen::VectorXd W = hyb::bezier_stiffness({a, b}, d);
    for (long i = 1; i < W.size(); ++i) CHECK(W(i) >= W(i - 1));
  }
}

TEST_CASE("bezier rejects control points and distances outside the unit box") {
  Eigen::VectorXd ok(1);
  ok << 0.5;
  CHECK_THROWS_AS(hyb::bezier_stiffness({-0.1, 0.5}, ok), hyb::OptError);
  CHECK_THROWS_AS(hyb::bezier_stiffness({0.5, 1.1}, ok), hyb::OptError);
  Eigen::VectorXd bad(1);
  bad << 1.2;
  CHECK_THROWS_AS(hyb::bezier_stiffness({0.5, 0.5}, bad), hyb::OptError);
  bad << -0.01;
  CHECK_THROWS_AS(hyb::bezier_stiffness({0.5, 0.5}, bad), hyb::OptError);
}

TEST_CASE("normalized boundary distances span exactly [0, 1]") {
  mesh::Mesh m = small_mesh();
  Eigen::VectorXd d = hyb::normalized_boundary_distances(m, m.centroid());
  CHECK(d.minCoeff() == 0.0);
  CHECK(d.maxCoeff() == 1.0);
  CHECK(d.size() == n_boundary());
}

// ---- voltage arithmetic -----------------------------------------------------

TEST_CASE("solved voltage reproduces the published linear-fit value") {
  // focal = -776.63 v + 968.545, target 590 => v = 0.48742
  CHECK_THAT(hyb::v_star_from_fit(-776.63, 968.545, 590.0), WithinAbs(0.48742, 1e-5));
}

TEST_CASE("exactly linear focal curve inverts exactly") {
  CHECK(hyb::v_star_from_fit(-1000.0, 1090.0, 590.0) == 0.5);
  CHECK_THROWS_AS(hyb::v_star_from_fit(1e-12, 1090.0, 590.0), hyb::OptError);
}

// ---- sample_neighbors -------------------------------------------------------

TEST_CASE("neighbor samples stay within 20% of the center, clipped to bounds") {
  Eigen::VectorXd W = Eigen::VectorXd::Constant(21, 150.0);  // near the floor
  W(5) = 180000.0;                                           // near the ceiling
  auto batch = hyb::sample_neighbors(W, 50, 42);
  REQUIRE(batch.size() == 50);
  for (const auto& Wn : batch) {
    REQUIRE(Wn.size() == W.size());
    for (long j = 0; j < W.size(); ++j) {
      CHECK(Wn(j) >= std::max(0.8 * W(j), 100.0) - 1e-12);
      CHECK(Wn(j) <= std::min(1.2 * W(j), 200000.0) + 1e-12);
    }
  }
}

TEST_CASE("neighbor sampling is deterministic per seed") {
  Eigen::VectorXd W = fem::uniform_midrange_stiffness(21);
  auto a = hyb::sample_neighbors(W, 10, 7);
  auto b = hyb::sample_neighbors(W, 10, 7);
  auto c = hyb::sample_neighbors(W, 10, 8);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
  bool any_diff = false;
  for (std::size_t i = 0; i < a.size(); ++i) any_diff = any_diff || a[i] != c[i];
  CHECK(any_diff);
  CHECK_THROWS_AS(hyb::sample_neighbors(W, 0, 1), hyb::OptError);
}

// ---- coarse_voltage_sweep ---------------------------------------------------

TEST_CASE("voltage sweep returns the independently computed arg-min") {
  const fem::PseudoFem& f = small_oracle();
  Eigen::VectorXd W0 = fem::uniform_midrange_stiffness(n_boundary());
  std::vector<double> sweep;
  for (int i = 1; i <= 9; ++i) sweep.push_back(0.1 * i);
  double v = hyb::coarse_voltage_sweep(f, W0, sweep, 590.0);
  // independent arg-min with the documented tie rule (ascending, strict <)
  double best_v = 0, best_err = std::numeric_limits<double>::infinity();
  for (double vv : sweep) {
    fem::DesignVariables d;
    d.v1 = vv;
    d.W = W0;
    double err = std::abs(hyb::evaluate_design(f, d).focal_mm - 590.0);
    if (err < best_err) {
      best_err = err;
      best_v = vv;
    }
  }
  CHECK(v == best_v);
  CHECK_THAT(v, WithinAbs(0.5, 0.101));  // calibration anchors the answer near 0.5
  CHECK(hyb::coarse_voltage_sweep(f, W0, {0.7}, 590.0) == 0.7);
  CHECK_THROWS_AS(hyb::coarse_voltage_sweep(f, W0, {}, 590.0), hyb::OptError);
}

// ---- evaluate_design --------------------------------------------------------

TEST_CASE("design evaluation ties together fit, trace, and focus") {
  const fem::PseudoFem& f = small_oracle();
  fem::DesignVariables d;
  d.v1 = 0.5;
  d.W = fem::uniform_midrange_stiffness(n_boundary());
  Eigen::VectorXd dz = f.simulate(d);
  hyb::SimEval ev = hyb::evaluate_deformation(f, dz);
  CHECK_THAT(ev.surface_rms_nm, WithinRel(optics::fit_sphere(f.roi_points(dz)).rms_nm, 1e-12));
  CHECK(ev.focal_mm > 0);
  CHECK(std::isfinite(ev.spot_rms_nm));
  // higher voltage -> proportionally deeper dome -> shorter focal length
  fem::DesignVariables d2 = d;
  d2.v1 = 0.8;
  CHECK(hyb::evaluate_design(f, d2).focal_mm < ev.focal_mm);
}

// ---- doe_bezier -------------------------------------------------------------

TEST_CASE("bezier DOE scans the coarse lattice and refines around the minimum") {
  const fem::PseudoFem& f = small_oracle();
  hyb::DoeResult doe = hyb::doe_bezier(f, 0.5);
  CHECK(doe.table.size() >= 121);  // 11x11 coarse lattice, plus the refined pass
  double min_rms = std::numeric_limits<double>::infinity();
  for (const auto& e : doe.table) min_rms = std::min(min_rms, e.rms_nm);
  CHECK(doe.best_rms_nm == min_rms);
  bool found = false;
  for (const auto& e : doe.table)
    found = found || (e.a == doe.best.a && e.b == doe.best.b && e.rms_nm == doe.best_rms_nm);
  CHECK(found);
  // refined entries surround the coarse best within one coarse cell
  CHECK(doe.W_best.size() == n_boundary());
  // the DOE winner should not be worse than the uniform design
  fem::DesignVariables du;
  du.v1 = 0.5;
  du.W = fem::uniform_midrange_stiffness(n_boundary());
  double uniform_rms = optics::fit_sphere(f.roi_points(f.simulate(du))).rms_nm;
  CHECK(doe.best_rms_nm <= uniform_rms * 1.05);
  CHECK_THROWS_AS(hyb::doe_bezier(f, 0.5, 0.0), hyb::OptError);
}

TEST_CASE("bezier DOE is deterministic") {
  const fem::PseudoFem& f = small_oracle();
  hyb::DoeResult a = hyb::doe_bezier(f, 0.5, 0.25, 0.1);
  hyb::DoeResult b = hyb::doe_bezier(f, 0.5, 0.25, 0.1);
  REQUIRE(a.table.size() == b.table.size());
  for (std::size_t i = 0; i < a.table.size(); ++i)
    CHECK(a.table[i].rms_nm == b.table[i].rms_nm);
  CHECK(a.W_best == b.W_best);
}

// ---- correlation postulates -------------------------------------------------

TEST_CASE("voltage drives focal length; stiffness drives sag-normalized RMS") {
  const fem::PseudoFem& f = small_oracle();
  const double roi = f.calibration().roi_radius;
  fem::DesignVariables d;
  d.v1 = 0.5;
  d.W = fem::uniform_midrange_stiffness(n_boundary());
  auto measure = [&](const fem::DesignVariables& dd) {
    Eigen::VectorXd dz = f.simulate(dd);
    optics::SphereFit sf = optics::fit_sphere(f.roi_points(dz));
    double sag_nm = roi * roi / (2.0 * sf.r) * 1e6;
    return std::pair<double, double>{sf.r / 2.0, sf.rms_nm / sag_nm};
  };
  auto [focal0, nrms0] = measure(d);
  const double rel = 0.05;
  fem::DesignVariables dv = d;
  dv.v1 *= 1.0 + rel;
  auto [focal_v, nrms_v] = measure(dv);
  double e_focal_v = std::abs(focal_v - focal0) / focal0 / rel;
  double e_nrms_v = std::abs(nrms_v - nrms0) / nrms0 / rel;
  double e_focal_w = 0, e_nrms_w = 0;
  for (long j = 0; j < d.W.size(); ++j) {
    fem::DesignVariables dw = d;
    dw.W(j) *= 1.0 + rel;
    auto [focal_w, nrms_w] = measure(dw);
    e_focal_w += std::abs(focal_w - focal0) / focal0 / rel;
    e_nrms_w += std::abs(nrms_w - nrms0) / nrms0 / rel;
  }
  e_focal_w /= static_cast<double>(d.W.size());
  e_nrms_w /= static_cast<double>(d.W.size());
  CHECK(e_focal_v > 10.0 * e_focal_w);  // voltage owns the focal length
  CHECK(e_nrms_w > 10.0 * e_nrms_v);    // stiffness owns the normalized quality
}

// ---- optimize_design --------------------------------------------------------

TEST_CASE("gradient descent does not worsen the surrogate objective") {
  const TrainedSetup& ts = trained_setup();
  hyb::GdConfig cfg;
  cfg.epochs = 40;
  cfg.lr = 0.05;
  hyb::GdReport rep = hyb::optimize_design(ts.model, small_augmented(), small_oracle(), 0.5,
                                           ts.W_center, cfg);
  REQUIRE(rep.loss_nm.size() == 40);
  CHECK(rep.W_opt.size() == n_boundary());
  for (long j = 0; j < rep.W_opt.size(); ++j) {
    CHECK(rep.W_opt(j) >= 100.0);
    CHECK(rep.W_opt(j) <= 200000.0);
  }
  // objective at the returned design, measured on the same surrogate chain
  hyb::GdConfig probe = cfg;
  probe.epochs = 1;
  double loss_opt =
      hyb::optimize_design(ts.model, small_augmented(), small_oracle(), 0.5, rep.W_opt, probe)
          .loss_nm.front();
  CHECK(loss_opt <= rep.loss_nm.front() * (1.0 + 1e-9));
}

TEST_CASE("a stiffness-blind surrogate yields exactly zero steps") {
  sur::SurrogateModel m = trained_setup().model;
  m.params[0].row(3).setZero();  // encoder ignores the stiffness feature
  hyb::GdConfig cfg;
  cfg.epochs = 5;
  Eigen::VectorXd W0 = fem::uniform_midrange_stiffness(n_boundary());
  hyb::GdReport rep =
      hyb::optimize_design(m, small_augmented(), small_oracle(), 0.5, W0, cfg);
  for (long j = 0; j < W0.size(); ++j) CHECK_THAT(rep.W_opt(j), WithinRel(W0(j), 1e-12));
  for (double l : rep.loss_nm) CHECK(l == rep.loss_nm.front());
}

TEST_CASE("optimize_design validates the stiffness length") {
  CHECK_THROWS_AS(hyb::optimize_design(trained_setup().model, small_augmented(),
                                       small_oracle(), 0.5, Eigen::VectorXd::Constant(3, 1e3)),
                  hyb::OptError);
}

// ---- hybrid_loop ------------------------------------------------------------

TEST_CASE("infinite tolerance terminates on the seed batch with zero loop calls") {
  const fem::PseudoFem& f = small_oracle();
  fem::DesignVariables d;
  d.v1 = 0.5;
  d.W = fem::uniform_midrange_stiffness(n_boundary());
  Eigen::VectorXd dz = f.simulate(d);
  long before = f.oracle_calls();
  hyb::Objectives obj;
  obj.rms_tolerance_nm = std::numeric_limits<double>::infinity();
  hyb::LoopResult res = hyb::hybrid_loop(f, small_augmented(), 0.5, d.W, {{d, dz}}, obj);
  CHECK(res.converged);
  CHECK(res.history.empty());
  CHECK(res.oracle_calls == 0);
  CHECK(f.oracle_calls() == before);
  CHECK(res.W_star == d.W);
  CHECK_THAT(res.best_rms_nm,
             WithinRel(optics::fit_sphere(f.roi_points(dz)).rms_nm, 1e-12));
}

TEST_CASE("the loop improves monotonically, respects bounds, and reproduces") {
  const fem::PseudoFem& f = small_oracle();
  Eigen::VectorXd W0 = fem::uniform_midrange_stiffness(n_boundary());
  hyb::LoopConfig cfg;
  cfg.max_epochs = 2;
  cfg.neighbors_per_epoch = 10;
  cfg.seed = 3;
  cfg.model_cfg = {2, 16, 9};
  cfg.train_cfg.iterations = 150;
  cfg.gd.epochs = 25;
  cfg.gd.lr = 0.05;
  hyb::Objectives obj;
  obj.rms_tolerance_nm = 1.0;  // unreachable: force the full epoch budget
  hyb::LoopResult a = hyb::hybrid_loop(f, small_augmented(), 0.5, W0, {}, obj, cfg);
  CHECK_FALSE(a.converged);
  REQUIRE(a.history.size() == 2);
  CHECK(a.history[1].best_rms_nm <= a.history[0].best_rms_nm);
  for (const auto& h : a.history) {
    for (long j = 0; j < h.proposed_W.size(); ++j) {
      CHECK(h.proposed_W(j) >= 100.0);
      CHECK(h.proposed_W(j) <= 200000.0);
    }
    CHECK(h.neighbor_rms_nm.size() == 10);
  }
  // budget: neighbors + one proposal per epoch, plus the empty-seed bootstrap
  CHECK(a.oracle_calls <= 2 * 11 + 1);
  hyb::LoopResult b = hyb::hybrid_loop(f, small_augmented(), 0.5, W0, {}, obj, cfg);
  CHECK(a.W_star == b.W_star);
  CHECK(a.best_rms_nm == b.best_rms_nm);
  REQUIRE(b.history.size() == a.history.size());
  for (std::size_t e = 0; e < a.history.size(); ++e)
    CHECK(a.history[e].neighbor_rms_nm == b.history[e].neighbor_rms_nm);
  CHECK(a.best_rms_nm <= optics::fit_sphere(f.roi_points(f.simulate([&] {
                             fem::DesignVariables d;
                             d.v1 = 0.5;
                             d.W = W0;
                             return d;
                           }()))).rms_nm);
}

TEST_CASE("the loop validates the stiffness length") {
  CHECK_THROWS_AS(hyb::hybrid_loop(small_oracle(), small_augmented(), 0.5,
                                   Eigen::VectorXd::Constant(4, 1e3), {}),
                  hyb::OptError);
}

// ---- fine_tune_voltage ------------------------------------------------------

TEST_CASE("voltage fine-tune lands the simulated focal length on target") {
  const fem::PseudoFem& f = small_oracle();
  Eigen::VectorXd W0 = fem::uniform_midrange_stiffness(n_boundary());
  hyb::FineTuneResult ft = hyb::fine_tune_voltage(f, W0, 0.5, 590.0);
  CHECK(ft.probes.size() == 5);
  for (const auto& [v, focal] : ft.probes) {
    CHECK(v >= 0.95 * 0.5 - 1e-12);
    CHECK(v <= 1.05 * 0.5 + 1e-12);
    CHECK(focal > 0);
  }
  CHECK(ft.slope < 0);  // more voltage, deeper dome, shorter focal
  CHECK(ft.v_star > 0);
  CHECK(ft.v_star <= 1.0);
  CHECK_THAT(ft.focal_at_vstar_mm, WithinRel(590.0, 0.01));
  CHECK_THROWS_AS(hyb::fine_tune_voltage(f, W0, 0.5, 590.0, 1), hyb::OptError);
}

// ---- pca_project ------------------------------------------------------------

TEST_CASE("PCA projection matches an extended-precision eigen-oracle") {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(2.1, 5.2);
  std::vector<Eigen::VectorXd> designs;
  for (int i = 0; i < 12; ++i) {
    Eigen::VectorXd W(7);
    for (long j = 0; j < 7; ++j) W(j) = std::pow(10.0, u(rng));
    designs.push_back(W);
  }
  hyb::PcaResult res = hyb::pca_project(designs);

  // independent long-double covariance eigen-solve on the same normalization
  const long n = 12, dim = 7;
  const double la = 2.0, lb = std::log10(2e5);
  std::vector<std::vector<long double>> X(n, std::vector<long double>(dim));
  for (long i = 0; i < n; ++i)
    for (long j = 0; j < dim; ++j)
      X[i][j] = (std::log10((long double)designs[i](j)) - la) / (lb - la);
  for (long j = 0; j < dim; ++j) {
    long double mean = 0;
    for (long i = 0; i < n; ++i) mean += X[i][j];
    mean /= n;
    for (long i = 0; i < n; ++i) X[i][j] -= mean;
  }
  std::vector<std::vector<long double>> C(dim, std::vector<long double>(dim, 0.0L));
  for (long p = 0; p < dim; ++p)
    for (long q = 0; q < dim; ++q) {
      for (long i = 0; i < n; ++i) C[p][q] += X[i][p] * X[i][q];
      C[p][q] /= (n - 1);
    }
  long double total = 0;
  for (long p = 0; p < dim; ++p) total += C[p][p];
  std::vector<std::vector<long double>> A = C, V;
  jacobi_long_double(A, V);
  std::vector<std::pair<long double, int>> ev;
  for (int j = 0; j < dim; ++j) ev.push_back({A[j][j], j});
  std::sort(ev.rbegin(), ev.rend());
  for (int k = 0; k < 2; ++k) {
    int col = ev[k].second;
    std::vector<long double> comp(dim);
    for (long j = 0; j < dim; ++j) comp[j] = V[j][col];
    for (long j = 0; j < dim; ++j)
      if (std::abs((double)comp[j]) > 1e-12) {
        if (comp[j] < 0)
          for (auto& c : comp) c = -c;
        break;
      }
    for (long j = 0; j < dim; ++j)
      CHECK_THAT(res.components(k, j), WithinAbs((double)comp[j], 1e-9));
    for (long i = 0; i < n; ++i) {
      long double coord = 0;
      for (long j = 0; j < dim; ++j) coord += X[i][j] * comp[j];
      CHECK_THAT(res.coords(i, k), WithinAbs((double)coord, 1e-9));
    }
    CHECK_THAT(res.explained(k), WithinAbs((double)(ev[k].first / total), 1e-9));
  }
  CHECK(res.explained(0) >= res.explained(1));
}

TEST_CASE("PCA recovers a planted two-dimensional design family") {
  Eigen::VectorXd u1(6), u2(6);
  u1 << 1, 1, 1, -1, -1, -1;
  u2 << 1, -1, 0, -1, 1, 0;  // orthogonal to u1
  u1.normalize();
  u2.normalize();
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> coef(-0.4, 0.4);
  std::vector<Eigen::VectorXd> designs;
  for (int i = 0; i < 20; ++i) {
    Eigen::VectorXd logw =
        Eigen::VectorXd::Constant(6, 3.6) + coef(rng) * u1 + coef(rng) * u2;
    designs.push_back(logw.unaryExpr([](double v) { return std::pow(10.0, v); }));
  }
  hyb::PcaResult res = hyb::pca_project(designs);
  CHECK_THAT(res.explained(0) + res.explained(1), WithinAbs(1.0, 1e-9));
  // every component lies in span{u1, u2}
  for (int k = 0; k < 2; ++k) {
    Eigen::VectorXd c = res.components.row(k).transpose();
    Eigen::VectorXd proj = c.dot(u1) * u1 + c.dot(u2) * u2;
    CHECK((c - proj).norm() < 1e-9);
  }
}

TEST_CASE("PCA rejects degenerate inputs") {
  std::vector<Eigen::VectorXd> two{Eigen::VectorXd::Constant(4, 1e3),
                                   Eigen::VectorXd::Constant(4, 2e3)};
  CHECK_THROWS_AS(hyb::pca_project(two), hyb::OptError);
  // rank one: all designs along a single direction
  std::vector<Eigen::VectorXd> line;
  for (double t : {3.0, 3.3, 3.6, 3.9})
    line.push_back(Eigen::VectorXd::Constant(5, std::pow(10.0, t)));
  CHECK_THROWS_AS(hyb::pca_project(line), hyb::OptError);
  std::vector<Eigen::VectorXd> ragged{Eigen::VectorXd::Constant(4, 1e3),
                                      Eigen::VectorXd::Constant(4, 2e3),
                                      Eigen::VectorXd::Constant(5, 3e3)};
  CHECK_THROWS_AS(hyb::pca_project(ragged), hyb::OptError);
}
