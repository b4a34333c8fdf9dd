#pragma once

// Differentiable ray tracing over an analytic Zernike surface: plane source,
// Newton intersection with z = f(x, y), reflection/refraction, detector-plane
// spot diagrams, a spot-RMS loss with gradients to the surface coefficients,
// and a best-focus search along the detector axis.

#include "varifocal/autodiff.hpp"
#include "varifocal/optics.hpp"

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace vf::rt {

class TraceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TotalInternalReflection : public TraceError {
 public:
  using TraceError::TraceError;
};

using Vec3 = Eigen::Vector3d;
using Points3 = Eigen::Matrix<double, Eigen::Dynamic, 3>;

struct RayBundle {
  Points3 o;  // origins, mm
  Points3 u;  // unit directions
  long size() const { return o.rows(); }
};

enum class SourcePattern { grid, ring };

// Rays perpendicular to the source plane, pointing in -z.
inline RayBundle make_source(double aperture_radius, int n_rays, SourcePattern pattern,
                             double z_source) {
  if (n_rays < 1) throw std::invalid_argument("make_source: n_rays must be >= 1");
  std::vector<Eigen::Vector2d> pts;
  if (n_rays == 1) {
    pts.emplace_back(0.0, 0.0);
  } else if (pattern == SourcePattern::grid) {
    int m = static_cast<int>(std::floor(std::sqrt(static_cast<double>(n_rays))));
    for (int i = 0; i < m; ++i) {
      for (int j = 0; j < m; ++j) {
        double x = m == 1 ? 0.0 : -aperture_radius + 2.0 * aperture_radius * i / (m - 1);
        double y = m == 1 ? 0.0 : -aperture_radius + 2.0 * aperture_radius * j / (m - 1);
        if (x * x + y * y <= aperture_radius * aperture_radius) pts.emplace_back(x, y);
      }
    }
  } else {
    for (int i = 0; i < n_rays; ++i) {
      double a = 2.0 * M_PI * i / n_rays;
      pts.emplace_back(aperture_radius * std::cos(a), aperture_radius * std::sin(a));
    }
  }
  RayBundle b;
  b.o.resize(static_cast<long>(pts.size()), 3);
  b.u.resize(static_cast<long>(pts.size()), 3);
  for (long i = 0; i < b.o.rows(); ++i) {
    b.o.row(i) << pts[static_cast<std::size_t>(i)](0), pts[static_cast<std::size_t>(i)](1), z_source;
    b.u.row(i) << 0.0, 0.0, -1.0;
  }
  return b;
}

struct NewtonCfg {
  double tol = 1e-10;  // mm
  int max_iters = 50;
};

struct Intersection {
  Points3 q;                    // intersection points
  Eigen::VectorXd t;            // ray parameters
  std::vector<bool> converged;  // per ray
};

namespace detail {

// Residual g(t) = f(ox+ux t, oy+uy t) - (oz+uz t) and its derivative.
inline void residual(const optics::ZernikeSurface& s, const Eigen::Vector3d& o,
                     const Eigen::Vector3d& u, double t, double* g, double* gp) {
  double x = o(0) + u(0) * t, y = o(1) + u(1) * t;
  auto e = optics::zernike_eval(s, x, y);
  *g = e.z - (o(2) + u(2) * t);
  *gp = e.dzdx * u(0) + e.dzdy * u(1) - u(2);
}

}  // namespace detail

// Per-ray Newton root of g(t); non-converged rays are flagged.
inline Intersection intersect(const RayBundle& rays, const optics::ZernikeSurface& s,
                              const NewtonCfg& cfg = {}) {
  const long n = rays.size();
  Intersection out;
  out.q.resize(n, 3);
  out.t.resize(n);
  out.converged.assign(static_cast<std::size_t>(n), false);
  for (long i = 0; i < n; ++i) {
    Eigen::Vector3d o = rays.o.row(i), u = rays.u.row(i);
    // initial guess: intersection with the plane at the surface's mean height
    double t = std::abs(u(2)) > 1e-12 ? (s.c[0] - o(2)) / u(2) : 0.0;
    bool conv = false;
    for (int it = 0; it < cfg.max_iters; ++it) {
      double g, gp;
      detail::residual(s, o, u, t, &g, &gp);
      if (std::abs(gp) < 1e-14) break;
      double step = g / gp;
      t -= step;
      if (std::abs(step) < cfg.tol) {
        conv = true;
        break;
      }
    }
    out.t(i) = t;
    out.q.row(i) << o(0) + u(0) * t, o(1) + u(1) * t, o(2) + u(2) * t;
    out.converged[static_cast<std::size_t>(i)] = conv;
  }
  return out;
}

// Unit surface normal at q, oriented against the incoming direction u.
inline Vec3 surface_normal(const optics::ZernikeSurface& s, const Vec3& q, const Vec3& u) {
  auto e = optics::zernike_eval(s, q(0), q(1));
  Vec3 n(e.dzdx, e.dzdy, -1.0);
  n.normalize();
  if (n.dot(u) > 0) n = -n;
  return n;
}

inline Vec3 reflect(const Vec3& u, const Vec3& n) { return u - 2.0 * u.dot(n) * n; }

// mu = n_inc / n_trn. The normal is re-oriented along the propagation side.
inline Vec3 refract(const Vec3& u, const Vec3& n_in, double mu) {
  Vec3 n = n_in.dot(u) >= 0 ? n_in : Vec3(-n_in);
  double c = n.dot(u);
  double rad = 1.0 - mu * mu * (1.0 - c * c);
  if (rad < 0)
    throw TotalInternalReflection("refract: total internal reflection (negative radicand)");
  return n * std::sqrt(rad) + mu * (u - c * n);
}

struct SpotDiagram {
  double plane_z = 0;  // signed; negative = virtual image side
  Eigen::Matrix<double, Eigen::Dynamic, 2> hits;
  Eigen::Vector2d centroid{0, 0};
  double spot_rms_nm = 0;
  int n_flagged = 0;
};

// Intersect every ray with the plane z = plane_z, allowing negative travel
// (virtual image side). Rays with u_z == 0 are flagged and excluded.
inline SpotDiagram propagate_to_plane(const Points3& origins, const Points3& dirs,
                                      double plane_z) {
  const long n = origins.rows();
  std::vector<Eigen::Vector2d> hits;
  int flagged = 0;
  for (long i = 0; i < n; ++i) {
    double uz = dirs(i, 2);
    if (std::abs(uz) < 1e-15) {
      ++flagged;
      continue;
    }
    double t = (plane_z - origins(i, 2)) / uz;
    hits.emplace_back(origins(i, 0) + dirs(i, 0) * t, origins(i, 1) + dirs(i, 1) * t);
  }
  if (hits.empty()) throw TraceError("propagate_to_plane: no usable rays");
  SpotDiagram d;
  d.plane_z = plane_z;
  d.n_flagged = flagged;
  d.hits.resize(static_cast<long>(hits.size()), 2);
  for (long i = 0; i < d.hits.rows(); ++i) d.hits.row(i) = hits[static_cast<std::size_t>(i)];
  d.centroid = d.hits.colwise().mean();
  double sse = (d.hits.rowwise() - d.centroid.transpose()).rowwise().squaredNorm().mean();
  d.spot_rms_nm = std::sqrt(sse) * optics::kMmToNm;
  return d;
}

// Reflect a source bundle off the surface; origins become the intersection
// points. Non-converged rays are dropped (counted in n_flagged).
struct ReflectedBundle {
  Points3 o;
  Points3 u;
  int n_flagged = 0;
};

inline ReflectedBundle reflect_bundle(const optics::ZernikeSurface& s, const RayBundle& src,
                                      const NewtonCfg& cfg = {}) {
  Intersection is = intersect(src, s, cfg);
  std::vector<long> keep;
  for (long i = 0; i < src.size(); ++i)
    if (is.converged[static_cast<std::size_t>(i)]) keep.push_back(i);
  ReflectedBundle out;
  out.n_flagged = static_cast<int>(src.size() - static_cast<long>(keep.size()));
  out.o.resize(static_cast<long>(keep.size()), 3);
  out.u.resize(static_cast<long>(keep.size()), 3);
  for (std::size_t k = 0; k < keep.size(); ++k) {
    long i = keep[k];
    Vec3 u = src.u.row(i);
    Vec3 q = is.q.row(i);
    Vec3 n = surface_normal(s, q, u);
    out.o.row(static_cast<long>(k)) = q;
    out.u.row(static_cast<long>(k)) = reflect(u, n);
  }
  return out;
}

struct FocusResult {
  double plane_z = 0;   // arg-min detector plane, signed mm
  double spot_rms_nm = 0;
};

// Coarse scan (64 samples) followed by golden-section refinement to 0.01 mm.
// Requires an interior minimum in [z_lo, z_hi].
inline FocusResult find_best_focus(const ReflectedBundle& rays, double z_lo, double z_hi) {
  if (rays.o.rows() < 2) throw TraceError("find_best_focus: need at least 2 rays");
  auto rms_at = [&](double z) {
    return propagate_to_plane(rays.o, rays.u, z).spot_rms_nm;
  };
  constexpr int kScan = 64;
  int best = 0;
  double best_v = std::numeric_limits<double>::infinity();
  for (int i = 0; i < kScan; ++i) {
    double z = z_lo + (z_hi - z_lo) * i / (kScan - 1);
    double v = rms_at(z);
    if (v < best_v) {
      best_v = v;
      best = i;
    }
  }
  if (best == 0 || best == kScan - 1)
    throw TraceError("find_best_focus: no interior minimum in the search interval "
                     "(scan minimum at the boundary)");
  double a = z_lo + (z_hi - z_lo) * (best - 1) / (kScan - 1);
  double b = z_lo + (z_hi - z_lo) * (best + 1) / (kScan - 1);
  const double gr = (std::sqrt(5.0) - 1.0) / 2.0;
  double c = b - gr * (b - a), d = a + gr * (b - a);
  double fc = rms_at(c), fd = rms_at(d);
  while (b - a > 0.01) {
    if (fc < fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - gr * (b - a);
      fc = rms_at(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + gr * (b - a);
      fd = rms_at(d);
    }
  }
  double z_star = 0.5 * (a + b);
  return {z_star, rms_at(z_star)};
}

// Non-differentiable convenience: full trace to a fixed plane.
inline SpotDiagram trace_spot(const optics::ZernikeSurface& s, const RayBundle& src,
                              double plane_z, const NewtonCfg& cfg = {}) {
  ReflectedBundle rb = reflect_bundle(s, src, cfg);
  SpotDiagram d = propagate_to_plane(rb.o, rb.u, plane_z);
  d.n_flagged += rb.n_flagged;
  return d;
}

// ---- differentiable path ----------------------------------------------------

enum class GradMode {
  implicit,  // Newton off-tape, root gradient via the implicit rule
  unrolled   // Newton iterations recorded on the tape
};

namespace detail {

// Zernike height as a tape expression of the six coefficient nodes at
// normalized coordinates X, Y (tape arrays).
inline ad::Var zernike_z_t(const std::array<ad::Var, 6>& c, const ad::Var& X,
                           const ad::Var& Y) {
  const double s3 = std::sqrt(3.0), s6 = std::sqrt(6.0);
  ad::Var X2 = X * X, Y2 = Y * Y;
  return c[0] + c[1] * (2.0 * Y) + c[2] * (2.0 * X) + c[3] * ((2.0 * s6) * (X * Y)) +
         c[4] * (s3 * (2.0 * (X2 + Y2) - 1.0)) + c[5] * (s6 * (X2 - Y2));
}

inline ad::Var zernike_dzdX_t(const std::array<ad::Var, 6>& c, const ad::Var& X,
                              const ad::Var& Y) {
  const double s3 = std::sqrt(3.0), s6 = std::sqrt(6.0);
  return 2.0 * c[2] + (2.0 * s6) * (c[3] * Y) + (4.0 * s3) * (c[4] * X) +
         (2.0 * s6) * (c[5] * X);
}

inline ad::Var zernike_dzdY_t(const std::array<ad::Var, 6>& c, const ad::Var& X,
                              const ad::Var& Y) {
  const double s3 = std::sqrt(3.0), s6 = std::sqrt(6.0);
  return 2.0 * c[1] + (2.0 * s6) * (c[3] * X) + (4.0 * s3) * (c[4] * Y) -
         (2.0 * s6) * (c[5] * Y);
}

}  // namespace detail

struct TraceLoss {
  ad::Var loss_nm;  // centroid-referenced spot RMS at the target plane
  long n_used = 0;
  int n_flagged = 0;
};

// Composes intersect -> normal -> reflect -> propagate -> spot RMS on the
// tape, with gradients flowing to all six coefficient nodes. Rays whose
// Newton iteration fails are excluded; more than 10% flagged is an error.
inline TraceLoss trace_loss_t(ad::Tape& t, const std::array<ad::Var, 6>& coeff,
                              double roi_radius, const RayBundle& src, double plane_z,
                              const NewtonCfg& cfg = {},
                              GradMode mode = GradMode::implicit) {
  optics::ZernikeSurface s;
  for (int i = 0; i < 6; ++i) s.c[static_cast<std::size_t>(i)] = coeff[static_cast<std::size_t>(i)].s();
  s.roi_radius = roi_radius;

  Intersection is = intersect(src, s, cfg);
  std::vector<long> keep;
  for (long i = 0; i < src.size(); ++i)
    if (is.converged[static_cast<std::size_t>(i)]) keep.push_back(i);
  const long n = static_cast<long>(keep.size());
  int flagged = static_cast<int>(src.size() - n);
  if (flagged * 10 > src.size())
    throw TraceError("trace_loss: more than 10% of rays failed to converge (" +
                     std::to_string(flagged) + " of " + std::to_string(src.size()) + ")");
  if (n < 2) throw TraceError("trace_loss: fewer than 2 usable rays");

  Eigen::VectorXd ox(n), oy(n), oz(n), ux(n), uy(n), uz(n), t0(n);
  for (long k = 0; k < n; ++k) {
    long i = keep[static_cast<std::size_t>(k)];
    ox(k) = src.o(i, 0);
    oy(k) = src.o(i, 1);
    oz(k) = src.o(i, 2);
    ux(k) = src.u(i, 0);
    uy(k) = src.u(i, 1);
    uz(k) = src.u(i, 2);
    t0(k) = is.t(i);
  }
  ad::Var oxv = ad::Var::leaf(t, ox, false), oyv = ad::Var::leaf(t, oy, false),
          ozv = ad::Var::leaf(t, oz, false);
  ad::Var uxv = ad::Var::leaf(t, ux, false), uyv = ad::Var::leaf(t, uy, false),
          uzv = ad::Var::leaf(t, uz, false);

  ad::Var tv;
  if (mode == GradMode::implicit) {
    // t* as a custom primitive: dt/dc_k = -B_k(q) / g'(t*)
    Eigen::MatrixXd dtdc(n, 6);
    for (long k = 0; k < n; ++k) {
      double x = ox(k) + ux(k) * t0(k), y = oy(k) + uy(k) * t0(k);
      auto e = optics::zernike_eval(s, x, y);
      double gp = e.dzdx * ux(k) + e.dzdy * uy(k) - uz(k);
      auto b = optics::zernike_basis(x / roi_radius, y / roi_radius);
      for (int j = 0; j < 6; ++j) dtdc(k, j) = -b[static_cast<std::size_t>(j)] / gp;
    }
    std::vector<ad::Var> parents(coeff.begin(), coeff.end());
    tv = ad::custom(t, t0, parents, [dtdc](const ad::Mat& gout) {
      std::vector<ad::Mat> gs(6);
      for (int j = 0; j < 6; ++j) {
        ad::Mat g(1, 1);
        g(0, 0) = gout.cwiseProduct(dtdc.col(j)).sum();
        gs[static_cast<std::size_t>(j)] = g;
      }
      return gs;
    });
  } else {
    // Newton unrolled on the tape from the plane initial guess
    Eigen::VectorXd tinit(n);
    for (long k = 0; k < n; ++k)
      tinit(k) = std::abs(uz(k)) > 1e-12 ? (s.c[0] - oz(k)) / uz(k) : 0.0;
    tv = ad::Var::leaf(t, tinit, false);
    for (int it = 0; it < cfg.max_iters; ++it) {
      ad::Var X = (oxv + uxv * tv) / roi_radius;
      ad::Var Y = (oyv + uyv * tv) / roi_radius;
      ad::Var g = detail::zernike_z_t(coeff, X, Y) - (ozv + uzv * tv);
      ad::Var gp = detail::zernike_dzdX_t(coeff, X, Y) * uxv / roi_radius +
                   detail::zernike_dzdY_t(coeff, X, Y) * uyv / roi_radius - uzv;
      ad::Var step = g / gp;
      tv = tv - step;
      if (step.val().cwiseAbs().maxCoeff() < cfg.tol) break;
    }
  }

  ad::Var qx = oxv + uxv * tv, qy = oyv + uyv * tv, qz = ozv + uzv * tv;
  ad::Var X = qx / roi_radius, Y = qy / roi_radius;
  ad::Var fx = detail::zernike_dzdX_t(coeff, X, Y) / roi_radius;
  ad::Var fy = detail::zernike_dzdY_t(coeff, X, Y) / roi_radius;
  // raw normal (fx, fy, -1), per-ray orientation against u fixed from values
  ad::Var norm = ad::sqrt(fx * fx + fy * fy + 1.0);
  Eigen::VectorXd orient(n);
  for (long k = 0; k < n; ++k) {
    double dotru = fx.val()(k, 0) * ux(k) + fy.val()(k, 0) * uy(k) - uz(k);
    orient(k) = dotru > 0 ? -1.0 : 1.0;
  }
  ad::Var ov = ad::Var::leaf(t, orient, false);
  ad::Var nx = ov * fx / norm, ny = ov * fy / norm, nz = ov * (-1.0) / norm;
  ad::Var d = uxv * nx + uyv * ny + uzv * nz;
  ad::Var rx = uxv - 2.0 * d * nx, ry = uyv - 2.0 * d * ny, rz = uzv - 2.0 * d * nz;

  ad::Var tp = (ad::Var::scalar(t, plane_z) - qz) / rz;
  ad::Var hx = qx + rx * tp, hy = qy + ry * tp;
  ad::Var cx = ad::mean(hx), cy = ad::mean(hy);
  ad::Var dx = hx - cx, dy = hy - cy;
  ad::Var msq = ad::mean(dx * dx + dy * dy);
  ad::Var loss = ad::sqrt(msq) * optics::kMmToNm;
  return {loss, n, flagged};
}

}  // namespace vf::rt
