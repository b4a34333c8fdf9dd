#pragma once

// Analytic surface machinery: the six-term Cartesian Zernike basis, sphere
// fitting by linear least squares, surface RMS against the fitted sphere,
// xy centering, and Zernike least-squares fitting. Positions are in mm;
// RMS values are reported in nm.
//
// The *_t functions build the same fits on an autodiff tape (normal
// equations + on-tape Cholesky) so gradients flow from fitted coefficients
// back to the input z values.

#include "varifocal/autodiff.hpp"
#include "varifocal/io.hpp"

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace vf::optics {

inline constexpr double kMmToNm = 1e6;

class FitError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using PointSet = Eigen::Matrix<double, Eigen::Dynamic, 3>;

struct SphereFit {
  double x0 = 0, y0 = 0, z0 = 0;  // center, mm
  double r = 0;                   // radius, mm
  double rms_nm = 0;              // residual RMS against the sphere, nm
  int branch = +1;                // sign of the sqrt branch used for z'
};

struct ZernikeSurface {
  // Coefficient order: piston, tilt-y (2y), tilt-x (2x), oblique astigmatism
  // (2*sqrt6*xy), defocus (sqrt3*(2(x^2+y^2)-1)), vertical astigmatism
  // (sqrt6*(x^2-y^2)); units mm, evaluated over x/roi_radius, y/roi_radius.
  std::array<double, 6> c{};
  double roi_radius = 1.0;
};

struct ZernikeEval {
  double z;
  double dzdx;
  double dzdy;
};

// Basis values at normalized coordinates.
inline std::array<double, 6> zernike_basis(double X, double Y) {
  const double s3 = std::sqrt(3.0), s6 = std::sqrt(6.0);
  return {1.0, 2.0 * Y, 2.0 * X, 2.0 * s6 * X * Y, s3 * (2.0 * (X * X + Y * Y) - 1.0),
          s6 * (X * X - Y * Y)};
}

inline ZernikeEval zernike_eval(const ZernikeSurface& s, double x, double y) {
  const double R = s.roi_radius;
  const double X = x / R, Y = y / R;
  const double s3 = std::sqrt(3.0), s6 = std::sqrt(6.0);
  const auto& c = s.c;
  std::array<double, 6> b = zernike_basis(X, Y);
  double z = 0;
  for (int i = 0; i < 6; ++i) z += c[i] * b[i];
  // derivatives w.r.t. the normalized coordinates
  double dzdX = 2.0 * c[2] + 2.0 * s6 * c[3] * Y + 4.0 * s3 * c[4] * X + 2.0 * s6 * c[5] * X;
  double dzdY = 2.0 * c[1] + 2.0 * s6 * c[3] * X + 4.0 * s3 * c[4] * Y - 2.0 * s6 * c[5] * Y;
  return {z, dzdX / R, dzdY / R};
}

namespace detail {

// z' for one point on the fitted sphere; returns false when the radicand is
// negative beyond rounding noise.
inline bool sphere_height(const SphereFit& f, double x, double y, int branch,
                          double* z_out) {
  double rad = f.r * f.r - (x - f.x0) * (x - f.x0) - (y - f.y0) * (y - f.y0);
  if (rad < -1e-12 * f.r * f.r) return false;
  *z_out = branch * std::sqrt(std::max(rad, 0.0)) + f.z0;
  return true;
}

}  // namespace detail

// RMS deviation (nm) of the points' z against the fitted sphere, using the
// fit's recorded sqrt branch.
inline double surface_rms(const PointSet& pts, const SphereFit& fit) {
  const long n = pts.rows();
  if (n == 0) throw FitError("surface_rms: empty point set");
  double sse = 0;
  for (long i = 0; i < n; ++i) {
    double zp;
    if (!detail::sphere_height(fit, pts(i, 0), pts(i, 1), fit.branch, &zp))
      throw vf::ad::DomainError(
          "surface_rms: point " + std::to_string(i) + " outside sphere footprint",
          static_cast<int>(i));
    double d = zp - pts(i, 2);
    sse += d * d;
  }
  return std::sqrt(sse / static_cast<double>(n)) * kMmToNm;
}

// Least-squares sphere through the points (linearized system A1*xi = b).
// The sqrt branch for z' is chosen to minimize the total squared residual.
inline SphereFit fit_sphere(const PointSet& pts) {
  const long n = pts.rows();
  if (n < 4) throw FitError("fit_sphere: need at least 4 points");
  Eigen::MatrixXd A(n, 4);
  Eigen::VectorXd b(n);
  for (long i = 0; i < n; ++i) {
    A(i, 0) = 2.0 * pts(i, 0);
    A(i, 1) = 2.0 * pts(i, 1);
    A(i, 2) = 2.0 * pts(i, 2);
    A(i, 3) = 1.0;
    b(i) = pts.row(i).squaredNorm();
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(A);
  qr.setThreshold(1e-10);
  if (qr.rank() < 4) throw FitError("fit_sphere: rank-deficient system (degenerate points)");
  Eigen::Vector4d xi = qr.solve(b);
  SphereFit f;
  f.x0 = xi(0);
  f.y0 = xi(1);
  f.z0 = xi(2);
  double rsq = xi(3) + xi.head<3>().squaredNorm();
  if (rsq <= 0) throw FitError("fit_sphere: non-positive fitted radius");
  f.r = std::sqrt(rsq);

  // pick the branch with the smaller squared residual
  double sse[2] = {0, 0};
  bool ok[2] = {true, true};
  for (long i = 0; i < n; ++i) {
    for (int bi = 0; bi < 2; ++bi) {
      int branch = bi == 0 ? +1 : -1;
      double zp;
      if (!detail::sphere_height(f, pts(i, 0), pts(i, 1), branch, &zp)) {
        ok[bi] = false;
        continue;
      }
      double d = zp - pts(i, 2);
      sse[bi] += d * d;
    }
  }
  if (!ok[0] && !ok[1])
    throw vf::ad::DomainError("fit_sphere: points outside sphere footprint", 0);
  f.branch = (!ok[1] || (ok[0] && sse[0] <= sse[1])) ? +1 : -1;
  f.rms_nm = std::sqrt((f.branch == +1 ? sse[0] : sse[1]) / static_cast<double>(n)) * kMmToNm;
  return f;
}

// Subtract the fitted center's (x0, y0) from all points; z unchanged.
inline PointSet center_points(const PointSet& pts, const SphereFit& fit) {
  PointSet out = pts;
  out.col(0).array() -= fit.x0;
  out.col(1).array() -= fit.y0;
  return out;
}

// Least-squares Zernike coefficients over the normalized basis.
inline ZernikeSurface fit_zernike(const PointSet& pts, double roi_radius) {
  const long n = pts.rows();
  if (n < 6) throw FitError("fit_zernike: need at least 6 points");
  if (roi_radius <= 0) throw FitError("fit_zernike: roi_radius must be positive");
  Eigen::MatrixXd A(n, 6);
  for (long i = 0; i < n; ++i) {
    auto b = zernike_basis(pts(i, 0) / roi_radius, pts(i, 1) / roi_radius);
    for (int j = 0; j < 6; ++j) A(i, j) = b[j];
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(A);
  qr.setThreshold(1e-10);
  if (qr.rank() < 6) throw FitError("fit_zernike: rank-deficient basis matrix");
  Eigen::VectorXd xi = qr.solve(pts.col(2));
  ZernikeSurface s;
  for (int j = 0; j < 6; ++j) s.c[j] = xi(j);
  s.roi_radius = roi_radius;
  return s;
}

// ---- on-tape versions -------------------------------------------------------

namespace detail {

// Solve M x = rhs for a small SPD system of scalar tape nodes via Cholesky.
inline std::vector<ad::Var> chol_solve_t(std::vector<std::vector<ad::Var>>& M,
                                         std::vector<ad::Var>& rhs) {
  const int n = static_cast<int>(rhs.size());
  // factor M = L L^T in place (lower triangle)
  for (int j = 0; j < n; ++j) {
    ad::Var d = M[j][j];
    for (int k = 0; k < j; ++k) d = d - M[j][k] * M[j][k];
    M[j][j] = ad::sqrt(d);
    for (int i = j + 1; i < n; ++i) {
      ad::Var s = M[i][j];
      for (int k = 0; k < j; ++k) s = s - M[i][k] * M[j][k];
      M[i][j] = s / M[j][j];
    }
  }
  // forward substitution
  std::vector<ad::Var> y(rhs.begin(), rhs.end());
  for (int i = 0; i < n; ++i) {
    for (int k = 0; k < i; ++k) y[i] = y[i] - M[i][k] * y[k];
    y[i] = y[i] / M[i][i];
  }
  // back substitution
  for (int i = n - 1; i >= 0; --i) {
    for (int k = i + 1; k < n; ++k) y[i] = y[i] - M[k][i] * y[k];
    y[i] = y[i] / M[i][i];
  }
  return y;
}

}  // namespace detail

struct SphereFitT {
  ad::Var x0, y0, z0, r;
};

// Differentiable sphere fit: x, y are fixed positions, z is a tape node
// (N x 1). Gradients flow from (x0, y0, z0, r) back to z.
inline SphereFitT fit_sphere_t(ad::Tape& t, const Eigen::VectorXd& x,
                               const Eigen::VectorXd& y, const ad::Var& z) {
  const long n = x.size();
  if (n < 4) throw FitError("fit_sphere_t: need at least 4 points");
  ad::Var xv = ad::Var::leaf(t, x, false);
  ad::Var yv = ad::Var::leaf(t, y, false);
  ad::Var ones = ad::Var::leaf(t, Eigen::VectorXd::Ones(n), false);
  ad::Var z2 = z * z;
  ad::Var s = xv * xv + yv * yv + z2;  // |p|^2 per point

  // normal equations for A = [2x 2y 2z 1]
  auto col = [&](int i) -> ad::Var {
    switch (i) {
      case 0: return 2.0 * xv;
      case 1: return 2.0 * yv;
      case 2: return 2.0 * z;
      default: return ones;
    }
  };
  std::vector<std::vector<ad::Var>> M(4, std::vector<ad::Var>(4));
  std::vector<ad::Var> rhs(4);
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j <= i; ++j) {
      M[i][j] = ad::dot(col(i), col(j));
      M[j][i] = M[i][j];
    }
    rhs[i] = ad::dot(col(i), s);
  }
  std::vector<ad::Var> xi = detail::chol_solve_t(M, rhs);
  ad::Var r = ad::sqrt(xi[3] + xi[0] * xi[0] + xi[1] * xi[1] + xi[2] * xi[2]);
  return {xi[0], xi[1], xi[2], r};
}

// Differentiable Zernike fit over centered coordinates (x - x0, y - y0).
// Returns the six coefficients as scalar tape nodes.
inline std::array<ad::Var, 6> fit_zernike_t(ad::Tape& t, const Eigen::VectorXd& x,
                                            const Eigen::VectorXd& y, const ad::Var& x0,
                                            const ad::Var& y0, const ad::Var& z,
                                            double roi_radius) {
  const long n = x.size();
  if (n < 6) throw FitError("fit_zernike_t: need at least 6 points");
  const double s3 = std::sqrt(3.0), s6 = std::sqrt(6.0);
  ad::Var xv = ad::Var::leaf(t, x, false);
  ad::Var yv = ad::Var::leaf(t, y, false);
  ad::Var X = (xv - x0) / roi_radius;
  ad::Var Y = (yv - y0) / roi_radius;
  ad::Var X2 = X * X, Y2 = Y * Y;
  std::array<ad::Var, 6> cols = {
      ad::Var::leaf(t, Eigen::VectorXd::Ones(n), false),
      2.0 * Y,
      2.0 * X,
      (2.0 * s6) * (X * Y),
      s3 * (2.0 * (X2 + Y2) - 1.0),
      s6 * (X2 - Y2)};
  std::vector<std::vector<ad::Var>> M(6, std::vector<ad::Var>(6));
  std::vector<ad::Var> rhs(6);
  for (int i = 0; i < 6; ++i) {
    for (int j = 0; j <= i; ++j) {
      M[i][j] = ad::dot(cols[i], cols[j]);
      M[j][i] = M[i][j];
    }
    rhs[i] = ad::dot(cols[i], z);
  }
  std::vector<ad::Var> xi = detail::chol_solve_t(M, rhs);
  return {xi[0], xi[1], xi[2], xi[3], xi[4], xi[5]};
}


// ---- surface persistence ----------------------------------------------------

inline constexpr const char* kSurfaceFormatVersion = "varifocal-surface v1";

inline std::string serialize_surface(const ZernikeSurface& s) {
  std::ostringstream os;
  os << kSurfaceFormatVersion << "\n";
  os << "roi_radius " << io::fmt_g17(s.roi_radius) << "\n";
  static const char* names[6] = {"piston", "tilt_y", "tilt_x", "astig_oblique",
                                 "defocus", "astig_vertical"};
  for (int i = 0; i < 6; ++i)
    os << names[i] << " " << io::fmt_g17(s.c[static_cast<std::size_t>(i)]) << "\n";
  return os.str();
}

inline ZernikeSurface deserialize_surface(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kSurfaceFormatVersion)
    throw FitError("surface file: unsupported format header '" + line + "'");
  ZernikeSurface s;
  std::string tok;
  in >> tok >> s.roi_radius;
  if (tok != "roi_radius") throw FitError("surface file: expected roi_radius, got '" + tok + "'");
  static const char* names[6] = {"piston", "tilt_y", "tilt_x", "astig_oblique",
                                 "defocus", "astig_vertical"};
  for (int i = 0; i < 6; ++i) {
    in >> tok >> s.c[static_cast<std::size_t>(i)];
    if (tok != names[i])
      throw FitError("surface file: expected coefficient '" + std::string(names[i]) +
                     "', got '" + tok + "'");
  }
  if (!in) throw FitError("surface file: truncated record");
  if (!(s.roi_radius > 0)) throw FitError("surface file: roi_radius must be positive");
  return s;
}

inline void save_surface(const std::string& path, const ZernikeSurface& s) {
  io::write_file(path, serialize_surface(s));
}

inline ZernikeSurface load_surface(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FitError("cannot open surface file: " + path);
  return deserialize_surface(f);
}

}  // namespace vf::optics
