#pragma once

// Synthetic deformation oracle: a membrane-like sparse SPD solve mapping
// (mesh, voltage multiplier, boundary stiffness) to a per-node z-displacement
// field. It stands in for the finite-element tool the design loop would call
// in production: deterministic, cheap, and sensitive to every design
// variable, with an amplitude calibrated so the mid-range design at
// v1 = 0.5 best-fits a sphere of radius 1180 mm (590 mm focal length).

#include "varifocal/io.hpp"
#include "varifocal/mesh.hpp"
#include "varifocal/optics.hpp"

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace vf::fem {

inline constexpr double kStiffnessLo = 100.0;     // N/m
inline constexpr double kStiffnessHi = 200000.0;  // N/m

class SolverError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DesignVariables {
  double v1 = 0.5;     // voltage multiplier, (0, 1]
  Eigen::VectorXd W;   // boundary stiffness, N/m, one per boundary node

  void validate(long n_boundary) const {
    if (!(v1 > 0.0 && v1 <= 1.0))
      throw std::invalid_argument("design: v1 must be in (0, 1], got " + std::to_string(v1));
    if (W.size() != n_boundary)
      throw std::invalid_argument("design: stiffness vector length " +
                                  std::to_string(W.size()) + " != boundary count " +
                                  std::to_string(n_boundary));
    for (long i = 0; i < W.size(); ++i)
      if (!(W(i) >= kStiffnessLo && W(i) <= kStiffnessHi))
        throw std::invalid_argument("design: stiffness[" + std::to_string(i) +
                                    "] out of [100, 200000] N/m");
  }
};

struct Calibration {
  double load_amplitude = 1.0;
  double membrane_constant = 1.0;   // scales the graph Laplacian
  double spring_scale = 1e-4;       // converts N/m into the dimensionless system
  double load_sigma = 0.0;          // mm; 0 = 80% of the mean boundary radius
  Eigen::Vector2d load_center{0, 0};
  double target_radius = 1180.0;    // mm, fitted sphere radius at the anchor point
  double roi_radius = 10.0;         // mm, node set used for the calibration fit
  std::string version_tag = "pseudofem-v1";
};

class PseudoFem {
 public:
  PseudoFem(mesh::Mesh m, Calibration cal) : mesh_(std::move(m)), cal_(std::move(cal)) {
    build();
  }

  const mesh::Mesh& mesh() const { return mesh_; }
  const Calibration& calibration() const { return cal_; }
  long oracle_calls() const { return calls_; }
  void reset_call_count() { calls_ = 0; }

  // Nodes within the calibration ROI of the load center.
  const std::vector<int>& roi_nodes() const { return roi_nodes_; }

  // Solve (kappa*L + B(W)) dz = v1 * amplitude * f. Deterministic; dz is
  // linear in v1 by construction. Extended domain: v1 = 0 gives a zero field.
  Eigen::VectorXd simulate(const DesignVariables& d) const {
    if (d.W.size() != static_cast<long>(mesh_.boundary_node_ids.size()))
      throw std::invalid_argument("simulate: stiffness vector length mismatch");
    ++calls_;
    const long n = mesh_.n_nodes();
    Eigen::SparseMatrix<double> K = laplacian_;
    K *= cal_.membrane_constant;
    if (d.W.maxCoeff() <= 0.0)
      throw SolverError("simulate: singular system (all boundary stiffness zero)");
    for (std::size_t b = 0; b < mesh_.boundary_node_ids.size(); ++b) {
      int i = mesh_.boundary_node_ids[b];
      K.coeffRef(i, i) += cal_.spring_scale * d.W(static_cast<long>(b));
    }
    Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> solver(K);
    if (solver.info() != Eigen::Success)
      throw SolverError("simulate: factorization failed (singular or indefinite system)");
    Eigen::VectorXd base = solver.solve(load_);
    if (solver.info() != Eigen::Success) throw SolverError("simulate: solve failed");
    Eigen::VectorXd dz = (d.v1 * cal_.load_amplitude) * base;
    double cap = 5.0;  // mm
    if (dz.cwiseAbs().maxCoeff() > cap)
      throw SolverError("simulate: displacement exceeds the physical cap of 5 mm");
    return dz;
  }

  // Deformed surface points over the ROI node set.
  optics::PointSet roi_points(const Eigen::VectorXd& dz) const {
    optics::PointSet pts(static_cast<long>(roi_nodes_.size()), 3);
    for (std::size_t k = 0; k < roi_nodes_.size(); ++k) {
      int i = roi_nodes_[k];
      pts.row(static_cast<long>(k)) << mesh_.node_positions(i, 0),
          mesh_.node_positions(i, 1), dz(i);
    }
    return pts;
  }

 private:
  void build() {
    const long n = mesh_.n_nodes();
    // standard linear-element (cotangent-weighted) membrane stiffness with a
    // lumped area per node; a consistent discretization keeps the deformation
    // smooth at the node scale, which the sphere-fit objective depends on
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(mesh_.triangles.size() * 9);
    Eigen::VectorXd diag = Eigen::VectorXd::Zero(n);
    Eigen::VectorXd area = Eigen::VectorXd::Zero(n);
    for (const auto& tri : mesh_.triangles) {
      const int v[3] = {tri[0], tri[1], tri[2]};
      Eigen::Vector2d p[3];
      for (int i = 0; i < 3; ++i) p[i] = mesh_.node_positions.row(v[i]).head<2>();
      double twice_a = (p[1] - p[0]).x() * (p[2] - p[0]).y() -
                       (p[1] - p[0]).y() * (p[2] - p[0]).x();
      double tri_area = 0.5 * std::abs(twice_a);
      if (tri_area <= 0) throw SolverError("pseudofem: degenerate triangle in mesh");
      for (int i = 0; i < 3; ++i) {
        area(v[i]) += tri_area / 3.0;
        int a = v[(i + 1) % 3], b = v[(i + 2) % 3];
        Eigen::Vector2d e1 = p[(i + 1) % 3] - p[i], e2 = p[(i + 2) % 3] - p[i];
        double w = 0.25 * e1.dot(e2) / tri_area;  // half-cotangent of the opposite angle
        trip.emplace_back(a, b, -w);
        trip.emplace_back(b, a, -w);
        diag(a) += w;
        diag(b) += w;
      }
    }
    for (long i = 0; i < n; ++i) trip.emplace_back(i, i, diag(i));
    laplacian_.resize(n, n);
    laplacian_.setFromTriplets(trip.begin(), trip.end());

    if (cal_.load_sigma <= 0) {
      double mean_r = 0;
      for (int b : mesh_.boundary_node_ids)
        mean_r += (mesh_.node_positions.row(b).head<2>().transpose() - cal_.load_center).norm();
      mean_r /= static_cast<double>(mesh_.boundary_node_ids.size());
      cal_.load_sigma = 0.8 * mean_r;
    }
    load_.resize(n);
    for (long i = 0; i < n; ++i) {
      double r2 =
          (mesh_.node_positions.row(i).head<2>().transpose() - cal_.load_center).squaredNorm();
      load_(i) = area(i) * std::exp(-r2 / (2.0 * cal_.load_sigma * cal_.load_sigma));
    }
    roi_nodes_.clear();
    for (long i = 0; i < n; ++i) {
      double r = (mesh_.node_positions.row(i).head<2>().transpose() - cal_.load_center).norm();
      if (r <= cal_.roi_radius) roi_nodes_.push_back(static_cast<int>(i));
    }
    if (roi_nodes_.size() < 6)
      throw SolverError("pseudofem: fewer than 6 nodes inside the ROI radius");
  }

  mesh::Mesh mesh_;
  Calibration cal_;
  Eigen::SparseMatrix<double> laplacian_;
  Eigen::VectorXd load_;
  std::vector<int> roi_nodes_;
  mutable long calls_ = 0;
};

// Uniform mid-range stiffness (log midpoint of the bounds).
inline Eigen::VectorXd uniform_midrange_stiffness(long n) {
  double w = std::pow(10.0, 0.5 * (std::log10(kStiffnessLo) + std::log10(kStiffnessHi)));
  return Eigen::VectorXd::Constant(n, w);
}

// Fitted sphere radius of the ROI deformation for a given oracle and design.
inline double fitted_radius(const PseudoFem& fem, const DesignVariables& d) {
  Eigen::VectorXd dz = fem.simulate(d);
  return optics::fit_sphere(fem.roi_points(dz)).r;
}

// Choose the load amplitude so that the mid-range design at v1 = 0.5
// best-fits a sphere of radius `target_radius`. Deterministic fixed-point
// iteration (radius scales essentially as 1/amplitude in the small-sag
// regime).
inline PseudoFem make_calibrated_oracle(const mesh::Mesh& m, Calibration cal = {}) {
  const double user_sigma = cal.load_sigma;  // keep an explicit width across rebuilds
  cal.load_center = m.centroid();
  cal.load_amplitude = 1e-3;  // shape only; keeps the provisional pass under the cap
  {
    // locate the equivalent center with the provisional centroid load
    PseudoFem provisional(m, cal);
    mesh::DeformationOracle oracle = [&](const mesh::Mesh&, double v1,
                                         const Eigen::VectorXd& W) {
      DesignVariables d;
      d.v1 = v1;
      d.W = W;
      return provisional.simulate(d);
    };
    cal.load_center = mesh::equivalent_center(m, oracle);
    cal.load_sigma = user_sigma;  // 0 = recompute the default for the final center
  }
  DesignVariables anchor;
  anchor.v1 = 0.5;
  anchor.W = uniform_midrange_stiffness(static_cast<long>(m.boundary_node_ids.size()));
  double amp = 1.0;
  for (int it = 0; it < 60; ++it) {
    cal.load_amplitude = amp;
    PseudoFem fem(m, cal);
    double r;
    try {
      r = fitted_radius(fem, anchor);
    } catch (const SolverError&) {
      amp *= 0.1;  // displacement cap tripped; retry softer
      continue;
    }
    if (std::abs(r - cal.target_radius) < 1e-3 * cal.target_radius) {
      fem.reset_call_count();
      return fem;
    }
    double next = amp * r / cal.target_radius;
    if (!(next > 0) || !std::isfinite(next))
      throw SolverError("calibrate: amplitude iteration diverged (r=" + std::to_string(r) + ")");
    amp = next;
  }
  throw SolverError("calibrate: no amplitude reached the target radius within the bracket");
}

// ---- dataset persistence ----------------------------------------------------

struct Dataset {
  std::vector<std::pair<DesignVariables, Eigen::VectorXd>> samples;
  unsigned seed = 0;
  std::string oracle_version;
  std::string mesh_hash;
};

inline std::string mesh_hash_of(const mesh::Mesh& m) {
  std::ostringstream os;
  for (long i = 0; i < m.n_nodes(); ++i)
    os << io::fmt_g17(m.node_positions(i, 0)) << " " << io::fmt_g17(m.node_positions(i, 1))
       << "\n";
  os << m.edges.size();
  return io::hex64(io::fnv1a(os.str()));
}

// One solve per design, order-stable; a failing solve aborts with its index.
inline Dataset generate_dataset(const PseudoFem& fem,
                                const std::vector<DesignVariables>& designs,
                                unsigned seed) {
  if (designs.empty()) throw std::invalid_argument("generate_dataset: empty design list");
  Dataset ds;
  ds.seed = seed;
  ds.oracle_version = fem.calibration().version_tag;
  ds.mesh_hash = mesh_hash_of(fem.mesh());
  long nb = static_cast<long>(fem.mesh().boundary_node_ids.size());
  for (std::size_t i = 0; i < designs.size(); ++i) {
    designs[i].validate(nb);
    try {
      ds.samples.emplace_back(designs[i], fem.simulate(designs[i]));
    } catch (const std::exception& e) {
      throw SolverError("generate_dataset: design " + std::to_string(i) +
                        " failed: " + e.what());
    }
  }
  return ds;
}

inline constexpr const char* kDatasetFormatVersion = "varifocal-dataset v1";

// Manifest header followed by one whitespace-separated row per sample:
// v1, the stiffness vector, then the dz vector.
inline std::string serialize_dataset(const Dataset& ds) {
  std::ostringstream os;
  os << kDatasetFormatVersion << "\n";
  os << "seed " << ds.seed << "\n";
  os << "oracle " << ds.oracle_version << "\n";
  os << "mesh_hash " << ds.mesh_hash << "\n";
  os << "count " << ds.samples.size() << "\n";
  if (!ds.samples.empty())
    os << "columns v1 w[" << ds.samples[0].first.W.size() << "] dz["
       << ds.samples[0].second.size() << "]\n";
  for (const auto& [d, dz] : ds.samples) {
    os << io::fmt_g17(d.v1);
    for (long i = 0; i < d.W.size(); ++i) os << " " << io::fmt_g17(d.W(i));
    for (long i = 0; i < dz.size(); ++i) os << " " << io::fmt_g17(dz(i));
    os << "\n";
  }
  return os.str();
}

inline Dataset deserialize_dataset(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kDatasetFormatVersion)
    throw SolverError("dataset file: unsupported format header '" + line + "'");
  Dataset ds;
  std::string tok;
  std::size_t count;
  in >> tok >> ds.seed;
  in >> tok >> ds.oracle_version;
  in >> tok >> ds.mesh_hash;
  in >> tok >> count;
  long nw = 0, nz = 0;
  in >> tok;  // "columns"
  {
    std::string v1s, ws, zs;
    in >> v1s >> ws >> zs;
    nw = std::stol(ws.substr(2));
    nz = std::stol(zs.substr(3));
  }
  for (std::size_t s = 0; s < count; ++s) {
    DesignVariables d;
    d.W.resize(nw);
    Eigen::VectorXd dz(nz);
    in >> d.v1;
    for (long i = 0; i < nw; ++i) in >> d.W(i);
    for (long i = 0; i < nz; ++i) in >> dz(i);
    if (!in) throw SolverError("dataset file: truncated at sample " + std::to_string(s));
    ds.samples.emplace_back(std::move(d), std::move(dz));
  }
  return ds;
}

inline void save_dataset(const std::string& path, const Dataset& ds) {
  io::write_file(path, serialize_dataset(ds));
}

inline Dataset load_dataset(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw SolverError("cannot open dataset file: " + path);
  return deserialize_dataset(f);
}

// ---- calibration persistence ------------------------------------------------

inline constexpr const char* kCalibrationFormatVersion = "varifocal-calibration v1";

inline std::string serialize_calibration(const Calibration& cal) {
  std::ostringstream os;
  os << kCalibrationFormatVersion << "\n";
  os << "oracle " << cal.version_tag << "\n";
  os << "load_amplitude " << io::fmt_g17(cal.load_amplitude) << "\n";
  os << "membrane_constant " << io::fmt_g17(cal.membrane_constant) << "\n";
  os << "spring_scale " << io::fmt_g17(cal.spring_scale) << "\n";
  os << "load_sigma " << io::fmt_g17(cal.load_sigma) << "\n";
  os << "load_center " << io::fmt_g17(cal.load_center.x()) << " "
     << io::fmt_g17(cal.load_center.y()) << "\n";
  os << "target_radius " << io::fmt_g17(cal.target_radius) << "\n";
  os << "roi_radius " << io::fmt_g17(cal.roi_radius) << "\n";
  return os.str();
}

inline Calibration deserialize_calibration(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kCalibrationFormatVersion)
    throw SolverError("calibration file: unsupported format header '" + line + "'");
  Calibration cal;
  std::string tok;
  in >> tok >> cal.version_tag;
  in >> tok >> cal.load_amplitude;
  in >> tok >> cal.membrane_constant;
  in >> tok >> cal.spring_scale;
  in >> tok >> cal.load_sigma;
  in >> tok >> cal.load_center.x() >> cal.load_center.y();
  in >> tok >> cal.target_radius;
  in >> tok >> cal.roi_radius;
  if (!in) throw SolverError("calibration file: truncated record");
  return cal;
}

inline void save_calibration(const std::string& path, const Calibration& cal) {
  io::write_file(path, serialize_calibration(cal));
}

inline Calibration load_calibration(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw SolverError("cannot open calibration file: " + path);
  return deserialize_calibration(f);
}

}  // namespace vf::fem
