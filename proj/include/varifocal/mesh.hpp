#pragma once

// Deterministic generation of the eyepiece-shaped triangulated domain:
// a closed boundary built from two mirrored circular arcs joined by blend
// arcs, boundary nodes at equal arc length, a seeded blue-noise interior,
// Delaunay triangulation, and graph edge augmentation from central nodes
// to the boundary anchors. Positions are in mm with z = 0.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace vf::mesh {

class MeshError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Lens-eye silhouette: the intersection of two discs of radius R centered at
// (0, +-c), with the sharp corners rounded by blend arcs of radius
// blend_radius. half_width == half_height degenerates to a circle.
struct EyepieceShape {
  double half_width = 25.0;   // mm
  double half_height = 15.0;  // mm
  double blend_radius = 5.0;  // mm
};

namespace detail {

struct ArcSegment {
  Eigen::Vector2d center;
  double radius;
  double theta0;  // CCW
  double theta1;
  double length() const { return radius * (theta1 - theta0); }
  Eigen::Vector2d at(double s) const {  // s in [0, length]
    double th = theta0 + s / radius;
    return center + radius * Eigen::Vector2d(std::cos(th), std::sin(th));
  }
};

struct BoundaryCurve {
  std::array<ArcSegment, 4> segments;  // right blend, top, left blend, bottom
  double big_radius;                   // R
  double offset;                       // c
  double blend_radius;
  double total_length;

  Eigen::Vector2d at(double s) const {
    s = std::fmod(s, total_length);
    if (s < 0) s += total_length;
    for (const auto& seg : segments) {
      if (s <= seg.length() + 1e-12) return seg.at(std::min(s, seg.length()));
      s -= seg.length();
    }
    return segments[3].at(segments[3].length());
  }

  bool inside(const Eigen::Vector2d& p, double margin = 0.0) const {
    const Eigen::Vector2d c1(0, -offset), c2(0, offset);
    bool in_vesica = (p - c1).norm() <= big_radius - margin &&
                     (p - c2).norm() <= big_radius - margin;
    if (in_vesica) return true;
    for (int i : {0, 2}) {
      if ((p - segments[static_cast<std::size_t>(i)].center).norm() <= blend_radius - margin)
        return true;
    }
    return false;
  }
};

inline BoundaryCurve make_boundary(const EyepieceShape& sh) {
  const double w = sh.half_width, h = sh.half_height, rho = sh.blend_radius;
  if (w <= 0 || h <= 0 || rho <= 0)
    throw MeshError("eyepiece shape: dimensions must be positive");
  if (w < h)
    throw MeshError("eyepiece shape: half_width must be >= half_height");
  if (rho >= h)
    throw MeshError("eyepiece shape: blend radius must be smaller than half_height");
  const double R = 0.5 * (h + w * w / h);
  const double c = 0.5 * (w * w / h - h);
  if ((R - rho) * (R - rho) < c * c)
    throw MeshError("eyepiece shape: blend radius too large (self-intersecting boundary)");
  const double xb = std::sqrt((R - rho) * (R - rho) - c * c);
  const double alpha = std::atan2(c, xb);
  BoundaryCurve b;
  b.big_radius = R;
  b.offset = c;
  b.blend_radius = rho;
  b.segments[0] = {Eigen::Vector2d(xb, 0), rho, -alpha, alpha};
  b.segments[1] = {Eigen::Vector2d(0, -c), R, alpha, M_PI - alpha};
  b.segments[2] = {Eigen::Vector2d(-xb, 0), rho, M_PI - alpha, M_PI + alpha};
  b.segments[3] = {Eigen::Vector2d(0, c), R, M_PI + alpha, 2.0 * M_PI - alpha};
  b.total_length = 0;
  for (const auto& s : b.segments) b.total_length += s.length();
  return b;
}

// Bowyer-Watson Delaunay triangulation; input points must be distinct.
inline std::vector<std::array<int, 3>> delaunay(
    const std::vector<Eigen::Vector2d>& pts) {
  struct Tri {
    int a, b, c;
    Eigen::Vector2d cc;
    double r2;
    bool alive = true;
  };
  const int n = static_cast<int>(pts.size());
  // super-triangle
  Eigen::Vector2d lo = pts[0], hi = pts[0];
  for (const auto& p : pts) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  double d = (hi - lo).norm() * 10.0 + 1.0;
  Eigen::Vector2d mid = 0.5 * (lo + hi);
  std::vector<Eigen::Vector2d> all = pts;
  all.push_back(mid + Eigen::Vector2d(-d, -d));
  all.push_back(mid + Eigen::Vector2d(d, -d));
  all.push_back(mid + Eigen::Vector2d(0, d));

  auto circum = [&](int a, int b, int c, Eigen::Vector2d* cc, double* r2) {
    const Eigen::Vector2d &A = all[static_cast<std::size_t>(a)], &B = all[static_cast<std::size_t>(b)],
                          &C = all[static_cast<std::size_t>(c)];
    double det = 2.0 * ((B - A).x() * (C - A).y() - (B - A).y() * (C - A).x());
    if (std::abs(det) < 1e-14) {
      *r2 = -1;
      return;
    }
    double b2 = (B - A).squaredNorm(), c2 = (C - A).squaredNorm();
    double ux = ((C - A).y() * b2 - (B - A).y() * c2) / det;
    double uy = ((B - A).x() * c2 - (C - A).x() * b2) / det;
    *cc = A + Eigen::Vector2d(ux, uy);
    *r2 = Eigen::Vector2d(ux, uy).squaredNorm();
  };

  std::vector<Tri> tris;
  {
    Tri t{n, n + 1, n + 2, {}, 0};
    circum(t.a, t.b, t.c, &t.cc, &t.r2);
    tris.push_back(t);
  }
  for (int ip = 0; ip < n; ++ip) {
    const Eigen::Vector2d& p = all[static_cast<std::size_t>(ip)];
    std::vector<std::array<int, 2>> poly;
    for (auto& t : tris) {
      if (!t.alive) continue;
      if ((p - t.cc).squaredNorm() <= t.r2 * (1.0 + 1e-12)) {
        t.alive = false;
        poly.push_back({t.a, t.b});
        poly.push_back({t.b, t.c});
        poly.push_back({t.c, t.a});
      }
    }
    // boundary of the cavity: edges appearing exactly once (ignoring order)
    std::vector<std::array<int, 2>> boundary;
    for (std::size_t i = 0; i < poly.size(); ++i) {
      bool shared = false;
      for (std::size_t j = 0; j < poly.size(); ++j) {
        if (i == j) continue;
        if ((poly[i][0] == poly[j][1] && poly[i][1] == poly[j][0]) ||
            (poly[i][0] == poly[j][0] && poly[i][1] == poly[j][1])) {
          shared = true;
          break;
        }
      }
      if (!shared) boundary.push_back(poly[i]);
    }
    for (const auto& e : boundary) {
      Tri t{e[0], e[1], ip, {}, 0};
      circum(t.a, t.b, t.c, &t.cc, &t.r2);
      if (t.r2 < 0) continue;  // collinear, skip
      tris.push_back(t);
    }
    // compact occasionally to keep the scan cheap
    if (tris.size() > 4096) {
      std::vector<Tri> keep;
      keep.reserve(tris.size());
      for (const auto& t : tris)
        if (t.alive) keep.push_back(t);
      tris.swap(keep);
    }
  }
  std::vector<std::array<int, 3>> out;
  for (const auto& t : tris) {
    if (!t.alive) continue;
    if (t.a >= n || t.b >= n || t.c >= n) continue;  // touches super-triangle
    std::array<int, 3> tri{t.a, t.b, t.c};
    std::sort(tri.begin(), tri.end());
    out.push_back(tri);
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace detail

struct Mesh {
  Eigen::Matrix<double, Eigen::Dynamic, 3> node_positions;  // z = 0
  std::vector<std::array<int, 3>> triangles;
  std::vector<std::pair<int, int>> edges;  // i < j, each pair once
  std::vector<int> boundary_node_ids;      // perimeter order
  std::vector<int> anchor_node_ids;        // subset of boundary nodes
  EyepieceShape shape;
  int target_node_count = 0;
  unsigned seed = 0;

  long n_nodes() const { return node_positions.rows(); }
  long n_edges() const { return static_cast<long>(edges.size()); }

  Eigen::Vector2d centroid() const {
    return node_positions.leftCols<2>().colwise().mean();
  }
};

struct AugmentedMesh {
  Mesh base;
  std::vector<std::pair<int, int>> augmented_edges;  // (central node, anchor), i<j
  Eigen::Vector2d equivalent_center{0, 0};
  double augmentation_radius = 0;
};

inline constexpr int kDefaultBoundaryNodes = 102;
inline constexpr int kDefaultAnchors = 16;

// Deterministic mesh: boundary nodes at equal arc length, seeded blue-noise
// interior, Delaunay triangulation.
inline Mesh generate_eyepiece_mesh(const EyepieceShape& shape, int target_node_count,
                                   unsigned seed, int n_boundary = kDefaultBoundaryNodes,
                                   int n_anchors = kDefaultAnchors) {
  if (target_node_count < n_boundary + 3)
    throw MeshError("generate_eyepiece_mesh: target_node_count must be at least " +
                    std::to_string(n_boundary + 3));
  detail::BoundaryCurve curve = detail::make_boundary(shape);

  std::vector<Eigen::Vector2d> pts;
  pts.reserve(static_cast<std::size_t>(target_node_count));
  for (int i = 0; i < n_boundary; ++i)
    pts.push_back(curve.at(curve.total_length * i / n_boundary));

  // interior: dart throwing with a spacing target from the domain area
  const int n_interior = target_node_count - n_boundary;
  double area = 0;  // shoelace over a dense boundary polyline
  {
    const int m = 4096;
    Eigen::Vector2d prev = curve.at(0);
    for (int i = 1; i <= m; ++i) {
      Eigen::Vector2d cur = curve.at(curve.total_length * i / m);
      area += prev.x() * cur.y() - cur.x() * prev.y();
      prev = cur;
    }
    area = 0.5 * std::abs(area);
  }
  double dmin = 0.82 * std::sqrt(2.0 * area / (std::sqrt(3.0) * std::max(n_interior, 1)));
  double boundary_gap = curve.total_length / n_boundary;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> ux(-shape.half_width, shape.half_width);
  std::uniform_real_distribution<double> uy(-shape.half_height, shape.half_height);
  std::vector<Eigen::Vector2d> interior;
  long attempts = 0;
  const long attempts_per_round = 4000L * std::max(n_interior, 1);
  while (static_cast<int>(interior.size()) < n_interior) {
    Eigen::Vector2d p(ux(rng), uy(rng));
    ++attempts;
    if (attempts > attempts_per_round) {
      dmin *= 0.92;  // relax spacing and keep going
      attempts = 0;
      if (dmin < 1e-6) throw MeshError("generate_eyepiece_mesh: interior sampling stalled");
      continue;
    }
    if (!curve.inside(p, 0.7 * std::min(dmin, boundary_gap))) continue;
    bool ok = true;
    for (const auto& q : interior) {
      if ((p - q).squaredNorm() < dmin * dmin) {
        ok = false;
        break;
      }
    }
    if (ok) {
      for (int i = 0; i < n_boundary; ++i) {
        if ((p - pts[static_cast<std::size_t>(i)]).squaredNorm() <
            0.49 * dmin * dmin) {
          ok = false;
          break;
        }
      }
    }
    if (ok) interior.push_back(p);
  }
  pts.insert(pts.end(), interior.begin(), interior.end());

  Mesh m;
  m.shape = shape;
  m.seed = seed;
  m.target_node_count = target_node_count;
  m.node_positions.resize(static_cast<long>(pts.size()), 3);
  for (long i = 0; i < m.node_positions.rows(); ++i)
    m.node_positions.row(i) << pts[static_cast<std::size_t>(i)].x(),
        pts[static_cast<std::size_t>(i)].y(), 0.0;
  m.triangles = detail::delaunay(pts);
  if (m.triangles.empty()) throw MeshError("generate_eyepiece_mesh: triangulation failed");

  std::set<std::pair<int, int>> es;
  for (const auto& t : m.triangles) {
    es.insert({std::min(t[0], t[1]), std::max(t[0], t[1])});
    es.insert({std::min(t[1], t[2]), std::max(t[1], t[2])});
    es.insert({std::min(t[0], t[2]), std::max(t[0], t[2])});
  }
  m.edges.assign(es.begin(), es.end());

  m.boundary_node_ids.resize(static_cast<std::size_t>(n_boundary));
  for (int i = 0; i < n_boundary; ++i) m.boundary_node_ids[static_cast<std::size_t>(i)] = i;
  for (int i = 0; i < n_anchors; ++i) {
    int idx = static_cast<int>(std::lround(static_cast<double>(i) * n_boundary / n_anchors)) %
              n_boundary;
    m.anchor_node_ids.push_back(idx);
  }
  return m;
}

// Deformation evaluator signature shared with the pseudo-FEM oracle:
// (mesh, v1, boundary stiffness vector) -> per-node dz.
using DeformationOracle =
    std::function<Eigen::VectorXd(const Mesh&, double, const Eigen::VectorXd&)>;

// Location of maximum |dz| at v1 = 0.5 with uniform mid-range stiffness.
// Ties break to the lowest node index.
inline Eigen::Vector2d equivalent_center(const Mesh& m, const DeformationOracle& oracle,
                                         double w_lo = 100.0, double w_hi = 200000.0) {
  double w_mid = std::pow(10.0, 0.5 * (std::log10(w_lo) + std::log10(w_hi)));
  Eigen::VectorXd W =
      Eigen::VectorXd::Constant(static_cast<long>(m.boundary_node_ids.size()), w_mid);
  Eigen::VectorXd dz = oracle(m, 0.5, W);
  long best = 0;
  double best_v = -1;
  for (long i = 0; i < dz.size(); ++i) {
    if (std::abs(dz(i)) > best_v) {
      best_v = std::abs(dz(i));
      best = i;
    }
  }
  return m.node_positions.row(best).head<2>();
}

// Connect every node within `radius` of `center` to each anchor, skipping
// pairs already present as base edges.
inline AugmentedMesh augment_edges(const Mesh& m, const Eigen::Vector2d& center,
                                   double radius, const std::vector<int>& anchors) {
  if (radius < 0) throw MeshError("augment_edges: radius must be non-negative");
  for (int a : anchors) {
    if (std::find(m.boundary_node_ids.begin(), m.boundary_node_ids.end(), a) ==
        m.boundary_node_ids.end())
      throw MeshError("augment_edges: anchor " + std::to_string(a) + " is not a boundary node");
  }
  std::set<std::pair<int, int>> base(m.edges.begin(), m.edges.end());
  std::set<std::pair<int, int>> aug;
  for (long i = 0; i < m.n_nodes(); ++i) {
    Eigen::Vector2d p = m.node_positions.row(i).head<2>();
    if ((p - center).norm() > radius) continue;
    for (int a : anchors) {
      if (static_cast<int>(i) == a) continue;
      std::pair<int, int> e{std::min(static_cast<int>(i), a), std::max(static_cast<int>(i), a)};
      if (base.count(e)) continue;
      aug.insert(e);
    }
  }
  AugmentedMesh out;
  out.base = m;
  out.augmented_edges.assign(aug.begin(), aug.end());
  out.equivalent_center = center;
  out.augmentation_radius = radius;
  return out;
}

// ---- serialization ----------------------------------------------------------

namespace detail {

inline std::string fmt_g17(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail

inline constexpr const char* kMeshFormatVersion = "varifocal-mesh v1";

inline std::string serialize_mesh(const AugmentedMesh& am) {
  const Mesh& m = am.base;
  std::ostringstream os;
  os << kMeshFormatVersion << "\n";
  os << "shape " << detail::fmt_g17(m.shape.half_width) << " "
     << detail::fmt_g17(m.shape.half_height) << " "
     << detail::fmt_g17(m.shape.blend_radius) << "\n";
  os << "seed " << m.seed << " target " << m.target_node_count << "\n";
  os << "nodes " << m.n_nodes() << "\n";
  for (long i = 0; i < m.n_nodes(); ++i)
    os << detail::fmt_g17(m.node_positions(i, 0)) << " "
       << detail::fmt_g17(m.node_positions(i, 1)) << " "
       << detail::fmt_g17(m.node_positions(i, 2)) << "\n";
  os << "triangles " << m.triangles.size() << "\n";
  for (const auto& t : m.triangles) os << t[0] << " " << t[1] << " " << t[2] << "\n";
  os << "edges " << m.edges.size() << "\n";
  for (const auto& e : m.edges) os << e.first << " " << e.second << "\n";
  os << "boundary " << m.boundary_node_ids.size() << "\n";
  for (std::size_t i = 0; i < m.boundary_node_ids.size(); ++i)
    os << m.boundary_node_ids[i] << (i + 1 == m.boundary_node_ids.size() ? "\n" : " ");
  os << "anchors " << m.anchor_node_ids.size() << "\n";
  for (std::size_t i = 0; i < m.anchor_node_ids.size(); ++i)
    os << m.anchor_node_ids[i] << (i + 1 == m.anchor_node_ids.size() ? "\n" : " ");
  os << "augmentation " << am.augmented_edges.size() << " "
     << detail::fmt_g17(am.equivalent_center.x()) << " "
     << detail::fmt_g17(am.equivalent_center.y()) << " "
     << detail::fmt_g17(am.augmentation_radius) << "\n";
  for (const auto& e : am.augmented_edges) os << e.first << " " << e.second << "\n";
  return os.str();
}

inline AugmentedMesh deserialize_mesh(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kMeshFormatVersion)
    throw MeshError("mesh file: unsupported format header '" + line + "'");
  AugmentedMesh am;
  Mesh& m = am.base;
  std::string tok;
  in >> tok >> m.shape.half_width >> m.shape.half_height >> m.shape.blend_radius;
  if (tok != "shape") throw MeshError("mesh file: expected 'shape'");
  in >> tok >> m.seed;
  if (tok != "seed") throw MeshError("mesh file: expected 'seed'");
  in >> tok >> m.target_node_count;
  long n;
  in >> tok >> n;
  if (tok != "nodes") throw MeshError("mesh file: expected 'nodes'");
  m.node_positions.resize(n, 3);
  for (long i = 0; i < n; ++i)
    in >> m.node_positions(i, 0) >> m.node_positions(i, 1) >> m.node_positions(i, 2);
  std::size_t cnt;
  in >> tok >> cnt;
  if (tok != "triangles") throw MeshError("mesh file: expected 'triangles'");
  m.triangles.resize(cnt);
  for (auto& t : m.triangles) in >> t[0] >> t[1] >> t[2];
  in >> tok >> cnt;
  if (tok != "edges") throw MeshError("mesh file: expected 'edges'");
  m.edges.resize(cnt);
  for (auto& e : m.edges) in >> e.first >> e.second;
  in >> tok >> cnt;
  if (tok != "boundary") throw MeshError("mesh file: expected 'boundary'");
  m.boundary_node_ids.resize(cnt);
  for (auto& b : m.boundary_node_ids) in >> b;
  in >> tok >> cnt;
  if (tok != "anchors") throw MeshError("mesh file: expected 'anchors'");
  m.anchor_node_ids.resize(cnt);
  for (auto& a : m.anchor_node_ids) in >> a;
  in >> tok >> cnt >> am.equivalent_center.x() >> am.equivalent_center.y() >>
      am.augmentation_radius;
  if (tok != "augmentation") throw MeshError("mesh file: expected 'augmentation'");
  am.augmented_edges.resize(cnt);
  for (auto& e : am.augmented_edges) in >> e.first >> e.second;
  if (!in) throw MeshError("mesh file: truncated");
  return am;
}

inline void save_mesh(const std::string& path, const AugmentedMesh& am) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw MeshError("cannot open mesh file for writing: " + path);
  f << serialize_mesh(am);
}

inline AugmentedMesh load_mesh(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw MeshError("cannot open mesh file: " + path);
  return deserialize_mesh(f);
}

}  // namespace vf::mesh
