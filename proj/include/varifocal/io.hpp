#pragma once

// Small shared I/O helpers: deterministic number formatting, FNV-1a hashing
// for artifact fingerprints, and CSV/SVG emitters for spot diagrams.

#include <Eigen/Dense>

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace vf::io {

inline std::string fmt_g17(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string fmt_g(double v, int digits = 6) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.*g", digits, v);
  return buf;
}

inline std::uint64_t fnv1a(const std::string& data) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : data) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline void write_file(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open file for writing: " + path);
  f << content;
}

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open file: " + path);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

// Spot diagram as CSV: one "x,y" row per ray plus a footer with the RMS.
inline std::string spot_csv(const Eigen::Matrix<double, Eigen::Dynamic, 2>& hits,
                            double spot_rms_nm, int n_flagged) {
  std::ostringstream os;
  os << "x_mm,y_mm\n";
  for (long i = 0; i < hits.rows(); ++i)
    os << fmt_g17(hits(i, 0)) << "," << fmt_g17(hits(i, 1)) << "\n";
  os << "# spot_rms_nm=" << fmt_g17(spot_rms_nm) << " flagged=" << n_flagged << "\n";
  return os.str();
}

// Deterministic scatter SVG of detector-plane hits.
inline std::string spot_svg(const Eigen::Matrix<double, Eigen::Dynamic, 2>& hits,
                            const std::string& title) {
  const int W = 480, H = 480, margin = 40;
  double lo_x = 0, hi_x = 0, lo_y = 0, hi_y = 0;
  if (hits.rows() > 0) {
    lo_x = hits.col(0).minCoeff();
    hi_x = hits.col(0).maxCoeff();
    lo_y = hits.col(1).minCoeff();
    hi_y = hits.col(1).maxCoeff();
  }
  double span = std::max({hi_x - lo_x, hi_y - lo_y, 1e-9});
  double cx = 0.5 * (lo_x + hi_x), cy = 0.5 * (lo_y + hi_y);
  auto px = [&](double x) { return margin + (x - cx + span / 2) / span * (W - 2 * margin); };
  auto py = [&](double y) { return H - margin - (y - cy + span / 2) / span * (H - 2 * margin); };
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
     << "\" viewBox=\"0 0 " << W << " " << H << "\">\n";
  os << "<title>" << title << "</title>\n";
  os << "<rect width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n";
  os << "<text x=\"" << margin << "\" y=\"" << margin / 2 + 6
     << "\" font-family=\"monospace\" font-size=\"12\">" << title << "</text>\n";
  for (long i = 0; i < hits.rows(); ++i)
    os << "<circle cx=\"" << fmt_g(px(hits(i, 0)), 8) << "\" cy=\"" << fmt_g(py(hits(i, 1)), 8)
       << "\" r=\"1.5\" fill=\"#1f5fbf\" fill-opacity=\"0.6\"/>\n";
  os << "</svg>\n";
  return os.str();
}

}  // namespace vf::io
