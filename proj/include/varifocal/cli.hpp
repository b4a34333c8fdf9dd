#pragma once

// Command-line entry points: schema-validated JSON configuration, subcommands
// wiring mesh generation, oracle calibration, dataset generation, surrogate
// training, the six-step optimization pipeline, spot-diagram tracing, and
// report emission into reproducible run directories.
//
// Exit codes: 0 success (converged where applicable), 1 error,
// 2 ran-but-not-converged.

#include "varifocal/hybridopt.hpp"
#include "varifocal/io.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace vf::cli {

using nlohmann::json;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---- configuration ----------------------------------------------------------

struct RunConfig {
  // mesh
  double half_width = 25.0, half_height = 15.0, blend_radius = 5.0;
  int nodes = 651, boundary = 102;
  unsigned mesh_seed = 0;
  double augment_radius = 10.0;
  // oracle
  double target_radius = 1180.0, roi_radius = 10.0, load_sigma = 0.0;
  double membrane_constant = 1.0, spring_scale = 1e-4;
  // surrogate
  int message_steps = 6, latent = 32;
  unsigned surrogate_seed = 0;
  int iterations = 2000, batch_size = 4;
  double lr = 3e-3, train_fraction = 0.8;
  // objectives
  double target_focal_mm = 590.0, rms_tolerance_nm = 500.0;
  // sweep
  double v_lo = 0.1, v_hi = 0.9, v_step = 0.1;
  // doe
  double coarse_step = 0.1, refine_step = 0.02;
  // loop
  int max_epochs = 5, neighbors = 50;
  unsigned loop_seed = 0;
  int train_iterations = 600, gd_epochs = 500;
  double gd_lr = 0.02;
  // trace
  int n_rays = 80;
  double aperture_frac = 0.9, source_z = 50.0;
  // gen-data
  int data_count = 50;
  double data_v1 = 0.5;
  unsigned data_seed = 1;
  // fine-tune
  int probes = 5;

  std::string output_dir = "run";
};

namespace detail {

inline void check_keys(const json& j, const std::string& section,
                       const std::vector<std::string>& allowed) {
  if (!j.is_object())
    throw ConfigError("config: section '" + section + "' must be an object");
  for (const auto& [key, val] : j.items()) {
    (void)val;
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
      throw ConfigError("config: unknown key '" +
                        (section.empty() ? key : section + "." + key) + "'");
  }
}

inline double get_num(const json& j, const std::string& section, const char* key,
                      double fallback) {
  if (!j.contains(key)) return fallback;
  if (!j[key].is_number())
    throw ConfigError("config: '" + section + "." + key + "' must be a number");
  return j[key].get<double>();
}

inline int get_int(const json& j, const std::string& section, const char* key, int fallback) {
  if (!j.contains(key)) return fallback;
  if (!j[key].is_number_integer())
    throw ConfigError("config: '" + section + "." + key + "' must be an integer");
  return j[key].get<int>();
}

inline unsigned get_uint(const json& j, const std::string& section, const char* key,
                         unsigned fallback) {
  int v = get_int(j, section, key, static_cast<int>(fallback));
  if (v < 0) throw ConfigError("config: '" + section + "." + key + "' must be non-negative");
  return static_cast<unsigned>(v);
}

}  // namespace detail

inline RunConfig parse_config(const json& j) {
  detail::check_keys(j, "", {"mesh", "oracle", "surrogate", "objectives", "sweep", "doe",
                             "loop", "trace", "gen_data", "fine_tune", "output_dir"});
  RunConfig c;
  using detail::get_int;
  using detail::get_num;
  using detail::get_uint;
  if (j.contains("mesh")) {
    const json& s = j["mesh"];
    detail::check_keys(s, "mesh", {"half_width", "half_height", "blend_radius", "nodes",
                                   "boundary", "seed", "augment_radius"});
    c.half_width = get_num(s, "mesh", "half_width", c.half_width);
    c.half_height = get_num(s, "mesh", "half_height", c.half_height);
    c.blend_radius = get_num(s, "mesh", "blend_radius", c.blend_radius);
    c.nodes = get_int(s, "mesh", "nodes", c.nodes);
    c.boundary = get_int(s, "mesh", "boundary", c.boundary);
    c.mesh_seed = get_uint(s, "mesh", "seed", c.mesh_seed);
    c.augment_radius = get_num(s, "mesh", "augment_radius", c.augment_radius);
  }
  if (j.contains("oracle")) {
    const json& s = j["oracle"];
    detail::check_keys(s, "oracle", {"target_radius", "roi_radius", "load_sigma",
                                     "membrane_constant", "spring_scale"});
    c.target_radius = get_num(s, "oracle", "target_radius", c.target_radius);
    c.roi_radius = get_num(s, "oracle", "roi_radius", c.roi_radius);
    c.load_sigma = get_num(s, "oracle", "load_sigma", c.load_sigma);
    c.membrane_constant = get_num(s, "oracle", "membrane_constant", c.membrane_constant);
    c.spring_scale = get_num(s, "oracle", "spring_scale", c.spring_scale);
  }
  if (j.contains("surrogate")) {
    const json& s = j["surrogate"];
    detail::check_keys(s, "surrogate", {"message_steps", "latent", "seed", "iterations",
                                        "batch_size", "lr", "train_fraction"});
    c.message_steps = get_int(s, "surrogate", "message_steps", c.message_steps);
    c.latent = get_int(s, "surrogate", "latent", c.latent);
    c.surrogate_seed = get_uint(s, "surrogate", "seed", c.surrogate_seed);
    c.iterations = get_int(s, "surrogate", "iterations", c.iterations);
    c.batch_size = get_int(s, "surrogate", "batch_size", c.batch_size);
    c.lr = get_num(s, "surrogate", "lr", c.lr);
    c.train_fraction = get_num(s, "surrogate", "train_fraction", c.train_fraction);
  }
  if (j.contains("objectives")) {
    const json& s = j["objectives"];
    detail::check_keys(s, "objectives", {"target_focal_mm", "rms_tolerance_nm"});
    c.target_focal_mm = get_num(s, "objectives", "target_focal_mm", c.target_focal_mm);
    c.rms_tolerance_nm = get_num(s, "objectives", "rms_tolerance_nm", c.rms_tolerance_nm);
    if (!(c.target_focal_mm > 0) || !(c.rms_tolerance_nm > 0))
      throw ConfigError("config: objectives must be positive");
  }
  if (j.contains("sweep")) {
    const json& s = j["sweep"];
    detail::check_keys(s, "sweep", {"v_lo", "v_hi", "step"});
    c.v_lo = get_num(s, "sweep", "v_lo", c.v_lo);
    c.v_hi = get_num(s, "sweep", "v_hi", c.v_hi);
    c.v_step = get_num(s, "sweep", "step", c.v_step);
  }
  if (j.contains("doe")) {
    const json& s = j["doe"];
    detail::check_keys(s, "doe", {"coarse_step", "refine_step"});
    c.coarse_step = get_num(s, "doe", "coarse_step", c.coarse_step);
    c.refine_step = get_num(s, "doe", "refine_step", c.refine_step);
  }
  if (j.contains("loop")) {
    const json& s = j["loop"];
    detail::check_keys(s, "loop", {"max_epochs", "neighbors", "seed", "train_iterations",
                                   "gd_epochs", "gd_lr"});
    c.max_epochs = get_int(s, "loop", "max_epochs", c.max_epochs);
    c.neighbors = get_int(s, "loop", "neighbors", c.neighbors);
    c.loop_seed = get_uint(s, "loop", "seed", c.loop_seed);
    c.train_iterations = get_int(s, "loop", "train_iterations", c.train_iterations);
    c.gd_epochs = get_int(s, "loop", "gd_epochs", c.gd_epochs);
    c.gd_lr = get_num(s, "loop", "gd_lr", c.gd_lr);
  }
  if (j.contains("trace")) {
    const json& s = j["trace"];
    detail::check_keys(s, "trace", {"n_rays", "aperture_frac", "source_z"});
    c.n_rays = get_int(s, "trace", "n_rays", c.n_rays);
    c.aperture_frac = get_num(s, "trace", "aperture_frac", c.aperture_frac);
    c.source_z = get_num(s, "trace", "source_z", c.source_z);
  }
  if (j.contains("gen_data")) {
    const json& s = j["gen_data"];
    detail::check_keys(s, "gen_data", {"count", "v1", "seed"});
    c.data_count = get_int(s, "gen_data", "count", c.data_count);
    c.data_v1 = get_num(s, "gen_data", "v1", c.data_v1);
    c.data_seed = get_uint(s, "gen_data", "seed", c.data_seed);
  }
  if (j.contains("fine_tune")) {
    const json& s = j["fine_tune"];
    detail::check_keys(s, "fine_tune", {"probes"});
    c.probes = get_int(s, "fine_tune", "probes", c.probes);
  }
  if (j.contains("output_dir")) {
    if (!j["output_dir"].is_string())
      throw ConfigError("config: 'output_dir' must be a string");
    c.output_dir = j["output_dir"].get<std::string>();
  }
  return c;
}

// Fully resolved configuration (defaults filled in); the canonical dump of
// this object is what gets hashed and embedded in artifacts.
inline json resolved_json(const RunConfig& c) {
  json j;
  j["mesh"] = {{"half_width", c.half_width},     {"half_height", c.half_height},
               {"blend_radius", c.blend_radius}, {"nodes", c.nodes},
               {"boundary", c.boundary},         {"seed", c.mesh_seed},
               {"augment_radius", c.augment_radius}};
  j["oracle"] = {{"target_radius", c.target_radius},
                 {"roi_radius", c.roi_radius},
                 {"load_sigma", c.load_sigma},
                 {"membrane_constant", c.membrane_constant},
                 {"spring_scale", c.spring_scale}};
  j["surrogate"] = {{"message_steps", c.message_steps}, {"latent", c.latent},
                    {"seed", c.surrogate_seed},         {"iterations", c.iterations},
                    {"batch_size", c.batch_size},       {"lr", c.lr},
                    {"train_fraction", c.train_fraction}};
  j["objectives"] = {{"target_focal_mm", c.target_focal_mm},
                     {"rms_tolerance_nm", c.rms_tolerance_nm}};
  j["sweep"] = {{"v_lo", c.v_lo}, {"v_hi", c.v_hi}, {"step", c.v_step}};
  j["doe"] = {{"coarse_step", c.coarse_step}, {"refine_step", c.refine_step}};
  j["loop"] = {{"max_epochs", c.max_epochs},
               {"neighbors", c.neighbors},
               {"seed", c.loop_seed},
               {"train_iterations", c.train_iterations},
               {"gd_epochs", c.gd_epochs},
               {"gd_lr", c.gd_lr}};
  j["trace"] = {{"n_rays", c.n_rays},
                {"aperture_frac", c.aperture_frac},
                {"source_z", c.source_z}};
  j["gen_data"] = {{"count", c.data_count}, {"v1", c.data_v1}, {"seed", c.data_seed}};
  j["fine_tune"] = {{"probes", c.probes}};
  j["output_dir"] = c.output_dir;
  return j;
}

inline std::string config_hash(const RunConfig& c) {
  return io::hex64(io::fnv1a(resolved_json(c).dump()));
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file: " + path);
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config: invalid JSON in " + path + ": " + e.what());
  }
  return parse_config(j);
}

// ---- shared subcommand plumbing ---------------------------------------------

namespace detail {

namespace fs = std::filesystem;

inline std::string hash_line(const RunConfig& c) { return "confighash " + config_hash(c); }

inline void write_with_hash(const std::string& path, const std::string& body,
                            const RunConfig& c) {
  io::write_file(path, body + "# " + hash_line(c) + "\n");
}

inline mesh::AugmentedMesh build_mesh(const RunConfig& c) {
  mesh::EyepieceShape shape{c.half_width, c.half_height, c.blend_radius};
  mesh::Mesh m = mesh::generate_eyepiece_mesh(shape, c.nodes, c.mesh_seed, c.boundary);
  return mesh::augment_edges(m, m.centroid(), c.augment_radius, m.anchor_node_ids);
}

inline mesh::AugmentedMesh require_mesh(const RunConfig& c) {
  fs::path p = fs::path(c.output_dir) / "mesh.txt";
  if (fs::exists(p)) return mesh::load_mesh(p.string());
  return build_mesh(c);
}

inline fem::Calibration base_calibration(const RunConfig& c) {
  fem::Calibration cal;
  cal.target_radius = c.target_radius;
  cal.roi_radius = c.roi_radius;
  cal.load_sigma = c.load_sigma;
  cal.membrane_constant = c.membrane_constant;
  cal.spring_scale = c.spring_scale;
  return cal;
}

inline fem::PseudoFem require_oracle(const RunConfig& c, const mesh::Mesh& m) {
  fs::path p = fs::path(c.output_dir) / "calibration.txt";
  if (fs::exists(p)) return fem::PseudoFem(m, fem::load_calibration(p.string()));
  return fem::make_calibrated_oracle(m, base_calibration(c));
}

inline hyb::TraceSettings trace_settings(const RunConfig& c) {
  hyb::TraceSettings ts;
  ts.n_rays = c.n_rays;
  ts.aperture_frac = c.aperture_frac;
  ts.source_z = c.source_z;
  return ts;
}

inline std::vector<sur::GraphSample> featurize(
    const mesh::AugmentedMesh& am,
    const std::vector<std::pair<fem::DesignVariables, Eigen::VectorXd>>& pairs) {
  std::vector<sur::GraphSample> out;
  out.reserve(pairs.size());
  for (const auto& [d, dz] : pairs) out.push_back(sur::build_graph_features(am, d, &dz));
  return out;
}

inline void save_pairs(const std::string& path, const fem::PseudoFem& f,
                       const std::vector<std::pair<fem::DesignVariables, Eigen::VectorXd>>& p,
                       unsigned seed) {
  fem::Dataset ds;
  ds.seed = seed;
  ds.oracle_version = f.calibration().version_tag;
  ds.mesh_hash = fem::mesh_hash_of(f.mesh());
  ds.samples = p;
  fem::save_dataset(path, ds);
}

}  // namespace detail

// ---- subcommands ------------------------------------------------------------

inline int cmd_gen_mesh(const RunConfig& c) {
  namespace fs = std::filesystem;
  fs::create_directories(c.output_dir);
  mesh::AugmentedMesh am = detail::build_mesh(c);
  std::string body = mesh::serialize_mesh(am);
  io::write_file((fs::path(c.output_dir) / "mesh.txt").string(),
                 body + "# " + detail::hash_line(c) + "\n");
  std::cout << "mesh: " << am.base.n_nodes() << " nodes, "
            << am.base.boundary_node_ids.size() << " boundary, "
            << am.augmented_edges.size() << " augmented edges -> " << c.output_dir
            << "/mesh.txt\n";
  return 0;
}

inline int cmd_calibrate(const RunConfig& c) {
  namespace fs = std::filesystem;
  fs::create_directories(c.output_dir);
  mesh::AugmentedMesh am = detail::require_mesh(c);
  fem::PseudoFem f = fem::make_calibrated_oracle(am.base, detail::base_calibration(c));
  io::write_file((fs::path(c.output_dir) / "calibration.txt").string(),
                 fem::serialize_calibration(f.calibration()) + "# " +
                     detail::hash_line(c) + "\n");
  std::cout << "calibrated: amplitude " << io::fmt_g(f.calibration().load_amplitude)
            << ", load center (" << io::fmt_g(f.calibration().load_center.x()) << ", "
            << io::fmt_g(f.calibration().load_center.y()) << "), sigma "
            << io::fmt_g(f.calibration().load_sigma) << " -> " << c.output_dir
            << "/calibration.txt\n";
  return 0;
}

inline int cmd_gen_data(const RunConfig& c) {
  namespace fs = std::filesystem;
  fs::create_directories(c.output_dir);
  mesh::AugmentedMesh am = detail::require_mesh(c);
  fem::PseudoFem f = detail::require_oracle(c, am.base);
  long nb = static_cast<long>(am.base.boundary_node_ids.size());
  std::vector<fem::DesignVariables> designs;
  for (const Eigen::VectorXd& W :
       hyb::sample_neighbors(fem::uniform_midrange_stiffness(nb), c.data_count, c.data_seed)) {
    fem::DesignVariables d;
    d.v1 = c.data_v1;
    d.W = W;
    designs.push_back(std::move(d));
  }
  fem::Dataset ds = fem::generate_dataset(f, designs, c.data_seed);
  io::write_file((fs::path(c.output_dir) / "dataset.txt").string(),
                 fem::serialize_dataset(ds) + "# " + detail::hash_line(c) + "\n");
  std::cout << "dataset: " << ds.samples.size() << " samples -> " << c.output_dir
            << "/dataset.txt\n";
  return 0;
}

inline int cmd_train(const RunConfig& c) {
  namespace fs = std::filesystem;
  mesh::AugmentedMesh am = detail::require_mesh(c);
  fs::path dpath = fs::path(c.output_dir) / "dataset.txt";
  if (!fs::exists(dpath))
    throw ConfigError("train: dataset not found at " + dpath.string() +
                      " (run gen-data first)");
  fem::Dataset ds = fem::load_dataset(dpath.string());
  std::vector<sur::GraphSample> samples = detail::featurize(am, ds.samples);
  sur::SurrogateModel model =
      sur::make_model({c.message_steps, c.latent, c.surrogate_seed});
  sur::TrainConfig tc;
  tc.iterations = c.iterations;
  tc.batch_size = c.batch_size;
  tc.lr = c.lr;
  tc.split_seed = c.surrogate_seed;
  tc.train_fraction = c.train_fraction;
  sur::TrainReport rep = sur::train(model, samples, tc);
  io::write_file((fs::path(c.output_dir) / "model.txt").string(),
                 sur::serialize_model(model) + "# " + detail::hash_line(c) + "\n");
  std::ostringstream os;
  os << "samples " << samples.size() << "\n";
  os << "train_mse " << io::fmt_g17(rep.train_mse) << "\n";
  os << "test_mse " << io::fmt_g17(rep.test_mse) << "\n";
  os << "test_r2 " << io::fmt_g17(rep.test_r2) << "\n";
  os << "wall_seconds " << io::fmt_g(rep.wall_seconds) << "\n";
  detail::write_with_hash((fs::path(c.output_dir) / "train_report.txt").string(), os.str(), c);
  std::cout << "trained: held-out R^2 " << io::fmt_g(rep.test_r2) << " -> " << c.output_dir
            << "/model.txt\n";
  return 0;
}

inline int cmd_trace(const RunConfig& c, const std::string& surface_path, double plane_z,
                     const std::string& out_prefix) {
  optics::ZernikeSurface s = optics::load_surface(surface_path);
  rt::RayBundle src = rt::make_source(c.aperture_frac * s.roi_radius, c.n_rays,
                                      rt::SourcePattern::grid, c.source_z);
  rt::SpotDiagram spot = rt::trace_spot(s, src, plane_z);
  std::string title = "spot diagram at " + io::fmt_g(plane_z) + " mm (rms " +
                      io::fmt_g(spot.spot_rms_nm) + " nm)";
  io::write_file(out_prefix + ".csv", io::spot_csv(spot.hits, spot.spot_rms_nm,
                                                   spot.n_flagged) +
                                          "# " + detail::hash_line(c) + "\n");
  io::write_file(out_prefix + ".svg", io::spot_svg(spot.hits, title));
  std::cout << "spot: " << spot.hits.rows() << " rays, rms " << io::fmt_g(spot.spot_rms_nm)
            << " nm -> " << out_prefix << ".csv/.svg\n";
  return 0;
}

// ---- the six-step pipeline --------------------------------------------------

struct PipelineState {
  double v_bar = 0;
  int epochs_done = 0;
  bool converged = false;
  Eigen::VectorXd W_best;  // DOE winner, the loop's starting design
};

namespace detail {

inline void save_state(const RunConfig& c, const PipelineState& st) {
  std::ostringstream os;
  os << "v_bar " << io::fmt_g17(st.v_bar) << "\n";
  os << "epochs_done " << st.epochs_done << "\n";
  os << "converged " << (st.converged ? 1 : 0) << "\n";
  os << "w_best " << st.W_best.size();
  for (long i = 0; i < st.W_best.size(); ++i) os << " " << io::fmt_g17(st.W_best(i));
  os << "\n";
  write_with_hash((fs::path(c.output_dir) / "state.txt").string(), os.str(), c);
}

inline PipelineState load_state(const RunConfig& c) {
  std::ifstream f(fs::path(c.output_dir) / "state.txt");
  if (!f) throw ConfigError("resume: no state.txt in " + c.output_dir);
  PipelineState st;
  std::string tok;
  int conv = 0;
  long nw = 0;
  f >> tok >> st.v_bar >> tok >> st.epochs_done >> tok >> conv >> tok >> nw;
  st.converged = conv != 0;
  st.W_best.resize(nw);
  for (long i = 0; i < nw; ++i) f >> st.W_best(i);
  if (!f) throw ConfigError("resume: truncated state.txt");
  return st;
}

inline void append_history(const RunConfig& c, const hyb::EpochRecord& rec, long calls) {
  std::ofstream f(fs::path(c.output_dir) / "history.txt", std::ios::app);
  f << "epoch " << rec.epoch << " best_rms_nm " << io::fmt_g17(rec.best_rms_nm)
    << " train_r2 " << io::fmt_g17(rec.train_r2) << " proposal_rms_nm "
    << io::fmt_g17(rec.proposed_rms_nm) << " neighbors " << rec.neighbor_rms_nm.size()
    << " oracle_calls " << calls << " checkpoint " << rec.epoch << " config "
    << config_hash(c) << "\n";
}

inline void write_pca_csv(const RunConfig& c,
                          const std::vector<std::pair<fem::DesignVariables,
                                                      Eigen::VectorXd>>& pairs,
                          const fem::PseudoFem& f) {
  std::vector<Eigen::VectorXd> designs;
  for (const auto& [d, dz] : pairs) designs.push_back(d.W);
  std::ostringstream os;
  try {
    hyb::PcaResult pca = hyb::pca_project(designs);
    os << "index,pc1,pc2,v1,surface_rms_nm\n";
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      double rms = optics::fit_sphere(f.roi_points(pairs[i].second)).rms_nm;
      os << i << "," << io::fmt_g17(pca.coords(static_cast<long>(i), 0)) << ","
         << io::fmt_g17(pca.coords(static_cast<long>(i), 1)) << ","
         << io::fmt_g17(pairs[i].first.v1) << "," << io::fmt_g17(rms) << "\n";
    }
    os << "# explained_variance " << io::fmt_g17(pca.explained(0)) << " "
       << io::fmt_g17(pca.explained(1)) << "\n";
  } catch (const hyb::OptError& e) {
    os << "# pca unavailable: " << e.what() << "\n";
  }
  write_with_hash((fs::path(c.output_dir) / "pca.csv").string(), os.str(), c);
}

inline void write_spot_svg(const RunConfig& c, const fem::PseudoFem& f,
                           const Eigen::VectorXd& dz, const std::string& name) {
  hyb::SimEval ev = hyb::evaluate_deformation(f, dz, trace_settings(c));
  rt::RayBundle src =
      rt::make_source(c.aperture_frac * f.calibration().roi_radius, c.n_rays,
                      rt::SourcePattern::grid, c.source_z);
  rt::SpotDiagram spot = rt::trace_spot(ev.surface, src, -ev.focal_mm);
  std::string title = "spot diagram at " + io::fmt_g(-ev.focal_mm) + " mm (rms " +
                      io::fmt_g(spot.spot_rms_nm) + " nm) config " + config_hash(c);
  io::write_file((fs::path(c.output_dir) / name).string(), io::spot_svg(spot.hits, title));
}

}  // namespace detail

// Steps 1-6: voltage sweep, Bezier DOE, then the sample/retrain/descend loop
// with per-epoch artifacts, and the final voltage fine-tune.
inline int cmd_optimize(const RunConfig& c, bool resume) {
  namespace fs = std::filesystem;
  fs::create_directories(c.output_dir);
  mesh::AugmentedMesh am = detail::require_mesh(c);
  fem::PseudoFem f = detail::require_oracle(c, am.base);
  if (!fs::exists(fs::path(c.output_dir) / "mesh.txt")) cmd_gen_mesh(c);
  if (!fs::exists(fs::path(c.output_dir) / "calibration.txt"))
    io::write_file((fs::path(c.output_dir) / "calibration.txt").string(),
                   fem::serialize_calibration(f.calibration()) + "# " +
                       detail::hash_line(c) + "\n");
  io::write_file((fs::path(c.output_dir) / "config.json").string(),
                 resolved_json(c).dump(2) + "\n");

  PipelineState st;
  std::vector<std::pair<fem::DesignVariables, Eigen::VectorXd>> pairs;
  long nb = static_cast<long>(am.base.boundary_node_ids.size());
  if (resume) {
    st = detail::load_state(c);
    fs::path dpath = fs::path(c.output_dir) / "data.txt";
    if (fs::exists(dpath)) pairs = fem::load_dataset(dpath.string()).samples;
  } else {
    // Step 1: coarse voltage sweep
    std::vector<double> sweep;
    for (double v = c.v_lo; v <= c.v_hi + 1e-12; v += c.v_step) sweep.push_back(v);
    st.v_bar = hyb::coarse_voltage_sweep(f, fem::uniform_midrange_stiffness(nb), sweep,
                                         c.target_focal_mm, detail::trace_settings(c));
    // Step 2: Bezier-hypothesis DOE
    hyb::DoeResult doe =
        hyb::doe_bezier(f, st.v_bar, c.coarse_step, c.refine_step, detail::trace_settings(c));
    st.W_best = doe.W_best;
    std::ostringstream os;
    os << "a,b,rms_nm\n";
    for (const auto& e : doe.table)
      os << io::fmt_g17(e.a) << "," << io::fmt_g17(e.b) << "," << io::fmt_g17(e.rms_nm)
         << "\n";
    detail::write_with_hash((fs::path(c.output_dir) / "doe.csv").string(), os.str(), c);
    std::ofstream(fs::path(c.output_dir) / "history.txt")
        << "v_bar " << io::fmt_g17(st.v_bar) << " doe_best_rms_nm "
        << io::fmt_g17(doe.best_rms_nm) << " config " << config_hash(c) << "\n";
    f.reset_call_count();
    detail::save_state(c, st);
  }

  // Steps 3-5: one loop epoch at a time so every epoch leaves artifacts and
  // the run can resume; seeds are derived from absolute epoch numbers, so a
  // stitched run is bitwise-identical to an uninterrupted one.
  hyb::Objectives obj;
  obj.target_focal_mm = c.target_focal_mm;
  obj.rms_tolerance_nm = c.rms_tolerance_nm;
  hyb::LoopConfig lc;
  lc.neighbors_per_epoch = c.neighbors;
  lc.seed = c.loop_seed;
  lc.model_cfg = {c.message_steps, c.latent, c.surrogate_seed};
  lc.train_cfg.iterations = c.train_iterations;
  lc.train_cfg.batch_size = c.batch_size;
  lc.train_cfg.lr = c.lr;
  lc.train_cfg.train_fraction = c.train_fraction;
  lc.gd.epochs = c.gd_epochs;
  lc.gd.lr = c.gd_lr;
  lc.gd.trace = detail::trace_settings(c);
  lc.trace = detail::trace_settings(c);

  hyb::LoopResult last;
  last.converged = st.converged;
  for (int epoch = st.epochs_done; epoch < c.max_epochs && !st.converged; ++epoch) {
    lc.first_epoch = epoch;
    lc.max_epochs = epoch + 1;
    long calls_before = f.oracle_calls();
    hyb::LoopResult res = hyb::hybrid_loop(f, am, st.v_bar, st.W_best, pairs, obj, lc);
    pairs = res.data;
    st.converged = res.converged;
    st.epochs_done = epoch + 1;
    last = res;
    detail::save_pairs((fs::path(c.output_dir) / "data.txt").string(), f, pairs, c.loop_seed);
    if (!res.history.empty()) {
      const hyb::EpochRecord& rec = res.history.back();
      detail::append_history(c, rec, f.oracle_calls() - calls_before);
      io::write_file((fs::path(c.output_dir) / ("checkpoint-" + std::to_string(rec.epoch) +
                                                ".txt"))
                         .string(),
                     sur::serialize_model(res.last_model) + "# " + detail::hash_line(c) +
                         "\n");
    }
    // spot diagram of the best simulated design so far
    double best = std::numeric_limits<double>::infinity();
    const Eigen::VectorXd* best_dz = nullptr;
    for (const auto& [d, dz] : pairs) {
      double rms = optics::fit_sphere(f.roi_points(dz)).rms_nm;
      if (rms < best) {
        best = rms;
        best_dz = &dz;
      }
    }
    if (best_dz)
      detail::write_spot_svg(c, f, *best_dz,
                             "spot-epoch-" + std::to_string(epoch) + ".svg");
    detail::save_state(c, st);
    std::cout << "epoch " << epoch << ": best simulated rms " << io::fmt_g(best)
              << " nm\n";
  }

  // best design over everything simulated
  double best_rms = std::numeric_limits<double>::infinity();
  fem::DesignVariables best_design;
  for (const auto& [d, dz] : pairs) {
    double rms = optics::fit_sphere(f.roi_points(dz)).rms_nm;
    if (rms < best_rms) {
      best_rms = rms;
      best_design = d;
    }
  }
  if (!std::isfinite(best_rms)) {
    std::cout << "no design simulated (epoch budget 0); not converged\n";
    detail::save_state(c, st);
    return 2;
  }

  // Step 6: voltage fine-tune on the winner
  hyb::FineTuneResult ft =
      hyb::fine_tune_voltage(f, best_design.W, st.v_bar, c.target_focal_mm, c.probes,
                             detail::trace_settings(c));
  std::ostringstream os;
  os << "converged " << (st.converged ? 1 : 0) << "\n";
  os << "epochs " << st.epochs_done << "\n";
  os << "v_bar " << io::fmt_g17(st.v_bar) << "\n";
  os << "v_star " << io::fmt_g17(ft.v_star) << "\n";
  os << "fit_slope " << io::fmt_g17(ft.slope) << "\n";
  os << "fit_intercept " << io::fmt_g17(ft.intercept) << "\n";
  os << "focal_mm " << io::fmt_g17(ft.focal_at_vstar_mm) << "\n";
  os << "surface_rms_nm " << io::fmt_g17(ft.rms_at_vstar_nm) << "\n";
  os << "best_loop_rms_nm " << io::fmt_g17(best_rms) << "\n";
  os << "oracle_calls " << f.oracle_calls() << "\n";
  os << "w_star " << best_design.W.size();
  for (long i = 0; i < best_design.W.size(); ++i)
    os << " " << io::fmt_g17(best_design.W(i));
  os << "\n";
  detail::write_with_hash((std::filesystem::path(c.output_dir) / "result.txt").string(),
                          os.str(), c);
  detail::write_pca_csv(c, pairs, f);
  std::cout << "result: v* " << io::fmt_g(ft.v_star) << ", focal "
            << io::fmt_g(ft.focal_at_vstar_mm) << " mm, surface rms "
            << io::fmt_g(ft.rms_at_vstar_nm) << " nm, "
            << (st.converged ? "converged" : "NOT converged") << "\n";
  return st.converged ? 0 : 2;
}

inline int cmd_report(const RunConfig& c) {
  namespace fs = std::filesystem;
  fs::path dpath = fs::path(c.output_dir) / "data.txt";
  if (!fs::exists(dpath))
    throw ConfigError("report: no data.txt in " + c.output_dir + " (run optimize first)");
  mesh::AugmentedMesh am = detail::require_mesh(c);
  fem::PseudoFem f = detail::require_oracle(c, am.base);
  auto pairs = fem::load_dataset(dpath.string()).samples;
  detail::write_pca_csv(c, pairs, f);
  std::ostringstream os;
  os << "designs " << pairs.size() << "\n";
  double best = std::numeric_limits<double>::infinity();
  for (const auto& [d, dz] : pairs)
    best = std::min(best, optics::fit_sphere(f.roi_points(dz)).rms_nm);
  os << "best_surface_rms_nm " << io::fmt_g17(best) << "\n";
  fs::path rpath = fs::path(c.output_dir) / "result.txt";
  if (fs::exists(rpath)) os << "--- result.txt ---\n" << io::read_file(rpath.string());
  detail::write_with_hash((fs::path(c.output_dir) / "report.txt").string(), os.str(), c);
  std::cout << "report: " << pairs.size() << " designs, best rms " << io::fmt_g(best)
            << " nm -> " << c.output_dir << "/report.txt\n";
  return 0;
}

// ---- entry point ------------------------------------------------------------

inline int run_cli(int argc, const char* const* argv) {
  CLI::App app{"varifocal: inverse design of a deformable-mirror eyepiece"};
  app.require_subcommand(1);
  std::string config_path, output_dir, surface_path, out_prefix = "spot";
  double plane_z = -590.0;
  int max_epochs_flag = -1;
  bool resume = false;
  app.add_option("--config", config_path, "JSON run configuration");
  app.add_option("--output-dir", output_dir, "override config output_dir");

  CLI::App* gen_mesh = app.add_subcommand("gen-mesh", "generate and save the mesh");
  CLI::App* calibrate = app.add_subcommand("calibrate", "calibrate the simulation oracle");
  CLI::App* gen_data = app.add_subcommand("gen-data", "simulate a neighbor-sample dataset");
  CLI::App* train = app.add_subcommand("train", "train the surrogate on a dataset");
  CLI::App* optimize = app.add_subcommand("optimize", "run optimization steps 1-6");
  optimize->add_flag("--resume", resume, "continue an interrupted run");
  optimize->add_option("--max-epochs", max_epochs_flag, "override loop.max_epochs");
  CLI::App* trace = app.add_subcommand("trace", "spot diagram for a surface file");
  trace->add_option("--surface", surface_path, "Zernike surface file")->required();
  trace->add_option("--plane", plane_z, "detector plane z (signed mm)");
  trace->add_option("--out", out_prefix, "output path prefix");
  CLI::App* report = app.add_subcommand("report", "emit PCA csv and summary report");
  CLI::App* run = app.add_subcommand("run", "full pipeline: mesh, calibrate, optimize, report");
  run->add_flag("--resume", resume, "continue an interrupted run");
  run->add_option("--max-epochs", max_epochs_flag, "override loop.max_epochs");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    RunConfig c = config_path.empty() ? RunConfig{} : load_config(config_path);
    if (!output_dir.empty()) c.output_dir = output_dir;
    if (max_epochs_flag >= 0) c.max_epochs = max_epochs_flag;
    if (gen_mesh->parsed()) return cmd_gen_mesh(c);
    if (calibrate->parsed()) return cmd_calibrate(c);
    if (gen_data->parsed()) return cmd_gen_data(c);
    if (train->parsed()) return cmd_train(c);
    if (optimize->parsed()) return cmd_optimize(c, resume);
    if (trace->parsed()) return cmd_trace(c, surface_path, plane_z, out_prefix);
    if (report->parsed()) return cmd_report(c);
    if (run->parsed()) {
      int rc = cmd_gen_mesh(c);
      if (rc != 0) return rc;
      rc = cmd_calibrate(c);
      if (rc != 0) return rc;
      rc = cmd_optimize(c, resume);
      int rr = cmd_report(c);
      return rr != 0 ? rr : rc;
    }
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace vf::cli
