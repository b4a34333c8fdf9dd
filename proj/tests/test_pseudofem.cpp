#include "varifocal/pseudofem.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <sstream>

using namespace vf;
using fem::Calibration;
using fem::DesignVariables;
using fem::PseudoFem;
using mesh::Mesh;

namespace {

Mesh small_mesh() {
  static Mesh m = mesh::generate_eyepiece_mesh({}, 300, 21);
  return m;
}

Calibration soft_cal() {
  Calibration cal;
  cal.load_amplitude = 0.01;  // keeps the uncalibrated test oracle under the 5 mm cap
  return cal;
}

DesignVariables mid_design(const Mesh& m, double v1 = 0.5) {
  DesignVariables d;
  d.v1 = v1;
  d.W = fem::uniform_midrange_stiffness(static_cast<long>(m.boundary_node_ids.size()));
  return d;
}

}  // namespace

TEST_CASE("displacement is exactly linear in the voltage") {
  Mesh m = small_mesh();
  PseudoFem f(m, soft_cal());
  Eigen::VectorXd a = f.simulate(mid_design(m, 0.25));
  Eigen::VectorXd b = f.simulate(mid_design(m, 0.5));
  Eigen::VectorXd c = f.simulate(mid_design(m, 1.0));
  CHECK(b == (2.0 * a).eval());  // bitwise: one solve scaled by exact binary factors
  CHECK(c == (4.0 * a).eval());
}

TEST_CASE("deflection peaks near the load and decays toward the rim") {
  Mesh m = small_mesh();
  PseudoFem f(m, soft_cal());
  Eigen::VectorXd dz = f.simulate(mid_design(m));
  double peak = dz.cwiseAbs().maxCoeff();
  for (int b : m.boundary_node_ids)
    CHECK(std::abs(dz(b)) < peak);
  // the load pulls every node the same way
  CHECK((dz.array() > 0).all() == (dz(0) > 0));
}

TEST_CASE("uniformly stiffer springs reduce the deflection everywhere") {
  Mesh m = small_mesh();
  PseudoFem f(m, soft_cal());
  DesignVariables soft = mid_design(m);
  DesignVariables hard = soft;
  hard.W *= 10.0;
  Eigen::VectorXd dzs = f.simulate(soft);
  Eigen::VectorXd dzh = f.simulate(hard);
  CHECK(dzh.cwiseAbs().maxCoeff() < dzs.cwiseAbs().maxCoeff());
  for (long i = 0; i < dzs.size(); ++i)
    CHECK(std::abs(dzh(i)) <= std::abs(dzs(i)) + 1e-15);
}

TEST_CASE("asymmetric stiffness bends the surface asymmetrically") {
  Mesh m = small_mesh();
  PseudoFem f(m, soft_cal());
  DesignVariables d = mid_design(m);
  long nb = d.W.size();
  for (long i = 0; i < nb / 2; ++i) d.W(i) = fem::kStiffnessHi;
  Eigen::VectorXd dz_asym = f.simulate(d);
  Eigen::VectorXd dz_sym = f.simulate(mid_design(m));
  // the stiffened side deflects less relative to the symmetric solution
  double stiff_side = 0, soft_side = 0;
  for (long i = 0; i < nb / 2; ++i)
    stiff_side += std::abs(dz_asym(m.boundary_node_ids[static_cast<std::size_t>(i)]));
  for (long i = nb / 2; i < nb; ++i)
    soft_side += std::abs(dz_asym(m.boundary_node_ids[static_cast<std::size_t>(i)]));
  CHECK(stiff_side < soft_side);
  CHECK(dz_asym != dz_sym);
}

TEST_CASE("roi nodes all lie inside the roi radius") {
  Mesh m = small_mesh();
  Calibration cal;
  cal.load_center = m.centroid();
  PseudoFem f(m, cal);
  REQUIRE(f.roi_nodes().size() >= 6);
  for (int i : f.roi_nodes()) {
    double r = (m.node_positions.row(i).head<2>().transpose() - cal.load_center).norm();
    CHECK(r <= cal.roi_radius);
  }
}

TEST_CASE("oracle call counter") {
  Mesh m = small_mesh();
  PseudoFem f(m, soft_cal());
  CHECK(f.oracle_calls() == 0);
  f.simulate(mid_design(m));
  f.simulate(mid_design(m));
  CHECK(f.oracle_calls() == 2);
  f.reset_call_count();
  CHECK(f.oracle_calls() == 0);
}

TEST_CASE("simulate rejects bad inputs") {
  Mesh m = small_mesh();
  PseudoFem f(m, soft_cal());
  DesignVariables d;
  d.W = Eigen::VectorXd::Constant(5, 1000.0);  // wrong length
  CHECK_THROWS_AS(f.simulate(d), std::invalid_argument);
  DesignVariables z = mid_design(m);
  z.W.setZero();
  CHECK_THROWS_AS(f.simulate(z), fem::SolverError);
}

TEST_CASE("design validation") {
  Mesh m = small_mesh();
  long nb = static_cast<long>(m.boundary_node_ids.size());
  DesignVariables d = mid_design(m);
  CHECK_NOTHROW(d.validate(nb));
  d.v1 = 0.0;
  CHECK_THROWS_AS(d.validate(nb), std::invalid_argument);
  d = mid_design(m);
  d.v1 = 1.5;
  CHECK_THROWS_AS(d.validate(nb), std::invalid_argument);
  d = mid_design(m);
  d.W(3) = 50.0;  // below the 100 N/m floor
  CHECK_THROWS_WITH(d.validate(nb), Catch::Matchers::ContainsSubstring("stiffness[3]"));
}

TEST_CASE("displacement cap trips for absurd amplitudes") {
  Mesh m = small_mesh();
  Calibration cal;
  cal.load_amplitude = 1e9;
  PseudoFem f(m, cal);
  CHECK_THROWS_WITH(f.simulate(mid_design(m)), Catch::Matchers::ContainsSubstring("5 mm"));
}

TEST_CASE("calibrated oracle hits the target radius at the anchor design") {
  Mesh m = mesh::generate_eyepiece_mesh({}, 651, 42);
  PseudoFem f = fem::make_calibrated_oracle(m);
  double r = fem::fitted_radius(f, mid_design(m));
  CHECK_THAT(r, Catch::Matchers::WithinRel(1180.0, 0.005));
  // mirror focal length is half the radius of curvature
  CHECK_THAT(r / 2.0, Catch::Matchers::WithinRel(590.0, 0.005));
  CHECK(f.oracle_calls() <= 1);  // fitted_radius costs one call; calibration is reset
}

TEST_CASE("doubling the amplitude roughly halves the fitted radius") {
  Mesh m = mesh::generate_eyepiece_mesh({}, 651, 42);
  PseudoFem f = fem::make_calibrated_oracle(m);
  Calibration cal2 = f.calibration();
  cal2.load_amplitude *= 2.0;
  PseudoFem f2(f.mesh(), cal2);
  double r1 = fem::fitted_radius(f, mid_design(m));
  double r2 = fem::fitted_radius(f2, mid_design(m));
  CHECK_THAT(r2, Catch::Matchers::WithinRel(r1 / 2.0, 0.02));
}

TEST_CASE("calibration is deterministic") {
  Mesh m = mesh::generate_eyepiece_mesh({}, 651, 42);
  PseudoFem a = fem::make_calibrated_oracle(m);
  PseudoFem b = fem::make_calibrated_oracle(m);
  CHECK(a.calibration().load_amplitude == b.calibration().load_amplitude);
  CHECK(a.calibration().load_center == b.calibration().load_center);
  CHECK(a.simulate(mid_design(m)) == b.simulate(mid_design(m)));
}

TEST_CASE("dataset generation is order-stable and serializes round-trip") {
  Mesh m = small_mesh();
  PseudoFem f(m, soft_cal());
  std::vector<DesignVariables> designs;
  std::mt19937 rng(99);
  std::uniform_real_distribution<double> uv(0.1, 1.0), uw(2.0, 5.3);
  for (int i = 0; i < 5; ++i) {
    DesignVariables d;
    d.v1 = uv(rng);
    d.W.resize(static_cast<long>(m.boundary_node_ids.size()));
    for (long j = 0; j < d.W.size(); ++j) d.W(j) = std::pow(10.0, uw(rng));
    designs.push_back(d);
  }
  fem::Dataset ds = fem::generate_dataset(f, designs, 99);
  CHECK(ds.samples.size() == 5);
  CHECK(ds.seed == 99);
  CHECK(ds.oracle_version == "pseudofem-v1");
  CHECK(ds.mesh_hash == fem::mesh_hash_of(m));
  for (std::size_t i = 0; i < 5; ++i)
    CHECK(ds.samples[i].first.v1 == designs[i].v1);

  std::string s1 = fem::serialize_dataset(ds);
  CHECK(s1 == fem::serialize_dataset(fem::generate_dataset(f, designs, 99)));
  std::istringstream in(s1);
  fem::Dataset back = fem::deserialize_dataset(in);
  CHECK(fem::serialize_dataset(back) == s1);
  CHECK(back.samples.size() == 5);
  CHECK(back.samples[3].second == ds.samples[3].second);
}

TEST_CASE("dataset generation reports the failing design index") {
  Mesh m = small_mesh();
  PseudoFem f(m, soft_cal());
  std::vector<DesignVariables> designs = {mid_design(m), mid_design(m)};
  designs[1].v1 = 2.0;  // invalid
  CHECK_THROWS_AS(fem::generate_dataset(f, designs, 1), std::invalid_argument);
  CHECK_THROWS_AS(fem::generate_dataset(f, {}, 1), std::invalid_argument);
}

TEST_CASE("dataset deserialization rejects corrupt input") {
  std::istringstream bad("varifocal-dataset v2\n");
  CHECK_THROWS_AS(fem::deserialize_dataset(bad), fem::SolverError);
}
