#include "varifocal/autodiff.hpp"

#include "fd.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <random>

using namespace vf;
using ad::Mat;
using ad::Tape;
using ad::Var;

TEST_CASE("identity: value and gradient") {
  Tape t;
  Var x = Var::scalar(t, 3.0, true);
  t.backward(x.id());
  CHECK(x.s() == 3.0);
  CHECK(x.grad()(0, 0) == 1.0);
}

TEST_CASE("hand chain rule: f(x,y) = x*y + sqrt(y)") {
  Tape t;
  Var x = Var::scalar(t, 2.0, true);
  Var y = Var::scalar(t, 4.0, true);
  Var f = x * y + ad::sqrt(y);
  t.backward(f.id());
  CHECK_THAT(f.s(), Catch::Matchers::WithinAbs(10.0, 1e-14));
  CHECK_THAT(x.grad()(0, 0), Catch::Matchers::WithinAbs(4.0, 1e-14));
  CHECK_THAT(y.grad()(0, 0), Catch::Matchers::WithinAbs(2.25, 1e-14));
}

TEST_CASE("random composite matches central finite differences") {
  std::mt19937 rng(7);
  std::uniform_real_distribution<double> u(0.5, 2.0);
  for (int rep = 0; rep < 20; ++rep) {
    double a = u(rng), b = u(rng);
    auto f = [](Tape& t, double av, double bv, bool track) {
      Var x = Var::scalar(t, av, track);
      Var y = Var::scalar(t, bv, track);
      Var z = x * y + ad::sqrt(x) / (y + 1.0);
      z = z + ad::exp(x * 0.3) - ad::tanh(y);
      z = z * z + ad::pow(x, 1.7) - ad::relu(y - 1.0);
      z = z / (1.0 + ad::square(x - y));
      return std::pair{x, std::pair{y, z}};
    };
    Tape t;
    auto [x, rest] = f(t, a, b, true);
    auto [y, z] = rest;
    t.backward(z.id());
    double ga = x.grad()(0, 0), gb = y.grad()(0, 0);
    auto eval = [&](double av, double bv) {
      Tape t2;
      return f(t2, av, bv, false).second.second.s();
    };
    double fa = test::central_diff([&](double v) { return eval(v, b); }, a);
    double fb = test::central_diff([&](double v) { return eval(a, v); }, b);
    CHECK(test::rel_err(ga, fa) < 1e-6);
    CHECK(test::rel_err(gb, fb) < 1e-6);
  }
}

TEST_CASE("primitive gradients match finite differences at random points") {
  std::mt19937 rng(11);
  std::uniform_real_distribution<double> u(0.3, 1.7);
  struct Prim {
    const char* name;
    std::function<Var(Var, Var)> apply;
  };
  std::vector<Prim> prims = {
      {"add", [](Var a, Var b) { return a + b; }},
      {"sub", [](Var a, Var b) { return a - b; }},
      {"mul", [](Var a, Var b) { return a * b; }},
      {"div", [](Var a, Var b) { return a / b; }},
      {"pow", [](Var a, Var) { return ad::pow(a, 2.3); }},
      {"sqrt", [](Var a, Var) { return ad::sqrt(a); }},
      {"exp", [](Var a, Var) { return ad::exp(a); }},
      {"tanh", [](Var a, Var) { return ad::tanh(a); }},
      {"relu", [](Var a, Var) { return ad::relu(a); }},
      {"max", [](Var a, Var b) { return ad::cmax(a, b); }},
      {"min", [](Var a, Var b) { return ad::cmin(a, b); }},
  };
  for (const auto& p : prims) {
    INFO(p.name);
    for (int rep = 0; rep < 100; ++rep) {
      double a = u(rng), b = u(rng);
      if (std::abs(a - b) < 1e-3) continue;  // keep away from max/min kinks
      auto eval = [&](double av, double bv, double* ga, double* gb) {
        Tape t;
        Var x = Var::scalar(t, av, true);
        Var y = Var::scalar(t, bv, true);
        Var z = p.apply(x, y);
        if (ga) {
          t.backward(z.id());
          *ga = x.grad().size() ? x.grad()(0, 0) : 0.0;
          *gb = y.grad().size() ? y.grad()(0, 0) : 0.0;
        }
        return z.s();
      };
      double ga, gb;
      eval(a, b, &ga, &gb);
      double fa = test::central_diff([&](double v) { return eval(v, b, nullptr, nullptr); }, a);
      double fb = test::central_diff([&](double v) { return eval(a, v, nullptr, nullptr); }, b);
      CHECK(test::rel_err(ga, fa) < 1e-6);
      CHECK(test::rel_err(gb, fb) < 1e-6);
    }
  }
}

TEST_CASE("matrix ops: matmul, gather, scatter, concat vs finite differences") {
  std::mt19937 rng(3);
  std::normal_distribution<double> g;
  Mat A(3, 4), B(4, 2);
  for (int i = 0; i < A.size(); ++i) A.data()[i] = g(rng);
  for (int i = 0; i < B.size(); ++i) B.data()[i] = g(rng);
  std::vector<int> idx = {2, 0, 2, 1};
  std::vector<std::vector<int>> order = {{1, 3}, {0, 2}};

  auto eval = [&](const Mat& Av, const Mat& Bv, Mat* gA) {
    Tape t;
    Var a = Var::leaf(t, Av, true);
    Var b = Var::leaf(t, Bv, true);
    Var m = ad::matmul(a, b);                       // 3x2
    Var gth = ad::gather_rows(m, idx);              // 4x2
    Var sc = ad::scatter_sum_ordered(gth, order, 2);  // 2x2
    Var cc = ad::concat_cols({sc, ad::tanh(sc)});   // 2x4
    Var loss = ad::sum(cc * cc);
    if (gA) {
      t.backward(loss.id());
      *gA = a.grad();
    }
    return loss.s();
  };
  Mat gA;
  eval(A, B, &gA);
  for (int r = 0; r < A.rows(); ++r) {
    for (int c = 0; c < A.cols(); ++c) {
      Mat Ap = A;
      double fd = test::central_diff(
          [&](double v) {
            Ap(r, c) = v;
            return eval(Ap, B, nullptr);
          },
          A(r, c));
      CHECK(test::rel_err(gA(r, c), fd) < 1e-6);
    }
  }
}

TEST_CASE("linearity of backward") {
  auto run = [](double wa, double wb) {
    Tape t;
    Var x = Var::scalar(t, 1.3, true);
    Var f = ad::exp(x) * ad::tanh(x);
    Var g = ad::sqrt(x) + x * x;
    Var h = wa * f + wb * g;
    t.backward(h.id());
    return x.grad()(0, 0);
  };
  double gf = run(1.0, 0.0), gg = run(0.0, 1.0);
  CHECK_THAT(run(2.5, -1.5), Catch::Matchers::WithinRel(2.5 * gf - 1.5 * gg, 1e-12));
}

TEST_CASE("tape reuse: independent backward passes agree") {
  Tape t;
  Var x = Var::scalar(t, 0.8, true);
  Var y = Var::scalar(t, 1.1, true);
  Var f = ad::exp(x * y) + ad::sqrt(y);
  t.backward(f.id());
  double g1x = x.grad()(0, 0), g1y = y.grad()(0, 0);
  t.backward(f.id());
  CHECK(x.grad()(0, 0) == g1x);
  CHECK(y.grad()(0, 0) == g1y);
}

TEST_CASE("non-participating variables have zero gradient") {
  Tape t;
  Var x = Var::scalar(t, 1.0, true);
  Var unused = Var::scalar(t, 5.0, true);
  Var f = x * x;
  t.backward(f.id());
  CHECK(unused.grad().size() == 0);  // never touched: exactly zero
}

TEST_CASE("domain errors") {
  Tape t;
  Var x = Var::scalar(t, -1.0, true);
  CHECK_THROWS_AS(ad::sqrt(x), ad::DomainError);
  Var z = Var::scalar(t, 0.0, true);
  Var y = Var::scalar(t, 1.0, true);
  CHECK_THROWS_AS(y / z, ad::DomainError);
}

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
  Eigen::VectorXd p(3);
  p << 1.0, -2.0, 0.5;
  Eigen::VectorXd p0 = p;
  ad::AdamState st(3);
  ad::adam_step(p, Eigen::VectorXd::Zero(3), st);
  CHECK(p == p0);
}

TEST_CASE("adam: first step on f(x)=x^2 with lr=0.1") {
  Eigen::VectorXd p(1);
  p << 1.0;
  ad::AdamConfig cfg;
  cfg.lr = 0.1;
  ad::AdamState st(1, cfg);
  Eigen::VectorXd g(1);
  g << 2.0;  // df/dx at x=1
  ad::adam_step(p, g, st);
  CHECK_THAT(p(0), Catch::Matchers::WithinAbs(0.9, 1e-7));
}

TEST_CASE("adam: deterministic trajectories") {
  auto run = [] {
    Eigen::VectorXd p(2);
    p << 1.0, -1.0;
    ad::AdamConfig cfg;
    cfg.lr = 0.05;
    ad::AdamState st(2, cfg);
    for (int i = 0; i < 50; ++i) {
      Eigen::VectorXd g = 2.0 * p;
      ad::adam_step(p, g, st);
    }
    return p;
  };
  Eigen::VectorXd a = run(), b = run();
  CHECK(a == b);  // bitwise
}

TEST_CASE("adam: non-finite gradient is rejected with its index") {
  Eigen::VectorXd p = Eigen::VectorXd::Ones(3);
  ad::AdamState st(3);
  Eigen::VectorXd g = Eigen::VectorXd::Zero(3);
  g(1) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_WITH(ad::adam_step(p, g, st),
                    Catch::Matchers::ContainsSubstring("index 1"));
}

TEST_CASE("broadcast scalar against matrix") {
  Tape t;
  Var s = Var::scalar(t, 2.0, true);
  Mat m(2, 2);
  m << 1, 2, 3, 4;
  Var v = Var::leaf(t, m, true);
  Var out = ad::sum(s * v + s);
  t.backward(out.id());
  CHECK_THAT(out.s(), Catch::Matchers::WithinAbs(2 * 10 + 4 * 2, 1e-14));
  CHECK_THAT(s.grad()(0, 0), Catch::Matchers::WithinAbs(10.0 + 4.0, 1e-14));
  CHECK(v.grad() == Mat::Constant(2, 2, 2.0));
}
