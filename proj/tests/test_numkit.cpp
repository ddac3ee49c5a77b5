#include <cmath>
#include <random>

#include "biped/numkit.hpp"
#include "doctest.h"

using namespace biped::numkit;

namespace {

QpProblem unconstrained(const Matrix& P, const Vector& q) {
  QpProblem p;
  p.P = P;
  p.q = q;
  return p;
}

double objective(const QpProblem& p, const Vector& x) {
  return 0.5 * x.dot(p.P * x) + p.q.dot(x);
}

}  // namespace

TEST_CASE("qp: unconstrained identity cost") {
  QpProblem p = unconstrained(Matrix::Identity(2, 2), Vector::Zero(2));
  auto sol = solve_qp(p);
  CHECK(sol.status == QpStatus::Optimal);
  CHECK(sol.x.norm() == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(sol.kkt_residual < 1e-10);
}

TEST_CASE("qp: clipped scalar optimum at upper bound") {
  QpProblem p = unconstrained(Matrix::Identity(1, 1), Vector::Constant(1, -2.0));
  p.lx = Vector::Constant(1, -std::numeric_limits<double>::infinity());
  p.ux = Vector::Constant(1, 0.5);
  auto sol = solve_qp(p);
  CHECK(sol.status == QpStatus::Optimal);
  CHECK(sol.x(0) == doctest::Approx(0.5).epsilon(1e-10));
}

TEST_CASE("qp: equality constrained") {
  // min ||x||^2 s.t. x0 + x1 = 1 -> x = (0.5, 0.5)
  QpProblem p = unconstrained(Matrix::Identity(2, 2), Vector::Zero(2));
  p.Aeq = Matrix::Ones(1, 2);
  p.beq = Vector::Ones(1);
  auto sol = solve_qp(p);
  CHECK(sol.status == QpStatus::Optimal);
  CHECK(sol.x(0) == doctest::Approx(0.5).epsilon(1e-10));
  CHECK(sol.x(1) == doctest::Approx(0.5).epsilon(1e-10));
  CHECK(sol.lambda_eq(0) == doctest::Approx(0.5).epsilon(1e-8));
}

TEST_CASE("qp: infeasible box detected") {
  QpProblem p = unconstrained(Matrix::Identity(1, 1), Vector::Zero(1));
  p.Ain = Matrix::Ones(1, 1);
  p.lin = Vector::Constant(1, 2.0);
  p.uin = Vector::Constant(1, 3.0);
  p.lx = Vector::Constant(1, -1.0);
  p.ux = Vector::Constant(1, 1.0);
  auto sol = solve_qp(p);
  CHECK(sol.status == QpStatus::Infeasible);
}

TEST_CASE("qp: random 6-var problems match box grid search") {
  std::mt19937 rng(7);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (int trial = 0; trial < 3; ++trial) {
    const int n = 6;
    Matrix A(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) A(i, j) = nd(rng);
    QpProblem p;
    p.P = A.transpose() * A + 0.5 * Matrix::Identity(n, n);
    p.q = Vector::NullaryExpr(n, [&](int) { return nd(rng); });
    p.Ain = Matrix(3, n);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < n; ++j) p.Ain(i, j) = nd(rng);
    p.lin = Vector::Constant(3, -1.0);
    p.uin = Vector::Constant(3, 1.0);
    p.lx = Vector::Constant(n, -1.0);
    p.ux = Vector::Constant(n, 1.0);
    auto sol = solve_qp(p);
    REQUIRE(sol.status == QpStatus::Optimal);
    CHECK(sol.kkt_residual < 1e-8);

    // Independent oracle: random feasible sampling must never beat the QP
    // optimum.
    std::mt19937 orng(100 + trial);
    std::uniform_real_distribution<double> ud(-1.0, 1.0);
    double best = std::numeric_limits<double>::infinity();
    int feasible = 0;
    for (int s = 0; s < 200000; ++s) {
      Vector x = Vector::NullaryExpr(n, [&](int) { return ud(orng); });
      Vector ax = p.Ain * x;
      bool ok = true;
      for (int i = 0; i < 3; ++i)
        if (ax(i) < p.lin(i) || ax(i) > p.uin(i)) ok = false;
      if (!ok) continue;
      ++feasible;
      best = std::min(best, objective(p, x));
    }
    REQUIRE(feasible > 100);
    CHECK(objective(p, sol.x) <= best + 1e-9);
  }
}

TEST_CASE("qp: box-constrained matches projected-gradient oracle within 1e-3") {
  std::mt19937 rng(21);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (int trial = 0; trial < 3; ++trial) {
    const int n = 6;
    Matrix A(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) A(i, j) = nd(rng);
    QpProblem p;
    p.P = A.transpose() * A + 0.5 * Matrix::Identity(n, n);
    p.q = Vector::NullaryExpr(n, [&](int) { return nd(rng); });
    p.lx = Vector::Constant(n, -0.5);
    p.ux = Vector::Constant(n, 0.5);
    auto sol = solve_qp(p);
    REQUIRE(sol.status == QpStatus::Optimal);
    CHECK(sol.kkt_residual < 1e-8);

    // Projected gradient with a safe step converges to the true optimum of
    // this strongly convex box-constrained problem.
    Eigen::SelfAdjointEigenSolver<Matrix> es(p.P);
    double step = 1.0 / es.eigenvalues().maxCoeff();
    Vector x = Vector::Zero(n);
    for (int it = 0; it < 200000; ++it)
      x = (x - step * (p.P * x + p.q)).cwiseMax(p.lx).cwiseMin(p.ux);
    CHECK((sol.x - x).cwiseAbs().maxCoeff() < 1e-3);
  }
}

TEST_CASE("qp: no feasible perturbation improves the optimum") {
  std::mt19937 rng(11);
  std::normal_distribution<double> nd(0.0, 1.0);
  const int n = 5;
  Matrix A(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) A(i, j) = nd(rng);
  QpProblem p;
  p.P = A.transpose() * A + Matrix::Identity(n, n);
  p.q = Vector::NullaryExpr(n, [&](int) { return nd(rng); });
  p.lx = Vector::Constant(n, -0.2);
  p.ux = Vector::Constant(n, 0.2);
  auto sol = solve_qp(p);
  REQUIRE(sol.status == QpStatus::Optimal);
  double f0 = objective(p, sol.x);
  for (int k = 0; k < 100; ++k) {
    Vector d = Vector::NullaryExpr(n, [&](int) { return nd(rng); });
    Vector x = (sol.x + 1e-4 * d).cwiseMax(p.lx).cwiseMin(p.ux);
    CHECK(objective(p, x) >= f0 - 1e-8);
  }
}

TEST_CASE("qp: determinism") {
  std::mt19937 rng(3);
  std::normal_distribution<double> nd(0.0, 1.0);
  const int n = 8;
  Matrix A(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) A(i, j) = nd(rng);
  QpProblem p;
  p.P = A.transpose() * A + Matrix::Identity(n, n);
  p.q = Vector::NullaryExpr(n, [&](int) { return nd(rng); });
  p.lx = Vector::Constant(n, -0.1);
  p.ux = Vector::Constant(n, 0.1);
  auto a = solve_qp(p);
  auto b = solve_qp(p);
  REQUIRE(a.status == QpStatus::Optimal);
  CHECK(memcmp(a.x.data(), b.x.data(), sizeof(double) * n) == 0);
}

TEST_CASE("integrate: constant state") {
  auto f = [](double, const Vector& x) { return Vector::Zero(x.size()); };
  Vector x0 = Vector::Constant(1, 3.0);
  auto traj = integrate_fixed(f, x0, 0.1, 1.0, IntegrationMethod::RK4);
  CHECK(traj.back()(0) == doctest::Approx(3.0));
}

TEST_CASE("integrate: exponential decay matches closed form") {
  auto f = [](double, const Vector& x) { return Vector(-x); };
  Vector x0 = Vector::Constant(1, 1.0);
  auto traj = integrate_fixed(f, x0, 1e-3, 1.0, IntegrationMethod::RK4);
  CHECK(std::abs(traj.back()(0) - std::exp(-1.0)) < 1e-9);
}

TEST_CASE("integrate: non-finite detected") {
  auto f = [](double, const Vector& x) {
    Vector d(1);
    d(0) = x(0) * x(0) * 1e10;
    return d;
  };
  Vector x0 = Vector::Constant(1, 10.0);
  CHECK_THROWS_AS(integrate_fixed(f, x0, 0.1, 10.0, IntegrationMethod::RK4), NonFinite);
}

TEST_CASE("finite_diff_jacobian: linear map returns A") {
  std::mt19937 rng(5);
  std::normal_distribution<double> nd(0.0, 1.0);
  Matrix A(3, 4);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 4; ++j) A(i, j) = nd(rng);
  auto f = [&](const Vector& x) { return Vector(A * x); };
  Vector x0 = Vector::NullaryExpr(4, [&](int) { return nd(rng); });
  Matrix J = finite_diff_jacobian(f, x0, 1e-5);
  CHECK((J - A).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("finite_diff_jacobian: sin at origin") {
  auto f = [](const Vector& x) {
    Vector y(1);
    y(0) = std::sin(x(0));
    return y;
  };
  Matrix J = finite_diff_jacobian(f, Vector::Zero(1), 1e-5);
  CHECK(J(0, 0) == doctest::Approx(1.0).epsilon(1e-8));
}
