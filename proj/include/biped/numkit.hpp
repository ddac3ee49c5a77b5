#pragma once

#include <Eigen/Dense>
#include <functional>
#include <stdexcept>
#include <vector>

// Dense linear algebra, convex QP, fixed-step integration and
// finite-difference checks shared by the rest of the library.
namespace biped::numkit {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct NonFinite : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// min 1/2 x'Px + q'x
//   s.t.  Aeq x = beq
//         lin <= Ain x <= uin
//         lx  <=  x    <= ux
// Empty matrices/vectors mean "no such constraints".
struct QpProblem {
  Matrix P;
  Vector q;
  Matrix Aeq;
  Vector beq;
  Matrix Ain;
  Vector lin, uin;
  Vector lx, ux;

  int num_vars() const { return static_cast<int>(P.rows()); }
  // Throws std::invalid_argument if shapes/symmetry/bound ordering are off.
  void validate() const;
};

enum class QpStatus { Optimal, Infeasible, MaxIter };

struct QpSolution {
  Vector x;
  Vector lambda_eq;   // one per equality row
  Vector lambda_in;   // net multiplier per Ain row (lower minus upper side)
  Vector lambda_bnd;  // net multiplier per variable bound
  QpStatus status = QpStatus::MaxIter;
  double kkt_residual = std::numeric_limits<double>::infinity();
  int iterations = 0;
};

// Dual active-set solver (Goldfarb-Idnani). Deterministic: most-violated
// constraint enters, ties broken by lowest index. P is regularized by
// 1e-9*I when its Cholesky factorization fails.
QpSolution solve_qp(const QpProblem& p, double tol = 1e-8, int max_iter = 200);

enum class IntegrationMethod { RK4, SemiImplicitEuler };

using DerivativeFn = std::function<Vector(double t, const Vector& x)>;

struct Trajectory {
  std::vector<double> t;
  std::vector<Vector> x;
  const Vector& back() const { return x.back(); }
};

// Fixed-step integration of xdot = f(t, x) from t=0 to t_end, sampling at
// multiples of dt. SemiImplicitEuler assumes x = [positions; velocities]
// with equal halves and qdot = v: velocities advance first, positions use
// the updated velocities. Throws NonFinite if the state leaves R^n.
Trajectory integrate_fixed(const DerivativeFn& f, const Vector& x0, double dt,
                           double t_end, IntegrationMethod method);

// Central-difference Jacobian of f at x0.
Matrix finite_diff_jacobian(const std::function<Vector(const Vector&)>& f,
                            const Vector& x0, double h = 1e-5);

}  // namespace biped::numkit
