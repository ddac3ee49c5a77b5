#include "biped/numkit.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <cmath>
#include <limits>

namespace biped::numkit {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

bool all_finite(const Matrix& m) { return m.allFinite(); }
bool all_finite(const Vector& v) { return v.allFinite(); }

// One-sided linear constraint n'x + b >= 0 (or == 0 when is_eq).
struct Constraint {
  Vector n;
  double b = 0.0;
  bool is_eq = false;
  int row = -1;    // source row in the QpProblem block it came from
  int block = 0;   // 0 eq, 1 ineq-lower, 2 ineq-upper, 3 bnd-lower, 4 bnd-upper
};

}  // namespace

void QpProblem::validate() const {
  const int n = num_vars();
  if (P.rows() != P.cols()) throw std::invalid_argument("QpProblem: P not square");
  if (q.size() != n) throw std::invalid_argument("QpProblem: q size mismatch");
  if (!all_finite(P) || !all_finite(q))
    throw std::invalid_argument("QpProblem: non-finite cost");
  if ((P - P.transpose()).cwiseAbs().maxCoeff() > 1e-10)
    throw std::invalid_argument("QpProblem: P not symmetric");
  Matrix sym = 0.5 * (P + P.transpose());
  Eigen::SelfAdjointEigenSolver<Matrix> es(sym, Eigen::EigenvaluesOnly);
  if (es.eigenvalues().minCoeff() < -1e-8)
    throw std::invalid_argument("QpProblem: P not PSD");
  if (Aeq.size() > 0) {
    if (Aeq.cols() != n || beq.size() != Aeq.rows())
      throw std::invalid_argument("QpProblem: equality shape mismatch");
    if (!all_finite(Aeq) || !all_finite(beq))
      throw std::invalid_argument("QpProblem: non-finite equality");
  }
  if (Ain.size() > 0) {
    if (Ain.cols() != n || lin.size() != Ain.rows() || uin.size() != Ain.rows())
      throw std::invalid_argument("QpProblem: inequality shape mismatch");
    if (!all_finite(Ain)) throw std::invalid_argument("QpProblem: non-finite Ain");
    for (int i = 0; i < lin.size(); ++i)
      if (lin(i) > uin(i)) throw std::invalid_argument("QpProblem: lin > uin");
  }
  if (lx.size() > 0 || ux.size() > 0) {
    if (lx.size() != n || ux.size() != n)
      throw std::invalid_argument("QpProblem: bound size mismatch");
    for (int i = 0; i < n; ++i)
      if (lx(i) > ux(i)) throw std::invalid_argument("QpProblem: lx > ux");
  }
}

QpSolution solve_qp(const QpProblem& p, double tol, int max_iter) {
  p.validate();
  const int n = p.num_vars();
  const int me = p.Aeq.size() > 0 ? static_cast<int>(p.Aeq.rows()) : 0;
  const int mi = p.Ain.size() > 0 ? static_cast<int>(p.Ain.rows()) : 0;

  Matrix G = 0.5 * (p.P + p.P.transpose());
  Eigen::LLT<Matrix> llt(G);
  if (llt.info() != Eigen::Success) {
    G += 1e-9 * Matrix::Identity(n, n);
    llt.compute(G);
    if (llt.info() != Eigen::Success)
      throw std::invalid_argument("solve_qp: cost matrix not factorizable");
  }
  auto ginv = [&](const Vector& v) -> Vector { return llt.solve(v); };

  // Deterministic constraint ordering: equalities, then Ain lower, Ain upper,
  // bound lower, bound upper.
  std::vector<Constraint> cons;
  for (int i = 0; i < me; ++i)
    cons.push_back({p.Aeq.row(i).transpose(), -p.beq(i), true, i, 0});
  for (int i = 0; i < mi; ++i)
    if (p.lin(i) > -kInf)
      cons.push_back({p.Ain.row(i).transpose(), -p.lin(i), false, i, 1});
  for (int i = 0; i < mi; ++i)
    if (p.uin(i) < kInf)
      cons.push_back({-p.Ain.row(i).transpose(), p.uin(i), false, i, 2});
  if (p.lx.size() > 0)
    for (int i = 0; i < n; ++i)
      if (p.lx(i) > -kInf) {
        Vector e = Vector::Zero(n);
        e(i) = 1.0;
        cons.push_back({e, -p.lx(i), false, i, 3});
      }
  if (p.ux.size() > 0)
    for (int i = 0; i < n; ++i)
      if (p.ux(i) < kInf) {
        Vector e = Vector::Zero(n);
        e(i) = -1.0;
        cons.push_back({e, p.ux(i), false, i, 4});
      }
  const int mc = static_cast<int>(cons.size());

  Vector x = -ginv(p.q);

  std::vector<int> active;          // indices into cons
  std::vector<double> sign;         // +1 normal as stored, -1 flipped (eq only)
  std::vector<double> dual;         // working duals (>=0 for inequalities)

  auto build_step = [&](const Vector& np, Vector& z, Vector& r) {
    const int m = static_cast<int>(active.size());
    Vector gn = ginv(np);
    if (m == 0) {
      z = gn;
      r.resize(0);
      return;
    }
    Matrix N(n, m);
    for (int k = 0; k < m; ++k) N.col(k) = sign[k] * cons[active[k]].n;
    Matrix GN(n, m);
    for (int k = 0; k < m; ++k) GN.col(k) = ginv(N.col(k));
    Matrix M = N.transpose() * GN;
    r = M.ldlt().solve(N.transpose() * gn);
    z = gn - GN * r;
  };

  auto drop = [&](int k) {
    active.erase(active.begin() + k);
    sign.erase(sign.begin() + k);
    dual.erase(dual.begin() + k);
  };

  QpSolution sol;
  sol.status = QpStatus::Optimal;
  int iters = 0;
  const double feas_eps = 1e-10;
  const double zero_eps = 1e-12;

  // Phase 0: enforce equalities.
  for (int c = 0; c < mc && cons[c].is_eq; ++c) {
    const double s0 = cons[c].n.dot(x) + cons[c].b;
    const double sg = s0 > 0 ? -1.0 : 1.0;
    double u_plus = 0.0;
    const Vector np = sg * cons[c].n;
    const double bp = sg * cons[c].b;
    for (int guard = 0; guard <= max_iter; ++guard) {
      double s = np.dot(x) + bp;
      if (std::abs(s) <= feas_eps) break;
      Vector z, r;
      build_step(np, z, r);
      double ztn = z.dot(np);
      double sv = np.dot(x) + bp;  // < 0
      double t1 = kInf;
      int blocker = -1;
      for (int k = 0; k < static_cast<int>(active.size()); ++k) {
        if (cons[active[k]].is_eq) continue;
        if (r.size() > k && r(k) > zero_eps && dual[k] / r(k) < t1) {
          t1 = dual[k] / r(k);
          blocker = k;
        }
      }
      double t2 = ztn > zero_eps * (1.0 + z.norm() * np.norm()) ? -sv / ztn : kInf;
      if (t1 == kInf && t2 == kInf) {
        sol.status = QpStatus::Infeasible;
        break;
      }
      if (t2 == kInf) {
        for (int k = 0; k < static_cast<int>(active.size()); ++k) dual[k] -= t1 * r(k);
        u_plus += t1;
        drop(blocker);
        continue;
      }
      double t = std::min(t1, t2);
      x += t * z;
      for (int k = 0; k < static_cast<int>(active.size()); ++k) dual[k] -= t * r(k);
      u_plus += t;
      if (t2 <= t1) break;
      drop(blocker);
    }
    if (sol.status != QpStatus::Optimal) break;
    active.push_back(c);
    sign.push_back(sg);
    dual.push_back(u_plus);
  }

  // Phase 1: dual active-set over inequalities.
  while (sol.status == QpStatus::Optimal) {
    int worst = -1;
    double worst_s = -feas_eps;
    for (int c = me > 0 ? me : 0; c < mc; ++c) {
      if (cons[c].is_eq) continue;
      bool in_active = false;
      for (int a : active)
        if (a == c) { in_active = true; break; }
      if (in_active) continue;
      double s = cons[c].n.dot(x) + cons[c].b;
      if (s < worst_s) {
        worst_s = s;
        worst = c;
      }
    }
    if (worst < 0) break;  // primal feasible: done
    if (++iters > max_iter) {
      sol.status = QpStatus::MaxIter;
      break;
    }
    const Vector& np = cons[worst].n;
    const double bp = cons[worst].b;
    double u_plus = 0.0;
    bool added = false;
    for (int guard = 0; guard <= max_iter + static_cast<int>(active.size()); ++guard) {
      Vector z, r;
      build_step(np, z, r);
      double s = np.dot(x) + bp;
      if (s >= -feas_eps) {  // satisfied while dropping blockers
        added = true;        // nothing to add; treat as resolved
        break;
      }
      double ztn = z.dot(np);
      double t1 = kInf;
      int blocker = -1;
      for (int k = 0; k < static_cast<int>(active.size()); ++k) {
        if (cons[active[k]].is_eq) continue;
        if (r.size() > k && r(k) > zero_eps && dual[k] / r(k) < t1) {
          t1 = dual[k] / r(k);
          blocker = k;
        }
      }
      double t2 = ztn > zero_eps * (1.0 + z.norm() * np.norm()) ? -s / ztn : kInf;
      if (t1 == kInf && t2 == kInf) {
        sol.status = QpStatus::Infeasible;
        break;
      }
      if (t2 == kInf) {
        for (int k = 0; k < static_cast<int>(active.size()); ++k) dual[k] -= t1 * r(k);
        u_plus += t1;
        drop(blocker);
        continue;
      }
      double t = std::min(t1, t2);
      x += t * z;
      for (int k = 0; k < static_cast<int>(active.size()); ++k) dual[k] -= t * r(k);
      u_plus += t;
      if (t2 <= t1) {
        active.push_back(worst);
        sign.push_back(1.0);
        dual.push_back(u_plus);
        added = true;
        break;
      }
      drop(blocker);
    }
    if (!added && sol.status == QpStatus::Optimal) sol.status = QpStatus::MaxIter;
    if (sol.status != QpStatus::Optimal) break;
  }

  // Assemble multipliers so that  P x + q = Aeq' le + Ain' li + lb.
  sol.x = x;
  sol.lambda_eq = Vector::Zero(me);
  sol.lambda_in = Vector::Zero(mi);
  sol.lambda_bnd = Vector::Zero(n);
  for (int k = 0; k < static_cast<int>(active.size()); ++k) {
    const Constraint& c = cons[active[k]];
    double u = sign[k] * dual[k];
    switch (c.block) {
      case 0: sol.lambda_eq(c.row) += u; break;
      case 1: sol.lambda_in(c.row) += u; break;
      case 2: sol.lambda_in(c.row) -= u; break;
      case 3: sol.lambda_bnd(c.row) += u; break;
      case 4: sol.lambda_bnd(c.row) -= u; break;
    }
  }

  // KKT residual against the original data.
  Vector grad = 0.5 * (p.P + p.P.transpose()) * x + p.q;
  if (me > 0) grad -= p.Aeq.transpose() * sol.lambda_eq;
  if (mi > 0) grad -= p.Ain.transpose() * sol.lambda_in;
  grad -= sol.lambda_bnd;
  double res = grad.cwiseAbs().maxCoeff();
  if (me > 0) res = std::max(res, (p.Aeq * x - p.beq).cwiseAbs().maxCoeff());
  for (const auto& c : cons) {
    if (c.is_eq) continue;
    double s = c.n.dot(x) + c.b;
    res = std::max(res, std::max(0.0, -s));
  }
  for (int k = 0; k < static_cast<int>(active.size()); ++k) {
    const Constraint& c = cons[active[k]];
    if (c.is_eq) continue;
    double s = c.n.dot(x) + c.b;
    res = std::max(res, std::abs(dual[k] * s));
  }
  sol.kkt_residual = res;
  sol.iterations = iters;
  if (sol.status == QpStatus::Optimal && res >= tol) sol.status = QpStatus::MaxIter;
  return sol;
}

Trajectory integrate_fixed(const DerivativeFn& f, const Vector& x0, double dt,
                           double t_end, IntegrationMethod method) {
  if (dt <= 0) throw std::invalid_argument("integrate_fixed: dt must be positive");
  Trajectory traj;
  Vector x = x0;
  double t = 0.0;
  traj.t.push_back(t);
  traj.x.push_back(x);
  const int steps = static_cast<int>(std::llround(t_end / dt));
  const int half = static_cast<int>(x0.size()) / 2;
  for (int i = 0; i < steps; ++i) {
    if (method == IntegrationMethod::RK4) {
      Vector k1 = f(t, x);
      Vector k2 = f(t + 0.5 * dt, x + 0.5 * dt * k1);
      Vector k3 = f(t + 0.5 * dt, x + 0.5 * dt * k2);
      Vector k4 = f(t + dt, x + dt * k3);
      x += (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    } else {
      Vector xd = f(t, x);
      x.tail(half) += dt * xd.tail(half);
      x.head(half) += dt * x.tail(half);
    }
    t = (i + 1) * dt;
    if (!x.allFinite()) throw NonFinite("integrate_fixed: state became non-finite");
    traj.t.push_back(t);
    traj.x.push_back(x);
  }
  return traj;
}

Matrix finite_diff_jacobian(const std::function<Vector(const Vector&)>& f,
                            const Vector& x0, double h) {
  if (h <= 0) throw std::invalid_argument("finite_diff_jacobian: h must be positive");
  Vector f0 = f(x0);
  Matrix J(f0.size(), x0.size());
  for (int j = 0; j < x0.size(); ++j) {
    Vector xp = x0, xm = x0;
    xp(j) += h;
    xm(j) -= h;
    Vector fp = f(xp), fm = f(xm);
    if (!fp.allFinite() || !fm.allFinite())
      throw NonFinite("finite_diff_jacobian: non-finite evaluation");
    J.col(j) = (fp - fm) / (2.0 * h);
  }
  return J;
}

}  // namespace biped::numkit
