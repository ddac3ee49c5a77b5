#include "biped/rom_lipm.hpp"

#include <cmath>

namespace biped::lipm {

std::pair<Eigen::Matrix2d, Eigen::Vector2d> lipm_matrices(const LipmParams& params,
                                                          double t) {
  const double w = params.omega();
  const double ch = std::cosh(w * t);
  const double sh = std::sinh(w * t);
  Eigen::Matrix2d A;
  A << ch, sh / w, w * sh, ch;
  Eigen::Vector2d B(1.0 - ch, -w * sh);
  return {A, B};
}

std::vector<RomState> propagate(const LipmParams& params, const RomState& s0,
                                const std::vector<double>& placements, double t_td) {
  if (placements.empty()) throw std::invalid_argument("propagate: no placements");
  if (t_td <= 0.0 || t_td > params.T + 1e-12)
    throw std::invalid_argument("propagate: t_td outside (0, T]");
  auto [A0, B0] = lipm_matrices(params, t_td);
  auto [A, B] = lipm_matrices(params, params.T);
  std::vector<RomState> out;
  Eigen::Vector2d s(s0.x, s0.xd);
  s = A0 * s + B0 * placements[0];
  out.push_back({s(0), s(1)});
  for (size_t k = 1; k < placements.size(); ++k) {
    s = A * s + B * placements[k];
    out.push_back({s(0), s(1)});
  }
  return out;
}

std::pair<RomState, double> periodic_touchdown_state(const LipmParams& params,
                                                     double v_des) {
  const double u = v_des * params.T;
  auto [A, B] = lipm_matrices(params, params.T);
  Eigen::Matrix2d M = A - Eigen::Matrix2d::Identity();
  Eigen::Vector2d xi = M.partialPivLu().solve(Eigen::Vector2d(u, 0.0));
  // xi is relative to the incoming stance foot; shift to the outgoing one.
  return {{xi(0) + u, xi(1)}, u};
}

FootPlan plan_footsteps(const LipmParams& params, const RomState& s0, double p0,
                        double t_td, const RomState& s_star, int N,
                        const Eigen::Matrix2d& Q, double R) {
  if (N < 2) throw std::invalid_argument("plan_footsteps: N must be >= 2");
  auto [A0, B0] = lipm_matrices(params, t_td);
  auto [A, B] = lipm_matrices(params, params.T);

  const Eigen::Vector2d S1 = A0 * Eigen::Vector2d(s0.x, s0.xd) + B0 * p0;

  // Condense: S_{k+1} = A^k S1 + sum_j A^{k-j} B p_j over decisions z=(p1..pN).
  std::vector<Eigen::Matrix2d> Apow(N);
  Apow[0] = Eigen::Matrix2d::Identity();
  for (int k = 1; k < N; ++k) Apow[k] = A * Apow[k - 1];

  Matrix P = Matrix::Zero(N, N);
  Vector q = Vector::Zero(N);
  double c0 = 0.0;
  for (int k = 1; k <= N - 1; ++k) {
    Matrix E = Matrix::Zero(2, N);
    for (int j = 1; j <= k; ++j) E.col(j - 1) = Apow[k - j] * B;
    E(0, k - 1) -= 1.0;  // error measured relative to support foot p_k
    Eigen::Vector2d f = Apow[k] * S1 - Eigen::Vector2d(s_star.x, s_star.xd);
    P += 2.0 * E.transpose() * Q * E;
    q += 2.0 * E.transpose() * Q * f;
    c0 += f.dot(Q * f);
  }
  for (int i = 0; i + 1 < N; ++i) {  // R (p_{k+1} - p_k)^2, k = 1..N-1
    Eigen::RowVectorXd d = Eigen::RowVectorXd::Zero(N);
    d(i) = -1.0;
    d(i + 1) = 1.0;
    P += 2.0 * R * d.transpose() * d;
  }

  numkit::QpProblem qp;
  qp.P = 0.5 * (P + P.transpose());
  qp.q = q;
  auto sol = numkit::solve_qp(qp, 1e-8, 200);
  if (sol.status != numkit::QpStatus::Optimal)
    throw SolverFailed("plan_footsteps: QP did not reach optimality");

  FootPlan plan;
  plan.t_td = t_td;
  plan.placements.resize(N);
  plan.placements[0] = p0;
  for (int k = 1; k < N; ++k) plan.placements[k] = sol.x(k - 1);
  plan.states = propagate(params, s0, plan.placements, t_td);
  plan.cost = 0.5 * sol.x.dot(P * sol.x) + q.dot(sol.x) + c0;
  return plan;
}

}  // namespace biped::lipm
