#pragma once

#include <utility>
#include <vector>

#include "biped/numkit.hpp"

// Linear inverted pendulum step dynamics, N-step propagation and the
// footstep-placement QP used by the model-predictive walking controller.
namespace biped::lipm {

using numkit::Matrix;
using numkit::Vector;

struct LipmParams {
  double z = 0.8;    // CoM height [m]
  double g = 9.81;   // gravity [m/s^2]
  double T = 0.4;    // fixed step time [s]
  double omega() const { return std::sqrt(g / z); }
};

struct RomState {
  double x = 0.0;   // CoM position [m]
  double xd = 0.0;  // CoM velocity [m/s]
};

struct FootPlan {
  std::vector<double> placements;  // p0..p_{N-1}
  double t_td = 0.0;               // time to first touchdown [s]
  std::vector<RomState> states;    // predicted S1..S_N
  double cost = 0.0;               // achieved QP objective
};

// Closed-form flow of xdd = w^2 (x - p) over time t: S(t) = A S0 + B p.
std::pair<Eigen::Matrix2d, Eigen::Vector2d> lipm_matrices(const LipmParams& params,
                                                          double t);

// S1 = A(t_td) S0 + B(t_td) p0, thereafter full steps of duration T.
std::vector<RomState> propagate(const LipmParams& params, const RomState& s0,
                                const std::vector<double>& placements, double t_td);

// Period-1 gait touchdown state for mean speed v_des, expressed relative to
// the outgoing stance foot: the unique xi with xi_next = A(T) xi - (u, 0),
// u = v_des * T. Returns (xi, u).
std::pair<RomState, double> periodic_touchdown_state(const LipmParams& params,
                                                     double v_des);

// Footstep QP. Decision variables are p1..pN with p0 fixed; tracking error
// of S_{k+1} is measured in the frame of its support foot p_k:
//   e_k = (x_{k+1} - p_k - s_star.x, xd_{k+1} - s_star.xd),  k = 1..N-1,
// plus smoothness R (p_{k+1} - p_k)^2. Throws on solver failure.
FootPlan plan_footsteps(const LipmParams& params, const RomState& s0, double p0,
                        double t_td, const RomState& s_star, int N,
                        const Eigen::Matrix2d& Q, double R);

struct SolverFailed : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace biped::lipm
