#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "biped/rom_ip.hpp"

// Step-to-step MDP on the inverted-pendulum model, solved by value iteration
// over discretized states/actions, plus the linear orbital velocity policy.
namespace biped::policy {

using ip::IpAction;
using ip::IpParams;
using ip::IpStepState;

struct MdpSpec {
  IpParams params;
  std::vector<double> omega_grid;  // mid-stance rate [rad/s], strictly increasing
  std::vector<double> theta_grid;  // step half-angle [rad]
  std::vector<double> p_grid;      // push-off impulse [N s]
  double gamma = 0.9;
  double c1 = 1.0, c2 = 0.05, c3 = 0.05;
  double a1 = 2.0, a2 = 2.0, a3 = 2.0;
  double v_des = 0.65;   // [m/s]
  double r_fall = -10.0;

  void validate() const;
  int num_states() const { return static_cast<int>(omega_grid.size()); }
  int num_actions() const {
    return static_cast<int>(theta_grid.size() * p_grid.size());
  }
  IpAction action(int a) const {
    const int np = static_cast<int>(p_grid.size());
    return {theta_grid[a / np], p_grid[a % np]};
  }
};

// Grids sized per the stock configuration: omega 60 x theta 23 x p 25,
// p spanning [-1, 0.2] m l (impact-map sign: negative injects energy).
MdpSpec default_mdp_spec(const IpParams& params, double v_des);

// r = c1 exp(-|v - v_des|^a1) + c2 exp(-|d/T|^a2) + c3 exp(-|p v|^a3)
// with v the per-step mean speed, d the step length and T the step duration.
double reward(const MdpSpec& spec, const IpStepState& s, const IpAction& a,
              const ip::StepOutcome& outcome);

// Deterministic tabular MDP with linear interpolation onto the state grid.
struct TabularMdp {
  struct Transition {
    int i0 = 0, i1 = 0;
    double w0 = 1.0, w1 = 0.0;
    double r = 0.0;
    bool fall = false;
  };
  int n_states = 0;
  int n_actions = 0;
  double gamma = 0.9;
  double r_fall = -10.0;
  std::vector<Transition> table;  // [s * n_actions + a]
  const Transition& at(int s, int a) const { return table[s * n_actions + a]; }
};

TabularMdp build_mdp(const MdpSpec& spec);

struct ValueIterationResult {
  std::vector<double> value;
  std::vector<int> best_action;
  std::vector<bool> viable;  // false when every action falls
  std::vector<double> sweep_residuals;
  double residual = 0.0;
};

ValueIterationResult value_iterate_tabular(const TabularMdp& mdp, double tol = 1e-8,
                                           int max_sweeps = 10000);

struct Policy {
  MdpSpec spec;
  std::vector<int> best_action;
  std::vector<double> value;
  std::vector<bool> viable;
  double residual = 0.0;
};

Policy value_iterate(const MdpSpec& spec, double tol = 1e-8);

struct QueryResult {
  IpAction action;
  bool out_of_hull = false;
};

// Linear interpolation of the greedy action between bracketing grid states;
// queries beyond the hull clamp and flag.
QueryResult query(const Policy& policy, double omega_k);

// Closed-loop IP rollout under the interpolated policy; returns per-step
// mean speeds (empty entries stop at a fall).
std::vector<double> rollout_policy(const Policy& policy, double omega0, int steps);

struct VelocityPolicy {
  double k_e = 0.0;      // gain on (E_des - E) [N m / J]
  double k_phase = 0.0;  // gain on the stance-leg angle [N m / rad]
  double tau_max = 60.0;

  double torque(double e_err, double phase) const {
    return std::clamp(k_e * e_err + k_phase * phase, -tau_max, tau_max);
  }
};

struct RolloutEval {
  double cost = 0.0;
  bool fell = false;
};

// plant(candidate, seed) runs one closed-loop episode and reports the
// accumulated (E - E_des)^2 + w_tau tau^2 cost.
using PlantFn = std::function<RolloutEval(const VelocityPolicy&, std::uint64_t)>;

struct AllUnstable : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Exhaustive search over candidate gains with seeded episodes; ties broken
// by smaller gain norm. Throws AllUnstable when every candidate falls in
// every episode.
VelocityPolicy fit_velocity_policy(const PlantFn& plant,
                                   const std::vector<VelocityPolicy>& candidates,
                                   int episodes, std::uint64_t master_seed = 0);

std::string policy_to_json(const Policy& policy);
Policy policy_from_json(const std::string& text);
std::string velocity_policy_to_json(const VelocityPolicy& vp);
VelocityPolicy velocity_policy_from_json(const std::string& text);

}  // namespace biped::policy
