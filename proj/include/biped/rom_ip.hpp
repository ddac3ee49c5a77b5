#pragma once

#include <optional>
#include <string>
#include <vector>

#include "biped/numkit.hpp"

// Descriptive inverted-pendulum step map: a point-mass hip on massless legs,
// reduced to the mid-stance Poincare section. One step is swing-down,
// push-off + heel-strike, swing-up.
namespace biped::ip {

struct IpParams {
  double m = 30.0;  // hip point mass [kg]
  double l = 0.8;   // leg length [m]
  double g = 9.81;
};

struct IpStepState {
  double omega_k = 0.0;  // stance-leg rate at mid-stance [rad/s], >0 forward
};

struct IpAction {
  double theta_sw = 0.0;  // step half-angle [rad], step length = 2 l sin(theta_sw)
  double p = 0.0;         // push-off impulse along the stance leg [N s];
                          // negative injects energy under the impact-map sign
};

constexpr double kThetaSwMax = M_PI / 3.0;

// Energy-conserving swing from mid-stance down to the step angle.
double swing_down(const IpParams& params, double omega_k, double theta_sw);

// Push-off impulse followed by heel-strike, momentum balance about the new
// contact. Linear in (omega_minus, p) for fixed theta_sw.
double pushoff_and_impact(const IpParams& params, double omega_minus,
                          double theta_sw, double p);

// Swing back up to mid-stance; empty when the energy does not suffice
// (fall-backward, the absorbing failure of the step MDP).
std::optional<double> swing_up(const IpParams& params, double omega_plus,
                               double theta_sw);

std::optional<IpStepState> step_map(const IpParams& params, const IpStepState& s,
                                    const IpAction& a);

// Push-off that makes (omega, theta_sw) a period-1 fixed point of step_map.
double periodic_pushoff(const IpParams& params, double omega, double theta_sw);

// Time to rotate from mid-stance to theta_sw starting at rate omega
// (infinite when omega == 0). Also the swing-up time by time reversal.
double swing_time(const IpParams& params, double omega, double theta_sw);

struct StepOutcome {
  double omega_next = 0.0;
  double step_length = 0.0;  // 2 l sin(theta_sw)
  double duration = 0.0;     // swing-down + swing-up time [s]
  double mean_speed = 0.0;   // step_length / duration
};

std::optional<StepOutcome> step_outcome(const IpParams& params, const IpStepState& s,
                                        const IpAction& a);

// Periodic gait with mean speed v_des and preferred step period t_pref:
// theta from the step length v_des * t_pref, omega by bisection so the
// half-step time matches, p from periodic_pushoff.
struct NominalGait {
  double omega = 0.0;
  double theta_sw = 0.0;
  double p = 0.0;
  double duration = 0.0;
};
NominalGait nominal_gait(const IpParams& params, double v_des, double t_pref = 0.45);

// Energy budget of one step: E_{k+1} - E_k = w_pushoff + w_collision with
// w_pushoff = p^2/(2m) and w_collision <= 0.
struct StepEnergy {
  double w_pushoff = 0.0;
  double w_collision = 0.0;
};
StepEnergy step_energy(const IpParams& params, double omega_k, double theta_sw,
                       double p);

enum class OrbitDir { Up, Down };

// Unforced stance motion parameters. E is mechanical energy relative to rest
// at the apex: E = 1/2 m l^2 w^2 + m g l (cos(theta) - 1); constant along
// unforced motion, positive iff the mass carries enough energy to pass apex.
struct OrbitParams {
  double E = 0.0;       // [J]
  double x_foot = 0.0;  // stance foot abscissa [m]
  OrbitDir dir = OrbitDir::Up;
};

OrbitParams orbit_of(const IpParams& params, double theta, double theta_dot,
                     double x_foot);

// Orbit energy at a given (theta, theta_dot).
double orbit_energy(const IpParams& params, double theta, double theta_dot);

struct OrbitTransition {
  std::optional<IpAction> action;  // empty = time passage
  OrbitParams target;
};

// Successors of an orbit: the time-passage successor always (up -> down on
// the same orbit, down stays put), stance-change successors only while
// traveling down and only for step angles the orbit can reach.
std::vector<OrbitTransition> enumerate_transitions(const IpParams& params,
                                                   const OrbitParams& o,
                                                   const std::vector<IpAction>& grid);

struct OrbitGraph {
  struct Node {
    int e_bin = 0;
    int x_bin = 0;
    OrbitDir dir = OrbitDir::Up;
    bool operator==(const Node&) const = default;
  };
  struct Edge {
    int from = 0;
    int to = 0;
    bool stance_change = false;
    IpAction action;  // meaningful only for stance-change edges
  };
  double e_bin_width = 0.02;  // [J]
  double x_bin_width = 0.05;  // [m]
  std::vector<Node> nodes;
  std::vector<Edge> edges;
};

// Breadth-first expansion of the bucketed orbit graph from a root orbit.
OrbitGraph build_orbit_graph(const IpParams& params, const OrbitParams& root,
                             const std::vector<IpAction>& grid, int max_depth);

// JSON adjacency list (nodes with E/x bins, edges labeled time|stance-change).
std::string orbit_graph_json(const OrbitGraph& g);

}  // namespace biped::ip
