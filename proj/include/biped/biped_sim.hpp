#pragma once

#include <Eigen/Dense>
#include <optional>
#include <string>
#include <vector>

#include "biped/numkit.hpp"

// Planar 7-link biped (torso, thighs, shanks, feet) with a floating base and
// compliant ground contact. Generalized coordinates:
//   q = [x, z, pitch, hip_l, knee_l, ankle_l, hip_r, knee_r, ankle_r]
// (x, z) is the hip point, pitch the torso angle (CCW, 0 = upright), and the
// joint angles are relative to the parent link (all zero = standing straight
// with flat feet). x points in the walking direction, z up.
namespace biped::sim {

constexpr int kNq = 9;
constexpr int kNj = 6;  // actuated joints: hip, knee, ankle per leg

using Vec2 = Eigen::Vector2d;
using VecQ = Eigen::Matrix<double, kNq, 1>;
using VecJ = Eigen::Matrix<double, kNj, 1>;
using MatQ = Eigen::Matrix<double, kNq, kNq>;
using Jac2 = Eigen::Matrix<double, 2, kNq>;

struct BipedModel {
  double m_torso = 17.0, m_thigh = 3.5, m_shank = 2.5, m_foot = 0.5;
  double l_torso = 0.60, l_thigh = 0.40, l_shank = 0.40;
  // foot sole geometry relative to the ankle, in the foot frame
  double foot_heel = -0.06, foot_toe = 0.10, ankle_height = 0.05;
  double i_torso = 0.51, i_thigh = 0.0467, i_shank = 0.0333, i_foot = 0.0011;
  // actuation and joint limits, one leg (left/right symmetric)
  double tau_max_hip = 150.0, tau_max_knee = 150.0, tau_max_ankle = 60.0;
  double hip_lo = -1.6, hip_hi = 1.6;
  double knee_lo = -2.4, knee_hi = 0.05;
  double ankle_lo = -1.0, ankle_hi = 1.0;
  // contact parameters
  double k_n = 1.0e6;   // N/m^{3/2}
  double d_n = 8.0;     // s/m
  double k_t = 2.0e5;   // N/m
  double d_t = 300.0;   // N s/m
  double mu = 0.8;

  double total_mass() const {
    return m_torso + 2.0 * (m_thigh + m_shank + m_foot);
  }
  VecJ tau_max() const {
    VecJ t;
    t << tau_max_hip, tau_max_knee, tau_max_ankle, tau_max_hip, tau_max_knee,
        tau_max_ankle;
    return t;
  }
};

struct GeneralizedState {
  VecQ q = VecQ::Zero();
  VecQ v = VecQ::Zero();
};

// Piecewise-linear terrain; segments extrapolate at the ends.
class Terrain {
 public:
  Terrain() : Terrain(flat()) {}
  explicit Terrain(std::vector<Vec2> points);
  static Terrain flat(double z = 0.0);
  static Terrain uniform_slope(double sigma);  // through the origin

  double height(double x) const;
  double slope(double x) const;  // local slope angle sigma [rad]

 private:
  std::vector<Vec2> points_;
};

struct PointContact {
  bool active = false;
  bool sticking = false;
  double pen = 0.0;       // normal penetration [m], >= 0 when active
  double fn = 0.0;        // normal force [N], >= 0
  double ft = 0.0;        // tangential force [N], |ft| <= mu fn
  double anchor_s = 0.0;  // tangential stick anchor coordinate
  Vec2 pos = Vec2::Zero();
  Vec2 force = Vec2::Zero();  // world frame
};

struct FootContact {
  PointContact heel, toe;
  double normal_total() const { return heel.fn + toe.fn; }
  bool in_contact(double f_thresh = 5.0) const {
    return normal_total() >= f_thresh;
  }
};

struct ContactState {
  FootContact left, right;
  double normal_total() const {
    return left.normal_total() + right.normal_total();
  }
};

// Kinematics of one material point: world position, Jacobian, velocity, and
// the bias acceleration Jdot*v (acceleration at qdd = 0).
struct PointKin {
  Vec2 pos = Vec2::Zero();
  Vec2 vel = Vec2::Zero();
  Vec2 bias = Vec2::Zero();
  Jac2 J = Jac2::Zero();
};

struct FootKin {
  PointKin ankle, heel, toe;
  double angle = 0.0;            // absolute foot angle, 0 = flat
  Eigen::Matrix<double, 1, kNq> J_angle = Eigen::Matrix<double, 1, kNq>::Zero();
};

struct Kinematics {
  PointKin com;  // whole-body center of mass
  PointKin hip;  // base point
  FootKin foot_l, foot_r;
  double torso_pitch = 0.0;  // forward-lean positive (= -q[2])
};

Kinematics kinematics(const BipedModel& model, const VecQ& q,
                      const VecQ& v = VecQ::Zero());

struct DynamicsTerms {
  MatQ H = MatQ::Zero();
  VecQ C = VecQ::Zero();  // velocity-product (Coriolis/centrifugal) vector
  VecQ G = VecQ::Zero();  // gravity vector: H qdd + C + G = S tau + Jc^T Fc
  Jac2 J_heel_l, J_toe_l, J_heel_r, J_toe_r;
};

DynamicsTerms dynamics_terms(const BipedModel& model, const VecQ& q,
                             const VecQ& v);

double mechanical_energy(const BipedModel& model, const VecQ& q, const VecQ& v);

// Linear momentum and angular momentum about the whole-body CoM.
Eigen::Vector3d momentum(const BipedModel& model, const VecQ& q, const VecQ& v);

// Compliant contact: normal force k_n pen^{3/2} (1 + d_n pen_rate) clamped
// at zero, tangential stick-anchor spring clamped by the friction cone.
// `prev` carries the stick anchors between steps.
ContactState contact_forces(const BipedModel& model, const VecQ& q, const VecQ& v,
                            const Terrain& terrain,
                            const ContactState* prev = nullptr);

struct NonFinite : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct StepResult {
  GeneralizedState state;
  ContactState contact;       // forces applied during this step
  bool torque_clamped = false;
};

// Semi-implicit Euler step. Torques outside the limits are clamped (flagged
// in the result). Throws NonFinite with a state dump if integration blows up.
// The default dt is the largest stable step for the stiff foot contact.
StepResult step(const BipedModel& model, const GeneralizedState& state,
                const VecJ& torques, const Terrain& terrain, double dt = 2e-4,
                const ContactState* prev_contact = nullptr);

enum class Event {
  HeelStrikeL,
  HeelStrikeR,
  ToeOffL,
  ToeOffR,
  MidStance,
};

// Edge-triggered contact events between two consecutive contact states.
std::vector<Event> detect_events(const ContactState& prev, const ContactState& now,
                                 double f_thresh = 5.0);
// Adds MidStance when the stance-hip horizontal offset from the stance ankle
// crosses zero (walking forward: negative to non-negative).
std::vector<Event> detect_events(const ContactState& prev, const ContactState& now,
                                 double prev_hip_offset, double now_hip_offset,
                                 double f_thresh = 5.0);

}  // namespace biped::sim
