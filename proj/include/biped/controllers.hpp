#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "biped/biped_sim.hpp"
#include "biped/ip_policy.hpp"
#include "biped/rom_ip.hpp"
#include "biped/rom_lipm.hpp"

// The two walking controller stacks. The prescriptive stack plans footsteps
// with the LIPM MPC and tracks CoM / torso / swing-foot references with a
// task-space QP. The descriptive stack commands only the key gait parameters
// (foot placement, push-off, stance ankle torque, three posture angles) and
// realizes them with joint-level PD.
namespace biped::ctrl {

using sim::Vec2;
using sim::VecJ;
using sim::VecQ;

// ---------------------------------------------------------------------------
// Supervisory state machine

enum class Phase { SingleSupportL, SingleSupportR, DoubleSupport, Flight };

const char* phase_name(Phase p);

// Applies edge-triggered contact events to the support set implied by the
// current phase. Heel strike dominates toe off of the same foot in one
// batch; contradictory events (e.g. a heel strike of a foot already in
// support) are recorded in `log` and otherwise ignored.
Phase fsm_update(Phase phase, const std::vector<sim::Event>& events,
                 std::vector<std::string>* log = nullptr);

// ---------------------------------------------------------------------------
// Joint-level PD

struct PdGains {
  VecJ kp = VecJ::Zero();
  VecJ kd = VecJ::Zero();
  // Hips/knees 300 / 15, ankles 120 / 6. Sized to settle a single-joint
  // step response in ~0.15 s while staying stable on the light foot link
  // at the simulator's default step.
  static PdGains defaults();
};

VecJ joint_pd(const VecJ& q_des, const VecJ& qd_des, const VecJ& q,
              const VecJ& qd, const PdGains& gains, const VecJ& tau_max);

// ---------------------------------------------------------------------------
// Swing-foot trajectory

struct Quintic {
  Eigen::Matrix<double, 6, 1> c = Eigen::Matrix<double, 6, 1>::Zero();

  double pos(double t) const;
  double vel(double t) const;
  double acc(double t) const;

  // Unique quintic with the given endpoint position/velocity/acceleration.
  static Quintic boundary(double p0, double v0, double a0, double p1, double v1,
                          double a1, double T);
  // Endpoint position/velocity plus an interior stationary point of the
  // given value at T/2 (used for the vertical foot path apex).
  static Quintic through_apex(double p0, double v0, double p1, double v1,
                              double apex, double T);
};

struct SwingPlan {
  Quintic x, z;
  double duration = 0.0;
  Vec2 target = Vec2::Zero();
  double clearance = 0.0;
  bool target_clamped = false;

  Vec2 pos(double t) const;
  Vec2 vel(double t) const;
  Vec2 acc(double t) const;
};

// Quintic foot path from the current pose to the target with the requested
// apex clearance and zero touchdown velocity. Targets farther than
// 0.95 * leg_length from the hip are pulled back onto that ball and flagged.
SwingPlan swing_trajectory(const Vec2& foot_pos, const Vec2& foot_vel,
                           Vec2 target, double duration, double clearance,
                           const Vec2& hip, double leg_length);

// Two-link leg IK: returns (absolute thigh angle, knee joint angle) for a
// desired hip-to-ankle vector; the distance is clamped to the reachable
// annulus. Knee flexion is negative (knee ahead of the hip-ankle line).
Vec2 leg_ik(const sim::BipedModel& model, const Vec2& hip_to_ankle);

// ---------------------------------------------------------------------------
// Task-space controller (QP over qdd, tau and contact forces)

struct TaskSpec {
  std::string id;        // "com" | "torso" | "swing" | ...
  numkit::Matrix A;      // task Jacobian, rows x kNq
  numkit::Vector bias;   // Adot * qdot
  numkit::Vector acc_des;
  numkit::Matrix Q;      // PSD weight, rows x rows
};

// One point contact handed to the QP; `foot` groups points for the CoP box.
struct TscContact {
  sim::Jac2 J = sim::Jac2::Zero();
  Vec2 bias = Vec2::Zero();
  Vec2 pos = Vec2::Zero();
  double sigma = 0.0;  // local terrain slope (normal/tangent frame)
  int foot = 0;
};

struct TscOptions {
  double mu = 0.8;
  double cop_shrink = 0.8;  // usable fraction of the support interval
  double w_tau = 1e-6;      // torque regularization
  double w_f = 1e-6;        // force regularization
  double w_qdd = 1e-6;      // acceleration regularization
  bool torque_limits = true;
};

struct TscResult {
  VecQ qdd = VecQ::Zero();
  VecJ tau = VecJ::Zero();
  std::vector<Vec2> forces;           // one per contact point, world frame
  std::vector<bool> friction_active;  // pyramid face active per point
  double kkt_residual = 0.0;
  bool feasible = false;
};

// Minimizes the weighted task accelerations subject to the whole-body
// dynamics, zero contact-point acceleration, the friction pyramid, the
// shrunk CoP interval per foot and torque limits.
TscResult tsc_solve(const sim::BipedModel& model, const sim::DynamicsTerms& dyn,
                    const std::vector<TaskSpec>& tasks,
                    const std::vector<TscContact>& contacts,
                    const TscOptions& opt = {});

// ---------------------------------------------------------------------------
// Posture policies (descriptive stack)

struct PostureTargets {
  double torso = 0.0;        // forward-lean target [rad]
  double stance_knee = 0.0;  // [rad], flexion negative
  double swing_knee = 0.0;   // touchdown knee target [rad]
};

struct AffinePolicy {
  double k0 = 0.0, k_v = 0.0, k_sigma = 0.0;
  double eval(double v, double sigma) const {
    return k0 + k_v * v + k_sigma * sigma;
  }
};

struct PosturePolicySet {
  AffinePolicy torso, stance_knee, swing_knee;
  // trained hull; queries outside clamp and flag
  double v_lo = 0.2, v_hi = 1.2;
  double sigma_lo = -0.2, sigma_hi = 0.2;
};

// Hand-set coefficients that walk on flat ground and mild slopes.
PosturePolicySet default_postures();

struct PostureQuery {
  PostureTargets targets;
  bool out_of_hull = false;
};

PostureQuery posture_targets(const sim::BipedModel& model,
                             const PosturePolicySet& set, double v_des,
                             double sigma);

// ---------------------------------------------------------------------------
// Balance control (descriptive stack)

// Virtual stance leg: the ankle-to-hip line, with forward-lean angle
// theta (0 = hip above the ankle) and its rate.
struct VirtualLeg {
  double theta = 0.0;
  double omega = 0.0;
  double length = 0.0;
};

VirtualLeg virtual_leg(const sim::PointKin& hip, const sim::PointKin& ankle);

struct BalanceActions {
  ip::IpAction action;            // policy output (theta_sw, p)
  double touchdown_offset = 0.0;  // target ankle x ahead of the hip [m]
  double pushoff_torque = 0.0;    // trailing-ankle pulse amplitude [N m]
  double pushoff_duration = 0.0;  // [s]
  bool out_of_hull = false;
};

// Queries the step policy at mid-stance and converts the action into a
// Cartesian touchdown offset and an ankle torque pulse whose angular
// impulse matches the push-off impulse through the toe lever arm.
BalanceActions balance_actions(const policy::Policy& policy, double omega_k,
                               const sim::BipedModel& model,
                               double pushoff_duration,
                               double impulse_cap = 1e9);

// ---------------------------------------------------------------------------
// Closed-loop controllers

// Where each actuated joint's command came from this tick (structural
// introspection; the descriptive stack must not command non-key references).
enum class RefSource {
  None,
  Spline,          // swing hip/knee/ankle from the foot path
  TouchdownKnee,   // swing knee blend near touchdown
  PostureKnee,     // stance knee target
  TorsoReg,        // stance hip torso regulation
  VelocityReg,     // stance ankle orbital-energy torque
  Pushoff,         // trailing ankle pulse
  Tsc,             // task-space QP output (prescriptive)
  Hold,            // standing/fallback PD
};

struct TickResult {
  VecJ tau = VecJ::Zero();
  Phase phase = Phase::DoubleSupport;
  bool fell = false;
  bool step_completed = false;   // swing-leg heel strike this tick
  double step_length = 0.0;      // ankle-to-ankle at completion [m]
  std::array<RefSource, sim::kNj> source{};
};

struct ControllerConfig {
  double v_des = 0.65;
  double sigma = 0.0;  // nominal terrain slope fed to the posture policies
  PdGains gains = PdGains::defaults();
  double pushoff_duration = 0.06;
  double pushoff_scale = 1.0;   // delivered fraction of the policy impulse
  double pushoff_impulse_max = 24.0;  // per-step impulse cap [N s]
  double pushoff_work_max = 25.0;     // per-pulse delivered-work cap [J]
  double swing_clearance = 0.045;
  double swing_blend = 0.2;     // final swing fraction for the knee blend
  double fall_pitch = M_PI / 3.0;
  double fall_hip_height = 0.3;
  double t_pref = 0.45;         // preferred step period [s]
  double e_trim_gain = 6.0;     // orbital-energy setpoint trim per step [J s/m]
  double e_trim_max = 25.0;     // trim authority [J]
  double e_trim_min = -12.0;    // braking-side trim authority [J]
  double vel_brake_max = 6.0;   // braking ankle torque ceiling [N m]
  double e_slope_ff = 1.0;      // feedforward on the energy setpoint for the
                                // per-step climb (fraction of m g dh / 2)
  double knee_climb = 0.0;      // stance-knee extension per unit slope sine,
                                // ramped in through late stance [rad]
  double scuff_margin = 0.0;    // extra mid-swing ground clearance [m]
  double lean_ramp = 0.0;       // seconds to blend the slope posture in
                                // from an upright start (0 = immediate)
  double torso_kp = 300.0;      // stance-hip torso regulation
  double torso_kd = 35.0;
  double swing_tau_clamp = 50.0;  // swing hip/knee torque ceiling [N m]
  double step_scale = 1.0;        // fraction of the policy's step geometry
  double press_overrun = 1.2;     // early press when the vault passes this
                                  // multiple of the commanded leg angle
  TscOptions tsc;
  double control_dt = 1e-3;     // task-space QP rate (prescriptive)
};

// Fig. 9 stack: balance control + posture control + supervisory FSM,
// realized purely with joint-level PD on the key parameters.
class DescriptiveController {
 public:
  DescriptiveController(policy::Policy step_policy,
                        policy::VelocityPolicy velocity_policy,
                        PosturePolicySet postures, ControllerConfig cfg);

  TickResult tick(const sim::BipedModel& model, const sim::GeneralizedState& s,
                  const sim::ContactState& contact, const sim::Terrain& terrain,
                  double dt);

  Phase phase() const { return phase_; }
  bool fallen() const { return fell_; }
  int steps_completed() const { return steps_; }
  const std::vector<std::string>& fsm_log() const { return fsm_log_; }
  // last mid-stance policy query (for telemetry and tests)
  const BalanceActions& last_actions() const { return actions_; }
  double last_omega() const { return last_omega_; }

 private:
  int stance_leg() const { return stance_left_ ? 0 : 1; }
  int swing_leg() const { return stance_left_ ? 1 : 0; }

  policy::Policy policy_;
  policy::VelocityPolicy vpol_;
  PosturePolicySet postures_;
  ControllerConfig cfg_;

  Phase phase_ = Phase::DoubleSupport;
  bool stance_left_ = true;   // stance (or trailing, in double support) leg
  bool fell_ = false;
  int steps_ = 0;
  double t_ = 0.0;
  double t_phase_ = 0.0;
  double prev_hip_offset_ = 0.0;
  bool have_prev_contact_ = false;
  sim::ContactState prev_contact_;

  std::optional<SwingPlan> plan_;
  double plan_t_ = 0.0;
  BalanceActions actions_;
  double t_since_step_ = 1e9;    // refractory window against contact chatter
  double last_omega_ = 0.0;      // virtual-leg rate at the last mid-stance
  bool midstance_done_ = false;  // one policy query per step
  double landing_knee_ = -0.3;   // stance knee angle captured at touchdown
  bool touchdown_push_ = true;   // foot released from its hover onto the ground
  double release_t_ = -1.0;      // plan time of an early press, -1 when unused
  double plan_theta_ = 0.0;      // commanded touchdown angle of the active plan
  bool emergency_done_ = false;  // one backward catch step per stance
  double e_trim_ = 0.0;          // integral trim on the orbital-energy setpoint
  double e_extra_ = 0.0;         // slope surcharge on the mid-stance energy
  double prev_step_t_ = -1.0;    // per-step speed bookkeeping for the trim
  double prev_step_x_ = 0.0;
  bool pushoff_armed_ = false;   // pulse scheduled for late swing
  double pushoff_left_ = 0.0;    // remaining pulse time on the trailing ankle
  double pushoff_tau_ = 0.0;
  double pushoff_work_ = 0.0;    // work delivered by the active pulse
  double e_des_ = 0.0;           // orbital energy target at mid-stance
  double omega_nom_ = 0.0;       // nominal-gait mid-stance rate
  double theta_nom_ = 0.0;       // nominal step half-angle
  double dur_nom_ = 0.0;         // nominal step duration
  std::vector<std::string> fsm_log_;
};

// Fig. 3 stack: footstep MPC + reference generators + task-space QP.
class PrescriptiveController {
 public:
  PrescriptiveController(lipm::LipmParams rom, ControllerConfig cfg);

  TickResult tick(const sim::BipedModel& model, const sim::GeneralizedState& s,
                  const sim::ContactState& contact, const sim::Terrain& terrain,
                  double dt);

  Phase phase() const { return phase_; }
  bool fallen() const { return fell_; }
  int steps_completed() const { return steps_; }
  int qp_fallbacks() const { return qp_fallbacks_; }

 private:
  void replan(const sim::Kinematics& kin);
  VecJ solve_tsc(const sim::BipedModel& model, const sim::GeneralizedState& s,
                 const sim::Kinematics& kin, const sim::ContactState& contact,
                 const sim::Terrain& terrain);

  lipm::LipmParams rom_;
  ControllerConfig cfg_;

  Phase phase_ = Phase::DoubleSupport;
  bool stance_left_ = true;
  bool fell_ = false;
  bool walking_ = false;  // false: stand and regulate the CoM in place
  bool init_ = false;
  int steps_ = 0;
  int qp_fallbacks_ = 0;
  double t_ = 0.0;
  double t_step_ = 0.0;      // time since the current step's touchdown
  double step_period_ = 0.4;
  bool have_prev_contact_ = false;
  sim::ContactState prev_contact_;

  double p_stance_ = 0.0;    // current stance foot abscissa (plan frame)
  double p_next_ = 0.0;      // planned next placement
  lipm::RomState s_td_;      // CoM state at the last touchdown
  double com_z_ref_ = 0.0;
  std::optional<SwingPlan> plan_;
  double plan_t_ = 0.0;
  VecJ held_tau_ = VecJ::Zero();
  double since_solve_ = 1e9;
};

}  // namespace biped::ctrl
