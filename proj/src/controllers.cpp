#include "biped/controllers.hpp"

#include <algorithm>
#include <cmath>

namespace biped::ctrl {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

struct Support {
  bool left = false, right = false;
};

Support support_of(Phase p) {
  switch (p) {
    case Phase::SingleSupportL: return {true, false};
    case Phase::SingleSupportR: return {false, true};
    case Phase::DoubleSupport: return {true, true};
    case Phase::Flight: return {false, false};
  }
  return {};
}

Phase phase_of(Support s) {
  if (s.left && s.right) return Phase::DoubleSupport;
  if (s.left) return Phase::SingleSupportL;
  if (s.right) return Phase::SingleSupportR;
  return Phase::Flight;
}

bool has_event(const std::vector<sim::Event>& events, sim::Event e) {
  return std::find(events.begin(), events.end(), e) != events.end();
}

}  // namespace

const char* phase_name(Phase p) {
  switch (p) {
    case Phase::SingleSupportL: return "single-support-left";
    case Phase::SingleSupportR: return "single-support-right";
    case Phase::DoubleSupport: return "double-support";
    case Phase::Flight: return "flight";
  }
  return "?";
}

Phase fsm_update(Phase phase, const std::vector<sim::Event>& events,
                 std::vector<std::string>* log) {
  Support s = support_of(phase);
  auto note = [&](const char* what) {
    if (log)
      log->push_back(std::string("illegal transition: ") + what + " in " +
                     phase_name(phase));
  };
  // toe offs first, so a heel strike of the same foot in one batch dominates
  for (sim::Event e : events) {
    if (e == sim::Event::ToeOffL) {
      if (!s.left) note("ToeOffL");
      s.left = false;
    } else if (e == sim::Event::ToeOffR) {
      if (!s.right) note("ToeOffR");
      s.right = false;
    }
  }
  for (sim::Event e : events) {
    if (e == sim::Event::HeelStrikeL) {
      if (s.left) note("HeelStrikeL");
      s.left = true;
    } else if (e == sim::Event::HeelStrikeR) {
      if (s.right) note("HeelStrikeR");
      s.right = true;
    }
  }
  return phase_of(s);
}

PdGains PdGains::defaults() {
  PdGains g;
  g.kp << 300.0, 300.0, 120.0, 300.0, 300.0, 120.0;
  g.kd << 15.0, 15.0, 6.0, 15.0, 15.0, 6.0;
  return g;
}

VecJ joint_pd(const VecJ& q_des, const VecJ& qd_des, const VecJ& q,
              const VecJ& qd, const PdGains& gains, const VecJ& tau_max) {
  VecJ tau = gains.kp.cwiseProduct(q_des - q) + gains.kd.cwiseProduct(qd_des - qd);
  return tau.cwiseMax(-tau_max).cwiseMin(tau_max);
}

// ---------------------------------------------------------------------------
// Quintic splines

double Quintic::pos(double t) const {
  double r = 0.0;
  for (int i = 5; i >= 0; --i) r = r * t + c(i);
  return r;
}

double Quintic::vel(double t) const {
  double r = 0.0;
  for (int i = 5; i >= 1; --i) r = r * t + i * c(i);
  return r;
}

double Quintic::acc(double t) const {
  double r = 0.0;
  for (int i = 5; i >= 2; --i) r = r * t + i * (i - 1) * c(i);
  return r;
}

namespace {

Eigen::Matrix<double, 1, 6> pos_row(double t) {
  Eigen::Matrix<double, 1, 6> r;
  double p = 1.0;
  for (int i = 0; i < 6; ++i, p *= t) r(i) = p;
  return r;
}

Eigen::Matrix<double, 1, 6> vel_row(double t) {
  Eigen::Matrix<double, 1, 6> r;
  r(0) = 0.0;
  double p = 1.0;
  for (int i = 1; i < 6; ++i, p *= t) r(i) = i * p;
  return r;
}

Eigen::Matrix<double, 1, 6> acc_row(double t) {
  Eigen::Matrix<double, 1, 6> r;
  r(0) = r(1) = 0.0;
  double p = 1.0;
  for (int i = 2; i < 6; ++i, p *= t) r(i) = i * (i - 1) * p;
  return r;
}

}  // namespace

Quintic Quintic::boundary(double p0, double v0, double a0, double p1, double v1,
                          double a1, double T) {
  Eigen::Matrix<double, 6, 6> M;
  Eigen::Matrix<double, 6, 1> b;
  M.row(0) = pos_row(0.0);
  M.row(1) = vel_row(0.0);
  M.row(2) = acc_row(0.0);
  M.row(3) = pos_row(T);
  M.row(4) = vel_row(T);
  M.row(5) = acc_row(T);
  b << p0, v0, a0, p1, v1, a1;
  Quintic q;
  q.c = M.fullPivLu().solve(b);
  return q;
}

Quintic Quintic::through_apex(double p0, double v0, double p1, double v1,
                              double apex, double T) {
  Eigen::Matrix<double, 6, 6> M;
  Eigen::Matrix<double, 6, 1> b;
  M.row(0) = pos_row(0.0);
  M.row(1) = vel_row(0.0);
  M.row(2) = pos_row(T);
  M.row(3) = vel_row(T);
  M.row(4) = pos_row(0.5 * T);
  M.row(5) = vel_row(0.5 * T);
  b << p0, v0, p1, v1, apex, 0.0;
  Quintic q;
  q.c = M.fullPivLu().solve(b);
  return q;
}

Vec2 SwingPlan::pos(double t) const {
  t = std::clamp(t, 0.0, duration);
  return {x.pos(t), z.pos(t)};
}

Vec2 SwingPlan::vel(double t) const {
  if (t < 0.0 || t > duration) return Vec2::Zero();
  return {x.vel(t), z.vel(t)};
}

Vec2 SwingPlan::acc(double t) const {
  if (t < 0.0 || t > duration) return Vec2::Zero();
  return {x.acc(t), z.acc(t)};
}

SwingPlan swing_trajectory(const Vec2& foot_pos, const Vec2& foot_vel,
                           Vec2 target, double duration, double clearance,
                           const Vec2& hip, double leg_length) {
  if (duration <= 0.05)
    throw std::invalid_argument("swing_trajectory: duration must exceed 0.05 s");
  SwingPlan plan;
  const Vec2 d = target - hip;
  const double reach = 0.95 * leg_length;
  if (d.norm() > reach) {
    // pull the target back onto the reachable ball; keep its height (the
    // terrain surface) when possible so a shortened step still lands
    const double dz = d.y();
    if (std::abs(dz) < reach) {
      const double dx = std::sqrt(reach * reach - dz * dz);
      target.x() = hip.x() + (d.x() >= 0.0 ? dx : -dx);
    } else {
      target = hip + reach * d.normalized();
    }
    plan.target_clamped = true;
  }
  plan.target = target;
  plan.duration = duration;
  plan.clearance = clearance;
  plan.x = Quintic::boundary(foot_pos.x(), foot_vel.x(), 0.0, target.x(), 0.0,
                             0.0, duration);
  const double apex = std::max(foot_pos.y(), target.y()) + clearance;
  plan.z = Quintic::through_apex(foot_pos.y(), foot_vel.y(), target.y(), 0.0,
                                 apex, duration);
  return plan;
}

Vec2 leg_ik(const sim::BipedModel& model, const Vec2& hip_to_ankle) {
  const double l1 = model.l_thigh;
  const double l2 = model.l_shank;
  double d = hip_to_ankle.norm();
  const Vec2 dir = d > 1e-9 ? Vec2(hip_to_ankle / d) : Vec2(0.0, -1.0);
  d = std::clamp(d, std::abs(l1 - l2) + 0.02, 0.995 * (l1 + l2));
  // angle of the hip-to-ankle line from straight down, forward positive
  const double phi_d = std::atan2(dir.x(), -dir.y());
  const double cg = std::clamp((l1 * l1 + d * d - l2 * l2) / (2.0 * l1 * d),
                               -1.0, 1.0);
  const double cb = std::clamp((l1 * l1 + l2 * l2 - d * d) / (2.0 * l1 * l2),
                               -1.0, 1.0);
  // knee ahead of the line: thigh rotated forward, knee angle negative
  return {phi_d + std::acos(cg), std::acos(cb) - M_PI};
}

// ---------------------------------------------------------------------------
// Task-space QP

TscResult tsc_solve(const sim::BipedModel& model, const sim::DynamicsTerms& dyn,
                    const std::vector<TaskSpec>& tasks,
                    const std::vector<TscContact>& contacts,
                    const TscOptions& opt) {
  using numkit::Matrix;
  using numkit::Vector;
  const int nc = static_cast<int>(contacts.size());
  const int nv = sim::kNq + sim::kNj + 2 * nc;
  const int if0 = sim::kNq + sim::kNj;  // first force variable

  numkit::QpProblem qp;
  qp.P = Matrix::Zero(nv, nv);
  qp.q = Vector::Zero(nv);
  for (int i = 0; i < sim::kNq; ++i) qp.P(i, i) = opt.w_qdd;
  for (int i = 0; i < sim::kNj; ++i)
    qp.P(sim::kNq + i, sim::kNq + i) = opt.w_tau;
  for (int i = 0; i < 2 * nc; ++i) qp.P(if0 + i, if0 + i) = opt.w_f;
  for (const TaskSpec& t : tasks) {
    const Matrix AtQ = t.A.transpose() * t.Q;
    qp.P.topLeftCorner(sim::kNq, sim::kNq) += AtQ * t.A;
    qp.q.head(sim::kNq) -= AtQ * (t.acc_des - t.bias);
  }

  // dynamics equality H qdd - S^T tau - sum J^T F = -(C + G),
  // plus zero acceleration at every contact point: J qdd = -Jdot qdot
  const int ne = sim::kNq + 2 * nc;
  qp.Aeq = Matrix::Zero(ne, nv);
  qp.beq = Vector::Zero(ne);
  qp.Aeq.topLeftCorner(sim::kNq, sim::kNq) = dyn.H;
  for (int i = 0; i < sim::kNj; ++i) qp.Aeq(3 + i, sim::kNq + i) = -1.0;
  qp.beq.head(sim::kNq) = -(dyn.C + dyn.G);
  for (int i = 0; i < nc; ++i) {
    qp.Aeq.block<sim::kNq, 2>(0, if0 + 2 * i) = -contacts[i].J.transpose();
    qp.Aeq.block<2, sim::kNq>(sim::kNq + 2 * i, 0) = contacts[i].J;
    qp.beq.segment<2>(sim::kNq + 2 * i) = -contacts[i].bias;
  }

  // friction pyramid per point and a shrunk CoP interval per foot
  std::vector<int> feet;
  for (const TscContact& c : contacts)
    if (std::find(feet.begin(), feet.end(), c.foot) == feet.end())
      feet.push_back(c.foot);
  int ncop = 0;
  for (int f : feet) {
    int n = 0;
    for (const TscContact& c : contacts) n += (c.foot == f);
    if (n >= 2) ncop += 2;
  }
  const int ni = 3 * nc + ncop;
  qp.Ain = Matrix::Zero(ni, nv);
  qp.lin = Vector::Constant(ni, -kInf);
  qp.uin = Vector::Constant(ni, kInf);
  for (int i = 0; i < nc; ++i) {
    const double sg = contacts[i].sigma;
    const Vec2 n(-std::sin(sg), std::cos(sg));
    const Vec2 tg(std::cos(sg), std::sin(sg));
    qp.Ain.block<1, 2>(3 * i, if0 + 2 * i) = n.transpose();
    qp.lin(3 * i) = 0.0;
    qp.Ain.block<1, 2>(3 * i + 1, if0 + 2 * i) = (tg - opt.mu * n).transpose();
    qp.uin(3 * i + 1) = 0.0;
    qp.Ain.block<1, 2>(3 * i + 2, if0 + 2 * i) = (tg + opt.mu * n).transpose();
    qp.lin(3 * i + 2) = 0.0;
  }
  int row = 3 * nc;
  for (int f : feet) {
    std::vector<int> idx;
    for (int i = 0; i < nc; ++i)
      if (contacts[i].foot == f) idx.push_back(i);
    if (idx.size() < 2) continue;
    double s_lo = kInf, s_hi = -kInf;
    for (int i : idx) {
      const double sg = contacts[i].sigma;
      const double s = contacts[i].pos.dot(Vec2(std::cos(sg), std::sin(sg)));
      s_lo = std::min(s_lo, s);
      s_hi = std::max(s_hi, s);
    }
    const double mid = 0.5 * (s_lo + s_hi);
    const double half = 0.5 * (s_hi - s_lo) * opt.cop_shrink;
    for (int i : idx) {
      const double sg = contacts[i].sigma;
      const Vec2 n(-std::sin(sg), std::cos(sg));
      const double s = contacts[i].pos.dot(Vec2(std::cos(sg), std::sin(sg)));
      // sum fn_i (s_i - lo) >= 0 and sum fn_i (hi - s_i) >= 0
      qp.Ain.block<1, 2>(row, if0 + 2 * i) = (s - (mid - half)) * n.transpose();
      qp.Ain.block<1, 2>(row + 1, if0 + 2 * i) =
          ((mid + half) - s) * n.transpose();
    }
    qp.lin(row) = 0.0;
    qp.lin(row + 1) = 0.0;
    row += 2;
  }

  if (opt.torque_limits) {
    qp.lx = Vector::Constant(nv, -kInf);
    qp.ux = Vector::Constant(nv, kInf);
    const VecJ lim = model.tau_max();
    for (int i = 0; i < sim::kNj; ++i) {
      qp.lx(sim::kNq + i) = -lim(i);
      qp.ux(sim::kNq + i) = lim(i);
    }
  }

  TscResult out;
  numkit::QpSolution sol = numkit::solve_qp(qp);
  out.kkt_residual = sol.kkt_residual;
  out.feasible = sol.status == numkit::QpStatus::Optimal;
  if (!out.feasible) return out;
  out.qdd = sol.x.head(sim::kNq);
  out.tau = sol.x.segment(sim::kNq, sim::kNj);
  out.forces.resize(nc);
  out.friction_active.resize(nc);
  for (int i = 0; i < nc; ++i) {
    out.forces[i] = sol.x.segment<2>(if0 + 2 * i);
    const double sg = contacts[i].sigma;
    const Vec2 n(-std::sin(sg), std::cos(sg));
    const Vec2 tg(std::cos(sg), std::sin(sg));
    const double fn = out.forces[i].dot(n);
    const double ft = out.forces[i].dot(tg);
    out.friction_active[i] = std::abs(ft) >= opt.mu * fn - 1e-6;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Posture policies

PosturePolicySet default_postures() {
  PosturePolicySet set;
  set.torso = {0.0, 0.0, 0.6};          // lean into the slope
  set.stance_knee = {-0.3, 0.0, 0.3};   // crouched enough to keep targets
  set.swing_knee = {-0.3, 0.0, 0.0};    // reachable at touchdown
  return set;
}

PostureQuery posture_targets(const sim::BipedModel& model,
                             const PosturePolicySet& set, double v_des,
                             double sigma) {
  PostureQuery out;
  const double v = std::clamp(v_des, set.v_lo, set.v_hi);
  const double s = std::clamp(sigma, set.sigma_lo, set.sigma_hi);
  out.out_of_hull = v != v_des || s != sigma;
  out.targets.torso = std::clamp(set.torso.eval(v, s), -0.6, 0.6);
  out.targets.stance_knee =
      std::clamp(set.stance_knee.eval(v, s), model.knee_lo, model.knee_hi);
  out.targets.swing_knee =
      std::clamp(set.swing_knee.eval(v, s), model.knee_lo, model.knee_hi);
  return out;
}

// ---------------------------------------------------------------------------
// Balance control

VirtualLeg virtual_leg(const sim::PointKin& hip, const sim::PointKin& ankle) {
  VirtualLeg v;
  const Vec2 d = hip.pos - ankle.pos;
  const Vec2 dv = hip.vel - ankle.vel;
  v.length = d.norm();
  v.theta = std::atan2(d.x(), d.y());
  v.omega = (dv.x() * d.y() - d.x() * dv.y()) / std::max(1e-9, d.squaredNorm());
  return v;
}

BalanceActions balance_actions(const policy::Policy& policy, double omega_k,
                               const sim::BipedModel& model,
                               double pushoff_duration, double impulse_cap) {
  BalanceActions b;
  const policy::QueryResult qr = policy::query(policy, omega_k);
  b.action = qr.action;
  b.out_of_hull = qr.out_of_hull;
  b.touchdown_offset = policy.spec.params.l * std::sin(qr.action.theta_sw);
  // angular impulse about the ankle matching the injected impulse through
  // the toe lever arm; plantarflexion (toes down) is negative in the joint
  // convention. Dissipative actions (p >= 0) deliver no pulse: the heel
  // strike collision absorbs the energy by itself.
  const double lever = std::hypot(model.foot_toe, model.ankle_height);
  const double amp =
      qr.action.p < 0.0
          ? std::min(std::min(-qr.action.p, impulse_cap) * lever /
                         pushoff_duration,
                     model.tau_max_ankle)
          : 0.0;
  b.pushoff_torque = -amp;
  b.pushoff_duration = pushoff_duration;
  return b;
}

// ---------------------------------------------------------------------------
// Descriptive controller

DescriptiveController::DescriptiveController(policy::Policy step_policy,
                                             policy::VelocityPolicy velocity_policy,
                                             PosturePolicySet postures,
                                             ControllerConfig cfg)
    : policy_(std::move(step_policy)),
      vpol_(velocity_policy),
      postures_(std::move(postures)),
      cfg_(cfg) {
  const ip::NominalGait ng =
      ip::nominal_gait(policy_.spec.params, cfg_.v_des, cfg_.t_pref);
  const ip::IpParams& par = policy_.spec.params;
  omega_nom_ = ng.omega;
  theta_nom_ = ng.theta_sw;
  dur_nom_ = ng.duration;
  e_des_ = 0.5 * par.m * par.l * par.l * ng.omega * ng.omega;
  // On a slope the energy apex sits where the leg is vertical in the world,
  // not at mid-stance, so mid-stance must carry the barrier to that apex on
  // top of half the per-step climb m g dh. The policy was fit on level
  // ground, so it is queried at the flat-equivalent rate (the mid-stance
  // rate with the slope surcharge removed).
  const double dh = 2.0 * par.l * std::sin(cfg_.step_scale * ng.theta_sw) *
                    std::sin(cfg_.sigma);
  const double barrier = (cfg_.sigma >= 0.0 ? 1.0 : -1.0) * par.m * 9.81 *
                         par.l * (1.0 - std::cos(cfg_.sigma));
  e_extra_ = cfg_.e_slope_ff * (0.5 * par.m * 9.81 * dh + barrier);
  e_des_ += e_extra_;
  actions_.action = {ng.theta_sw, ng.p};
  actions_.touchdown_offset = par.l * std::sin(ng.theta_sw);
  actions_.pushoff_duration = cfg_.pushoff_duration;
}

TickResult DescriptiveController::tick(const sim::BipedModel& model,
                                       const sim::GeneralizedState& s,
                                       const sim::ContactState& contact,
                                       const sim::Terrain& terrain, double dt) {
  TickResult out;
  out.phase = phase_;
  if (fell_) {
    out.fell = true;
    return out;
  }
  const sim::Kinematics kin = sim::kinematics(model, s.q, s.v);
  const double ground = terrain.height(kin.hip.pos.x());
  if (std::abs(kin.torso_pitch) > cfg_.fall_pitch ||
      kin.hip.pos.y() - ground < cfg_.fall_hip_height) {
    fell_ = true;
    out.fell = true;
    return out;
  }

  // events against the current stance foot; then the supervisory FSM. The
  // hip offset is measured along the local slope so that mid-stance means
  // "virtual leg normal to the ground", matching the pendulum abstraction
  // on inclines.
  const sim::FootKin& st_pre = stance_left_ ? kin.foot_l : kin.foot_r;
  const double sig_pre = terrain.slope(st_pre.ankle.pos.x());
  const double hip_offset =
      (kin.hip.pos.x() - st_pre.ankle.pos.x()) * std::cos(sig_pre) +
      (kin.hip.pos.y() - st_pre.ankle.pos.y()) * std::sin(sig_pre);
  std::vector<sim::Event> events;
  if (have_prev_contact_)
    events = sim::detect_events(prev_contact_, contact, prev_hip_offset_,
                                hip_offset);
  prev_contact_ = contact;
  have_prev_contact_ = true;
  prev_hip_offset_ = hip_offset;
  phase_ = fsm_update(phase_, events, &fsm_log_);

  const ip::IpParams& par = policy_.spec.params;
  // Swing plans are hip-relative in x: the policy commands a touchdown leg
  // angle, so the foot reference rides along with the hip and the landing
  // geometry stays correct even when the vault is faster or slower than the
  // pendulum predicts. z is planned in world coordinates against the terrain.
  auto plan_swing = [&](const sim::FootKin& stf, const sim::FootKin& swf,
                        double theta_cmd, double duration) {
    const double sg = terrain.slope(stf.ankle.pos.x());
    const double a = cfg_.step_scale * theta_cmd + sg;
    const double rel_x = par.l * std::sin(a);
    const double xw = stf.ankle.pos.x() +
                      2.0 * par.l * std::sin(cfg_.step_scale * theta_cmd) *
                          std::cos(sg);
    const Vec2 target(rel_x,
                      terrain.height(xw) + model.ankle_height - 0.012);
    const Vec2 p0(swf.ankle.pos.x() - kin.hip.pos.x(), swf.ankle.pos.y());
    const Vec2 v0(swf.ankle.vel.x() - kin.hip.vel.x(), swf.ankle.vel.y());
    plan_ = swing_trajectory(p0, v0, target, duration, cfg_.swing_clearance,
                             Vec2(0.0, kin.hip.pos.y()),
                             model.l_thigh + model.l_shank + model.ankle_height);
    plan_theta_ = theta_cmd;
    plan_t_ = 0.0;
    touchdown_push_ = false;
    release_t_ = -1.0;
  };
  const bool swing_struck = has_event(
      events, stance_left_ ? sim::Event::HeelStrikeR : sim::Event::HeelStrikeL);
  t_since_step_ += dt;
  if (swing_struck && t_ > 0.1 && t_since_step_ > 0.15) {
    t_since_step_ = 0.0;
    midstance_done_ = false;
    emergency_done_ = false;
    const sim::FootKin& old_sw = stance_left_ ? kin.foot_r : kin.foot_l;
    out.step_completed = true;
    out.step_length = std::abs(old_sw.ankle.pos.x() - st_pre.ankle.pos.x());
    ++steps_;
    // integral trim on the energy setpoint from the realized per-step speed;
    // it absorbs the model mismatch between the pendulum abstraction and the
    // full-body collision losses
    if (prev_step_t_ >= 0.0 && t_ - prev_step_t_ > 1e-6) {
      const double v_step = (kin.hip.pos.x() - prev_step_x_) / (t_ - prev_step_t_);
      e_trim_ += cfg_.e_trim_gain * (cfg_.v_des - v_step);
      e_trim_ = std::clamp(e_trim_, cfg_.e_trim_min, cfg_.e_trim_max);
    }
    prev_step_t_ = t_;
    prev_step_x_ = kin.hip.pos.x();
    stance_left_ = !stance_left_;
    // remember the landing knee angle; the stance knee eases from it to the
    // posture target so the fresh leg stays compliant through weight transfer
    landing_knee_ = s.q(stance_left_ ? 4 : 7);
    pushoff_left_ = 0.0;  // the pulse ends at the opposite heel strike
    t_phase_ = 0.0;
    // provisional swing plan for the new swing leg; replanned at mid-stance
    const sim::FootKin& stn = stance_left_ ? kin.foot_l : kin.foot_r;
    const sim::FootKin& swn = stance_left_ ? kin.foot_r : kin.foot_l;
    plan_swing(stn, swn, actions_.action.theta_sw, dur_nom_);
    pushoff_armed_ = false;
  }

  const sim::FootKin& st = stance_left_ ? kin.foot_l : kin.foot_r;
  const sim::FootKin& sw = stance_left_ ? kin.foot_r : kin.foot_l;
  const double sigma = terrain.slope(st.ankle.pos.x());
  // virtual leg in the slope frame: theta measured from the ground normal
  VirtualLeg vleg = virtual_leg(kin.hip, st.ankle);
  vleg.theta += sigma;

  if (!plan_) {
    // gait initiation: a first step at the nominal touchdown angle
    plan_swing(st, sw, theta_nom_, cfg_.t_pref);
    pushoff_armed_ = false;
  }

  // Mid-stance: the detector's zero crossing, or the hip already past the
  // stance ankle right after a short step (the crossing happened inside the
  // strike transient and was never observed).
  const bool midstance_now =
      has_event(events, sim::Event::MidStance) ||
      (t_since_step_ > 0.05 && vleg.theta > 0.0 && vleg.omega > 0.2);
  if (midstance_now && !midstance_done_) {
    midstance_done_ = true;
    // the very first stance still carries the start transient (the feet are
    // not anchored yet, so the relative leg rate is unreliable); query the
    // policy at the nominal rate instead of the measurement
    const double flat_sq =
        vleg.omega * std::abs(vleg.omega) -
        2.0 * e_extra_ / (par.m * par.l * par.l);
    const double omega_flat =
        (flat_sq >= 0.0 ? 1.0 : -1.0) * std::sqrt(std::abs(flat_sq));
    const double omega_q = steps_ == 0 ? omega_nom_ : omega_flat;
    last_omega_ = omega_q;
    actions_ = balance_actions(policy_, omega_q, model,
                               cfg_.pushoff_duration,
                               cfg_.pushoff_impulse_max);
    actions_.pushoff_torque *= cfg_.pushoff_scale;
    double t_go = ip::swing_time(par, std::max(omega_q, 0.3),
                                 actions_.action.theta_sw);
    t_go = std::clamp(t_go, 0.25, 0.8);
    plan_swing(st, sw, actions_.action.theta_sw, t_go);
    pushoff_armed_ = true;
  }

  // backward catch: the step policy only covers forward progress, so if the
  // vault reverses mid-stance, replant the swing foot behind the hip once
  if (!emergency_done_ && vleg.omega < -0.05 && t_since_step_ > 0.2) {
    emergency_done_ = true;
    plan_swing(st, sw, -theta_nom_, 0.3);
    pushoff_armed_ = false;
  }

  // posture targets for this (v_des, slope); the slope posture is blended
  // in from an upright start so the launch transient stays benign
  const double sig_ramp =
      cfg_.lean_ramp > 0.0 ? std::min(1.0, t_ / cfg_.lean_ramp) : 1.0;
  const PostureQuery pq =
      posture_targets(model, postures_, cfg_.v_des, cfg_.sigma * sig_ramp);

  const int st0 = stance_left_ ? 0 : 3;  // VecJ offsets
  const int sw0 = stance_left_ ? 3 : 0;

  VecJ q_des = VecJ::Zero(), qd_des = VecJ::Zero();
  VecJ qj, qdj;
  qj = s.q.tail<sim::kNj>();
  qdj = s.v.tail<sim::kNj>();

  // swing leg: IK onto the foot path, knee blended to the touchdown angle.
  // The touchdown itself is event-based: the foot hovers a few millimetres
  // above the ground at the end of the path and is pressed down only once
  // the virtual stance leg reaches the commanded angle (or on timeout), so
  // the collision happens at the inter-leg angle the step policy asked for.
  const double release = 0.9 * cfg_.step_scale * plan_theta_;
  if (!touchdown_push_ && plan_t_ >= 0.5 * plan_->duration &&
      (plan_theta_ >= 0.0 ? vleg.theta >= release : vleg.theta <= release)) {
    touchdown_push_ = true;
  }
  if (!touchdown_push_ && plan_t_ > plan_->duration + 0.4) touchdown_push_ = true;
  // if the vault runs ahead of the plan (the stance leg has already passed
  // the commanded angle while the swing spline still has time left), start
  // pressing the foot down immediately instead of waiting out the spline
  const double overrun = cfg_.press_overrun * cfg_.step_scale * plan_theta_;
  if (touchdown_push_ && release_t_ < 0.0 && plan_t_ < plan_->duration &&
      (plan_theta_ >= 0.0 ? vleg.theta >= overrun : vleg.theta <= overrun)) {
    release_t_ = plan_t_;
  }
  const double tq = std::min(plan_t_, plan_->duration);
  const double h = 1e-3;
  auto ik_targets = [&](double t_eval, const Vec2& hip_pos, double q2) {
    const Vec2 rel = plan_->pos(t_eval);
    Vec2 foot_ref(hip_pos.x() + rel.x(), rel.y());
    const double ground = terrain.height(foot_ref.x()) + model.ankle_height;
    if (plan_t_ >= plan_->duration) {
      foot_ref.y() = ground + (touchdown_push_ ? -0.012 : 0.004);
    } else if (!touchdown_push_) {
      const double prog = std::clamp(t_eval / plan_->duration, 0.0, 1.0);
      foot_ref.y() = std::max(
          foot_ref.y(),
          ground + 0.004 + cfg_.scuff_margin * std::sin(M_PI * prog));
    } else if (release_t_ >= 0.0) {
      const double w = std::clamp((t_eval - release_t_) / 0.08, 0.0, 1.0);
      const double y_press = (1.0 - w) * foot_ref.y() + w * (ground - 0.012);
      foot_ref.y() = std::min(foot_ref.y(), y_press);
    }
    const Vec2 d = foot_ref - hip_pos;
    const Vec2 ik = leg_ik(model, d);
    const double q_hip = ik.x() - q2;
    const double q_knee = ik.y();
    const double q_ankle = sigma - (ik.x() + ik.y());  // level foot at landing
    return Eigen::Vector3d(q_hip, q_knee, q_ankle);
  };
  Eigen::Vector3d sw_now = ik_targets(tq, kin.hip.pos, s.q(2));
  Eigen::Vector3d sw_next = ik_targets(tq + h, kin.hip.pos + h * kin.hip.vel,
                                       s.q(2) + h * s.v(2));
  Eigen::Vector3d sw_rate = (sw_next - sw_now) / h;

  // cosine blend of the touchdown knee angle over the last fraction of swing
  double blend = 0.0;
  const double t_blend = (1.0 - cfg_.swing_blend) * plan_->duration;
  if (plan_t_ >= t_blend) {
    const double sfrac =
        std::clamp((plan_t_ - t_blend) / (cfg_.swing_blend * plan_->duration),
                   0.0, 1.0);
    blend = 0.5 * (1.0 - std::cos(M_PI * sfrac));
  }
  const double knee_des =
      (1.0 - blend) * sw_now.y() + blend * pq.targets.swing_knee;
  const double knee_rate = (1.0 - blend) * sw_rate.y();

  q_des(sw0) = sw_now.x();
  qd_des(sw0) = sw_rate.x();
  q_des(sw0 + 1) = knee_des;
  qd_des(sw0 + 1) = knee_rate;
  // keep the foot level through the blended knee angle
  q_des(sw0 + 2) = sw_now.z() + (sw_now.y() - knee_des);
  qd_des(sw0 + 2) = sw_rate.z() + (sw_rate.y() - knee_rate);
  out.source[sw0] = RefSource::Spline;
  out.source[sw0 + 1] = blend > 0.0 ? RefSource::TouchdownKnee : RefSource::Spline;
  out.source[sw0 + 2] = RefSource::Spline;

  // stance knee: ease from the landing angle into the posture target, then
  // on slopes ramp toward extension (flexion) through late stance so the
  // knee does the climb (descent) work the ankle cannot supply
  const double kfrac = std::clamp(t_since_step_ / 0.25, 0.0, 1.0);
  const double kblend = 0.5 * (1.0 - std::cos(M_PI * kfrac));
  const double cfrac = std::clamp((t_since_step_ - 0.25) / 0.25, 0.0, 1.0);
  const double climb = cfg_.knee_climb * std::sin(cfg_.sigma) *
                       0.5 * (1.0 - std::cos(M_PI * cfrac));
  q_des(st0 + 1) = std::clamp(
      (1.0 - kblend) * landing_knee_ + kblend * pq.targets.stance_knee + climb,
      model.knee_lo, -0.05);
  out.source[st0 + 1] = RefSource::PostureKnee;

  VecJ tau = joint_pd(q_des, qd_des, qj, qdj, cfg_.gains, model.tau_max());
  // soften swing tracking so late-swing retraction cannot surge the trunk
  tau(sw0) = std::clamp(tau(sw0), -cfg_.swing_tau_clamp, cfg_.swing_tau_clamp);
  tau(sw0 + 1) =
      std::clamp(tau(sw0 + 1), -cfg_.swing_tau_clamp, cfg_.swing_tau_clamp);

  // stance hip: torso regulation toward the posture lean target. The hip
  // actuator reacts on the torso with -tau, i.e. +tau pitches it forward.
  const double torso_err = kin.torso_pitch - pq.targets.torso;
  const double torso_rate = -s.v(2);
  tau(st0) = std::clamp(-cfg_.torso_kp * torso_err - cfg_.torso_kd * torso_rate,
                        -model.tau_max_hip, model.tau_max_hip);
  out.source[st0] = RefSource::TorsoReg;

  // stance ankle: push-off pulse just before touchdown, else velocity
  // regulation. The pulse triggers on the measured swing-foot height so it
  // stays synchronized with the actual strike.
  const double sw_clear =
      sw.ankle.pos.y() - terrain.height(sw.ankle.pos.x()) - model.ankle_height;
  if (pushoff_armed_ && plan_t_ >= 0.5 * plan_->duration && sw_clear < 0.02 &&
      (touchdown_push_ || plan_t_ < plan_->duration)) {
    pushoff_armed_ = false;
    pushoff_left_ = cfg_.pushoff_duration;
    pushoff_tau_ = actions_.pushoff_torque;
    pushoff_work_ = 0.0;
  }
  // a foot that leaves the ground mid-pulse spins up freely and returns the
  // torque as kinetic energy at the next strike; bound the delivered work
  if (pushoff_left_ > 0.0 && pushoff_work_ > cfg_.pushoff_work_max)
    pushoff_left_ = 0.0;
  if (pushoff_left_ > 0.0) {
    tau(st0 + 2) = pushoff_tau_;
    pushoff_work_ += pushoff_tau_ * qdj(st0 + 2) * dt;
    pushoff_left_ -= dt;
    out.source[st0 + 2] = RefSource::Pushoff;
  } else {
    const double e = ip::orbit_energy(par, vleg.theta, vleg.omega);
    tau(st0 + 2) = vpol_.torque(e_des_ + e_trim_ - e, vleg.theta);
    // braking (negative) torque destabilizes the vault well before the
    // accelerating side does; keep its ceiling tighter
    tau(st0 + 2) =
        std::clamp(tau(st0 + 2),
                   -std::min(model.tau_max_ankle, cfg_.vel_brake_max),
                   model.tau_max_ankle);
    out.source[st0 + 2] = RefSource::VelocityReg;
  }

  plan_t_ += dt;
  t_ += dt;
  t_phase_ += dt;
  out.tau = tau;
  out.phase = phase_;
  return out;
}

// ---------------------------------------------------------------------------
// Prescriptive controller

PrescriptiveController::PrescriptiveController(lipm::LipmParams rom,
                                               ControllerConfig cfg)
    : rom_(rom), cfg_(cfg) {
  walking_ = cfg_.v_des > 1e-6;
  step_period_ = rom_.T;
}

TickResult PrescriptiveController::tick(const sim::BipedModel& model,
                                        const sim::GeneralizedState& s,
                                        const sim::ContactState& contact,
                                        const sim::Terrain& terrain, double dt) {
  TickResult out;
  out.phase = phase_;
  if (fell_) {
    out.fell = true;
    return out;
  }
  const sim::Kinematics kin = sim::kinematics(model, s.q, s.v);
  const double ground = terrain.height(kin.hip.pos.x());
  if (std::abs(kin.torso_pitch) > cfg_.fall_pitch ||
      kin.hip.pos.y() - ground < cfg_.fall_hip_height) {
    fell_ = true;
    out.fell = true;
    return out;
  }

  std::vector<sim::Event> events;
  if (have_prev_contact_) events = sim::detect_events(prev_contact_, contact);
  prev_contact_ = contact;
  have_prev_contact_ = true;
  phase_ = fsm_update(phase_, events, nullptr);

  if (!init_) {
    init_ = true;
    com_z_ref_ = kin.com.pos.y();
    const double pl = kin.foot_l.ankle.pos.x();
    const double pr = kin.foot_r.ankle.pos.x();
    if (walking_) {
      replan(kin);
    } else {
      p_stance_ = 0.5 * (pl + pr);
      s_td_ = {kin.com.pos.x(), kin.com.vel.x()};
    }
  }

  const sim::FootKin& st = stance_left_ ? kin.foot_l : kin.foot_r;
  const sim::FootKin& sw = stance_left_ ? kin.foot_r : kin.foot_l;

  if (walking_) {
    const bool swing_struck =
        has_event(events, stance_left_ ? sim::Event::HeelStrikeR
                                       : sim::Event::HeelStrikeL) &&
        t_step_ > 0.5 * step_period_;
    const bool overdue = t_step_ > 1.4 * step_period_;
    if (swing_struck || overdue) {
      out.step_completed = true;
      out.step_length = std::abs(sw.ankle.pos.x() - st.ankle.pos.x());
      ++steps_;
      stance_left_ = !stance_left_;
      replan(kin);
    }
  }

  // double-support window, then a swing plan toward the MPC placement
  const sim::FootKin& sw2 = stance_left_ ? kin.foot_r : kin.foot_l;
  const double ds_time = 0.2 * step_period_;
  if (walking_ && !plan_ && t_step_ >= ds_time) {
    const Vec2 target(p_next_,
                      terrain.height(p_next_) + model.ankle_height - 0.012);
    const Vec2 hip_td(p_next_ - 0.5 * (p_next_ - p_stance_), com_z_ref_);
    plan_ = swing_trajectory(sw2.ankle.pos, sw2.ankle.vel, target,
                             std::max(step_period_ - ds_time, 0.12),
                             cfg_.swing_clearance, hip_td,
                             model.l_thigh + model.l_shank + model.ankle_height);
    plan_t_ = 0.0;
  }

  since_solve_ += dt;
  if (since_solve_ + 1e-12 >= cfg_.control_dt) {
    since_solve_ = 0.0;
    held_tau_ = solve_tsc(model, s, kin, contact, terrain);
  }
  out.tau = held_tau_;
  out.source.fill(RefSource::Tsc);
  out.phase = phase_;

  if (plan_) plan_t_ += dt;
  t_ += dt;
  t_step_ += dt;
  return out;
}

void PrescriptiveController::replan(const sim::Kinematics& kin) {
  const sim::FootKin& st = stance_left_ ? kin.foot_l : kin.foot_r;
  s_td_ = {kin.com.pos.x(), kin.com.vel.x()};
  p_stance_ = st.ankle.pos.x();
  const auto [s_star, u] = lipm::periodic_touchdown_state(rom_, cfg_.v_des);
  (void)u;
  Eigen::Matrix2d Q = Eigen::Matrix2d::Zero();
  Q(0, 0) = 1.0;
  Q(1, 1) = 10.0;
  const lipm::FootPlan plan = lipm::plan_footsteps(
      rom_, s_td_, p_stance_, step_period_, s_star, 4, Q, 1.0);
  p_next_ = plan.placements.size() > 1 ? plan.placements[1]
                                       : p_stance_ + cfg_.v_des * rom_.T;
  plan_.reset();
  plan_t_ = 0.0;
  t_step_ = 0.0;
}

VecJ PrescriptiveController::solve_tsc(const sim::BipedModel& model,
                                       const sim::GeneralizedState& s,
                                       const sim::Kinematics& kin,
                                       const sim::ContactState& contact,
                                       const sim::Terrain& terrain) {
  const sim::DynamicsTerms dyn = sim::dynamics_terms(model, s.q, s.v);
  std::vector<TaskSpec> tasks;

  // CoM task tracking the LIPM reference for the current step
  double x_ref = p_stance_, xd_ref = 0.0, ff = 0.0;
  if (walking_) {
    const auto [A, B] = lipm::lipm_matrices(rom_, std::min(t_step_, step_period_));
    const Eigen::Vector2d sref =
        A * Eigen::Vector2d(s_td_.x, s_td_.xd) + B * p_stance_;
    x_ref = sref(0);
    xd_ref = sref(1);
    const double w2 = rom_.omega() * rom_.omega();
    ff = w2 * (x_ref - p_stance_);
  }
  TaskSpec com;
  com.id = "com";
  com.A = kin.com.J;
  com.bias = kin.com.bias;
  com.acc_des = numkit::Vector(2);
  com.acc_des << ff + 40.0 * (x_ref - kin.com.pos.x()) +
                     12.0 * (xd_ref - kin.com.vel.x()),
      120.0 * (com_z_ref_ - kin.com.pos.y()) - 22.0 * kin.com.vel.y();
  com.Q = numkit::Matrix::Identity(2, 2) * 50.0;
  tasks.push_back(com);

  TaskSpec torso;
  torso.id = "torso";
  torso.A = numkit::Matrix::Zero(1, sim::kNq);
  torso.A(0, 2) = 1.0;
  torso.bias = numkit::Vector::Zero(1);
  torso.acc_des = numkit::Vector(1);
  torso.acc_des << -120.0 * s.q(2) - 22.0 * s.v(2);
  torso.Q = numkit::Matrix::Identity(1, 1) * 20.0;
  tasks.push_back(torso);

  const sim::FootKin& sw = stance_left_ ? kin.foot_r : kin.foot_l;
  if (walking_ && plan_) {
    const double tq = std::min(plan_t_, plan_->duration);
    TaskSpec swing;
    swing.id = "swing";
    swing.A = sw.ankle.J;
    swing.bias = sw.ankle.bias;
    swing.acc_des = numkit::Vector(2);
    const Vec2 pr = plan_->pos(tq);
    const Vec2 vr = plan_->vel(tq);
    const Vec2 ar = plan_->acc(tq);
    swing.acc_des << ar.x() + 200.0 * (pr.x() - sw.ankle.pos.x()) +
                         28.0 * (vr.x() - sw.ankle.vel.x()),
        ar.y() + 200.0 * (pr.y() - sw.ankle.pos.y()) +
            28.0 * (vr.y() - sw.ankle.vel.y());
    swing.Q = numkit::Matrix::Identity(2, 2) * 30.0;
    tasks.push_back(swing);

    TaskSpec fang;
    fang.id = "swing-foot-angle";
    fang.A = sw.J_angle;  // hmm: J_angle lives on FootKin
    fang.bias = numkit::Vector::Zero(1);
    fang.acc_des = numkit::Vector(1);
    const double sg = terrain.slope(sw.ankle.pos.x());
    const double wf = (sw.J_angle * s.v)(0);
    fang.acc_des << 150.0 * (sg - sw.angle) - 25.0 * wf;
    fang.Q = numkit::Matrix::Identity(1, 1) * 2.0;
    tasks.push_back(fang);
  }

  // contact set: stance foot points in contact; both feet while standing or
  // during the double-support window
  const double ds_time = 0.2 * step_period_;
  std::vector<TscContact> contacts;
  auto add_foot = [&](const sim::FootKin& fk, const sim::FootContact& fc,
                      int id) {
    auto add_point = [&](const sim::PointKin& pk, const sim::PointContact& pc) {
      if (!pc.active) return;
      TscContact c;
      c.J = pk.J;
      c.bias = pk.bias;
      c.pos = pk.pos;
      c.sigma = terrain.slope(pk.pos.x());
      c.foot = id;
      contacts.push_back(c);
    };
    add_point(fk.heel, fc.heel);
    add_point(fk.toe, fc.toe);
  };
  const sim::FootKin& st2 = stance_left_ ? kin.foot_l : kin.foot_r;
  add_foot(st2, stance_left_ ? contact.left : contact.right, 0);
  if (!walking_ || t_step_ < ds_time)
    add_foot(sw, stance_left_ ? contact.right : contact.left, 1);

  TscOptions opt = cfg_.tsc;
  const TscResult res = tsc_solve(model, dyn, tasks, contacts, opt);
  if (!res.feasible) {
    ++qp_fallbacks_;
    // gravity-compensation hold at the current joint angles
    VecJ tau = dyn.G.tail<sim::kNj>();
    tau -= cfg_.gains.kd.cwiseProduct(s.v.tail<sim::kNj>());
    const VecJ lim = model.tau_max();
    return tau.cwiseMax(-lim).cwiseMin(lim);
  }
  return res.tau;
}

}  // namespace biped::ctrl
