#include "biped/biped_sim.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace biped::sim {

namespace {

Vec2 perp(const Vec2& v) { return {-v.y(), v.x()}; }

// direction of a leg segment with absolute angle phi (0 = straight down)
Vec2 leg_dir(double phi) { return {std::sin(phi), -std::cos(phi)}; }
// torso direction (0 = straight up)
Vec2 up_dir(double th) { return {-std::sin(th), std::cos(th)}; }

struct Joint {
  int idx;
  const PointKin* anchor;
};

PointKin chain_point(const VecQ& v, const Vec2& pos,
                     std::initializer_list<Joint> joints) {
  PointKin p;
  p.pos = pos;
  p.J.setZero();
  p.J(0, 0) = 1.0;
  p.J(1, 1) = 1.0;
  for (const Joint& j : joints) p.J.col(j.idx) = perp(pos - j.anchor->pos);
  p.vel = p.J * v;
  p.bias.setZero();
  for (const Joint& j : joints)
    p.bias += v(j.idx) * perp(p.vel - j.anchor->vel);
  return p;
}

struct LinkKin {
  PointKin com;
  double mass = 0.0;
  double inertia = 0.0;
  VecQ jw = VecQ::Zero();  // angular-rate selector
};

struct FullKin {
  PointKin base;
  PointKin knee_l, ankle_l, knee_r, ankle_r;
  PointKin heel_l, toe_l, heel_r, toe_r;
  LinkKin links[7];  // torso, thigh/shank/foot left, thigh/shank/foot right
};

FullKin full_kin(const BipedModel& m, const VecQ& q, const VecQ& v) {
  FullKin k;
  PointKin& base = k.base;
  base.pos = {q(0), q(1)};
  base.J.setZero();
  base.J(0, 0) = 1.0;
  base.J(1, 1) = 1.0;
  base.vel = {v(0), v(1)};

  auto leg = [&](int i0, PointKin& knee, PointKin& ankle, PointKin& heel,
                 PointKin& toe, LinkKin* links) {
    const double phi1 = q(2) + q(i0);
    const double phi2 = phi1 + q(i0 + 1);
    const double psi = phi2 + q(i0 + 2);
    knee = chain_point(v, base.pos + m.l_thigh * leg_dir(phi1),
                       {{2, &base}, {i0, &base}});
    links[0].com = chain_point(v, base.pos + 0.5 * m.l_thigh * leg_dir(phi1),
                               {{2, &base}, {i0, &base}});
    links[0].mass = m.m_thigh;
    links[0].inertia = m.i_thigh;
    links[0].jw(2) = links[0].jw(i0) = 1.0;

    ankle = chain_point(v, knee.pos + m.l_shank * leg_dir(phi2),
                        {{2, &base}, {i0, &base}, {i0 + 1, &knee}});
    links[1].com = chain_point(v, knee.pos + 0.5 * m.l_shank * leg_dir(phi2),
                               {{2, &base}, {i0, &base}, {i0 + 1, &knee}});
    links[1].mass = m.m_shank;
    links[1].inertia = m.i_shank;
    links[1].jw(2) = links[1].jw(i0) = links[1].jw(i0 + 1) = 1.0;

    const Vec2 f(std::cos(psi), std::sin(psi));
    const Vec2 w(-std::sin(psi), std::cos(psi));
    auto foot_point = [&](double fwd) {
      return chain_point(
          v, ankle.pos + fwd * f - m.ankle_height * w,
          {{2, &base}, {i0, &base}, {i0 + 1, &knee}, {i0 + 2, &ankle}});
    };
    heel = foot_point(m.foot_heel);
    toe = foot_point(m.foot_toe);
    links[2].com = foot_point(0.5 * (m.foot_heel + m.foot_toe));
    links[2].mass = m.m_foot;
    links[2].inertia = m.i_foot;
    links[2].jw(2) = links[2].jw(i0) = links[2].jw(i0 + 1) =
        links[2].jw(i0 + 2) = 1.0;
  };

  k.links[0].com = chain_point(v, base.pos + 0.5 * m.l_torso * up_dir(q(2)),
                               {{2, &base}});
  k.links[0].mass = m.m_torso;
  k.links[0].inertia = m.i_torso;
  k.links[0].jw(2) = 1.0;
  leg(3, k.knee_l, k.ankle_l, k.heel_l, k.toe_l, &k.links[1]);
  leg(6, k.knee_r, k.ankle_r, k.heel_r, k.toe_r, &k.links[4]);
  return k;
}

}  // namespace

Terrain::Terrain(std::vector<Vec2> points) : points_(std::move(points)) {
  if (points_.size() < 2)
    throw std::invalid_argument("Terrain: need at least two profile points");
  for (size_t i = 1; i < points_.size(); ++i) {
    if (points_[i].x() <= points_[i - 1].x())
      throw std::invalid_argument("Terrain: profile x must be increasing");
    double sg = (points_[i].y() - points_[i - 1].y()) /
                (points_[i].x() - points_[i - 1].x());
    if (std::abs(std::atan(sg)) > 15.0 * M_PI / 180.0 + 1e-9)
      throw std::invalid_argument("Terrain: slope exceeds 15 degrees");
  }
}

Terrain Terrain::flat(double z) {
  return Terrain({{-1000.0, z}, {1000.0, z}});
}

Terrain Terrain::uniform_slope(double sigma) {
  const double t = std::tan(sigma);
  return Terrain({{-1000.0, -1000.0 * t}, {1000.0, 1000.0 * t}});
}

double Terrain::height(double x) const {
  size_t i = 1;
  while (i + 1 < points_.size() && points_[i].x() < x) ++i;
  const Vec2& a = points_[i - 1];
  const Vec2& b = points_[i];
  return a.y() + (b.y() - a.y()) * (x - a.x()) / (b.x() - a.x());
}

double Terrain::slope(double x) const {
  size_t i = 1;
  while (i + 1 < points_.size() && points_[i].x() < x) ++i;
  const Vec2& a = points_[i - 1];
  const Vec2& b = points_[i];
  return std::atan2(b.y() - a.y(), b.x() - a.x());
}

Kinematics kinematics(const BipedModel& model, const VecQ& q, const VecQ& v) {
  FullKin fk = full_kin(model, q, v);
  Kinematics out;
  out.hip = fk.base;
  const double m_tot = model.total_mass();
  for (const LinkKin& l : fk.links) {
    const double w = l.mass / m_tot;
    out.com.pos += w * l.com.pos;
    out.com.vel += w * l.com.vel;
    out.com.bias += w * l.com.bias;
    out.com.J += w * l.com.J;
  }
  auto fill_foot = [&](FootKin& f, const PointKin& ankle, const PointKin& heel,
                       const PointKin& toe, int i0) {
    f.ankle = ankle;
    f.heel = heel;
    f.toe = toe;
    f.angle = q(2) + q(i0) + q(i0 + 1) + q(i0 + 2);
    f.J_angle.setZero();
    f.J_angle(0, 2) = f.J_angle(0, i0) = f.J_angle(0, i0 + 1) =
        f.J_angle(0, i0 + 2) = 1.0;
  };
  fill_foot(out.foot_l, fk.ankle_l, fk.heel_l, fk.toe_l, 3);
  fill_foot(out.foot_r, fk.ankle_r, fk.heel_r, fk.toe_r, 6);
  out.torso_pitch = -q(2);
  return out;
}

DynamicsTerms dynamics_terms(const BipedModel& model, const VecQ& q,
                             const VecQ& v) {
  FullKin fk = full_kin(model, q, v);
  DynamicsTerms t;
  const double g = 9.81;
  for (const LinkKin& l : fk.links) {
    t.H += l.mass * l.com.J.transpose() * l.com.J +
           l.inertia * l.jw * l.jw.transpose();
    t.C += l.mass * l.com.J.transpose() * l.com.bias;
    t.G += l.mass * g * l.com.J.row(1).transpose();
  }
  t.J_heel_l = fk.heel_l.J;
  t.J_toe_l = fk.toe_l.J;
  t.J_heel_r = fk.heel_r.J;
  t.J_toe_r = fk.toe_r.J;
  return t;
}

double mechanical_energy(const BipedModel& model, const VecQ& q, const VecQ& v) {
  FullKin fk = full_kin(model, q, v);
  const double g = 9.81;
  double e = 0.0;
  for (const LinkKin& l : fk.links) {
    const double w = l.jw.dot(v);
    e += 0.5 * l.mass * l.com.vel.squaredNorm() + 0.5 * l.inertia * w * w +
         l.mass * g * l.com.pos.y();
  }
  return e;
}

Eigen::Vector3d momentum(const BipedModel& model, const VecQ& q, const VecQ& v) {
  FullKin fk = full_kin(model, q, v);
  Vec2 com = Vec2::Zero(), lin = Vec2::Zero();
  const double m_tot = model.total_mass();
  for (const LinkKin& l : fk.links) {
    com += l.mass / m_tot * l.com.pos;
    lin += l.mass * l.com.vel;
  }
  double ang = 0.0;
  for (const LinkKin& l : fk.links) {
    const Vec2 r = l.com.pos - com;
    ang += l.mass * (r.x() * l.com.vel.y() - r.y() * l.com.vel.x()) +
           l.inertia * l.jw.dot(v);
  }
  return {lin.x(), lin.y(), ang};
}

namespace {

PointContact point_contact(const BipedModel& m, const PointKin& pk,
                           const Terrain& terrain, const PointContact* prev) {
  PointContact c;
  c.pos = pk.pos;
  const double sigma = terrain.slope(pk.pos.x());
  const double h = terrain.height(pk.pos.x());
  const Vec2 n(-std::sin(sigma), std::cos(sigma));
  const Vec2 tg(std::cos(sigma), std::sin(sigma));
  const double pen = (h - pk.pos.y()) * std::cos(sigma);
  if (pen <= 0.0) return c;
  c.active = true;
  c.pen = pen;
  const double pen_rate = -pk.vel.dot(n);
  c.fn = std::max(0.0, m.k_n * std::pow(pen, 1.5) * (1.0 + m.d_n * pen_rate));
  const double s = pk.pos.dot(tg);
  const double vt = pk.vel.dot(tg);
  c.anchor_s = (prev && prev->active) ? prev->anchor_s : s;
  double ft = -m.k_t * (s - c.anchor_s) - m.d_t * vt;
  const double lim = m.mu * c.fn;
  if (std::abs(ft) <= lim) {
    c.sticking = true;
  } else {
    ft = std::clamp(ft, -lim, lim);
    c.anchor_s = s + (ft + m.d_t * vt) / m.k_t;  // drag the anchor along
  }
  c.ft = ft;
  c.force = c.fn * n + c.ft * tg;
  return c;
}

}  // namespace

ContactState contact_forces(const BipedModel& model, const VecQ& q, const VecQ& v,
                            const Terrain& terrain, const ContactState* prev) {
  FullKin fk = full_kin(model, q, v);
  ContactState cs;
  cs.left.heel = point_contact(model, fk.heel_l, terrain,
                               prev ? &prev->left.heel : nullptr);
  cs.left.toe =
      point_contact(model, fk.toe_l, terrain, prev ? &prev->left.toe : nullptr);
  cs.right.heel = point_contact(model, fk.heel_r, terrain,
                                prev ? &prev->right.heel : nullptr);
  cs.right.toe = point_contact(model, fk.toe_r, terrain,
                               prev ? &prev->right.toe : nullptr);
  return cs;
}

StepResult step(const BipedModel& model, const GeneralizedState& state,
                const VecJ& torques, const Terrain& terrain, double dt,
                const ContactState* prev_contact) {
  StepResult out;
  VecJ tau = torques;
  const VecJ lim = model.tau_max();
  for (int i = 0; i < kNj; ++i) {
    if (std::abs(tau(i)) > lim(i)) {
      tau(i) = std::clamp(tau(i), -lim(i), lim(i));
      out.torque_clamped = true;
    }
  }

  DynamicsTerms t = dynamics_terms(model, state.q, state.v);
  out.contact = contact_forces(model, state.q, state.v, terrain, prev_contact);

  VecQ rhs = -t.C - t.G;
  rhs.tail<kNj>() += tau;
  rhs += t.J_heel_l.transpose() * out.contact.left.heel.force;
  rhs += t.J_toe_l.transpose() * out.contact.left.toe.force;
  rhs += t.J_heel_r.transpose() * out.contact.right.heel.force;
  rhs += t.J_toe_r.transpose() * out.contact.right.toe.force;

  VecQ acc = t.H.ldlt().solve(rhs);
  out.state.v = state.v + dt * acc;
  out.state.q = state.q + dt * out.state.v;

  if (!out.state.q.allFinite() || !out.state.v.allFinite()) {
    std::ostringstream os;
    os << "sim::step: non-finite state; q = [" << state.q.transpose()
       << "], v = [" << state.v.transpose() << "], tau = [" << tau.transpose()
       << "]";
    throw NonFinite(os.str());
  }
  return out;
}

std::vector<Event> detect_events(const ContactState& prev, const ContactState& now,
                                 double f_thresh) {
  std::vector<Event> ev;
  if (!prev.left.in_contact(f_thresh) && now.left.in_contact(f_thresh))
    ev.push_back(Event::HeelStrikeL);
  if (!prev.right.in_contact(f_thresh) && now.right.in_contact(f_thresh))
    ev.push_back(Event::HeelStrikeR);
  if (prev.left.in_contact(f_thresh) && !now.left.in_contact(f_thresh))
    ev.push_back(Event::ToeOffL);
  if (prev.right.in_contact(f_thresh) && !now.right.in_contact(f_thresh))
    ev.push_back(Event::ToeOffR);
  return ev;
}

std::vector<Event> detect_events(const ContactState& prev, const ContactState& now,
                                 double prev_hip_offset, double now_hip_offset,
                                 double f_thresh) {
  std::vector<Event> ev = detect_events(prev, now, f_thresh);
  if (prev_hip_offset < 0.0 && now_hip_offset >= 0.0)
    ev.push_back(Event::MidStance);
  return ev;
}

}  // namespace biped::sim
