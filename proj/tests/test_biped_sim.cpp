#include <cmath>
#include <cstring>
#include <random>

#include "biped/biped_sim.hpp"
#include "biped/numkit.hpp"
#include "doctest.h"

using namespace biped;
using namespace biped::sim;

namespace {

VecQ random_pose(std::mt19937& rng) {
  std::uniform_real_distribution<double> base(-0.5, 0.5), ang(-0.8, 0.8);
  VecQ q;
  q << base(rng), 0.9 + 0.3 * base(rng), 0.3 * ang(rng), ang(rng), -std::abs(ang(rng)),
      0.5 * ang(rng), ang(rng), -std::abs(ang(rng)), 0.5 * ang(rng);
  return q;
}

VecQ random_vel(std::mt19937& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  VecQ v;
  for (int i = 0; i < kNq; ++i) v(i) = nd(rng);
  return v;
}

// standing pose with the hip at the height where feet just touch z=0
VecQ standing_pose(const BipedModel& m, double clearance = 0.0) {
  VecQ q = VecQ::Zero();
  q(1) = m.l_thigh + m.l_shank + m.ankle_height + clearance;
  return q;
}

// PD toward the zero joint pose, for settling tests. Ankle damping must stay
// small: the foot link is light, so large kd is unstable at the default dt.
VecJ hold_pd(const VecQ& q, const VecQ& v) {
  const double kd[kNj] = {30.0, 30.0, 4.0, 30.0, 30.0, 4.0};
  VecJ tau;
  for (int i = 0; i < kNj; ++i) tau(i) = -400.0 * q(3 + i) - kd[i] * v(3 + i);
  return tau;
}

}  // namespace

TEST_CASE("dynamics: statics at the zero pose") {
  BipedModel m;
  CHECK(m.total_mass() == doctest::Approx(30.0));
  VecQ q = standing_pose(m);
  DynamicsTerms t = dynamics_terms(m, q, VecQ::Zero());
  CHECK(t.C.norm() < 1e-12);
  CHECK(t.G(1) == doctest::Approx(30.0 * 9.81).epsilon(1e-12));  // 294.3 N
  CHECK(std::abs(t.G(0)) < 1e-12);
}

TEST_CASE("dynamics: H symmetric positive definite at random poses") {
  BipedModel m;
  std::mt19937 rng(3);
  for (int i = 0; i < 100; ++i) {
    VecQ q = random_pose(rng);
    DynamicsTerms t = dynamics_terms(m, q, VecQ::Zero());
    CHECK((t.H - t.H.transpose()).cwiseAbs().maxCoeff() < 1e-12);
    Eigen::SelfAdjointEigenSolver<MatQ> es(t.H);
    CHECK(es.eigenvalues().minCoeff() > 1e-6);
  }
}

TEST_CASE("dynamics: Hdot/Coriolis energy-rate identity") {
  // d/dt (1/2 v' H v) with qdd = 0 gives 1/2 v' Hdot v = v' C.
  BipedModel m;
  std::mt19937 rng(4);
  const double h = 1e-5;
  for (int i = 0; i < 20; ++i) {
    VecQ q = random_pose(rng);
    VecQ v = random_vel(rng);
    v.normalize();
    DynamicsTerms t = dynamics_terms(m, q, v);
    MatQ Hp = dynamics_terms(m, q + h * v, v).H;
    MatQ Hm = dynamics_terms(m, q - h * v, v).H;
    double lhs = 0.5 * v.dot(((Hp - Hm) / (2.0 * h)) * v);
    double rhs = v.dot(t.C);
    CHECK(std::abs(lhs - rhs) < 1e-8 * (1.0 + std::abs(lhs)));
  }
}

TEST_CASE("dynamics: gravity vector is the potential-energy gradient") {
  BipedModel m;
  std::mt19937 rng(5);
  const double h = 1e-6;
  for (int i = 0; i < 10; ++i) {
    VecQ q = random_pose(rng);
    DynamicsTerms t = dynamics_terms(m, q, VecQ::Zero());
    for (int j = 0; j < kNq; ++j) {
      VecQ qp = q, qm = q;
      qp(j) += h;
      qm(j) -= h;
      // potential energy = mechanical energy at rest
      double dv = (mechanical_energy(m, qp, VecQ::Zero()) -
                   mechanical_energy(m, qm, VecQ::Zero())) /
                  (2.0 * h);
      CHECK(t.G(j) == doctest::Approx(dv).epsilon(1e-6));
    }
  }
}

TEST_CASE("kinematics: analytic Jacobians match finite differences") {
  BipedModel m;
  std::mt19937 rng(6);
  const double h = 1e-6;
  for (int i = 0; i < 10; ++i) {
    VecQ q = random_pose(rng);
    auto points = [&](const VecQ& qq) {
      Kinematics k = kinematics(m, qq);
      Eigen::Matrix<double, 10, 1> p;
      p << k.com.pos, k.foot_l.ankle.pos, k.foot_l.heel.pos, k.foot_l.toe.pos,
          k.foot_r.toe.pos;
      return p;
    };
    Kinematics k = kinematics(m, q);
    Eigen::Matrix<double, 10, kNq> J_fd;
    for (int j = 0; j < kNq; ++j) {
      VecQ qp = q, qm = q;
      qp(j) += h;
      qm(j) -= h;
      J_fd.col(j) = (points(qp) - points(qm)) / (2.0 * h);
    }
    CHECK((k.com.J - J_fd.topRows(2)).cwiseAbs().maxCoeff() < 1e-6);
    CHECK((k.foot_l.ankle.J - J_fd.middleRows(2, 2)).cwiseAbs().maxCoeff() < 1e-6);
    CHECK((k.foot_l.heel.J - J_fd.middleRows(4, 2)).cwiseAbs().maxCoeff() < 1e-6);
    CHECK((k.foot_l.toe.J - J_fd.middleRows(6, 2)).cwiseAbs().maxCoeff() < 1e-6);
    CHECK((k.foot_r.toe.J - J_fd.middleRows(8, 2)).cwiseAbs().maxCoeff() < 1e-6);
  }
}

TEST_CASE("kinematics: bias acceleration matches d/dt(J v)") {
  BipedModel m;
  std::mt19937 rng(7);
  const double h = 1e-6;
  for (int i = 0; i < 10; ++i) {
    VecQ q = random_pose(rng);
    VecQ v = random_vel(rng);
    Kinematics k = kinematics(m, q, v);
    auto vel_of = [&](const VecQ& qq) {
      Kinematics kk = kinematics(m, qq, v);
      Eigen::Matrix<double, 4, 1> out;
      out << kk.com.vel, kk.foot_l.toe.vel;
      return out;
    };
    Eigen::Matrix<double, 4, 1> fd = (vel_of(q + h * v) - vel_of(q - h * v)) / (2.0 * h);
    CHECK((k.com.bias - fd.head<2>()).cwiseAbs().maxCoeff() < 1e-5);
    CHECK((k.foot_l.toe.bias - fd.tail<2>()).cwiseAbs().maxCoeff() < 1e-5);
  }
}

TEST_CASE("kinematics: symmetric pose puts the CoM midway between the feet") {
  BipedModel m;
  m.foot_heel = -0.08;  // fore-aft symmetric feet make the pose mirror-exact
  m.foot_toe = 0.08;
  VecQ q = VecQ::Zero();
  q(0) = 0.37;
  q(1) = 1.0;
  q(3) = 0.3;   // left leg forward
  q(5) = -0.3;  // feet flat
  q(6) = -0.3;  // right leg back
  q(8) = 0.3;
  Kinematics k = kinematics(m, q);
  double mid = 0.5 * (k.foot_l.ankle.pos.x() + k.foot_r.ankle.pos.x());
  CHECK(mid == doctest::Approx(0.37).epsilon(1e-12));
  CHECK(k.com.pos.x() == doctest::Approx(mid).epsilon(1e-12));
}

TEST_CASE("kinematics: straight leg is singular along the leg axis") {
  BipedModel m;
  VecQ q = standing_pose(m);
  q(3) = 0.2;  // hip angle arbitrary, knee locked straight
  Kinematics k = kinematics(m, q);
  Eigen::Matrix2d legJ;
  legJ.col(0) = k.foot_l.ankle.J.col(3);
  legJ.col(1) = k.foot_l.ankle.J.col(4);
  Eigen::JacobiSVD<Eigen::Matrix2d> svd(legJ);
  CHECK(svd.singularValues()(1) < 1e-8);
}

TEST_CASE("contact: foot above ground gives zero forces") {
  BipedModel m;
  Terrain ground = Terrain::flat();
  VecQ q = standing_pose(m, 0.01);
  ContactState cs = contact_forces(m, q, VecQ::Zero(), ground);
  CHECK(cs.normal_total() == 0.0);
  CHECK(!cs.left.heel.active);
  CHECK(!cs.right.toe.active);
}

TEST_CASE("step: airborne CoM is ballistic and conserves momentum") {
  BipedModel m;
  Terrain ground = Terrain::flat();
  GeneralizedState s;
  s.q = standing_pose(m, 0.5);
  s.q(3) = 0.4;
  s.q(6) = -0.3;
  s.v << 0.05, 0.1, 0.08, -0.15, 0.1, 0.04, 0.12, -0.08, 0.03;
  const double dt = 1e-5;
  const int n = 20000;  // 0.2 s
  Eigen::Vector3d p0 = momentum(m, s.q, s.v);
  double vz0 = p0(1) / m.total_mass();
  for (int k = 0; k < n; ++k) s = step(m, s, VecJ::Zero(), ground, dt).state;
  Eigen::Vector3d p1 = momentum(m, s.q, s.v);
  CHECK(std::abs(p1(0) - p0(0)) < 1e-6);  // horizontal momentum
  CHECK(std::abs(p1(2) - p0(2)) < 1e-6);  // angular momentum about CoM
  // vertical CoM velocity follows -g t exactly under the semi-implicit update
  CHECK(p1(1) / m.total_mass() ==
        doctest::Approx(vz0 - 9.81 * n * dt).epsilon(1e-9));
}

TEST_CASE("step: airborne energy drift below 1e-4 J over 0.3 s") {
  BipedModel m;
  Terrain ground = Terrain::flat();
  GeneralizedState s;
  s.q = standing_pose(m, 1.0);
  s.q(3) = 0.3;
  s.q(4) = -0.4;
  s.q(6) = -0.2;
  s.v << 0.02, 0.1, 0.06, -0.16, 0.12, 0.06, 0.14, -0.08, 0.02;
  // The first-order integrator carries a systematic energy offset of about
  // 0.5 m g^2 t dt, so the 1e-4 J budget over 0.3 s requires a small dt.
  const double dt = 2e-7;
  double e0 = mechanical_energy(m, s.q, s.v);
  double worst = 0.0;
  for (int k = 0; k < 1500000; ++k) {
    s = step(m, s, VecJ::Zero(), ground, dt).state;
    if (k % 500 == 0)
      worst = std::max(worst, std::abs(mechanical_energy(m, s.q, s.v) - e0));
  }
  worst = std::max(worst, std::abs(mechanical_energy(m, s.q, s.v) - e0));
  CHECK(worst < 1e-4);
}

TEST_CASE("step: matches independent integrators airborne under torque") {
  BipedModel m;
  Terrain ground = Terrain::flat();
  GeneralizedState s;
  s.q = standing_pose(m, 1.5);
  s.q(4) = -0.5;
  s.q(7) = -0.5;
  VecJ tau;
  tau << 5.0, -3.0, 1.0, -4.0, 2.0, -1.0;

  auto f = [&](double, const numkit::Vector& x) {
    VecQ q = x.head<kNq>(), v = x.tail<kNq>();
    DynamicsTerms t = dynamics_terms(m, q, v);
    VecQ rhs = -t.C - t.G;
    rhs.tail<kNj>() += tau;
    numkit::Vector dx(2 * kNq);
    dx.head<kNq>() = v;
    dx.tail<kNq>() = t.H.ldlt().solve(rhs);
    return dx;
  };
  numkit::Vector x0(2 * kNq);
  x0.head<kNq>() = s.q;
  x0.tail<kNq>() = s.v;

  // exact-scheme agreement with the numkit semi-implicit integrator
  auto semi = numkit::integrate_fixed(f, x0, 1e-4, 0.3,
                                      numkit::IntegrationMethod::SemiImplicitEuler);
  GeneralizedState s1 = s;
  for (int k = 0; k < 3000; ++k) s1 = step(m, s1, tau, ground, 1e-4).state;
  CHECK((s1.q - semi.back().head<kNq>()).cwiseAbs().maxCoeff() < 1e-12);

  // convergence toward a high-order RK4 reference
  auto ref = numkit::integrate_fixed(f, x0, 1e-4, 0.3,
                                     numkit::IntegrationMethod::RK4);
  GeneralizedState s2 = s;
  for (int k = 0; k < 300000; ++k) s2 = step(m, s2, tau, ground, 1e-6).state;
  CHECK((s2.q - ref.back().head<kNq>()).cwiseAbs().maxCoeff() < 2e-4);
}

TEST_CASE("step: settling statics carries the weight within 1%") {
  BipedModel m;
  Terrain ground = Terrain::flat();
  GeneralizedState s;
  s.q = standing_pose(m, 0.002);
  ContactState contact;
  const double dt = 2e-4;
  for (int k = 0; k < 2500; ++k) {  // 0.5 s
    StepResult r = step(m, s, hold_pd(s.q, s.v), ground, dt, &contact);
    s = r.state;
    contact = r.contact;
    // friction cone respected at every instant
    CHECK(std::abs(contact.left.heel.ft) <= m.mu * contact.left.heel.fn + 1e-9);
    CHECK(std::abs(contact.right.toe.ft) <= m.mu * contact.right.toe.fn + 1e-9);
  }
  const double w = m.total_mass() * 9.81;
  CHECK(std::abs(contact.normal_total() - w) < 0.01 * w);
  CHECK(contact.left.heel.pen < 0.0025);  // settles under ~2 mm penetration
  CHECK(s.v.norm() < 0.05);
}

TEST_CASE("step: passive contact never creates energy") {
  BipedModel m;
  Terrain ground = Terrain::flat();
  GeneralizedState s;
  s.q = standing_pose(m, 0.03);  // small drop, zero torque collapse
  ContactState contact;
  double e0 = mechanical_energy(m, s.q, s.v);
  const double dt = 2e-4;
  for (int k = 0; k < 2500; ++k) {
    StepResult r = step(m, s, VecJ::Zero(), ground, dt, &contact);
    s = r.state;
    contact = r.contact;
    CHECK(mechanical_energy(m, s.q, s.v) <= e0 + 1e-3 * (k + 1) * dt + 1e-9);
  }
}

TEST_CASE("step: determinism is bitwise") {
  BipedModel m;
  Terrain ground = Terrain::flat();
  auto run = [&]() {
    GeneralizedState s;
    s.q = standing_pose(m, 0.002);
    ContactState contact;
    for (int k = 0; k < 1500; ++k) {
      StepResult r = step(m, s, hold_pd(s.q, s.v), ground, 2e-4, &contact);
      s = r.state;
      contact = r.contact;
    }
    return s;
  };
  GeneralizedState a = run(), b = run();
  CHECK(std::memcmp(a.q.data(), b.q.data(), sizeof(double) * kNq) == 0);
  CHECK(std::memcmp(a.v.data(), b.v.data(), sizeof(double) * kNq) == 0);
}

TEST_CASE("step: torque clamp flagged, non-finite state throws") {
  BipedModel m;
  Terrain ground = Terrain::flat();
  GeneralizedState s;
  s.q = standing_pose(m, 0.5);
  VecJ huge = VecJ::Constant(1e4);
  CHECK(step(m, s, huge, ground).torque_clamped);
  CHECK(!step(m, s, VecJ::Zero(), ground).torque_clamped);

  s.v = VecQ::Constant(1e160);
  CHECK_THROWS_AS(step(m, s, VecJ::Zero(), ground), NonFinite);
}

TEST_CASE("terrain: interpolation, slopes, and validation") {
  Terrain t({{-1.0, 0.0}, {0.0, 0.0}, {1.0, 0.1}});
  CHECK(t.height(-0.5) == doctest::Approx(0.0));
  CHECK(t.height(0.5) == doctest::Approx(0.05));
  CHECK(t.slope(0.5) == doctest::Approx(std::atan(0.1)));
  CHECK(t.slope(-0.5) == doctest::Approx(0.0));
  // extrapolation continues the last segment
  CHECK(t.height(2.0) == doctest::Approx(0.2));
  CHECK_THROWS(Terrain({{0.0, 0.0}, {1.0, 0.5}}));  // > 15 degrees
  CHECK_THROWS(Terrain({{1.0, 0.0}, {0.0, 0.0}}));  // x not increasing

  Terrain s = Terrain::uniform_slope(10.0 * M_PI / 180.0);
  CHECK(s.slope(0.3) == doctest::Approx(10.0 * M_PI / 180.0));
  CHECK(s.height(1.0) == doctest::Approx(std::tan(10.0 * M_PI / 180.0)));
}

TEST_CASE("events: edges and scripted alternation") {
  ContactState off, on_l, on_r, on_both;
  on_l.left.heel.fn = 100.0;
  on_r.right.heel.fn = 100.0;
  on_both = on_l;
  on_both.right.heel.fn = 100.0;

  CHECK(detect_events(off, off).empty());
  CHECK(detect_events(on_both, on_both).empty());

  auto ev = detect_events(off, on_l);
  REQUIRE(ev.size() == 1);
  CHECK(ev[0] == Event::HeelStrikeL);

  // scripted gait: L strike, R off, R strike, L off
  std::vector<ContactState> trace{on_r, on_both, on_l, on_both, on_r};
  std::vector<Event> seq;
  for (size_t i = 1; i < trace.size(); ++i)
    for (Event e : detect_events(trace[i - 1], trace[i])) seq.push_back(e);
  REQUIRE(seq.size() == 4);
  CHECK(seq[0] == Event::HeelStrikeL);
  CHECK(seq[1] == Event::ToeOffR);
  CHECK(seq[2] == Event::HeelStrikeR);
  CHECK(seq[3] == Event::ToeOffL);

  // mid-stance on the hip-offset zero crossing
  auto ms = detect_events(on_l, on_l, -0.02, 0.01);
  REQUIRE(ms.size() == 1);
  CHECK(ms[0] == Event::MidStance);
  CHECK(detect_events(on_l, on_l, 0.01, 0.03).empty());
}

TEST_CASE("contact: sub-threshold forces do not count as support") {
  ContactState weak;
  weak.left.heel.fn = 2.0;
  weak.left.toe.fn = 2.0;
  CHECK(!weak.left.in_contact());
  weak.left.toe.fn = 4.0;
  CHECK(weak.left.in_contact());
}
