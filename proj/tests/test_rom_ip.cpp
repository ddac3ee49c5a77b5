#include <cmath>
#include <random>

#include "biped/numkit.hpp"
#include "biped/rom_ip.hpp"
#include "doctest.h"

using namespace biped;
using namespace biped::ip;
using numkit::Vector;

namespace {

// Integrate the inverted pendulum thdd = (g/l) sin(th) from (th0, w0) until
// |theta| reaches theta_end; returns (rate, elapsed time). RK4, dt = 1e-5.
std::pair<double, double> pendulum_to_angle(const IpParams& params, double th0,
                                            double w0, double theta_end) {
  const double dt = 1e-5;
  double th = th0, w = w0, t = 0.0;
  auto acc = [&](double a) { return params.g / params.l * std::sin(a); };
  for (int i = 0; i < 10000000; ++i) {
    double thp = th, wp = w;
    double k1t = w, k1w = acc(th);
    double k2t = w + 0.5 * dt * k1w, k2w = acc(th + 0.5 * dt * k1t);
    double k3t = w + 0.5 * dt * k2w, k3w = acc(th + 0.5 * dt * k2t);
    double k4t = w + dt * k3w, k4w = acc(th + dt * k3t);
    th += dt / 6.0 * (k1t + 2 * k2t + 2 * k3t + k4t);
    w += dt / 6.0 * (k1w + 2 * k2w + 2 * k3w + k4w);
    t += dt;
    if (th >= theta_end) {
      // interpolate the crossing inside the last step
      double frac = (theta_end - thp) / (th - thp);
      return {wp + frac * (w - wp), t - dt + frac * dt};
    }
  }
  return {w, t};
}

}  // namespace

TEST_CASE("swing_down: limiting cases") {
  IpParams params{30.0, 1.0, 9.81};
  CHECK(swing_down(params, 1.0, 1e-12) == doctest::Approx(1.0).epsilon(1e-9));
  double w0 = swing_down(params, 0.0, 0.3);
  CHECK(w0 == doctest::Approx(std::sqrt(2 * 9.81 * (1 - std::cos(0.3)))).epsilon(1e-12));
}

TEST_CASE("swing_down: matches pendulum ODE oracle") {
  IpParams params{30.0, 1.0, 9.81};
  double wm = swing_down(params, 1.0, 0.3);
  CHECK(wm == doctest::Approx(1.36979).epsilon(1e-5));
  auto [w_ref, t_ref] = pendulum_to_angle(params, 1e-8, 1.0, 0.3);
  CHECK(std::abs(wm - w_ref) < 1e-6);
  CHECK(std::abs(swing_time(params, 1.0, 0.3) - t_ref) < 1e-5);
}

TEST_CASE("pushoff_and_impact: reference and passive limits") {
  IpParams params{30.0, 1.0, 9.81};
  double wm = 1.36979;
  CHECK(pushoff_and_impact(params, wm, 1e-12, 0.0) == doctest::Approx(wm));
  double wp = pushoff_and_impact(params, wm, 0.3, 0.2 * params.m * params.l);
  CHECK(wp == doctest::Approx(1.01761).epsilon(1e-4));
  // passive collision never gains speed
  std::mt19937 rng(4);
  std::uniform_real_distribution<double> td(0.01, M_PI / 3.0), wd(0.0, 3.0);
  for (int i = 0; i < 200; ++i) {
    double w = wd(rng), th = td(rng);
    CHECK(std::abs(pushoff_and_impact(params, w, th, 0.0)) <= std::abs(w) + 1e-15);
  }
}

TEST_CASE("pushoff_and_impact: two-impulse momentum-balance oracle") {
  // Velocity before push-off is l w perpendicular to the old leg; push-off
  // adds p/m along it; heel strike keeps only the component perpendicular
  // to the new leg, which sits at 2 theta_sw from the old one.
  IpParams params{30.0, 1.0, 9.81};
  std::mt19937 rng(9);
  std::uniform_real_distribution<double> td(0.05, 0.6), wd(0.1, 3.0), pd(-15.0, 5.0);
  for (int i = 0; i < 100; ++i) {
    double th = td(rng), wm = wd(rng), p = pd(rng);
    Eigen::Vector2d v = params.l * wm * Eigen::Vector2d(1.0, 0.0) +
                        p / params.m * Eigen::Vector2d(0.0, 1.0);
    double c = std::cos(2 * th), s = std::sin(2 * th);
    Eigen::Vector2d perp_new(c, -s);  // perpendicular to the new leg
    double wp_oracle = v.dot(perp_new) / params.l;
    CHECK(pushoff_and_impact(params, wm, th, p) ==
          doctest::Approx(wp_oracle).epsilon(1e-12));
  }
}

TEST_CASE("swing_up: boundary and reference values") {
  IpParams params{30.0, 1.0, 9.81};
  double bound = std::sqrt(2 * 9.81 * (1 - std::cos(0.3)));
  auto w = swing_up(params, bound + 1e-9, 0.3);
  REQUIRE(w.has_value());
  CHECK(*w < 1e-4);
  auto w2 = swing_up(params, 1.01761, 0.3);
  REQUIRE(w2.has_value());
  CHECK(*w2 == doctest::Approx(0.39903).epsilon(1e-4));
  CHECK(!swing_up(params, 0.9 * bound, 0.3).has_value());
}

TEST_CASE("swing_up inverts swing_down without impulse") {
  IpParams params{30.0, 0.8, 9.81};
  std::mt19937 rng(5);
  std::uniform_real_distribution<double> td(0.01, M_PI / 3.0), wd(0.01, 3.0);
  for (int i = 0; i < 200; ++i) {
    double w = wd(rng), th = td(rng);
    auto back = swing_up(params, swing_down(params, w, th), th);
    REQUIRE(back.has_value());
    CHECK(std::abs(*back - w) < 1e-12);
  }
}

TEST_CASE("impact map is linear in (omega_minus, p)") {
  IpParams params{30.0, 0.8, 9.81};
  std::mt19937 rng(6);
  std::uniform_real_distribution<double> td(0.05, 0.6), wd(0.0, 3.0), pd(-20.0, 6.0);
  for (int i = 0; i < 100; ++i) {
    double th = td(rng);
    double w1 = wd(rng), w2 = wd(rng), p1 = pd(rng), p2 = pd(rng);
    double a = 0.3, b = 0.7;
    double lhs = pushoff_and_impact(params, a * w1 + b * w2, th, a * p1 + b * p2);
    double rhs = a * pushoff_and_impact(params, w1, th, p1) +
                 b * pushoff_and_impact(params, w2, th, p2);
    CHECK(std::abs(lhs - rhs) < 1e-12);
  }
}

TEST_CASE("step_map: periodic push-off and contraction") {
  IpParams params{30.0, 1.0, 9.81};
  double p_star = periodic_pushoff(params, 1.0, 0.3);
  CHECK(p_star / (params.m * params.l) == doctest::Approx(-0.42371).epsilon(1e-4));

  // bisection oracle for the fixed point push-off
  double lo = -1.0 * params.m * params.l, hi = 0.0, target = 1.0;
  for (int it = 0; it < 100; ++it) {
    double mid = 0.5 * (lo + hi);
    auto s = step_map(params, {1.0}, {0.3, mid});
    if (s && s->omega_k > target)
      lo = mid;  // more positive p removes energy
    else
      hi = mid;
  }
  CHECK(p_star == doctest::Approx(0.5 * (lo + hi)).epsilon(1e-6));

  auto fixed = step_map(params, {1.0}, {0.3, p_star});
  REQUIRE(fixed.has_value());
  CHECK(fixed->omega_k == doctest::Approx(1.0).epsilon(1e-10));

  auto pert = step_map(params, {1.1}, {0.3, p_star});
  REQUIRE(pert.has_value());
  CHECK(std::abs(pert->omega_k - 1.0) < 0.1);
  double h = 1e-6;
  auto up = step_map(params, {1.0 + h}, {0.3, p_star});
  auto dn = step_map(params, {1.0 - h}, {0.3, p_star});
  CHECK(std::abs((up->omega_k - dn->omega_k) / (2 * h)) < 1.0);
}

TEST_CASE("step_map: insufficient energy falls backward") {
  IpParams params{30.0, 1.0, 9.81};
  CHECK(!step_map(params, {0.05}, {kThetaSwMax, 0.0}).has_value());
}

TEST_CASE("step energy bookkeeping identity") {
  IpParams params{30.0, 0.8, 9.81};
  std::mt19937 rng(7);
  std::uniform_real_distribution<double> td(0.05, 0.6), wd(0.3, 3.0), pd(-20.0, 6.0);
  int checked = 0;
  for (int i = 0; i < 200; ++i) {
    double w = wd(rng), th = td(rng), p = pd(rng);
    auto next = step_map(params, {w}, {th, p});
    if (!next) continue;
    ++checked;
    double ml2 = params.m * params.l * params.l;
    double e_k = 0.5 * ml2 * w * w;
    double e_k1 = 0.5 * ml2 * next->omega_k * next->omega_k;
    StepEnergy se = step_energy(params, w, th, p);
    CHECK(se.w_collision <= 0.0);
    CHECK(std::abs((e_k1 - e_k) - (se.w_pushoff + se.w_collision)) < 1e-9);
  }
  CHECK(checked > 50);
}

TEST_CASE("orbit_of: energy reference and direction convention") {
  IpParams params{30.0, 1.0, 9.81};
  auto o0 = orbit_of(params, 0.0, 0.0, 0.0);
  CHECK(o0.E == doctest::Approx(0.0));
  CHECK(o0.dir == OrbitDir::Up);
  // at rest below the apex the orbit energy is negative by the apex-rest
  // reference: E = -m g l (1 - cos theta)
  auto o1 = orbit_of(params, 0.2, 0.0, 0.0);
  CHECK(o1.E == doctest::Approx(-params.m * params.g * params.l *
                                (1 - std::cos(0.2))).epsilon(1e-12));
  CHECK(orbit_of(params, 0.2, 0.5, 0.0).dir == OrbitDir::Down);
  CHECK(orbit_of(params, 0.2, -0.5, 0.0).dir == OrbitDir::Up);
  CHECK(orbit_of(params, -0.2, -0.5, 0.0).dir == OrbitDir::Down);
}

TEST_CASE("orbit energy is conserved along unforced stance motion") {
  IpParams params{30.0, 1.0, 9.81};
  Vector x0(2);
  x0 << 0.05, 0.8;
  auto f = [&](double, const Vector& x) {
    Vector d(2);
    d(0) = x(1);
    d(1) = params.g / params.l * std::sin(x(0));
    return d;
  };
  auto traj = numkit::integrate_fixed(f, x0, 1e-4, 0.5,
                                      numkit::IntegrationMethod::RK4);
  double e0 = orbit_energy(params, x0(0), x0(1));
  for (const auto& x : traj.x)
    CHECK(std::abs(orbit_energy(params, x(0), x(1)) - e0) < 1e-6);
}

TEST_CASE("enumerate_transitions: direction gating") {
  IpParams params{30.0, 1.0, 9.81};
  std::vector<IpAction> grid;
  for (double th : {0.2, 0.3, 0.4})
    for (double pml : {-0.6, -0.4, -0.2, 0.0})
      grid.push_back({th, pml * params.m * params.l});

  OrbitParams up = orbit_of(params, 0.1, -0.5, 0.0);
  auto succ_up = enumerate_transitions(params, up, grid);
  REQUIRE(succ_up.size() == 1);
  CHECK(!succ_up[0].action.has_value());
  CHECK(succ_up[0].target.dir == OrbitDir::Down);

  OrbitParams down = orbit_of(params, 0.1, 0.9, 0.0);
  auto succ_down = enumerate_transitions(params, down, grid);
  CHECK(succ_down.size() > 1);
  for (size_t i = 1; i < succ_down.size(); ++i) {
    CHECK(succ_down[i].action.has_value());
    CHECK(succ_down[i].target.dir == OrbitDir::Up);
    CHECK(succ_down[i].target.x_foot > 0.0);
  }

  auto none = enumerate_transitions(params, down, {});
  CHECK(none.size() == 1);
}

TEST_CASE("enumerate_transitions: steady-state transition reproduces itself") {
  IpParams params{30.0, 1.0, 9.81};
  const double w_star = 1.0, th_star = 0.3;
  double p_star = periodic_pushoff(params, w_star, th_star);
  // Orbit of the nominal gait during the down phase.
  OrbitParams o = orbit_of(params, 0.1, std::sqrt(w_star * w_star +
                           2 * params.g / params.l * (1 - std::cos(0.1))), 0.0);
  auto succ = enumerate_transitions(params, o, {{th_star, p_star}});
  REQUIRE(succ.size() == 2);
  const OrbitParams& next = succ[1].target;
  // Same orbital energy: the nominal gait maps onto itself, shifted by one
  // step length.
  CHECK(next.E == doctest::Approx(o.E).epsilon(1e-9));
  CHECK(next.x_foot ==
        doctest::Approx(2 * params.l * std::sin(th_star)).epsilon(1e-12));
}

TEST_CASE("orbit graph: stance-change edges only from down nodes; json") {
  IpParams params{30.0, 1.0, 9.81};
  std::vector<IpAction> grid;
  for (double pml : {-0.6, -0.42371, -0.2})
    grid.push_back({0.3, pml * params.m * params.l});
  OrbitParams root = orbit_of(params, 0.0, 1.0, 0.0);
  OrbitGraph g = build_orbit_graph(params, root, grid, 3);
  REQUIRE(!g.nodes.empty());
  for (const auto& e : g.edges)
    if (e.stance_change) CHECK(g.nodes[e.from].dir == OrbitDir::Down);
  std::string js = orbit_graph_json(g);
  CHECK(js.find("stance-change") != std::string::npos);
  CHECK(js.find("e_bin") != std::string::npos);
}
