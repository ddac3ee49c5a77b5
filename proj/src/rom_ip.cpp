#include "biped/rom_ip.hpp"

#include <cmath>
#include <deque>
#include <limits>

#include "json.hpp"

namespace biped::ip {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double simpson(const std::function<double(double)>& f, double a, double b, int n) {
  if (n % 2 != 0) ++n;
  const double h = (b - a) / n;
  double s = f(a) + f(b);
  for (int i = 1; i < n; ++i) s += f(a + i * h) * (i % 2 ? 4.0 : 2.0);
  return s * h / 3.0;
}

double adaptive_simpson(const std::function<double(double)>& f, double a, double b,
                        double tol) {
  double prev = simpson(f, a, b, 8);
  for (int n = 16; n <= 4096; n *= 2) {
    double cur = simpson(f, a, b, n);
    if (std::abs(cur - prev) < tol * (1.0 + std::abs(cur))) return cur;
    prev = cur;
  }
  return prev;
}

void check_theta(double theta_sw) {
  if (!(theta_sw > 0.0) || theta_sw > kThetaSwMax + 1e-12)
    throw std::invalid_argument("theta_sw outside (0, pi/3]");
}

}  // namespace

double swing_down(const IpParams& params, double omega_k, double theta_sw) {
  check_theta(theta_sw);
  const double gain = 2.0 * params.g / params.l * (1.0 - std::cos(theta_sw));
  return std::sqrt(omega_k * omega_k + gain);
}

double pushoff_and_impact(const IpParams& params, double omega_minus,
                          double theta_sw, double p) {
  return omega_minus * std::cos(2.0 * theta_sw) -
         p / (params.m * params.l) * std::sin(2.0 * theta_sw);
}

std::optional<double> swing_up(const IpParams& params, double omega_plus,
                               double theta_sw) {
  check_theta(theta_sw);
  const double loss = 2.0 * params.g / params.l * (1.0 - std::cos(theta_sw));
  const double rad = omega_plus * omega_plus - loss;
  if (rad < 0.0) return std::nullopt;  // falls backward before mid-stance
  return std::sqrt(rad);
}

std::optional<IpStepState> step_map(const IpParams& params, const IpStepState& s,
                                    const IpAction& a) {
  const double wm = swing_down(params, s.omega_k, a.theta_sw);
  const double wp = pushoff_and_impact(params, wm, a.theta_sw, a.p);
  if (wp <= 0.0) return std::nullopt;  // heel strike reverses the motion
  auto wn = swing_up(params, wp, a.theta_sw);
  if (!wn) return std::nullopt;
  return IpStepState{*wn};
}

double periodic_pushoff(const IpParams& params, double omega, double theta_sw) {
  check_theta(theta_sw);
  const double wm = swing_down(params, omega, theta_sw);
  // Periodicity needs omega_plus = omega_minus (swing_up inverts swing_down).
  return params.m * params.l * wm * (std::cos(2.0 * theta_sw) - 1.0) /
         std::sin(2.0 * theta_sw);
}

double swing_time(const IpParams& params, double omega, double theta_sw) {
  check_theta(theta_sw);
  if (omega < 1e-9) return kInf;
  const double c = 2.0 * params.g / params.l;
  auto rate = [&](double th) {
    return 1.0 / std::sqrt(omega * omega + c * (1.0 - std::cos(th)));
  };
  return adaptive_simpson(rate, 0.0, theta_sw, 1e-10);
}

std::optional<StepOutcome> step_outcome(const IpParams& params, const IpStepState& s,
                                        const IpAction& a) {
  auto next = step_map(params, s, a);
  if (!next) return std::nullopt;
  StepOutcome out;
  out.omega_next = next->omega_k;
  out.step_length = 2.0 * params.l * std::sin(a.theta_sw);
  out.duration = swing_time(params, s.omega_k, a.theta_sw) +
                 swing_time(params, next->omega_k, a.theta_sw);
  out.mean_speed = out.duration < kInf ? out.step_length / out.duration : 0.0;
  return out;
}

NominalGait nominal_gait(const IpParams& params, double v_des, double t_pref) {
  NominalGait gait;
  const double sin_th =
      std::clamp(v_des * t_pref / (2.0 * params.l), 1e-3, std::sin(kThetaSwMax));
  gait.theta_sw = std::asin(sin_th);
  // Half-step time l sin(theta)/v_des is monotone decreasing in omega.
  const double target = params.l * sin_th / v_des;
  double lo = 1e-4, hi = 20.0;
  for (int it = 0; it < 200; ++it) {
    double mid = 0.5 * (lo + hi);
    (swing_time(params, mid, gait.theta_sw) > target ? lo : hi) = mid;
  }
  gait.omega = 0.5 * (lo + hi);
  gait.p = periodic_pushoff(params, gait.omega, gait.theta_sw);
  gait.duration = 2.0 * swing_time(params, gait.omega, gait.theta_sw);
  return gait;
}

StepEnergy step_energy(const IpParams& params, double omega_k, double theta_sw,
                       double p) {
  const double wm = swing_down(params, omega_k, theta_sw);
  const double v_along_new = params.l * wm * std::sin(2.0 * theta_sw) +
                             p / params.m * std::cos(2.0 * theta_sw);
  StepEnergy e;
  e.w_pushoff = p * p / (2.0 * params.m);
  e.w_collision = -0.5 * params.m * v_along_new * v_along_new;
  return e;
}

double orbit_energy(const IpParams& params, double theta, double theta_dot) {
  return 0.5 * params.m * params.l * params.l * theta_dot * theta_dot +
         params.m * params.g * params.l * (std::cos(theta) - 1.0);
}

OrbitParams orbit_of(const IpParams& params, double theta, double theta_dot,
                     double x_foot) {
  OrbitParams o;
  o.E = orbit_energy(params, theta, theta_dot);
  o.x_foot = x_foot;
  o.dir = theta * theta_dot > 0.0 ? OrbitDir::Down : OrbitDir::Up;
  return o;
}

std::vector<OrbitTransition> enumerate_transitions(const IpParams& params,
                                                   const OrbitParams& o,
                                                   const std::vector<IpAction>& grid) {
  std::vector<OrbitTransition> out;
  OrbitParams time_next = o;
  time_next.dir = OrbitDir::Down;  // passage of time carries the mass past apex
  out.push_back({std::nullopt, time_next});
  if (o.dir != OrbitDir::Down) return out;
  for (const IpAction& a : grid) {
    // Rate when the stance leg reaches the step angle on this orbit.
    const double pot = params.m * params.g * params.l * (std::cos(a.theta_sw) - 1.0);
    const double kin = o.E - pot;
    if (kin <= 0.0) continue;  // orbit never reaches theta_sw
    const double wm = std::sqrt(2.0 * kin / (params.m * params.l * params.l));
    const double wp = pushoff_and_impact(params, wm, a.theta_sw, a.p);
    if (wp <= 0.0) continue;
    OrbitParams next;
    next.E = orbit_energy(params, a.theta_sw, wp);
    next.x_foot = o.x_foot + 2.0 * params.l * std::sin(a.theta_sw);
    next.dir = OrbitDir::Up;
    out.push_back({a, next});
  }
  return out;
}

OrbitGraph build_orbit_graph(const IpParams& params, const OrbitParams& root,
                             const std::vector<IpAction>& grid, int max_depth) {
  OrbitGraph g;
  auto bin = [](double v, double w) { return static_cast<int>(std::floor(v / w)); };
  auto node_of = [&](const OrbitParams& o) {
    return OrbitGraph::Node{bin(o.E, g.e_bin_width), bin(o.x_foot, g.x_bin_width),
                            o.dir};
  };
  auto find_or_add = [&](const OrbitGraph::Node& n) {
    for (size_t i = 0; i < g.nodes.size(); ++i)
      if (g.nodes[i] == n) return static_cast<int>(i);
    g.nodes.push_back(n);
    return static_cast<int>(g.nodes.size()) - 1;
  };
  struct Item {
    OrbitParams o;
    int depth;
  };
  std::deque<Item> queue{{root, 0}};
  find_or_add(node_of(root));
  while (!queue.empty()) {
    Item it = queue.front();
    queue.pop_front();
    if (it.depth >= max_depth) continue;
    int from = find_or_add(node_of(it.o));
    for (const auto& tr : enumerate_transitions(params, it.o, grid)) {
      OrbitGraph::Node tn = node_of(tr.target);
      bool known = false;
      for (const auto& n : g.nodes)
        if (n == tn) { known = true; break; }
      int to = find_or_add(tn);
      bool dup = false;
      for (const auto& e : g.edges)
        if (e.from == from && e.to == to &&
            e.stance_change == tr.action.has_value()) {
          dup = true;
          break;
        }
      if (!dup)
        g.edges.push_back({from, to, tr.action.has_value(),
                           tr.action.value_or(IpAction{})});
      if (!known) queue.push_back({tr.target, it.depth + 1});
    }
  }
  return g;
}

std::string orbit_graph_json(const OrbitGraph& g) {
  nlohmann::json j;
  j["e_bin_width"] = g.e_bin_width;
  j["x_bin_width"] = g.x_bin_width;
  j["nodes"] = nlohmann::json::array();
  for (const auto& n : g.nodes)
    j["nodes"].push_back({{"e_bin", n.e_bin},
                          {"x_bin", n.x_bin},
                          {"dir", n.dir == OrbitDir::Up ? "up" : "down"}});
  j["edges"] = nlohmann::json::array();
  for (const auto& e : g.edges) {
    nlohmann::json je = {{"from", e.from},
                         {"to", e.to},
                         {"label", e.stance_change ? "stance-change" : "time"}};
    if (e.stance_change)
      je["action"] = {{"theta_sw", e.action.theta_sw}, {"p", e.action.p}};
    j["edges"].push_back(je);
  }
  return j.dump(2);
}

}  // namespace biped::ip
