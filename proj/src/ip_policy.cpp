#include "biped/ip_policy.hpp"

#include <algorithm>
#include <cmath>

#include "json.hpp"

namespace biped::policy {

namespace {

std::vector<double> linspace(double lo, double hi, int n) {
  std::vector<double> v(n);
  for (int i = 0; i < n; ++i) v[i] = lo + (hi - lo) * i / (n - 1);
  return v;
}

// Bracketing index and weight for linear interpolation, clamped to the hull.
struct Bracket {
  int i0, i1;
  double w0, w1;
  bool clamped;
};

Bracket bracket(const std::vector<double>& grid, double x) {
  if (x <= grid.front()) return {0, 0, 1.0, 0.0, x < grid.front()};
  if (x >= grid.back()) {
    int n = static_cast<int>(grid.size());
    return {n - 1, n - 1, 1.0, 0.0, x > grid.back()};
  }
  int i = static_cast<int>(std::upper_bound(grid.begin(), grid.end(), x) -
                           grid.begin()) - 1;
  double t = (x - grid[i]) / (grid[i + 1] - grid[i]);
  return {i, i + 1, 1.0 - t, t, false};
}

std::uint64_t fnv1a(const void* data, size_t len, std::uint64_t h = 1469598103934665603ull) {
  const auto* b = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < len; ++i) {
    h ^= b[i];
    h *= 1099511628211ull;
  }
  return h;
}

std::uint64_t spec_hash(const MdpSpec& s) {
  std::uint64_t h = fnv1a(s.omega_grid.data(), s.omega_grid.size() * 8);
  h = fnv1a(s.theta_grid.data(), s.theta_grid.size() * 8, h);
  h = fnv1a(s.p_grid.data(), s.p_grid.size() * 8, h);
  double scal[] = {s.gamma, s.c1, s.c2, s.c3, s.a1, s.a2, s.a3, s.v_des,
                   s.r_fall, s.params.m, s.params.l, s.params.g};
  return fnv1a(scal, sizeof(scal), h);
}

}  // namespace

void MdpSpec::validate() const {
  auto increasing = [](const std::vector<double>& g) {
    for (size_t i = 1; i < g.size(); ++i)
      if (g[i] <= g[i - 1]) return false;
    return g.size() >= 2;
  };
  if (!increasing(omega_grid) || !increasing(theta_grid) || !increasing(p_grid))
    throw std::invalid_argument("MdpSpec: grids must be strictly increasing");
  if (!(gamma > 0.0 && gamma < 1.0))
    throw std::invalid_argument("MdpSpec: gamma outside (0,1)");
  if (c1 < 0 || c2 < 0 || c3 < 0 || a1 <= 0 || a2 <= 0 || a3 <= 0)
    throw std::invalid_argument("MdpSpec: bad reward constants");
}

MdpSpec default_mdp_spec(const IpParams& params, double v_des) {
  MdpSpec s;
  s.params = params;
  s.v_des = v_des;
  s.omega_grid = linspace(0.1, 3.0, 60);
  s.theta_grid = linspace(0.05, 0.6, 23);
  const double ml = params.m * params.l;
  s.p_grid = linspace(-1.0 * ml, 0.2 * ml, 25);
  return s;
}

double reward(const MdpSpec& spec, const IpStepState&, const IpAction& a,
              const ip::StepOutcome& outcome) {
  const double v = outcome.mean_speed;
  const double swing_rate = outcome.duration > 0.0 && std::isfinite(outcome.duration)
                                ? outcome.step_length / outcome.duration
                                : 0.0;
  // Arguments of the exponentials are dimensionless: the speed error is
  // relative to the command and the push-off impulse is in m l units.
  const double v_err = std::abs(v - spec.v_des) / spec.v_des;
  const double p_ml = a.p / (spec.params.m * spec.params.l);
  return spec.c1 * std::exp(-std::pow(v_err, spec.a1)) +
         spec.c2 * std::exp(-std::pow(std::abs(swing_rate), spec.a2)) +
         spec.c3 * std::exp(-std::pow(std::abs(p_ml * v), spec.a3));
}

TabularMdp build_mdp(const MdpSpec& spec) {
  spec.validate();
  TabularMdp mdp;
  mdp.n_states = spec.num_states();
  mdp.n_actions = spec.num_actions();
  mdp.gamma = spec.gamma;
  mdp.r_fall = spec.r_fall;
  mdp.table.resize(static_cast<size_t>(mdp.n_states) * mdp.n_actions);
  for (int s = 0; s < mdp.n_states; ++s) {
    IpStepState state{spec.omega_grid[s]};
    for (int a = 0; a < mdp.n_actions; ++a) {
      TabularMdp::Transition& tr = mdp.table[s * mdp.n_actions + a];
      auto outcome = ip::step_outcome(spec.params, state, spec.action(a));
      if (!outcome) {
        tr.fall = true;
        continue;
      }
      Bracket b = bracket(spec.omega_grid, outcome->omega_next);
      tr.i0 = b.i0;
      tr.i1 = b.i1;
      tr.w0 = b.w0;
      tr.w1 = b.w1;
      tr.r = reward(spec, state, spec.action(a), *outcome);
    }
  }
  return mdp;
}

ValueIterationResult value_iterate_tabular(const TabularMdp& mdp, double tol,
                                           int max_sweeps) {
  ValueIterationResult res;
  const double v_fall = mdp.r_fall / (1.0 - mdp.gamma);
  res.value.assign(mdp.n_states, 0.0);
  res.best_action.assign(mdp.n_states, 0);
  res.viable.assign(mdp.n_states, false);
  std::vector<double> next(mdp.n_states);
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double delta = 0.0;
    for (int s = 0; s < mdp.n_states; ++s) {
      double best = -std::numeric_limits<double>::infinity();
      int arg = 0;
      bool viable = false;
      for (int a = 0; a < mdp.n_actions; ++a) {
        const auto& tr = mdp.at(s, a);
        double q = tr.fall
                       ? v_fall
                       : tr.r + mdp.gamma * (tr.w0 * res.value[tr.i0] +
                                             tr.w1 * res.value[tr.i1]);
        if (q > best) {
          best = q;
          arg = a;
        }
        viable = viable || !tr.fall;
      }
      next[s] = best;
      res.best_action[s] = arg;
      res.viable[s] = viable;
      delta = std::max(delta, std::abs(next[s] - res.value[s]));
    }
    res.value = next;
    res.sweep_residuals.push_back(delta);
    res.residual = delta;
    if (delta < tol) break;
  }
  return res;
}

Policy value_iterate(const MdpSpec& spec, double tol) {
  TabularMdp mdp = build_mdp(spec);
  ValueIterationResult r = value_iterate_tabular(mdp, tol);
  Policy p;
  p.spec = spec;
  p.best_action = std::move(r.best_action);
  p.value = std::move(r.value);
  p.viable = std::move(r.viable);
  p.residual = r.residual;
  return p;
}

QueryResult query(const Policy& policy, double omega_k) {
  Bracket b = bracket(policy.spec.omega_grid, omega_k);
  IpAction a0 = policy.spec.action(policy.best_action[b.i0]);
  IpAction a1 = policy.spec.action(policy.best_action[b.i1]);
  QueryResult q;
  q.action.theta_sw = b.w0 * a0.theta_sw + b.w1 * a1.theta_sw;
  q.action.p = b.w0 * a0.p + b.w1 * a1.p;
  q.out_of_hull = b.clamped;
  return q;
}

std::vector<double> rollout_policy(const Policy& policy, double omega0, int steps) {
  std::vector<double> speeds;
  IpStepState s{omega0};
  for (int k = 0; k < steps; ++k) {
    auto act = query(policy, s.omega_k).action;
    auto outcome = ip::step_outcome(policy.spec.params, s, act);
    if (!outcome) break;
    speeds.push_back(outcome->mean_speed);
    s.omega_k = outcome->omega_next;
  }
  return speeds;
}

VelocityPolicy fit_velocity_policy(const PlantFn& plant,
                                   const std::vector<VelocityPolicy>& candidates,
                                   int episodes, std::uint64_t master_seed) {
  if (candidates.empty())
    throw std::invalid_argument("fit_velocity_policy: no candidates");
  double best_cost = std::numeric_limits<double>::infinity();
  double best_norm = std::numeric_limits<double>::infinity();
  const VelocityPolicy* best = nullptr;
  bool any_stable = false;
  for (size_t c = 0; c < candidates.size(); ++c) {
    double total = 0.0;
    bool all_fell = true;
    for (int e = 0; e < episodes; ++e) {
      RolloutEval ev = plant(candidates[c], master_seed * 1000003ull + c * 131ull + e);
      total += ev.cost;
      all_fell = all_fell && ev.fell;
    }
    if (!all_fell) any_stable = true;
    double norm = std::hypot(candidates[c].k_e, candidates[c].k_phase);
    if (total < best_cost - 1e-12 ||
        (std::abs(total - best_cost) <= 1e-12 && norm < best_norm)) {
      best_cost = total;
      best_norm = norm;
      best = &candidates[c];
    }
  }
  if (!any_stable)
    throw AllUnstable("fit_velocity_policy: every candidate fell in every episode");
  return *best;
}

std::string policy_to_json(const Policy& p) {
  nlohmann::json j;
  j["format"] = "ip-policy-v1";
  j["params"] = {{"m", p.spec.params.m}, {"l", p.spec.params.l}, {"g", p.spec.params.g}};
  j["omega_grid"] = p.spec.omega_grid;
  j["theta_grid"] = p.spec.theta_grid;
  j["p_grid"] = p.spec.p_grid;
  j["gamma"] = p.spec.gamma;
  j["reward"] = {{"c", {p.spec.c1, p.spec.c2, p.spec.c3}},
                 {"a", {p.spec.a1, p.spec.a2, p.spec.a3}},
                 {"r_fall", p.spec.r_fall}};
  j["v_des"] = p.spec.v_des;
  j["best_action"] = p.best_action;
  j["value"] = p.value;
  j["viable"] = p.viable;
  j["meta"] = {{"spec_hash", spec_hash(p.spec)}, {"residual", p.residual}};
  return j.dump();
}

Policy policy_from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  if (j.value("format", "") != "ip-policy-v1")
    throw std::invalid_argument("policy_from_json: unknown format");
  Policy p;
  p.spec.params = {j["params"]["m"], j["params"]["l"], j["params"]["g"]};
  p.spec.omega_grid = j["omega_grid"].get<std::vector<double>>();
  p.spec.theta_grid = j["theta_grid"].get<std::vector<double>>();
  p.spec.p_grid = j["p_grid"].get<std::vector<double>>();
  p.spec.gamma = j["gamma"];
  p.spec.c1 = j["reward"]["c"][0];
  p.spec.c2 = j["reward"]["c"][1];
  p.spec.c3 = j["reward"]["c"][2];
  p.spec.a1 = j["reward"]["a"][0];
  p.spec.a2 = j["reward"]["a"][1];
  p.spec.a3 = j["reward"]["a"][2];
  p.spec.r_fall = j["reward"]["r_fall"];
  p.spec.v_des = j["v_des"];
  p.best_action = j["best_action"].get<std::vector<int>>();
  p.value = j["value"].get<std::vector<double>>();
  p.viable = j["viable"].get<std::vector<bool>>();
  p.residual = j["meta"]["residual"];
  if (j["meta"]["spec_hash"] != spec_hash(p.spec))
    throw std::invalid_argument("policy_from_json: spec hash mismatch");
  return p;
}

std::string velocity_policy_to_json(const VelocityPolicy& vp) {
  nlohmann::json j;
  j["format"] = "velocity-policy-v1";
  j["k_e"] = vp.k_e;
  j["k_phase"] = vp.k_phase;
  j["tau_max"] = vp.tau_max;
  return j.dump();
}

VelocityPolicy velocity_policy_from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  if (j.value("format", "") != "velocity-policy-v1")
    throw std::invalid_argument("velocity_policy_from_json: unknown format");
  return {j["k_e"], j["k_phase"], j["tau_max"]};
}

}  // namespace biped::policy
