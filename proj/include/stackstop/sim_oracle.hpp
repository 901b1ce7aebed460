#pragma once

// Monte Carlo simulation of the stopping game. The leader stops at the first
// t with Y_t <= p, the follower at the first t with Y'_t <= q while the
// leader continues, or Y'_t <= r once the leader has stopped. Chain moves and
// both devices are Philox draws keyed by (seed, path, time, device), so every
// path is reproducible on its own.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "entropy_equilibrium.hpp"
#include "finite_horizon.hpp"
#include "follower_dynamics.hpp"
#include "game_model.hpp"
#include "numerics.hpp"
#include "path_tree.hpp"
#include "philox.hpp"

namespace stackstop {

using LeaderPolicy = std::variant<MarkovPolicy, PathPolicy>;

enum SimDevice : std::uint32_t { kDeviceChain = 0, kDeviceLeader = 1, kDeviceFollower = 2 };

struct SimConfig {
  std::size_t n_paths = 100000;
  std::uint64_t seed = 1;
  int t_max = 0;  // truncation for infinite horizons; 0 picks it automatically
  int start_state = 0;
  std::optional<double> lambda;               // also simulate J2 with the entropy term
  std::optional<FollowerResponse> follower;   // empty replays the analytic best response
  bool leader_continues_first = false;        // condition on the leader not stopping at t = 0
  int threads = 1;
};

struct SimEstimate {
  double mean_j1 = 0.0, mean_j2 = 0.0;
  double std_err_j1 = 0.0, std_err_j2 = 0.0;
  std::optional<double> mean_j2_lambda, std_err_j2_lambda;
  std::size_t n_paths = 0;
  int t_max = 0;                 // 0 for finite games
  double bias_j1 = 0.0, bias_j2 = 0.0, bias_j2_lambda = 0.0;
  double truncation_bias_bound = 0.0;  // largest of the three
  double truncated_fraction = 0.0;     // share of paths cut at t_max
  double mean_stop_time = 0.0;
};

struct PathOutcome {
  int leader_stop = -1;    // time the leader stopped, -1 if it did not
  int follower_stop = -1;  // time the follower stopped, -1 if it did not
  int end_time = 0;        // min of the two, or t_max on truncation
  bool truncated = false;
  double j1 = 0.0, j2 = 0.0, j2_lambda = 0.0;
  Path states;
};

/// Sum in a fixed binary-tree order, independent of how values were produced.
inline double pairwise_sum(const double* v, std::size_t n) {
  if (n <= 8) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += v[i];
    return s;
  }
  const std::size_t h = n / 2;
  return pairwise_sum(v, h) + pairwise_sum(v + h, n - h);
}

/// Smallest T with d^T * m < eps for d = max(beta, delta).
inline int auto_truncation(double discount, double magnitude, double eps = 1e-6) {
  if (magnitude <= eps) return 1;
  return std::max(1, static_cast<int>(std::ceil(std::log(eps / magnitude) / std::log(discount))));
}

namespace detail {

// Per-node (finite) or per-state (infinite) stop probabilities of both players.
struct SimPlan {
  bool finite = false;
  TreePtr tree;
  Vector p, q, r;  // indexed by node when finite, by state otherwise
};

inline int next_state(const GameSpec& spec, int x, double u) {
  double cum = 0.0;
  int last = x;
  for (int y = 0; y < spec.n_states(); ++y) {
    const double pxy = spec.pi(x, y);
    if (pxy <= 0.0) continue;
    cum += pxy;
    last = y;
    if (u <= cum) return y;
  }
  return last;
}

inline int child_with_state(const PathTree& tree, int node, int y) {
  int out = -1;
  tree.for_children(node, [&](int c) {
    if (tree.node(c).state == y) out = c;
  });
  return out;
}

inline SimPlan make_plan(const GameSpec& spec, const LeaderPolicy& leader, const SimConfig& cfg) {
  const int n = spec.n_states();
  if (cfg.start_state < 0 || cfg.start_state >= n)
    throw SpecError("start_state", "state index out of range");
  if (cfg.lambda) require_lambda(*cfg.lambda);
  if (cfg.follower) require_dimension(spec, *cfg.follower);
  SimPlan plan;
  plan.finite = spec.finite();
  if (plan.finite) {
    if (cfg.lambda) throw SpecError("lambda", "entropy terms are simulated for infinite horizons only");
    PathPolicy P;
    if (const auto* m = std::get_if<MarkovPolicy>(&leader)) {
      require_dimension(spec, *m);
      P = PathPolicy::from_stationary(PathTree::for_spec(spec, 0, cfg.start_state), *m);
    } else {
      P = std::get<PathPolicy>(leader);
      if (!P.tree_ptr()) throw SpecError("policy", "empty path policy");
      if (P.tree().root_state() != cfg.start_state)
        throw SpecError("start_state", "path policy is rooted at another state");
      if (!P.tree().forced_terminal() || P.tree().horizon() != *spec.horizon())
        throw SpecError("policy", "path policy must span the game's horizon");
    }
    plan.tree = P.tree_ptr();
    plan.p = P.probs();
    const std::size_t size = static_cast<std::size_t>(plan.tree->size());
    plan.q.assign(size, 0.0);
    plan.r.assign(size, 0.0);
    if (cfg.follower) {
      for (std::size_t i = 0; i < size; ++i) {
        const int x = plan.tree->node(static_cast<int>(i)).state;
        plan.q[i] = cfg.follower->continue_branch[x];
        plan.r[i] = cfg.follower->stop_branch[x];
      }
    } else {
      RandomizedTables tab = evaluate_randomized(spec, P);
      for (std::size_t i = 0; i < size; ++i) {
        plan.q[i] = tab.Q_C[i];
        plan.r[i] = tab.Q_S[i];
      }
    }
    for (int i = 0; i < plan.tree->size(); ++i)
      if (plan.tree->terminal(i)) plan.p[i] = plan.r[i] = 1.0;
    return plan;
  }
  const auto* m = std::get_if<MarkovPolicy>(&leader);
  if (!m) throw SpecError("policy", "infinite horizons need a stationary Markov leader policy");
  require_dimension(spec, *m);
  plan.p = m->probs();
  if (cfg.follower) {
    plan.q = cfg.follower->continue_branch.probs();
    plan.r = cfg.follower->stop_branch.probs();
  } else if (cfg.lambda) {
    RegularizedValues v = continue_value_regularized(spec, *m, *cfg.lambda);
    plan.q = v.q_star;
    plan.r = v.r_star;
  } else {
    StationaryValues v = follower_value_markov(spec, *m);
    plan.q.assign(v.q_c.begin(), v.q_c.end());
    plan.r.assign(v.q_s.begin(), v.q_s.end());
  }
  return plan;
}

inline int resolve_t_max(const GameSpec& spec, const SimConfig& cfg) {
  if (spec.finite()) return *spec.horizon();
  if (cfg.t_max > 0) return cfg.t_max;
  double m = spec.max_abs_payoff();
  if (cfg.lambda) m += *cfg.lambda * std::log(2.0) / (1.0 - spec.delta());
  return auto_truncation(std::max(spec.beta(), spec.delta()), m);
}

inline PathOutcome simulate_one(const GameSpec& spec, const SimPlan& plan, const SimConfig& cfg,
                                int t_max, std::uint64_t index, bool keep_states) {
  PathOutcome out;
  const double lambda = cfg.lambda.value_or(0.0);
  int x = cfg.start_state, node = 0;
  double disc1 = 1.0, disc2 = 1.0, entropy_sum = 0.0;
  for (int t = 0;; ++t) {
    if (keep_states) out.states.push_back(x);
    if (t >= t_max && !plan.finite) {
      out.truncated = true;
      out.end_time = t;
      break;
    }
    const std::size_t at = plan.finite ? static_cast<std::size_t>(node) : static_cast<std::size_t>(x);
    const double y = philox_draw(cfg.seed, index, static_cast<std::uint32_t>(t), kDeviceLeader);
    const double yf = philox_draw(cfg.seed, index, static_cast<std::uint32_t>(t), kDeviceFollower);
    const bool leader_stops = y <= plan.p[at] && !(t == 0 && cfg.leader_continues_first);
    const double follower_p = leader_stops ? plan.r[at] : plan.q[at];
    const bool follower_stops = yf <= follower_p;
    if (lambda > 0.0) entropy_sum += disc2 * entropy(follower_p);
    if (leader_stops || follower_stops) {
      const int abs_t = plan.finite ? plan.tree->node(node).time : 0;
      double a, b;
      if (leader_stops && follower_stops) {
        a = spec.h1(abs_t, x);
        b = spec.h2(abs_t, x);
      } else if (leader_stops) {
        a = spec.f1(abs_t, x);
        b = spec.g2(abs_t, x);
      } else {
        a = spec.g1(abs_t, x);
        b = spec.f2(abs_t, x);
      }
      out.j1 = disc1 * a;
      out.j2 = disc2 * b;
      out.leader_stop = leader_stops ? t : -1;
      out.follower_stop = follower_stops ? t : -1;
      out.end_time = t;
      break;
    }
    const double u = philox_draw(cfg.seed, index, static_cast<std::uint32_t>(t), kDeviceChain);
    const int y_next = next_state(spec, x, u);
    if (plan.finite) {
      node = child_with_state(*plan.tree, node, y_next);
      if (node < 0) throw SolverError("simulated path left the policy tree");
    }
    x = y_next;
    disc1 *= spec.beta();
    disc2 *= spec.delta();
  }
  out.j2_lambda = out.j2 + lambda * entropy_sum;
  return out;
}

// Mean and standard error, with the sums taken over deviations from v[0].
inline void mean_and_error(const std::vector<double>& v, double& mean, double& se) {
  const std::size_t n = v.size();
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) d[i] = v[i] - v[0];
  const double shift = pairwise_sum(d.data(), n) / static_cast<double>(n);
  mean = v[0] + shift;
  if (n < 2) {
    se = 0.0;
    return;
  }
  for (std::size_t i = 0; i < n; ++i) d[i] = (d[i] - shift) * (d[i] - shift);
  se = std::sqrt(pairwise_sum(d.data(), n) / static_cast<double>(n - 1) / static_cast<double>(n));
}

}  // namespace detail

/// One simulated path, with its visited states.
inline PathOutcome simulate_path(const GameSpec& spec, const LeaderPolicy& leader,
                                 const SimConfig& cfg, std::uint64_t index) {
  detail::SimPlan plan = detail::make_plan(spec, leader, cfg);
  return detail::simulate_one(spec, plan, cfg, detail::resolve_t_max(spec, cfg), index, true);
}

/// Empirical J1, J2 (and J2 with the entropy term) over cfg.n_paths paths.
inline SimEstimate simulate(const GameSpec& spec, const LeaderPolicy& leader, const SimConfig& cfg) {
  if (cfg.n_paths == 0) throw SpecError("n_paths", "must be positive");
  detail::SimPlan plan = detail::make_plan(spec, leader, cfg);
  const int t_max = detail::resolve_t_max(spec, cfg);
  const std::size_t n = cfg.n_paths;
  std::vector<double> j1(n), j2(n), j2l(n), stop(n), cut(n);
  parallel_for(n, cfg.threads, [&](std::size_t b, std::size_t e, int) {
    for (std::size_t i = b; i < e; ++i) {
      PathOutcome o = detail::simulate_one(spec, plan, cfg, t_max, i, false);
      j1[i] = o.j1;
      j2[i] = o.j2;
      j2l[i] = o.j2_lambda;
      stop[i] = o.end_time;
      cut[i] = o.truncated ? 1.0 : 0.0;
    }
  });
  SimEstimate est;
  est.n_paths = n;
  detail::mean_and_error(j1, est.mean_j1, est.std_err_j1);
  detail::mean_and_error(j2, est.mean_j2, est.std_err_j2);
  if (cfg.lambda) {
    double m, s;
    detail::mean_and_error(j2l, m, s);
    est.mean_j2_lambda = m;
    est.std_err_j2_lambda = s;
  }
  est.mean_stop_time = pairwise_sum(stop.data(), n) / static_cast<double>(n);
  est.truncated_fraction = pairwise_sum(cut.data(), n) / static_cast<double>(n);
  if (!spec.finite()) {
    est.t_max = t_max;
    const double m = spec.max_abs_payoff();
    est.bias_j1 = std::pow(spec.beta(), t_max) * m;
    est.bias_j2 = std::pow(spec.delta(), t_max) * m;
    est.bias_j2_lambda =
        cfg.lambda ? std::pow(spec.delta(), t_max) *
                         (m + *cfg.lambda * std::log(2.0) / (1.0 - spec.delta()))
                   : 0.0;
    est.truncation_bias_bound = std::max({est.bias_j1, est.bias_j2, est.bias_j2_lambda});
  }
  return est;
}

struct ResponseValues {
  Vector j1, j2;      // expected payoffs from each state; j2 includes lambda * entropy
  Vector j1_c, j2_c;  // the same given that the leader continues at the first step
};

/// Exact values of a stationary (p, q, r) profile with an optional entropy
/// weight, by two linear solves.
inline ResponseValues response_values(const GameSpec& spec, const MarkovPolicy& p,
                                      const FollowerResponse& f, double lambda = 0.0) {
  require_infinite(spec, "response_values");
  require_dimension(spec, p);
  require_dimension(spec, f);
  const int n = spec.n_states();
  Vector ws(n), vs(n);
  for (int x = 0; x < n; ++x) {
    const double r = f.stop_branch[x];
    ws[x] = r * spec.h2()[x] + (1.0 - r) * spec.g2()[x] + lambda * entropy(r);
    vs[x] = r * spec.h1()[x] + (1.0 - r) * spec.f1()[x];
  }
  auto solve = [&](double disc, const Vector& cont_pay, const Vector& s, double weight) {
    Matrix a(n, Vector(n, 0.0));
    Vector b(n, 0.0);
    for (int x = 0; x < n; ++x) {
      const double q = f.continue_branch[x], carry = (1.0 - q) * disc;
      a[x][x] = 1.0;
      b[x] = q * cont_pay[x] + weight * entropy(q);
      for (int y = 0; y < n; ++y) {
        a[x][y] -= carry * spec.pi(x, y) * (1.0 - p[y]);
        b[x] += carry * spec.pi(x, y) * p[y] * s[y];
      }
    }
    return solve_linear(a, b);
  };
  ResponseValues rv;
  rv.j1_c = solve(spec.beta(), spec.g1(), vs, 0.0);
  rv.j2_c = solve(spec.delta(), spec.f2(), ws, lambda);
  rv.j1.resize(n);
  rv.j2.resize(n);
  for (int x = 0; x < n; ++x) {
    rv.j1[x] = p[x] * vs[x] + (1.0 - p[x]) * rv.j1_c[x];
    rv.j2[x] = p[x] * ws[x] + (1.0 - p[x]) * rv.j2_c[x];
  }
  return rv;
}

struct CrosscheckReport {
  double analytic_j1 = 0.0, analytic_j2 = 0.0;
  std::optional<double> analytic_j2_lambda;
  SimEstimate estimate;
  double z_j1 = 0.0, z_j2 = 0.0;
  std::optional<double> z_j2_lambda;
  double z_limit = 4.0;
  bool flagged = false;  // some |error| exceeds bias + z_limit standard errors
};

namespace detail {

inline double z_score(double est, double analytic, double se) {
  const double d = est - analytic;
  if (se > 0.0) return d / se;
  return std::abs(d) <= 1e-12 * std::max(1.0, std::abs(analytic))
             ? 0.0
             : std::copysign(std::numeric_limits<double>::infinity(), d);
}

inline bool outside(double est, double analytic, double se, double bias, double z) {
  return std::abs(est - analytic) >
         bias + z * se + 1e-12 * std::max(1.0, std::abs(analytic));
}

}  // namespace detail

/// Simulates the profile and compares with the analytic values of the same
/// profile from the solver modules.
inline CrosscheckReport crosscheck(const GameSpec& spec, const LeaderPolicy& leader,
                                   const SimConfig& cfg, double z_limit = 4.0) {
  CrosscheckReport rep;
  rep.z_limit = z_limit;
  const int x0 = cfg.start_state;
  const bool cond = cfg.leader_continues_first;
  if (spec.finite()) {
    if (cfg.follower) throw SpecError("follower", "finite crosschecks replay the best response");
    PathPolicy P = std::holds_alternative<PathPolicy>(leader)
                       ? std::get<PathPolicy>(leader)
                       : PathPolicy::from_stationary(PathTree::for_spec(spec, 0, x0),
                                                     std::get<MarkovPolicy>(leader));
    RandomizedTables tab = evaluate_randomized(spec, P);
    rep.analytic_j1 = cond ? tab.V_C[0] : tab.V[0];
    rep.analytic_j2 = cond ? tab.W_C[0] : tab.W[0];
    rep.estimate = simulate(spec, P, cfg);
  } else {
    const auto* m = std::get_if<MarkovPolicy>(&leader);
    if (!m) throw SpecError("policy", "infinite horizons need a stationary Markov leader policy");
    FollowerResponse f;
    if (cfg.follower) {
      f = *cfg.follower;
    } else if (cfg.lambda) {
      RegularizedValues v = regularized_values(spec, *m, *cfg.lambda);
      f = {MarkovPolicy(v.r_star), MarkovPolicy(v.q_star)};
      rep.analytic_j2_lambda = cond ? v.w_lambda_c[x0] : v.w_lambda[x0];
    } else {
      StationaryValues v = leader_value_markov(spec, *m);
      rep.analytic_j1 = cond ? v.v_c[x0] : v.v[x0];
      rep.analytic_j2 = cond ? v.w_c[x0] : v.w[x0];
      f = {MarkovPolicy(Vector(v.q_s.begin(), v.q_s.end())),
           MarkovPolicy(Vector(v.q_c.begin(), v.q_c.end()))};
    }
    if (cfg.follower || cfg.lambda) {
      ResponseValues plain = response_values(spec, *m, f);
      rep.analytic_j1 = cond ? plain.j1_c[x0] : plain.j1[x0];
      rep.analytic_j2 = cond ? plain.j2_c[x0] : plain.j2[x0];
      if (cfg.lambda && cfg.follower) {
        ResponseValues reg = response_values(spec, *m, f, *cfg.lambda);
        rep.analytic_j2_lambda = cond ? reg.j2_c[x0] : reg.j2[x0];
      }
    }
    rep.estimate = simulate(spec, *m, cfg);
  }
  const SimEstimate& e = rep.estimate;
  rep.z_j1 = detail::z_score(e.mean_j1, rep.analytic_j1, e.std_err_j1);
  rep.z_j2 = detail::z_score(e.mean_j2, rep.analytic_j2, e.std_err_j2);
  rep.flagged = detail::outside(e.mean_j1, rep.analytic_j1, e.std_err_j1, e.bias_j1, z_limit) ||
                detail::outside(e.mean_j2, rep.analytic_j2, e.std_err_j2, e.bias_j2, z_limit);
  if (rep.analytic_j2_lambda && e.mean_j2_lambda) {
    rep.z_j2_lambda = detail::z_score(*e.mean_j2_lambda, *rep.analytic_j2_lambda,
                                      *e.std_err_j2_lambda);
    rep.flagged = rep.flagged || detail::outside(*e.mean_j2_lambda, *rep.analytic_j2_lambda,
                                                 *e.std_err_j2_lambda, e.bias_j2_lambda, z_limit);
  }
  return rep;
}

}  // namespace stackstop
