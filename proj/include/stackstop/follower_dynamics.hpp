#pragma once

// Infinite-horizon values under stationary Markov leader policies, the range
// of feasible follower continuation values, and the equilibrium residual.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "game_model.hpp"
#include "numerics.hpp"

namespace stackstop {

inline constexpr double kDefaultSolverTol = 1e-12;

struct StopValues {
  Vector w_s, v_s;
  std::vector<std::uint8_t> q_s;  // follower stops right after the leader
};

/// W_S = max(h2, g2) and V_S = h1 on the stop side of the tie, f1 otherwise.
inline StopValues stop_values(const GameSpec& spec, double tie_tol = kTieTol) {
  require_infinite(spec, "stop_values");
  const int n = spec.n_states();
  StopValues sv{Vector(n), Vector(n), std::vector<std::uint8_t>(n)};
  for (int x = 0; x < n; ++x) {
    const double h2 = spec.h2()[x], g2 = spec.g2()[x];
    sv.q_s[x] = h2 >= g2 - tie_tol;
    sv.w_s[x] = std::max(h2, g2);
    sv.v_s[x] = sv.q_s[x] ? spec.h1()[x] : spec.f1()[x];
  }
  return sv;
}

struct StationaryValues {
  Vector w_s, v_s;
  std::vector<std::uint8_t> q_s;
  Vector w_c, v_c;
  std::vector<std::uint8_t> q_c;  // follower stops in the continue branch
  Vector w, v;                    // p-mixtures of the stop and continue branches
  int iterations = 0;
  double residual = 0.0;    // sup-norm Bellman residual of w_c
  double v_residual = 0.0;  // residual of the leader's linear system
  std::vector<double> diffs;
};

/// delta * sum_y pi_xy [p_y W_S(y) + (1 - p_y) w_y].
inline double follower_continuation(const GameSpec& spec, const Vector& p, const Vector& w_s,
                                     const Vector& w, int x) {
  double e = 0.0;
  for (int y = 0; y < spec.n_states(); ++y) {
    const double pxy = spec.pi(x, y);
    if (pxy != 0.0) e += pxy * (p[y] * w_s[y] + (1.0 - p[y]) * w[y]);
  }
  return spec.delta() * e;
}

/// One application of the follower's Bellman operator for a Markov policy.
inline Vector follower_markov_operator(const GameSpec& spec, const Vector& p, const Vector& w_s,
                                       const Vector& w) {
  Vector out(w.size());
  for (int x = 0; x < spec.n_states(); ++x)
    out[x] = std::max(spec.f2()[x], follower_continuation(spec, p, w_s, w, x));
  return out;
}

namespace detail {

inline std::vector<std::uint8_t> follower_pattern(const GameSpec& spec, const Vector& p,
                                                  const Vector& w_s, const Vector& w,
                                                  double tie_tol) {
  std::vector<std::uint8_t> q(w.size());
  for (int x = 0; x < spec.n_states(); ++x)
    q[x] = spec.f2()[x] >= follower_continuation(spec, p, w_s, w, x) - tie_tol;
  return q;
}

// Solves for W_C with the stop/continue pattern held fixed.
inline Vector follower_linear_solve(const GameSpec& spec, const Vector& p, const Vector& w_s,
                                    const std::vector<std::uint8_t>& q) {
  const int n = spec.n_states();
  Matrix a(n, Vector(n, 0.0));
  Vector b(n, 0.0);
  for (int x = 0; x < n; ++x) {
    a[x][x] = 1.0;
    if (q[x]) {
      b[x] = spec.f2()[x];
      continue;
    }
    for (int y = 0; y < n; ++y) {
      a[x][y] -= spec.delta() * spec.pi(x, y) * (1.0 - p[y]);
      b[x] += spec.delta() * spec.pi(x, y) * p[y] * w_s[y];
    }
  }
  return solve_linear(a, b);
}

}  // namespace detail

/// W_C(., p): value iteration from zero to true error `tol`, then an exact
/// solve of the linear system selected by the converged stop pattern.
inline StationaryValues follower_value_markov(const GameSpec& spec, const MarkovPolicy& policy,
                                              double tol = kDefaultSolverTol,
                                              double tie_tol = kTieTol) {
  require_infinite(spec, "follower_value_markov");
  require_dimension(spec, policy);
  const int n = spec.n_states();
  const Vector& p = policy.probs();
  StopValues sv = stop_values(spec, tie_tol);

  StationaryValues out;
  out.w_s = sv.w_s;
  out.v_s = sv.v_s;
  out.q_s = sv.q_s;

  FixedPointTrace tr = iterate_contraction(
      [&](const Vector& w) { return follower_markov_operator(spec, p, sv.w_s, w); },
      Vector(n, 0.0), spec.delta(), tol);
  out.iterations = tr.iterations;
  out.diffs = std::move(tr.diffs);

  Vector w = tr.value;
  double res = sup_norm_diff(follower_markov_operator(spec, p, sv.w_s, w), w);
  auto q = detail::follower_pattern(spec, p, sv.w_s, w, tie_tol);
  Vector polished = detail::follower_linear_solve(spec, p, sv.w_s, q);
  double pres = sup_norm_diff(follower_markov_operator(spec, p, sv.w_s, polished), polished);
  if (pres <= res && sup_norm_diff(polished, w) <= std::max(10.0 * tol, 1e-9)) {
    w = std::move(polished);
    res = pres;
  }
  out.w_c = w;
  out.residual = res;
  out.q_c = detail::follower_pattern(spec, p, sv.w_s, w, tie_tol);
  out.w.resize(n);
  for (int x = 0; x < n; ++x) out.w[x] = p[x] * sv.w_s[x] + (1.0 - p[x]) * w[x];
  return out;
}

/// Fills the leader's part of `vals` given the follower's pattern q_c:
/// V_C = g1 where the follower stops, otherwise the discounted mixture.
inline void leader_value_markov(const GameSpec& spec, const MarkovPolicy& policy,
                                StationaryValues& vals) {
  const int n = spec.n_states();
  const Vector& p = policy.probs();
  Matrix a(n, Vector(n, 0.0));
  Vector b(n, 0.0);
  for (int x = 0; x < n; ++x) {
    a[x][x] = 1.0;
    if (vals.q_c[x]) {
      b[x] = spec.g1()[x];
      continue;
    }
    for (int y = 0; y < n; ++y) {
      a[x][y] -= spec.beta() * spec.pi(x, y) * (1.0 - p[y]);
      b[x] += spec.beta() * spec.pi(x, y) * p[y] * vals.v_s[y];
    }
  }
  vals.v_c = solve_linear(a, b);
  vals.v_residual = linear_residual(a, vals.v_c, b);
  vals.v.resize(n);
  for (int x = 0; x < n; ++x) vals.v[x] = p[x] * vals.v_s[x] + (1.0 - p[x]) * vals.v_c[x];
}

/// Both players' stationary values for a Markov leader policy.
inline StationaryValues leader_value_markov(const GameSpec& spec, const MarkovPolicy& policy,
                                            double tol = kDefaultSolverTol,
                                            double tie_tol = kTieTol) {
  StationaryValues vals = follower_value_markov(spec, policy, tol, tie_tol);
  leader_value_markov(spec, policy, vals);
  return vals;
}

inline StationaryValues markov_values(const GameSpec& spec, const MarkovPolicy& policy,
                                      double tol = kDefaultSolverTol, double tie_tol = kTieTol) {
  return leader_value_markov(spec, policy, tol, tie_tol);
}

// ---------------------------------------------------------------------------
// Feasible continuation values.

/// Infimum over p of the follower operator. The objective is affine in each
/// p_y with nonnegative weights, so the infimum picks min(W_S(y), w_y).
inline Vector lower_interval_operator(const GameSpec& spec, const Vector& w_s, const Vector& w) {
  Vector out(w.size());
  for (int x = 0; x < spec.n_states(); ++x) {
    double e = 0.0;
    for (int y = 0; y < spec.n_states(); ++y) e += spec.pi(x, y) * std::min(w_s[y], w[y]);
    out[x] = std::max(spec.f2()[x], spec.delta() * e);
  }
  return out;
}

inline Vector upper_interval_operator(const GameSpec& spec, const Vector& w_s, const Vector& w) {
  Vector out(w.size());
  for (int x = 0; x < spec.n_states(); ++x) {
    double e = 0.0;
    for (int y = 0; y < spec.n_states(); ++y) e += spec.pi(x, y) * std::max(w_s[y], w[y]);
    out[x] = std::max(spec.f2()[x], spec.delta() * e);
  }
  return out;
}

struct FeasibleInterval {
  Vector lower, upper;
  MarkovPolicy lower_policy, upper_policy;
  std::vector<double> lower_diffs, upper_diffs;
  int lower_iterations = 0, upper_iterations = 0;

  bool contains(int x, double w, double slack = 0.0) const {
    return w >= lower[x] - slack && w <= upper[x] + slack;
  }
};

class SolverError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Endpoints of the feasible follower continuation values at every state,
/// with pure Markov policies that attain them.
inline FeasibleInterval feasible_interval(const GameSpec& spec, double tol = kDefaultSolverTol) {
  require_infinite(spec, "feasible_interval");
  const int n = spec.n_states();
  const Vector w_s = stop_values(spec).w_s;

  FixedPointTrace lo = iterate_contraction(
      [&](const Vector& w) { return lower_interval_operator(spec, w_s, w); }, Vector(n, 0.0),
      spec.delta(), tol);
  FixedPointTrace hi = iterate_contraction(
      [&](const Vector& w) { return upper_interval_operator(spec, w_s, w); }, Vector(n, 0.0),
      spec.delta(), tol);

  Vector p_lo(n), p_hi(n);
  for (int z = 0; z < n; ++z) {
    p_lo[z] = w_s[z] >= lo.value[z] ? 0.0 : 1.0;
    p_hi[z] = w_s[z] >= hi.value[z] ? 1.0 : 0.0;
  }
  FeasibleInterval out{{}, {}, MarkovPolicy(p_lo), MarkovPolicy(p_hi),
                       std::move(lo.diffs), std::move(hi.diffs), lo.iterations, hi.iterations};
  out.lower = follower_value_markov(spec, out.lower_policy, tol).w_c;
  out.upper = follower_value_markov(spec, out.upper_policy, tol).w_c;

  const double bound = 10.0 * std::max(tol, 1e-15 * std::max(1.0, spec.max_abs_payoff()));
  const double e_lo = sup_norm_diff(out.lower, lo.value), e_hi = sup_norm_diff(out.upper, hi.value);
  if (e_lo > bound || e_hi > bound) {
    std::ostringstream os;
    os << "feasible interval attainment check failed (lower error " << e_lo << ", upper error "
       << e_hi << ", bound " << bound << ")";
    throw SolverError(os.str());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Equilibrium residual and nonexistence scan.

/// residual(x) = max(V_S, V_C) - [p_x V_S + (1 - p_x) V_C]; the gain from the
/// best one-step deviation at x.
inline Vector markov_equilibrium_residual(const GameSpec& spec, const StationaryValues& vals,
                                          const MarkovPolicy& policy) {
  Vector r(spec.n_states());
  for (int x = 0; x < spec.n_states(); ++x) {
    const double vs = vals.v_s[x], vc = vals.v_c[x], px = policy[x];
    r[x] = std::max(vs, vc) - (px * vs + (1.0 - px) * vc);
  }
  return r;
}

inline Vector markov_equilibrium_residual(const GameSpec& spec, const MarkovPolicy& policy,
                                          double tol = kDefaultSolverTol) {
  return markov_equilibrium_residual(spec, markov_values(spec, policy, tol), policy);
}

struct ScanOptions {
  int grid_per_state = 51;
  double tol = 1e-10;
  int threads = 1;
  std::size_t max_points = 20'000'000;
  bool keep_all = false;
};

struct ScanResult {
  double min_residual = std::numeric_limits<double>::infinity();
  Vector argmin;
  std::size_t argmin_index = 0;
  int grid_per_state = 0;
  std::size_t points = 0;
  double tol = 0.0;
  std::vector<double> residuals;  // per grid point, only with keep_all
};

/// Grid point `index` in lexicographic order, first state most significant.
inline Vector scan_point(std::size_t index, int n, int grid) {
  Vector p(n);
  for (int x = n - 1; x >= 0; --x) {
    p[x] = static_cast<double>(index % grid) / (grid - 1);
    index /= grid;
  }
  return p;
}

/// Minimum of the max-residual over a uniform grid on [0,1]^N, endpoints
/// included. Ties go to the lexicographically smallest grid point.
inline ScanResult nonexistence_scan(const GameSpec& spec, const ScanOptions& opt = {}) {
  require_infinite(spec, "nonexistence_scan");
  const int n = spec.n_states();
  if (n > 4) throw BudgetError("nonexistence scan supports at most 4 states");
  if (opt.grid_per_state < 2) throw SpecError("grid_per_state", "must be at least 2");
  double total_d = std::pow(static_cast<double>(opt.grid_per_state), n);
  if (total_d > static_cast<double>(opt.max_points))
    throw BudgetError("scan grid of " + std::to_string(static_cast<long long>(total_d)) +
                      " points exceeds the budget of " + std::to_string(opt.max_points));
  const std::size_t total = static_cast<std::size_t>(total_d);

  ScanResult res;
  res.grid_per_state = opt.grid_per_state;
  res.points = total;
  res.tol = opt.tol;
  if (opt.keep_all) res.residuals.assign(total, 0.0);

  const int workers = resolve_threads(opt.threads);
  std::vector<double> best(workers, std::numeric_limits<double>::infinity());
  std::vector<std::size_t> best_idx(workers, 0);
  parallel_for(total, workers, [&](std::size_t b, std::size_t e, int w) {
    for (std::size_t i = b; i < e; ++i) {
      MarkovPolicy p(scan_point(i, n, opt.grid_per_state));
      Vector r = markov_equilibrium_residual(spec, p, opt.tol);
      double m = *std::max_element(r.begin(), r.end());
      if (opt.keep_all) res.residuals[i] = m;
      if (m < best[w]) {
        best[w] = m;
        best_idx[w] = i;
      }
    }
  });
  for (int w = 0; w < workers; ++w) {
    if (best[w] < res.min_residual ||
        (best[w] == res.min_residual && best_idx[w] < res.argmin_index)) {
      res.min_residual = best[w];
      res.argmin_index = best_idx[w];
    }
  }
  res.argmin = scan_point(res.argmin_index, n, opt.grid_per_state);
  return res;
}

/// CSV with columns p_1..p_N,residual_max. Requires keep_all.
inline std::string scan_csv(const ScanResult& res, int n_states) {
  std::ostringstream os;
  for (int x = 0; x < n_states; ++x) os << "p_" << (x + 1) << ',';
  os << "residual_max\n";
  for (std::size_t i = 0; i < res.residuals.size(); ++i) {
    Vector p = scan_point(i, n_states, res.grid_per_state);
    for (double v : p) os << shortest(v) << ',';
    os << shortest(res.residuals[i]) << '\n';
  }
  return os.str();
}

}  // namespace stackstop
