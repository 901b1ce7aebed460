#pragma once

// The entropy-regularized game: the follower adds lambda * H(stop probability)
// to its running objective, which turns its best responses into sigmoids and
// makes the leader's values continuous in the leader's policy.

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "follower_dynamics.hpp"
#include "game_model.hpp"
#include "numerics.hpp"

namespace stackstop {

/// Shannon entropy of a Bernoulli(q) variable, with 0 log 0 = 0.
inline double entropy(double q) {
  if (!(q >= 0.0 && q <= 1.0)) throw SpecError("q", "entropy needs a probability in [0, 1]");
  double h = 0.0;
  if (q > 0.0) h -= q * std::log(q);
  if (q < 1.0) h -= (1.0 - q) * std::log1p(-q);
  return h;
}

/// log(1 + e^z) without overflow.
inline double softplus(double z) {
  return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
}

/// 1 / (1 + e^-z) without overflow.
inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline void require_lambda(double lambda) {
  if (!(lambda > 0.0) || !std::isfinite(lambda)) throw SpecError("lambda", "must be positive");
}

struct StopResponse {
  Vector r_star;      // follower's stop probability once the leader has stopped
  Vector w_lambda_s;  // regularized follower value on that branch
};

/// r* = 1 / (1 + exp((g2 - h2) / lambda)), W_S = h2 + lambda softplus((g2 - h2) / lambda),
/// the latter written as max(h2, g2) + lambda softplus(-|g2 - h2| / lambda).
inline StopResponse stop_response_regularized(const GameSpec& spec, double lambda) {
  require_infinite(spec, "stop_response_regularized");
  require_lambda(lambda);
  const int n = spec.n_states();
  StopResponse out{Vector(n), Vector(n)};
  for (int x = 0; x < n; ++x) {
    const double z = (spec.g2()[x] - spec.h2()[x]) / lambda;
    out.r_star[x] = sigmoid(-z);
    out.w_lambda_s[x] = std::max(spec.h2()[x], spec.g2()[x]) + lambda * softplus(-std::abs(z));
  }
  return out;
}

struct RegularizedValues {
  double lambda = 0.0;
  Vector r_star, w_lambda_s;
  Vector w_lambda_c, q_star;
  Vector v_lambda_s, v_lambda_c;
  Vector w_lambda, v_lambda;  // p-mixtures of the two branches
  double residual = 0.0;      // sup-norm of Phi(W_C) - W_C
  double v_residual = 0.0;    // residual of the leader's linear system
  int iterations = 0;
  std::vector<double> diffs;
};

/// Phi[w]_x = f2 + lambda softplus((delta sum_y pi_xy [p_y W_S(y) + (1 - p_y) w_y] - f2) / lambda).
inline Vector regularized_follower_operator(const GameSpec& spec, const Vector& p,
                                            const Vector& w_s, double lambda, const Vector& w) {
  Vector out(w.size());
  for (int x = 0; x < spec.n_states(); ++x) {
    const double f2 = spec.f2()[x];
    out[x] = f2 + lambda * softplus((follower_continuation(spec, p, w_s, w, x) - f2) / lambda);
  }
  return out;
}

namespace detail {

// Newton steps on w - Phi(w) = 0. The Jacobian of Phi is diag(1 - q*) times
// delta pi (1 - p), so I - J is strictly diagonally dominant.
inline void newton_polish(const GameSpec& spec, const Vector& p, const Vector& w_s, double lambda,
                          Vector& w, double& res) {
  const int n = spec.n_states();
  for (int step = 0; step < 8 && res > 0.0; ++step) {
    Vector phi = regularized_follower_operator(spec, p, w_s, lambda, w);
    Matrix a(n, Vector(n, 0.0));
    Vector b(n);
    for (int x = 0; x < n; ++x) {
      const double f2 = spec.f2()[x];
      const double cont = follower_continuation(spec, p, w_s, w, x);
      const double slope = sigmoid((cont - f2) / lambda);
      a[x][x] = 1.0;
      for (int y = 0; y < n; ++y)
        a[x][y] -= slope * spec.delta() * spec.pi(x, y) * (1.0 - p[y]);
      b[x] = phi[x] - w[x];
    }
    Vector dw = solve_linear(a, b);
    Vector next(w);
    for (int x = 0; x < n; ++x) next[x] += dw[x];
    const double nres =
        sup_norm_diff(regularized_follower_operator(spec, p, w_s, lambda, next), next);
    if (!(nres < res)) break;
    w = std::move(next);
    res = nres;
  }
}

}  // namespace detail

/// W_C^lambda(., p) by iterating Phi from zero, then Newton polishing; q* is
/// read off the converged value.
inline RegularizedValues continue_value_regularized(const GameSpec& spec, const MarkovPolicy& policy,
                                                    double lambda,
                                                    double tol = kDefaultSolverTol) {
  require_infinite(spec, "continue_value_regularized");
  require_dimension(spec, policy);
  const int n = spec.n_states();
  const Vector& p = policy.probs();
  StopResponse sr = stop_response_regularized(spec, lambda);

  RegularizedValues out;
  out.lambda = lambda;
  out.r_star = sr.r_star;
  out.w_lambda_s = sr.w_lambda_s;

  FixedPointTrace tr = iterate_contraction(
      [&](const Vector& w) { return regularized_follower_operator(spec, p, sr.w_lambda_s, lambda, w); },
      Vector(n, 0.0), spec.delta(), tol);
  out.iterations = tr.iterations;
  out.diffs = std::move(tr.diffs);
  Vector w = std::move(tr.value);
  double res = sup_norm_diff(regularized_follower_operator(spec, p, sr.w_lambda_s, lambda, w), w);
  detail::newton_polish(spec, p, sr.w_lambda_s, lambda, w, res);

  out.w_lambda_c = w;
  out.residual = res;
  out.q_star.resize(n);
  out.w_lambda.resize(n);
  for (int x = 0; x < n; ++x) {
    const double f2 = spec.f2()[x];
    out.q_star[x] = sigmoid((f2 - follower_continuation(spec, p, sr.w_lambda_s, w, x)) / lambda);
    out.w_lambda[x] = p[x] * sr.w_lambda_s[x] + (1.0 - p[x]) * w[x];
  }
  return out;
}

/// Fills V_S = r* h1 + (1 - r*) f1 and solves
/// V_C = q* g1 + (1 - q*) beta sum_y pi_xy [p_y V_S(y) + (1 - p_y) V_C(y)].
inline void leader_value_regularized(const GameSpec& spec, const MarkovPolicy& policy,
                                     RegularizedValues& vals) {
  const int n = spec.n_states();
  const Vector& p = policy.probs();
  vals.v_lambda_s.resize(n);
  for (int x = 0; x < n; ++x)
    vals.v_lambda_s[x] = vals.r_star[x] * spec.h1()[x] + (1.0 - vals.r_star[x]) * spec.f1()[x];
  Matrix a(n, Vector(n, 0.0));
  Vector b(n, 0.0);
  for (int x = 0; x < n; ++x) {
    const double q = vals.q_star[x], carry = (1.0 - q) * spec.beta();
    a[x][x] = 1.0;
    b[x] = q * spec.g1()[x];
    for (int y = 0; y < n; ++y) {
      a[x][y] -= carry * spec.pi(x, y) * (1.0 - p[y]);
      b[x] += carry * spec.pi(x, y) * p[y] * vals.v_lambda_s[y];
    }
  }
  vals.v_lambda_c = solve_linear(a, b);
  vals.v_residual = linear_residual(a, vals.v_lambda_c, b);
  vals.v_lambda.resize(n);
  for (int x = 0; x < n; ++x)
    vals.v_lambda[x] = p[x] * vals.v_lambda_s[x] + (1.0 - p[x]) * vals.v_lambda_c[x];
}

/// All regularized values for a Markov leader policy.
inline RegularizedValues regularized_values(const GameSpec& spec, const MarkovPolicy& policy,
                                            double lambda, double tol = kDefaultSolverTol) {
  RegularizedValues vals = continue_value_regularized(spec, policy, lambda, tol);
  leader_value_regularized(spec, policy, vals);
  return vals;
}

enum class BestResponse { stop, cont, any };

inline const char* best_response_name(BestResponse b) {
  switch (b) {
    case BestResponse::stop: return "stop";
    case BestResponse::cont: return "continue";
    case BestResponse::any: return "any";
  }
  return "?";
}

/// Psi(p) per state: {1} when V_S beats V_C by more than `band`, {0} when it
/// loses by more, otherwise the whole of [0, 1].
inline std::vector<BestResponse> best_response_map(const RegularizedValues& vals, double band) {
  std::vector<BestResponse> out(vals.v_lambda_s.size());
  for (std::size_t x = 0; x < out.size(); ++x) {
    const double d = vals.v_lambda_s[x] - vals.v_lambda_c[x];
    out[x] = d > band ? BestResponse::stop : d < -band ? BestResponse::cont : BestResponse::any;
  }
  return out;
}

inline std::vector<BestResponse> best_response_map(const GameSpec& spec, const MarkovPolicy& p,
                                                   double lambda, double band = 1e-9) {
  return best_response_map(regularized_values(spec, p, lambda), band);
}

/// max(V_S, V_C) - G(x, p_x, p) per state, with G(x, p_x, p) = p_x V_S + (1 - p_x) V_C.
inline Vector regularized_residual(const RegularizedValues& vals, const Vector& p) {
  Vector r(p.size());
  for (std::size_t x = 0; x < p.size(); ++x) {
    const double vs = vals.v_lambda_s[x], vc = vals.v_lambda_c[x];
    r[x] = std::max(0.0, std::max(vs, vc) - (p[x] * vs + (1.0 - p[x]) * vc));
  }
  return r;
}

inline double regularized_residual(const GameSpec& spec, const Vector& p, double lambda,
                                   double tol = kDefaultSolverTol) {
  return sup_norm(regularized_residual(regularized_values(spec, MarkovPolicy(p), lambda, tol), p));
}

/// Sharp follower suboptimality bound lambda log 2 / (1 - delta).
inline double epsilon_certificate(const GameSpec& spec, double lambda) {
  require_lambda(lambda);
  return lambda * std::log(2.0) / (1.0 - spec.delta());
}

/// Any epsilon above lambda / (1 - delta) meets the sufficient condition
/// lambda < (1 - delta) epsilon.
inline double epsilon_sufficient(const GameSpec& spec, double lambda) {
  require_lambda(lambda);
  return lambda / (1.0 - spec.delta());
}

enum class EquilibriumMethod { fixed_point_iteration, grid_multistart };

inline const char* method_name(EquilibriumMethod m) {
  return m == EquilibriumMethod::fixed_point_iteration ? "fixed_point_iteration" : "grid_multistart";
}

struct EquilibriumOptions {
  double alpha = 0.5;      // damping of the selection step
  int max_iter = 300;      // selection steps per start
  int max_starts = 16;
  int bisection_steps = 80;
  int grid_points = 11;    // fallback grid per state, N <= 3
  int grid_rounds = 40;    // zoom refinements of the fallback grid
  double solver_tol = 1e-13;
  int threads = 1;
};

struct EquilibriumReport {
  MarkovPolicy p_star;
  double residual = std::numeric_limits<double>::infinity();
  Vector residuals;  // per state
  EquilibriumMethod method = EquilibriumMethod::fixed_point_iteration;
  double epsilon_certificate = 0.0;
  double epsilon_sufficient = 0.0;
  bool success = false;
  int iterations = 0;  // selection steps of the winning start
  int starts = 0;
  int evaluations = 0;
  std::string message;
  RegularizedValues values;
};

namespace detail {

struct Candidate {
  Vector p;
  double residual = std::numeric_limits<double>::infinity();
  int iterations = 0;
  int evaluations = 0;
};

inline bool better(const Candidate& a, const Candidate& b) {
  if (a.residual != b.residual) return a.residual < b.residual;
  return a.p < b.p;
}

class RegularizedSolver {
 public:
  RegularizedSolver(const GameSpec& spec, double lambda, double tol)
      : spec_(spec), lambda_(lambda), tol_(tol) {}

  RegularizedValues values(const Vector& p) {
    ++evaluations;
    return regularized_values(spec_, MarkovPolicy(p), lambda_, tol_);
  }

  double residual(const Vector& p) { return sup_norm(regularized_residual(values(p), p)); }

  // V_S(x) - V_C(x, p) with p_x replaced by s.
  double gap(Vector p, int x, double s) {
    p[x] = s;
    RegularizedValues v = values(p);
    return v.v_lambda_s[x] - v.v_lambda_c[x];
  }

  int evaluations = 0;

 private:
  const GameSpec& spec_;
  double lambda_, tol_;
};

// Moves p_x toward the singleton best response, stopping at an indifference
// point located by bisection when the gap changes sign on the way.
inline double select_coordinate(RegularizedSolver& s, const Vector& p, int x, double d_now,
                                double band, int steps) {
  if (std::abs(d_now) <= band) return p[x];
  const double target = d_now > 0.0 ? 1.0 : 0.0;
  const double d_target = s.gap(p, x, target);
  if (d_now > 0.0 ? d_target >= -band : d_target <= band) return target;
  double a = p[x], b = target, da = d_now;
  for (int k = 0; k < steps; ++k) {
    const double m = 0.5 * (a + b);
    if (m == a || m == b) break;
    const double dm = s.gap(p, x, m);
    if (std::abs(dm) <= band) return m;
    if ((dm > 0.0) == (da > 0.0)) {
      a = m;
      da = dm;
    } else {
      b = m;
    }
  }
  return 0.5 * (a + b);
}

// Damped selection iteration p <- (1 - alpha) p + alpha sel(Psi(p)). Each
// state's update is followed by a Gauss-Seidel sweep that settles it exactly
// when alpha = 1.
inline Candidate selection_iteration(RegularizedSolver& s, Vector p, double band,
                                     const EquilibriumOptions& opt) {
  Candidate best;
  const int n = static_cast<int>(p.size());
  for (int it = 0; it <= opt.max_iter; ++it) {
    RegularizedValues v = s.values(p);
    Vector r = regularized_residual(v, p);
    Candidate cur{p, sup_norm(r), it, 0};
    if (better(cur, best)) best = cur;
    if (cur.residual <= band || it == opt.max_iter) break;
    Vector sel(p);
    for (int x = 0; x < n; ++x)
      sel[x] = select_coordinate(s, p, x, v.v_lambda_s[x] - v.v_lambda_c[x], band,
                                 opt.bisection_steps);
    for (int x = 0; x < n; ++x) p[x] = std::clamp((1.0 - opt.alpha) * p[x] + opt.alpha * sel[x], 0.0, 1.0);
  }
  best.evaluations = s.evaluations;
  return best;
}

// Residual minimization on a grid that is re-centred and halved around the
// incumbent each round, followed by an undamped selection iteration.
inline Candidate grid_search(RegularizedSolver& s, int n, double band, const EquilibriumOptions& opt) {
  const int g = std::max(2, opt.grid_points);
  Vector lo(n, 0.0), hi(n, 1.0);
  Candidate best;
  std::size_t total = 1;
  for (int x = 0; x < n; ++x) total *= static_cast<std::size_t>(g);
  for (int round = 0; round < opt.grid_rounds && best.residual > band; ++round) {
    for (std::size_t i = 0; i < total; ++i) {
      Vector p(n);
      std::size_t rest = i;
      for (int x = n - 1; x >= 0; --x) {
        const int k = static_cast<int>(rest % g);
        rest /= g;
        p[x] = lo[x] + (hi[x] - lo[x]) * k / (g - 1);
      }
      Candidate c{p, s.residual(p), round, 0};
      if (better(c, best)) best = c;
    }
    for (int x = 0; x < n; ++x) {
      const double half = 0.5 * (hi[x] - lo[x]) / 2.0;
      lo[x] = std::max(0.0, best.p[x] - half);
      hi[x] = std::min(1.0, best.p[x] + half);
    }
  }
  if (!best.p.empty() && best.residual > band) {
    EquilibriumOptions undamped = opt;
    undamped.alpha = 1.0;
    Candidate polished = selection_iteration(s, best.p, band, undamped);
    if (better(polished, best)) best = polished;
  }
  best.evaluations = s.evaluations;
  return best;
}

inline std::vector<Vector> equilibrium_starts(int n, int cap) {
  std::vector<Vector> starts{Vector(n, 0.5)};
  const std::size_t corners = std::size_t{1} << std::min(n, 20);
  for (std::size_t m = 0; m < corners && static_cast<int>(starts.size()) < cap; ++m) {
    Vector p(n);
    for (int x = 0; x < n; ++x) p[x] = (m >> (n - 1 - x)) & 1u ? 1.0 : 0.0;
    starts.push_back(p);
  }
  return starts;
}

}  // namespace detail

/// Searches for a fixed point of Psi: damped selection iteration from the
/// centre and the corners of the cube, then for N <= 3 a refined grid search.
/// `tol` is both the indifference band and the residual target.
inline EquilibriumReport find_equilibrium(const GameSpec& spec, double lambda, double tol = 1e-9,
                                          const EquilibriumOptions& opt = {}) {
  require_infinite(spec, "find_equilibrium");
  require_lambda(lambda);
  if (!(tol > 0.0)) throw SpecError("tol", "must be positive");
  if (!(opt.alpha > 0.0 && opt.alpha <= 1.0)) throw SpecError("alpha", "must be in (0, 1]");
  const int n = spec.n_states();
  EquilibriumReport rep;
  rep.epsilon_certificate = epsilon_certificate(spec, lambda);
  rep.epsilon_sufficient = epsilon_sufficient(spec, lambda);

  std::vector<Vector> starts = detail::equilibrium_starts(n, std::max(1, opt.max_starts));
  std::vector<detail::Candidate> found(starts.size());
  parallel_for(starts.size(), opt.threads, [&](std::size_t b, std::size_t e, int) {
    for (std::size_t i = b; i < e; ++i) {
      detail::RegularizedSolver s(spec, lambda, opt.solver_tol);
      found[i] = detail::selection_iteration(s, starts[i], tol, opt);
    }
  });
  detail::Candidate best;
  for (const auto& c : found) {
    rep.evaluations += c.evaluations;
    if (detail::better(c, best)) best = c;
  }
  rep.starts = static_cast<int>(starts.size());
  rep.method = EquilibriumMethod::fixed_point_iteration;

  if (best.residual > tol && n <= 3) {
    detail::RegularizedSolver s(spec, lambda, opt.solver_tol);
    detail::Candidate g = detail::grid_search(s, n, tol, opt);
    rep.evaluations += g.evaluations;
    if (detail::better(g, best)) {
      best = g;
      rep.method = EquilibriumMethod::grid_multistart;
    }
  }

  rep.p_star = MarkovPolicy(best.p);
  rep.iterations = best.iterations;
  rep.values = regularized_values(spec, rep.p_star, lambda, opt.solver_tol);
  rep.residuals = regularized_residual(rep.values, best.p);
  rep.residual = sup_norm(rep.residuals);
  rep.success = rep.residual <= tol;
  if (!rep.success)
    rep.message = "no candidate reached residual " + std::to_string(tol) + " (best " +
                  std::to_string(rep.residual) +
                  "); an equilibrium exists, so the search budget is too small";
  return rep;
}

}  // namespace stackstop
