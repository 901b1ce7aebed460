#pragma once

// The leader's precommitment value as a function of the follower's
// continuation value, v_x(w), computed on a discretized feasible interval.
//
// Each successor y contributes the pair (a, b) = (p W_S + (1-p) w', p V_S +
// (1-p) v_y(w')). With v_y piecewise linear on the grid, the best b for a
// given a is the upper envelope of the segments from (W_S, V_S) to the grid
// points together with the interpolated curve itself. The Bellman step then
// maximizes sum_y pi_xy phi_y(a_y) subject to delta * sum_y pi_xy a_y = w.
//
// The point w = f2(x), when feasible, is a two-sided node: the stop node
// carries g1(x) and the limit node carries the right limit of v_x.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "finite_horizon.hpp"
#include "follower_dynamics.hpp"
#include "game_model.hpp"
#include "numerics.hpp"
#include "path_tree.hpp"

namespace stackstop {

/// Theta_x(w', p) = delta * sum_y pi_xy [p_y W_S(y) + (1 - p_y) w'_y]. When
/// `box` is given, w' must lie in the feasible intervals.
inline double theta(const GameSpec& spec, int x, const Vector& w_prime, const MarkovPolicy& p,
                    const FeasibleInterval* box = nullptr) {
  require_infinite(spec, "theta");
  require_dimension(spec, p);
  if (static_cast<int>(w_prime.size()) != spec.n_states())
    throw SpecError("w_prime", "expected one continuation value per state");
  if (box) {
    for (int y = 0; y < spec.n_states(); ++y)
      if (!box->contains(y, w_prime[y], 1e-12 * std::max(1.0, std::abs(w_prime[y]))))
        throw SpecError("w_prime[" + std::to_string(y) + "]", "outside the feasible interval");
  }
  StopValues sv = stop_values(spec);
  return follower_continuation(spec, p.probs(), sv.w_s, w_prime, x);
}

enum class NodeKind : std::uint8_t { regular, stop, limit };

struct StateGrid {
  Vector w;                    // sorted; the two-sided point appears twice
  std::vector<NodeKind> kind;  // the stop node precedes the limit node
  double lower = 0.0, upper = 0.0, f2 = 0.0;
  int stop_node = -1, limit_node = -1;
  double h = 0.0;  // largest gap between distinct nodes

  int size() const { return static_cast<int>(w.size()); }
};

/// One layer per decision time: a single layer for infinite horizons, layers
/// t = 0..T-1 for finite ones.
struct WGrid {
  std::vector<std::vector<StateGrid>> layers;
};

inline StateGrid make_state_grid(double lower, double upper, double f2, int points) {
  if (points < 2) throw SpecError("grid_points", "must be at least 2");
  StateGrid g;
  g.f2 = f2;
  const double eps = 1e-10 * std::max(1.0, std::abs(f2));
  const bool at_f2 = std::abs(lower - f2) <= eps;
  g.lower = at_f2 ? f2 : lower;
  g.upper = std::max(upper, g.lower);
  const bool single = g.upper - g.lower <= eps;
  if (single) g.upper = g.lower;
  if (at_f2) {
    g.stop_node = 0;
    g.w.push_back(f2);
    g.kind.push_back(NodeKind::stop);
    if (single) return g;
    g.limit_node = 1;
    g.w.push_back(f2);
    g.kind.push_back(NodeKind::limit);
    for (int i = 1; i < points; ++i) {
      g.w.push_back(i == points - 1 ? g.upper
                                    : g.lower + (g.upper - g.lower) * i / (points - 1));
      g.kind.push_back(NodeKind::regular);
    }
  } else if (single) {
    g.w.push_back(g.lower);
    g.kind.push_back(NodeKind::regular);
  } else {
    for (int i = 0; i < points; ++i) {
      g.w.push_back(i == 0 ? g.lower
                           : i == points - 1 ? g.upper
                                             : g.lower + (g.upper - g.lower) * i / (points - 1));
      g.kind.push_back(NodeKind::regular);
    }
  }
  for (int i = 1; i < g.size(); ++i) g.h = std::max(g.h, g.w[i] - g.w[i - 1]);
  return g;
}

/// Feasible intervals of a finite game per decision time, by the same
/// inf/sup recursion as the infinite case with the terminal layer forced.
inline std::pair<std::vector<Vector>, std::vector<Vector>> finite_feasible_intervals(
    const GameSpec& spec) {
  require_finite(spec, "finite_feasible_intervals");
  const int T = *spec.horizon(), n = spec.n_states();
  std::vector<Vector> lo(T, Vector(n)), hi(T, Vector(n));
  for (int t = T - 1; t >= 0; --t) {
    for (int x = 0; x < n; ++x) {
      double elo = 0.0, ehi = 0.0;
      for (int y = 0; y < n; ++y) {
        const double pxy = spec.pi(x, y);
        if (pxy == 0.0) continue;
        double dlo, dhi;
        if (t + 1 == T) {
          dlo = dhi = spec.h2(T, y);
        } else {
          const double ws = std::max(spec.h2(t + 1, y), spec.g2(t + 1, y));
          dlo = std::min(ws, lo[t + 1][y]);
          dhi = std::max(ws, hi[t + 1][y]);
        }
        elo += pxy * dlo;
        ehi += pxy * dhi;
      }
      lo[t][x] = std::max(spec.f2(t, x), spec.delta() * elo);
      hi[t][x] = std::max(spec.f2(t, x), spec.delta() * ehi);
    }
  }
  return {lo, hi};
}

inline WGrid build_wgrid(const GameSpec& spec, int points = 201, double tol = kDefaultSolverTol) {
  WGrid g;
  const int n = spec.n_states();
  if (spec.finite()) {
    if (*spec.horizon() < 1) throw SpecError("horizon", "precommitment values need horizon >= 1");
    auto [lo, hi] = finite_feasible_intervals(spec);
    for (std::size_t t = 0; t < lo.size(); ++t) {
      std::vector<StateGrid> layer;
      for (int x = 0; x < n; ++x)
        layer.push_back(make_state_grid(lo[t][x], hi[t][x], spec.f2(static_cast<int>(t), x), points));
      g.layers.push_back(std::move(layer));
    }
  } else {
    FeasibleInterval fi = feasible_interval(spec, tol);
    std::vector<StateGrid> layer;
    for (int x = 0; x < n; ++x)
      layer.push_back(make_state_grid(fi.lower[x], fi.upper[x], spec.f2()[x], points));
    g.layers.push_back(std::move(layer));
  }
  return g;
}

struct ArgmaxRecord {
  bool valid = false;  // false at stop nodes, where the follower stops at once
  Vector p, w_prime;   // per state; states not reachable keep p = 0
  std::vector<int> node;            // grid node of w'_y, or the left neighbour if off grid
  std::vector<std::uint8_t> on_grid;
  bool uses_limit = false;  // relies on a right limit at some successor
  double objective = 0.0;   // beta * sum_y pi_xy [p_y V_S + (1 - p_y) v_y(w'_y)]
  double theta = 0.0;       // delta * sum_y pi_xy [p_y W_S + (1 - p_y) w'_y]
};

struct VLayer {
  int time = 0;
  std::vector<StateGrid> grid;
  std::vector<Vector> v;                       // [x][node]
  std::vector<std::vector<ArgmaxRecord>> arg;  // [x][node]
  Vector w_s, v_s;
};

struct PrecommitOptions {
  int grid_points = 201;
  double tol = 1e-9;
  std::size_t budget = 4096;  // allocation candidates per grid point
  int threads = 1;
  int max_iter = 100000;
};

struct VCurve {
  bool finite = false;
  std::vector<VLayer> layers;  // layers[0] is the root decision time
  std::vector<double> diffs;   // successive differences (infinite horizon)
  int iterations = 0;
  double residual = 0.0;  // sup-norm of one extra Bellman application
  PrecommitOptions options;
};

class EmptyAdmissibleSet : public SolverError {
 public:
  EmptyAdmissibleSet(int x, double w)
      : SolverError("empty admissible set at state " + std::to_string(x) + ", w = " +
                    std::to_string(w) + " (grid too coarse)"),
        state(x),
        w(w) {}
  int state;
  double w;
};

namespace detail {

inline double near_eps(double a) { return 1e-12 * std::max(1.0, std::abs(a)); }

struct Piece {
  double value = -std::numeric_limits<double>::infinity();
  double p = 0.0, w_prime = 0.0;
  int node = -1;
  bool on_grid = true;
  bool limit = false;
};

// Upper envelope phi(a) of everything a successor can deliver.
class Envelope {
 public:
  Envelope() = default;
  Envelope(double ws, double vs, const StateGrid* grid, const Vector* values)
      : ws_(ws), vs_(vs) {
    if (grid) {
      w_ = grid->w;
      v_ = *values;
      kind_ = grid->kind;
    }
    const int n = static_cast<int>(w_.size());
    lo_ = n ? std::min(ws_, w_.front()) : ws_;
    hi_ = n ? std::max(ws_, w_.back()) : ws_;
    suf_slope_.assign(n, -std::numeric_limits<double>::infinity());
    suf_idx_.assign(n, -1);
    pre_slope_.assign(n, std::numeric_limits<double>::infinity());
    pre_idx_.assign(n, -1);
    for (int j = n - 1; j >= 0; --j) {
      if (j + 1 < n) {
        suf_slope_[j] = suf_slope_[j + 1];
        suf_idx_[j] = suf_idx_[j + 1];
      }
      if (w_[j] > ws_ + near_eps(ws_)) {
        double s = (v_[j] - vs_) / (w_[j] - ws_);
        if (s > suf_slope_[j] || (s == suf_slope_[j] && prefer(j, suf_idx_[j]))) {
          suf_slope_[j] = s;
          suf_idx_[j] = j;
        }
      }
    }
    for (int j = 0; j < n; ++j) {
      if (j > 0) {
        pre_slope_[j] = pre_slope_[j - 1];
        pre_idx_[j] = pre_idx_[j - 1];
      }
      if (w_[j] < ws_ - near_eps(ws_)) {
        double s = (v_[j] - vs_) / (w_[j] - ws_);
        if (s < pre_slope_[j] || (s == pre_slope_[j] && prefer(j, pre_idx_[j]))) {
          pre_slope_[j] = s;
          pre_idx_[j] = j;
        }
      }
    }
    breakpoints_ = w_;
    breakpoints_.push_back(ws_);
    std::sort(breakpoints_.begin(), breakpoints_.end());
    breakpoints_.erase(std::unique(breakpoints_.begin(), breakpoints_.end()), breakpoints_.end());
    phi_at_breaks_.resize(breakpoints_.size());
    for (std::size_t i = 0; i < breakpoints_.size(); ++i)
      phi_at_breaks_[i] = eval(breakpoints_[i]).value;
  }

  double lo() const { return lo_; }
  double hi() const { return hi_; }
  const Vector& breakpoints() const { return breakpoints_; }
  const Vector& phi_at_breaks() const { return phi_at_breaks_; }

  Piece eval(double a) const {
    Piece best;
    const double eps = near_eps(a);
    const int n = static_cast<int>(w_.size());
    auto offer = [&](const Piece& c) {
      const double tie = near_eps(c.value);
      if (c.value > best.value + tie || (c.value >= best.value - tie && best.limit && !c.limit))
        best = c;
    };
    if (std::abs(a - ws_) <= eps) offer(Piece{vs_, 1.0, ws_, -1, true, false});
    if (a > ws_ + eps && n) {
      int k = static_cast<int>(std::lower_bound(w_.begin(), w_.end(), a - eps) - w_.begin());
      if (k < n && suf_idx_[k] >= 0) offer(star(a, suf_idx_[k], suf_slope_[k]));
    }
    if (a < ws_ - eps && n) {
      int k = static_cast<int>(std::upper_bound(w_.begin(), w_.end(), a + eps) - w_.begin()) - 1;
      if (k >= 0 && pre_idx_[k] >= 0) offer(star(a, pre_idx_[k], pre_slope_[k]));
    }
    if (n && a >= w_.front() - eps && a <= w_.back() + eps) {
      bool exact = false;
      auto first = std::lower_bound(w_.begin(), w_.end(), a - eps);
      for (auto it = first; it != w_.end() && *it <= a + eps; ++it) {
        const int j = static_cast<int>(it - w_.begin());
        offer(Piece{v_[j], 0.0, w_[j], j, true, kind_[j] == NodeKind::limit});
        exact = true;
      }
      if (!exact) {
        int k = static_cast<int>(std::upper_bound(w_.begin(), w_.end(), a) - w_.begin()) - 1;
        if (k >= 0 && k + 1 < n) {
          const double lam = (a - w_[k]) / (w_[k + 1] - w_[k]);
          offer(Piece{v_[k] + lam * (v_[k + 1] - v_[k]), 0.0, a, k, false, false});
        }
      }
    }
    return best;
  }

 private:
  bool prefer(int j, int current) const {
    return current < 0 || (kind_[current] == NodeKind::limit && kind_[j] != NodeKind::limit);
  }

  Piece star(double a, int j, double slope) const {
    const double p = std::clamp((a - w_[j]) / (ws_ - w_[j]), 0.0, 1.0);
    return Piece{vs_ + (a - ws_) * slope, p, w_[j], j, true,
                 kind_[j] == NodeKind::limit && p < 1.0};
  }

  double ws_ = 0.0, vs_ = 0.0, lo_ = 0.0, hi_ = 0.0;
  Vector w_, v_;
  std::vector<NodeKind> kind_;
  Vector suf_slope_, pre_slope_;
  std::vector<int> suf_idx_, pre_idx_;
  Vector breakpoints_, phi_at_breaks_;
};

inline std::vector<std::size_t> subsample(std::size_t n, std::size_t cap) {
  std::vector<std::size_t> idx;
  if (n <= cap) {
    for (std::size_t i = 0; i < n; ++i) idx.push_back(i);
    return idx;
  }
  for (std::size_t k = 0; k < cap; ++k) {
    std::size_t i = static_cast<std::size_t>(std::llround(double(k) * (n - 1) / (cap - 1)));
    if (idx.empty() || idx.back() != i) idx.push_back(i);
  }
  return idx;
}

struct Allocation {
  bool ok = false;
  double value = -std::numeric_limits<double>::infinity();
  Vector a;
};

// Maximizes sum_i pis[i] * phi_i(a_i) subject to sum_i pis[i] * a_i = target.
// Within any product of envelope cells the objective is convex, so some
// maximizer has every coordinate but one at a breakpoint; each coordinate
// takes a turn as the one solved from the constraint.
inline Allocation allocate(const Vector& pis, const std::vector<const Envelope*>& env,
                           double target, std::size_t budget) {
  const std::size_t m = pis.size();
  Allocation best;
  best.a.assign(m, 0.0);
  auto fits = [&](std::size_t i, double& a) {
    const double eps = 1e-10 * std::max(1.0, std::abs(a));
    if (a < env[i]->lo() - eps || a > env[i]->hi() + eps) return false;
    a = std::clamp(a, env[i]->lo(), env[i]->hi());
    return true;
  };
  if (m == 1) {
    double a = target / pis[0];
    if (!fits(0, a)) return best;
    best = {true, pis[0] * env[0]->eval(a).value, {a}};
    return best;
  }
  const double per = std::pow(std::max(1.0, double(budget) / double(m)), 1.0 / double(m - 1));
  const std::size_t cap = std::max<std::size_t>(2, static_cast<std::size_t>(per));
  std::vector<std::vector<std::size_t>> choice(m);
  for (std::size_t i = 0; i < m; ++i) choice[i] = subsample(env[i]->breakpoints().size(), cap);

  Vector a(m);
  std::vector<std::size_t> free, digit;
  for (std::size_t d = 0; d < m; ++d) {
    free.clear();
    for (std::size_t i = 0; i < m; ++i)
      if (i != d) free.push_back(i);
    digit.assign(free.size(), 0);
    while (true) {
      double used = 0.0, val = 0.0;
      for (std::size_t k = 0; k < free.size(); ++k) {
        const std::size_t i = free[k], b = choice[i][digit[k]];
        a[i] = env[i]->breakpoints()[b];
        used += pis[i] * a[i];
        val += pis[i] * env[i]->phi_at_breaks()[b];
      }
      double ad = (target - used) / pis[d];
      if (fits(d, ad)) {
        a[d] = ad;
        val += pis[d] * env[d]->eval(ad).value;
        if (val > best.value) best = {true, val, a};
      }
      std::size_t k = 0;
      while (k < free.size() && ++digit[k] == choice[free[k]].size()) digit[k++] = 0;
      if (k == free.size()) break;
    }
  }
  return best;
}

inline int nearest_node(const StateGrid& g, double w) {
  int best = 0;
  for (int j = 1; j < g.size(); ++j)
    if (std::abs(g.w[j] - w) < std::abs(g.w[best] - w)) best = j;
  return best;
}

// Payoff view at a layer: time-indexed for finite specs, stationary otherwise.
struct LayerPayoffs {
  Vector w_s, v_s;
};

inline LayerPayoffs stop_payoffs_at(const GameSpec& spec, int t) {
  const int n = spec.n_states();
  LayerPayoffs lp{Vector(n), Vector(n)};
  for (int x = 0; x < n; ++x) {
    const double h2 = spec.h2(t, x), g2 = spec.g2(t, x);
    const bool q = h2 >= g2 - kTieTol;
    lp.w_s[x] = std::max(h2, g2);
    lp.v_s[x] = q ? spec.h1(t, x) : spec.f1(t, x);
  }
  return lp;
}

// One Bellman application on a layer given its successors' envelopes.
inline void bellman_layer(const GameSpec& spec, int t, const std::vector<StateGrid>& grid,
                          const std::vector<Envelope>& succ, const PrecommitOptions& opt,
                          std::vector<Vector>& out_v,
                          std::vector<std::vector<ArgmaxRecord>>* out_arg) {
  const int n = spec.n_states();
  std::vector<std::pair<int, int>> jobs;
  out_v.assign(n, Vector());
  if (out_arg) out_arg->assign(n, {});
  for (int x = 0; x < n; ++x) {
    out_v[x].assign(grid[x].size(), 0.0);
    if (out_arg) (*out_arg)[x].assign(grid[x].size(), ArgmaxRecord{});
    for (int j = 0; j < grid[x].size(); ++j) jobs.emplace_back(x, j);
  }
  parallel_for(jobs.size(), opt.threads, [&](std::size_t b, std::size_t e, int) {
    for (std::size_t k = b; k < e; ++k) {
      const auto [x, j] = jobs[k];
      const StateGrid& g = grid[x];
      if (g.kind[j] == NodeKind::stop) {
        out_v[x][j] = spec.g1(t, x);
        continue;
      }
      Vector pis;
      std::vector<int> ys;
      std::vector<const Envelope*> env;
      for (int y = 0; y < n; ++y) {
        if (spec.pi(x, y) <= 0.0) continue;
        pis.push_back(spec.pi(x, y));
        ys.push_back(y);
        env.push_back(&succ[y]);
      }
      Allocation al = allocate(pis, env, g.w[j] / spec.delta(), opt.budget);
      if (!al.ok) throw EmptyAdmissibleSet(x, g.w[j]);
      out_v[x][j] = spec.beta() * al.value;
      if (!out_arg) continue;
      ArgmaxRecord rec;
      rec.valid = true;
      rec.p.assign(n, 0.0);
      rec.w_prime.assign(n, 0.0);
      rec.node.assign(n, -1);
      rec.on_grid.assign(n, 1);
      double th = 0.0, obj = 0.0;
      for (std::size_t i = 0; i < ys.size(); ++i) {
        const int y = ys[i];
        Piece pc = env[i]->eval(al.a[i]);
        rec.p[y] = pc.p;
        rec.w_prime[y] = pc.w_prime;
        rec.node[y] = pc.node;
        rec.on_grid[y] = pc.on_grid;
        rec.uses_limit = rec.uses_limit || pc.limit;
        th += pis[i] * al.a[i];
        obj += pis[i] * pc.value;
      }
      rec.theta = spec.delta() * th;
      rec.objective = spec.beta() * obj;
      (*out_arg)[x][j] = std::move(rec);
    }
  });
}

inline std::vector<Envelope> envelopes_for(const LayerPayoffs& stop, const std::vector<StateGrid>* grid,
                                           const std::vector<Vector>* values) {
  std::vector<Envelope> env;
  for (std::size_t y = 0; y < stop.w_s.size(); ++y)
    env.emplace_back(stop.w_s[y], stop.v_s[y], grid ? &(*grid)[y] : nullptr,
                     values ? &(*values)[y] : nullptr);
  return env;
}

inline Vector flatten(const std::vector<Vector>& v) {
  Vector out;
  for (const auto& row : v) out.insert(out.end(), row.begin(), row.end());
  return out;
}

inline std::vector<Vector> unflatten(const Vector& flat, const std::vector<StateGrid>& grid) {
  std::vector<Vector> out;
  std::size_t k = 0;
  for (const auto& g : grid) {
    out.emplace_back(flat.begin() + k, flat.begin() + k + g.size());
    k += g.size();
  }
  return out;
}

}  // namespace detail

/// Solves the Bellman equation for v on the grid: backward over the layers
/// of a finite game, by value iteration of the beta-contraction otherwise.
inline VCurve solve_v(const GameSpec& spec, const WGrid& grid, const PrecommitOptions& opt = {}) {
  VCurve c;
  c.finite = spec.finite();
  c.options = opt;
  const int n = spec.n_states();
  if (c.finite) {
    const int T = *spec.horizon();
    if (static_cast<int>(grid.layers.size()) != T)
      throw SpecError("grid", "expected one layer per decision time");
    c.layers.resize(T);
    for (int t = T - 1; t >= 0; --t) {
      VLayer& L = c.layers[t];
      L.time = t;
      L.grid = grid.layers[t];
      auto stop = detail::stop_payoffs_at(spec, t);
      L.w_s = stop.w_s;
      L.v_s = stop.v_s;
      std::vector<detail::Envelope> succ;
      if (t + 1 == T) {
        detail::LayerPayoffs term{Vector(n), Vector(n)};
        for (int y = 0; y < n; ++y) {
          term.w_s[y] = spec.h2(T, y);
          term.v_s[y] = spec.h1(T, y);
        }
        succ = detail::envelopes_for(term, nullptr, nullptr);
      } else {
        const VLayer& next = c.layers[t + 1];
        succ = detail::envelopes_for({next.w_s, next.v_s}, &next.grid, &next.v);
      }
      detail::bellman_layer(spec, t, L.grid, succ, opt, L.v, &L.arg);
    }
    return c;
  }

  if (grid.layers.size() != 1) throw SpecError("grid", "expected a single stationary layer");
  VLayer L;
  L.grid = grid.layers[0];
  auto stop = detail::stop_payoffs_at(spec, 0);
  L.w_s = stop.w_s;
  L.v_s = stop.v_s;
  auto apply = [&](const Vector& flat) {
    auto values = detail::unflatten(flat, L.grid);
    auto succ = detail::envelopes_for(stop, &L.grid, &values);
    std::vector<Vector> out;
    detail::bellman_layer(spec, 0, L.grid, succ, opt, out, nullptr);
    return detail::flatten(out);
  };
  std::size_t total = 0;
  for (const auto& g : L.grid) total += g.size();
  FixedPointTrace tr =
      iterate_contraction(apply, Vector(total, 0.0), spec.beta(), opt.tol, opt.max_iter);
  c.diffs = tr.diffs;
  c.iterations = tr.iterations;
  auto values = detail::unflatten(tr.value, L.grid);
  auto succ = detail::envelopes_for(stop, &L.grid, &values);
  detail::bellman_layer(spec, 0, L.grid, succ, opt, L.v, &L.arg);
  c.residual = sup_norm_diff(detail::flatten(L.v), tr.value);
  c.layers.push_back(std::move(L));
  return c;
}

inline VCurve solve_v(const GameSpec& spec, const PrecommitOptions& opt = {}) {
  return solve_v(spec, build_wgrid(spec, opt.grid_points), opt);
}

/// Piecewise-linear reading of v_x on layer `t` at an arbitrary w; at the
/// two-sided point the larger of the two node values is returned.
inline double interpolate_v(const VCurve& c, int t, int x, double w) {
  const StateGrid& g = c.layers.at(t).grid.at(x);
  const Vector& v = c.layers[t].v[x];
  const double eps = detail::near_eps(w);
  double best = -std::numeric_limits<double>::infinity();
  for (int j = 0; j < g.size(); ++j)
    if (std::abs(g.w[j] - w) <= eps) best = std::max(best, v[j]);
  if (best > -std::numeric_limits<double>::infinity()) return best;
  if (w < g.w.front() || w > g.w.back())
    throw SpecError("w", "outside the feasible interval");
  int k = static_cast<int>(std::upper_bound(g.w.begin(), g.w.end(), w) - g.w.begin()) - 1;
  const double lam = (w - g.w[k]) / (g.w[k + 1] - g.w[k]);
  return v[k] + lam * (v[k + 1] - v[k]);
}

struct PrecommitEntry {
  double value = 0.0;       // max(V_S, sup_w v_x(w))
  double stop_value = 0.0;  // V_S(x)
  double best_continuation = 0.0;
  double argmax_w = 0.0;
  int argmax_node = -1;
  bool stop_now = false;       // stopping immediately is optimal
  bool at_limit = false;       // the maximizer is a right limit at w = f2
  bool attained = true;
};

/// Precommitment value per state at the root decision time. A supremum that
/// only a right limit reaches, or that relies on one downstream, is reported
/// as not attained.
inline std::vector<PrecommitEntry> precommit_value(const VCurve& c, double tol = 1e-9) {
  const VLayer& L = c.layers.at(0);
  std::vector<PrecommitEntry> out;
  for (std::size_t x = 0; x < L.grid.size(); ++x) {
    const StateGrid& g = L.grid[x];
    PrecommitEntry e;
    e.stop_value = L.v_s[x];
    int best = -1;
    for (int j = 0; j < g.size(); ++j) {
      const double v = L.v[x][j];
      if (best < 0 || v > L.v[x][best] + tol ||
          (v >= L.v[x][best] - tol && g.kind[best] == NodeKind::limit &&
           g.kind[j] != NodeKind::limit))
        best = j;
    }
    e.argmax_node = best;
    e.argmax_w = g.w[best];
    e.best_continuation = L.v[x][best];
    e.stop_now = e.stop_value >= e.best_continuation - tol;
    e.value = std::max(e.stop_value, e.best_continuation);
    e.at_limit = g.kind[best] == NodeKind::limit &&
                 L.v[x][best] > L.v[x][g.stop_node] + tol;
    const ArgmaxRecord& rec = L.arg[x][best];
    e.attained = e.stop_now || (!e.at_limit && !(rec.valid && rec.uses_limit));
    out.push_back(e);
  }
  return out;
}

struct ExtractedPolicy {
  PathPolicy policy;
  double target_w = 0.0, target_v = 0.0;
  double leader_tail = 0.0;    // bound on the leader value gap from truncation
  double follower_tail = 0.0;  // bound on the follower constraint drift
  double snap_error = 0.0;     // largest |w' - grid node| used while unrolling
};

/// Pure Markov stop probabilities at time t that hold the follower's
/// continuation value at the lower end of the feasible interval.
inline Vector lower_endpoint_policy(const GameSpec& spec, int t) {
  const int n = spec.n_states();
  if (!spec.finite()) return feasible_interval(spec).lower_policy.probs();
  const int T = *spec.horizon();
  Vector p(n, 1.0);
  if (t >= T) return p;
  auto [lo, hi] = finite_feasible_intervals(spec);
  for (int z = 0; z < n; ++z)
    p[z] = std::max(spec.h2(t, z), spec.g2(t, z)) >= lo[t][z] ? 0.0 : 1.0;
  return p;
}

/// Unrolls the argmax records from (x, node) on the root layer into a
/// path-dependent policy of depth H. The root continues; the leader stops at
/// depth H, or earlier at the horizon of a finite game. Below a stop node the
/// follower must be held at w = f2, which the lower-endpoint policy does.
inline ExtractedPolicy extract_policy(const GameSpec& spec, const VCurve& c, int x, int node,
                                      int H) {
  if (H < 1) throw SpecError("depth", "must be at least 1");
  const VLayer& root = c.layers.at(0);
  if (node < 0 || node >= root.grid.at(x).size()) throw SpecError("node", "not on the grid");
  const int t0 = root.time;
  int end = t0 + H;
  bool forced = false;
  if (c.finite && end >= *spec.horizon()) {
    end = *spec.horizon();
    forced = true;
  }
  TreePtr tree = PathTree::build(spec, t0, x, end, forced);
  const std::size_t size = static_cast<std::size_t>(tree->size());
  std::vector<double> probs(size, 1.0);
  std::vector<int> at_node(size, -1);
  std::vector<std::uint8_t> lower_mode(size, 0);
  std::vector<Vector> lower_cache(static_cast<std::size_t>(end + 1));
  auto lower_at = [&](int t) -> const Vector& {
    if (lower_cache[t].empty()) lower_cache[t] = lower_endpoint_policy(spec, t);
    return lower_cache[t];
  };
  ExtractedPolicy ex;
  ex.target_w = root.grid[x].w[node];
  ex.target_v = root.v[x][node];
  probs[0] = 0.0;
  at_node[0] = node;
  for (int i = 0; i < tree->size(); ++i) {
    const auto& nd = tree->node(i);
    if (tree->terminal(i)) continue;
    if (lower_mode[i]) {
      tree->for_children(i, [&](int ch) {
        probs[ch] = lower_at(nd.time + 1)[tree->node(ch).state];
        lower_mode[ch] = 1;
      });
      continue;
    }
    if (at_node[i] < 0) continue;
    const int lidx = c.finite ? nd.time - t0 : 0;
    const ArgmaxRecord& rec = c.layers[lidx].arg[nd.state][at_node[i]];
    if (!rec.valid) {
      tree->for_children(i, [&](int ch) {
        probs[ch] = lower_at(nd.time + 1)[tree->node(ch).state];
        lower_mode[ch] = 1;
      });
      continue;
    }
    tree->for_children(i, [&](int ch) {
      const int y = tree->node(ch).state;
      probs[ch] = rec.p[y];
      const int next = c.finite ? lidx + 1 : 0;
      if (tree->terminal(ch) || next >= static_cast<int>(c.layers.size())) return;
      const StateGrid& g = c.layers[next].grid[y];
      int k = rec.on_grid[y] ? rec.node[y] : detail::nearest_node(g, rec.w_prime[y]);
      ex.snap_error = std::max(ex.snap_error, std::abs(g.w[k] - rec.w_prime[y]));
      at_node[ch] = k;
    });
  }
  ex.policy = PathPolicy(tree, std::move(probs));
  if (!forced) {
    const double m = spec.max_abs_payoff();
    ex.leader_tail = std::pow(spec.beta(), H) * m;
    ex.follower_tail = std::pow(spec.delta(), H) * m;
  }
  return ex;
}

/// CSV for one state of a layer: w,v,attaining_p_1..N,attaining_wprime_1..N.
/// Stop nodes have no attaining pair and leave those columns empty.
inline std::string vcurve_csv(const VCurve& c, int x, int layer = 0) {
  const VLayer& L = c.layers.at(layer);
  const int n = static_cast<int>(L.grid.size());
  std::ostringstream os;
  os << "w,v";
  for (int y = 0; y < n; ++y) os << ",attaining_p_" << y + 1;
  for (int y = 0; y < n; ++y) os << ",attaining_wprime_" << y + 1;
  os << '\n';
  const StateGrid& g = L.grid.at(x);
  for (int j = 0; j < g.size(); ++j) {
    os << shortest(g.w[j]) << ',' << shortest(L.v[x][j]);
    const ArgmaxRecord& r = L.arg[x][j];
    for (int y = 0; y < n; ++y) {
      os << ',';
      if (r.valid) os << shortest(r.p[y]);
    }
    for (int y = 0; y < n; ++y) {
      os << ',';
      if (r.valid) os << shortest(r.w_prime[y]);
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace stackstop
