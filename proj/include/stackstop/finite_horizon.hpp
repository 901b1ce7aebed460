#pragma once

// Exact finite-horizon solvers on the path tree: pure best responses and
// precommitment, time consistency, pure Markov equilibrium, Nash enumeration,
// and the backward recursions for randomized leader policies.
//
// Discounting is relative to the root time of each tree, so a value computed
// at (t, x) is in time-t units. With beta = delta = 1 this is the plain
// undiscounted game.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "game_model.hpp"
#include "numerics.hpp"
#include "path_tree.hpp"

namespace stackstop {

struct EnumBudget {
  std::size_t max_nodes = kDefaultMaxTreeNodes;
  std::uint64_t max_candidates = 1000000;
  // Nash enumeration evaluates every pair, so its cap is on each side.
  std::uint64_t max_nash_candidates = 2000;
};

// ---------------------------------------------------------------------------
// Stopping-time enumeration.

/// Number of adapted pure stopping times on the unstopped tree, saturated at
/// `cap + 1`.
inline std::uint64_t count_stopping_times(const PathTree& tree, std::uint64_t cap) {
  const std::uint64_t sat = cap + 1;
  std::vector<std::uint64_t> c(static_cast<std::size_t>(tree.size()), 1);
  for (int i = tree.size() - 1; i >= 0; --i) {
    if (tree.terminal(i)) continue;
    std::uint64_t prod = 1;
    tree.for_children(i, [&](int ch) {
      prod = (prod > sat / std::max<std::uint64_t>(c[ch], 1)) ? sat : std::min(sat, prod * c[ch]);
    });
    c[i] = std::min(sat, prod + 1);
  }
  return c[0];
}

/// Calls `emit(indicators)` for every adapted pure stopping time. At each
/// node "stop" is tried before "continue" and the tree is walked depth-first,
/// which fixes the enumeration order. Nodes below a stop keep stale entries;
/// only first stops along a path are meaningful.
template <typename Emit>
void enumerate_stopping_times(const PathTree& tree, Emit&& emit) {
  struct Frame {
    int node;
    int choice;  // 0 stop, 1 continue, 2 forced terminal stop
  };
  std::vector<std::uint8_t> stop(static_cast<std::size_t>(tree.size()), 0);
  std::vector<int> pending{0};
  std::vector<Frame> frames;
  auto push_children = [&](int n) {
    const auto& nd = tree.node(n);
    for (int k = nd.n_children - 1; k >= 0; --k) pending.push_back(nd.first_child + k);
  };
  for (;;) {
    while (!pending.empty()) {
      int n = pending.back();
      pending.pop_back();
      stop[n] = 1;
      frames.push_back({n, tree.terminal(n) ? 2 : 0});
    }
    emit(static_cast<const std::vector<std::uint8_t>&>(stop));
    for (;;) {
      if (frames.empty()) return;
      Frame& f = frames.back();
      if (f.choice == 0) {
        f.choice = 1;
        stop[f.node] = 0;
        push_children(f.node);
        break;
      }
      if (f.choice == 1) pending.resize(pending.size() - tree.node(f.node).n_children);
      pending.push_back(f.node);
      frames.pop_back();
    }
  }
}

/// All adapted pure stopping times on `tree`, in enumeration order.
inline std::vector<PureStoppingTime> all_stopping_times(const TreePtr& tree,
                                                        std::uint64_t max_candidates) {
  if (count_stopping_times(*tree, max_candidates) > max_candidates)
    throw BudgetError("more than " + std::to_string(max_candidates) +
                      " stopping times to enumerate");
  std::vector<PureStoppingTime> out;
  enumerate_stopping_times(*tree, [&](const std::vector<std::uint8_t>& s) {
    out.emplace_back(tree, s);
  });
  return out;
}

// ---------------------------------------------------------------------------
// Pure strategies.

namespace detail {

// Node index of the first stop on the path to each node (-1 if none yet).
inline std::vector<int> first_stop_index(const PureStoppingTime& s) {
  const PathTree& tree = s.tree();
  std::vector<int> fs(static_cast<std::size_t>(tree.size()), -1);
  for (int i = 0; i < tree.size(); ++i) {
    int parent = tree.node(i).parent;
    int inherited = parent >= 0 ? fs[parent] : -1;
    fs[i] = inherited >= 0 ? inherited : (s.stops(i) ? i : -1);
  }
  return fs;
}

inline void require_same_tree(const PureStoppingTime& a, const PureStoppingTime& b) {
  if (a.tree_ptr() != b.tree_ptr())
    throw SpecError("stop_set", "stopping times live on different path trees");
}

struct PairPayoff {
  double j1 = 0.0;
  double j2 = 0.0;
};

// Discounted payoffs of one realized outcome: leader stops at node a, follower
// at node b (first stops on the same leaf path).
inline PairPayoff outcome(const GameSpec& spec, const PathTree& tree, int a, int b) {
  const auto& na = tree.node(a);
  const auto& nb = tree.node(b);
  const int t0 = tree.start_time();
  PairPayoff out;
  if (na.time < nb.time) {
    out.j1 = spec.f1(na.time, na.state);
    out.j2 = spec.g2(na.time, na.state);
  } else if (nb.time < na.time) {
    out.j1 = spec.g1(nb.time, nb.state);
    out.j2 = spec.f2(nb.time, nb.state);
  } else {
    out.j1 = spec.h1(na.time, na.state);
    out.j2 = spec.h2(na.time, na.state);
  }
  const int m = std::min(na.time, nb.time) - t0;
  out.j1 *= std::pow(spec.beta(), m);
  out.j2 *= std::pow(spec.delta(), m);
  return out;
}

}  // namespace detail

struct FiniteValueReport {
  double leader_value = 0.0;    // J1 at the root
  double follower_value = 0.0;  // J2 at the root
  // Probability of each stopping time, indexed by time - start_time.
  std::vector<double> leader_stop_dist;
  std::vector<double> follower_stop_dist;
};

/// Exact expected payoffs of a pure pair by summation over leaf paths.
inline FiniteValueReport evaluate_pure(const GameSpec& spec, const PureStoppingTime& tau,
                                       const PureStoppingTime& rho) {
  detail::require_same_tree(tau, rho);
  const PathTree& tree = tau.tree();
  const auto fs_tau = detail::first_stop_index(tau);
  const auto fs_rho = detail::first_stop_index(rho);
  const std::size_t span = static_cast<std::size_t>(tree.horizon() - tree.start_time() + 1);
  FiniteValueReport r;
  r.leader_stop_dist.assign(span, 0.0);
  r.follower_stop_dist.assign(span, 0.0);
  for (int leaf : tree.leaves()) {
    const double w = tree.node(leaf).reach;
    const int a = fs_tau[leaf];
    const int b = fs_rho[leaf];
    auto pay = detail::outcome(spec, tree, a, b);
    r.leader_value += w * pay.j1;
    r.follower_value += w * pay.j2;
    r.leader_stop_dist[tree.node(a).time - tree.start_time()] += w;
    r.follower_stop_dist[tree.node(b).time - tree.start_time()] += w;
  }
  return r;
}

/// Earliest follower best response to a pure leader stopping time, by
/// backward induction on the path tree. Once the leader has stopped the
/// follower's payoff is fixed and the follower stops at the next node.
inline PureStoppingTime follower_best_response_pure(const GameSpec& spec,
                                                    const PureStoppingTime& tau,
                                                    double tie_tol = kTieTol) {
  const PathTree& tree = tau.tree();
  const int n = tree.size();
  std::vector<double> value(static_cast<std::size_t>(n), 0.0);
  std::vector<std::uint8_t> rho(static_cast<std::size_t>(n), 0);
  for (int i = n - 1; i >= 0; --i) {
    const auto& nd = tree.node(i);
    const int t = nd.time, x = nd.state;
    if (tau.stops(i)) {
      if (tree.terminal(i) && tree.forced_terminal()) {
        value[i] = spec.h2(t, x);
        rho[i] = 1;
      } else {
        const double h = spec.h2(t, x), g = spec.g2(t, x);
        rho[i] = h >= g - tie_tol ? 1 : 0;
        value[i] = std::max(h, g);
      }
      continue;
    }
    double e = 0.0;
    tree.for_children(i, [&](int c) { e += tree.node(c).prob * value[c]; });
    const double cont = spec.delta() * e;
    const double f = spec.f2(t, x);
    rho[i] = f >= cont - tie_tol ? 1 : 0;
    value[i] = std::max(f, cont);
  }
  // Nodes strictly after a leader stop: the follower stops immediately.
  std::vector<std::uint8_t> leader_done(static_cast<std::size_t>(n), 0);
  for (int i = 1; i < n; ++i) {
    int p = tree.node(i).parent;
    leader_done[i] = leader_done[p] || tau.stops(p);
    if (leader_done[i]) rho[i] = 1;
  }
  return PureStoppingTime(tau.tree_ptr(), std::move(rho));
}

/// V_{t,x}(tau): the leader's payoff against the earliest follower best response.
inline double leader_value_pure(const GameSpec& spec, const PureStoppingTime& tau) {
  return evaluate_pure(spec, tau, follower_best_response_pure(spec, tau)).leader_value;
}

struct PurePrecommitment {
  PureStoppingTime tau;
  double value = 0.0;
  std::uint64_t candidates = 0;
};

/// Maximizes leader_value_pure over all adapted pure stopping times from
/// (t, x). The first maximizer in enumeration order is returned.
inline PurePrecommitment precommit_pure(const GameSpec& spec, int t, int x,
                                        const EnumBudget& budget = {}) {
  require_finite(spec, "precommit_pure");
  auto tree = PathTree::for_spec(spec, t, x, budget.max_nodes);
  if (count_stopping_times(*tree, budget.max_candidates) > budget.max_candidates)
    throw BudgetError("more than " + std::to_string(budget.max_candidates) +
                      " stopping times to enumerate");
  PurePrecommitment best;
  best.value = -std::numeric_limits<double>::infinity();
  enumerate_stopping_times(*tree, [&](const std::vector<std::uint8_t>& s) {
    PureStoppingTime tau(tree, s);
    double v = leader_value_pure(spec, tau);
    ++best.candidates;
    if (v > best.value + kTieTol || best.candidates == 1) {
      best.value = v;
      best.tau = std::move(tau);
    }
  });
  return best;
}

struct InconsistencyEntry {
  int time = 0;
  int state = 0;
  std::string path;          // key of the node in the time-0 tree
  int initial_state = 0;     // x0 of the time-0 problem
  double initial_plan_value = 0.0;  // time-s value of the time-0 plan
  double current_value = 0.0;       // time-s precommitment value
  int initial_plan_stop_time = -1;  // -1 when path dependent
  int current_stop_time = -1;
};

struct TimeConsistencyReport {
  std::vector<InconsistencyEntry> entries;
  bool consistent() const { return entries.empty(); }
};

/// Compares the time-0 precommitment, restricted to each not-yet-stopped
/// node (s, path) with 0 < s < T, against the time-s precommitment there.
/// A node is reported when the restricted plan is no longer optimal.
inline TimeConsistencyReport time_consistency_check(const GameSpec& spec,
                                                    const EnumBudget& budget = {}) {
  require_finite(spec, "time_consistency_check");
  const int T = *spec.horizon();
  std::map<std::pair<int, int>, PurePrecommitment> cache;
  auto precommit_at = [&](int s, int y) -> const PurePrecommitment& {
    auto it = cache.find({s, y});
    if (it == cache.end()) it = cache.emplace(std::make_pair(s, y), precommit_pure(spec, s, y, budget)).first;
    return it->second;
  };
  TimeConsistencyReport report;
  for (int x0 = 0; x0 < spec.n_states(); ++x0) {
    const PurePrecommitment& plan = precommit_at(0, x0);
    const PathTree& full = plan.tau.tree();
    for (int i = 1; i < full.size(); ++i) {
      const auto& nd = full.node(i);
      if (nd.time >= T || !plan.tau.alive_at(i)) continue;
      const PurePrecommitment& now = precommit_at(nd.time, nd.state);
      const TreePtr& sub = now.tau.tree_ptr();
      auto map = embed_subtree(*sub, full, i);
      std::vector<std::uint8_t> restricted(static_cast<std::size_t>(sub->size()));
      for (int k = 0; k < sub->size(); ++k) restricted[k] = plan.tau.stops(map[k]) ? 1 : 0;
      PureStoppingTime old_plan(sub, std::move(restricted));
      double old_value = leader_value_pure(spec, old_plan);
      if (old_value < now.value - kValueTol) {
        report.entries.push_back({nd.time, nd.state, full.key(i), x0, old_value, now.value,
                                  old_plan.deterministic_time(),
                                  now.tau.deterministic_time()});
      }
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Markov policies on [0, T] x states.

using TimeTable = std::vector<Vector>;  // [t][x]

struct FiniteMarkovValues {
  TimeTable W, W_S, W_C, V, V_S, V_C, Q_S, Q_C;
};

/// Backward recursion for a (possibly randomized) Markov policy p[t][x].
/// The terminal layer forces both players to stop.
inline FiniteMarkovValues evaluate_markov_finite(const GameSpec& spec, const TimeTable& p,
                                                 double tie_tol = kTieTol) {
  require_finite(spec, "evaluate_markov_finite");
  const int T = *spec.horizon();
  const int N = spec.n_states();
  if (static_cast<int>(p.size()) != T + 1)
    throw SpecError("policy", "expected " + std::to_string(T + 1) + " time layers");
  for (const auto& row : p)
    if (static_cast<int>(row.size()) != N)
      throw SpecError("policy", "expected " + std::to_string(N) + " states per layer");
  FiniteMarkovValues r;
  for (TimeTable* tab : {&r.W, &r.W_S, &r.W_C, &r.V, &r.V_S, &r.V_C, &r.Q_S, &r.Q_C})
    tab->assign(static_cast<std::size_t>(T + 1), Vector(static_cast<std::size_t>(N), 0.0));
  for (int x = 0; x < N; ++x) {
    r.W[T][x] = r.W_S[T][x] = r.W_C[T][x] = spec.h2(T, x);
    r.V[T][x] = r.V_S[T][x] = r.V_C[T][x] = spec.h1(T, x);
    r.Q_S[T][x] = r.Q_C[T][x] = 1.0;
  }
  for (int t = T - 1; t >= 0; --t) {
    for (int x = 0; x < N; ++x) {
      const double h2 = spec.h2(t, x), g2 = spec.g2(t, x), f2 = spec.f2(t, x);
      const bool qs = h2 >= g2 - tie_tol;
      r.W_S[t][x] = std::max(h2, g2);
      r.Q_S[t][x] = qs;
      r.V_S[t][x] = qs ? spec.h1(t, x) : spec.f1(t, x);
      double ew = 0.0, ev = 0.0;
      for (int y = 0; y < N; ++y) {
        ew += spec.pi(x, y) * r.W[t + 1][y];
        ev += spec.pi(x, y) * r.V[t + 1][y];
      }
      const double cont = spec.delta() * ew;
      const bool qc = f2 >= cont - tie_tol;
      r.W_C[t][x] = std::max(f2, cont);
      r.Q_C[t][x] = qc;
      r.V_C[t][x] = qc ? spec.g1(t, x) : spec.beta() * ev;
      const double pt = p[t][x];
      if (!(pt >= 0.0 && pt <= 1.0))
        throw SpecError("policy[" + std::to_string(t) + "][" + std::to_string(x) + "]",
                        "stopping probability must lie in [0,1]");
      r.W[t][x] = pt * r.W_S[t][x] + (1 - pt) * r.W_C[t][x];
      r.V[t][x] = pt * r.V_S[t][x] + (1 - pt) * r.V_C[t][x];
    }
  }
  return r;
}

struct PureEquilibrium {
  std::vector<std::vector<int>> policy;  // [t][x] in {0,1}
  FiniteMarkovValues values;

  TimeTable as_table() const {
    TimeTable t;
    for (const auto& row : policy) t.emplace_back(row.begin(), row.end());
    return t;
  }
};

/// Time-consistent pure Markov equilibrium by backward induction; the leader
/// stops when stopping is at least as good as continuing.
inline PureEquilibrium pure_equilibrium(const GameSpec& spec, double tie_tol = kTieTol) {
  require_finite(spec, "pure_equilibrium");
  const int T = *spec.horizon();
  const int N = spec.n_states();
  TimeTable p(static_cast<std::size_t>(T + 1), Vector(static_cast<std::size_t>(N), 1.0));
  // Layer t only depends on layers > t, so one backward sweep fixes p.
  for (int t = T - 1; t >= 0; --t) {
    auto vals = evaluate_markov_finite(spec, p, tie_tol);
    for (int x = 0; x < N; ++x)
      p[t][x] = vals.V_S[t][x] >= vals.V_C[t][x] - tie_tol ? 1.0 : 0.0;
  }
  PureEquilibrium eq;
  eq.values = evaluate_markov_finite(spec, p, tie_tol);
  for (const auto& row : p) {
    std::vector<int> r;
    for (double v : row) r.push_back(static_cast<int>(v));
    eq.policy.push_back(std::move(r));
  }
  return eq;
}

struct NashPair {
  PureStoppingTime tau;
  PureStoppingTime rho;
  double leader_value = 0.0;
  double follower_value = 0.0;
};

/// All pure pairs from (t, x) that are mutual best responses.
inline std::vector<NashPair> nash_enumerate(const GameSpec& spec, int t, int x,
                                            const EnumBudget& budget = {}) {
  require_finite(spec, "nash_enumerate");
  auto tree = PathTree::for_spec(spec, t, x, budget.max_nodes);
  auto times = all_stopping_times(tree, budget.max_nash_candidates);
  const std::size_t m = times.size();
  const auto leaves = tree->leaves();
  std::vector<std::vector<int>> hit(m);
  for (std::size_t i = 0; i < m; ++i) {
    auto fs = detail::first_stop_index(times[i]);
    for (int leaf : leaves) hit[i].push_back(fs[leaf]);
  }
  std::vector<double> j1(m * m, 0.0), j2(m * m, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double a = 0.0, b = 0.0;
      for (std::size_t k = 0; k < leaves.size(); ++k) {
        auto pay = detail::outcome(spec, *tree, hit[i][k], hit[j][k]);
        a += tree->node(leaves[k]).reach * pay.j1;
        b += tree->node(leaves[k]).reach * pay.j2;
      }
      j1[i * m + j] = a;
      j2[i * m + j] = b;
    }
  std::vector<double> best1(m, -std::numeric_limits<double>::infinity()), best2 = best1;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      best1[j] = std::max(best1[j], j1[i * m + j]);
      best2[i] = std::max(best2[i], j2[i * m + j]);
    }
  std::vector<NashPair> out;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j)
      if (j1[i * m + j] >= best1[j] - kValueTol && j2[i * m + j] >= best2[i] - kValueTol)
        out.push_back({times[i], times[j], j1[i * m + j], j2[i * m + j]});
  return out;
}

// ---------------------------------------------------------------------------
// Randomized path-dependent leader policies.

struct RandomizedTables {
  std::vector<double> W, W_S, W_C, V, V_S, V_C;
  std::vector<double> cont;  // delta * E[W(children)], 0 on the last layer
  std::vector<std::uint8_t> Q_S, Q_C;
};

struct RandomizedEvalOptions {
  double tie_tol = kTieTol;
  // Per-node follower continue-branch action (0/1) overriding the optimal
  // indicator; -1 leaves the node free. Used to evaluate one-sided limits.
  const std::vector<std::int8_t>* forced_qc = nullptr;
};

/// Exact backward recursion for the follower's and the leader's values under
/// a path policy P. Truncated (non-forced) last layers use the leader-stop
/// branch with a free follower choice.
inline RandomizedTables evaluate_randomized(const GameSpec& spec, const PathPolicy& P,
                                            const RandomizedEvalOptions& opt = {}) {
  const PathTree& tree = P.tree();
  const std::size_t n = static_cast<std::size_t>(tree.size());
  RandomizedTables r;
  for (auto* v : {&r.W, &r.W_S, &r.W_C, &r.V, &r.V_S, &r.V_C, &r.cont}) v->assign(n, 0.0);
  r.Q_S.assign(n, 0);
  r.Q_C.assign(n, 0);
  for (int i = tree.size() - 1; i >= 0; --i) {
    const auto& nd = tree.node(i);
    const int t = nd.time, x = nd.state;
    const double h2 = spec.h2(t, x), g2 = spec.g2(t, x), f2 = spec.f2(t, x);
    if (tree.terminal(i) && tree.forced_terminal()) {
      r.W_S[i] = h2;
      r.Q_S[i] = 1;
      r.V_S[i] = spec.h1(t, x);
    } else {
      r.Q_S[i] = h2 >= g2 - opt.tie_tol ? 1 : 0;
      r.W_S[i] = std::max(h2, g2);
      r.V_S[i] = r.Q_S[i] ? spec.h1(t, x) : spec.f1(t, x);
    }
    if (tree.terminal(i)) {
      r.W_C[i] = r.W[i] = r.W_S[i];
      r.V_C[i] = r.V[i] = r.V_S[i];
      r.Q_C[i] = r.Q_S[i];
      continue;
    }
    double ew = 0.0, ev = 0.0;
    tree.for_children(i, [&](int c) {
      ew += tree.node(c).prob * r.W[c];
      ev += tree.node(c).prob * r.V[c];
    });
    const double cont = spec.delta() * ew;
    r.cont[i] = cont;
    bool qc;
    if (opt.forced_qc && (*opt.forced_qc)[i] >= 0) {
      qc = (*opt.forced_qc)[i] == 1;
      r.W_C[i] = qc ? f2 : cont;
    } else {
      qc = f2 >= cont - opt.tie_tol;
      r.W_C[i] = std::max(f2, cont);
    }
    r.Q_C[i] = qc ? 1 : 0;
    r.V_C[i] = qc ? spec.g1(t, x) : spec.beta() * ev;
    const double p = P[i];
    r.W[i] = p * r.W_S[i] + (1 - p) * r.W_C[i];
    r.V[i] = p * r.V_S[i] + (1 - p) * r.V_C[i];
  }
  return r;
}

/// Follower tables (W, W_S, W_C, Q_S, Q_C are the meaningful fields).
inline RandomizedTables follower_value_randomized(const GameSpec& spec, const PathPolicy& P) {
  return evaluate_randomized(spec, P);
}

/// Leader tables (V, V_S, V_C) together with the follower response used.
inline RandomizedTables leader_value_randomized(const GameSpec& spec, const PathPolicy& P) {
  return evaluate_randomized(spec, P);
}

/// Path policy with node probabilities taken from a pure stopping time.
inline PathPolicy indicator_policy(const PureStoppingTime& tau) {
  std::vector<double> p(tau.indicators().begin(), tau.indicators().end());
  return PathPolicy(tau.tree_ptr(), std::move(p));
}

struct SweepPoint {
  std::vector<double> probs;  // free-node stop probabilities
  double value = 0.0;         // V_C at the root
  double w = 0.0;             // W_C at the root
  bool limit = false;         // one-sided limit rather than an attained value
};

struct SweepResult {
  TreePtr tree;
  std::vector<int> free_nodes;
  std::vector<SweepPoint> points;
  double supremum = 0.0;      // sup of V_C at the root
  double best_attained = 0.0;
  bool attained = true;
  double stop_value = 0.0;    // V_S at the root
  std::vector<std::vector<double>> discontinuities;
  SweepPoint argmax;
};

/// Sweeps the leader's continuation value V_C(root) over a uniform grid of
/// the free stop probabilities (non-root, non-terminal nodes) and adds the
/// one-sided limits at every follower indifference crossed between grid
/// neighbours. `attained` is false when the supremum is only a limit.
inline SweepResult randomized_precommit_sweep(const GameSpec& spec, int t, int x,
                                              int grid_size = 101, int max_dim = 3,
                                              std::size_t max_nodes = kDefaultMaxTreeNodes) {
  require_finite(spec, "randomized_precommit_sweep");
  if (grid_size < 2) throw SpecError("grid_size", "must be at least 2");
  SweepResult res;
  res.tree = PathTree::for_spec(spec, t, x, max_nodes);
  const PathTree& tree = *res.tree;
  for (int i = 1; i < tree.size(); ++i)
    if (!tree.terminal(i)) res.free_nodes.push_back(i);
  const int dim = static_cast<int>(res.free_nodes.size());
  if (dim > max_dim)
    throw BudgetError("sweep has " + std::to_string(dim) + " free probabilities (max " +
                      std::to_string(max_dim) + ")");
  std::size_t total = 1;
  for (int d = 0; d < dim; ++d) total *= static_cast<std::size_t>(grid_size);

  auto policy_at = [&](const std::vector<double>& probs) {
    std::vector<double> p(static_cast<std::size_t>(tree.size()), 0.0);
    for (int d = 0; d < dim; ++d) p[res.free_nodes[d]] = probs[d];
    return PathPolicy(res.tree, std::move(p));
  };
  auto eval = [&](const std::vector<double>& probs,
                  const std::vector<std::int8_t>* forced = nullptr) {
    RandomizedEvalOptions opt;
    opt.forced_qc = forced;
    return evaluate_randomized(spec, policy_at(probs), opt);
  };
  auto grid_value = [&](int k) { return static_cast<double>(k) / (grid_size - 1); };
  auto decode = [&](std::size_t idx) {
    std::vector<double> probs(static_cast<std::size_t>(dim));
    for (int d = dim - 1; d >= 0; --d) {
      probs[d] = grid_value(static_cast<int>(idx % grid_size));
      idx /= grid_size;
    }
    return probs;
  };

  std::vector<std::vector<std::uint8_t>> patterns(total);
  for (std::size_t idx = 0; idx < total; ++idx) {
    auto probs = decode(idx);
    auto r = eval(probs);
    patterns[idx] = r.Q_C;
    res.points.push_back({probs, r.V_C[0], r.W_C[0], false});
  }
  res.stop_value = evaluate_randomized(spec, policy_at(std::vector<double>(dim, 0.0))).V_S[0];

  // Limits at indifference crossings along each grid line.
  std::size_t stride = 1;
  for (int d = dim - 1; d >= 0; --d) {
    for (std::size_t idx = 0; idx < total; ++idx) {
      const std::size_t k = (idx / stride) % grid_size;
      if (k + 1 >= static_cast<std::size_t>(grid_size)) continue;
      const std::size_t nxt = idx + stride;
      if (patterns[idx] == patterns[nxt]) continue;
      const auto lo = decode(idx), hi = decode(nxt);
      const auto& pat_lo = patterns[idx];
      const auto& pat_hi = patterns[nxt];
      std::vector<std::int8_t> force_a(pat_lo.begin(), pat_lo.end());
      std::vector<std::int8_t> force_b(pat_hi.begin(), pat_hi.end());
      // Under a fixed follower pattern the values are affine along the line,
      // so each indifference point is the root of f2 - cont at a switching
      // node. The first root in the cell is the crossing.
      auto ra = eval(lo, &force_a), rb = eval(hi, &force_a);
      double at = hi[d];
      for (int i = 0; i < tree.size(); ++i) {
        if (tree.terminal(i) || pat_lo[i] == pat_hi[i]) continue;
        const auto& nd = tree.node(i);
        const double f2 = spec.f2(nd.time, nd.state);
        const double ga = f2 - ra.cont[i], gb = f2 - rb.cont[i];
        double root = hi[d];
        if (gb != ga) root = lo[d] - ga * (hi[d] - lo[d]) / (gb - ga);
        at = std::min(at, std::clamp(root, lo[d], hi[d]));
      }
      auto probs = lo;
      probs[d] = at;
      auto std_eval = eval(probs);
      auto lim_a = eval(probs, &force_a);
      auto lim_b = eval(probs, &force_b);
      res.points.push_back({probs, std_eval.V_C[0], std_eval.W_C[0], false});
      res.points.push_back({probs, lim_a.V_C[0], lim_a.W_C[0], true});
      res.points.push_back({probs, lim_b.V_C[0], lim_b.W_C[0], true});
      if (std::abs(lim_a.V_C[0] - lim_b.V_C[0]) > kValueTol) res.discontinuities.push_back(probs);
    }
    stride *= static_cast<std::size_t>(grid_size);
  }

  std::stable_sort(res.points.begin(), res.points.end(), [](const SweepPoint& a, const SweepPoint& b) {
    if (a.probs != b.probs) return a.probs < b.probs;
    return a.limit < b.limit;
  });
  res.points.erase(std::unique(res.points.begin(), res.points.end(),
                               [](const SweepPoint& a, const SweepPoint& b) {
                                 return a.probs == b.probs && a.limit == b.limit &&
                                        a.value == b.value && a.w == b.w;
                               }),
                   res.points.end());
  std::sort(res.discontinuities.begin(), res.discontinuities.end());
  res.discontinuities.erase(std::unique(res.discontinuities.begin(), res.discontinuities.end()),
                            res.discontinuities.end());
  res.supremum = -std::numeric_limits<double>::infinity();
  res.best_attained = -std::numeric_limits<double>::infinity();
  for (const auto& pt : res.points) {
    if (pt.value > res.supremum) {
      res.supremum = pt.value;
      res.argmax = pt;
    }
    if (!pt.limit) res.best_attained = std::max(res.best_attained, pt.value);
  }
  res.attained = res.best_attained >= res.supremum - kValueTol;
  return res;
}

/// CSV of a sweep: `prob,value,branch` in one dimension, otherwise
/// `prob_1,..,prob_k,value,branch`. Branch is "value" or "limit".
inline std::string sweep_csv(const SweepResult& s) {
  std::ostringstream os;
  const std::size_t dim = s.free_nodes.size();
  if (dim == 1) {
    os << "prob,";
  } else {
    for (std::size_t d = 0; d < dim; ++d) os << "prob_" << d + 1 << ",";
  }
  os << "value,branch\n";
  for (const auto& p : s.points) {
    for (double v : p.probs) os << shortest(v) << ",";
    os << shortest(p.value) << "," << (p.limit ? "limit" : "value") << "\n";
  }
  return os.str();
}

struct WCurvePoint {
  double w = 0.0;
  double v = 0.0;
};

/// Attained sweep points mapped to (W_C(root), V_C(root)), sorted by w.
inline std::vector<WCurvePoint> induced_w_curve(const SweepResult& s) {
  std::vector<WCurvePoint> out;
  for (const auto& p : s.points)
    if (!p.limit) out.push_back({p.w, p.value});
  std::stable_sort(out.begin(), out.end(),
                   [](const WCurvePoint& a, const WCurvePoint& b) { return a.w < b.w; });
  return out;
}

}  // namespace stackstop
