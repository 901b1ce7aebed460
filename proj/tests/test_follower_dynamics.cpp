#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "stackstop/follower_dynamics.hpp"
#include "test_support.hpp"

using namespace stackstop;

namespace {

GameSpec single_state() {
  // f1, g1, h1, f2, g2, h2 with h2 = 2, g2 = 3, f2 = 1.
  return GameSpec::infinite({{1.0}}, {0}, {2}, {1}, {1}, {3}, {2}, 0.5, 0.5);
}

// Plain value iteration for W_C, written without the library's helpers.
Vector oracle_follower(const GameSpec& s, const Vector& p, int iters = 4000) {
  const int n = s.n_states();
  Vector ws(n), w(n, 0.0);
  for (int x = 0; x < n; ++x) ws[x] = std::max(s.h2()[x], s.g2()[x]);
  for (int k = 0; k < iters; ++k) {
    Vector next(n);
    for (int x = 0; x < n; ++x) {
      double e = 0;
      for (int y = 0; y < n; ++y) e += s.pi(x, y) * (p[y] * ws[y] + (1 - p[y]) * w[y]);
      next[x] = std::max(s.f2()[x], s.delta() * e);
    }
    w = next;
  }
  return w;
}

// Plain value iteration for V_C given the follower's stop pattern.
Vector oracle_leader(const GameSpec& s, const Vector& p, const std::vector<std::uint8_t>& q,
                     int iters = 4000) {
  const int n = s.n_states();
  Vector vs(n), v(n, 0.0);
  for (int x = 0; x < n; ++x) vs[x] = s.h2()[x] >= s.g2()[x] ? s.h1()[x] : s.f1()[x];
  for (int k = 0; k < iters; ++k) {
    Vector next(n);
    for (int x = 0; x < n; ++x) {
      if (q[x]) {
        next[x] = s.g1()[x];
        continue;
      }
      double e = 0;
      for (int y = 0; y < n; ++y) e += s.pi(x, y) * (p[y] * vs[y] + (1 - p[y]) * v[y]);
      next[x] = s.beta() * e;
    }
    v = next;
  }
  return v;
}

// Componentwise min and max of W_C over all pure Markov policies.
std::pair<Vector, Vector> brute_force_interval(const GameSpec& s) {
  const int n = s.n_states();
  Vector lo(n, 1e300), hi(n, -1e300);
  for (int mask = 0; mask < (1 << n); ++mask) {
    Vector p(n);
    for (int x = 0; x < n; ++x) p[x] = (mask >> x) & 1;
    Vector w = oracle_follower(s, p);
    for (int x = 0; x < n; ++x) {
      lo[x] = std::min(lo[x], w[x]);
      hi[x] = std::max(hi[x], w[x]);
    }
  }
  return {lo, hi};
}

MarkovPolicy random_policy(std::mt19937_64& rng, int n) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Vector p(n);
  for (auto& v : p) v = u(rng);
  return MarkovPolicy(p);
}

std::vector<GameSpec> random_specs() {
  std::vector<GameSpec> out;
  for (std::uint64_t seed = 1; seed <= 20; ++seed)
    out.push_back(testing_support::random_infinite_spec(seed, 1 + static_cast<int>(seed % 4)));
  return out;
}

void expect_contraction(const std::vector<double>& diffs, double modulus, double scale) {
  for (std::size_t k = 1; k < diffs.size(); ++k) {
    // Below a few ulps of the iterate the ratio only measures rounding noise.
    if (diffs[k - 1] <= 1e-12 * std::max(1.0, scale)) break;
    EXPECT_LE(diffs[k], (modulus + 1e-10) * diffs[k - 1]) << "step " << k;
  }
}

}  // namespace

TEST(StopValues, FormulasAndTies) {
  StopValues sv = stop_values(single_state());
  EXPECT_EQ(sv.w_s[0], 3.0);
  EXPECT_EQ(sv.v_s[0], 0.0);
  EXPECT_EQ(sv.q_s[0], 0);

  GameSpec tie = GameSpec::infinite({{1.0}}, {7}, {0}, {9}, {0}, {4}, {4}, 0.5, 0.5);
  StopValues st = stop_values(tie);
  EXPECT_EQ(st.w_s[0], 4.0);
  EXPECT_EQ(st.v_s[0], 9.0);
  EXPECT_EQ(st.q_s[0], 1);
}

TEST(StopValues, NonexistenceInstanceFollowerWaits) {
  GameSpec s = nonexistence_K();
  StopValues sv = stop_values(s);
  for (int x = 0; x < 3; ++x) {
    EXPECT_EQ(sv.w_s[x], s.g2()[x]);
    EXPECT_EQ(sv.v_s[x], s.f1()[x]);
  }
  EXPECT_THROW(stop_values(eg1_deterministic()), SpecError);
}

TEST(FollowerValue, SingleStateScalarOracle) {
  GameSpec s = single_state();
  StationaryValues v0 = follower_value_markov(s, MarkovPolicy({0.0}));
  EXPECT_NEAR(v0.w_c[0], oracle_follower(s, {0.0})[0], 1e-12);
  EXPECT_NEAR(v0.w_c[0], 1.0, 1e-12);
  EXPECT_EQ(v0.q_c[0], 1);

  StationaryValues v1 = follower_value_markov(s, MarkovPolicy({1.0}));
  EXPECT_NEAR(v1.w_c[0], oracle_follower(s, {1.0})[0], 1e-12);
  EXPECT_NEAR(v1.w_c[0], 1.5, 1e-12);
  EXPECT_EQ(v1.q_c[0], 0);
  EXPECT_NEAR(v1.w[0], 3.0, 1e-12);
}

TEST(FollowerValue, DominantStopPaysF2) {
  GameSpec s = GameSpec::infinite({{0.5, 0.5}, {0.2, 0.8}}, {0, 0}, {1, 2}, {0, 0}, {10, 12},
                                  {1, 2}, {0, 1}, 0.9, 0.9);
  StationaryValues v = leader_value_markov(s, MarkovPolicy({0.3, 0.7}));
  EXPECT_EQ(v.w_c, s.f2());
  EXPECT_EQ(v.v_c, s.g1());
  FeasibleInterval fi = feasible_interval(s);
  EXPECT_EQ(fi.lower, s.f2());
  EXPECT_EQ(fi.upper, s.f2());
}

TEST(FollowerValue, MatchesOracleOnRandomSpecs) {
  std::mt19937_64 rng(7);
  for (const GameSpec& s : random_specs()) {
    for (int k = 0; k < 10; ++k) {
      MarkovPolicy p = random_policy(rng, s.n_states());
      StationaryValues v = leader_value_markov(s, p);
      Vector w = oracle_follower(s, p.probs());
      for (int x = 0; x < s.n_states(); ++x) EXPECT_NEAR(v.w_c[x], w[x], 1e-9);
      Vector vc = oracle_leader(s, p.probs(), v.q_c);
      for (int x = 0; x < s.n_states(); ++x) EXPECT_NEAR(v.v_c[x], vc[x], 1e-9);
    }
  }
}

TEST(FollowerValue, ContractionAndResiduals) {
  std::mt19937_64 rng(11);
  for (const GameSpec& s : random_specs()) {
    MarkovPolicy p = random_policy(rng, s.n_states());
    StationaryValues v = leader_value_markov(s, p, 1e-12);
    expect_contraction(v.diffs, s.delta(), s.max_abs_payoff());
    EXPECT_LE(v.residual, 1e-12);
    EXPECT_LE(v.v_residual, 1e-10);
    Vector again = follower_markov_operator(s, p.probs(), v.w_s, v.w_c);
    EXPECT_LE(sup_norm_diff(again, v.w_c), 1e-12);
  }
}

TEST(LeaderValue, SingleStateContinuingFollowerGivesZero) {
  // Follower never stops early; the leader never stops; nothing is ever paid.
  GameSpec s = GameSpec::infinite({{1.0}}, {5}, {5}, {5}, {-1}, {3}, {2}, 0.5, 0.5);
  StationaryValues v = leader_value_markov(s, MarkovPolicy({0.0}));
  EXPECT_EQ(v.q_c[0], 0);
  EXPECT_NEAR(v.v_c[0], 0.0, 1e-15);
}

TEST(LeaderValue, NonexistenceCaseOne) {
  GameSpec s = nonexistence_K();
  MarkovPolicy p({0.0, 1.0, 0.0});
  StationaryValues v = leader_value_markov(s, p);
  EXPECT_NEAR(v.v[0], 10000.0, 1e-9);
  EXPECT_NEAR(v.v[2], 2.0, 1e-9);
  EXPECT_NEAR(v.v[1], 100.0, 1e-9);
  EXPECT_EQ(v.q_c[0], 1);
  EXPECT_EQ(v.q_c[1], 0);
  EXPECT_EQ(v.q_c[2], 1);
  // Continuing at b reaches a, b, c with probability 1/3 each.
  const double vcb = 0.9 * (10000.0 + 100.0 + 2.0) / 3.0;
  EXPECT_NEAR(v.v_c[1], vcb, 1e-9);
  Vector r = markov_equilibrium_residual(s, v, p);
  EXPECT_NEAR(r[1], vcb - 100.0, 1e-9);
  EXPECT_GT(r[1], 0.0);
}

TEST(FeasibleIntervalTest, SingleStateEndpoints) {
  GameSpec s = single_state();
  FeasibleInterval fi = feasible_interval(s);
  auto [lo, hi] = brute_force_interval(s);
  EXPECT_NEAR(fi.lower[0], 1.0, 1e-12);
  EXPECT_NEAR(fi.upper[0], 1.5, 1e-12);
  EXPECT_NEAR(fi.lower[0], lo[0], 1e-12);
  EXPECT_NEAR(fi.upper[0], hi[0], 1e-12);
  EXPECT_EQ(fi.lower_policy[0], 0.0);
  EXPECT_EQ(fi.upper_policy[0], 1.0);
}

TEST(FeasibleIntervalTest, MatchesPurePolicyBruteForce) {
  for (const GameSpec& s : random_specs()) {
    FeasibleInterval fi = feasible_interval(s);
    auto [lo, hi] = brute_force_interval(s);
    for (int x = 0; x < s.n_states(); ++x) {
      EXPECT_NEAR(fi.lower[x], lo[x], 1e-9);
      EXPECT_NEAR(fi.upper[x], hi[x], 1e-9);
      EXPECT_LE(fi.lower[x], fi.upper[x]);
    }
    Vector wl = oracle_follower(s, fi.lower_policy.probs());
    Vector wu = oracle_follower(s, fi.upper_policy.probs());
    EXPECT_LE(sup_norm_diff(wl, fi.lower), 1e-8);
    EXPECT_LE(sup_norm_diff(wu, fi.upper), 1e-8);
    expect_contraction(fi.lower_diffs, s.delta(), s.max_abs_payoff());
    expect_contraction(fi.upper_diffs, s.delta(), s.max_abs_payoff());
  }
}

TEST(FeasibleIntervalTest, RandomPoliciesStayInside) {
  std::mt19937_64 rng(3);
  for (const GameSpec& s : random_specs()) {
    FeasibleInterval fi = feasible_interval(s);
    for (int k = 0; k < 100; ++k) {
      StationaryValues v = follower_value_markov(s, random_policy(rng, s.n_states()));
      for (int x = 0; x < s.n_states(); ++x) EXPECT_TRUE(fi.contains(x, v.w_c[x], 1e-8));
    }
  }
}

TEST(FeasibleIntervalTest, NonexistenceUpperAtC) {
  FeasibleInterval fi = feasible_interval(nonexistence_K());
  EXPECT_NEAR(fi.upper[2], 10000.0, 1e-9);
}

TEST(FeasibleIntervalTest, UpperIterationIsMonotoneFromBelow) {
  for (const GameSpec& s : random_specs()) {
    FeasibleInterval fi = feasible_interval(s);
    Vector ws = stop_values(s).w_s;
    Vector w(s.n_states());
    for (int x = 0; x < s.n_states(); ++x) w[x] = fi.upper[x] - 3.0 - x;
    for (int k = 0; k < 60; ++k) {
      Vector next = upper_interval_operator(s, ws, w);
      for (int x = 0; x < s.n_states(); ++x) EXPECT_GE(next[x], w[x] - 1e-12);
      w = next;
    }
  }
}

TEST(EquilibriumResidual, NonnegativeAndZeroAtArgmax) {
  std::mt19937_64 rng(5);
  for (const GameSpec& s : random_specs()) {
    for (int k = 0; k < 10; ++k) {
      MarkovPolicy p = random_policy(rng, s.n_states());
      for (double r : markov_equilibrium_residual(s, p)) EXPECT_GE(r, -1e-12);
    }
    StationaryValues ones = markov_values(s, MarkovPolicy::constant(s.n_states(), 1.0));
    Vector r = markov_equilibrium_residual(s, ones, MarkovPolicy::constant(s.n_states(), 1.0));
    for (int x = 0; x < s.n_states(); ++x) {
      if (ones.v_s[x] >= ones.v_c[x]) { EXPECT_EQ(r[x], 0.0); }
    }
  }
}

TEST(Scan, GridOfTwoIsPureEnumeration) {
  GameSpec s = nonexistence_K();
  ScanOptions opt;
  opt.grid_per_state = 2;
  opt.keep_all = true;
  ScanResult res = nonexistence_scan(s, opt);
  ASSERT_EQ(res.points, 8u);
  double best = 1e300;
  for (int mask = 0; mask < 8; ++mask) {
    MarkovPolicy p({double((mask >> 2) & 1), double((mask >> 1) & 1), double(mask & 1)});
    Vector r = markov_equilibrium_residual(s, p);
    double m = *std::max_element(r.begin(), r.end());
    EXPECT_DOUBLE_EQ(res.residuals[mask], m);
    best = std::min(best, m);
  }
  EXPECT_EQ(res.min_residual, best);
  EXPECT_GT(res.min_residual, 0.5);
}

TEST(Scan, DominantStopHasZeroResidualAtOnes) {
  // The leader prefers stopping everywhere; the follower can only wait.
  GameSpec s = GameSpec::infinite({{0.5, 0.5}, {0.5, 0.5}}, {10, 10}, {0, 0}, {0, 0}, {0, 0},
                                  {1, 1}, {0, 0}, 0.9, 0.9);
  ScanOptions opt;
  opt.grid_per_state = 5;
  ScanResult res = nonexistence_scan(s, opt);
  EXPECT_EQ(res.min_residual, 0.0);
  Vector ones{1.0, 1.0};
  Vector r = markov_equilibrium_residual(s, MarkovPolicy(ones));
  EXPECT_EQ(r, Vector(2, 0.0));
}

TEST(Scan, ThreadCountDoesNotChangeResult) {
  GameSpec s = nonexistence_K();
  ScanOptions a, b;
  a.grid_per_state = b.grid_per_state = 9;
  a.threads = 1;
  b.threads = 4;
  ScanResult ra = nonexistence_scan(s, a), rb = nonexistence_scan(s, b);
  EXPECT_EQ(ra.min_residual, rb.min_residual);
  EXPECT_EQ(ra.argmin_index, rb.argmin_index);
  EXPECT_EQ(ra.argmin, rb.argmin);
  EXPECT_GT(ra.min_residual, 0.5);
}

TEST(Scan, CsvAndLimits) {
  GameSpec s = single_state();
  ScanOptions opt;
  opt.grid_per_state = 3;
  opt.keep_all = true;
  ScanResult res = nonexistence_scan(s, opt);
  std::string csv = scan_csv(res, 1);
  EXPECT_EQ(csv.rfind("p_1,residual_max\n0,", 0), 0u) << csv;
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);

  opt.grid_per_state = 1;
  EXPECT_THROW(nonexistence_scan(s, opt), SpecError);
  ScanOptions big;
  big.max_points = 100;
  EXPECT_THROW(nonexistence_scan(nonexistence_K(), big), BudgetError);
}

TEST(ScanPoint, LexicographicOrder) {
  EXPECT_EQ(scan_point(0, 2, 3), (Vector{0.0, 0.0}));
  EXPECT_EQ(scan_point(1, 2, 3), (Vector{0.0, 0.5}));
  EXPECT_EQ(scan_point(3, 2, 3), (Vector{0.5, 0.0}));
  EXPECT_EQ(scan_point(8, 2, 3), (Vector{1.0, 1.0}));
}
