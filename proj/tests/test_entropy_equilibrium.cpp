#include <gtest/gtest.h>

#include <cmath>

#include "stackstop/entropy_equilibrium.hpp"
#include "test_support.hpp"

using namespace stackstop;
using testing_support::random_infinite_spec;

namespace {

const double kLog2 = std::log(2.0);

GameSpec single_state() {
  return GameSpec::infinite({{1.0}}, {0.0}, {2.0}, {1.0}, {1.0}, {3.0}, {2.0}, 0.5, 0.5);
}

std::vector<GameSpec> random_specs() {
  std::vector<GameSpec> out;
  for (std::uint64_t seed = 1; seed <= 20; ++seed)
    out.push_back(random_infinite_spec(seed, 1 + static_cast<int>(seed % 4)));
  return out;
}

Vector random_policy(std::mt19937_64& rng, int n) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Vector p(n);
  for (auto& v : p) v = u(rng);
  return p;
}

// lambda log(e^(a / lambda) + e^(b / lambda)) and the weight on a, shifted by the max.
double soft_max(double a, double b, double lambda) {
  const double m = std::max(a, b);
  return m + lambda * std::log(std::exp((a - m) / lambda) + std::exp((b - m) / lambda));
}

double weight_on_first(double a, double b, double lambda) {
  const double m = std::max(a, b);
  const double ea = std::exp((a - m) / lambda), eb = std::exp((b - m) / lambda);
  return ea / (ea + eb);
}

// Plain loops over the regularized recursions in log-sum-exp form.
struct Oracle {
  Vector w_c, q, v_c;
};

Oracle oracle(const GameSpec& s, const Vector& p, double lambda) {
  const int n = s.n_states();
  Vector ws(n), r(n), vs(n);
  for (int x = 0; x < n; ++x) {
    const double g2 = s.g2()[x], h2 = s.h2()[x];
    ws[x] = soft_max(h2, g2, lambda);
    r[x] = weight_on_first(h2, g2, lambda);
    vs[x] = r[x] * s.h1()[x] + (1.0 - r[x]) * s.f1()[x];
  }
  Oracle o{Vector(n, 0.0), Vector(n), Vector(n, 0.0)};
  auto expect = [&](const Vector& stop, const Vector& cont, int x) {
    double e = 0.0;
    for (int y = 0; y < n; ++y) e += s.pi(x, y) * (p[y] * stop[y] + (1.0 - p[y]) * cont[y]);
    return e;
  };
  for (int k = 0; k < 5000; ++k) {
    Vector next(n);
    for (int x = 0; x < n; ++x) {
      const double f2 = s.f2()[x];
      next[x] = soft_max(f2, s.delta() * expect(ws, o.w_c, x), lambda);
    }
    o.w_c = next;
  }
  for (int x = 0; x < n; ++x)
    o.q[x] = weight_on_first(s.f2()[x], s.delta() * expect(ws, o.w_c, x), lambda);
  for (int k = 0; k < 5000; ++k) {
    Vector next(n);
    for (int x = 0; x < n; ++x)
      next[x] = o.q[x] * s.g1()[x] + (1.0 - o.q[x]) * s.beta() * expect(vs, o.v_c, x);
    o.v_c = next;
  }
  return o;
}

}  // namespace

TEST(Entropy, BoundariesAndSymmetry) {
  EXPECT_EQ(entropy(0.0), 0.0);
  EXPECT_EQ(entropy(1.0), 0.0);
  EXPECT_NEAR(entropy(0.5), kLog2, 1e-15);
  for (double q : {0.01, 0.2, 0.37, 0.49, 0.73}) EXPECT_NEAR(entropy(q), entropy(1.0 - q), 1e-15);
  EXPECT_THROW(entropy(-0.1), SpecError);
  EXPECT_THROW(entropy(1.5), SpecError);
}

TEST(Entropy, SoftplusAndSigmoidDoNotOverflow) {
  EXPECT_EQ(softplus(1e6), 1e6);
  EXPECT_EQ(softplus(-1e6), 0.0);
  EXPECT_NEAR(softplus(0.0), kLog2, 1e-15);
  EXPECT_EQ(sigmoid(1e6), 1.0);
  EXPECT_EQ(sigmoid(-1e6), 0.0);
  for (double z : {-3.0, -0.5, 0.0, 0.7, 4.0}) {
    EXPECT_NEAR(softplus(z), std::log(1.0 + std::exp(z)), 1e-14);
    EXPECT_NEAR(sigmoid(z) + sigmoid(-z), 1.0, 1e-15);
  }
}

TEST(StopResponse, FormulaCases) {
  GameSpec s = single_state();
  GameSpec tie = s.with_payoff(PayoffKind::g2, 0, 0, 2.0);
  auto a = stop_response_regularized(tie, 0.3);
  EXPECT_DOUBLE_EQ(a.r_star[0], 0.5);
  EXPECT_NEAR(a.w_lambda_s[0], 2.0 + 0.3 * kLog2, 1e-15);

  auto b = stop_response_regularized(s, 1.0);  // g2 - h2 = lambda
  EXPECT_NEAR(b.r_star[0], 1.0 / (1.0 + std::exp(1.0)), 1e-15);
  EXPECT_NEAR(b.r_star[0], 0.26894, 1e-5);

  auto c = stop_response_regularized(s, 1e-6);  // g2 > h2, lambda -> 0
  EXPECT_EQ(c.r_star[0], 0.0);
  EXPECT_DOUBLE_EQ(c.w_lambda_s[0], 3.0);

  EXPECT_THROW(stop_response_regularized(s, 0.0), SpecError);
  EXPECT_THROW(stop_response_regularized(s, -1.0), SpecError);
}

TEST(StopResponse, SoftplusBound) {
  for (const auto& s : random_specs()) {
    for (double lambda : {1.0, 0.1, 0.01, 0.001, 1e-7}) {
      auto sr = stop_response_regularized(s, lambda);
      for (int x = 0; x < s.n_states(); ++x) {
        const double gap = sr.w_lambda_s[x] - std::max(s.h2()[x], s.g2()[x]);
        EXPECT_GE(gap, 0.0);
        EXPECT_LE(gap, lambda * kLog2 * (1.0 + 1e-12));
        EXPECT_GE(sr.r_star[x], 0.0);
        EXPECT_LE(sr.r_star[x], 1.0);
      }
    }
  }
}

TEST(ContinueValue, SingleStateStoppingLeaderClosedForm) {
  GameSpec s = single_state();
  for (double lambda : {0.05, 0.5, 2.0}) {
    auto v = continue_value_regularized(s, MarkovPolicy({1.0}), lambda);
    const double ws = 2.0 + lambda * softplus(1.0 / lambda);
    EXPECT_NEAR(v.w_lambda_c[0], 1.0 + lambda * softplus((0.5 * ws - 1.0) / lambda), 1e-13);
  }
}

TEST(ContinueValue, HighEntropyLimit) {
  // As lambda grows, W / lambda solves u = softplus(delta E[p log 2 + (1 - p) u])
  // whatever the payoffs, and q* tends to sigmoid(-delta E[...]). The entropy
  // collected along the continuation keeps q* away from 1/2.
  std::mt19937_64 rng(5);
  for (const auto& s : random_specs()) {
    const int n = s.n_states();
    Vector p = random_policy(rng, n);
    Vector u(n, 0.0), arg(n);
    for (int k = 0; k < 5000; ++k) {
      for (int x = 0; x < n; ++x) {
        double e = 0.0;
        for (int y = 0; y < n; ++y) e += s.pi(x, y) * (p[y] * kLog2 + (1.0 - p[y]) * u[y]);
        arg[x] = s.delta() * e;
      }
      for (int x = 0; x < n; ++x) u[x] = std::log1p(std::exp(arg[x]));
    }
    auto v = continue_value_regularized(s, MarkovPolicy(p), 1e6);
    for (int x = 0; x < n; ++x) {
      EXPECT_NEAR(v.q_star[x], 1.0 / (1.0 + std::exp(arg[x])), 1e-5);
      EXPECT_NEAR(v.w_lambda_c[x] / 1e6, u[x], 1e-5);
    }
  }
  // Single state with a stopping leader: q* -> 1 / (1 + 2^delta).
  auto one = continue_value_regularized(single_state(), MarkovPolicy({1.0}), 1e6);
  EXPECT_NEAR(one.q_star[0], 1.0 / (1.0 + std::sqrt(2.0)), 1e-5);
}

TEST(ContinueValue, SmallLambdaApproachesUnregularized) {
  GameSpec s = single_state();
  for (double p : {0.0, 0.3, 0.7, 1.0}) {
    auto reg = continue_value_regularized(s, MarkovPolicy({p}), 0.01);
    auto exact = follower_value_markov(s, MarkovPolicy({p}));
    EXPECT_NEAR(reg.w_lambda_c[0], exact.w_c[0], 0.05) << "p = " << p;
    EXPECT_GE(reg.w_lambda_c[0], exact.w_c[0]);
  }
}

TEST(ContinueValue, MatchesOracleAndContracts) {
  std::mt19937_64 rng(11);
  for (const auto& s : random_specs()) {
    for (int k = 0; k < 5; ++k) {
      Vector p = random_policy(rng, s.n_states());
      for (double lambda : {0.5, 2.0}) {
        auto v = regularized_values(s, MarkovPolicy(p), lambda);
        Oracle o = oracle(s, p, lambda);
        const double scale = std::max(1.0, s.max_abs_payoff());
        for (int x = 0; x < s.n_states(); ++x) {
          EXPECT_NEAR(v.w_lambda_c[x], o.w_c[x], 1e-10 * scale);
          EXPECT_NEAR(v.q_star[x], o.q[x], 1e-10);
          EXPECT_NEAR(v.v_lambda_c[x], o.v_c[x], 1e-9 * scale);
          EXPECT_GT(v.q_star[x], 0.0);
          EXPECT_LT(v.q_star[x], 1.0);
        }
        EXPECT_LE(v.residual, 1e-12 * scale);
        for (std::size_t i = 2; i < v.diffs.size(); ++i) {
          if (v.diffs[i - 1] <= 1e-12 * scale) break;
          EXPECT_LE(v.diffs[i], (s.delta() + 1e-10) * v.diffs[i - 1]);
        }
      }
    }
  }
}

TEST(ContinueValue, SoftmaxLimitsAlongDecreasingLambda) {
  std::mt19937_64 rng(3);
  int checked = 0;
  for (const auto& s : random_specs()) {
    Vector p = random_policy(rng, s.n_states());
    auto exact = follower_value_markov(s, MarkovPolicy(p));
    bool tie_free = true;
    for (int x = 0; x < s.n_states(); ++x) {
      const double margin = s.f2()[x] - follower_continuation(s, p, exact.w_s, exact.w_c, x);
      tie_free = tie_free && std::abs(margin) > 0.05 && std::abs(s.h2()[x] - s.g2()[x]) > 0.05;
    }
    if (!tie_free) continue;
    ++checked;
    Vector prev_wc(s.n_states(), std::numeric_limits<double>::infinity());
    Vector prev_r(s.n_states(), 1.0);
    for (double lambda : {1.0, 0.1, 0.01, 0.001}) {
      auto v = continue_value_regularized(s, MarkovPolicy(p), lambda);
      for (int x = 0; x < s.n_states(); ++x) {
        EXPECT_GE(v.w_lambda_c[x], exact.w_c[x] - 1e-12);
        EXPECT_LE(v.w_lambda_c[x], prev_wc[x] + 1e-12);
        EXPECT_LE(v.w_lambda_c[x] - exact.w_c[x], lambda * kLog2 / (1.0 - s.delta()) + 1e-12);
        const double r_gap = std::abs(v.r_star[x] - (exact.q_s[x] ? 1.0 : 0.0));
        EXPECT_LE(r_gap, prev_r[x] + 1e-15);
        prev_r[x] = r_gap;
        prev_wc[x] = v.w_lambda_c[x];
        if (lambda == 0.001) {
          EXPECT_NEAR(v.q_star[x], exact.q_c[x] ? 1.0 : 0.0, 0.01);
          EXPECT_NEAR(v.r_star[x], exact.q_s[x] ? 1.0 : 0.0, 0.01);
        }
      }
    }
  }
  EXPECT_GE(checked, 5);
}

TEST(LeaderValue, ClosedFormCases) {
  // delta (f2 + lambda log 2) = f2 puts the follower at q* = 1/2 when p = 0.
  GameSpec half = GameSpec::infinite({{1.0}}, {0.0}, {2.0}, {0.0}, {kLog2}, {0.0}, {0.0}, 0.5, 0.5);
  auto v = regularized_values(half, MarkovPolicy({0.0}), 1.0);
  EXPECT_NEAR(v.q_star[0], 0.5, 1e-12);
  EXPECT_NEAR(v.v_lambda_c[0], 4.0 / 3.0, 1e-11);

  GameSpec equal = GameSpec::infinite({{0.5, 0.5}, {0.2, 0.8}}, {1.5, -2.0}, {0.0, 1.0},
                                      {1.5, -2.0}, {0.3, 0.1}, {4.0, 2.0}, {4.0, 2.0}, 0.8, 0.7);
  auto e = regularized_values(equal, MarkovPolicy({0.4, 0.9}), 0.2);
  EXPECT_EQ(e.v_lambda_s[0], 1.5);
  EXPECT_EQ(e.v_lambda_s[1], -2.0);

  GameSpec dominant = GameSpec::infinite({{0.5, 0.5}, {0.5, 0.5}}, {0.0, 0.0}, {3.0, -1.0},
                                         {0.0, 0.0}, {100.0, 100.0}, {1.0, 1.0}, {1.0, 1.0}, 0.9,
                                         0.9);
  auto d = regularized_values(dominant, MarkovPolicy({0.2, 0.6}), 0.01);
  EXPECT_NEAR(d.v_lambda_c[0], 3.0, 1e-12);
  EXPECT_NEAR(d.v_lambda_c[1], -1.0, 1e-12);
  EXPECT_LE(d.v_residual, 1e-12);
}

TEST(BestResponseMap, ThreeCases) {
  RegularizedValues v;
  v.v_lambda_s = {2.0, 1.0, 1.0};
  v.v_lambda_c = {1.0, 2.0, 1.0 + 1e-12};
  auto b = best_response_map(v, 1e-9);
  EXPECT_EQ(b[0], BestResponse::stop);
  EXPECT_EQ(b[1], BestResponse::cont);
  EXPECT_EQ(b[2], BestResponse::any);
  Vector r = regularized_residual(v, {1.0, 1.0, 0.37});
  EXPECT_EQ(r[0], 0.0);
  EXPECT_EQ(r[1], 1.0);
  EXPECT_LE(r[2], 1e-12);
}

TEST(EpsilonCertificate, Formula) {
  GameSpec s = GameSpec::infinite({{1.0}}, {0.0}, {0.0}, {0.0}, {0.0}, {0.0}, {0.0}, 0.9, 0.9);
  EXPECT_EQ(epsilon_certificate(s, 0.01), 0.01 * std::log(2.0) / (1.0 - 0.9));
  EXPECT_NEAR(epsilon_certificate(s, 0.01), 0.0693147, 1e-7);
  EXPECT_NEAR(epsilon_sufficient(s, 0.01), 0.1, 1e-15);
  EXPECT_LT(epsilon_certificate(s, 1e-12), 1e-10);
  GameSpec slow = GameSpec::infinite({{1.0}}, {0.0}, {0.0}, {0.0}, {0.0}, {0.0}, {0.0}, 0.9,
                                     1.0 - 1e-9);
  EXPECT_GT(epsilon_certificate(slow, 0.01), 1e6);
  EXPECT_THROW(epsilon_certificate(s, 0.0), SpecError);
}

TEST(FindEquilibrium, StopDominantGivesStopEverywhere) {
  // h1 dwarfs anything the continuation can deliver.
  GameSpec s = GameSpec::infinite({{0.5, 0.5}, {0.3, 0.7}}, {50.0, 50.0}, {0.0, 1.0},
                                  {50.0, 50.0}, {1.0, 2.0}, {0.0, 1.0}, {1.0, 3.0}, 0.9, 0.8);
  auto rep = find_equilibrium(s, 0.1);
  ASSERT_TRUE(rep.success) << rep.message;
  EXPECT_EQ(rep.p_star.probs(), Vector({1.0, 1.0}));
  EXPECT_EQ(rep.residual, 0.0);
}

TEST(FindEquilibrium, NonexistenceInstanceAtLambdaOne) {
  GameSpec k = nonexistence_K();
  auto rep = find_equilibrium(k, 1.0, 1e-6);
  ASSERT_TRUE(rep.success) << rep.message;
  EXPECT_EQ(rep.p_star.probs(), Vector({1.0, 0.0, 0.0}));
  // Independent check of the equilibrium conditions with the plain-loop oracle.
  Oracle o = oracle(k, rep.p_star.probs(), 1.0);
  const double r = 1.0 / (1.0 + std::exp(k.g2()[0] - k.h2()[0]));
  const double vs_a = r * k.h1()[0] + (1.0 - r) * k.f1()[0];
  EXPECT_GE(vs_a, o.v_c[0]);
  for (int x = 1; x < 3; ++x) {
    const double rx = 1.0 / (1.0 + std::exp(k.g2()[x] - k.h2()[x]));
    EXPECT_LE(rx * k.h1()[x] + (1.0 - rx) * k.f1()[x], o.v_c[x] + 1e-6);
  }
}

TEST(FindEquilibrium, ReturnedPolicySatisfiesPsiConditions) {
  std::vector<GameSpec> specs{nonexistence_K()};
  for (std::uint64_t seed = 1; seed <= 8; ++seed)
    specs.push_back(random_infinite_spec(seed, 1 + static_cast<int>(seed % 4)));
  for (const auto& s : specs) {
    for (double lambda : {1.0, 0.1, 0.01}) {
      const double tol = 1e-6;
      auto rep = find_equilibrium(s, lambda, tol);
      ASSERT_TRUE(rep.success) << rep.message;
      const auto& v = rep.values;
      for (int x = 0; x < s.n_states(); ++x) {
        const double p = rep.p_star.probs()[x];
        const double d = v.v_lambda_s[x] - v.v_lambda_c[x];
        if (p == 1.0) {
          EXPECT_GE(d, -tol);
        } else if (p == 0.0) {
          EXPECT_LE(d, tol);
        } else {
          EXPECT_LE(std::min(p, 1.0 - p) * std::abs(d), tol);
        }
      }
      EXPECT_EQ(rep.epsilon_certificate, lambda * std::log(2.0) / (1.0 - s.delta()));
    }
  }
}

TEST(FindEquilibrium, DeterministicAcrossThreadCounts) {
  GameSpec k = nonexistence_K();
  EquilibriumOptions one, four;
  four.threads = 4;
  auto a = find_equilibrium(k, 0.1, 1e-6, one);
  auto b = find_equilibrium(k, 0.1, 1e-6, one);
  auto c = find_equilibrium(k, 0.1, 1e-6, four);
  EXPECT_EQ(a.p_star.probs(), b.p_star.probs());
  EXPECT_EQ(a.p_star.probs(), c.p_star.probs());
  EXPECT_EQ(a.residual, c.residual);
}

TEST(FindEquilibrium, HighEntropyConvergesQuickly) {
  std::vector<GameSpec> specs{nonexistence_K()};
  for (std::uint64_t seed = 1; seed <= 8; ++seed)
    specs.push_back(random_infinite_spec(seed, 1 + static_cast<int>(seed % 4)));
  for (const auto& s : specs) {
    auto rep = find_equilibrium(s, 1e3, 1e-9);
    ASSERT_TRUE(rep.success) << rep.message;
    EXPECT_LT(rep.iterations, 100);
  }
}

TEST(FindEquilibrium, GridFallbackFindsInteriorEquilibrium) {
  GameSpec s = random_infinite_spec(8, 1);
  EquilibriumOptions opt;
  opt.max_iter = 0;
  opt.max_starts = 1;
  auto rep = find_equilibrium(s, 1.0, 1e-6, opt);
  ASSERT_TRUE(rep.success) << rep.message;
  EXPECT_EQ(rep.method, EquilibriumMethod::grid_multistart);
  EXPECT_GT(rep.p_star.probs()[0], 0.0);
  EXPECT_LT(rep.p_star.probs()[0], 1.0);
}

TEST(FindEquilibrium, ReportsFailureWhenBudgetIsTooSmall) {
  EquilibriumOptions opt;
  opt.max_iter = 0;
  opt.max_starts = 1;
  opt.grid_rounds = 0;
  auto rep = find_equilibrium(nonexistence_K(), 0.1, 1e-6, opt);
  EXPECT_FALSE(rep.success);
  EXPECT_GT(rep.residual, 1e-6);
  EXPECT_NE(rep.message.find("budget"), std::string::npos);
}
