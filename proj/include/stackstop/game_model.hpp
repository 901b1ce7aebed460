#pragma once

// Game instances for leader/follower stopping games on a finite Markov chain.
//
// A GameSpec holds the chain, the six payoff functions and the two discount
// factors. Infinite-horizon specs carry one payoff row per function; finite
// horizon specs carry T+1 rows (one per time step).

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"

namespace stackstop {

using Vector = std::vector<double>;
using Matrix = std::vector<std::vector<double>>;

/// Raised for invalid game specs and policies. `field()` is a path such as
/// "transition[0]" or "payoffs.f1[2][1]".
class SpecError : public std::runtime_error {
 public:
  SpecError(std::string field, const std::string& message)
      : std::runtime_error(field.empty() ? message : field + ": " + message),
        field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

/// Raised when an enumeration or grid exceeds its configured budget.
class BudgetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class PayoffKind { f1 = 0, g1, h1, f2, g2, h2 };

inline constexpr std::array<PayoffKind, 6> kAllPayoffs = {
    PayoffKind::f1, PayoffKind::g1, PayoffKind::h1,
    PayoffKind::f2, PayoffKind::g2, PayoffKind::h2};

inline const char* payoff_name(PayoffKind k) {
  static constexpr const char* names[] = {"f1", "g1", "h1", "f2", "g2", "h2"};
  return names[static_cast<int>(k)];
}

// Absolute row-sum tolerance for the transition matrix.
inline constexpr double kRowSumTol = 1e-12;

class GameSpec {
 public:
  struct Payoffs {
    // Each table is [time][state]; infinite-horizon tables have a single row.
    Matrix f1, g1, h1, f2, g2, h2;

    Matrix& operator[](PayoffKind k) {
      switch (k) {
        case PayoffKind::f1: return f1;
        case PayoffKind::g1: return g1;
        case PayoffKind::h1: return h1;
        case PayoffKind::f2: return f2;
        case PayoffKind::g2: return g2;
        case PayoffKind::h2: return h2;
      }
      return f1;
    }
    const Matrix& operator[](PayoffKind k) const {
      return const_cast<Payoffs&>(*this)[k];
    }
    bool operator==(const Payoffs&) const = default;
  };

  GameSpec() = default;

  /// Validating constructor. Throws SpecError naming the offending field.
  GameSpec(Matrix transition, Payoffs payoffs, double beta, double delta,
           std::optional<int> horizon)
      : transition_(std::move(transition)),
        payoffs_(std::move(payoffs)),
        beta_(beta),
        delta_(delta),
        horizon_(horizon) {
    validate();
  }

  /// Infinite-horizon convenience constructor from state-only payoff vectors.
  static GameSpec infinite(Matrix transition, const Vector& f1, const Vector& g1,
                           const Vector& h1, const Vector& f2, const Vector& g2,
                           const Vector& h2, double beta, double delta) {
    Payoffs p{{f1}, {g1}, {h1}, {f2}, {g2}, {h2}};
    return GameSpec(std::move(transition), std::move(p), beta, delta, std::nullopt);
  }

  int n_states() const { return static_cast<int>(transition_.size()); }
  const Matrix& transition() const { return transition_; }
  double pi(int x, int y) const { return transition_[x][y]; }
  const Payoffs& payoffs() const { return payoffs_; }
  double beta() const { return beta_; }
  double delta() const { return delta_; }
  const std::optional<int>& horizon() const { return horizon_; }
  bool finite() const { return horizon_.has_value(); }

  /// Payoff at (t, x). For infinite-horizon specs `t` is ignored.
  double payoff(PayoffKind k, int t, int x) const {
    const Matrix& m = payoffs_[k];
    return m[finite() ? t : 0][x];
  }
  double f1(int t, int x) const { return payoff(PayoffKind::f1, t, x); }
  double g1(int t, int x) const { return payoff(PayoffKind::g1, t, x); }
  double h1(int t, int x) const { return payoff(PayoffKind::h1, t, x); }
  double f2(int t, int x) const { return payoff(PayoffKind::f2, t, x); }
  double g2(int t, int x) const { return payoff(PayoffKind::g2, t, x); }
  double h2(int t, int x) const { return payoff(PayoffKind::h2, t, x); }

  // State-only accessors for infinite-horizon specs.
  const Vector& f1() const { return payoffs_.f1.front(); }
  const Vector& g1() const { return payoffs_.g1.front(); }
  const Vector& h1() const { return payoffs_.h1.front(); }
  const Vector& f2() const { return payoffs_.f2.front(); }
  const Vector& g2() const { return payoffs_.g2.front(); }
  const Vector& h2() const { return payoffs_.h2.front(); }

  double max_abs_payoff() const {
    double m = 0.0;
    for (PayoffKind k : kAllPayoffs)
      for (const auto& row : payoffs_[k])
        for (double v : row) m = std::max(m, std::abs(v));
    return m;
  }

  /// Returns a copy with one payoff entry replaced (validated).
  GameSpec with_payoff(PayoffKind k, int t, int x, double value) const {
    Payoffs p = payoffs_;
    p[k][finite() ? t : 0][x] = value;
    return GameSpec(transition_, std::move(p), beta_, delta_, horizon_);
  }

  bool operator==(const GameSpec&) const = default;

 private:
  void validate() const {
    const std::size_t n = transition_.size();
    if (n == 0) throw SpecError("n_states", "must be a positive integer");
    for (std::size_t x = 0; x < n; ++x) {
      const std::string row = "transition[" + std::to_string(x) + "]";
      if (transition_[x].size() != n)
        throw SpecError(row, "expected " + std::to_string(n) + " entries, got " +
                                 std::to_string(transition_[x].size()));
      double sum = 0.0;
      for (std::size_t y = 0; y < n; ++y) {
        double v = transition_[x][y];
        if (!std::isfinite(v) || v < 0.0)
          throw SpecError(row + "[" + std::to_string(y) + "]",
                          "transition probabilities must be finite and nonnegative");
        sum += v;
      }
      if (std::abs(sum - 1.0) > kRowSumTol) {
        std::ostringstream os;
        os.precision(15);
        os << "row " << x << " sums to " << sum;
        throw SpecError(row, os.str());
      }
    }
    if (horizon_) {
      if (*horizon_ < 0) throw SpecError("horizon", "must be nonnegative");
      if (!(beta_ > 0.0 && beta_ <= 1.0))
        throw SpecError("beta", "finite-horizon discount must lie in (0,1]");
      if (!(delta_ > 0.0 && delta_ <= 1.0))
        throw SpecError("delta", "finite-horizon discount must lie in (0,1]");
    } else {
      if (!(beta_ > 0.0 && beta_ < 1.0))
        throw SpecError("beta", "infinite-horizon discount must lie in (0,1)");
      if (!(delta_ > 0.0 && delta_ < 1.0))
        throw SpecError("delta", "infinite-horizon discount must lie in (0,1)");
    }
    const std::size_t rows = horizon_ ? static_cast<std::size_t>(*horizon_) + 1 : 1;
    for (PayoffKind k : kAllPayoffs) {
      const std::string name = std::string("payoffs.") + payoff_name(k);
      const Matrix& m = payoffs_[k];
      if (m.size() != rows)
        throw SpecError(name, horizon_ ? "expected " + std::to_string(rows) +
                                             " time layers (horizon + 1)"
                                       : "expected a single state vector");
      for (std::size_t t = 0; t < rows; ++t) {
        if (m[t].size() != n)
          throw SpecError(name + (horizon_ ? "[" + std::to_string(t) + "]" : ""),
                          "expected " + std::to_string(n) + " entries");
        for (std::size_t x = 0; x < n; ++x)
          if (!std::isfinite(m[t][x]))
            throw SpecError(name + (horizon_ ? "[" + std::to_string(t) + "]" : "") +
                                "[" + std::to_string(x) + "]",
                            "payoff must be finite");
      }
    }
  }

  Matrix transition_;
  Payoffs payoffs_;
  double beta_ = 0.5;
  double delta_ = 0.5;
  std::optional<int> horizon_;
};

/// Per-state stopping probabilities, each in [0,1].
class MarkovPolicy {
 public:
  MarkovPolicy() = default;
  explicit MarkovPolicy(Vector probs) : probs_(std::move(probs)) {
    for (std::size_t i = 0; i < probs_.size(); ++i)
      if (!(probs_[i] >= 0.0 && probs_[i] <= 1.0))
        throw SpecError("probs[" + std::to_string(i) + "]",
                        "stopping probability must lie in [0,1]");
  }
  static MarkovPolicy constant(int n, double p) {
    return MarkovPolicy(Vector(static_cast<std::size_t>(n), p));
  }

  int size() const { return static_cast<int>(probs_.size()); }
  double operator[](int x) const { return probs_[x]; }
  const Vector& probs() const { return probs_; }
  bool operator==(const MarkovPolicy&) const = default;

 private:
  Vector probs_;
};

inline void require_dimension(const GameSpec& spec, const MarkovPolicy& p,
                              const char* what = "policy") {
  if (p.size() != spec.n_states())
    throw SpecError(what, "expected " + std::to_string(spec.n_states()) +
                              " stopping probabilities, got " +
                              std::to_string(p.size()));
}

/// Follower's Markov response: r once the leader has stopped, q while the
/// leader continues.
struct FollowerResponse {
  MarkovPolicy stop_branch;
  MarkovPolicy continue_branch;
};

inline void require_dimension(const GameSpec& spec, const FollowerResponse& f) {
  require_dimension(spec, f.stop_branch, "follower.stop");
  require_dimension(spec, f.continue_branch, "follower.continue");
}

inline void require_infinite(const GameSpec& spec, const char* op) {
  if (spec.finite())
    throw SpecError("horizon", std::string(op) + " requires an infinite-horizon spec");
}

inline void require_finite(const GameSpec& spec, const char* op) {
  if (!spec.finite())
    throw SpecError("horizon", std::string(op) + " requires a finite-horizon spec");
}

// ---------------------------------------------------------------------------
// JSON ingestion / serialization.

namespace detail {

inline double json_number(const nlohmann::json& j, const std::string& field) {
  if (!j.is_number()) throw SpecError(field, "expected a number");
  return j.get<double>();
}

inline Vector json_vector(const nlohmann::json& j, const std::string& field) {
  if (!j.is_array()) throw SpecError(field, "expected an array of numbers");
  Vector v;
  v.reserve(j.size());
  for (std::size_t i = 0; i < j.size(); ++i)
    v.push_back(json_number(j[i], field + "[" + std::to_string(i) + "]"));
  return v;
}

inline Matrix json_matrix(const nlohmann::json& j, const std::string& field) {
  if (!j.is_array()) throw SpecError(field, "expected an array of arrays");
  Matrix m;
  m.reserve(j.size());
  for (std::size_t i = 0; i < j.size(); ++i)
    m.push_back(json_vector(j[i], field + "[" + std::to_string(i) + "]"));
  return m;
}

}  // namespace detail

inline GameSpec spec_from_json(const nlohmann::json& doc) {
  using detail::json_matrix;
  using detail::json_number;
  using detail::json_vector;
  if (!doc.is_object()) throw SpecError("", "spec document must be a JSON object");
  static const char* known[] = {"n_states", "transition", "payoffs", "beta", "delta",
                                "horizon"};
  for (const auto& item : doc.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || item.key() == k;
    if (!ok) throw SpecError(item.key(), "unknown field");
  }
  for (const char* k : {"n_states", "transition", "payoffs", "beta", "delta"})
    if (!doc.contains(k)) throw SpecError(k, "missing required field");

  if (!doc["n_states"].is_number_integer() || doc["n_states"].get<long long>() <= 0)
    throw SpecError("n_states", "must be a positive integer");
  const auto n = static_cast<std::size_t>(doc["n_states"].get<long long>());

  std::optional<int> horizon;
  if (doc.contains("horizon") && !doc["horizon"].is_null()) {
    if (!doc["horizon"].is_number_integer() || doc["horizon"].get<long long>() < 0)
      throw SpecError("horizon", "must be a nonnegative integer or null");
    horizon = static_cast<int>(doc["horizon"].get<long long>());
  }

  Matrix transition = json_matrix(doc["transition"], "transition");
  if (transition.size() != n)
    throw SpecError("transition", "expected " + std::to_string(n) + " rows, got " +
                                      std::to_string(transition.size()));

  const auto& pj = doc["payoffs"];
  if (!pj.is_object()) throw SpecError("payoffs", "expected an object");
  for (const auto& item : pj.items()) {
    bool ok = false;
    for (PayoffKind k : kAllPayoffs) ok = ok || item.key() == payoff_name(k);
    if (!ok) throw SpecError("payoffs." + item.key(), "unknown payoff");
  }
  GameSpec::Payoffs payoffs;
  for (PayoffKind k : kAllPayoffs) {
    const std::string field = std::string("payoffs.") + payoff_name(k);
    if (!pj.contains(payoff_name(k))) throw SpecError(field, "missing payoff");
    const auto& arr = pj[payoff_name(k)];
    if (horizon) {
      // Time-indexed: (T+1) arrays of per-state values.
      if (!arr.is_array() || (!arr.empty() && !arr[0].is_array()))
        throw SpecError(field, "finite-horizon payoffs must be time-indexed arrays");
      payoffs[k] = json_matrix(arr, field);
    } else {
      if (arr.is_array() && !arr.empty() && arr[0].is_array())
        throw SpecError(field, "infinite-horizon payoffs must not be time-indexed");
      payoffs[k] = Matrix{json_vector(arr, field)};
    }
  }
  return GameSpec(std::move(transition), std::move(payoffs),
                  json_number(doc["beta"], "beta"), json_number(doc["delta"], "delta"),
                  horizon);
}

inline GameSpec parse_spec(std::string_view text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw SpecError("", std::string("malformed JSON: ") + e.what());
  }
  return spec_from_json(doc);
}

inline nlohmann::json spec_to_json(const GameSpec& spec) {
  nlohmann::json j;
  j["n_states"] = spec.n_states();
  j["transition"] = spec.transition();
  nlohmann::json pj = nlohmann::json::object();
  for (PayoffKind k : kAllPayoffs) {
    if (spec.finite())
      pj[payoff_name(k)] = spec.payoffs()[k];
    else
      pj[payoff_name(k)] = spec.payoffs()[k].front();
  }
  j["payoffs"] = pj;
  j["beta"] = spec.beta();
  j["delta"] = spec.delta();
  j["horizon"] = spec.horizon() ? nlohmann::json(*spec.horizon()) : nlohmann::json();
  return j;
}

inline std::string serialize_spec(const GameSpec& spec, int indent = -1) {
  return spec_to_json(spec).dump(indent);
}

/// FNV-1a 64-bit hash of the canonical serialization, as 16 hex digits.
inline std::string spec_hash(const GameSpec& spec) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : serialize_spec(spec)) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  static const char* hex = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, h >>= 4) out[i] = hex[h & 0xF];
  return out;
}

// ---------------------------------------------------------------------------
// Built-in instances.

enum class BuiltinExample { eg1_deterministic, nonexistence_K };

/// The deterministic two-period example: one state, T = 2, beta = delta = 1.
inline GameSpec eg1_deterministic() {
  GameSpec::Payoffs p;
  p.f1 = {{3}, {5}, {4}};
  p.g1 = {{2}, {4}, {4}};
  p.h1 = {{1}, {5}, {4}};
  p.f2 = {{3}, {3}, {4}};
  p.g2 = {{3}, {1}, {4}};
  p.h2 = {{2}, {2}, {4}};
  return GameSpec({{1.0}}, std::move(p), 1.0, 1.0, 2);
}

/// Three-state war-of-attrition instance on {a, b, c} with h = (f + g) / 2.
/// Pinned constants: K = 100, beta = delta = 0.9,
/// rows a: (1/2, 1/2, 0), b: (1/3, 1/3, 1/3), c: (1/3, 1/3, 1/3).
inline GameSpec nonexistence_K(double K = 100.0, double beta = 0.9, double delta = 0.9) {
  Vector f1{1, K, 1}, g1{K * K, K + 1, 2};
  Vector f2{K, 1, K * K}, g2{K + 1, 2, K * K + 1};
  Vector h1(3), h2(3);
  for (int x = 0; x < 3; ++x) {
    h1[x] = (f1[x] + g1[x]) / 2;
    h2[x] = (f2[x] + g2[x]) / 2;
  }
  const double third = 1.0 / 3.0;
  Matrix pi{{0.5, 0.5, 0.0}, {third, third, third}, {third, third, third}};
  return GameSpec::infinite(std::move(pi), f1, g1, h1, f2, g2, h2, beta, delta);
}

inline GameSpec builtin_example(BuiltinExample which) {
  switch (which) {
    case BuiltinExample::eg1_deterministic: return eg1_deterministic();
    case BuiltinExample::nonexistence_K: return nonexistence_K();
  }
  throw SpecError("name", "unknown builtin example");
}

inline GameSpec builtin_example(std::string_view name) {
  if (name == "eg1_deterministic" || name == "eg1") return eg1_deterministic();
  if (name == "nonexistence_K") return nonexistence_K();
  throw SpecError("name", "unknown builtin example '" + std::string(name) + "'");
}

}  // namespace stackstop
