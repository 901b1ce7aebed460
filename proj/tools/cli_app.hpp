#pragma once

// Subcommand dispatcher for the `stackstop` binary. Every command writes one
// JSON report of the form {"body": {...}, "timestamp": "..."}; the body is a
// pure function of the inputs and the resolved options.

#include <chrono>
#include <ctime>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "stackstop/stackstop.hpp"

namespace stackstop::cli {

using json = nlohmann::json;

enum ExitCode : int { kExitOk = 0, kExitInvalid = 1, kExitBudget = 2 };

/// A computation that ran to completion but missed its tolerance or budget.
class ToleranceFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CommonOptions {
  std::string spec;
  std::string out;
  std::string csv;
  bool pretty = false;
  int threads = 1;
};

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw SpecError("spec", "cannot read '" + path + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw SpecError("out", "cannot write '" + path + "'");
  out << text;
}

/// `builtin:<name>` or a path to a JSON spec.
inline GameSpec load_spec(const std::string& arg) {
  if (arg.empty()) throw SpecError("spec", "no spec given");
  constexpr std::string_view prefix = "builtin:";
  if (arg.rfind(prefix, 0) == 0) return builtin_example(arg.substr(prefix.size()));
  return parse_spec(read_file(arg));
}

inline std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

template <typename T>
json int_vector(const std::vector<T>& v) {
  json j = json::array();
  for (auto e : v) j.push_back(static_cast<int>(e));
  return j;
}

inline json node_keys(const PathTree& tree, const std::vector<int>& nodes) {
  json j = json::array();
  for (int i : nodes) j.push_back(tree.key(i));
  return j;
}

inline json stopping_time_json(const PureStoppingTime& s) {
  const int t = s.deterministic_time();
  return {{"stop_nodes", node_keys(s.tree(), s.stop_nodes())},
          {"stop_time", t < 0 ? json() : json(t)}};
}

/// Path of `csv` with `_x<state>` inserted before the extension.
inline std::string per_state_path(const std::string& csv, int x) {
  const auto dot = csv.find_last_of('.');
  const auto slash = csv.find_last_of('/');
  const std::string tag = "_x" + std::to_string(x);
  if (dot == std::string::npos || (slash != std::string::npos && dot < slash)) return csv + tag;
  return csv.substr(0, dot) + tag + csv.substr(dot);
}

// ---------------------------------------------------------------------------
// Policy files.
//
//   {"leader": [p_0, ..., p_{N-1}]}            stationary Markov policy
//   {"leader": [[p_t,x ...] for t = 0..T]}     time table (finite specs)
//   {"paths": [{"path": [x0, x1], "p": 0.5}], "fill": 0.0}   path policy
// Optional keys: "follower": {"stop": [...], "continue": [...]},
// "start_state", "leader_continues_first".

struct PolicyFile {
  LeaderPolicy leader;
  std::optional<FollowerResponse> follower;
  int start_state = 0;
  bool leader_continues_first = false;
};

inline PolicyFile parse_policy(const json& doc, const GameSpec& spec,
                               std::optional<int> start_override = std::nullopt) {
  if (!doc.is_object()) throw SpecError("policy", "policy document must be a JSON object");
  PolicyFile pf;
  if (doc.contains("start_state")) {
    if (!doc["start_state"].is_number_integer())
      throw SpecError("policy.start_state", "expected an integer");
    pf.start_state = doc["start_state"].get<int>();
  }
  if (start_override) pf.start_state = *start_override;
  if (pf.start_state < 0 || pf.start_state >= spec.n_states())
    throw SpecError("policy.start_state", "state index out of range");
  if (doc.contains("leader_continues_first")) {
    if (!doc["leader_continues_first"].is_boolean())
      throw SpecError("policy.leader_continues_first", "expected a boolean");
    pf.leader_continues_first = doc["leader_continues_first"].get<bool>();
  }
  const bool has_leader = doc.contains("leader"), has_paths = doc.contains("paths");
  if (has_leader == has_paths)
    throw SpecError("policy", "give exactly one of \"leader\" and \"paths\"");
  if (has_leader) {
    const json& l = doc["leader"];
    if (!l.is_array() || l.empty()) throw SpecError("policy.leader", "expected a non-empty array");
    if (l.front().is_array()) {
      if (!spec.finite()) throw SpecError("policy.leader", "time tables need a finite horizon");
      std::vector<Vector> table;
      for (std::size_t t = 0; t < l.size(); ++t)
        table.push_back(detail::json_vector(l[t], "policy.leader[" + std::to_string(t) + "]"));
      if (static_cast<int>(table.size()) != *spec.horizon() + 1)
        throw SpecError("policy.leader", "expected " + std::to_string(*spec.horizon() + 1) +
                                             " time layers");
      for (std::size_t t = 0; t < table.size(); ++t)
        if (static_cast<int>(table[t].size()) != spec.n_states())
          throw SpecError("policy.leader[" + std::to_string(t) + "]",
                          "expected " + std::to_string(spec.n_states()) + " states");
      pf.leader = PathPolicy::from_markov(PathTree::for_spec(spec, 0, pf.start_state), table);
    } else {
      MarkovPolicy m(detail::json_vector(l, "policy.leader"));
      require_dimension(spec, m, "policy.leader");
      pf.leader = std::move(m);
    }
  } else {
    if (!spec.finite()) throw SpecError("policy.paths", "path policies need a finite horizon");
    const json& ps = doc["paths"];
    if (!ps.is_array()) throw SpecError("policy.paths", "expected an array");
    double fill = 0.0;
    if (doc.contains("fill")) fill = detail::json_number(doc["fill"], "policy.fill");
    std::map<Path, double> probs;
    for (std::size_t k = 0; k < ps.size(); ++k) {
      const std::string field = "policy.paths[" + std::to_string(k) + "]";
      const json& e = ps[k];
      if (!e.is_object() || !e.contains("path") || !e.contains("p"))
        throw SpecError(field, "expected {\"path\": [...], \"p\": number}");
      Path path;
      for (const auto& s : e["path"]) {
        if (!s.is_number_integer()) throw SpecError(field + ".path", "expected integers");
        path.push_back(s.get<int>());
      }
      probs[path] = detail::json_number(e["p"], field + ".p");
    }
    pf.leader = PathPolicy::from_paths(PathTree::for_spec(spec, 0, pf.start_state), probs, fill);
  }
  if (doc.contains("follower")) {
    const json& f = doc["follower"];
    if (!f.is_object() || !f.contains("stop") || !f.contains("continue"))
      throw SpecError("policy.follower", "expected {\"stop\": [...], \"continue\": [...]}");
    FollowerResponse fr{MarkovPolicy(detail::json_vector(f["stop"], "policy.follower.stop")),
                        MarkovPolicy(detail::json_vector(f["continue"], "policy.follower.continue"))};
    require_dimension(spec, fr);
    pf.follower = std::move(fr);
  }
  return pf;
}

/// Leader policy from `--policy <file>` or an inline `--p` vector.
inline PolicyFile resolve_policy(const GameSpec& spec, const std::string& file,
                                 const std::vector<double>& inline_p,
                                 std::optional<int> start_override) {
  if (!file.empty() && !inline_p.empty())
    throw SpecError("policy", "give either --policy or --p, not both");
  if (!file.empty()) {
    json doc;
    try {
      doc = json::parse(read_file(file));
    } catch (const json::parse_error& e) {
      throw SpecError("policy", std::string("malformed JSON: ") + e.what());
    }
    return parse_policy(doc, spec, start_override);
  }
  if (inline_p.empty()) throw SpecError("policy", "a leader policy is required (--policy or --p)");
  return parse_policy(json{{"leader", inline_p}}, spec, start_override);
}

// ---------------------------------------------------------------------------
// Commands. Each fills `result` as it goes, so a report can still be written
// when a later stage fails.

struct Context {
  const GameSpec& spec;
  const CommonOptions& common;
  json& result;
  std::vector<std::string> csv_files;

  void emit_csv(const std::string& path, const std::string& text) {
    write_file(path, text);
    csv_files.push_back(path);
  }
};

struct ValidateOptions {
  std::string file;
};

inline void cmd_validate(Context& ctx, const ValidateOptions&) {
  const GameSpec& s = ctx.spec;
  ctx.result = {{"valid", true},
                {"n_states", s.n_states()},
                {"horizon", s.horizon() ? json(*s.horizon()) : json()},
                {"beta", s.beta()},
                {"delta", s.delta()},
                {"max_abs_payoff", s.max_abs_payoff()}};
}

struct FiniteOptions {
  std::size_t max_nodes = kDefaultMaxTreeNodes;
  std::uint64_t max_candidates = 1000000;
  std::uint64_t max_nash = 2000;
  std::uint64_t list_limit = 64;
  double tie_tol = kTieTol;
};

inline void cmd_finite(Context& ctx, const FiniteOptions& o) {
  const GameSpec& spec = ctx.spec;
  require_finite(spec, "finite");
  const int T = *spec.horizon(), n = spec.n_states();
  EnumBudget budget{o.max_nodes, o.max_candidates, o.max_nash};
  json& r = ctx.result;

  auto eq = pure_equilibrium(spec, o.tie_tol);
  r["equilibrium"] = {{"policy", eq.policy},
                      {"V", eq.values.V},
                      {"W", eq.values.W},
                      {"leader_value", eq.values.V.front()},
                      {"follower_value", eq.values.W.front()}};

  r["stopping_times"] = json::array();
  for (int x = 0; x < n; ++x) {
    auto tree = PathTree::for_spec(spec, 0, x, o.max_nodes);
    json entry = {{"state", x}};
    const std::uint64_t count = count_stopping_times(*tree, o.list_limit);
    entry["listed"] = count <= o.list_limit;
    entry["candidates"] = json::array();
    if (count <= o.list_limit) {
      for (const auto& tau : all_stopping_times(tree, o.list_limit)) {
        auto rho = follower_best_response_pure(spec, tau, o.tie_tol);
        auto ev = evaluate_pure(spec, tau, rho);
        entry["candidates"].push_back({{"tau", stopping_time_json(tau)},
                                       {"rho", stopping_time_json(rho)},
                                       {"leader_value", ev.leader_value},
                                       {"follower_value", ev.follower_value}});
      }
    }
    r["stopping_times"].push_back(entry);
  }

  r["precommitment"] = json::array();
  for (int t = 0; t < T; ++t)
    for (int x = 0; x < n; ++x) {
      auto pc = precommit_pure(spec, t, x, budget);
      json e = stopping_time_json(pc.tau);
      e["time"] = t;
      e["state"] = x;
      e["value"] = pc.value;
      e["candidates"] = pc.candidates;
      r["precommitment"].push_back(e);
    }

  auto tc = time_consistency_check(spec, budget);
  json entries = json::array();
  for (const auto& e : tc.entries) {
    auto opt_time = [](int t) { return t < 0 ? json() : json(t); };
    entries.push_back({{"time", e.time},
                       {"state", e.state},
                       {"path", e.path},
                       {"initial_state", e.initial_state},
                       {"initial_plan_value", e.initial_plan_value},
                       {"current_value", e.current_value},
                       {"initial_plan_stop_time", opt_time(e.initial_plan_stop_time)},
                       {"current_stop_time", opt_time(e.current_stop_time)}});
  }
  r["time_consistency"] = {{"consistent", tc.consistent()}, {"entries", entries}};

  r["nash"] = json::array();
  for (int x = 0; x < n; ++x) {
    json pairs = json::array();
    for (const auto& np : nash_enumerate(spec, 0, x, budget))
      pairs.push_back({{"tau", stopping_time_json(np.tau)},
                       {"rho", stopping_time_json(np.rho)},
                       {"leader_value", np.leader_value},
                       {"follower_value", np.follower_value}});
    r["nash"].push_back({{"state", x}, {"pairs", pairs}});
  }
}

struct FollowerOptions {
  std::string policy;
  std::vector<double> p;
  std::optional<int> start_state;
  std::optional<double> lambda;
  double tol = kDefaultSolverTol;
};

inline void cmd_follower(Context& ctx, const FollowerOptions& o) {
  const GameSpec& spec = ctx.spec;
  PolicyFile pf = resolve_policy(spec, o.policy, o.p, o.start_state);
  json& r = ctx.result;
  if (spec.finite()) {
    if (o.lambda) throw SpecError("lambda", "entropy regularization needs an infinite horizon");
    PathPolicy P = std::holds_alternative<PathPolicy>(pf.leader)
                       ? std::get<PathPolicy>(pf.leader)
                       : PathPolicy::from_stationary(PathTree::for_spec(spec, 0, pf.start_state),
                                                     std::get<MarkovPolicy>(pf.leader));
    auto tab = evaluate_randomized(spec, P);
    json nodes = json::object();
    for (int i = 0; i < P.tree().size(); ++i)
      nodes[P.tree().key(i)] = {{"p", P[i]},        {"W", tab.W[i]},     {"W_S", tab.W_S[i]},
                                {"W_C", tab.W_C[i]}, {"V", tab.V[i]},     {"V_S", tab.V_S[i]},
                                {"V_C", tab.V_C[i]}, {"Q_S", tab.Q_S[i]}, {"Q_C", tab.Q_C[i]}};
    r["start_state"] = pf.start_state;
    r["nodes"] = nodes;
    r["root"] = {{"W", tab.W[0]}, {"W_C", tab.W_C[0]}, {"V", tab.V[0]}, {"V_C", tab.V_C[0]}};
    return;
  }
  const auto* m = std::get_if<MarkovPolicy>(&pf.leader);
  if (!m) throw SpecError("policy", "infinite horizons need a stationary Markov leader policy");
  r["policy"] = m->probs();
  if (o.lambda) {
    auto v = regularized_values(spec, *m, *o.lambda);
    r["lambda"] = *o.lambda;
    r["r_star"] = v.r_star;
    r["q_star"] = v.q_star;
    r["w_lambda_s"] = v.w_lambda_s;
    r["w_lambda_c"] = v.w_lambda_c;
    r["v_lambda_s"] = v.v_lambda_s;
    r["v_lambda_c"] = v.v_lambda_c;
    r["w_lambda"] = v.w_lambda;
    r["v_lambda"] = v.v_lambda;
    r["residual"] = v.residual;
    r["v_residual"] = v.v_residual;
    r["iterations"] = v.iterations;
    r["equilibrium_residual"] = regularized_residual(v, m->probs());
    json psi = json::array();
    for (auto b : best_response_map(v, 1e-9)) psi.push_back(best_response_name(b));
    r["best_response"] = psi;
    return;
  }
  auto v = leader_value_markov(spec, *m, o.tol);
  r["w_s"] = v.w_s;
  r["q_s"] = int_vector(v.q_s);
  r["w_c"] = v.w_c;
  r["q_c"] = int_vector(v.q_c);
  r["w"] = v.w;
  r["v_s"] = v.v_s;
  r["v_c"] = v.v_c;
  r["v"] = v.v;
  r["residual"] = v.residual;
  r["v_residual"] = v.v_residual;
  r["iterations"] = v.iterations;
  r["equilibrium_residual"] = markov_equilibrium_residual(spec, v, *m);
}

struct IntervalOptions {
  double tol = kDefaultSolverTol;
};

inline void cmd_interval(Context& ctx, const IntervalOptions& o) {
  const GameSpec& spec = ctx.spec;
  json& r = ctx.result;
  if (spec.finite()) {
    auto [lo, hi] = finite_feasible_intervals(spec);
    r["lower"] = lo;
    r["upper"] = hi;
    return;
  }
  auto fi = feasible_interval(spec, o.tol);
  r["lower"] = fi.lower;
  r["upper"] = fi.upper;
  r["lower_policy"] = fi.lower_policy.probs();
  r["upper_policy"] = fi.upper_policy.probs();
  r["lower_iterations"] = fi.lower_iterations;
  r["upper_iterations"] = fi.upper_iterations;
}

struct PrecommitCliOptions {
  int grid_points = 201;
  double tol = 1e-9;
  std::size_t budget = 4096;
  int max_iter = 100000;
  int depth = 0;
};

inline void cmd_precommit(Context& ctx, const PrecommitCliOptions& o) {
  const GameSpec& spec = ctx.spec;
  json& r = ctx.result;
  PrecommitOptions po;
  po.grid_points = o.grid_points;
  po.tol = o.tol;
  po.budget = o.budget;
  po.threads = ctx.common.threads;
  po.max_iter = o.max_iter;
  VCurve curve = solve_v(spec, po);
  r["iterations"] = curve.iterations;
  r["residual"] = curve.residual;
  r["attainment_note"] = "attainment is diagnosed from the grid and one-sided limits";
  auto entries = precommit_value(curve, o.tol);
  r["states"] = json::array();
  for (std::size_t x = 0; x < entries.size(); ++x) {
    const auto& e = entries[x];
    json s = {{"state", x},
              {"value", e.value},
              {"stop_value", e.stop_value},
              {"best_continuation", e.best_continuation},
              {"argmax_w", e.argmax_w},
              {"stop_now", e.stop_now},
              {"at_limit", e.at_limit},
              {"attained", e.attained}};
    if (o.depth > 0 && !e.stop_now) {
      auto ex = extract_policy(spec, curve, static_cast<int>(x), e.argmax_node, o.depth);
      s["extracted"] = {{"depth", o.depth},
                        {"target_w", ex.target_w},
                        {"target_v", ex.target_v},
                        {"leader_tail", ex.leader_tail},
                        {"follower_tail", ex.follower_tail},
                        {"snap_error", ex.snap_error},
                        {"nodes", ex.policy.tree().size()}};
    }
    r["states"].push_back(s);
  }
  if (!ctx.common.csv.empty()) {
    const int n = spec.n_states();
    for (int x = 0; x < n; ++x)
      ctx.emit_csv(n == 1 ? ctx.common.csv : per_state_path(ctx.common.csv, x),
                   vcurve_csv(curve, x));
  }
}

struct EntropyOptions {
  double lambda = 0.1;
  double tol = 1e-9;
  std::vector<double> sweep;
  EquilibriumOptions eq;
};

inline json equilibrium_json(const EquilibriumReport& rep, double lambda) {
  json psi = json::array();
  for (auto b : best_response_map(rep.values, 1e-9)) psi.push_back(best_response_name(b));
  return {{"lambda", lambda},
          {"p_star", rep.p_star.probs()},
          {"residual", rep.residual},
          {"residuals", rep.residuals},
          {"method", method_name(rep.method)},
          {"epsilon_certificate", rep.epsilon_certificate},
          {"epsilon_sufficient", rep.epsilon_sufficient},
          {"success", rep.success},
          {"iterations", rep.iterations},
          {"starts", rep.starts},
          {"evaluations", rep.evaluations},
          {"message", rep.message},
          {"q_star", rep.values.q_star},
          {"r_star", rep.values.r_star},
          {"best_response", psi}};
}

inline void cmd_entropy(Context& ctx, EntropyOptions o) {
  const GameSpec& spec = ctx.spec;
  o.eq.threads = ctx.common.threads;
  json& r = ctx.result;
  const std::vector<double> lambdas = o.sweep.empty() ? std::vector<double>{o.lambda} : o.sweep;
  r["equilibria"] = json::array();
  std::ostringstream csv;
  csv << "lambda";
  for (int x = 0; x < spec.n_states(); ++x) csv << ",p_" << x + 1;
  csv << ",residual,epsilon\n";
  bool all_ok = true;
  for (double lam : lambdas) {
    auto rep = find_equilibrium(spec, lam, o.tol, o.eq);
    r["equilibria"].push_back(equilibrium_json(rep, lam));
    all_ok = all_ok && rep.success;
    csv << shortest(lam);
    for (double p : rep.p_star.probs()) csv << ',' << shortest(p);
    csv << ',' << shortest(rep.residual) << ',' << shortest(rep.epsilon_certificate) << '\n';
  }
  if (!ctx.common.csv.empty()) ctx.emit_csv(ctx.common.csv, csv.str());
  if (!all_ok) throw ToleranceFailure("no candidate reached the residual tolerance");
}

struct ScanCliOptions {
  int grid = 51;
  double tol = 1e-10;
  std::size_t max_points = 20'000'000;
};

inline void cmd_scan(Context& ctx, const ScanCliOptions& o) {
  ScanOptions so;
  so.grid_per_state = o.grid;
  so.tol = o.tol;
  so.threads = ctx.common.threads;
  so.max_points = o.max_points;
  so.keep_all = !ctx.common.csv.empty();
  auto res = nonexistence_scan(ctx.spec, so);
  ctx.result = {{"min_residual", res.min_residual},
                {"argmin", res.argmin},
                {"argmin_index", res.argmin_index},
                {"grid_per_state", res.grid_per_state},
                {"points", res.points},
                {"tol", res.tol},
                {"positive", res.min_residual > 0.0}};
  if (so.keep_all) ctx.emit_csv(ctx.common.csv, scan_csv(res, ctx.spec.n_states()));
}

struct SimulateOptions {
  std::string policy;
  std::vector<double> p;
  std::optional<int> start_state;
  std::size_t paths = 100000;
  std::uint64_t seed = 1;
  std::optional<double> lambda;
  int t_max = 0;
  double z_limit = 4.0;
};

inline json estimate_json(const SimEstimate& e) {
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(); };
  return {{"mean_j1", e.mean_j1},
          {"mean_j2", e.mean_j2},
          {"std_err_j1", e.std_err_j1},
          {"std_err_j2", e.std_err_j2},
          {"mean_j2_lambda", opt(e.mean_j2_lambda)},
          {"std_err_j2_lambda", opt(e.std_err_j2_lambda)},
          {"n_paths", e.n_paths},
          {"t_max", e.t_max},
          {"truncation_bias_bound", e.truncation_bias_bound},
          {"truncated_fraction", e.truncated_fraction},
          {"mean_stop_time", e.mean_stop_time}};
}

inline void cmd_simulate(Context& ctx, const SimulateOptions& o) {
  const GameSpec& spec = ctx.spec;
  PolicyFile pf = resolve_policy(spec, o.policy, o.p, o.start_state);
  SimConfig cfg;
  cfg.n_paths = o.paths;
  cfg.seed = o.seed;
  cfg.t_max = o.t_max;
  cfg.start_state = pf.start_state;
  cfg.lambda = o.lambda;
  cfg.follower = pf.follower;
  cfg.leader_continues_first = pf.leader_continues_first;
  cfg.threads = ctx.common.threads;
  json& r = ctx.result;
  r["start_state"] = pf.start_state;
  r["leader_continues_first"] = pf.leader_continues_first;
  r["follower"] = pf.follower ? "explicit" : (o.lambda ? "regularized" : "best_response");
  if (spec.finite() && pf.follower) {
    r["estimate"] = estimate_json(simulate(spec, pf.leader, cfg));
    r["analytic"] = nullptr;
    return;
  }
  auto rep = crosscheck(spec, pf.leader, cfg, o.z_limit);
  r["estimate"] = estimate_json(rep.estimate);
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(); };
  r["analytic"] = {{"j1", rep.analytic_j1},
                   {"j2", rep.analytic_j2},
                   {"j2_lambda", opt(rep.analytic_j2_lambda)},
                   {"z_j1", rep.z_j1},
                   {"z_j2", rep.z_j2},
                   {"z_j2_lambda", opt(rep.z_j2_lambda)},
                   {"z_limit", rep.z_limit},
                   {"flagged", rep.flagged}};
  if (rep.flagged)
    throw ToleranceFailure("simulated values differ from the analytic values beyond " +
                           std::to_string(o.z_limit) + " standard errors plus truncation bias");
}

struct SweepOptions {
  int grid = 101;
  int time = 0;
  int state = 0;
  int max_dim = 3;
};

inline void cmd_sweep(Context& ctx, const SweepOptions& o) {
  const GameSpec& spec = ctx.spec;
  auto s = randomized_precommit_sweep(spec, o.time, o.state, o.grid, o.max_dim);
  json& r = ctx.result;
  r["free_nodes"] = node_keys(*s.tree, s.free_nodes);
  r["supremum"] = s.supremum;
  r["best_attained"] = s.best_attained;
  r["attained"] = s.attained;
  r["stop_value"] = s.stop_value;
  r["argmax"] = {{"probs", s.argmax.probs}, {"value", s.argmax.value},
                 {"w", s.argmax.w}, {"limit", s.argmax.limit}};
  r["discontinuities"] = s.discontinuities;
  r["points"] = s.points.size();
  if (s.free_nodes.size() == 1) {
    json curve = json::array();
    for (const auto& p : induced_w_curve(s)) curve.push_back({{"w", p.w}, {"v", p.v}});
    r["w_curve"] = curve;
  }
  if (!ctx.common.csv.empty()) ctx.emit_csv(ctx.common.csv, sweep_csv(s));
}

// ---------------------------------------------------------------------------
// Dispatch.

inline json body_header(const std::string& command, const json& options) {
  return {{"command", command}, {"options", options}, {"spec_hash", nullptr}};
}

/// Runs one command and writes its report. Returns the exit code.
inline int execute(const std::string& command, const CommonOptions& common, const json& options,
                   const std::function<void(Context&)>& fn, std::ostream& out,
                   std::ostream& err) {
  json body = body_header(command, options);
  json result = json::object();
  int code = kExitOk;
  std::string status = "ok", message;
  std::vector<std::string> csv_files;
  try {
    GameSpec spec = load_spec(common.spec);
    body["spec_hash"] = spec_hash(spec);
    Context ctx{spec, common, result, {}};
    try {
      fn(ctx);
    } catch (...) {
      csv_files = ctx.csv_files;
      throw;
    }
    csv_files = ctx.csv_files;
  } catch (const SpecError& e) {
    code = kExitInvalid;
    status = "validation_error";
    message = std::string("SpecError: ") + e.what();
    result["error_field"] = e.field();
  } catch (const BudgetError& e) {
    code = kExitBudget;
    status = "budget_exceeded";
    message = std::string("BudgetError: ") + e.what();
  } catch (const EmptyAdmissibleSet& e) {
    code = kExitBudget;
    status = "budget_exceeded";
    message = std::string("EmptyAdmissibleSet: ") + e.what();
  } catch (const SolverError& e) {
    code = kExitBudget;
    status = "tolerance_not_met";
    message = std::string("SolverError: ") + e.what();
  } catch (const ToleranceFailure& e) {
    code = kExitBudget;
    status = "tolerance_not_met";
    message = e.what();
  }
  body["status"] = status;
  body["exit_code"] = code;
  body["message"] = message;
  body["csv_files"] = csv_files;
  body["result"] = result;
  json report = {{"body", body}, {"timestamp", utc_timestamp()}};
  const std::string text = report.dump(common.pretty ? 2 : -1) + "\n";
  if (!message.empty()) err << "stackstop " << command << ": " << message << "\n";
  if (common.out.empty()) {
    out << text;
  } else {
    try {
      write_file(common.out, text);
    } catch (const SpecError& e) {
      err << "stackstop " << command << ": " << e.what() << "\n";
      return kExitInvalid;
    }
  }
  return code;
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout,
               std::ostream& err = std::cerr) {
  CLI::App app{"Solver for leader/follower stopping games on finite Markov chains"};
  app.name("stackstop");
  app.require_subcommand(1);

  CommonOptions common;
  auto add_common = [&](CLI::App* sub, bool spec_required = true) {
    auto* opt = sub->add_option("--spec", common.spec,
                                "Spec JSON file, or builtin:<name> (eg1, nonexistence_K)");
    if (spec_required) opt->required();
    sub->add_option("--out", common.out, "Write the JSON report here instead of stdout");
    sub->add_flag("--pretty", common.pretty, "Indent the JSON report");
    sub->add_option("--threads", common.threads, "Worker threads (0 = hardware)")
        ->check(CLI::NonNegativeNumber);
  };
  auto add_csv = [&](CLI::App* sub, const std::string& what) {
    sub->add_option("--csv", common.csv, what);
  };
  json options;
  std::function<void(Context&)> job;
  std::string command;

  ValidateOptions vo;
  auto* validate = app.add_subcommand("validate", "Check a spec and print its hash");
  validate->add_option("file", vo.file, "Spec JSON file");
  add_common(validate, false);

  FiniteOptions fo;
  auto* finite = app.add_subcommand(
      "finite", "Pure stopping times, precommitment, time consistency, equilibrium and Nash pairs");
  add_common(finite);
  finite->add_option("--max-nodes", fo.max_nodes, "Path tree node budget")->capture_default_str();
  finite->add_option("--max-candidates", fo.max_candidates, "Stopping-time enumeration budget")
      ->capture_default_str();
  finite->add_option("--max-nash", fo.max_nash, "Stopping times per side in Nash enumeration")
      ->capture_default_str();
  finite->add_option("--list-limit", fo.list_limit,
                     "List every stopping time and its best response up to this many")
      ->capture_default_str();
  finite->add_option("--tie-tol", fo.tie_tol, "Tie tolerance of stop indicators")
      ->capture_default_str();

  FollowerOptions flo;
  auto* follower = app.add_subcommand("follower", "Follower and leader values of a leader policy");
  add_common(follower);
  follower->add_option("--policy", flo.policy, "Policy JSON file");
  follower->add_option("--p", flo.p, "Inline stationary leader policy")->delimiter(',');
  follower->add_option("--start-state", flo.start_state, "Root state for path policies");
  follower->add_option("--lambda", flo.lambda, "Entropy weight of the follower");
  follower->add_option("--tol", flo.tol, "Value iteration tolerance")->capture_default_str();

  IntervalOptions io;
  auto* interval = app.add_subcommand("interval", "Feasible follower continuation values");
  add_common(interval);
  interval->add_option("--tol", io.tol, "Value iteration tolerance")->capture_default_str();

  PrecommitCliOptions po;
  auto* precommit = app.add_subcommand("precommit", "Leader precommitment values via v(x, w)");
  add_common(precommit);
  add_csv(precommit, "Write w,v curves (one file per state when N > 1)");
  precommit->add_option("--grid-points", po.grid_points, "w-grid points per state")
      ->capture_default_str();
  precommit->add_option("--tol", po.tol, "Convergence tolerance")->capture_default_str();
  precommit->add_option("--budget", po.budget, "Allocation candidates per grid point")
      ->capture_default_str();
  precommit->add_option("--max-iter", po.max_iter, "Iteration cap")->capture_default_str();
  precommit->add_option("--depth", po.depth, "Unroll an attaining policy to this depth")
      ->capture_default_str();

  EntropyOptions eo;
  auto* entropy = app.add_subcommand("entropy-eq", "Entropy-regularized Markov equilibrium");
  add_common(entropy);
  add_csv(entropy, "Write lambda,p_1..N,residual,epsilon");
  entropy->add_option("--lambda", eo.lambda, "Entropy weight")->capture_default_str();
  entropy->add_option("--tol", eo.tol, "Residual tolerance")->capture_default_str();
  entropy->add_option("--sweep", eo.sweep, "Comma-separated lambda values")->delimiter(',');
  entropy->add_option("--alpha", eo.eq.alpha, "Damping of the selection step")
      ->capture_default_str();
  entropy->add_option("--max-iter", eo.eq.max_iter, "Selection steps per start")
      ->capture_default_str();
  entropy->add_option("--max-starts", eo.eq.max_starts, "Multi-start cap")->capture_default_str();
  entropy->add_option("--grid-points", eo.eq.grid_points, "Fallback grid points per state")
      ->capture_default_str();

  ScanCliOptions so;
  auto* scan = app.add_subcommand("scan-noneq", "Grid scan of the Markov equilibrium residual");
  add_common(scan);
  add_csv(scan, "Write p_1..p_N,residual_max for every grid point");
  scan->add_option("--grid", so.grid, "Points per state")->capture_default_str();
  scan->add_option("--tol", so.tol, "Value solver tolerance")->capture_default_str();
  scan->add_option("--max-points", so.max_points, "Grid budget")->capture_default_str();

  SimulateOptions mo;
  auto* sim = app.add_subcommand("simulate", "Monte Carlo estimate and analytic crosscheck");
  add_common(sim);
  sim->add_option("--policy", mo.policy, "Policy JSON file");
  sim->add_option("--p", mo.p, "Inline stationary leader policy")->delimiter(',');
  sim->add_option("--start-state", mo.start_state, "Initial state");
  sim->add_option("--paths", mo.paths, "Number of paths")->capture_default_str();
  sim->add_option("--seed", mo.seed, "Philox key")->capture_default_str();
  sim->add_option("--lambda", mo.lambda, "Entropy weight of the follower");
  sim->add_option("--t-max", mo.t_max, "Truncation for infinite horizons (0 = automatic)")
      ->capture_default_str();
  sim->add_option("--z", mo.z_limit, "Flag errors beyond this many standard errors")
      ->capture_default_str();

  SweepOptions wo;
  auto* sweep = app.add_subcommand("sweep", "Leader continuation value over randomized policies");
  add_common(sweep);
  add_csv(sweep, "Write prob,value,branch");
  sweep->add_option("--grid", wo.grid, "Grid points per free probability")->capture_default_str();
  sweep->add_option("--time", wo.time, "Root time")->capture_default_str();
  sweep->add_option("--state", wo.state, "Root state")->capture_default_str();
  sweep->add_option("--max-dim", wo.max_dim, "Largest number of free probabilities")
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e, out, err);
    return rc == 0 ? kExitOk : kExitInvalid;
  }

  auto common_json = [&] {
    return json{{"spec", common.spec},
                {"out", common.out},
                {"csv", common.csv},
                {"pretty", common.pretty},
                {"threads", common.threads}};
  };
  auto opt_json = [](const auto& v) { return v ? json(*v) : json(); };

  if (validate->parsed()) {
    if (!vo.file.empty() && !common.spec.empty() && vo.file != common.spec) {
      err << "stackstop validate: give the spec once\n";
      return kExitInvalid;
    }
    if (!vo.file.empty()) common.spec = vo.file;
    return execute("validate", common, common_json(),
                   [&](Context& c) { cmd_validate(c, vo); }, out, err);
  }
  if (finite->parsed()) {
    json o = common_json();
    o.update({{"max_nodes", fo.max_nodes},
              {"max_candidates", fo.max_candidates},
              {"max_nash", fo.max_nash},
              {"list_limit", fo.list_limit},
              {"tie_tol", fo.tie_tol}});
    return execute("finite", common, o, [&](Context& c) { cmd_finite(c, fo); }, out, err);
  }
  if (follower->parsed()) {
    json o = common_json();
    o.update({{"policy", flo.policy},
              {"p", flo.p},
              {"start_state", opt_json(flo.start_state)},
              {"lambda", opt_json(flo.lambda)},
              {"tol", flo.tol}});
    return execute("follower", common, o, [&](Context& c) { cmd_follower(c, flo); }, out, err);
  }
  if (interval->parsed()) {
    json o = common_json();
    o["tol"] = io.tol;
    return execute("interval", common, o, [&](Context& c) { cmd_interval(c, io); }, out, err);
  }
  if (precommit->parsed()) {
    json o = common_json();
    o.update({{"grid_points", po.grid_points},
              {"tol", po.tol},
              {"budget", po.budget},
              {"max_iter", po.max_iter},
              {"depth", po.depth}});
    return execute("precommit", common, o, [&](Context& c) { cmd_precommit(c, po); }, out, err);
  }
  if (entropy->parsed()) {
    json o = common_json();
    o.update({{"lambda", eo.lambda},
              {"tol", eo.tol},
              {"sweep", eo.sweep},
              {"alpha", eo.eq.alpha},
              {"max_iter", eo.eq.max_iter},
              {"max_starts", eo.eq.max_starts},
              {"bisection_steps", eo.eq.bisection_steps},
              {"grid_points", eo.eq.grid_points},
              {"grid_rounds", eo.eq.grid_rounds},
              {"solver_tol", eo.eq.solver_tol}});
    return execute("entropy-eq", common, o, [&](Context& c) { cmd_entropy(c, eo); }, out, err);
  }
  if (scan->parsed()) {
    json o = common_json();
    o.update({{"grid", so.grid}, {"tol", so.tol}, {"max_points", so.max_points}});
    return execute("scan-noneq", common, o, [&](Context& c) { cmd_scan(c, so); }, out, err);
  }
  if (sim->parsed()) {
    json o = common_json();
    o.update({{"policy", mo.policy},
              {"p", mo.p},
              {"start_state", opt_json(mo.start_state)},
              {"paths", mo.paths},
              {"seed", mo.seed},
              {"lambda", opt_json(mo.lambda)},
              {"t_max", mo.t_max},
              {"z", mo.z_limit}});
    return execute("simulate", common, o, [&](Context& c) { cmd_simulate(c, mo); }, out, err);
  }
  json o = common_json();
  o.update({{"grid", wo.grid}, {"time", wo.time}, {"state", wo.state}, {"max_dim", wo.max_dim}});
  return execute("sweep", common, o, [&](Context& c) { cmd_sweep(c, wo); }, out, err);
}

}  // namespace stackstop::cli
