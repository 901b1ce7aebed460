#pragma once

// Finite path trees of the Markov chain and the policies that live on them.
//
// A PathTree rooted at (start_time, start_state) holds every reachable path
// prefix up to `horizon`. Children of a node are stored contiguously in
// ascending state order, only for transitions with positive probability.
// Node 0 is the root. Subtree extraction plays the role of the shift operator.

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "game_model.hpp"

namespace stackstop {

using Path = std::vector<int>;

inline constexpr std::size_t kDefaultMaxTreeNodes = 100000;

class PathTree {
 public:
  struct Node {
    int time = 0;
    int state = 0;
    int parent = -1;
    double prob = 1.0;   // transition probability from the parent
    double reach = 1.0;  // probability of the whole prefix from the root
    int first_child = -1;
    int n_children = 0;
  };

  /// Builds the reachable tree from (start_time, start_state) to `horizon`.
  /// `forced_terminal` marks a game that ends at `horizon` (both players
  /// stop); otherwise the last layer is a truncation where only the leader is
  /// forced to stop.
  static std::shared_ptr<const PathTree> build(const GameSpec& spec, int start_time,
                                               int start_state, int horizon,
                                               bool forced_terminal,
                                               std::size_t max_nodes = kDefaultMaxTreeNodes) {
    if (start_state < 0 || start_state >= spec.n_states())
      throw SpecError("start_state", "state index out of range");
    if (start_time < 0 || start_time > horizon)
      throw SpecError("start_time", "must lie in [0, horizon]");
    auto tree = std::shared_ptr<PathTree>(new PathTree());
    tree->start_time_ = start_time;
    tree->horizon_ = horizon;
    tree->forced_terminal_ = forced_terminal;
    tree->nodes_.push_back(Node{start_time, start_state, -1, 1.0, 1.0, -1, 0});
    for (std::size_t i = 0; i < tree->nodes_.size(); ++i) {
      if (tree->nodes_[i].time == horizon) continue;
      const Node parent = tree->nodes_[i];
      tree->nodes_[i].first_child = static_cast<int>(tree->nodes_.size());
      int count = 0;
      for (int y = 0; y < spec.n_states(); ++y) {
        double p = spec.pi(parent.state, y);
        if (p <= 0.0) continue;
        tree->nodes_.push_back(
            Node{parent.time + 1, y, static_cast<int>(i), p, parent.reach * p, -1, 0});
        ++count;
        if (tree->nodes_.size() > max_nodes)
          throw BudgetError("path tree exceeds " + std::to_string(max_nodes) + " nodes");
      }
      tree->nodes_[i].n_children = count;
    }
    return tree;
  }

  /// Tree for a finite-horizon spec rooted at (t, x).
  static std::shared_ptr<const PathTree> for_spec(const GameSpec& spec, int t, int x,
                                                  std::size_t max_nodes = kDefaultMaxTreeNodes) {
    require_finite(spec, "path tree");
    return build(spec, t, x, *spec.horizon(), true, max_nodes);
  }

  int size() const { return static_cast<int>(nodes_.size()); }
  const Node& node(int i) const { return nodes_[i]; }
  const std::vector<Node>& nodes() const { return nodes_; }
  int start_time() const { return start_time_; }
  int horizon() const { return horizon_; }
  bool forced_terminal() const { return forced_terminal_; }
  bool terminal(int i) const { return nodes_[i].time == horizon_; }
  int root_state() const { return nodes_[0].state; }

  Path path(int i) const {
    Path p;
    for (int n = i; n >= 0; n = nodes_[n].parent) p.push_back(nodes_[n].state);
    return Path(p.rbegin(), p.rend());
  }

  /// Index of the node for a path prefix, or -1 when not in the tree.
  int find(const Path& path) const {
    if (path.empty() || path[0] != nodes_[0].state) return -1;
    int cur = 0;
    for (std::size_t k = 1; k < path.size(); ++k) {
      const Node& n = nodes_[cur];
      int next = -1;
      for (int c = n.first_child; c >= 0 && c < n.first_child + n.n_children; ++c)
        if (nodes_[c].state == path[k]) next = c;
      if (next < 0) return -1;
      cur = next;
    }
    return cur;
  }

  /// Report key "(t,[x0,x1,...])".
  std::string key(int i) const {
    std::string s = "(" + std::to_string(nodes_[i].time) + ",[";
    Path p = path(i);
    for (std::size_t k = 0; k < p.size(); ++k) {
      if (k) s += ",";
      s += std::to_string(p[k]);
    }
    return s + "])";
  }

  std::vector<int> leaves() const {
    std::vector<int> out;
    for (int i = 0; i < size(); ++i)
      if (terminal(i)) out.push_back(i);
    return out;
  }

  /// Calls f(child) for each child of node i.
  template <typename F>
  void for_children(int i, F&& f) const {
    const Node& n = nodes_[i];
    for (int c = n.first_child; c >= 0 && c < n.first_child + n.n_children; ++c) f(c);
  }

 private:
  PathTree() = default;

  int start_time_ = 0;
  int horizon_ = 0;
  bool forced_terminal_ = true;
  std::vector<Node> nodes_;
};

using TreePtr = std::shared_ptr<const PathTree>;

/// Maps nodes of `sub` (rooted at node `anchor` of `full`) to nodes of `full`.
/// Both trees must come from the same spec and share the horizon.
inline std::vector<int> embed_subtree(const PathTree& sub, const PathTree& full, int anchor) {
  std::vector<int> map(static_cast<std::size_t>(sub.size()), -1);
  map[0] = anchor;
  for (int i = 0; i < sub.size(); ++i) {
    const auto& sn = sub.node(i);
    const auto& fn = full.node(map[i]);
    if (sn.n_children != fn.n_children)
      throw SpecError("subtree", "tree shapes disagree");
    for (int k = 0; k < sn.n_children; ++k) map[sn.first_child + k] = fn.first_child + k;
  }
  return map;
}

/// Path-dependent randomized stopping policy: a stop probability per node.
/// Terminal nodes always stop.
class PathPolicy {
 public:
  PathPolicy() = default;
  PathPolicy(TreePtr tree, std::vector<double> probs)
      : tree_(std::move(tree)), probs_(std::move(probs)) {
    if (static_cast<int>(probs_.size()) != tree_->size())
      throw SpecError("nodes", "policy size does not match the path tree");
    for (int i = 0; i < tree_->size(); ++i) {
      if (tree_->terminal(i)) probs_[i] = 1.0;
      if (!(probs_[i] >= 0.0 && probs_[i] <= 1.0))
        throw SpecError("nodes" + tree_->key(i), "stopping probability must lie in [0,1]");
    }
  }

  static PathPolicy constant(TreePtr tree, double p) {
    std::vector<double> probs(static_cast<std::size_t>(tree->size()), p);
    return PathPolicy(std::move(tree), std::move(probs));
  }

  /// Policy from a map keyed by path prefix; unspecified nodes get `fill`.
  static PathPolicy from_paths(TreePtr tree, const std::map<Path, double>& probs,
                               double fill = 0.0) {
    std::vector<double> v(static_cast<std::size_t>(tree->size()), fill);
    for (const auto& [path, p] : probs) {
      int i = tree->find(path);
      if (i < 0) throw SpecError("nodes", "path prefix not in tree");
      v[i] = p;
    }
    return PathPolicy(std::move(tree), std::move(v));
  }

  /// Markov policy p[t][x] lifted to the tree.
  static PathPolicy from_markov(TreePtr tree, const std::vector<Vector>& table) {
    std::vector<double> v(static_cast<std::size_t>(tree->size()));
    for (int i = 0; i < tree->size(); ++i) {
      const auto& n = tree->node(i);
      v[i] = table.at(n.time).at(n.state);
    }
    return PathPolicy(std::move(tree), std::move(v));
  }

  /// Stationary policy p[x] lifted to the tree.
  static PathPolicy from_stationary(TreePtr tree, const MarkovPolicy& p) {
    std::vector<double> v(static_cast<std::size_t>(tree->size()));
    for (int i = 0; i < tree->size(); ++i) v[i] = p[tree->node(i).state];
    return PathPolicy(std::move(tree), std::move(v));
  }

  const PathTree& tree() const { return *tree_; }
  const TreePtr& tree_ptr() const { return tree_; }
  double operator[](int node) const { return probs_[node]; }
  double at(const Path& path) const {
    int i = tree_->find(path);
    if (i < 0) throw SpecError("nodes", "path prefix not in tree");
    return probs_[i];
  }
  const std::vector<double>& probs() const { return probs_; }

 private:
  TreePtr tree_;
  std::vector<double> probs_;
};

/// Pure adapted stopping time: a stop indicator per node. Only the first stop
/// along each path matters; nodes below a stop are ignored. Terminal nodes
/// always stop.
class PureStoppingTime {
 public:
  PureStoppingTime() = default;
  PureStoppingTime(TreePtr tree, std::vector<std::uint8_t> stop)
      : tree_(std::move(tree)), stop_(std::move(stop)) {
    if (static_cast<int>(stop_.size()) != tree_->size())
      throw SpecError("stop_set", "indicator size does not match the path tree");
    for (int i = 0; i < tree_->size(); ++i) {
      if (stop_[i] > 1) throw SpecError("stop_set" + tree_->key(i), "indicator must be 0 or 1");
      if (tree_->terminal(i)) stop_[i] = 1;
    }
  }

  /// Stops at the first node with time >= s on every path.
  static PureStoppingTime at_time(TreePtr tree, int s) {
    std::vector<std::uint8_t> stop(static_cast<std::size_t>(tree->size()));
    for (int i = 0; i < tree->size(); ++i) stop[i] = tree->node(i).time >= s ? 1 : 0;
    return PureStoppingTime(std::move(tree), std::move(stop));
  }

  const PathTree& tree() const { return *tree_; }
  const TreePtr& tree_ptr() const { return tree_; }
  bool stops(int node) const { return stop_[node] != 0; }
  const std::vector<std::uint8_t>& indicators() const { return stop_; }

  /// Whether the rule has not stopped strictly before `node`.
  bool alive_at(int node) const {
    for (int n = tree_->node(node).parent; n >= 0; n = tree_->node(n).parent)
      if (stop_[n]) return false;
    return true;
  }

  /// Node where the path through `leaf` first stops.
  int first_stop_on_path(int leaf) const {
    int hit = leaf;
    for (int n = leaf; n >= 0; n = tree_->node(n).parent)
      if (stop_[n]) hit = n;
    return hit;
  }

  /// Effective stop nodes (first stops), in node order.
  std::vector<int> stop_nodes() const {
    std::vector<int> out;
    for (int i = 0; i < tree_->size(); ++i)
      if (stop_[i] && alive_at(i)) out.push_back(i);
    return out;
  }

  /// The common stopping time when it does not depend on the path, else -1.
  int deterministic_time() const {
    int t = -1;
    for (int i : stop_nodes()) {
      if (t < 0) t = tree_->node(i).time;
      else if (t != tree_->node(i).time) return -1;
    }
    return t;
  }

  /// Same effective stopping rule (first stops agree on every path).
  bool equivalent(const PureStoppingTime& other) const {
    for (int leaf : tree_->leaves())
      if (first_stop_on_path(leaf) != other.first_stop_on_path(leaf)) return false;
    return true;
  }

 private:
  TreePtr tree_;
  std::vector<std::uint8_t> stop_;
};

}  // namespace stackstop
