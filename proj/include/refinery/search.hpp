#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "refinery/backends.hpp"
#include "refinery/diagnostics.hpp"

namespace refinery::search {

struct SnapshotError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ProblemStatement {
  std::string id;
  std::string formal_statement;
  std::string header;

  bool operator==(const ProblemStatement&) const = default;
};

enum class NodeStatus { Root, Failed, Verified, Broken };

std::string_view node_status_name(NodeStatus s);
std::optional<NodeStatus> node_status_from_name(std::string_view name);

struct SearchNode {
  int id = 0;
  std::optional<int> parent;
  std::optional<std::string> program;
  std::vector<diag::RawDiagnostic> diagnostics;
  std::vector<diag::ErrorSignature> signatures;
  NodeStatus status = NodeStatus::Root;
  int depth = 0;
  std::string fail_reason;  // set on broken nodes

  bool operator==(const SearchNode&) const = default;
};

enum class Strategy { Bfs, Dfs, Random, ValueGuided };

std::string_view strategy_name(Strategy s);
std::optional<Strategy> strategy_from_name(std::string_view name);

struct StrategyConfig {
  Strategy kind = Strategy::Random;
  int budget = 64;
  std::optional<int> max_depth;  // absent: capped only by budget
  double temperature = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
  int effective_max_depth() const;
};

/// Scores a refinement-state prompt; higher means more promising.
using ValueScorer = std::function<double(const std::string& state_prompt)>;

class SearchTree {
 public:
  explicit SearchTree(ProblemStatement problem, std::uint64_t seed = 0);

  const ProblemStatement& problem() const { return problem_; }
  const std::vector<SearchNode>& nodes() const { return nodes_; }
  const SearchNode& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }
  int budget_used() const { return budget_used_; }
  std::uint64_t seed() const { return seed_; }

  std::optional<int> verified_node() const;
  bool solved() const { return verified_node().has_value(); }

  /// Parent chain of node_id, root first.
  std::vector<int> path_to_root(int node_id) const;

  // Used by expansion and snapshot restore; not part of the public
  // search surface.
  int append_child(int parent_id, SearchNode child);
  void consume_budget() { ++budget_used_; }

  bool operator==(const SearchTree&) const = default;

 private:
  friend SearchTree restore(const std::string& record);
  ProblemStatement problem_;
  std::vector<SearchNode> nodes_;
  int budget_used_ = 0;
  std::uint64_t seed_ = 0;
};

struct SearchOutcome {
  bool solved = false;
  std::optional<std::string> proof;
  int nodes_expanded = 0;
  std::optional<std::vector<int>> trajectory;
};

/// Root plus every failed node below the depth cap; verified and broken
/// nodes are dead ends.
std::vector<int> expandable_nodes(const SearchTree& t, int max_depth);

/// The prompt encoding a node's refinement state: the direct prompt at
/// the root, otherwise the refinement prompt over the node's program
/// with its diagnostics injected.
std::string state_prompt(const SearchTree& t, int node_id,
                         const backend::PromptTemplateSet& templates);

int select_node(const SearchTree& t, const StrategyConfig& cfg,
                std::mt19937_64& rng,
                const backend::PromptTemplateSet& templates,
                const ValueScorer& scorer = nullptr,
                std::unordered_map<int, double>* value_cache = nullptr);

/// Expands one node: prompts the prover, parses, verifies, and appends
/// the resulting child. Always consumes one unit of budget. Returns the
/// new node id.
int expand_node(SearchTree& t, int node_id, backend::Prover& prover,
                backend::Verifier& verifier,
                const backend::PromptTemplateSet& templates);

std::pair<SearchTree, SearchOutcome> run_search(
    const ProblemStatement& p, const StrategyConfig& cfg,
    backend::Prover& prover, backend::Verifier& verifier,
    const backend::PromptTemplateSet& templates,
    const ValueScorer& scorer = nullptr);

/// Versioned JSON snapshot of a tree; restore is field-for-field exact.
std::string snapshot(const SearchTree& t);
SearchTree restore(const std::string& record);

}  // namespace refinery::search
