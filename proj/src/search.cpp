#include "refinery/search.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "refinery/injection.hpp"

namespace refinery::search {

std::string_view node_status_name(NodeStatus s) {
  switch (s) {
    case NodeStatus::Root: return "root";
    case NodeStatus::Failed: return "failed";
    case NodeStatus::Verified: return "verified";
    case NodeStatus::Broken: return "broken";
  }
  return "broken";
}

std::optional<NodeStatus> node_status_from_name(std::string_view name) {
  if (name == "root") return NodeStatus::Root;
  if (name == "failed") return NodeStatus::Failed;
  if (name == "verified") return NodeStatus::Verified;
  if (name == "broken") return NodeStatus::Broken;
  return std::nullopt;
}

std::string_view strategy_name(Strategy s) {
  switch (s) {
    case Strategy::Bfs: return "bfs";
    case Strategy::Dfs: return "dfs";
    case Strategy::Random: return "random";
    case Strategy::ValueGuided: return "value";
  }
  return "random";
}

std::optional<Strategy> strategy_from_name(std::string_view name) {
  if (name == "bfs") return Strategy::Bfs;
  if (name == "dfs") return Strategy::Dfs;
  if (name == "random") return Strategy::Random;
  if (name == "value" || name == "value_guided") return Strategy::ValueGuided;
  return std::nullopt;
}

void StrategyConfig::validate() const {
  if (budget < 1) throw backend::ConfigError("strategy: budget must be >= 1");
  if (!(temperature > 0.0)) {
    throw backend::ConfigError("strategy: temperature must be positive");
  }
  if (max_depth && *max_depth < 1) {
    throw backend::ConfigError("strategy: max_depth must be >= 1");
  }
}

int StrategyConfig::effective_max_depth() const {
  return max_depth.value_or(budget);
}

SearchTree::SearchTree(ProblemStatement problem, std::uint64_t seed)
    : problem_(std::move(problem)), seed_(seed) {
  SearchNode root;
  root.id = 0;
  root.status = NodeStatus::Root;
  nodes_.push_back(std::move(root));
}

std::optional<int> SearchTree::verified_node() const {
  for (const auto& n : nodes_) {
    if (n.status == NodeStatus::Verified) return n.id;
  }
  return std::nullopt;
}

std::vector<int> SearchTree::path_to_root(int node_id) const {
  std::vector<int> path;
  std::optional<int> cur = node_id;
  while (cur) {
    path.push_back(*cur);
    cur = node(*cur).parent;
  }
  std::reverse(path.begin(), path.end());
  return path;
}

int SearchTree::append_child(int parent_id, SearchNode child) {
  const SearchNode& p = node(parent_id);
  child.id = static_cast<int>(nodes_.size());
  child.parent = parent_id;
  child.depth = p.depth + 1;
  nodes_.push_back(std::move(child));
  return nodes_.back().id;
}

std::vector<int> expandable_nodes(const SearchTree& t, int max_depth) {
  std::vector<int> out;
  for (const auto& n : t.nodes()) {
    const bool candidate =
        n.status == NodeStatus::Root || n.status == NodeStatus::Failed;
    if (candidate && n.depth < max_depth) out.push_back(n.id);
  }
  return out;
}

std::string state_prompt(const SearchTree& t, int node_id,
                         const backend::PromptTemplateSet& templates) {
  const SearchNode& n = t.node(node_id);
  if (n.status == NodeStatus::Root) {
    return backend::build_prompt(backend::PromptMode::Direct, templates,
                                 t.problem().formal_statement);
  }
  if (!n.program) {
    throw std::logic_error("state_prompt: node " + std::to_string(node_id) +
                           " has no program");
  }
  const auto annotated = inject::inject_diagnostics(*n.program, n.diagnostics);
  return backend::build_prompt(backend::PromptMode::Refine, templates,
                               annotated.text);
}

namespace {

int select_value_guided(const SearchTree& t, const std::vector<int>& open,
                        const StrategyConfig& cfg, std::mt19937_64& rng,
                        const backend::PromptTemplateSet& templates,
                        const ValueScorer& scorer,
                        std::unordered_map<int, double>* value_cache) {
  // A node's prompt never changes, so cached values stay valid.
  std::unordered_map<int, double> local;
  auto& cache = value_cache ? *value_cache : local;
  std::vector<double> values;
  values.reserve(open.size());
  for (const int id : open) {
    auto it = cache.find(id);
    if (it == cache.end()) {
      it = cache.emplace(id, scorer(state_prompt(t, id, templates))).first;
    }
    values.push_back(it->second);
  }
  const double vmax = *std::max_element(values.begin(), values.end());
  std::vector<double> weights;
  weights.reserve(values.size());
  for (const double v : values) {
    weights.push_back(std::exp((v - vmax) / cfg.temperature));
  }
  std::discrete_distribution<std::size_t> dist(weights.begin(), weights.end());
  return open[dist(rng)];
}

}  // namespace

int select_node(const SearchTree& t, const StrategyConfig& cfg,
                std::mt19937_64& rng,
                const backend::PromptTemplateSet& templates,
                const ValueScorer& scorer,
                std::unordered_map<int, double>* value_cache) {
  const std::vector<int> open = expandable_nodes(t, cfg.effective_max_depth());
  if (open.empty()) {
    throw std::logic_error("select_node: no expandable nodes");
  }
  switch (cfg.kind) {
    case Strategy::Bfs:
      return 0;
    case Strategy::Dfs: {
      // Deepest expandable node; ties go to the most recently created.
      int best = open.front();
      for (const int id : open) {
        if (t.node(id).depth > t.node(best).depth ||
            (t.node(id).depth == t.node(best).depth && id > best)) {
          best = id;
        }
      }
      return best;
    }
    case Strategy::Random: {
      std::uniform_int_distribution<std::size_t> dist(0, open.size() - 1);
      return open[dist(rng)];
    }
    case Strategy::ValueGuided: {
      if (!scorer) {
        throw backend::ConfigError(
            "value-guided search requires a value scorer");
      }
      return select_value_guided(t, open, cfg, rng, templates, scorer,
                                 value_cache);
    }
  }
  throw std::logic_error("select_node: unknown strategy");
}

int expand_node(SearchTree& t, int node_id, backend::Prover& prover,
                backend::Verifier& verifier,
                const backend::PromptTemplateSet& templates) {
  const std::string prompt = state_prompt(t, node_id, templates);

  SearchNode child;
  std::string response;
  try {
    response = prover.prove(prompt);
  } catch (const backend::TransportError& e) {
    t.consume_budget();
    child.status = NodeStatus::Broken;
    child.fail_reason = std::string("prover transport: ") + e.what();
    return t.append_child(node_id, std::move(child));
  } catch (const backend::ServiceError& e) {
    t.consume_budget();
    child.status = NodeStatus::Broken;
    child.fail_reason = std::string("prover service: ") + e.what();
    return t.append_child(node_id, std::move(child));
  }
  t.consume_budget();

  const auto program = backend::parse_prover_response(response);
  if (!program) {
    child.status = NodeStatus::Broken;
    child.fail_reason = "no lean4 code fence in prover response";
    return t.append_child(node_id, std::move(child));
  }

  backend::VerificationResult vr;
  try {
    vr = verifier.verify(*program, t.problem().header);
  } catch (const backend::TransportError& e) {
    child.status = NodeStatus::Broken;
    child.fail_reason = std::string("verifier transport: ") + e.what();
    return t.append_child(node_id, std::move(child));
  } catch (const backend::ServiceError& e) {
    child.status = NodeStatus::Broken;
    child.fail_reason = std::string("verifier service: ") + e.what();
    return t.append_child(node_id, std::move(child));
  }

  child.program = *program;
  child.diagnostics = vr.diagnostics;
  for (const auto& d : vr.diagnostics) {
    if (d.severity == diag::Severity::Error) {
      child.signatures.push_back(diag::normalize_message(d));
    }
  }
  const bool has_error =
      std::any_of(vr.diagnostics.begin(), vr.diagnostics.end(),
                  [](const diag::RawDiagnostic& d) {
                    return d.severity == diag::Severity::Error;
                  });
  child.status =
      (vr.pass && !has_error) ? NodeStatus::Verified : NodeStatus::Failed;
  if (child.status == NodeStatus::Failed && child.diagnostics.empty()) {
    // A failing verdict must carry at least one error for the
    // refinement prompt to be constructible.
    child.diagnostics.push_back(diag::RawDiagnostic{
        diag::Severity::Error, std::nullopt, std::nullopt, "unsolved goals"});
    child.signatures.push_back(
        diag::normalize_text(child.diagnostics.back().text));
  }
  return t.append_child(node_id, std::move(child));
}

std::pair<SearchTree, SearchOutcome> run_search(
    const ProblemStatement& p, const StrategyConfig& cfg,
    backend::Prover& prover, backend::Verifier& verifier,
    const backend::PromptTemplateSet& templates, const ValueScorer& scorer) {
  cfg.validate();
  SearchTree t(p, cfg.seed);
  std::mt19937_64 rng(cfg.seed);
  std::unordered_map<int, double> value_cache;

  while (t.budget_used() < cfg.budget && !t.solved()) {
    const int target = select_node(t, cfg, rng, templates, scorer, &value_cache);
    expand_node(t, target, prover, verifier, templates);
  }

  SearchOutcome outcome;
  outcome.nodes_expanded = t.budget_used();
  if (const auto v = t.verified_node()) {
    outcome.solved = true;
    outcome.proof = t.node(*v).program;
    outcome.trajectory = t.path_to_root(*v);
  }
  return {std::move(t), outcome};
}

// ---------------------------------------------------------------------------
// Snapshots

namespace {

constexpr int kSnapshotVersion = 1;

nlohmann::json node_to_json(const SearchNode& n) {
  nlohmann::json j;
  j["id"] = n.id;
  if (n.parent) j["parent"] = *n.parent;
  if (n.program) j["program"] = *n.program;
  nlohmann::json ds = nlohmann::json::array();
  for (const auto& d : n.diagnostics) {
    nlohmann::json dj;
    dj["severity"] = std::string(diag::severity_name(d.severity));
    if (d.line) dj["line"] = *d.line;
    if (d.column) dj["column"] = *d.column;
    dj["text"] = d.text;
    ds.push_back(std::move(dj));
  }
  j["diagnostics"] = std::move(ds);
  nlohmann::json sigs = nlohmann::json::array();
  for (const auto& s : n.signatures) {
    sigs.push_back({{"template", s.template_text}, {"mask_count", s.mask_count}});
  }
  j["signatures"] = std::move(sigs);
  j["status"] = std::string(node_status_name(n.status));
  j["depth"] = n.depth;
  if (!n.fail_reason.empty()) j["fail_reason"] = n.fail_reason;
  return j;
}

SearchNode node_from_json(const nlohmann::json& j) {
  SearchNode n;
  n.id = j.at("id").get<int>();
  if (j.contains("parent")) n.parent = j["parent"].get<int>();
  if (j.contains("program")) n.program = j["program"].get<std::string>();
  for (const auto& dj : j.at("diagnostics")) {
    diag::RawDiagnostic d;
    const auto sev = diag::severity_from_name(dj.at("severity").get<std::string>());
    if (!sev) throw SnapshotError("snapshot: unknown severity");
    d.severity = *sev;
    if (dj.contains("line")) d.line = dj["line"].get<int>();
    if (dj.contains("column")) d.column = dj["column"].get<int>();
    d.text = dj.at("text").get<std::string>();
    n.diagnostics.push_back(std::move(d));
  }
  for (const auto& sj : j.at("signatures")) {
    n.signatures.push_back({sj.at("template").get<std::string>(),
                            sj.at("mask_count").get<int>()});
  }
  const auto status = node_status_from_name(j.at("status").get<std::string>());
  if (!status) throw SnapshotError("snapshot: unknown node status");
  n.status = *status;
  n.depth = j.at("depth").get<int>();
  n.fail_reason = j.value("fail_reason", "");
  return n;
}

}  // namespace

std::string snapshot(const SearchTree& t) {
  nlohmann::json j;
  j["version"] = kSnapshotVersion;
  j["problem"] = {{"id", t.problem().id},
                  {"formal_statement", t.problem().formal_statement},
                  {"header", t.problem().header}};
  j["seed"] = t.seed();
  j["budget_used"] = t.budget_used();
  nlohmann::json nodes = nlohmann::json::array();
  for (const auto& n : t.nodes()) nodes.push_back(node_to_json(n));
  j["nodes"] = std::move(nodes);
  return j.dump(2);
}

SearchTree restore(const std::string& record) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(record);
  } catch (const nlohmann::json::parse_error& e) {
    throw SnapshotError(std::string("snapshot: corrupt record: ") + e.what());
  }
  try {
    if (j.at("version").get<int>() != kSnapshotVersion) {
      throw SnapshotError("snapshot: unsupported version");
    }
    ProblemStatement p;
    p.id = j.at("problem").at("id").get<std::string>();
    p.formal_statement = j.at("problem").at("formal_statement").get<std::string>();
    p.header = j.at("problem").value("header", "");
    SearchTree t(std::move(p), j.at("seed").get<std::uint64_t>());
    t.budget_used_ = j.at("budget_used").get<int>();
    t.nodes_.clear();
    for (const auto& nj : j.at("nodes")) {
      t.nodes_.push_back(node_from_json(nj));
    }
    // Structural sanity: creation-order ids and valid parents.
    for (std::size_t i = 0; i < t.nodes_.size(); ++i) {
      const auto& n = t.nodes_[i];
      if (n.id != static_cast<int>(i)) {
        throw SnapshotError("snapshot: node ids out of order");
      }
      if (n.parent && (*n.parent < 0 || *n.parent >= n.id)) {
        throw SnapshotError("snapshot: bad parent reference");
      }
    }
    if (t.nodes_.empty()) throw SnapshotError("snapshot: no nodes");
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw SnapshotError(std::string("snapshot: malformed record: ") + e.what());
  }
}

}  // namespace refinery::search
