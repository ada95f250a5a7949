#include <doctest.h>

#include <boost/math/distributions/chi_squared.hpp>

#include "refinery/injection.hpp"
#include "refinery/search.hpp"
#include "test_support.hpp"

using namespace refinery;
using namespace refinery::search;
using backend::PromptMode;
using backend::TemplateRegistry;

namespace {

const backend::PromptTemplateSet& kimina() {
  return TemplateRegistry::builtin().get("kimina");
}

ProblemStatement toy_problem(int k = 7) {
  return {"toy_" + std::to_string(k), "PROVE " + std::to_string(k),
          "import Mathlib"};
}

// Appends a failed child carrying a one-line diagnostic.
int add_failed(SearchTree& t, int parent, const std::string& text = "boom") {
  SearchNode n;
  n.program = "ATTEMPT 7 # " + text;
  n.diagnostics = {{diag::Severity::Error, 1, std::nullopt, text}};
  n.signatures = {diag::normalize_text(text)};
  n.status = NodeStatus::Failed;
  return t.append_child(parent, std::move(n));
}

struct ScriptedProver : backend::Prover {
  std::vector<std::string> responses;
  std::size_t next = 0;
  std::string prove(const std::string&) override {
    if (next >= responses.size()) throw backend::TransportError("script over");
    return responses[next++];
  }
};

struct ScriptedVerifier : backend::Verifier {
  backend::VerificationResult result;
  backend::VerificationResult verify(const std::string&,
                                     const std::string&) override {
    return result;
  }
};

double chi_squared_p_value(const std::vector<int>& observed, double expected) {
  double stat = 0.0;
  for (const int o : observed) {
    const double d = o - expected;
    stat += d * d / expected;
  }
  boost::math::chi_squared dist(observed.size() - 1.0);
  return boost::math::cdf(boost::math::complement(dist, stat));
}

}  // namespace

TEST_CASE("strategy config validation") {
  StrategyConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.budget = 0;
  CHECK_THROWS_AS(cfg.validate(), backend::ConfigError);
  cfg.budget = 4;
  cfg.temperature = 0.0;
  CHECK_THROWS_AS(cfg.validate(), backend::ConfigError);
  cfg.temperature = 1.0;
  cfg.max_depth = 0;
  CHECK_THROWS_AS(cfg.validate(), backend::ConfigError);
  cfg.max_depth = std::nullopt;
  CHECK(cfg.effective_max_depth() == 4);
  cfg.max_depth = 2;
  CHECK(cfg.effective_max_depth() == 2);
}

TEST_CASE("expandable set: root and failed nodes under the depth cap") {
  SearchTree t(toy_problem());
  const int a = add_failed(t, 0);
  const int b = add_failed(t, a);
  SearchNode broken;
  broken.status = NodeStatus::Broken;
  const int c = t.append_child(0, std::move(broken));
  (void)c;

  CHECK(expandable_nodes(t, 8) == std::vector<int>{0, a, b});
  CHECK(expandable_nodes(t, 2) == std::vector<int>{0, a});
  CHECK(expandable_nodes(t, 1) == std::vector<int>{0});

  SearchNode verified;
  verified.program = "QED 7";
  verified.status = NodeStatus::Verified;
  t.append_child(b, std::move(verified));
  CHECK(expandable_nodes(t, 8) == std::vector<int>{0, a, b});
}

TEST_CASE("bfs always picks the root") {
  SearchTree t(toy_problem());
  add_failed(t, 0);
  add_failed(t, 1);
  StrategyConfig cfg;
  cfg.kind = Strategy::Bfs;
  std::mt19937_64 rng(1);
  for (int i = 0; i < 5; ++i) {
    CHECK(select_node(t, cfg, rng, kimina()) == 0);
  }
}

TEST_CASE("dfs picks the deepest node, ties to the newest") {
  SearchTree t(toy_problem());
  const int a = add_failed(t, 0);       // depth 1
  const int b = add_failed(t, 0);       // depth 1
  StrategyConfig cfg;
  cfg.kind = Strategy::Dfs;
  std::mt19937_64 rng(1);
  CHECK(select_node(t, cfg, rng, kimina()) == b);
  const int c = add_failed(t, a);       // depth 2
  CHECK(select_node(t, cfg, rng, kimina()) == c);
  const int d = add_failed(t, b);       // depth 2, newer
  CHECK(select_node(t, cfg, rng, kimina()) == d);
  // Under a depth cap of 1 no failed node may take a child, so dfs
  // falls back to the root.
  cfg.max_depth = 1;
  CHECK(select_node(t, cfg, rng, kimina()) == 0);
}

TEST_CASE("random selection is uniform over the expandable set") {
  SearchTree t(toy_problem());
  std::vector<int> ids = {0};
  for (int i = 0; i < 4; ++i) ids.push_back(add_failed(t, 0));
  StrategyConfig cfg;
  cfg.kind = Strategy::Random;
  std::mt19937_64 rng(2024);
  std::vector<int> hits(ids.size(), 0);
  const int draws = 20000;
  for (int i = 0; i < draws; ++i) {
    const int pick = select_node(t, cfg, rng, kimina());
    ++hits[static_cast<std::size_t>(pick)];
  }
  CHECK(chi_squared_p_value(hits, draws / double(ids.size())) > 0.001);
}

TEST_CASE("value-guided selection follows the scorer") {
  SearchTree t(toy_problem());
  const int a = add_failed(t, 0, "alpha");
  const int b = add_failed(t, 0, "beta");
  (void)a;

  StrategyConfig cfg;
  cfg.kind = Strategy::ValueGuided;
  cfg.temperature = 0.1;
  std::mt19937_64 rng(3);

  SUBCASE("missing scorer is a configuration error") {
    CHECK_THROWS_AS(select_node(t, cfg, rng, kimina()), backend::ConfigError);
  }

  SUBCASE("a dominant value wins almost always at low temperature") {
    int count_b = 0;
    ValueScorer scorer = [&](const std::string& prompt) {
      return prompt.find("beta") != std::string::npos ? 10.0 : 0.0;
    };
    std::unordered_map<int, double> cache;
    for (int i = 0; i < 500; ++i) {
      if (select_node(t, cfg, rng, kimina(), scorer, &cache) == b) ++count_b;
    }
    CHECK(count_b == 500);
    // One entry per expandable node, computed once.
    CHECK(cache.size() == 3);
  }

  SUBCASE("equal values degrade to the uniform policy") {
    ValueScorer flat = [](const std::string&) { return 1.0; };
    std::vector<int> hits(3, 0);
    const int draws = 15000;
    std::unordered_map<int, double> cache;
    for (int i = 0; i < draws; ++i) {
      ++hits[static_cast<std::size_t>(
          select_node(t, cfg, rng, kimina(), flat, &cache))];
    }
    CHECK(chi_squared_p_value(hits, draws / 3.0) > 0.001);
  }
}

TEST_CASE("expand_node outcomes") {
  const auto& tset = kimina();
  ScriptedVerifier verifier;

  SUBCASE("verified child on pass") {
    SearchTree t(toy_problem());
    ScriptedProver prover;
    prover.responses = {backend::format_response(tset, "easy", "QED 7")};
    verifier.result.pass = true;
    const int id = expand_node(t, 0, prover, verifier, tset);
    CHECK(t.node(id).status == NodeStatus::Verified);
    CHECK(t.node(id).program == "QED 7");
    CHECK(t.node(id).depth == 1);
    CHECK(t.budget_used() == 1);
    CHECK(t.solved());
  }

  SUBCASE("failed child records diagnostics and signatures") {
    SearchTree t(toy_problem());
    ScriptedProver prover;
    prover.responses = {
        backend::format_response(tset, "hmm", "ATTEMPT 7 # nope")};
    verifier.result.pass = false;
    verifier.result.diagnostics = {
        {diag::Severity::Error, 2, 4, "unknown identifier `foo`"},
        {diag::Severity::Warning, 1, 1, "style"}};
    const int id = expand_node(t, 0, prover, verifier, tset);
    const auto& n = t.node(id);
    CHECK(n.status == NodeStatus::Failed);
    REQUIRE(n.signatures.size() == 1);  // warnings carry no signature
    CHECK(n.signatures[0].template_text == "unknown identifier `id'");
    CHECK(n.diagnostics.size() == 2);
  }

  SUBCASE("a pass with error diagnostics is not trusted") {
    SearchTree t(toy_problem());
    ScriptedProver prover;
    prover.responses = {backend::format_response(tset, "…", "QED 7")};
    verifier.result.pass = true;
    verifier.result.diagnostics = {
        {diag::Severity::Error, 1, std::nullopt, "sorried"}};
    const int id = expand_node(t, 0, prover, verifier, tset);
    CHECK(t.node(id).status == NodeStatus::Failed);
  }

  SUBCASE("failed verdict with no diagnostics gets a synthetic one") {
    SearchTree t(toy_problem());
    ScriptedProver prover;
    prover.responses = {backend::format_response(tset, "…", "ATTEMPT 7 # x")};
    verifier.result.pass = false;
    verifier.result.diagnostics.clear();
    const int id = expand_node(t, 0, prover, verifier, tset);
    REQUIRE(t.node(id).diagnostics.size() == 1);
    CHECK(t.node(id).diagnostics[0].text == "unsolved goals");
    // The child must be a usable refinement state.
    CHECK_NOTHROW(state_prompt(t, id, tset));
  }

  SUBCASE("unparseable response becomes a broken node, budget spent") {
    SearchTree t(toy_problem());
    ScriptedProver prover;
    prover.responses = {"I could not find a proof."};
    const int id = expand_node(t, 0, prover, verifier, tset);
    CHECK(t.node(id).status == NodeStatus::Broken);
    CHECK(!t.node(id).fail_reason.empty());
    CHECK(t.budget_used() == 1);
  }

  SUBCASE("prover transport failure becomes a broken node, budget spent") {
    SearchTree t(toy_problem());
    ScriptedProver prover;  // empty script throws TransportError
    const int id = expand_node(t, 0, prover, verifier, tset);
    CHECK(t.node(id).status == NodeStatus::Broken);
    CHECK(t.budget_used() == 1);
  }
}

TEST_CASE("state_prompt shapes") {
  const auto& tset = kimina();
  SearchTree t(toy_problem(3));
  const std::string root_prompt = state_prompt(t, 0, tset);
  CHECK(root_prompt.find("PROVE 3") != std::string::npos);
  CHECK(root_prompt.find("solve the following problem") != std::string::npos);

  const int a = add_failed(t, 0, "linarith failed");
  const std::string refine_prompt = state_prompt(t, a, tset);
  CHECK(refine_prompt.find("fix the following Lean 4 code") !=
        std::string::npos);
  CHECK(refine_prompt.find("<error>\nlinarith failed\n</error>") !=
        std::string::npos);
}

TEST_CASE("run_search against the simulation backend") {
  const auto& tset = kimina();

  SUBCASE("certain prover solves in one expansion") {
    backend::SimulationProver prover(
        backend::SimulationSpec::uniform(1.0, 1.0, 1), tset);
    backend::SimulationVerifier verifier;
    StrategyConfig cfg;
    cfg.kind = Strategy::Random;
    cfg.budget = 8;
    const auto [tree, outcome] =
        run_search(toy_problem(), cfg, prover, verifier, tset);
    CHECK(outcome.solved);
    CHECK(outcome.nodes_expanded == 1);
    CHECK(outcome.proof == "QED 7");
    CHECK(outcome.trajectory == std::vector<int>{0, 1});
    CHECK(tree.budget_used() == 1);
  }

  SUBCASE("hopeless bfs burns the budget into a star") {
    backend::SimulationProver prover(
        backend::SimulationSpec::uniform(0.0, 0.0, 1), tset);
    backend::SimulationVerifier verifier;
    StrategyConfig cfg;
    cfg.kind = Strategy::Bfs;
    cfg.budget = 8;
    const auto [tree, outcome] =
        run_search(toy_problem(), cfg, prover, verifier, tset);
    CHECK(!outcome.solved);
    CHECK(outcome.nodes_expanded == 8);
    CHECK(tree.nodes().size() == 9);
    for (const auto& n : tree.nodes()) {
      CHECK(n.depth <= 1);
      if (n.id != 0) CHECK(n.parent == 0);
    }
  }

  SUBCASE("hopeless dfs forms a single path") {
    backend::SimulationProver prover(
        backend::SimulationSpec::uniform(0.0, 0.0, 2), tset);
    backend::SimulationVerifier verifier;
    StrategyConfig cfg;
    cfg.kind = Strategy::Dfs;
    cfg.budget = 6;
    const auto [tree, outcome] =
        run_search(toy_problem(), cfg, prover, verifier, tset);
    CHECK(!outcome.solved);
    REQUIRE(tree.nodes().size() == 7);
    for (const auto& n : tree.nodes()) {
      if (n.id == 0) continue;
      CHECK(n.parent == n.id - 1);
      CHECK(n.depth == n.id);
    }
  }

  SUBCASE("max_depth stops dfs from descending") {
    backend::SimulationProver prover(
        backend::SimulationSpec::uniform(0.0, 0.0, 3), tset);
    backend::SimulationVerifier verifier;
    StrategyConfig cfg;
    cfg.kind = Strategy::Dfs;
    cfg.budget = 6;
    cfg.max_depth = 2;
    const auto [tree, outcome] =
        run_search(toy_problem(), cfg, prover, verifier, tset);
    for (const auto& n : tree.nodes()) CHECK(n.depth <= 2);
  }

  SUBCASE("at most one verified node ever exists") {
    backend::SimulationProver prover(
        backend::SimulationSpec::uniform(0.9, 0.9, 4), tset);
    backend::SimulationVerifier verifier;
    StrategyConfig cfg;
    cfg.kind = Strategy::Random;
    cfg.budget = 16;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      cfg.seed = seed;
      const auto [tree, outcome] =
          run_search(toy_problem(), cfg, prover, verifier, tset);
      int verified = 0;
      for (const auto& n : tree.nodes()) {
        if (n.status == NodeStatus::Verified) ++verified;
      }
      CHECK(verified <= 1);
      CHECK(tree.budget_used() <= cfg.budget);
    }
  }
}

TEST_CASE("search is deterministic for a fixed seed") {
  const auto& tset = kimina();
  StrategyConfig cfg;
  cfg.kind = Strategy::Random;
  cfg.budget = 24;
  cfg.seed = 12345;
  std::string first;
  for (int rep = 0; rep < 2; ++rep) {
    backend::SimulationProver prover(
        backend::SimulationSpec::uniform(0.05, 0.3, 777), tset);
    backend::SimulationVerifier verifier;
    const auto [tree, outcome] =
        run_search(toy_problem(), cfg, prover, verifier, tset);
    const std::string snap = snapshot(tree);
    if (rep == 0) {
      first = snap;
    } else {
      CHECK(snap == first);
    }
  }
}

TEST_CASE("snapshot round trip is exact") {
  const auto& tset = kimina();
  backend::SimulationProver prover(
      backend::SimulationSpec::uniform(0.1, 0.4, 55), tset);
  backend::SimulationVerifier verifier;
  StrategyConfig cfg;
  cfg.kind = Strategy::Dfs;
  cfg.budget = 10;
  const auto [tree, outcome] =
      run_search(toy_problem(11), cfg, prover, verifier, tset);

  const std::string record = snapshot(tree);
  const SearchTree back = restore(record);
  CHECK(back == tree);
  CHECK(snapshot(back) == record);
}

TEST_CASE("restore rejects corrupt records") {
  CHECK_THROWS_AS(restore("not json"), SnapshotError);
  CHECK_THROWS_AS(restore("{}"), SnapshotError);

  SearchTree t(toy_problem());
  add_failed(t, 0);
  const std::string good = snapshot(t);

  auto mutate = [&](const std::string& from, const std::string& to) {
    std::string s = good;
    const auto pos = s.find(from);
    REQUIRE(pos != std::string::npos);
    s.replace(pos, from.size(), to);
    return s;
  };
  CHECK_THROWS_AS(restore(mutate("\"version\": 1", "\"version\": 99")),
                  SnapshotError);
  CHECK_THROWS_AS(restore(mutate("\"status\": \"failed\"",
                                 "\"status\": \"weird\"")),
                  SnapshotError);
  // Children must point at earlier nodes.
  CHECK_THROWS_AS(restore(mutate("\"parent\": 0", "\"parent\": 7")),
                  SnapshotError);
}
