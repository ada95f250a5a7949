#include "refinery/supervision.hpp"

#include <algorithm>
#include <numeric>
#include <ostream>
#include <random>
#include <set>

#include <json.hpp>

namespace refinery::supervise {

std::optional<std::vector<int>> extract_success_trajectory(
    const search::SearchTree& t) {
  const auto v = t.verified_node();
  if (!v) return std::nullopt;
  return t.path_to_root(*v);
}

std::vector<RefinementInstance> emit_refinement_instances(
    const search::SearchTree& t, const backend::PromptTemplateSet& templates,
    RefinementMode mode) {
  std::vector<RefinementInstance> out;
  const auto traj = extract_success_trajectory(t);
  if (!traj || traj->size() < 3) return out;  // unsolved or depth-1 solve

  const int verified = traj->back();
  const std::string target = *t.node(verified).program;

  if (mode == RefinementMode::LastEdge) {
    const int parent = (*traj)[traj->size() - 2];
    out.push_back({t.problem().id,
                   search::state_prompt(t, parent, templates), std::nullopt,
                   target});
    return out;
  }
  // AllToFinal: every failed state on the trajectory feeds the final
  // program.
  for (std::size_t i = 1; i + 1 < traj->size(); ++i) {
    out.push_back({t.problem().id,
                   search::state_prompt(t, (*traj)[i], templates),
                   std::nullopt, target});
  }
  return out;
}

std::vector<DirectInstance> emit_direct_instances(
    const search::SearchTree& t, const backend::PromptTemplateSet& templates) {
  std::vector<DirectInstance> out;
  const auto traj = extract_success_trajectory(t);
  if (!traj || traj->size() != 2) return out;
  const int verified = traj->back();
  out.push_back({t.problem().id, search::state_prompt(t, 0, templates),
                 *t.node(verified).program});
  return out;
}

std::vector<PreferencePair> emit_preference_pairs(
    const std::vector<const search::SearchTree*>& trees,
    const backend::PromptTemplateSet& templates) {
  std::vector<PreferencePair> out;
  for (const auto* tp : trees) {
    const auto& t = *tp;
    const auto traj = extract_success_trajectory(t);
    std::set<int> on_trajectory;
    if (traj) on_trajectory.insert(traj->begin(), traj->end());

    if (traj) {
      // Rule 1: later trajectory states are preferred over earlier ones.
      std::vector<std::string> prompts;
      prompts.reserve(traj->size());
      for (const int id : *traj) {
        prompts.push_back(search::state_prompt(t, id, templates));
      }
      for (std::size_t i = 1; i < traj->size(); ++i) {
        for (std::size_t j = 0; j < i; ++j) {
          out.push_back({t.problem().id, prompts[i], prompts[j],
                         PreferenceRule::TrajectoryOrder});
        }
      }
    }

    // Rule 2: root beats every dead-end state.
    const std::string root_prompt = search::state_prompt(t, 0, templates);
    for (const auto& n : t.nodes()) {
      if (n.id == 0 || n.status == search::NodeStatus::Broken) continue;
      if (on_trajectory.count(n.id)) continue;
      out.push_back({t.problem().id, root_prompt,
                     search::state_prompt(t, n.id, templates),
                     PreferenceRule::RootOverDead});
    }
  }
  return out;
}

std::pair<std::vector<DirectInstance>, MixtureManifest> balance_mixture(
    const std::vector<RefinementInstance>& refines,
    std::vector<DirectInstance> directs, std::uint64_t seed) {
  MixtureManifest m;
  m.refinement_count = refines.size();
  m.subsample_seed = seed;
  if (directs.size() > refines.size()) {
    std::vector<std::size_t> idx(directs.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(refines.size());
    std::sort(idx.begin(), idx.end());  // keep original order
    std::vector<DirectInstance> kept;
    kept.reserve(idx.size());
    for (const std::size_t i : idx) kept.push_back(std::move(directs[i]));
    directs = std::move(kept);
  }
  m.direct_count = directs.size();
  return {std::move(directs), m};
}

std::string build_synthesis_prompt(const std::string& problem,
                                   const std::string& annotated_incorrect,
                                   const std::string& correct) {
  if (problem.empty() || annotated_incorrect.empty() || correct.empty()) {
    throw ExtractionError("synthesis prompt: all three payloads are required");
  }
  if (annotated_incorrect.find("<error>") == std::string::npos) {
    throw ExtractionError(
        "synthesis prompt: incorrect program carries no error blocks");
  }
  std::string prompt =
      "You are provided with a problem in Lean 4.\n"
      "\n"
      "I will give you two solutions. The first solution is incorrect, and "
      "the second solution is correct.\n"
      "\n"
      "Your task is to generate a reasoning trace that explains how to fix "
      "the errors in the first solution using the compiler feedback.\n"
      "\n"
      "Here is the problem:\n" +
      problem +
      "\n"
      "\n"
      "Here is the incorrect solution. Compiler messages are embedded in the "
      "code:\n" +
      annotated_incorrect +
      "\n"
      "\n"
      "Here is the correct solution:\n" +
      correct +
      "\n"
      "\n"
      "Do NOT mention the correct solution in your output. Start from the "
      "incorrect solution and reason step by step until the errors are "
      "resolved.\n"
      "\n"
      "Put your answer inside a <think> </think> block.\n";
  return prompt;
}

std::string extract_thought(const std::string& response) {
  constexpr std::string_view kOpen = "<think>";
  constexpr std::string_view kClose = "</think>";
  const std::size_t open = response.find(kOpen);
  if (open == std::string::npos) {
    throw ExtractionError("no <think> block in synthesis response");
  }
  const std::size_t body = open + kOpen.size();
  const std::size_t close = response.find(kClose, body);
  if (close == std::string::npos) {
    throw ExtractionError("unterminated <think> block in synthesis response");
  }
  std::string thought = response.substr(body, close - body);
  const auto is_space = [](char c) {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r';
  };
  std::size_t begin = 0, end = thought.size();
  while (begin < end && is_space(thought[begin])) ++begin;
  while (end > begin && is_space(thought[end - 1])) --end;
  return thought.substr(begin, end - begin);
}

namespace {

const char* rule_name(PreferenceRule r) {
  return r == PreferenceRule::TrajectoryOrder ? "trajectory_order"
                                              : "root_over_dead";
}

}  // namespace

void write_refinement_jsonl(const std::vector<RefinementInstance>& xs,
                            std::ostream& out) {
  for (const auto& x : xs) {
    nlohmann::json j = {{"schema_version", kSchemaVersion},
                        {"problem_id", x.problem_id},
                        {"input_prompt", x.input_prompt},
                        {"target_program", x.target_program}};
    if (x.target_thought) j["target_thought"] = *x.target_thought;
    out << j.dump() << '\n';
  }
}

void write_direct_jsonl(const std::vector<DirectInstance>& xs,
                        std::ostream& out) {
  for (const auto& x : xs) {
    nlohmann::json j = {{"schema_version", kSchemaVersion},
                        {"problem_id", x.problem_id},
                        {"input_prompt", x.input_prompt},
                        {"target_program", x.target_program}};
    out << j.dump() << '\n';
  }
}

void write_preference_jsonl(const std::vector<PreferencePair>& xs,
                            std::ostream& out) {
  for (const auto& x : xs) {
    nlohmann::json j = {{"schema_version", kSchemaVersion},
                        {"problem_id", x.problem_id},
                        {"preferred", x.preferred},
                        {"rejected", x.rejected},
                        {"rule", rule_name(x.rule)}};
    out << j.dump() << '\n';
  }
}

std::string manifest_to_json(const MixtureManifest& m) {
  nlohmann::json j = {{"schema_version", kSchemaVersion},
                      {"refinement_count", m.refinement_count},
                      {"direct_count", m.direct_count},
                      {"subsample_seed", m.subsample_seed}};
  return j.dump(2);
}

}  // namespace refinery::supervise
