#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "refinery/backends.hpp"
#include "refinery/search.hpp"

namespace refinery::supervise {

struct ExtractionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr int kSchemaVersion = 1;

struct RefinementInstance {
  std::string problem_id;
  std::string input_prompt;
  std::optional<std::string> target_thought;
  std::string target_program;
};

struct DirectInstance {
  std::string problem_id;
  std::string input_prompt;
  std::string target_program;
};

enum class PreferenceRule { TrajectoryOrder, RootOverDead };

struct PreferencePair {
  std::string problem_id;
  std::string preferred;  // state prompt
  std::string rejected;   // state prompt
  PreferenceRule rule = PreferenceRule::TrajectoryOrder;
};

struct MixtureManifest {
  std::size_t refinement_count = 0;
  std::size_t direct_count = 0;
  std::uint64_t subsample_seed = 0;
};

enum class RefinementMode { LastEdge, AllToFinal };

/// Root-to-verified parent chain when the tree is solved.
std::optional<std::vector<int>> extract_success_trajectory(
    const search::SearchTree& t);

/// LastEdge: one instance per solved tree whose proof needed at least
/// one refinement step. AllToFinal: one instance per failed trajectory
/// state, all targeting the final verified program. Depth-1 solutions
/// emit nothing here; they are direct instances.
std::vector<RefinementInstance> emit_refinement_instances(
    const search::SearchTree& t, const backend::PromptTemplateSet& templates,
    RefinementMode mode = RefinementMode::LastEdge);

/// Direct instances from trees solved at depth 1.
std::vector<DirectInstance> emit_direct_instances(
    const search::SearchTree& t, const backend::PromptTemplateSet& templates);

/// Rule 1: every ordered pair along a successful trajectory, later state
/// preferred. Rule 2: root preferred over every non-root, non-broken
/// node off the successful trajectory.
std::vector<PreferencePair> emit_preference_pairs(
    const std::vector<const search::SearchTree*>& trees,
    const backend::PromptTemplateSet& templates);

/// Subsamples directs down to |refines| uniformly without replacement.
std::pair<std::vector<DirectInstance>, MixtureManifest> balance_mixture(
    const std::vector<RefinementInstance>& refines,
    std::vector<DirectInstance> directs, std::uint64_t seed);

/// The thought-synthesis prompt pairing an annotated failure with its
/// verified fix.
std::string build_synthesis_prompt(const std::string& problem,
                                   const std::string& annotated_incorrect,
                                   const std::string& correct);

/// Contents of the first <think>...</think> span, trimmed.
std::string extract_thought(const std::string& response);

void write_refinement_jsonl(const std::vector<RefinementInstance>& xs,
                            std::ostream& out);
void write_direct_jsonl(const std::vector<DirectInstance>& xs,
                        std::ostream& out);
void write_preference_jsonl(const std::vector<PreferencePair>& xs,
                            std::ostream& out);
std::string manifest_to_json(const MixtureManifest& m);

}  // namespace refinery::supervise
