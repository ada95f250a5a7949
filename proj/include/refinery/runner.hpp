#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "refinery/backends.hpp"
#include "refinery/search.hpp"

namespace refinery::run {

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class BackendKind { Remote, Simulate };

struct RunConfig {
  std::string problems_path;
  search::StrategyConfig strategy;
  BackendKind backend = BackendKind::Simulate;
  backend::SimulationSpec sim = backend::SimulationSpec::uniform(0.05, 0.1, 0);
  std::string prover_url;
  std::string verifier_url;
  std::string prover_token;
  std::string verifier_token;
  backend::GenerationParams generation;
  backend::RetryPolicy retry;
  std::string family = "kimina";
  std::string out_dir;
  int parallel_problems = 1;

  std::string digest() const;
};

enum class ProblemStatus { Pending, Solved, Exhausted, Errored };

std::string_view problem_status_name(ProblemStatus s);
std::optional<ProblemStatus> problem_status_from_name(std::string_view name);

struct RunManifest {
  std::string config_digest;
  std::map<std::string, ProblemStatus> statuses;  // by problem id
  std::size_t solved = 0;
  std::size_t exhausted = 0;
  std::size_t errored = 0;
  std::size_t skipped = 0;  // already terminal before this invocation
  std::string started_at;
  std::string finished_at;
};

/// Parses JSONL problem records {id, formal_statement, header?}. Rejects
/// malformed lines and duplicate ids by name.
std::vector<search::ProblemStatement> load_problem_set(const std::string& path);

/// Per-problem RNG stream: mixing keeps results independent of problem
/// order and parallelism.
std::uint64_t derive_seed(std::uint64_t run_seed, const std::string& problem_id);

/// Runs every problem up to parallel_problems at a time, one snapshot
/// file per problem under out_dir/trees. Re-invocation skips problems
/// whose snapshots are already terminal.
RunManifest run_command(const RunConfig& cfg);

std::vector<search::SearchTree> load_snapshots(const std::string& run_dir);

enum class ReportKind { Signatures, FixTable, BudgetModel, TwoSample, Distances };

std::optional<ReportKind> report_kind_from_name(std::string_view name);

struct ReportParams {
  // budget_model inputs
  double p_direct = 0.0;
  double p_refine = 0.0;
  int n = 64;
  // two_sample inputs
  int n_perm = 999;
  std::uint64_t seed = 0;
};

/// Writes the requested report into run_dir/reports and returns the
/// paths written.
std::vector<std::string> report_command(const std::string& run_dir,
                                        ReportKind kind,
                                        const ReportParams& params = {});

/// Supervision exports: refinement.jsonl, direct.jsonl, preference.jsonl
/// and mixture_manifest.json under out_dir.
std::vector<std::string> extract_data_command(const std::string& run_dir,
                                              const std::string& out_dir,
                                              const std::string& family,
                                              std::uint64_t subsample_seed);

void write_manifest(const RunManifest& m, const std::string& path);
RunManifest read_manifest(const std::string& path);

/// Monte-Carlo calibration of the analytic budget model: repeated
/// simulated searches at one (p_direct, p_refine) setting.
struct CalibrationCell {
  double p_direct = 0.0;
  double p_refine = 0.0;
  int n = 64;
  int trees = 0;
  double mc_solve_rate = 0.0;
  double analytic_p1 = 0.0;
  double analytic_p2 = 0.0;
  double mean_root_degree = 0.0;
  std::vector<int> root_degrees;  // one entry per tree
};

CalibrationCell simulate_calibrate_cell(
    double p_direct, double p_refine, int n, int trees, std::uint64_t seed,
    search::Strategy kind = search::Strategy::Random,
    const search::ValueScorer& scorer = nullptr);

}  // namespace refinery::run
