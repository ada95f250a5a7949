#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "refinery/diagnostics.hpp"
#include "refinery/search.hpp"

namespace refinery::analysis {

// ---------------------------------------------------------------------------
// Budget model

struct BudgetModelInput {
  double p_direct = 0.0;
  double p_refine = 0.0;
  int n = 1;

  void validate() const;
};

/// H_n = sum_{k=1..n} 1/k.
double harmonic(int n);

/// Solve probability of n independent direct attempts:
/// 1 - (1 - p_direct)^n.
double p_solve_direct(const BudgetModelInput& in);

/// Solve probability under random tree search with H_n expected root
/// expansions: 1 - (1-p_direct)^{H_n} (1-p_refine)^{n-H_n}.
double p_solve_refine(const BudgetModelInput& in);

enum class DifficultyLabel { Easy, Medium, Hard };

std::string_view difficulty_name(DifficultyLabel d);

/// pass_index is the first succeeding sampling pass, absent when the
/// problem was never solved within budget.
DifficultyLabel stratify_difficulty(std::optional<int> pass_index);

// ---------------------------------------------------------------------------
// Error-fix statistics

struct ErrorFixRow {
  std::string signature;
  double occur_freq = 0.0;     // fraction of all error occurrences
  std::size_t problem_count = 0;
  double fix_prob = 0.0;       // verified children / expansions from sig
  std::size_t fix_attempts = 0;  // denominator; 0 flags a degenerate row
  std::optional<double> train_freq;
};

std::vector<ErrorFixRow> error_fix_table(
    const std::vector<const search::SearchTree*>& trees,
    const diag::SignatureTable* train_table = nullptr);

void write_fix_table_csv(const std::vector<ErrorFixRow>& rows,
                         std::ostream& out);

// ---------------------------------------------------------------------------
// Program distance and two-sample testing

/// Strips line (--) and nestable block (/- -/) comments, then flattens
/// whitespace to single spaces.
std::string canonicalize_program(const std::string& source);

std::size_t levenshtein(std::string_view x, std::string_view y);

/// Lev(x, y) / max(|x|, |y|) over canonicalized strings; 0 when both
/// are empty.
double normalized_edit_distance(const std::string& x, const std::string& y);

double energy_statistic(const std::vector<std::string>& xs,
                        const std::vector<std::string>& ys);

struct TwoSampleReport {
  double e0 = 0.0;
  double p_value = 1.0;
  int n_perm = 0;
  std::uint64_t seed = 0;
};

/// Permutation test for the null that A and B share a distribution.
/// p = (1 + #{E_perm >= E_0}) / (1 + n_perm).
TwoSampleReport permutation_test(const std::vector<std::string>& a,
                                 const std::vector<std::string>& b, int n_perm,
                                 std::uint64_t seed);

/// Symmetric pairwise distance matrix, zero diagonal, CSV rows.
void distance_matrix_export(const std::vector<std::string>& samples,
                            std::ostream& out);

}  // namespace refinery::analysis
