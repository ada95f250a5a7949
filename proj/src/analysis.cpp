#include "refinery/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <set>
#include <stdexcept>

namespace refinery::analysis {

// ---------------------------------------------------------------------------
// Budget model

void BudgetModelInput::validate() const {
  if (p_direct < 0.0 || p_direct > 1.0 || p_refine < 0.0 || p_refine > 1.0) {
    throw std::invalid_argument("budget model: probabilities must be in [0,1]");
  }
  if (n < 1) throw std::invalid_argument("budget model: n must be >= 1");
}

double harmonic(int n) {
  if (n < 1) throw std::invalid_argument("harmonic: n must be >= 1");
  double h = 0.0;
  // Small-to-large summation keeps rounding error negligible at the
  // scales used here.
  for (int k = n; k >= 1; --k) h += 1.0 / static_cast<double>(k);
  return h;
}

double p_solve_direct(const BudgetModelInput& in) {
  in.validate();
  return 1.0 - std::pow(1.0 - in.p_direct, static_cast<double>(in.n));
}

double p_solve_refine(const BudgetModelInput& in) {
  in.validate();
  const double h = harmonic(in.n);
  return 1.0 - std::pow(1.0 - in.p_direct, h) *
                   std::pow(1.0 - in.p_refine, static_cast<double>(in.n) - h);
}

std::string_view difficulty_name(DifficultyLabel d) {
  switch (d) {
    case DifficultyLabel::Easy: return "easy";
    case DifficultyLabel::Medium: return "medium";
    case DifficultyLabel::Hard: return "hard";
  }
  return "hard";
}

DifficultyLabel stratify_difficulty(std::optional<int> pass_index) {
  if (!pass_index) return DifficultyLabel::Hard;
  if (*pass_index < 1) {
    throw std::invalid_argument("stratify: pass index must be >= 1");
  }
  if (*pass_index <= 4) return DifficultyLabel::Easy;
  if (*pass_index <= 64) return DifficultyLabel::Medium;
  return DifficultyLabel::Hard;
}

// ---------------------------------------------------------------------------
// Error-fix statistics

std::vector<ErrorFixRow> error_fix_table(
    const std::vector<const search::SearchTree*>& trees,
    const diag::SignatureTable* train_table) {
  struct Acc {
    std::size_t occurrences = 0;
    std::set<std::string> problems;
    std::size_t expansions = 0;
    std::size_t fixes = 0;
  };
  std::map<std::string, Acc> acc;
  std::size_t total_errors = 0;

  for (const auto* tp : trees) {
    const auto& t = *tp;
    for (const auto& n : t.nodes()) {
      for (const auto& d : n.diagnostics) {
        if (d.severity != diag::Severity::Error) continue;
        const std::string sig = diag::normalize_message(d).template_text;
        auto& a = acc[sig];
        ++a.occurrences;
        a.problems.insert(t.problem().id);
        ++total_errors;
      }
      // An expansion from a failed node is an attempted fix of the
      // node's first error signature.
      if (n.parent) {
        const auto& parent = t.node(*n.parent);
        if (parent.status == search::NodeStatus::Failed &&
            !parent.signatures.empty()) {
          auto& a = acc[parent.signatures.front().template_text];
          ++a.expansions;
          if (n.status == search::NodeStatus::Verified) ++a.fixes;
        }
      }
    }
  }

  std::map<std::string, double> train;
  if (train_table) {
    for (const auto& row : train_table->rows) {
      train[row.template_text] = row.ratio;
    }
  }

  std::vector<ErrorFixRow> rows;
  rows.reserve(acc.size());
  for (const auto& [sig, a] : acc) {
    ErrorFixRow r;
    r.signature = sig;
    r.occur_freq = total_errors == 0
                       ? 0.0
                       : static_cast<double>(a.occurrences) /
                             static_cast<double>(total_errors);
    r.problem_count = a.problems.size();
    r.fix_attempts = a.expansions;
    r.fix_prob = a.expansions == 0 ? 0.0
                                   : static_cast<double>(a.fixes) /
                                         static_cast<double>(a.expansions);
    if (const auto it = train.find(sig); it != train.end()) {
      r.train_freq = it->second;
    }
    rows.push_back(std::move(r));
  }
  std::sort(rows.begin(), rows.end(),
            [](const ErrorFixRow& a, const ErrorFixRow& b) {
              if (a.occur_freq != b.occur_freq) {
                return a.occur_freq > b.occur_freq;
              }
              return a.signature < b.signature;
            });
  return rows;
}

void write_fix_table_csv(const std::vector<ErrorFixRow>& rows,
                         std::ostream& out) {
  out << "signature,occur_freq,problem_count,fix_prob,fix_attempts,train_freq\n";
  for (const auto& r : rows) {
    std::string sig = r.signature;
    if (sig.find_first_of(",\"\n") != std::string::npos) {
      std::string quoted = "\"";
      for (const char c : sig) {
        if (c == '"') quoted += "\"\"";
        else quoted.push_back(c);
      }
      sig = quoted + "\"";
    }
    out << sig << ',' << r.occur_freq << ',' << r.problem_count << ','
        << r.fix_prob << ',' << r.fix_attempts << ',';
    if (r.train_freq) out << *r.train_freq;
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Program distance

std::string canonicalize_program(const std::string& source) {
  std::string stripped;
  stripped.reserve(source.size());
  std::size_t i = 0;
  int block_depth = 0;
  while (i < source.size()) {
    if (block_depth > 0) {
      if (source.compare(i, 2, "/-") == 0) {
        ++block_depth;
        i += 2;
      } else if (source.compare(i, 2, "-/") == 0) {
        --block_depth;
        i += 2;
      } else {
        ++i;
      }
      continue;
    }
    if (source.compare(i, 2, "/-") == 0) {
      block_depth = 1;
      i += 2;
      // Comment acts as a token separator.
      stripped.push_back(' ');
      continue;
    }
    if (source.compare(i, 2, "--") == 0) {
      while (i < source.size() && source[i] != '\n') ++i;
      continue;
    }
    stripped.push_back(source[i]);
    ++i;
  }

  std::string out;
  out.reserve(stripped.size());
  bool in_run = false;
  for (const char c : stripped) {
    if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
      in_run = true;
      continue;
    }
    if (in_run && !out.empty()) out.push_back(' ');
    in_run = false;
    out.push_back(c);
  }
  return out;
}

std::size_t levenshtein(std::string_view x, std::string_view y) {
  if (x.size() < y.size()) std::swap(x, y);
  const std::size_t m = x.size(), n = y.size();
  if (n == 0) return m;
  std::vector<std::size_t> prev(n + 1), cur(n + 1);
  std::iota(prev.begin(), prev.end(), std::size_t{0});
  for (std::size_t i = 1; i <= m; ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= n; ++j) {
      const std::size_t sub = prev[j - 1] + (x[i - 1] == y[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[n];
}

double normalized_edit_distance(const std::string& x, const std::string& y) {
  const std::string cx = canonicalize_program(x);
  const std::string cy = canonicalize_program(y);
  const std::size_t longest = std::max(cx.size(), cy.size());
  if (longest == 0) return 0.0;
  return static_cast<double>(levenshtein(cx, cy)) /
         static_cast<double>(longest);
}

namespace {

// Energy statistic over a precomputed pooled distance matrix; ax/bx are
// index sets into the matrix.
double energy_from_matrix(const std::vector<double>& dist, std::size_t pool,
                          const std::vector<std::size_t>& ax,
                          const std::vector<std::size_t>& bx) {
  const double m = static_cast<double>(ax.size());
  const double n = static_cast<double>(bx.size());
  double cross = 0.0, within_a = 0.0, within_b = 0.0;
  for (const std::size_t i : ax) {
    const double* row = dist.data() + i * pool;
    for (const std::size_t j : bx) cross += row[j];
    for (const std::size_t j : ax) within_a += row[j];
  }
  for (const std::size_t i : bx) {
    const double* row = dist.data() + i * pool;
    for (const std::size_t j : bx) within_b += row[j];
  }
  return 2.0 / (m * n) * cross - within_a / (m * m) - within_b / (n * n);
}

std::vector<double> pooled_distance_matrix(
    const std::vector<std::string>& pool) {
  std::vector<std::string> canon(pool.size());
  for (std::size_t i = 0; i < pool.size(); ++i) {
    canon[i] = canonicalize_program(pool[i]);
  }
  std::vector<double> dist(pool.size() * pool.size(), 0.0);
  for (std::size_t i = 0; i < pool.size(); ++i) {
    for (std::size_t j = i + 1; j < pool.size(); ++j) {
      const std::size_t longest = std::max(canon[i].size(), canon[j].size());
      const double d =
          longest == 0 ? 0.0
                       : static_cast<double>(levenshtein(canon[i], canon[j])) /
                             static_cast<double>(longest);
      dist[i * pool.size() + j] = d;
      dist[j * pool.size() + i] = d;
    }
  }
  return dist;
}

}  // namespace

double energy_statistic(const std::vector<std::string>& xs,
                        const std::vector<std::string>& ys) {
  if (xs.empty() || ys.empty()) {
    throw std::invalid_argument("energy statistic: samples must be non-empty");
  }
  std::vector<std::string> pool = xs;
  pool.insert(pool.end(), ys.begin(), ys.end());
  const std::vector<double> dist = pooled_distance_matrix(pool);
  std::vector<std::size_t> ax(xs.size()), bx(ys.size());
  std::iota(ax.begin(), ax.end(), std::size_t{0});
  std::iota(bx.begin(), bx.end(), xs.size());
  return energy_from_matrix(dist, pool.size(), ax, bx);
}

TwoSampleReport permutation_test(const std::vector<std::string>& a,
                                 const std::vector<std::string>& b, int n_perm,
                                 std::uint64_t seed) {
  if (a.size() < 2 || b.size() < 2) {
    throw std::invalid_argument("permutation test: need >= 2 samples per side");
  }
  if (n_perm < 1) {
    throw std::invalid_argument("permutation test: n_perm must be >= 1");
  }

  std::vector<std::string> pool = a;
  pool.insert(pool.end(), b.begin(), b.end());
  const std::vector<double> dist = pooled_distance_matrix(pool);

  std::vector<std::size_t> ax(a.size()), bx(b.size());
  std::iota(ax.begin(), ax.end(), std::size_t{0});
  std::iota(bx.begin(), bx.end(), a.size());
  const double e0 = energy_from_matrix(dist, pool.size(), ax, bx);

  std::mt19937_64 rng(seed);
  std::vector<std::size_t> idx(pool.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  int at_least = 0;
  std::vector<std::size_t> pa(a.size()), pb(b.size());
  for (int k = 0; k < n_perm; ++k) {
    std::shuffle(idx.begin(), idx.end(), rng);
    std::copy(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(a.size()),
              pa.begin());
    std::copy(idx.begin() + static_cast<std::ptrdiff_t>(a.size()), idx.end(),
              pb.begin());
    if (energy_from_matrix(dist, pool.size(), pa, pb) >= e0) ++at_least;
  }

  TwoSampleReport r;
  r.e0 = e0;
  r.n_perm = n_perm;
  r.seed = seed;
  r.p_value = (1.0 + at_least) / (1.0 + n_perm);
  return r;
}

void distance_matrix_export(const std::vector<std::string>& samples,
                            std::ostream& out) {
  if (samples.empty()) {
    throw std::invalid_argument("distance matrix: need >= 1 sample");
  }
  const std::vector<double> dist = pooled_distance_matrix(samples);
  const std::size_t n = samples.size();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (j) out << ',';
      out << dist[i * n + j];
    }
    out << '\n';
  }
}

}  // namespace refinery::analysis
