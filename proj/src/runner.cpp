#include "refinery/runner.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <memory>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "refinery/analysis.hpp"
#include "refinery/injection.hpp"
#include "refinery/supervision.hpp"

namespace refinery::run {

namespace fs = std::filesystem;

std::string_view problem_status_name(ProblemStatus s) {
  switch (s) {
    case ProblemStatus::Pending: return "pending";
    case ProblemStatus::Solved: return "solved";
    case ProblemStatus::Exhausted: return "exhausted";
    case ProblemStatus::Errored: return "errored";
  }
  return "pending";
}

std::optional<ProblemStatus> problem_status_from_name(std::string_view name) {
  if (name == "pending") return ProblemStatus::Pending;
  if (name == "solved") return ProblemStatus::Solved;
  if (name == "exhausted") return ProblemStatus::Exhausted;
  if (name == "errored") return ProblemStatus::Errored;
  return std::nullopt;
}

std::string RunConfig::digest() const {
  nlohmann::json j = {
      {"problems", problems_path},
      {"strategy", std::string(search::strategy_name(strategy.kind))},
      {"budget", strategy.budget},
      {"max_depth", strategy.max_depth ? nlohmann::json(*strategy.max_depth)
                                       : nlohmann::json()},
      {"temperature", strategy.temperature},
      {"seed", strategy.seed},
      {"backend", backend == BackendKind::Remote ? "remote" : "simulate"},
      {"family", family},
  };
  if (backend == BackendKind::Simulate) {
    j["p_direct"] = sim.p_direct;
    j["fix_prob"] = sim.fix_prob;
    j["sim_seed"] = sim.seed;
  } else {
    j["prover_url"] = prover_url;
    j["verifier_url"] = verifier_url;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(
                    inject::source_digest(j.dump())));
  return buf;
}

std::vector<search::ProblemStatement> load_problem_set(
    const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("problem set not found: " + path);
  std::vector<search::ProblemStatement> out;
  std::set<std::string> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError("problem set: malformed line " + std::to_string(lineno) +
                      ": " + e.what());
    }
    search::ProblemStatement p;
    try {
      p.id = j.at("id").get<std::string>();
      p.formal_statement = j.at("formal_statement").get<std::string>();
      p.header = j.value("header", "");
    } catch (const nlohmann::json::exception& e) {
      throw DataError("problem set: malformed line " + std::to_string(lineno) +
                      ": " + e.what());
    }
    if (p.formal_statement.empty()) {
      throw DataError("problem set: empty formal_statement at line " +
                      std::to_string(lineno));
    }
    if (!seen.insert(p.id).second) {
      throw DataError("problem set: duplicate id '" + p.id + "'");
    }
    out.push_back(std::move(p));
  }
  return out;
}

std::uint64_t derive_seed(std::uint64_t run_seed,
                          const std::string& problem_id) {
  std::uint64_t h = 1469598103934665603ull ^ run_seed;
  h *= 1099511628211ull;
  for (const unsigned char c : problem_id) {
    h ^= c;
    h *= 1099511628211ull;
  }
  // splitmix64 finalizer
  h ^= h >> 30;
  h *= 0xbf58476d1ce4e5b9ull;
  h ^= h >> 27;
  h *= 0x94d049bb133111ebull;
  h ^= h >> 31;
  return h;
}

namespace {

std::string timestamp_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::tm tm_utc{};
  gmtime_r(&t, &tm_utc);
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
  return buf;
}

std::string tree_path(const std::string& run_dir, const std::string& id) {
  // Problem ids may contain path-hostile characters; use the id when
  // clean, a digest otherwise.
  std::string name = id;
  for (char& c : name) {
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '-' ||
          c == '_' || c == '.')) {
      c = '_';
    }
  }
  return run_dir + "/trees/" + name + ".json";
}

struct ProblemBackends {
  std::unique_ptr<backend::Prover> prover;
  std::unique_ptr<backend::Verifier> verifier;
};

ProblemBackends make_backends(const RunConfig& cfg,
                              const backend::PromptTemplateSet& templates,
                              std::uint64_t problem_seed) {
  ProblemBackends b;
  if (cfg.backend == BackendKind::Simulate) {
    backend::SimulationSpec spec = cfg.sim;
    spec.seed = problem_seed;
    b.prover = std::make_unique<backend::SimulationProver>(spec, templates);
    b.verifier = std::make_unique<backend::SimulationVerifier>();
  } else {
    b.prover = std::make_unique<backend::RemoteProver>(
        cfg.prover_url, cfg.generation, cfg.retry, cfg.prover_token);
    b.verifier = std::make_unique<backend::RemoteVerifier>(
        cfg.verifier_url, cfg.retry, cfg.verifier_token);
  }
  return b;
}

// Connection-level reachability check; any HTTP status counts as
// reachable.
void probe_endpoint(const std::string& url) {
  const std::size_t scheme_end = url.find("://");
  if (scheme_end == std::string::npos) {
    throw backend::ConfigError("endpoint url missing scheme: " + url);
  }
  const std::size_t path_start = url.find('/', scheme_end + 3);
  const std::string base =
      path_start == std::string::npos ? url : url.substr(0, path_start);
  httplib::Client cli(base);
  cli.set_connection_timeout(std::chrono::seconds(5));
  cli.set_read_timeout(std::chrono::seconds(5));
  const auto res = cli.Get("/");
  if (!res && res.error() == httplib::Error::Connection) {
    throw backend::TransportError("backend unreachable at startup: " + url);
  }
}

std::optional<ProblemStatus> snapshot_status(const std::string& path,
                                             int budget) {
  std::ifstream in(path);
  if (!in) return std::nullopt;
  std::stringstream buf;
  buf << in.rdbuf();
  try {
    const search::SearchTree t = search::restore(buf.str());
    if (t.solved()) return ProblemStatus::Solved;
    if (t.budget_used() >= budget) return ProblemStatus::Exhausted;
    return ProblemStatus::Pending;
  } catch (const search::SnapshotError&) {
    return std::nullopt;  // unreadable snapshot: redo the problem
  }
}

}  // namespace

RunManifest run_command(const RunConfig& cfg) {
  cfg.strategy.validate();
  if (cfg.parallel_problems < 1) {
    throw DataError("run: parallel_problems must be >= 1");
  }
  const auto problems = load_problem_set(cfg.problems_path);
  if (problems.empty()) {
    throw DataError("run: problem set is empty, refusing to start");
  }

  const auto& registry = backend::TemplateRegistry::builtin();
  const auto& templates = registry.get(cfg.family);

  if (cfg.backend == BackendKind::Remote) {
    probe_endpoint(cfg.prover_url);
    probe_endpoint(cfg.verifier_url);
  }

  fs::create_directories(cfg.out_dir + "/trees");

  const std::string manifest_path = cfg.out_dir + "/manifest.json";
  if (fs::exists(manifest_path)) {
    const RunManifest previous = read_manifest(manifest_path);
    if (previous.config_digest != cfg.digest()) {
      throw DataError("run: config drift against existing manifest in " +
                      cfg.out_dir);
    }
  }

  RunManifest manifest;
  manifest.config_digest = cfg.digest();
  manifest.started_at = timestamp_now();
  for (const auto& p : problems) {
    manifest.statuses[p.id] = ProblemStatus::Pending;
  }

  std::mutex mu;
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= problems.size()) return;
      const auto& p = problems[i];
      const std::string path = tree_path(cfg.out_dir, p.id);

      if (const auto prior = snapshot_status(path, cfg.strategy.budget);
          prior && *prior != ProblemStatus::Pending) {
        std::lock_guard lock(mu);
        manifest.statuses[p.id] = *prior;
        ++manifest.skipped;
        if (*prior == ProblemStatus::Solved) ++manifest.solved;
        else ++manifest.exhausted;
        continue;
      }

      ProblemStatus status = ProblemStatus::Errored;
      try {
        const std::uint64_t seed = derive_seed(cfg.strategy.seed, p.id);
        // Separate stream for the simulated prover; see
        // simulate_calibrate_cell.
        auto backends =
            make_backends(cfg, templates, derive_seed(seed, "prover"));
        search::StrategyConfig strat = cfg.strategy;
        strat.seed = seed;
        auto [tree, outcome] = search::run_search(
            p, strat, *backends.prover, *backends.verifier, templates);
        std::ofstream out(path);
        out << search::snapshot(tree);
        status = outcome.solved ? ProblemStatus::Solved
                                : ProblemStatus::Exhausted;
      } catch (const std::exception&) {
        status = ProblemStatus::Errored;
      }
      std::lock_guard lock(mu);
      manifest.statuses[p.id] = status;
      switch (status) {
        case ProblemStatus::Solved: ++manifest.solved; break;
        case ProblemStatus::Exhausted: ++manifest.exhausted; break;
        default: ++manifest.errored; break;
      }
    }
  };

  const int nthreads =
      std::min<int>(cfg.parallel_problems, static_cast<int>(problems.size()));
  if (nthreads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(nthreads));
    for (int i = 0; i < nthreads; ++i) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  manifest.finished_at = timestamp_now();
  write_manifest(manifest, manifest_path);
  return manifest;
}

std::vector<search::SearchTree> load_snapshots(const std::string& run_dir) {
  const std::string trees_dir = run_dir + "/trees";
  if (!fs::exists(trees_dir)) {
    throw DataError("no snapshots under " + run_dir);
  }
  std::vector<std::string> paths;
  for (const auto& entry : fs::directory_iterator(trees_dir)) {
    if (entry.path().extension() == ".json") {
      paths.push_back(entry.path().string());
    }
  }
  std::sort(paths.begin(), paths.end());
  std::vector<search::SearchTree> out;
  out.reserve(paths.size());
  for (const auto& path : paths) {
    std::ifstream in(path);
    std::stringstream buf;
    buf << in.rdbuf();
    out.push_back(search::restore(buf.str()));
  }
  if (out.empty()) throw DataError("no snapshots under " + run_dir);
  return out;
}

std::optional<ReportKind> report_kind_from_name(std::string_view name) {
  if (name == "signatures") return ReportKind::Signatures;
  if (name == "fix_table") return ReportKind::FixTable;
  if (name == "budget_model") return ReportKind::BudgetModel;
  if (name == "two_sample") return ReportKind::TwoSample;
  if (name == "distances") return ReportKind::Distances;
  return std::nullopt;
}

namespace {

std::vector<const search::SearchTree*> tree_pointers(
    const std::vector<search::SearchTree>& trees) {
  std::vector<const search::SearchTree*> ptrs;
  ptrs.reserve(trees.size());
  for (const auto& t : trees) ptrs.push_back(&t);
  return ptrs;
}

std::vector<diag::RawDiagnostic> all_error_diagnostics(
    const std::vector<search::SearchTree>& trees) {
  std::vector<diag::RawDiagnostic> ds;
  for (const auto& t : trees) {
    for (const auto& n : t.nodes()) {
      for (const auto& d : n.diagnostics) ds.push_back(d);
    }
  }
  return ds;
}

}  // namespace

std::vector<std::string> report_command(const std::string& run_dir,
                                        ReportKind kind,
                                        const ReportParams& params) {
  const std::string reports_dir = run_dir + "/reports";
  std::vector<std::string> written;

  if (kind == ReportKind::BudgetModel) {
    // Pure analytic passthrough; needs no snapshots.
    fs::create_directories(reports_dir);
    analysis::BudgetModelInput in{params.p_direct, params.p_refine, params.n};
    nlohmann::json j = {{"p_direct", params.p_direct},
                        {"p_refine", params.p_refine},
                        {"n", params.n},
                        {"harmonic", analysis::harmonic(params.n)},
                        {"p_solve_direct", analysis::p_solve_direct(in)},
                        {"p_solve_refine", analysis::p_solve_refine(in)}};
    const std::string path = reports_dir + "/budget_model.json";
    std::ofstream(path) << j.dump(2) << '\n';
    written.push_back(path);
    return written;
  }

  const auto trees = load_snapshots(run_dir);
  fs::create_directories(reports_dir);

  switch (kind) {
    case ReportKind::Signatures: {
      const auto table =
          diag::signature_frequency_table(all_error_diagnostics(trees));
      const std::string csv = reports_dir + "/signatures.csv";
      const std::string json = reports_dir + "/signatures.json";
      {
        std::ofstream out(csv);
        diag::write_table_csv(table, out);
      }
      std::ofstream(json) << diag::table_to_json(table) << '\n';
      written = {csv, json};
      break;
    }
    case ReportKind::FixTable: {
      const auto rows = analysis::error_fix_table(tree_pointers(trees));
      const std::string csv = reports_dir + "/fix_table.csv";
      std::ofstream out(csv);
      analysis::write_fix_table_csv(rows, out);
      written = {csv};
      break;
    }
    case ReportKind::TwoSample: {
      // Root children sample the direct distribution; deeper nodes
      // sample the aggregated refinement distributions.
      std::vector<std::string> direct, refined;
      for (const auto& t : trees) {
        for (const auto& n : t.nodes()) {
          if (!n.program) continue;
          (n.depth == 1 ? direct : refined).push_back(*n.program);
        }
      }
      const auto report = analysis::permutation_test(
          direct, refined, params.n_perm, params.seed);
      nlohmann::json j = {{"e0", report.e0},
                          {"p_value", report.p_value},
                          {"n_perm", report.n_perm},
                          {"seed", report.seed},
                          {"direct_samples", direct.size()},
                          {"refined_samples", refined.size()}};
      const std::string path = reports_dir + "/two_sample.json";
      std::ofstream(path) << j.dump(2) << '\n';
      written = {path};
      break;
    }
    case ReportKind::Distances: {
      std::vector<std::string> programs;
      for (const auto& t : trees) {
        for (const auto& n : t.nodes()) {
          if (n.program) programs.push_back(*n.program);
        }
      }
      const std::string path = reports_dir + "/distances.csv";
      std::ofstream out(path);
      analysis::distance_matrix_export(programs, out);
      written = {path};
      break;
    }
    case ReportKind::BudgetModel:
      break;  // handled above
  }
  return written;
}

std::vector<std::string> extract_data_command(const std::string& run_dir,
                                              const std::string& out_dir,
                                              const std::string& family,
                                              std::uint64_t subsample_seed) {
  const auto trees = load_snapshots(run_dir);
  const auto& registry = backend::TemplateRegistry::builtin();
  const auto& templates = registry.get(family);

  std::vector<supervise::RefinementInstance> refines;
  std::vector<supervise::DirectInstance> directs;
  for (const auto& t : trees) {
    auto r = supervise::emit_refinement_instances(t, templates);
    refines.insert(refines.end(), std::make_move_iterator(r.begin()),
                   std::make_move_iterator(r.end()));
    auto d = supervise::emit_direct_instances(t, templates);
    directs.insert(directs.end(), std::make_move_iterator(d.begin()),
                   std::make_move_iterator(d.end()));
  }
  const auto pairs =
      supervise::emit_preference_pairs(tree_pointers(trees), templates);
  auto [balanced, manifest] =
      supervise::balance_mixture(refines, std::move(directs), subsample_seed);

  fs::create_directories(out_dir);
  const std::string refinement_path = out_dir + "/refinement.jsonl";
  const std::string direct_path = out_dir + "/direct.jsonl";
  const std::string preference_path = out_dir + "/preference.jsonl";
  const std::string manifest_path = out_dir + "/mixture_manifest.json";
  {
    std::ofstream out(refinement_path);
    supervise::write_refinement_jsonl(refines, out);
  }
  {
    std::ofstream out(direct_path);
    supervise::write_direct_jsonl(balanced, out);
  }
  {
    std::ofstream out(preference_path);
    supervise::write_preference_jsonl(pairs, out);
  }
  std::ofstream(manifest_path) << supervise::manifest_to_json(manifest) << '\n';
  return {refinement_path, direct_path, preference_path, manifest_path};
}

CalibrationCell simulate_calibrate_cell(double p_direct, double p_refine,
                                        int n, int trees, std::uint64_t seed,
                                        search::Strategy kind,
                                        const search::ValueScorer& scorer) {
  CalibrationCell cell;
  cell.p_direct = p_direct;
  cell.p_refine = p_refine;
  cell.n = n;
  cell.trees = trees;
  analysis::BudgetModelInput in{p_direct, p_refine, n};
  cell.analytic_p1 = analysis::p_solve_direct(in);
  cell.analytic_p2 = analysis::p_solve_refine(in);

  const auto& registry = backend::TemplateRegistry::builtin();
  const auto& templates = registry.get("kimina");

  std::size_t solved = 0;
  long long degree_sum = 0;
  cell.root_degrees.reserve(static_cast<std::size_t>(trees));
  for (int i = 0; i < trees; ++i) {
    search::ProblemStatement p;
    p.id = "calib-" + std::to_string(i);
    p.formal_statement = "PROVE " + std::to_string(i);
    const std::uint64_t tree_seed = derive_seed(seed, p.id);
    // The prover and the node selector need independent streams;
    // sharing one seed correlates success draws with node picks.
    backend::SimulationSpec spec = backend::SimulationSpec::uniform(
        p_direct, p_refine, derive_seed(tree_seed, "prover"));
    backend::SimulationProver prover(spec, templates);
    backend::SimulationVerifier verifier;
    search::StrategyConfig cfg;
    cfg.kind = kind;
    cfg.budget = n;
    cfg.seed = tree_seed;
    const auto [tree, outcome] =
        search::run_search(p, cfg, prover, verifier, templates, scorer);
    if (outcome.solved) ++solved;
    int degree = 0;
    for (const auto& node : tree.nodes()) {
      if (node.parent && *node.parent == 0) ++degree;
    }
    cell.root_degrees.push_back(degree);
    degree_sum += degree;
  }
  cell.mc_solve_rate =
      static_cast<double>(solved) / static_cast<double>(trees);
  cell.mean_root_degree =
      static_cast<double>(degree_sum) / static_cast<double>(trees);
  return cell;
}

void write_manifest(const RunManifest& m, const std::string& path) {
  nlohmann::json statuses = nlohmann::json::object();
  for (const auto& [id, s] : m.statuses) {
    statuses[id] = std::string(problem_status_name(s));
  }
  nlohmann::json j = {{"config_digest", m.config_digest},
                      {"statuses", statuses},
                      {"solved", m.solved},
                      {"exhausted", m.exhausted},
                      {"errored", m.errored},
                      {"skipped", m.skipped},
                      {"started_at", m.started_at},
                      {"finished_at", m.finished_at}};
  std::ofstream(path) << j.dump(2) << '\n';
}

RunManifest read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("manifest not found: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("manifest unreadable: ") + e.what());
  }
  RunManifest m;
  try {
    m.config_digest = j.at("config_digest").get<std::string>();
    for (const auto& [id, s] : j.at("statuses").items()) {
      const auto status = problem_status_from_name(s.get<std::string>());
      if (!status) throw DataError("manifest: unknown status for " + id);
      m.statuses[id] = *status;
    }
    m.solved = j.value("solved", 0u);
    m.exhausted = j.value("exhausted", 0u);
    m.errored = j.value("errored", 0u);
    m.skipped = j.value("skipped", 0u);
    m.started_at = j.value("started_at", "");
    m.finished_at = j.value("finished_at", "");
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("manifest malformed: ") + e.what());
  }
  return m;
}

}  // namespace refinery::run
