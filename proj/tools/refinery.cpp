// Operator CLI: run searches over a problem set, extract training data,
// and emit analysis reports.

#include <cstdlib>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "refinery/analysis.hpp"
#include "refinery/backends.hpp"
#include "refinery/diagnostics.hpp"
#include "refinery/runner.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitBackend = 2;
constexpr int kExitData = 3;

std::string env_or(const char* name, const std::string& fallback) {
  const char* v = std::getenv(name);
  return v ? v : fallback;
}

// Fills a RunConfig from an optional JSON config file, then environment
// variables, then flags (handled by the caller): flags > env > file.
void apply_config_file(refinery::run::RunConfig& cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw refinery::run::DataError("config file not found: " + path);
  }
  nlohmann::json j;
  in >> j;
  if (j.contains("problems")) cfg.problems_path = j["problems"];
  if (j.contains("strategy")) {
    const auto kind =
        refinery::search::strategy_from_name(j["strategy"].get<std::string>());
    if (!kind) {
      throw refinery::run::DataError("config: unknown strategy");
    }
    cfg.strategy.kind = *kind;
  }
  if (j.contains("budget")) cfg.strategy.budget = j["budget"];
  if (j.contains("max_depth")) cfg.strategy.max_depth = j["max_depth"];
  if (j.contains("temperature")) cfg.strategy.temperature = j["temperature"];
  if (j.contains("seed")) cfg.strategy.seed = j["seed"];
  if (j.contains("backend")) {
    cfg.backend = j["backend"] == "remote"
                      ? refinery::run::BackendKind::Remote
                      : refinery::run::BackendKind::Simulate;
  }
  if (j.contains("family")) cfg.family = j["family"];
  if (j.contains("out")) cfg.out_dir = j["out"];
  if (j.contains("parallel")) cfg.parallel_problems = j["parallel"];
  if (j.contains("prover_url")) cfg.prover_url = j["prover_url"];
  if (j.contains("verifier_url")) cfg.verifier_url = j["verifier_url"];
  if (j.contains("max_tokens")) cfg.generation.max_tokens = j["max_tokens"];
  if (j.contains("retries")) cfg.retry.max_retries = j["retries"];
  if (j.contains("backoff_ms")) cfg.retry.backoff_base_ms = j["backoff_ms"];
  if (j.contains("timeout_ms")) cfg.retry.timeout_ms = j["timeout_ms"];
  if (j.contains("simulation")) {
    const auto& s = j["simulation"];
    refinery::backend::SimulationSpec spec;
    spec.p_direct = s.value("p_direct", 0.0);
    spec.seed = s.value("seed", 0);
    if (s.contains("fix_prob")) {
      for (const auto& [sig, p] : s["fix_prob"].items()) {
        spec.fix_prob[sig] = p.get<double>();
      }
    }
    if (s.contains("error_menu")) {
      for (const auto& e : s["error_menu"]) {
        refinery::diag::RawDiagnostic d;
        d.severity = refinery::diag::Severity::Error;
        d.text = e.at("text").get<std::string>();
        if (e.contains("line")) d.line = e["line"].get<int>();
        spec.error_menu.push_back({d, e.value("weight", 1.0)});
      }
    } else {
      const double p_refine = s.value("p_refine", 0.0);
      spec = refinery::backend::SimulationSpec::uniform(spec.p_direct,
                                                        p_refine, spec.seed);
      spec.p_direct = s.value("p_direct", 0.0);
    }
    spec.validate();
    cfg.sim = spec;
  }
}

int run_subcommand(const refinery::run::RunConfig& cfg) {
  const auto manifest = refinery::run::run_command(cfg);
  std::cout << "run complete: " << manifest.solved << " solved, "
            << manifest.exhausted << " exhausted, " << manifest.errored
            << " errored (" << manifest.skipped << " skipped)\n"
            << "manifest: " << cfg.out_dir << "/manifest.json\n";
  return manifest.errored == 0 ? kExitOk : kExitBackend;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Verifier-guided proof-search orchestration engine"};
  app.require_subcommand(1);

  refinery::run::RunConfig cfg;
  cfg.prover_url = env_or("PROVER_URL", "");
  cfg.verifier_url = env_or("VERIFIER_URL", "");
  cfg.prover_token = env_or("PROVER_TOKEN", "");
  cfg.verifier_token = env_or("VERIFIER_TOKEN", "");

  std::string config_path;
  std::string strategy_name = "random";
  std::string backend_name = "simulate";

  auto add_run_flags = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "JSON config file");
    cmd->add_option("--problems", cfg.problems_path, "problem set JSONL");
    cmd->add_option("--strategy", strategy_name, "bfs|dfs|random|value");
    cmd->add_option("--budget", cfg.strategy.budget, "prover calls per problem");
    cmd->add_option("--max-depth", [&cfg](const std::vector<std::string>& v) {
      cfg.strategy.max_depth = std::stoi(v.front());
      return true;
    }, "depth cap (default: budget)");
    cmd->add_option("--temperature", cfg.strategy.temperature,
                    "softmax temperature for value-guided search");
    cmd->add_option("--seed", cfg.strategy.seed, "top-level seed");
    cmd->add_option("--backend", backend_name, "remote|simulate");
    cmd->add_option("--parallel", cfg.parallel_problems,
                    "concurrent problems");
    cmd->add_option("--out", cfg.out_dir, "run directory");
    cmd->add_option("--family", cfg.family, "prompt family (kimina|goedel)");
    cmd->add_option("--prover-url", cfg.prover_url, "prover endpoint");
    cmd->add_option("--verifier-url", cfg.verifier_url, "verifier endpoint");
    cmd->add_option("--p-direct", cfg.sim.p_direct,
                    "simulation: direct success probability");
  };

  auto* run_cmd = app.add_subcommand("run", "run searches over a problem set");
  add_run_flags(run_cmd);
  auto* resume_cmd =
      app.add_subcommand("resume", "resume a run (skips finished problems)");
  add_run_flags(resume_cmd);

  std::string report_dir, report_kind_name = "signatures";
  refinery::run::ReportParams report_params;
  auto* report_cmd = app.add_subcommand("report", "emit analysis reports");
  report_cmd->add_option("--run-dir", report_dir, "run directory")->required();
  report_cmd->add_option(
      "--kind", report_kind_name,
      "signatures|fix_table|budget_model|two_sample|distances");
  report_cmd->add_option("--p-direct", report_params.p_direct, "P_direct");
  report_cmd->add_option("--p-refine", report_params.p_refine, "P_refine");
  report_cmd->add_option("--n", report_params.n, "budget n");
  report_cmd->add_option("--n-perm", report_params.n_perm,
                         "permutation count");
  report_cmd->add_option("--seed", report_params.seed, "permutation seed");

  std::string extract_run_dir, extract_out;
  std::string extract_family = "kimina";
  std::uint64_t extract_seed = 0;
  auto* extract_cmd =
      app.add_subcommand("extract-data", "export supervision data");
  extract_cmd->add_option("--run-dir", extract_run_dir, "run directory")
      ->required();
  extract_cmd->add_option("--out", extract_out, "output directory")
      ->required();
  extract_cmd->add_option("--family", extract_family, "prompt family");
  extract_cmd->add_option("--seed", extract_seed, "subsample seed");

  std::string normalize_in, normalize_out;
  bool normalize_all = false;
  auto* normalize_cmd = app.add_subcommand(
      "normalize", "signature tables from raw diagnostic JSONL");
  normalize_cmd->add_option("--in", normalize_in, "diagnostics JSONL")
      ->required();
  normalize_cmd->add_option("--out", normalize_out,
                            "output CSV path (default: stdout)");
  normalize_cmd->add_flag("--include-non-errors", normalize_all,
                          "count warnings and infos too");

  double calib_pd = 0.05, calib_pr = 0.1;
  int calib_n = 64, calib_trees = 5000;
  std::uint64_t calib_seed = 0;
  auto* calib_cmd = app.add_subcommand(
      "simulate-calibrate", "Monte-Carlo vs analytic P1/P2 comparison");
  calib_cmd->add_option("--p-direct", calib_pd, "P_direct");
  calib_cmd->add_option("--p-refine", calib_pr, "P_refine");
  calib_cmd->add_option("--n", calib_n, "budget n");
  calib_cmd->add_option("--trees", calib_trees, "trees to simulate");
  calib_cmd->add_option("--seed", calib_seed, "seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);  // help text, exit 0
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (run_cmd->parsed() || resume_cmd->parsed()) {
      CLI::App* cmd = run_cmd->parsed() ? run_cmd : resume_cmd;
      if (!config_path.empty()) {
        refinery::run::RunConfig file_cfg = cfg;
        apply_config_file(file_cfg, config_path);
        // Flags win over the file: re-apply anything given explicitly.
        if (cmd->count("--problems") == 0) cfg.problems_path = file_cfg.problems_path;
        if (cmd->count("--strategy") == 0) cfg.strategy.kind = file_cfg.strategy.kind;
        if (cmd->count("--budget") == 0) cfg.strategy.budget = file_cfg.strategy.budget;
        if (cmd->count("--seed") == 0) cfg.strategy.seed = file_cfg.strategy.seed;
        if (cmd->count("--backend") == 0) cfg.backend = file_cfg.backend;
        if (cmd->count("--family") == 0) cfg.family = file_cfg.family;
        if (cmd->count("--out") == 0) cfg.out_dir = file_cfg.out_dir;
        if (cmd->count("--parallel") == 0) cfg.parallel_problems = file_cfg.parallel_problems;
        if (cmd->count("--prover-url") == 0) cfg.prover_url = file_cfg.prover_url;
        if (cmd->count("--verifier-url") == 0) cfg.verifier_url = file_cfg.verifier_url;
        if (cmd->count("--p-direct") == 0) {
          cfg.sim = file_cfg.sim;
        } else {
          const double flag_pd = cfg.sim.p_direct;
          cfg.sim = file_cfg.sim;
          cfg.sim.p_direct = flag_pd;
        }
        cfg.generation = file_cfg.generation;
        cfg.retry = file_cfg.retry;
      }
      // Only let the name flags override when given explicitly (or when no
      // config file set them), so file-provided values survive the defaults.
      if (cmd->count("--strategy") > 0 || config_path.empty()) {
        const auto kind = refinery::search::strategy_from_name(strategy_name);
        if (!kind) {
          std::cerr << "unknown strategy: " << strategy_name << "\n";
          return kExitUsage;
        }
        cfg.strategy.kind = *kind;
      }
      if (cmd->count("--backend") > 0 || config_path.empty()) {
        if (backend_name == "remote") {
          cfg.backend = refinery::run::BackendKind::Remote;
        } else if (backend_name == "simulate") {
          cfg.backend = refinery::run::BackendKind::Simulate;
        } else {
          std::cerr << "unknown backend: " << backend_name << "\n";
          return kExitUsage;
        }
      }
      if (cfg.problems_path.empty() || cfg.out_dir.empty()) {
        std::cerr << "run: --problems and --out are required\n";
        return kExitUsage;
      }
      return run_subcommand(cfg);
    }

    if (report_cmd->parsed()) {
      const auto kind = refinery::run::report_kind_from_name(report_kind_name);
      if (!kind) {
        std::cerr << "unknown report kind: " << report_kind_name << "\n";
        return kExitUsage;
      }
      const auto written =
          refinery::run::report_command(report_dir, *kind, report_params);
      for (const auto& path : written) std::cout << path << '\n';
      return kExitOk;
    }

    if (extract_cmd->parsed()) {
      const auto written = refinery::run::extract_data_command(
          extract_run_dir, extract_out, extract_family, extract_seed);
      for (const auto& path : written) std::cout << path << '\n';
      return kExitOk;
    }

    if (normalize_cmd->parsed()) {
      std::ifstream in(normalize_in);
      if (!in) {
        std::cerr << "cannot open " << normalize_in << "\n";
        return kExitData;
      }
      const auto ds = refinery::diag::read_diagnostics_jsonl(in);
      const auto table =
          refinery::diag::signature_frequency_table(ds, normalize_all);
      if (normalize_out.empty()) {
        refinery::diag::write_table_csv(table, std::cout);
      } else {
        std::ofstream out(normalize_out);
        refinery::diag::write_table_csv(table, out);
        std::cout << normalize_out << '\n';
      }
      return kExitOk;
    }

    if (calib_cmd->parsed()) {
      const auto cell = refinery::run::simulate_calibrate_cell(
          calib_pd, calib_pr, calib_n, calib_trees, calib_seed);
      std::cout << "p_direct=" << cell.p_direct
                << " p_refine=" << cell.p_refine << " n=" << cell.n
                << " trees=" << cell.trees << "\n"
                << "mc_solve_rate=" << cell.mc_solve_rate
                << " analytic_p1=" << cell.analytic_p1
                << " analytic_p2=" << cell.analytic_p2 << "\n"
                << "mean_root_degree=" << cell.mean_root_degree
                << " harmonic=" << refinery::analysis::harmonic(cell.n)
                << "\n";
      return kExitOk;
    }
  } catch (const refinery::backend::TransportError& e) {
    std::cerr << "backend failure: " << e.what() << "\n";
    return kExitBackend;
  } catch (const refinery::backend::ServiceError& e) {
    std::cerr << "backend failure: " << e.what() << "\n";
    return kExitBackend;
  } catch (const refinery::backend::ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const refinery::run::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const refinery::search::SnapshotError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}
