#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "refinery/diagnostics.hpp"

namespace refinery::backend {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Exhausted retries, connection failures, timeouts.
struct TransportError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Non-retryable service response; carries the response body.
struct ServiceError : std::runtime_error {
  ServiceError(const std::string& what, std::string body)
      : std::runtime_error(what), body(std::move(body)) {}
  std::string body;
};

// ---------------------------------------------------------------------------
// Prompt templates

enum class PromptMode { Direct, Refine };

struct PromptTemplateSet {
  std::string family;
  std::string direct_template;  // contains {FORMAL_STATEMENT} once
  std::string refine_template;  // contains {LEAN_PROGRAM_AND_COMPILER_FEEDBACK} once
  // Response framing around "<thought>" + fenced program, used to
  // format simulated responses in the family's native shape.
  std::string response_prefix;   // text before the thought
  std::string response_infix;    // text between thought and ```lean4 fence
};

class TemplateRegistry {
 public:
  /// Registry preloaded with the kimina and goedel families. Copy it
  /// to register more.
  static const TemplateRegistry& builtin();

  void add(PromptTemplateSet set);
  const PromptTemplateSet& get(const std::string& family) const;
  bool has(const std::string& family) const;

 private:
  std::map<std::string, PromptTemplateSet> families_;
};

std::string build_prompt(PromptMode mode, const PromptTemplateSet& set,
                         const std::string& payload);

/// Contents of the last ```lean4 fenced block, or nullopt when the
/// response carries no complete fence.
std::optional<std::string> parse_prover_response(const std::string& text);

/// Wraps (thought, program) in the family's response shape, the inverse
/// of parse_prover_response on the program component.
std::string format_response(const PromptTemplateSet& set,
                            const std::string& thought,
                            const std::string& program);

// ---------------------------------------------------------------------------
// Gateway interfaces

struct VerificationResult {
  bool pass = false;
  std::vector<diag::RawDiagnostic> diagnostics;
  double wall_time = 0.0;
};

class Prover {
 public:
  virtual ~Prover() = default;
  virtual std::string prove(const std::string& prompt) = 0;
};

class Verifier {
 public:
  virtual ~Verifier() = default;
  virtual VerificationResult verify(const std::string& program,
                                    const std::string& header) = 0;
  virtual std::vector<VerificationResult> verify_batch(
      const std::vector<std::string>& programs, const std::string& header);
};

// ---------------------------------------------------------------------------
// Remote clients

struct GenerationParams {
  int max_tokens = 2048;
  double temperature = 1.0;
  std::vector<std::string> stop;
};

struct RetryPolicy {
  int max_retries = 2;       // retries after the first attempt
  int backoff_base_ms = 100;
  int timeout_ms = 30000;
};

class RemoteProver : public Prover {
 public:
  RemoteProver(std::string url, GenerationParams params, RetryPolicy retry,
               std::string token = "");
  std::string prove(const std::string& prompt) override;

 private:
  std::string url_;
  GenerationParams params_;
  RetryPolicy retry_;
  std::string token_;
};

class RemoteVerifier : public Verifier {
 public:
  RemoteVerifier(std::string url, RetryPolicy retry, std::string token = "");
  VerificationResult verify(const std::string& program,
                            const std::string& header) override;
  std::vector<VerificationResult> verify_batch(
      const std::vector<std::string>& programs,
      const std::string& header) override;

 private:
  std::string url_;
  RetryPolicy retry_;
  std::string token_;
};

// ---------------------------------------------------------------------------
// Simulation backends
//
// Toy domain: a problem is the line "PROVE k" for integer k, the one
// passing proof is the exact line "QED k", and a failing attempt is
// "ATTEMPT k # <diagnostic text>". Verification is decidable by string
// inspection, so the whole search loop runs at desk scale.

struct WeightedDiagnostic {
  diag::RawDiagnostic diagnostic;
  double weight = 1.0;
};

struct SimulationSpec {
  double p_direct = 0.0;
  std::map<std::string, double> fix_prob;  // keyed by normalized signature
  std::vector<WeightedDiagnostic> error_menu;
  std::uint64_t seed = 0;

  void validate() const;
  /// One standard error per menu entry at line 1, useful as a default.
  static SimulationSpec uniform(double p_direct, double p_refine,
                                std::uint64_t seed);
};

class SimulationProver : public Prover {
 public:
  SimulationProver(SimulationSpec spec, const PromptTemplateSet& templates);
  std::string prove(const std::string& prompt) override;

 private:
  SimulationSpec spec_;
  PromptTemplateSet templates_;
  std::mt19937_64 rng_;
  std::discrete_distribution<std::size_t> menu_dist_;
};

class SimulationVerifier : public Verifier {
 public:
  VerificationResult verify(const std::string& program,
                            const std::string& header) override;
};

}  // namespace refinery::backend
