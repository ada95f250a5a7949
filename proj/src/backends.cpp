#include "refinery/backends.hpp"

#include <cctype>
#include <chrono>
#include <cstdlib>
#include <thread>

#include <httplib.h>
#include <json.hpp>

namespace refinery::backend {

// ---------------------------------------------------------------------------
// Templates

namespace {

constexpr std::string_view kDirectSlot = "{FORMAL_STATEMENT}";
constexpr std::string_view kRefineSlot = "{LEAN_PROGRAM_AND_COMPILER_FEEDBACK}";

std::size_t count_occurrences(const std::string& text, std::string_view what) {
  std::size_t n = 0;
  for (std::size_t pos = text.find(what); pos != std::string::npos;
       pos = text.find(what, pos + what.size())) {
    ++n;
  }
  return n;
}

std::string substitute(const std::string& tmpl, std::string_view slot,
                       const std::string& payload) {
  const std::size_t pos = tmpl.find(slot);
  std::string out = tmpl;
  out.replace(pos, slot.size(), payload);
  return out;
}

PromptTemplateSet kimina_templates() {
  PromptTemplateSet s;
  s.family = "kimina";
  s.direct_template =
      "Think about and solve the following problem step by step in Lean 4.\n"
      "```lean4\n"
      "{FORMAL_STATEMENT}\n"
      "```\n";
  s.refine_template =
      "Think about and fix the following Lean 4 code.\n"
      "```lean4\n"
      "{LEAN_PROGRAM_AND_COMPILER_FEEDBACK}\n"
      "```\n";
  s.response_prefix = "<think>\n";
  s.response_infix = "\n</think>\n\n";
  return s;
}

PromptTemplateSet goedel_templates() {
  PromptTemplateSet s;
  s.family = "goedel";
  s.direct_template =
      "Complete the following Lean 4 code:\n"
      "```lean4\n"
      "{FORMAL_STATEMENT}\n"
      "```\n"
      "\n"
      "Before producing the Lean 4 code to formally prove the given theorem, "
      "provide a detailed proof plan outlining the main proof steps and "
      "strategies. The plan should highlight key ideas, intermediate lemmas, "
      "and proof structures that will guide the construction of the final "
      "formal proof.\n";
  s.refine_template =
      "Fix the following Lean 4 code:\n"
      "```lean4\n"
      "{LEAN_PROGRAM_AND_COMPILER_FEEDBACK}\n"
      "```\n"
      "\n"
      "Before producing the Lean 4 code to formally prove the given theorem, "
      "provide a detailed proof plan analyzing compiler errors and proof "
      "steps. The plan should highlight key ideas, intermediate lemmas, and "
      "proof structures that will guide the construction of the final formal "
      "proof.\n";
  s.response_prefix = "### Detailed Proof and Analysis\n";
  s.response_infix = "\n\n### Complete Lean 4 Proof\n\n";
  return s;
}

}  // namespace

const TemplateRegistry& TemplateRegistry::builtin() {
  static const TemplateRegistry r = [] {
    TemplateRegistry reg;
    reg.add(kimina_templates());
    reg.add(goedel_templates());
    return reg;
  }();
  return r;
}

void TemplateRegistry::add(PromptTemplateSet set) {
  if (count_occurrences(set.direct_template, kDirectSlot) != 1) {
    throw ConfigError("template set '" + set.family +
                      "': direct template must contain " +
                      std::string(kDirectSlot) + " exactly once");
  }
  if (count_occurrences(set.refine_template, kRefineSlot) != 1) {
    throw ConfigError("template set '" + set.family +
                      "': refine template must contain " +
                      std::string(kRefineSlot) + " exactly once");
  }
  families_[set.family] = std::move(set);
}

const PromptTemplateSet& TemplateRegistry::get(const std::string& family) const {
  const auto it = families_.find(family);
  if (it == families_.end()) {
    throw ConfigError("unknown prompt family '" + family + "'");
  }
  return it->second;
}

bool TemplateRegistry::has(const std::string& family) const {
  return families_.count(family) != 0;
}

std::string build_prompt(PromptMode mode, const PromptTemplateSet& set,
                         const std::string& payload) {
  if (mode == PromptMode::Direct) {
    return substitute(set.direct_template, kDirectSlot, payload);
  }
  return substitute(set.refine_template, kRefineSlot, payload);
}

std::optional<std::string> parse_prover_response(const std::string& text) {
  constexpr std::string_view kFence = "```lean4";
  const std::size_t open = text.rfind(kFence);
  if (open == std::string::npos) return std::nullopt;
  std::size_t body = open + kFence.size();
  if (body < text.size() && text[body] == '\r') ++body;
  if (body >= text.size() || text[body] != '\n') return std::nullopt;
  ++body;
  if (text.compare(body, 3, "```") == 0) return std::string();
  const std::size_t close = text.find("\n```", body);
  if (close == std::string::npos) return std::nullopt;
  return text.substr(body, close - body);
}

std::string format_response(const PromptTemplateSet& set,
                            const std::string& thought,
                            const std::string& program) {
  return set.response_prefix + thought + set.response_infix + "```lean4\n" +
         program + "\n```\n";
}

// ---------------------------------------------------------------------------
// Remote clients

std::vector<VerificationResult> Verifier::verify_batch(
    const std::vector<std::string>& programs, const std::string& header) {
  std::vector<VerificationResult> out;
  out.reserve(programs.size());
  for (const auto& p : programs) out.push_back(verify(p, header));
  return out;
}

namespace {

struct SplitUrl {
  std::string base;  // scheme://host[:port]
  std::string path;
};

SplitUrl split_url(const std::string& url) {
  const std::size_t scheme_end = url.find("://");
  if (scheme_end == std::string::npos) {
    throw ConfigError("endpoint url missing scheme: " + url);
  }
  const std::size_t path_start = url.find('/', scheme_end + 3);
  if (path_start == std::string::npos) return {url, "/"};
  return {url.substr(0, path_start), url.substr(path_start)};
}

// Posts JSON with retry on connection failures and 5xx. 4xx responses
// are surfaced immediately as ServiceError.
std::string post_json_with_retry(const std::string& url,
                                 const std::string& token,
                                 const RetryPolicy& retry,
                                 const std::string& body) {
  const SplitUrl split = split_url(url);
  std::string last_failure = "no attempt made";
  for (int attempt = 0; attempt <= retry.max_retries; ++attempt) {
    if (attempt > 0) {
      const auto delay =
          std::chrono::milliseconds(retry.backoff_base_ms) * (1 << (attempt - 1));
      std::this_thread::sleep_for(delay);
    }
    httplib::Client cli(split.base);
    cli.set_connection_timeout(std::chrono::milliseconds(retry.timeout_ms));
    cli.set_read_timeout(std::chrono::milliseconds(retry.timeout_ms));
    cli.set_write_timeout(std::chrono::milliseconds(retry.timeout_ms));
    httplib::Headers headers;
    if (!token.empty()) headers.emplace("Authorization", "Bearer " + token);
    const auto res = cli.Post(split.path, headers, body, "application/json");
    if (!res) {
      last_failure = "transport failure: " + httplib::to_string(res.error());
      continue;
    }
    if (res->status / 100 == 2) return res->body;
    if (res->status / 100 == 5) {
      last_failure = "server error " + std::to_string(res->status);
      continue;
    }
    throw ServiceError("service returned status " + std::to_string(res->status),
                       res->body);
  }
  throw TransportError("retries exhausted against " + url + " (" +
                       last_failure + ")");
}

diag::RawDiagnostic diagnostic_from_json(const nlohmann::json& m) {
  diag::RawDiagnostic d;
  const auto sev = diag::severity_from_name(m.value("severity", "error"));
  d.severity = sev.value_or(diag::Severity::Error);
  if (m.contains("pos") && m["pos"].is_object()) {
    const auto& pos = m["pos"];
    if (pos.contains("line") && pos["line"].is_number()) {
      d.line = pos["line"].get<int>();
    }
    if (pos.contains("column") && pos["column"].is_number()) {
      d.column = pos["column"].get<int>();
    }
  }
  d.text = m.value("data", "");
  return d;
}

}  // namespace

RemoteProver::RemoteProver(std::string url, GenerationParams params,
                           RetryPolicy retry, std::string token)
    : url_(std::move(url)),
      params_(std::move(params)),
      retry_(retry),
      token_(std::move(token)) {}

std::string RemoteProver::prove(const std::string& prompt) {
  nlohmann::json req = {{"prompt", prompt},
                        {"max_tokens", params_.max_tokens},
                        {"temperature", params_.temperature},
                        {"stop", params_.stop}};
  const std::string body =
      post_json_with_retry(url_, token_, retry_, req.dump());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(body);
  } catch (const nlohmann::json::parse_error&) {
    throw ServiceError("prover returned non-JSON body", body);
  }
  if (!j.contains("text") || !j["text"].is_string()) {
    throw ServiceError("prover response missing 'text' field", body);
  }
  return j["text"].get<std::string>();
}

RemoteVerifier::RemoteVerifier(std::string url, RetryPolicy retry,
                               std::string token)
    : url_(std::move(url)), retry_(retry), token_(std::move(token)) {}

std::vector<VerificationResult> RemoteVerifier::verify_batch(
    const std::vector<std::string>& programs, const std::string& header) {
  const auto start = std::chrono::steady_clock::now();
  nlohmann::json req = {{"programs", programs}, {"header", header}};
  const std::string body =
      post_json_with_retry(url_, token_, retry_, req.dump());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(body);
  } catch (const nlohmann::json::parse_error&) {
    throw ServiceError("verifier returned non-JSON body", body);
  }
  if (!j.contains("results") || !j["results"].is_array() ||
      j["results"].size() != programs.size()) {
    throw ServiceError("verifier results do not match submission", body);
  }
  const double elapsed =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
          .count();
  std::vector<VerificationResult> out;
  out.reserve(programs.size());
  for (const auto& r : j["results"]) {
    VerificationResult vr;
    vr.pass = r.value("pass", false);
    if (r.contains("messages")) {
      for (const auto& m : r["messages"]) {
        vr.diagnostics.push_back(diagnostic_from_json(m));
      }
    }
    vr.wall_time = elapsed / static_cast<double>(programs.size());
    out.push_back(std::move(vr));
  }
  return out;
}

VerificationResult RemoteVerifier::verify(const std::string& program,
                                          const std::string& header) {
  return verify_batch({program}, header).front();
}

// ---------------------------------------------------------------------------
// Simulation backends

void SimulationSpec::validate() const {
  if (p_direct < 0.0 || p_direct > 1.0) {
    throw ConfigError("simulation: p_direct must be in [0,1]");
  }
  for (const auto& [sig, p] : fix_prob) {
    if (p < 0.0 || p > 1.0) {
      throw ConfigError("simulation: fix_prob['" + sig +
                        "'] must be in [0,1]");
    }
  }
  for (const auto& w : error_menu) {
    if (!(w.weight > 0.0)) {
      throw ConfigError("simulation: error menu weights must be positive");
    }
    if (w.diagnostic.text.empty()) {
      throw ConfigError("simulation: error menu entries need text");
    }
  }
}

SimulationSpec SimulationSpec::uniform(double p_direct, double p_refine,
                                       std::uint64_t seed) {
  SimulationSpec spec;
  spec.p_direct = p_direct;
  spec.seed = seed;
  const std::vector<std::string> menu = {
      "unsolved goals",
      "linarith failed to find a contradiction",
      "unknown identifier `id'",
  };
  for (const auto& text : menu) {
    spec.fix_prob[text] = p_refine;
    spec.error_menu.push_back(
        {diag::RawDiagnostic{diag::Severity::Error, 1, std::nullopt, text},
         1.0});
  }
  return spec;
}

namespace {

constexpr std::string_view kProveMarker = "PROVE ";
constexpr std::string_view kAttemptMarker = "ATTEMPT ";
constexpr std::string_view kQedMarker = "QED ";

std::optional<long> parse_toy_key(const std::string& text,
                                  std::string_view marker) {
  const std::size_t pos = text.find(marker);
  if (pos == std::string::npos) return std::nullopt;
  std::size_t i = pos + marker.size();
  if (i >= text.size() || !std::isdigit(static_cast<unsigned char>(text[i]))) {
    return std::nullopt;
  }
  long k = 0;
  for (; i < text.size() && std::isdigit(static_cast<unsigned char>(text[i]));
       ++i) {
    k = k * 10 + (text[i] - '0');
  }
  return k;
}

// First <error> block body in an annotated refinement payload.
std::optional<std::string> first_error_block(const std::string& text) {
  const std::size_t open = text.find("<error>\n");
  if (open == std::string::npos) return std::nullopt;
  const std::size_t body = open + 8;
  const std::size_t close = text.find("\n</error>", body);
  if (close == std::string::npos) return std::nullopt;
  return text.substr(body, close - body);
}

}  // namespace

SimulationProver::SimulationProver(SimulationSpec spec,
                                   const PromptTemplateSet& templates)
    : spec_(std::move(spec)), templates_(templates), rng_(spec_.seed) {
  spec_.validate();
  std::vector<double> weights;
  weights.reserve(spec_.error_menu.size());
  for (const auto& w : spec_.error_menu) weights.push_back(w.weight);
  if (!weights.empty()) {
    menu_dist_ = std::discrete_distribution<std::size_t>(weights.begin(),
                                                         weights.end());
  }
}

std::string SimulationProver::prove(const std::string& prompt) {
  const bool is_refine = prompt.find("<error>") != std::string::npos;

  long key = 0;
  double success_prob = 0.0;
  if (is_refine) {
    key = parse_toy_key(prompt, kAttemptMarker).value_or(0);
    if (const auto block = first_error_block(prompt)) {
      const std::string sig = diag::normalize_text(*block).template_text;
      const auto it = spec_.fix_prob.find(sig);
      if (it != spec_.fix_prob.end()) success_prob = it->second;
    }
  } else {
    key = parse_toy_key(prompt, kProveMarker).value_or(0);
    success_prob = spec_.p_direct;
  }

  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const bool success = unit(rng_) < success_prob;

  std::string program;
  std::string thought;
  if (success) {
    program = std::string(kQedMarker) + std::to_string(key);
    thought = is_refine ? "The reported error pinpoints the failing step; "
                          "rebuilding the proof from there closes the goal."
                        : "The statement admits a direct proof.";
  } else {
    std::string diag_text = "unsolved goals";
    if (!spec_.error_menu.empty()) {
      diag_text = spec_.error_menu[menu_dist_(rng_)].diagnostic.text;
    }
    program =
        std::string(kAttemptMarker) + std::to_string(key) + " # " + diag_text;
    thought = "Attempting a candidate proof.";
  }
  return format_response(templates_, thought, program);
}

VerificationResult SimulationVerifier::verify(const std::string& program,
                                              const std::string& /*header*/) {
  std::string body = program;
  while (!body.empty() && (body.back() == '\n' || body.back() == '\r')) {
    body.pop_back();
  }

  VerificationResult vr;
  if (const auto key = parse_toy_key(body, kQedMarker);
      key && body == std::string(kQedMarker) + std::to_string(*key)) {
    vr.pass = true;
    return vr;
  }

  vr.pass = false;
  const std::size_t sep = body.find(" # ");
  if (body.rfind(kAttemptMarker, 0) == 0 && sep != std::string::npos) {
    vr.diagnostics.push_back(diag::RawDiagnostic{
        diag::Severity::Error, 1, std::nullopt, body.substr(sep + 3)});
  } else {
    vr.diagnostics.push_back(diag::RawDiagnostic{
        diag::Severity::Error, std::nullopt, std::nullopt, "unsolved goals"});
  }
  return vr;
}

}  // namespace refinery::backend
