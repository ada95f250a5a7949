#include <doctest.h>

#include <atomic>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "refinery/backends.hpp"
#include "refinery/injection.hpp"
#include "test_support.hpp"

using namespace refinery::backend;
using nlohmann::json;

namespace {

// Stub HTTP service bound to an ephemeral localhost port.
struct StubServer {
  httplib::Server svr;
  int port = 0;
  std::thread thread;

  explicit StubServer(httplib::Server::Handler handler) {
    svr.Post("/v1/call", std::move(handler));
    port = svr.bind_to_any_port("127.0.0.1");
    REQUIRE(port > 0);
    thread = std::thread([this] { svr.listen_after_bind(); });
    svr.wait_until_ready();
  }
  ~StubServer() {
    svr.stop();
    thread.join();
  }
  std::string url() const {
    return "http://127.0.0.1:" + std::to_string(port) + "/v1/call";
  }
};

RetryPolicy fast_retry() {
  RetryPolicy r;
  r.max_retries = 2;
  r.backoff_base_ms = 1;
  r.timeout_ms = 2000;
  return r;
}

}  // namespace

TEST_CASE("registry rejects malformed templates") {
  TemplateRegistry r = TemplateRegistry::builtin();
  CHECK(r.has("kimina"));
  CHECK(r.has("goedel"));
  CHECK_THROWS_AS(r.get("deepseek"), ConfigError);

  PromptTemplateSet bad;
  bad.family = "bad";
  bad.direct_template = "no slot";
  bad.refine_template = "{LEAN_PROGRAM_AND_COMPILER_FEEDBACK}";
  CHECK_THROWS_AS(r.add(bad), ConfigError);

  bad.direct_template = "{FORMAL_STATEMENT} and {FORMAL_STATEMENT}";
  CHECK_THROWS_AS(r.add(bad), ConfigError);

  bad.direct_template = "{FORMAL_STATEMENT}";
  bad.refine_template = "nothing here";
  CHECK_THROWS_AS(r.add(bad), ConfigError);
}

TEST_CASE("builtin prompts carry the family phrasing") {
  const auto& reg = TemplateRegistry::builtin();
  const auto& kimina = reg.get("kimina");
  const std::string direct =
      build_prompt(PromptMode::Direct, kimina, "theorem t : True := by sorry");
  CHECK(direct.find("Think about and solve the following problem step by "
                    "step in Lean 4.") != std::string::npos);
  CHECK(direct.find("theorem t : True := by sorry") != std::string::npos);
  CHECK(direct.find("{FORMAL_STATEMENT}") == std::string::npos);

  const std::string refine =
      build_prompt(PromptMode::Refine, kimina, "code\n<error>\nx\n</error>");
  CHECK(refine.find("Think about and fix the following Lean 4 code.") !=
        std::string::npos);
  CHECK(refine.find("<error>") != std::string::npos);

  const auto& goedel = reg.get("goedel");
  CHECK(build_prompt(PromptMode::Direct, goedel, "S")
            .find("Complete the following Lean 4 code:") != std::string::npos);
  CHECK(build_prompt(PromptMode::Refine, goedel, "S")
            .find("Fix the following Lean 4 code:") != std::string::npos);
  CHECK(build_prompt(PromptMode::Refine, goedel, "S")
            .find("analyzing compiler errors") != std::string::npos);
}

TEST_CASE("parse_prover_response takes the last complete fence") {
  CHECK(parse_prover_response("```lean4\nfoo\n```") == "foo");
  CHECK(parse_prover_response("junk ```lean4\na\n``` mid ```lean4\nb\n``` t") ==
        "b");
  CHECK(parse_prover_response("no fence at all") == std::nullopt);
  CHECK(parse_prover_response("```lean4\nunclosed") == std::nullopt);
  CHECK(parse_prover_response("```lean4 inline, no newline```") ==
        std::nullopt);
  CHECK(parse_prover_response("```lean4\n```") == "");
  CHECK(parse_prover_response("```lean4\nmulti\nline\nbody\n```") ==
        "multi\nline\nbody");
}

TEST_CASE("format_response round-trips the program for both families") {
  const auto& reg = TemplateRegistry::builtin();
  std::mt19937_64 rng(17);
  for (const char* family : {"kimina", "goedel"}) {
    const auto& set = reg.get(family);
    for (int i = 0; i < 500; ++i) {
      std::string program = test_support::random_text(rng, 80, true);
      // A program ending mid-fence would be ambiguous; the formatter
      // owns the fences, so programs never contain one.
      while (program.find("```") != std::string::npos) {
        program = test_support::random_text(rng, 80, true);
      }
      const std::string thought = test_support::random_text(rng, 40, false);
      const auto parsed =
          parse_prover_response(format_response(set, thought, program));
      REQUIRE(parsed.has_value());
      CHECK(*parsed == program);
    }
  }
}

TEST_CASE("remote prover posts the wire fields and reads text") {
  std::string seen_body;
  std::string seen_auth;
  StubServer stub([&](const httplib::Request& req, httplib::Response& res) {
    seen_body = req.body;
    seen_auth = req.get_header_value("Authorization");
    res.set_content(json{{"text", "echo:" + std::string("ok")}}.dump(),
                    "application/json");
  });
  GenerationParams params;
  params.max_tokens = 77;
  params.temperature = 0.5;
  params.stop = {"</done>"};
  RemoteProver prover(stub.url(), params, fast_retry(), "sekrit");
  CHECK(prover.prove("hello") == "echo:ok");
  const json req = json::parse(seen_body);
  CHECK(req["prompt"] == "hello");
  CHECK(req["max_tokens"] == 77);
  CHECK(req["temperature"] == doctest::Approx(0.5));
  CHECK(req["stop"] == json::array({"</done>"}));
  CHECK(seen_auth == "Bearer sekrit");
}

TEST_CASE("remote prover retries 5xx then succeeds") {
  std::atomic<int> calls{0};
  StubServer stub([&](const httplib::Request&, httplib::Response& res) {
    if (calls++ < 2) {
      res.status = 503;
      return;
    }
    res.set_content(json{{"text", "late"}}.dump(), "application/json");
  });
  RemoteProver prover(stub.url(), {}, fast_retry());
  CHECK(prover.prove("p") == "late");
  CHECK(calls == 3);
}

TEST_CASE("remote prover exhausts retries on persistent 5xx") {
  std::atomic<int> calls{0};
  StubServer stub([&](const httplib::Request&, httplib::Response& res) {
    ++calls;
    res.status = 500;
  });
  RemoteProver prover(stub.url(), {}, fast_retry());
  CHECK_THROWS_AS(prover.prove("p"), TransportError);
  CHECK(calls == 3);  // initial try + 2 retries
}

TEST_CASE("remote prover surfaces 4xx immediately with the body") {
  std::atomic<int> calls{0};
  StubServer stub([&](const httplib::Request&, httplib::Response& res) {
    ++calls;
    res.status = 422;
    res.set_content("prompt too long", "text/plain");
  });
  RemoteProver prover(stub.url(), {}, fast_retry());
  try {
    prover.prove("p");
    FAIL("expected ServiceError");
  } catch (const ServiceError& e) {
    CHECK(e.body == "prompt too long");
  }
  CHECK(calls == 1);
}

TEST_CASE("remote prover rejects malformed bodies") {
  StubServer bad_json([](const httplib::Request&, httplib::Response& res) {
    res.set_content("not json", "text/plain");
  });
  RemoteProver p1(bad_json.url(), {}, fast_retry());
  CHECK_THROWS_AS(p1.prove("p"), ServiceError);

  StubServer no_text([](const httplib::Request&, httplib::Response& res) {
    res.set_content(json{{"output", "x"}}.dump(), "application/json");
  });
  RemoteProver p2(no_text.url(), {}, fast_retry());
  CHECK_THROWS_AS(p2.prove("p"), ServiceError);
}

TEST_CASE("unreachable endpoint raises TransportError") {
  RetryPolicy r = fast_retry();
  r.max_retries = 0;
  RemoteProver prover("http://127.0.0.1:1/v1/call", {}, r);
  CHECK_THROWS_AS(prover.prove("p"), TransportError);
}

TEST_CASE("remote verifier maps results in submission order") {
  StubServer stub([](const httplib::Request& req, httplib::Response& res) {
    const json in = json::parse(req.body);
    REQUIRE(in["header"] == "import Mathlib");
    json results = json::array();
    for (const auto& program : in["programs"]) {
      const bool pass = program.get<std::string>().find("good") == 0;
      json messages = json::array();
      if (!pass) {
        messages.push_back({{"severity", "error"},
                            {"pos", {{"line", 3}, {"column", 7}}},
                            {"data", "unsolved goals"}});
        messages.push_back({{"severity", "warning"}, {"data", "slow"}});
      }
      results.push_back({{"pass", pass}, {"messages", messages}});
    }
    res.set_content(json{{"results", results}}.dump(), "application/json");
  });
  RemoteVerifier verifier(stub.url(), fast_retry());
  const auto out =
      verifier.verify_batch({"bad one", "good one"}, "import Mathlib");
  REQUIRE(out.size() == 2);
  CHECK(!out[0].pass);
  REQUIRE(out[0].diagnostics.size() == 2);
  CHECK(out[0].diagnostics[0].line == 3);
  CHECK(out[0].diagnostics[0].column == 7);
  CHECK(out[0].diagnostics[0].text == "unsolved goals");
  CHECK(out[0].diagnostics[1].severity == refinery::diag::Severity::Warning);
  CHECK(out[1].pass);
  CHECK(out[1].diagnostics.empty());

  const auto single = verifier.verify("good solo", "import Mathlib");
  CHECK(single.pass);
}

TEST_CASE("remote verifier rejects result-count mismatch") {
  StubServer stub([](const httplib::Request&, httplib::Response& res) {
    res.set_content(json{{"results", json::array()}}.dump(),
                    "application/json");
  });
  RemoteVerifier verifier(stub.url(), fast_retry());
  CHECK_THROWS_AS(verifier.verify("p", ""), ServiceError);
}

TEST_CASE("simulation spec validation") {
  CHECK_THROWS_AS(SimulationSpec::uniform(1.5, 0.1, 1).validate(),
                  ConfigError);
  CHECK_THROWS_AS(SimulationSpec::uniform(0.1, -0.1, 1).validate(),
                  ConfigError);
  SimulationSpec degenerate;
  degenerate.error_menu.push_back(
      {{refinery::diag::Severity::Error, 1, std::nullopt, "x"}, 0.0});
  CHECK_THROWS_AS(degenerate.validate(), ConfigError);
  CHECK_NOTHROW(SimulationSpec::uniform(0.2, 0.3, 1).validate());
}

TEST_CASE("simulation verifier decides the toy domain by inspection") {
  SimulationVerifier v;
  CHECK(v.verify("QED 17", "").pass);
  CHECK(v.verify("QED 17\n", "").pass);
  CHECK(!v.verify("QED 17 trailing", "").pass);
  CHECK(!v.verify("PROVE 17", "").pass);
  const auto failed = v.verify("ATTEMPT 4 # linarith failed", "");
  CHECK(!failed.pass);
  REQUIRE(failed.diagnostics.size() == 1);
  CHECK(failed.diagnostics[0].text == "linarith failed");
  CHECK(failed.diagnostics[0].line == 1);
  const auto garbage = v.verify("random stuff", "");
  CHECK(!garbage.pass);
  REQUIRE(garbage.diagnostics.size() == 1);
  CHECK(garbage.diagnostics[0].text == "unsolved goals");
}

TEST_CASE("simulation prover hits the configured rates in closed loop") {
  const auto& templates = TemplateRegistry::builtin().get("kimina");
  const double p_direct = 0.3;
  const double p_refine = 0.6;
  SimulationProver prover(SimulationSpec::uniform(p_direct, p_refine, 99),
                          templates);
  SimulationVerifier verifier;

  const int n = 20000;
  int direct_hits = 0;
  std::vector<std::string> failures;
  const std::string direct_prompt =
      build_prompt(PromptMode::Direct, templates, "PROVE 7");
  for (int i = 0; i < n; ++i) {
    const auto parsed = parse_prover_response(prover.prove(direct_prompt));
    REQUIRE(parsed.has_value());
    const auto vr = verifier.verify(*parsed, "");
    if (vr.pass) {
      ++direct_hits;
    } else if (failures.size() < 2000) {
      failures.push_back(*parsed);
    }
  }
  // 3.3 sigma band around the binomial mean.
  const double sigma = std::sqrt(p_direct * (1 - p_direct) / n);
  CHECK(std::abs(direct_hits / double(n) - p_direct) < 3.3 * sigma);

  int refine_hits = 0;
  int refine_tries = 0;
  for (const auto& attempt : failures) {
    const auto vr = verifier.verify(attempt, "");
    const auto annotated =
        refinery::inject::inject_diagnostics(attempt, vr.diagnostics);
    const std::string prompt =
        build_prompt(PromptMode::Refine, templates, annotated.text);
    const auto parsed = parse_prover_response(prover.prove(prompt));
    REQUIRE(parsed.has_value());
    ++refine_tries;
    if (verifier.verify(*parsed, "").pass) ++refine_hits;
  }
  REQUIRE(refine_tries == 2000);
  const double rsigma = std::sqrt(p_refine * (1 - p_refine) / refine_tries);
  CHECK(std::abs(refine_hits / double(refine_tries) - p_refine) <
        3.3 * rsigma);
}

TEST_CASE("simulation prover is deterministic per seed") {
  const auto& templates = TemplateRegistry::builtin().get("kimina");
  const std::string prompt =
      build_prompt(PromptMode::Direct, templates, "PROVE 3");
  SimulationProver a(SimulationSpec::uniform(0.4, 0.2, 5), templates);
  SimulationProver b(SimulationSpec::uniform(0.4, 0.2, 5), templates);
  for (int i = 0; i < 50; ++i) CHECK(a.prove(prompt) == b.prove(prompt));
}
