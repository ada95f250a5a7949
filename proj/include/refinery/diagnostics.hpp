#pragma once

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace refinery::diag {

enum class Severity { Error, Warning, Info };

std::string_view severity_name(Severity s);
std::optional<Severity> severity_from_name(std::string_view name);

/// One compiler message as reported by a verifier backend. Lines are
/// 1-based, columns 0-based; either may be absent.
struct RawDiagnostic {
  Severity severity = Severity::Error;
  std::optional<int> line;
  std::optional<int> column;
  std::string text;

  bool operator==(const RawDiagnostic&) const = default;
};

/// A normalized, identifier-masked message template. Two messages that
/// differ only in quoted identifiers or goal-state payload share a
/// signature; this is the grouping key for all frequency analysis.
struct ErrorSignature {
  std::string template_text;
  int mask_count = 0;

  bool operator==(const ErrorSignature&) const = default;
};

struct SignatureRow {
  std::string template_text;
  std::size_t count = 0;
  double ratio = 0.0;
};

struct SignatureTable {
  std::vector<SignatureRow> rows;
  std::size_t total = 0;
};

// The literal mask token used for quoted identifiers: backtick, i, d,
// apostrophe. Kept bit-identical to published message tables.
inline constexpr std::string_view kMaskToken = "`id'";

ErrorSignature normalize_text(std::string_view text);
ErrorSignature normalize_message(const RawDiagnostic& d);

/// Counts each diagnostic once under its normalized signature. Warnings
/// and infos are skipped unless include_non_errors is set.
SignatureTable signature_frequency_table(const std::vector<RawDiagnostic>& ds,
                                         bool include_non_errors = false);

/// Minimal prefix of rows whose cumulative ratio reaches f. Rejects
/// f <= 0 or f > 1.
SignatureTable top_fraction(const SignatureTable& t, double f);

std::vector<RawDiagnostic> read_diagnostics_jsonl(std::istream& in);
void write_table_csv(const SignatureTable& t, std::ostream& out);
std::string table_to_json(const SignatureTable& t);

}  // namespace refinery::diag
