#include "refinery/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace refinery::diag {

std::string_view severity_name(Severity s) {
  switch (s) {
    case Severity::Error: return "error";
    case Severity::Warning: return "warning";
    case Severity::Info: return "info";
  }
  return "error";
}

std::optional<Severity> severity_from_name(std::string_view name) {
  if (name == "error") return Severity::Error;
  if (name == "warning") return Severity::Warning;
  if (name == "info") return Severity::Info;
  return std::nullopt;
}

namespace {

bool is_space(char c) {
  return c == ' ' || c == '\t' || c == '\r' || c == '\v' || c == '\f';
}

// Masks one quoted span starting at `pos` (an opener character). The
// closer for a backtick opener is the next backtick or apostrophe; for
// an apostrophe opener, the next apostrophe. A span is masked only when
// a closer exists and the enclosed text carries no whitespace;
// otherwise the text from the opener on is kept verbatim and scanning
// resumes after the opener.
struct MaskResult {
  bool masked = false;
  std::size_t resume = 0;  // index to continue scanning from
};

bool mask_token_at(std::string_view line, std::size_t pos) {
  return line.compare(pos, kMaskToken.size(), kMaskToken) == 0;
}

MaskResult try_mask(std::string_view line, std::size_t pos, std::string& out) {
  const char opener = line[pos];
  std::size_t close = std::string_view::npos;
  for (std::size_t j = pos + 1; j < line.size(); ++j) {
    // Delimiters belonging to an existing mask token are not closers;
    // treating them as such would break re-normalization.
    if (mask_token_at(line, j)) {
      j += kMaskToken.size() - 1;
      continue;
    }
    const char c = line[j];
    if (c == '\'' || (opener == '`' && c == '`')) {
      close = j;
      break;
    }
  }
  if (close == std::string_view::npos) {
    // Unbalanced opener: leave the rest of the line untouched.
    out.append(line.substr(pos));
    return {false, line.size()};
  }
  const std::string_view inner = line.substr(pos + 1, close - pos - 1);
  if (inner.find_first_of(" \t") != std::string_view::npos) {
    out.push_back(opener);
    return {false, pos + 1};
  }
  out.append(kMaskToken);
  return {true, close + 1};
}

}  // namespace

ErrorSignature normalize_text(std::string_view text) {
  // Everything past the first line (goal states, context) is dropped.
  const std::size_t eol = text.find('\n');
  std::string_view line = text.substr(0, eol);

  std::string masked;
  masked.reserve(line.size());
  int mask_count = 0;
  std::size_t i = 0;
  while (i < line.size()) {
    const char c = line[i];
    if (mask_token_at(line, i)) {
      masked.append(kMaskToken);
      i += kMaskToken.size();
    } else if (c == '`' || c == '\'') {
      const MaskResult r = try_mask(line, i, masked);
      if (r.masked) ++mask_count;
      i = r.resume;
    } else {
      masked.push_back(c);
      ++i;
    }
  }

  std::string collapsed;
  collapsed.reserve(masked.size());
  bool in_run = false;
  for (const char c : masked) {
    if (is_space(c)) {
      in_run = true;
      continue;
    }
    if (in_run && !collapsed.empty()) collapsed.push_back(' ');
    in_run = false;
    collapsed.push_back(c);
  }
  return {std::move(collapsed), mask_count};
}

ErrorSignature normalize_message(const RawDiagnostic& d) {
  return normalize_text(d.text);
}

SignatureTable signature_frequency_table(const std::vector<RawDiagnostic>& ds,
                                         bool include_non_errors) {
  std::map<std::string, std::size_t> counts;
  std::size_t total = 0;
  for (const auto& d : ds) {
    if (!include_non_errors && d.severity != Severity::Error) continue;
    ++counts[normalize_message(d).template_text];
    ++total;
  }
  SignatureTable t;
  t.total = total;
  t.rows.reserve(counts.size());
  for (auto& [tmpl, count] : counts) {
    t.rows.push_back({tmpl, count,
                      total == 0 ? 0.0 : static_cast<double>(count) /
                                             static_cast<double>(total)});
  }
  std::sort(t.rows.begin(), t.rows.end(),
            [](const SignatureRow& a, const SignatureRow& b) {
              if (a.count != b.count) return a.count > b.count;
              return a.template_text < b.template_text;
            });
  return t;
}

SignatureTable top_fraction(const SignatureTable& t, double f) {
  if (!(f > 0.0) || f > 1.0) {
    throw std::invalid_argument("top_fraction: fraction must be in (0, 1]");
  }
  SignatureTable out;
  out.total = t.total;
  // Accumulate counts rather than ratios so the cutoff is exact.
  const double target = f * static_cast<double>(t.total);
  std::size_t cumulative = 0;
  for (const auto& row : t.rows) {
    out.rows.push_back(row);
    cumulative += row.count;
    if (static_cast<double>(cumulative) >= target - 1e-12) break;
  }
  return out;
}

std::vector<RawDiagnostic> read_diagnostics_jsonl(std::istream& in) {
  std::vector<RawDiagnostic> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw std::runtime_error("diagnostics jsonl: bad record at line " +
                               std::to_string(lineno) + ": " + e.what());
    }
    RawDiagnostic d;
    if (j.contains("severity")) {
      const auto sev = severity_from_name(j["severity"].get<std::string>());
      if (!sev) {
        throw std::runtime_error("diagnostics jsonl: unknown severity at line " +
                                 std::to_string(lineno));
      }
      d.severity = *sev;
    }
    if (j.contains("line") && !j["line"].is_null()) d.line = j["line"].get<int>();
    if (j.contains("column") && !j["column"].is_null()) {
      d.column = j["column"].get<int>();
    }
    d.text = j.at("text").get<std::string>();
    if (d.text.empty()) {
      throw std::runtime_error("diagnostics jsonl: empty text at line " +
                               std::to_string(lineno));
    }
    if (d.line && *d.line < 1) {
      throw std::runtime_error("diagnostics jsonl: line must be >= 1 at line " +
                               std::to_string(lineno));
    }
    out.push_back(std::move(d));
  }
  return out;
}

namespace {

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (const char c : s) {
    if (c == '"') out += "\"\"";
    else out.push_back(c);
  }
  out += "\"";
  return out;
}

}  // namespace

void write_table_csv(const SignatureTable& t, std::ostream& out) {
  out << "template,count,ratio\n";
  for (const auto& row : t.rows) {
    out << csv_escape(row.template_text) << ',' << row.count << ','
        << row.ratio << '\n';
  }
}

std::string table_to_json(const SignatureTable& t) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : t.rows) {
    rows.push_back({{"template", row.template_text},
                    {"count", row.count},
                    {"ratio", row.ratio}});
  }
  nlohmann::json j = {{"total", t.total}, {"rows", rows}};
  return j.dump(2);
}

}  // namespace refinery::diag
