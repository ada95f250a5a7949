#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "refinery/diagnostics.hpp"

namespace refinery::inject {

inline constexpr std::string_view kErrorOpen = "<error>";
inline constexpr std::string_view kErrorClose = "</error>";

struct InjectionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Raised when an annotated text has unmatched block delimiters. Carries
/// the 1-based line of the offending delimiter.
struct StripError : std::runtime_error {
  StripError(const std::string& what, int line)
      : std::runtime_error(what), line(line) {}
  int line;
};

/// Program source with diagnostics spliced in as <error>...</error>
/// blocks. origin_hash digests the unannotated source so a stripped
/// text can be checked against what was injected.
struct AnnotatedProgram {
  std::string text;
  std::uint64_t origin_hash = 0;
};

std::uint64_t source_digest(const std::string& source);

/// Splices each diagnostic into `source` as a block on its own lines
/// immediately after the reported line. Diagnostics without a usable
/// line (absent, or beyond the source) become trailing blocks. Sources
/// or diagnostic texts already containing the delimiter tokens are
/// rejected.
AnnotatedProgram inject_diagnostics(const std::string& source,
                                    const std::vector<diag::RawDiagnostic>& ds);

/// Removes every block including its delimiter lines; inverse of
/// inject_diagnostics, byte-exact.
std::string strip_annotations(const std::string& annotated);

/// Number of well-formed blocks in an annotated text.
std::size_t count_blocks(const std::string& annotated);

}  // namespace refinery::inject
