#include "refinery/injection.hpp"

#include <algorithm>

namespace refinery::inject {

namespace {

struct SplitText {
  std::vector<std::string> lines;
  bool trailing_newline = false;
};

SplitText split_lines(const std::string& text) {
  SplitText s;
  if (text.empty()) return s;
  s.trailing_newline = text.back() == '\n';
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t eol = text.find('\n', start);
    if (eol == std::string::npos) {
      if (start < text.size()) s.lines.push_back(text.substr(start));
      break;
    }
    s.lines.push_back(text.substr(start, eol - start));
    start = eol + 1;
    if (start == text.size()) break;  // trailing newline, no empty final line
  }
  return s;
}

std::string join_lines(const std::vector<std::string>& lines,
                       bool trailing_newline) {
  std::string out;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    out += lines[i];
    if (i + 1 < lines.size() || trailing_newline) out += '\n';
  }
  return out;
}

bool contains_token(const std::string& text) {
  return text.find(kErrorOpen) != std::string::npos ||
         text.find(kErrorClose) != std::string::npos;
}

void append_block(std::vector<std::string>& out, const std::string& text) {
  out.emplace_back(kErrorOpen);
  const SplitText body = split_lines(text);
  for (const auto& line : body.lines) out.push_back(line);
  if (body.lines.empty()) out.emplace_back("");
  out.emplace_back(kErrorClose);
}

}  // namespace

std::uint64_t source_digest(const std::string& source) {
  // FNV-1a, 64-bit.
  std::uint64_t h = 1469598103934665603ull;
  for (const unsigned char c : source) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

AnnotatedProgram inject_diagnostics(const std::string& source,
                                    const std::vector<diag::RawDiagnostic>& ds) {
  if (contains_token(source)) {
    throw InjectionError("inject: source already contains an <error> token");
  }
  for (const auto& d : ds) {
    if (contains_token(d.text)) {
      throw InjectionError("inject: diagnostic text contains an <error> token");
    }
  }

  const SplitText src = split_lines(source);
  const int line_count = static_cast<int>(src.lines.size());

  // Bucket diagnostics by target line; out-of-range or absent lines go
  // to end of file in input order.
  struct Placed {
    int column_key;
    std::size_t input_index;
    const diag::RawDiagnostic* d;
  };
  std::vector<std::vector<Placed>> by_line(src.lines.size());
  std::vector<const diag::RawDiagnostic*> at_eof;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& d = ds[i];
    if (d.line && *d.line >= 1 && *d.line <= line_count) {
      by_line[static_cast<std::size_t>(*d.line - 1)].push_back(
          {d.column.value_or(-1), i, &d});
    } else {
      at_eof.push_back(&d);
    }
  }
  for (auto& bucket : by_line) {
    std::stable_sort(bucket.begin(), bucket.end(),
                     [](const Placed& a, const Placed& b) {
                       return a.column_key < b.column_key;
                     });
  }

  std::vector<std::string> out;
  out.reserve(src.lines.size() + ds.size() * 3);
  for (std::size_t i = 0; i < src.lines.size(); ++i) {
    out.push_back(src.lines[i]);
    for (const Placed& p : by_line[i]) append_block(out, p.d->text);
  }
  for (const auto* d : at_eof) append_block(out, d->text);

  AnnotatedProgram a;
  a.text = join_lines(out, src.trailing_newline);
  a.origin_hash = source_digest(source);
  return a;
}

std::string strip_annotations(const std::string& annotated) {
  const SplitText src = split_lines(annotated);
  std::vector<std::string> kept;
  kept.reserve(src.lines.size());
  bool in_block = false;
  int open_line = 0;
  for (std::size_t i = 0; i < src.lines.size(); ++i) {
    const std::string& line = src.lines[i];
    if (line == kErrorOpen) {
      if (in_block) {
        throw StripError("strip: nested <error> opener at line " +
                             std::to_string(i + 1),
                         static_cast<int>(i + 1));
      }
      in_block = true;
      open_line = static_cast<int>(i + 1);
      continue;
    }
    if (line == kErrorClose) {
      if (!in_block) {
        throw StripError("strip: unmatched </error> at line " +
                             std::to_string(i + 1),
                         static_cast<int>(i + 1));
      }
      in_block = false;
      continue;
    }
    if (!in_block) kept.push_back(line);
  }
  if (in_block) {
    throw StripError("strip: unclosed <error> opened at line " +
                         std::to_string(open_line),
                     open_line);
  }
  return join_lines(kept, src.trailing_newline);
}

std::size_t count_blocks(const std::string& annotated) {
  const SplitText src = split_lines(annotated);
  std::size_t n = 0;
  for (const auto& line : src.lines) {
    if (line == kErrorOpen) ++n;
  }
  return n;
}

}  // namespace refinery::inject
