#pragma once

#include <optional>
#include <stdexcept>
#include <string>

namespace clothret {

enum class Errc {
  config,
  parameter,
  data,
  parse,
  input,
  alignment,
  precondition,
  degenerate,
  dimension,
  io,
  bad_magic,
  truncated,
  count_mismatch,
  empty_matrix,
};

inline const char* to_string(Errc code) {
  switch (code) {
    case Errc::config: return "config";
    case Errc::parameter: return "parameter";
    case Errc::data: return "data";
    case Errc::parse: return "parse";
    case Errc::input: return "input";
    case Errc::alignment: return "alignment";
    case Errc::precondition: return "precondition";
    case Errc::degenerate: return "degenerate";
    case Errc::dimension: return "dimension";
    case Errc::io: return "io";
    case Errc::bad_magic: return "bad_magic";
    case Errc::truncated: return "truncated";
    case Errc::count_mismatch: return "count_mismatch";
    case Errc::empty_matrix: return "empty_matrix";
  }
  return "unknown";
}

/// Every failure raised by the library carries a category code so callers
/// (and the CLI exit path) can tell configuration mistakes from bad data.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  Error(Errc code, const std::string& what, std::size_t line)
      : std::runtime_error("line " + std::to_string(line) + ": " + what),
        code_(code),
        line_(line) {}

  Errc code() const noexcept { return code_; }
  std::optional<std::size_t> line() const noexcept { return line_; }

 private:
  Errc code_;
  std::optional<std::size_t> line_;
};

}  // namespace clothret
