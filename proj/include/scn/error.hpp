#pragma once

#include <stdexcept>
#include <string>

namespace scn {

enum class ErrorKind {
  parse,
  format,
  config,
  dimension,
  usage,
  structural,
  ordering,
  io,
  internal,
};

const char* to_string(ErrorKind kind);

// Every failure the library reports is an scn::Error carrying its category.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + " error: " + message), kind_(kind), detail_(message) {}

  ErrorKind kind() const noexcept { return kind_; }
  // Message without the category prefix.
  const std::string& detail() const noexcept { return detail_; }

 private:
  ErrorKind kind_;
  std::string detail_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) { throw Error(kind, message); }

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) fail(kind, message);
}

}  // namespace scn
