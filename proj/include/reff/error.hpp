#pragma once

#include <stdexcept>
#include <string>

namespace reff {

// Error categories map onto CLI exit codes: ConfigError -> 2, everything else -> 1.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

struct ShapeError : Error {
  explicit ShapeError(const std::string& what) : Error("shape", what) {}
};
struct ValueError : Error {
  explicit ValueError(const std::string& what) : Error("value", what) {}
};
struct TapeError : Error {
  explicit TapeError(const std::string& what) : Error("tape", what) {}
};
struct FormatError : Error {
  explicit FormatError(const std::string& what) : Error("format", what) {}
};
struct IoError : Error {
  explicit IoError(const std::string& what) : Error("io", what) {}
};
struct ConfigError : Error {
  explicit ConfigError(const std::string& what) : Error("config", what) {}
};
struct NumericError : Error {
  explicit NumericError(const std::string& what) : Error("numeric", what) {}
};

}  // namespace reff
