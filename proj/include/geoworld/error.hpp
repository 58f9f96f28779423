#pragma once

#include <stdexcept>
#include <string>

namespace geoworld {

// Error classes map one-to-one onto CLI exit codes (see tools/geoworld_main.cpp).
enum class ErrorKind {
  InvalidInput,
  Config,
  MissingInput,
  Format,
  Numerical,
  Grounding,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

struct InvalidInputError : Error {
  explicit InvalidInputError(const std::string& w) : Error(ErrorKind::InvalidInput, w) {}
};
struct ConfigError : Error {
  explicit ConfigError(const std::string& w) : Error(ErrorKind::Config, w) {}
};
struct MissingInputError : Error {
  explicit MissingInputError(const std::string& w) : Error(ErrorKind::MissingInput, w) {}
};
struct FormatError : Error {
  explicit FormatError(const std::string& w) : Error(ErrorKind::Format, w) {}
};
struct NumericalError : Error {
  explicit NumericalError(const std::string& w) : Error(ErrorKind::Numerical, w) {}
};
struct GroundingError : Error {
  explicit GroundingError(const std::string& w) : Error(ErrorKind::Grounding, w) {}
};

}  // namespace geoworld
