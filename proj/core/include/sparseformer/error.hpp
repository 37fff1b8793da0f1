#pragma once

#include <stdexcept>
#include <string>

namespace spf {

// Error taxonomy; the CLI maps these onto exit codes.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DimError : Error { using Error::Error; };      // shape or extent mismatch
struct ConfigError : Error { using Error::Error; };   // invalid configuration value
struct NumericError : Error { using Error::Error; };  // non-finite value encountered
struct DataError : Error { using Error::Error; };     // bad sample content
struct FormatError : Error { using Error::Error; };   // malformed file
struct StateError : Error { using Error::Error; };    // inconsistent runtime state

}  // namespace spf
