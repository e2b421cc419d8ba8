#pragma once

#include <stdexcept>
#include <string>

namespace twophase {

// Error taxonomy mirrored by the CLI exit codes:
//   ArgumentError -> 1, DataError -> 2, NumericError -> 3.

struct ArgumentError : std::runtime_error {
  explicit ArgumentError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace twophase
