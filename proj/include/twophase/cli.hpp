#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace twophase::cli {

// Runs a full command line (without the program name). Writes human output
// to `out` and a machine-readable error object to `err` on failure.
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace twophase::cli
