#pragma once

#include <exception>
#include <ostream>
#include <string>
#include <vector>

namespace promptseg::cli {

// Exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitInternal = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitNumeric = 4;

// Runs one command. `args` excludes the program name. Errors are reported as a
// single line on `err`:
//   error code=<token> exit=<n> message=<JSON string>
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Maps a library exception onto (exit code, error token).
std::pair<int, std::string> classify(const std::exception& e);

}  // namespace promptseg::cli
