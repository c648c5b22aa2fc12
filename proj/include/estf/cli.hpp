#pragma once

// Command-line front end: gen, train, eval, predict, gradcheck, ablate.
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include <ostream>
#include <string>
#include <vector>

namespace estf {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

/// `args[0]` is the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace estf
