#pragma once

#include <iostream>
#include <string>
#include <vector>

namespace lafa::cli {

/// Exit codes of `run`.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;

/// Entry point of the `lafa` tool. Regular output goes to `out`, diagnostics
/// and help text for usage errors to `err`.
int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr);

/// Convenience overload; args excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr);

}  // namespace lafa::cli
