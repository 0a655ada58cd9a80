#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace recall::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kIo = 2, kNumeric = 3 };

/// Runs `recall <args...>` writing reports to `out` and diagnostics to `err`.
/// args excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace recall::cli
