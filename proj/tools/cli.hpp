#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace textif::cli {

enum ExitCode : int { kOk = 0, kRuntimeFailure = 1, kBadInput = 2 };

/// Runs one invocation, e.g. {"textif", "degrade", "--clean-dir", ...}.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace textif::cli
