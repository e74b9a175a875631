#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace topicguard::cli {

enum ExitCode : int {
  kExitOk = 0,
  kExitOperational = 1,
  kExitConfig = 2,
};

// Parses `args` (without the program name) and runs the subcommand.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace topicguard::cli
