#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace moelab::cli {

// Stable process exit codes.
enum ExitCode : int {
  kSuccess = 0,
  kValidationFailure = 1,
  kUsageError = 2,
  kIoError = 3,
};

/// Runs `moelab <subcommand> ...`; args[0] is the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

}  // namespace moelab::cli
