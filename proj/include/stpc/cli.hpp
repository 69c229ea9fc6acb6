#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace stpc {

/// Process exit codes.
enum ExitCode : int {
  kExitOk = 0,
  kExitCheckFailed = 1,  // selftest failure or unexpected internal error
  kExitUsage = 2,        // ConfigError, UsageError, TaskError
  kExitIo = 3,
  kExitNumerics = 4,
  kExitCheckpoint = 5,
};

/// Entry point of the `stpc` tool. `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run_cli(int argc, char** argv);

}  // namespace stpc
