#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace iceformer {

enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 1,
  kExitValidation = 2,
  kExitIo = 3,
};

/// Entry point behind the `iceformer` binary. `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace iceformer
