#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace cvt::cli {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kConfig = 2,
  kGeometry = 3,
  kUnwritable = 4,
  kCheckpoint = 5,
};

/// Runs one command line (without the program name). Reports go to `out`,
/// diagnostics to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace cvt::cli
