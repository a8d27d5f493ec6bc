#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace weakiv {

// Runs the command line `args` (without the program name). Reports go to
// `out` (or the --out file), diagnostics to `err`. Returns the process exit
// code: 0 success, 2 usage or input error, 3 numerical failure.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace weakiv
