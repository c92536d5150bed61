#pragma once

#include <string>
#include <vector>

namespace astgl::cli {

/// Entry point for the command-line tool. `args` excludes the program name.
/// Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
/// failure.
int run(const std::vector<std::string>& args);

}  // namespace astgl::cli
