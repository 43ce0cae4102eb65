#pragma once
#include <string>
#include <vector>

namespace smim {

// Runs one CLI invocation (args exclude the program name). Returns the
// process exit code: 0 success, 1 expected failure (verification found a
// violation, training diverged), 2 usage/config error.
int run_cli(const std::vector<std::string>& args);

} // namespace smim
