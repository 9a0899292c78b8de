#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace overton::cli {

// Runs one subcommand. Exit codes: 0 success, 1 validation failure, 2 runtime
// error. Output streams are injected so tests can capture them.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace overton::cli
