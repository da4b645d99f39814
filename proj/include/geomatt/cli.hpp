#pragma once

#include <ostream>

namespace geomatt {

/// Runs one command-line invocation. Returns 0 on success, 2 on usage
/// errors and 1 when a command fails.
int run_cli(int argc, const char *const *argv, std::ostream &out, std::ostream &err);

} // namespace geomatt
