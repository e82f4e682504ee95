#pragma once

#include <string>
#include <vector>

namespace xreg {

// Runs the command line; returns 0 on success, 2 on usage errors and 1 on
// runtime failures. args excludes the program name.
int run_cli(const std::vector<std::string>& args);

}  // namespace xreg
