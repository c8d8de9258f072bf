#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace vipastain {

// Runs the vipastain command line. Returns 0 on success, 2 on usage errors
// and 1 on runtime failures. args[0] is the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace vipastain
