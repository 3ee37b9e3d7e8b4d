#pragma once

#include <string>
#include <vector>

namespace rswap::cli {

// Runs one subcommand. Fatal errors print a single "robustswap: ..." line to
// stderr and return a nonzero code.
int run(const std::vector<std::string>& args);

}  // namespace rswap::cli
