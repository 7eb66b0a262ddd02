#pragma once

#include <ostream>
#include <string>

namespace mmpid::cli {

// Exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitInput = 2;       // parse, format or domain errors
inline constexpr int kExitNumeric = 3;     // numeric, convergence or consistency failures
inline constexpr int kExitCapability = 4;  // unsupported estimator/input combinations

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

// roff manual page built from the option table.
std::string man_page();

}  // namespace mmpid::cli
