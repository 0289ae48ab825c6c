#pragma once

// The apattack command line: synth-gen, train-inversion, train-attack,
// attack, evaluate, interpret and print-config.

#include <ostream>
#include <string>
#include <vector>

namespace apattack {

// Exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;  // unexpected error
inline constexpr int kExitConfig = 2;   // usage or configuration error
inline constexpr int kExitInput = 3;    // unreadable or malformed input
inline constexpr int kExitRuntime = 4;  // training or evaluation failure

// args excludes the program name. Diagnostics go to err, listings to out.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace apattack
