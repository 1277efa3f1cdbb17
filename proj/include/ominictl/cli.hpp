#pragma once

#include <iosfwd>

namespace omini {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitRuntime = 3;

// Entry point of the ominictl tool. Subcommands: train, eval, sample,
// compare, inspect-attn, count-params. Returns the process exit code.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace omini
