#pragma once

namespace tsg::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitNumerical = 3;

/// Parses arguments and runs one subcommand. Returns the process exit code.
int run(int argc, char** argv);

}  // namespace tsg::cli
