#pragma once

#include <iosfwd>

namespace g2a {

inline constexpr const char* tool_version = "0.1.0";

/// Exit codes.
enum ExitCode : int {
  exit_ok = 0,
  exit_other = 1,
  exit_config = 2,
  exit_missing = 3,
  exit_numerical = 4,
  exit_format = 5,
};

/// Entry point of the g2a tool. Every command works inside one run
/// directory; see README for the artifact layout.
int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace g2a
