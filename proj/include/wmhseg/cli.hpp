#pragma once

namespace wmhseg::cli {

/// Exit codes: 0 success, 1 unexpected failure, 2 configuration or usage
/// error, 3 I/O or file-format error, 4 numerical abort.
inline constexpr int kExitOk = 0;
inline constexpr int kExitInternal = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitIo = 3;
inline constexpr int kExitNumerical = 4;

/// Entry point for the `wmhseg` tool. Failures print one JSON object per
/// line on stderr: {"error": <category>, "exit_code": <n>, "message": <text>}.
int run(int argc, char** argv);

}  // namespace wmhseg::cli
