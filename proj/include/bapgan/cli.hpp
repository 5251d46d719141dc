#pragma once

namespace bapgan {

// Exit codes: 0 success, 1 usage/configuration error, 2 data error,
// 3 runtime or numeric error. Errors go to stderr as `ERROR:<category>: message`.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitRuntime = 3;

int run_cli(int argc, const char* const* argv);

}  // namespace bapgan
