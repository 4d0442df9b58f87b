#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace pointnorm::cli {

enum ExitCode : int { kOk = 0, kConfigError = 1, kDataError = 2, kNumericError = 3 };

inline constexpr int kSchemaVersion = 1;

// Runs one command line (args excludes the program name). Human-readable
// progress goes to `out`, diagnostics to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Relative paths land under $POINTNORM_OUTPUT_ROOT when it is set.
std::filesystem::path resolve_output(const std::filesystem::path& path);

}  // namespace pointnorm::cli
