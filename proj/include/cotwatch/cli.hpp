#pragma once
// Command-line front end. Exit codes: 0 ok, 2 usage, 3 data/format error,
// 4 validation rejections under --strict, 5 internal failure.

#include <iosfwd>
#include <string>
#include <vector>

namespace cotwatch::cli {

inline constexpr const char* kToolVersion = "0.1.0";

enum ExitCode : int { kOk = 0, kUsage = 2, kDataError = 3, kRejected = 4, kInternal = 5 };

/// args[0] is the program name.
int run(const std::vector<std::string>& args, std::istream& in, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

}  // namespace cotwatch::cli
