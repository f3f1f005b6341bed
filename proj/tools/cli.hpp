#ifndef SEQCAL_TOOLS_CLI_HPP
#define SEQCAL_TOOLS_CLI_HPP

#include <iosfwd>
#include <string>
#include <vector>

namespace seqcal::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;

// Runs one seqcal command line (args excludes the program name). Reports go
// to files under --out; `out` receives a one-line summary, `err` diagnostics.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace seqcal::cli

#endif  // SEQCAL_TOOLS_CLI_HPP
