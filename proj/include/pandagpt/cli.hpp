#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace pgpt {

// Subcommand dispatcher. Exit codes: 0 success, 1 usage error, 2 invariant
// violation (frozen-parameter drift, lineage mismatch, corruption, guard
// violations). Streams are injected so scripted sessions are testable.
int cli_dispatch(const std::vector<std::string>& args, std::istream& in, std::ostream& out,
                 std::ostream& err);

int cli_main(int argc, char** argv);

}  // namespace pgpt
