#pragma once

#include <chrono>
#include <string>
#include <vector>

#include "regprompt/segmenter.hpp"

namespace regprompt::tools {

/// Ten NDJSON request lines: eight valid requests over synthetic slices, then a truncated JSON line and a
/// request without pixels.
[[nodiscard]] std::vector<std::string> golden_fixture_lines();

struct FixtureVerdict {
    bool pass = false;
    std::string label;   ///< request id, or "<unparsable>"
    std::string detail;
};

/// Sends one fixture line and checks the reply: valid requests need a mask of width*height bytes in {0,1}
/// and the request_id echo; malformed lines need an error object (echoing the id when one is readable).
[[nodiscard]] FixtureVerdict check_fixture(LineChannel& channel, const std::string& line,
                                           std::chrono::milliseconds timeout);

}  // namespace regprompt::tools
