#pragma once

#include <ostream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace mismatch {

/// Shortest round-trip representation of a double ("%.17g").
std::string format_double(double v);

/// Splits on commas, trimming surrounding blanks; empty input gives no items.
std::vector<std::string> split_list(std::string_view text);

/// Emits `# key=value` comment lines used as CSV preambles.
void write_echo(std::ostream& out, const std::vector<std::pair<std::string, std::string>>& echo);

}  // namespace mismatch
