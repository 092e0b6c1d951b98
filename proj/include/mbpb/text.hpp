#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace mbpb {

/// Shortest decimal text that parses back to exactly `value`.
std::string exact_double(double value);
/// Fixed-precision text ("%.10g") used in report tables.
std::string report_double(double value);

/// Strict parse; throws std::invalid_argument on trailing junk or empty input.
double parse_double(std::string_view text);
long long parse_int(std::string_view text);

std::string_view trim(std::string_view s);
std::vector<std::string> split(std::string_view s, char sep);

}  // namespace mbpb
