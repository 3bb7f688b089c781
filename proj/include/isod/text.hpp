#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace isod {

// Shortest decimal form that parses back to the same double.
std::string format_double(double v);
double parse_double(std::string_view s);  // throws ParseError
long long parse_int(std::string_view s);  // throws ParseError

// RFC 4180 style: fields containing separators, quotes or newlines are quoted.
std::string csv_escape(std::string_view field);
std::vector<std::string> split_csv_line(std::string_view line);

} // namespace isod
