#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace pbench::text {

std::vector<std::string> split(std::string_view line, char delimiter);
std::vector<std::string> split(std::string_view line, std::string_view delimiter);
std::string join(const std::vector<std::string>& parts, std::string_view delimiter);

/// Shortest representation that parses back to the identical double.
std::string format_double(double value);
double parse_double(std::string_view token, std::string_view context);
long long parse_int(std::string_view token, std::string_view context);

/// Reads all lines, stripping a trailing '\r'. Throws E_IO when unreadable.
std::vector<std::string> read_lines(const std::filesystem::path& path);

/// Writes through a temporary sibling and renames, so readers never see a
/// half-written file. Throws E_IO.
void write_file(const std::filesystem::path& path, std::string_view content);

}  // namespace pbench::text
