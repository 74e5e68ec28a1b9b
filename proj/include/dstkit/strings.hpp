#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace dstkit {

std::string_view trim(std::string_view text) noexcept;
std::string to_lower(std::string_view text);
std::vector<std::string> split(std::string_view text, char sep);
std::string join(const std::vector<std::string>& parts, std::string_view sep);
bool starts_with_icase(std::string_view text, std::string_view prefix) noexcept;
// Collapse runs of whitespace into one space.
std::string collapse_spaces(std::string_view text);

// Whole-file helpers. read_file throws UsageError when the file is missing.
std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view contents);

}  // namespace dstkit
