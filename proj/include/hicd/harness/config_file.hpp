#pragma once

#include <filesystem>
#include <map>
#include <string>

namespace hicd::harness {

// Plain `key = value` lines; '#' starts a comment. Later keys win. Throws
// UsageError naming the line for a line without '=' or an empty key.
std::map<std::string, std::string> parse_config_text(const std::string& text);

// DataError when the file cannot be read.
std::map<std::string, std::string> read_config_file(const std::filesystem::path& path);

}  // namespace hicd::harness
