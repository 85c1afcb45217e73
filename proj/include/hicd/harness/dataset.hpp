#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "hicd/heads/example.hpp"
#include "hicd/model/config.hpp"

namespace hicd::harness {

// One example per line:
//   {"context": [ids] | "text", "choices": [[ids] | "text", ...], "gold": 0, "task": "kv-recall"}
// Strings go through the character tokenizer. Blank lines are skipped.
// Throws DataError naming the line on malformed input.
heads::McExample parse_example(const std::string& line, std::size_t line_number = 0);
std::vector<heads::McExample> parse_dataset(const std::string& text);
std::vector<heads::McExample> read_dataset(const std::filesystem::path& path);

// Writes token-id form, one line per example.
std::string example_to_json(const heads::McExample& example);
void write_dataset(const std::filesystem::path& path, const std::vector<heads::McExample>& data);

// DataError when a token is outside the vocabulary or an example does not
// fit the context window.
void check_compatible(const std::vector<heads::McExample>& data, const model::ModelConfig& config);

}  // namespace hicd::harness
