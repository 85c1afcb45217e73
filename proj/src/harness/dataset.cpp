#include "hicd/harness/dataset.hpp"

#include <fstream>
#include <sstream>

#include "hicd/error.hpp"
#include "hicd/harness/synthetic.hpp"
#include "json.hpp"

namespace hicd::harness {

namespace {

TokenSeq tokens_from(const nlohmann::json& j, const std::string& what) {
  if (j.is_string()) return encode(j.get<std::string>());
  if (!j.is_array()) throw DataError(what + " must be a token list or a string");
  TokenSeq out;
  for (const auto& v : j) {
    if (!v.is_number_integer()) throw DataError(what + " holds a non-integer token");
    const auto t = v.get<long long>();
    if (t < 0) throw DataError(what + " holds a negative token id");
    out.push_back(static_cast<model::TokenId>(t));
  }
  return out;
}

}  // namespace

heads::McExample parse_example(const std::string& line, std::size_t line_number) {
  const std::string where = "line " + std::to_string(line_number);
  try {
    const auto j = nlohmann::json::parse(line);
    if (!j.is_object()) throw DataError("not a JSON object");
    heads::McExample ex;
    ex.context = tokens_from(j.at("context"), "context");
    const auto& choices = j.at("choices");
    if (!choices.is_array()) throw DataError("choices must be a list");
    for (std::size_t c = 0; c < choices.size(); ++c) {
      ex.choices.push_back(tokens_from(choices[c], "choice " + std::to_string(c)));
    }
    const auto& gold = j.at("gold");
    if (!gold.is_number_integer() || gold.get<long long>() < 0) {
      throw DataError("gold must be a non-negative integer");
    }
    ex.gold = gold.get<std::size_t>();
    if (j.contains("task")) ex.task = j.at("task").get<std::string>();
    if (ex.context.empty()) throw DataError("empty context");
    ex.validate();
    return ex;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(where + ": " + e.what());
  } catch (const Error& e) {
    throw DataError(where + ": " + e.what());
  }
}

std::vector<heads::McExample> parse_dataset(const std::string& text) {
  std::vector<heads::McExample> out;
  std::istringstream in(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    out.push_back(parse_example(line, n));
  }
  if (out.empty()) throw DataError("dataset holds no examples");
  return out;
}

std::vector<heads::McExample> read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_dataset(ss.str());
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

std::string example_to_json(const heads::McExample& ex) {
  nlohmann::json j = {
      {"context", ex.context}, {"choices", ex.choices}, {"gold", ex.gold}, {"task", ex.task}};
  return j.dump();
}

void write_dataset(const std::filesystem::path& path, const std::vector<heads::McExample>& data) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write dataset " + path.string());
  for (const auto& ex : data) out << example_to_json(ex) << "\n";
}

void check_compatible(const std::vector<heads::McExample>& data,
                      const model::ModelConfig& config) {
  auto check_tokens = [&](const TokenSeq& seq, std::size_t i) {
    for (auto t : seq) {
      if (t < 0 || static_cast<std::size_t>(t) >= config.vocab_size) {
        throw DataError("example " + std::to_string(i) + " uses token " + std::to_string(t) +
                        " outside the model vocabulary of " + std::to_string(config.vocab_size));
      }
    }
  };
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& ex = data[i];
    check_tokens(ex.context, i);
    for (const auto& c : ex.choices) {
      check_tokens(c, i);
      if (ex.context.size() + c.size() > config.max_seq_len) {
        throw DataError("example " + std::to_string(i) + " does not fit max_seq_len " +
                        std::to_string(config.max_seq_len));
      }
    }
  }
}

}  // namespace hicd::harness
