#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hicd/heads/example.hpp"
#include "hicd/model/train.hpp"

namespace hicd::harness {

using heads::McExample;
using model::TokenSeq;

// Character tokenizer over printable ASCII 32..95 (space through underscore);
// lowercase letters fold to uppercase. Token id = code - 32, so V = 64.
inline constexpr std::size_t kCharVocab = 64;
TokenSeq encode(const std::string& text);
std::string decode(const TokenSeq& tokens);
model::TokenId char_token(char c);

enum class TaskKind { KeyValueRecall, PatternCompletion, SummaryCheck };

std::string to_string(TaskKind kind);
TaskKind task_kind_from_string(const std::string& name);

enum class DistractorPolicy {
  InContext,  // other values that appear in the context (recall) or pattern
  Random,     // any other symbol from the value alphabet
};

std::string to_string(DistractorPolicy policy);
DistractorPolicy distractor_policy_from_string(const std::string& name);

struct SyntheticTaskSpec {
  TaskKind kind = TaskKind::KeyValueRecall;
  std::string keys = "ABCDEFGHIJKLMNOPQRSTUVWXYZ";
  std::string values = "0123456789";
  std::size_t examples = 1000;
  std::size_t pairs = 4;       // key/value pairs per context (recall, summary)
  std::size_t choices = 4;     // forced to 2 for SummaryCheck
  std::size_t min_period = 2;  // pattern completion
  std::size_t max_period = 4;
  std::size_t pattern_length = 10;
  DistractorPolicy distractors = DistractorPolicy::InContext;
  std::uint64_t seed = 42;

  // Throws UsageError when the alphabets cannot supply distinct keys, values
  // or distractors, or a symbol is outside the tokenizer range.
  void validate() const;
};

// Deterministic in spec.seed.
//   KeyValueRecall:    "A3B7C1D9?B" -> "7"
//   PatternCompletion: "KQXKQXKQXK" -> "Q"
//   SummaryCheck:      "A3B7C1D9:B7=" -> "Y" (the claim matches the record)
//                      or "N" (the claim's value was swapped); gold 0 is Y.
std::vector<McExample> gen_synthetic(const SyntheticTaskSpec& spec);

// Rule-based solver reading the answer off the context; used to check that
// the generated tasks are well posed.
std::size_t oracle_answer(const McExample& example);

// Gold continuations for teacher-forced training.
std::vector<model::TrainingSequence> to_training(const std::vector<McExample>& dataset);

// Training corpus with denser supervision than one answer per context:
//   KeyValueRecall:    "A3B7C1D9?" -> "B7?D9?A3?C1" (every key queried once,
//                      random order; evaluation contexts are its prefixes)
//   PatternCompletion: first max_period tokens -> rest of the pattern + answer
//   SummaryCheck:      same as to_training(gen_synthetic(spec))
std::vector<model::TrainingSequence> training_corpus(const SyntheticTaskSpec& spec);

}  // namespace hicd::harness
