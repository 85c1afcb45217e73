#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hicd/model/config.hpp"

namespace hicd::heads {

using model::TokenSeq;

// Multiple-choice sample: context x, choices c, index of the gold answer y_i.
struct McExample {
  TokenSeq context;
  std::vector<TokenSeq> choices;
  std::size_t gold = 0;
  std::string task;

  // Throws DataError when gold is out of range, a choice is empty, there are
  // fewer than two choices, or two choices are equal.
  void validate() const;

  friend bool operator==(const McExample&, const McExample&) = default;
};

// One (context, answer) pair fed to the importance scorer.
struct ScoredPair {
  TokenSeq context;
  TokenSeq answer;
};

// Wrong-answer pairings of one example, in choice order.
struct AdversarialSet {
  McExample source;
  std::vector<ScoredPair> pairs;
};

// Throws DataError for an example with fewer than two choices.
std::vector<AdversarialSet> build_adversarial(const std::vector<McExample>& dataset);

// Gold pairs (x, y_i), one per example.
std::vector<ScoredPair> gold_pairs(const std::vector<McExample>& dataset);

// FNV-1a over every example's context, choices, gold index and task tag.
std::uint64_t dataset_hash(const std::vector<McExample>& dataset);

}  // namespace hicd::heads
