#include "hicd/heads/example.hpp"

#include "hicd/error.hpp"
#include "hicd/util/hash.hpp"

namespace hicd::heads {

void McExample::validate() const {
  if (choices.size() < 2) {
    throw DataError("example needs at least 2 choices, got " + std::to_string(choices.size()));
  }
  if (gold >= choices.size()) {
    throw DataError("gold index " + std::to_string(gold) + " out of range for " +
                    std::to_string(choices.size()) + " choices");
  }
  if (context.empty()) throw DataError("example context is empty");
  for (std::size_t i = 0; i < choices.size(); ++i) {
    if (choices[i].empty()) throw DataError("choice " + std::to_string(i) + " is empty");
    for (std::size_t j = 0; j < i; ++j) {
      if (choices[i] == choices[j]) {
        throw DataError("choices " + std::to_string(j) + " and " + std::to_string(i) +
                        " are identical");
      }
    }
  }
}

std::vector<AdversarialSet> build_adversarial(const std::vector<McExample>& dataset) {
  std::vector<AdversarialSet> out;
  out.reserve(dataset.size());
  for (std::size_t e = 0; e < dataset.size(); ++e) {
    const McExample& ex = dataset[e];
    if (ex.choices.size() < 2) {
      throw DataError("example " + std::to_string(e) +
                      " has a single choice; no adversarial pair can be built");
    }
    if (ex.gold >= ex.choices.size()) {
      throw DataError("example " + std::to_string(e) + " has gold index out of range");
    }
    AdversarialSet set{ex, {}};
    for (std::size_t c = 0; c < ex.choices.size(); ++c) {
      if (c != ex.gold) set.pairs.push_back({ex.context, ex.choices[c]});
    }
    out.push_back(std::move(set));
  }
  return out;
}

std::vector<ScoredPair> gold_pairs(const std::vector<McExample>& dataset) {
  std::vector<ScoredPair> out;
  out.reserve(dataset.size());
  for (std::size_t e = 0; e < dataset.size(); ++e) {
    const McExample& ex = dataset[e];
    if (ex.gold >= ex.choices.size()) {
      throw DataError("example " + std::to_string(e) + " has gold index out of range");
    }
    out.push_back({ex.context, ex.choices[ex.gold]});
  }
  return out;
}

std::uint64_t dataset_hash(const std::vector<McExample>& dataset) {
  util::Fnv1a h;
  h.value(dataset.size());
  for (const McExample& ex : dataset) {
    h.values(std::span<const model::TokenId>(ex.context));
    h.value(ex.choices.size());
    for (const auto& c : ex.choices) {
      h.values(std::span<const model::TokenId>(c));
    }
    h.value(ex.gold);
    h.text(ex.task);
  }
  return h.digest();
}

}  // namespace hicd::heads
