#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "hicd/numerics/ops.hpp"

namespace hicd::model {

using num::TokenId;
using TokenSeq = std::vector<TokenId>;

struct ModelConfig {
  std::size_t layers = 4;
  std::size_t heads = 4;
  std::size_t model_dim = 64;
  std::size_t vocab_size = 64;
  std::size_t max_seq_len = 64;
  // Hidden width of the feed-forward block.
  std::size_t ff_dim = 128;
  double layer_norm_epsilon = 1e-5;

  std::size_t head_dim() const { return model_dim / heads; }
  std::size_t head_count() const { return layers * heads; }

  // Throws UsageError when a count is zero or model_dim % heads != 0.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct HeadId {
  std::size_t layer = 0;
  std::size_t head = 0;

  friend auto operator<=>(const HeadId&, const HeadId&) = default;
};

std::string to_string(HeadId id);

enum class HeadMode { Normal, Dispersed, Pruned };

std::string to_string(HeadMode mode);
HeadMode head_mode_from_string(const std::string& name);

// Per-head intervention map. Heads that are not listed run normally.
class InterventionPlan {
 public:
  InterventionPlan() = default;

  static InterventionPlan uniform(std::span<const HeadId> heads, HeadMode mode);

  // Setting Normal removes the entry.
  void set(HeadId head, HeadMode mode);
  HeadMode mode(HeadId head) const;
  bool empty() const { return modes_.empty(); }
  std::size_t size() const { return modes_.size(); }
  const std::map<HeadId, HeadMode>& entries() const { return modes_; }

  // Throws IndexError for a head outside the config.
  void validate(const ModelConfig& config) const;

  friend bool operator==(const InterventionPlan&, const InterventionPlan&) = default;

 private:
  std::map<HeadId, HeadMode> modes_;
};

}  // namespace hicd::model
