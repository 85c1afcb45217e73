#include "hicd/model/config.hpp"

#include "hicd/error.hpp"

namespace hicd::model {

void ModelConfig::validate() const {
  if (layers == 0 || heads == 0 || model_dim == 0 || vocab_size == 0 || max_seq_len == 0 ||
      ff_dim == 0) {
    throw UsageError("model config: every count must be at least 1");
  }
  if (model_dim % heads != 0) {
    throw UsageError("model config: model_dim " + std::to_string(model_dim) +
                     " is not divisible by heads " + std::to_string(heads));
  }
  if (!(layer_norm_epsilon > 0.0)) throw UsageError("model config: layer_norm_epsilon must be > 0");
}

std::string to_string(HeadId id) {
  return "L" + std::to_string(id.layer) + "H" + std::to_string(id.head);
}

std::string to_string(HeadMode mode) {
  switch (mode) {
    case HeadMode::Normal:
      return "normal";
    case HeadMode::Dispersed:
      return "dispersed";
    case HeadMode::Pruned:
      return "pruned";
  }
  return "normal";
}

HeadMode head_mode_from_string(const std::string& name) {
  if (name == "normal") return HeadMode::Normal;
  if (name == "dispersed") return HeadMode::Dispersed;
  if (name == "pruned") return HeadMode::Pruned;
  throw DataError("unknown head mode '" + name + "' (expected normal|dispersed|pruned)");
}

InterventionPlan InterventionPlan::uniform(std::span<const HeadId> heads, HeadMode mode) {
  InterventionPlan plan;
  for (HeadId h : heads) plan.set(h, mode);
  return plan;
}

void InterventionPlan::set(HeadId head, HeadMode mode) {
  if (mode == HeadMode::Normal) {
    modes_.erase(head);
  } else {
    modes_[head] = mode;
  }
}

HeadMode InterventionPlan::mode(HeadId head) const {
  auto it = modes_.find(head);
  return it == modes_.end() ? HeadMode::Normal : it->second;
}

void InterventionPlan::validate(const ModelConfig& config) const {
  for (const auto& [head, mode] : modes_) {
    if (head.layer >= config.layers || head.head >= config.heads) {
      throw IndexError("intervention plan names head " + to_string(head) + " outside a " +
                       std::to_string(config.layers) + "x" + std::to_string(config.heads) +
                       " model");
    }
  }
}

}  // namespace hicd::model
