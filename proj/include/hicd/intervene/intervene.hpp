#pragma once

#include <filesystem>
#include <set>
#include <string>

#include "hicd/model/config.hpp"
#include "hicd/numerics/tape.hpp"

namespace hicd::intervene {

using model::HeadId;
using model::HeadMode;
using model::InterventionPlan;

// Attention map of a dispersed head: row i (0-based) is 1/(i+1) on columns
// 0..i and exactly 0 elsewhere. This is what softmax returns when the visible
// query-key logits are all zeroed under the causal mask, built directly.
num::Tensor disperse_attention_row_form(std::size_t seq_len);

// Per-head attention result handed back to the forward pass.
struct HeadComputation {
  num::Var attention;  // N x N
  num::Var output;     // N x head_dim
};

// Dispersed head: H = s_uniform * (X W_V^h). The uniform map is a constant
// leaf; attention-level gradients come from the forward pass's probes.
HeadComputation apply_dispersion(num::GradTape& tape, num::Var values);

// Pruned head: contributes an all-zero block to the head concatenation.
HeadComputation apply_pruning(num::GradTape& tape, std::size_t seq_len, std::size_t head_dim);

// Set of heads to disperse, validated against a config.
struct DispersionSpec {
  std::set<HeadId> targets;

  void validate(const model::ModelConfig& config) const;
  InterventionPlan to_plan(HeadMode mode = HeadMode::Dispersed) const;
};

// Plan files: JSON list of {"layer", "head", "mode"} records. Unlisted heads
// run normally.
InterventionPlan read_plan_file(const std::filesystem::path& path);
void write_plan_file(const std::filesystem::path& path, const InterventionPlan& plan);
InterventionPlan parse_plan_json(const std::string& text);
std::string plan_to_json(const InterventionPlan& plan);

// Content hash of a plan (order-independent by construction of the map).
std::uint64_t plan_hash(const InterventionPlan& plan);

}  // namespace hicd::intervene
