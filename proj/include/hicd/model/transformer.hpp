#pragma once

#include <map>
#include <span>
#include <vector>

#include "hicd/model/config.hpp"
#include "hicd/model/params.hpp"
#include "hicd/numerics/tape.hpp"

namespace hicd::model {

// Which per-head intermediates forward() copies into the trace. Logits are
// always returned.
struct Capture {
  bool attention = false;
  bool head_outputs = false;
  bool values = false;
  bool layer_inputs = false;

  static Capture all() { return {true, true, true, true}; }
};

inline std::size_t head_index(const ModelConfig& config, HeadId id) {
  return id.layer * config.heads + id.head;
}

struct ForwardTrace {
  num::Tensor logits;  // N x V; row t scores the token at t + 1
  // Indexed by head_index(); empty unless captured.
  std::vector<num::Tensor> attention;     // s^{l,h}, N x N
  std::vector<num::Tensor> head_outputs;  // H^{l,h}, N x d/M
  std::vector<num::Tensor> values;        // X^{l-1} W_V^{l,h}, N x d/M
  std::vector<num::Tensor> layer_inputs;  // X^{l-1} (post layer-norm), per layer, N x d
};

// Additive offsets injected into one sequence's forward pass. Offsets on the
// head output perturb H^{l,h}; offsets on the attention map perturb s^{l,h}
// after the softmax (or after dispersion/pruning).
struct ProbeSet {
  std::map<HeadId, num::Tensor> head_output;
  std::map<HeadId, num::Tensor> attention;

  bool empty() const { return head_output.empty() && attention.empty(); }
};

struct GraphOptions {
  const ProbeSet* probes = nullptr;  // single-sequence graphs only
  bool param_grads = false;          // parameters become differentiable leaves
  bool head_output_grads = false;    // expose dL/dH^{l,h} via head_output_probes
  bool attention_grads = false;      // expose dL/ds^{l,h} via attention_probes
};

// Recorded forward pass over a batch of sequences whose rows are stacked.
struct ForwardGraph {
  num::Var logits;                       // total_rows x V
  std::vector<std::size_t> row_offsets;  // sequence b owns rows [off[b], off[b+1])
  std::size_t batch = 0;
  // Per head and sequence, indexed [head_index * batch + b].
  std::vector<num::Var> attention;
  std::vector<num::Var> head_outputs;
  std::vector<num::Var> values;
  // Leaves whose gradients equal dL/dH and dL/ds when the options request them.
  std::vector<num::Var> head_output_probes;
  std::vector<num::Var> attention_probes;
  std::vector<num::Var> layer_inputs;  // per layer, stacked rows
  std::vector<num::Var> params;        // ModelParams::named() order, when param_grads
};

// Pre-LN decoder: h += Attn(LN1(h)); h += FF(LN2(h)); logits = LN_f(h) U + b.
// Throws UsageError for an empty sequence, IndexError for a token >= V, and
// LengthError when a sequence exceeds max_seq_len.
ForwardGraph build_forward(num::GradTape& tape, const ModelParams& params,
                           std::span<const TokenSeq> sequences, const InterventionPlan& plan,
                           const GraphOptions& options = {});

ForwardTrace forward(const ModelParams& params, std::span<const TokenId> tokens,
                     const InterventionPlan& plan, Capture capture = {});

// Logits for many sequences, evaluated in internal batches.
std::vector<num::Tensor> forward_logits(const ModelParams& params,
                                        std::span<const TokenSeq> sequences,
                                        const InterventionPlan& plan);

struct ExampleLoss {
  ForwardGraph graph;
  num::Var loss;
};

// Mean NLL of `continuation` given `context`, computed on the joint sequence
// [context; continuation] with context positions excluded from the average.
ExampleLoss build_example_loss(num::GradTape& tape, const ModelParams& params,
                               std::span<const TokenId> context,
                               std::span<const TokenId> continuation,
                               const InterventionPlan& plan, const GraphOptions& options = {});

double loss_on_example(const ModelParams& params, std::span<const TokenId> context,
                       std::span<const TokenId> continuation, const InterventionPlan& plan);

}  // namespace hicd::model
