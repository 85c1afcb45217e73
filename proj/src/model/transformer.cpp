#include "hicd/model/transformer.hpp"

#include <cmath>

#include "hicd/error.hpp"
#include "hicd/intervene/intervene.hpp"

namespace hicd::model {

using num::Tensor;
using num::Var;

namespace {

// Parameter leaves for one graph, in ModelParams::named() order.
struct ParamLeaves {
  Var token_embedding, position_embedding;
  struct Layer {
    Var ln1_gain, ln1_bias, w_q, w_k, w_v, w_o, ln2_gain, ln2_bias, ff_in, ff_in_bias, ff_out,
        ff_out_bias;
  };
  std::vector<Layer> layers;
  Var final_gain, final_bias, unembed, unembed_bias;
  std::vector<Var> ordered;
};

ParamLeaves bind_params(num::GradTape& tape, const ModelParams& p, bool grads) {
  ParamLeaves out;
  auto bind = [&](const Tensor& t) {
    Var v = tape.external(t, grads);
    out.ordered.push_back(v);
    return v;
  };
  out.token_embedding = bind(p.token_embedding);
  out.position_embedding = bind(p.position_embedding);
  for (const LayerParams& l : p.layers) {
    ParamLeaves::Layer b;
    b.ln1_gain = bind(l.ln1_gain);
    b.ln1_bias = bind(l.ln1_bias);
    b.w_q = bind(l.w_q);
    b.w_k = bind(l.w_k);
    b.w_v = bind(l.w_v);
    b.w_o = bind(l.w_o);
    b.ln2_gain = bind(l.ln2_gain);
    b.ln2_bias = bind(l.ln2_bias);
    b.ff_in = bind(l.ff_in);
    b.ff_in_bias = bind(l.ff_in_bias);
    b.ff_out = bind(l.ff_out);
    b.ff_out_bias = bind(l.ff_out_bias);
    out.layers.push_back(b);
  }
  out.final_gain = bind(p.final_gain);
  out.final_bias = bind(p.final_bias);
  out.unembed = bind(p.unembed);
  out.unembed_bias = bind(p.unembed_bias);
  return out;
}

void check_sequence(const ModelConfig& config, std::span<const TokenId> seq, std::size_t index) {
  if (seq.empty()) throw UsageError("forward: sequence " + std::to_string(index) + " is empty");
  if (seq.size() > config.max_seq_len) {
    throw LengthError("forward: sequence of " + std::to_string(seq.size()) +
                      " tokens exceeds max_seq_len " + std::to_string(config.max_seq_len));
  }
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (seq[i] < 0 || static_cast<std::size_t>(seq[i]) >= config.vocab_size) {
      throw IndexError("forward: token id " + std::to_string(seq[i]) + " at position " +
                       std::to_string(i) + " outside vocabulary of " +
                       std::to_string(config.vocab_size));
    }
  }
}

const Tensor* find_probe(const std::map<HeadId, Tensor>* probes, HeadId id) {
  if (probes == nullptr) return nullptr;
  auto it = probes->find(id);
  return it == probes->end() ? nullptr : &it->second;
}

// Leaf added to a per-head tensor: the caller's probe, or zeros when only the
// gradient is wanted.
Var probe_leaf(num::GradTape& tape, const Tensor* probe, std::size_t rows, std::size_t cols,
               const char* what, HeadId id) {
  if (probe == nullptr) return tape.leaf(Tensor::zeros(rows, cols));
  if (probe->rows() != rows || probe->cols() != cols) {
    throw DimensionError(std::string(what) + " probe for head " + to_string(id) + " has shape " +
                         num::shape_string(probe->shape()) + ", expected [" +
                         std::to_string(rows) + "x" + std::to_string(cols) + "]");
  }
  return tape.leaf(*probe);
}

}  // namespace

ForwardGraph build_forward(num::GradTape& tape, const ModelParams& params,
                           std::span<const TokenSeq> sequences, const InterventionPlan& plan,
                           const GraphOptions& options) {
  const ModelConfig& config = params.config;
  if (sequences.empty()) throw UsageError("forward: no sequences");
  plan.validate(config);
  const bool probing = options.probes != nullptr && !options.probes->empty();
  if (probing && sequences.size() != 1) {
    throw UsageError("forward: probes are only supported for a single sequence");
  }

  ForwardGraph g;
  g.batch = sequences.size();
  std::vector<TokenId> ids;
  std::vector<TokenId> positions;
  g.row_offsets.push_back(0);
  for (std::size_t b = 0; b < sequences.size(); ++b) {
    check_sequence(config, sequences[b], b);
    ids.insert(ids.end(), sequences[b].begin(), sequences[b].end());
    for (std::size_t i = 0; i < sequences[b].size(); ++i) {
      positions.push_back(static_cast<TokenId>(i));
    }
    g.row_offsets.push_back(ids.size());
  }

  const ParamLeaves p = bind_params(tape, params, options.param_grads);
  if (options.param_grads) g.params = p.ordered;

  const std::size_t hd = config.head_dim();
  const std::size_t n_heads = config.head_count();
  const double score_scale = 1.0 / std::sqrt(static_cast<double>(hd));
  g.attention.resize(n_heads * g.batch);
  g.head_outputs.resize(n_heads * g.batch);
  g.values.resize(n_heads * g.batch);
  if (options.head_output_grads || probing) g.head_output_probes.resize(n_heads * g.batch);
  if (options.attention_grads || probing) g.attention_probes.resize(n_heads * g.batch);

  const auto* out_probes = probing ? &options.probes->head_output : nullptr;
  const auto* attn_probes = probing ? &options.probes->attention : nullptr;

  Var h = num::add(num::embedding(p.token_embedding, ids),
                   num::embedding(p.position_embedding, positions));

  for (std::size_t l = 0; l < config.layers; ++l) {
    const auto& lp = p.layers[l];
    Var x = num::layer_norm(h, lp.ln1_gain, lp.ln1_bias, config.layer_norm_epsilon);
    g.layer_inputs.push_back(x);
    Var q = num::matmul(x, lp.w_q);
    Var k = num::matmul(x, lp.w_k);
    Var v = num::matmul(x, lp.w_v);

    std::vector<Var> per_sequence;
    per_sequence.reserve(g.batch);
    for (std::size_t b = 0; b < g.batch; ++b) {
      const std::size_t off = g.row_offsets[b];
      const std::size_t n = g.row_offsets[b + 1] - off;
      std::vector<Var> heads;
      heads.reserve(config.heads);
      for (std::size_t hh = 0; hh < config.heads; ++hh) {
        const HeadId id{l, hh};
        const std::size_t slot = head_index(config, id) * g.batch + b;
        const HeadMode mode = plan.mode(id);
        Var vh = num::slice(v, off, n, hh * hd, hd);
        Var s;
        Var out;
        switch (mode) {
          case HeadMode::Normal: {
            Var qh = num::slice(q, off, n, hh * hd, hd);
            Var kh = num::slice(k, off, n, hh * hd, hd);
            s = num::softmax_rows(num::scale(num::matmul_nt(qh, kh), score_scale),
                                  num::Mask::Causal);
            break;
          }
          case HeadMode::Dispersed: {
            auto hc = intervene::apply_dispersion(tape, vh);
            s = hc.attention;
            out = hc.output;
            break;
          }
          case HeadMode::Pruned: {
            auto hc = intervene::apply_pruning(tape, n, hd);
            s = hc.attention;
            out = hc.output;
            break;
          }
        }
        if (!g.attention_probes.empty()) {
          Var probe = probe_leaf(tape, find_probe(attn_probes, id), n, n, "attention", id);
          g.attention_probes[slot] = probe;
          s = num::add(s, probe);
          if (mode != HeadMode::Pruned) out = num::matmul(s, vh);
        } else if (mode == HeadMode::Normal) {
          out = num::matmul(s, vh);
        }
        if (!g.head_output_probes.empty()) {
          Var probe = probe_leaf(tape, find_probe(out_probes, id), n, hd, "head output", id);
          g.head_output_probes[slot] = probe;
          out = num::add(out, probe);
        }
        g.attention[slot] = s;
        g.head_outputs[slot] = out;
        g.values[slot] = vh;
        heads.push_back(out);
      }
      per_sequence.push_back(num::concat_cols(heads));
    }
    Var concat = per_sequence.size() == 1 ? per_sequence.front() : num::concat_rows(per_sequence);
    h = num::add(h, num::matmul(concat, lp.w_o));

    Var x2 = num::layer_norm(h, lp.ln2_gain, lp.ln2_bias, config.layer_norm_epsilon);
    Var ff = num::gelu(num::add_row(num::matmul(x2, lp.ff_in), lp.ff_in_bias));
    h = num::add(h, num::add_row(num::matmul(ff, lp.ff_out), lp.ff_out_bias));
  }
  Var hf = num::layer_norm(h, p.final_gain, p.final_bias, config.layer_norm_epsilon);
  g.logits = num::add_row(num::matmul(hf, p.unembed), p.unembed_bias);
  return g;
}

ForwardTrace forward(const ModelParams& params, std::span<const TokenId> tokens,
                     const InterventionPlan& plan, Capture capture) {
  num::GradTape tape(false);
  const std::vector<TokenSeq> seqs{TokenSeq(tokens.begin(), tokens.end())};
  const ForwardGraph g = build_forward(tape, params, seqs, plan);
  ForwardTrace trace;
  trace.logits = g.logits.value();
  auto copy_all = [](const std::vector<Var>& src, std::vector<Tensor>& dst) {
    dst.reserve(src.size());
    for (Var v : src) dst.push_back(v.value());
  };
  if (capture.attention) copy_all(g.attention, trace.attention);
  if (capture.head_outputs) copy_all(g.head_outputs, trace.head_outputs);
  if (capture.values) copy_all(g.values, trace.values);
  if (capture.layer_inputs) copy_all(g.layer_inputs, trace.layer_inputs);
  return trace;
}

std::vector<Tensor> forward_logits(const ModelParams& params, std::span<const TokenSeq> sequences,
                                   const InterventionPlan& plan) {
  constexpr std::size_t kBatch = 64;
  std::vector<Tensor> out;
  out.reserve(sequences.size());
  for (std::size_t start = 0; start < sequences.size(); start += kBatch) {
    const std::size_t count = std::min(kBatch, sequences.size() - start);
    num::GradTape tape(false);
    const ForwardGraph g = build_forward(tape, params, sequences.subspan(start, count), plan);
    const Tensor& logits = g.logits.value();
    for (std::size_t b = 0; b < count; ++b) {
      const std::size_t off = g.row_offsets[b];
      const std::size_t n = g.row_offsets[b + 1] - off;
      std::vector<double> rows(logits.data().begin() + static_cast<long>(off * logits.cols()),
                               logits.data().begin() +
                                   static_cast<long>((off + n) * logits.cols()));
      out.emplace_back(num::Shape{n, logits.cols()}, std::move(rows));
    }
  }
  return out;
}

ExampleLoss build_example_loss(num::GradTape& tape, const ModelParams& params,
                               std::span<const TokenId> context,
                               std::span<const TokenId> continuation,
                               const InterventionPlan& plan, const GraphOptions& options) {
  if (continuation.empty()) throw UsageError("loss: continuation is empty");
  if (context.empty()) throw UsageError("loss: context is empty");
  const std::size_t total = context.size() + continuation.size();
  if (total > params.config.max_seq_len) {
    throw LengthError("loss: context+continuation of " + std::to_string(total) +
                      " tokens exceeds max_seq_len " +
                      std::to_string(params.config.max_seq_len));
  }
  TokenSeq joint(context.begin(), context.end());
  joint.insert(joint.end(), continuation.begin(), continuation.end());
  const std::vector<TokenSeq> seqs{std::move(joint)};
  ExampleLoss out;
  out.graph = build_forward(tape, params, seqs, plan, options);
  // Row t predicts token t+1, so continuation token j comes from row |x|-1+j.
  Var rows = num::slice(out.graph.logits, context.size() - 1, continuation.size(), 0,
                        params.config.vocab_size);
  out.loss = num::nll_loss(rows, continuation);
  return out;
}

double loss_on_example(const ModelParams& params, std::span<const TokenId> context,
                       std::span<const TokenId> continuation, const InterventionPlan& plan) {
  num::GradTape tape(false);
  return build_example_loss(tape, params, context, continuation, plan).loss.value().item();
}

}  // namespace hicd::model
