#include "hicd/model/train.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

#include "hicd/error.hpp"
#include "hicd/model/transformer.hpp"
#include "hicd/numerics/ops.hpp"

namespace hicd::model {

using num::Tensor;
using num::Var;

namespace {

void check_data(const ModelConfig& config, std::span<const TrainingSequence> data) {
  if (data.empty()) throw UsageError("training data is empty");
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& ex = data[i];
    if (ex.context.empty() || ex.continuation.empty()) {
      throw DataError("training example " + std::to_string(i) +
                      " needs a non-empty context and continuation");
    }
    if (ex.context.size() + ex.continuation.size() > config.max_seq_len) {
      throw LengthError("training example " + std::to_string(i) + " exceeds max_seq_len " +
                        std::to_string(config.max_seq_len));
    }
  }
}

// Mean NLL over all continuation tokens of the batch.
Var batch_loss(const ForwardGraph& graph, const ModelParams& params,
               std::span<const TrainingSequence> batch) {
  std::vector<Var> rows;
  std::vector<TokenId> targets;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& ex = batch[b];
    rows.push_back(num::slice(graph.logits, graph.row_offsets[b] + ex.context.size() - 1,
                              ex.continuation.size(), 0, params.config.vocab_size));
    targets.insert(targets.end(), ex.continuation.begin(), ex.continuation.end());
  }
  return num::nll_loss(rows.size() == 1 ? rows.front() : num::concat_rows(rows), targets);
}

std::vector<TokenSeq> joint_sequences(std::span<const TrainingSequence> batch) {
  std::vector<TokenSeq> seqs;
  seqs.reserve(batch.size());
  for (const auto& ex : batch) {
    TokenSeq s = ex.context;
    s.insert(s.end(), ex.continuation.begin(), ex.continuation.end());
    seqs.push_back(std::move(s));
  }
  return seqs;
}

double schedule(const TrainOptions& o, std::size_t step) {
  if (o.warmup_steps > 0 && step < o.warmup_steps) {
    return o.learning_rate * static_cast<double>(step + 1) / static_cast<double>(o.warmup_steps);
  }
  const std::size_t decay = o.steps > o.warmup_steps ? o.steps - o.warmup_steps : 1;
  const double t = std::min(1.0, static_cast<double>(step - std::min(step, o.warmup_steps)) /
                                     static_cast<double>(decay));
  const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * t));
  return o.learning_rate * (o.min_lr_fraction + (1.0 - o.min_lr_fraction) * cosine);
}

}  // namespace

TrainResult train_from(ModelParams params, std::span<const TrainingSequence> data,
                       const TrainOptions& options, std::uint64_t seed,
                       const TrainCallback& callback) {
  params.validate();
  check_data(params.config, data);
  if (options.batch_size == 0) throw UsageError("batch_size must be positive");
  if (!(options.learning_rate >= 0.0)) throw UsageError("learning_rate must be >= 0");

  auto blocks = params.named();
  std::vector<std::vector<double>> m(blocks.size()), v(blocks.size());
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    m[i].assign(blocks[i].second->size(), 0.0);
    v[i].assign(blocks[i].second->size(), 0.0);
  }

  std::mt19937_64 rng(seed ^ 0x5bd1e995ull);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t cursor = 0;

  TrainResult result;
  result.losses.reserve(options.steps);
  std::vector<TrainingSequence> batch;
  for (std::size_t step = 0; step < options.steps; ++step) {
    batch.clear();
    while (batch.size() < options.batch_size) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      batch.push_back(data[order[cursor++]]);
    }

    num::GradTape tape;
    const auto seqs = joint_sequences(batch);
    GraphOptions go;
    go.param_grads = true;
    ForwardGraph graph;
    double lv = 0.0;
    try {
      graph = build_forward(tape, params, seqs, InterventionPlan{}, go);
      Var loss = batch_loss(graph, params, batch);
      lv = loss.value().item();
      if (std::isfinite(lv)) tape.backward(loss);
    } catch (const TrainingError&) {
      throw;
    } catch (const NumericError& e) {
      throw TrainingError("training diverged at step " + std::to_string(step) + ": " + e.what(),
                          step);
    }
    if (!std::isfinite(lv)) {
      throw TrainingError("training loss became non-finite at step " + std::to_string(step), step);
    }

    double sq = 0.0;
    for (const Var& p : graph.params) {
      for (double g : p.grad().data()) sq += g * g;
    }
    if (!std::isfinite(sq)) {
      throw TrainingError("gradient became non-finite at step " + std::to_string(step), step);
    }
    const double norm = std::sqrt(sq);
    const double clip = options.grad_clip > 0.0 && norm > options.grad_clip
                            ? options.grad_clip / norm
                            : 1.0;

    const double lr = schedule(options, step);
    const double t = static_cast<double>(step + 1);
    const double c1 = 1.0 - std::pow(options.beta1, t);
    const double c2 = 1.0 - std::pow(options.beta2, t);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      auto g = graph.params[i].grad().data();
      auto w = blocks[i].second->data();
      for (std::size_t k = 0; k < w.size(); ++k) {
        const double gk = g[k] * clip;
        m[i][k] = options.beta1 * m[i][k] + (1.0 - options.beta1) * gk;
        v[i][k] = options.beta2 * v[i][k] + (1.0 - options.beta2) * gk * gk;
        const double update = (m[i][k] / c1) / (std::sqrt(v[i][k] / c2) + options.adam_epsilon);
        w[k] -= lr * (update + options.weight_decay * w[k]);
      }
    }
    for (const auto& [name, tensor] : blocks) {
      if (!tensor->all_finite()) {
        throw TrainingError("parameter " + name + " became non-finite at step " +
                                std::to_string(step),
                            step);
      }
    }
    result.losses.push_back(lv);
    if (callback) callback({step, lv, lr});
  }
  result.params = std::move(params);
  return result;
}

TrainResult train_toy(const ModelConfig& config, std::span<const TrainingSequence> data,
                      const TrainOptions& options, std::uint64_t seed,
                      const TrainCallback& callback) {
  config.validate();
  return train_from(init_params(config, seed), data, options, seed, callback);
}

double mean_loss(const ModelParams& params, std::span<const TrainingSequence> data) {
  check_data(params.config, data);
  double total = 0.0;
  std::size_t tokens = 0;
  constexpr std::size_t kChunk = 64;
  for (std::size_t start = 0; start < data.size(); start += kChunk) {
    const auto chunk = data.subspan(start, std::min(kChunk, data.size() - start));
    num::GradTape tape(false);
    const auto seqs = joint_sequences(chunk);
    ForwardGraph graph = build_forward(tape, params, seqs, InterventionPlan{});
    std::size_t n = 0;
    for (const auto& ex : chunk) n += ex.continuation.size();
    total += batch_loss(graph, params, chunk).value().item() * static_cast<double>(n);
    tokens += n;
  }
  return total / static_cast<double>(tokens);
}

}  // namespace hicd::model
