#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "hicd/model/config.hpp"
#include "hicd/model/params.hpp"

namespace hicd::model {

// One supervised example; loss is taken on the continuation tokens only.
struct TrainingSequence {
  TokenSeq context;
  TokenSeq continuation;

  friend bool operator==(const TrainingSequence&, const TrainingSequence&) = default;
};

struct TrainOptions {
  std::size_t steps = 2000;
  std::size_t batch_size = 32;
  double learning_rate = 3e-3;
  double min_lr_fraction = 0.1;  // cosine decay floor
  std::size_t warmup_steps = 100;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_epsilon = 1e-8;
  double weight_decay = 0.0;
  double grad_clip = 1.0;  // global L2 norm; 0 disables
};

struct TrainStep {
  std::size_t step = 0;
  double loss = 0.0;
  double learning_rate = 0.0;
};

using TrainCallback = std::function<void(const TrainStep&)>;

struct TrainResult {
  ModelParams params;
  std::vector<double> losses;  // mean batch loss per step
};

// Adam on the continuation NLL, starting from init_params(config, seed).
// Batches are drawn from a per-epoch shuffle seeded by `seed`, so the result
// is a pure function of (config, data, options, seed).
// Throws TrainingError carrying the step index if the loss or a gradient
// stops being finite.
TrainResult train_toy(const ModelConfig& config, std::span<const TrainingSequence> data,
                      const TrainOptions& options, std::uint64_t seed,
                      const TrainCallback& callback = {});

// Same loop, continuing from existing parameters.
TrainResult train_from(ModelParams params, std::span<const TrainingSequence> data,
                       const TrainOptions& options, std::uint64_t seed,
                       const TrainCallback& callback = {});

// Mean continuation NLL over a batch, evaluated without gradients.
double mean_loss(const ModelParams& params, std::span<const TrainingSequence> data);

}  // namespace hicd::model
