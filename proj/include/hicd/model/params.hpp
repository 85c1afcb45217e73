#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "hicd/model/config.hpp"
#include "hicd/numerics/tensor.hpp"

namespace hicd::model {

struct LayerParams {
  num::Tensor ln1_gain, ln1_bias;
  // d x d each; head h owns columns [h*hd, (h+1)*hd) of W_Q/W_K/W_V and the
  // same rows of W_O.
  num::Tensor w_q, w_k, w_v, w_o;
  num::Tensor ln2_gain, ln2_bias;
  num::Tensor ff_in, ff_in_bias, ff_out, ff_out_bias;

  friend bool operator==(const LayerParams&, const LayerParams&) = default;
};

struct ModelParams {
  ModelConfig config;
  num::Tensor token_embedding;     // V x d
  num::Tensor position_embedding;  // max_seq_len x d
  std::vector<LayerParams> layers;
  num::Tensor final_gain, final_bias;
  num::Tensor unembed;       // d x V
  num::Tensor unembed_bias;  // 1 x V

  // Every weight block with a stable name, in a fixed order shared by the
  // checkpoint format, the optimizer and the gradient map.
  std::vector<std::pair<std::string, const num::Tensor*>> named() const;
  std::vector<std::pair<std::string, num::Tensor*>> named();

  std::size_t parameter_count() const;

  // Throws DataError if a block shape disagrees with the config or a value is
  // not finite.
  void validate() const;

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

// Zero-filled parameters with the right shapes; layer-norm gains are 1.
ModelParams zero_params(const ModelConfig& config);

// Gaussian initialization, deterministic in `seed`.
ModelParams init_params(const ModelConfig& config, std::uint64_t seed);

// 64-bit FNV-1a over config and all weight bytes; used to key caches and
// stamp reports.
std::uint64_t content_hash(const ModelParams& params);

}  // namespace hicd::model
