#pragma once

#include <random>
#include <vector>

#include "hicd/model/config.hpp"
#include "hicd/model/params.hpp"

namespace hicd::testing {

inline model::ModelConfig tiny_config(std::size_t layers, std::size_t heads, std::size_t dim,
                                      std::size_t vocab = 12, std::size_t max_seq = 16) {
  model::ModelConfig c;
  c.layers = layers;
  c.heads = heads;
  c.model_dim = dim;
  c.vocab_size = vocab;
  c.max_seq_len = max_seq;
  c.ff_dim = 2 * dim;
  return c;
}

inline std::vector<model::HeadId> all_heads(const model::ModelConfig& c) {
  std::vector<model::HeadId> out;
  for (std::size_t l = 0; l < c.layers; ++l) {
    for (std::size_t h = 0; h < c.heads; ++h) out.push_back({l, h});
  }
  return out;
}

inline model::TokenSeq random_tokens(std::size_t n, std::size_t vocab, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> dist(0, static_cast<int>(vocab) - 1);
  model::TokenSeq out(n);
  for (auto& t : out) t = dist(rng);
  return out;
}

// Bias the model toward emitting `token` everywhere.
inline void force_token(model::ModelParams& p, model::TokenId token, double margin = 60.0) {
  p.unembed_bias[static_cast<std::size_t>(token)] = margin;
}

}  // namespace hicd::testing
