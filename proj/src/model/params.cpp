#include "hicd/model/params.hpp"

#include <cmath>
#include <random>

#include "hicd/error.hpp"
#include "hicd/util/hash.hpp"

namespace hicd::model {

using num::Tensor;

namespace {

template <typename Self, typename Out>
void collect(Self& self, Out& out) {
  out.emplace_back("token_embedding", &self.token_embedding);
  out.emplace_back("position_embedding", &self.position_embedding);
  for (std::size_t l = 0; l < self.layers.size(); ++l) {
    auto& layer = self.layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    out.emplace_back(p + "ln1_gain", &layer.ln1_gain);
    out.emplace_back(p + "ln1_bias", &layer.ln1_bias);
    out.emplace_back(p + "w_q", &layer.w_q);
    out.emplace_back(p + "w_k", &layer.w_k);
    out.emplace_back(p + "w_v", &layer.w_v);
    out.emplace_back(p + "w_o", &layer.w_o);
    out.emplace_back(p + "ln2_gain", &layer.ln2_gain);
    out.emplace_back(p + "ln2_bias", &layer.ln2_bias);
    out.emplace_back(p + "ff_in", &layer.ff_in);
    out.emplace_back(p + "ff_in_bias", &layer.ff_in_bias);
    out.emplace_back(p + "ff_out", &layer.ff_out);
    out.emplace_back(p + "ff_out_bias", &layer.ff_out_bias);
  }
  out.emplace_back("final_gain", &self.final_gain);
  out.emplace_back("final_bias", &self.final_bias);
  out.emplace_back("unembed", &self.unembed);
  out.emplace_back("unembed_bias", &self.unembed_bias);
}

}  // namespace

std::vector<std::pair<std::string, const Tensor*>> ModelParams::named() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  collect(*this, out);
  return out;
}

std::vector<std::pair<std::string, Tensor*>> ModelParams::named() {
  std::vector<std::pair<std::string, Tensor*>> out;
  collect(*this, out);
  return out;
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named()) n += t->size();
  return n;
}

void ModelParams::validate() const {
  const ModelParams expected = zero_params(config);
  const auto want = expected.named();
  const auto have = named();
  if (want.size() != have.size()) {
    throw DataError("model params: expected " + std::to_string(want.size()) + " blocks, got " +
                    std::to_string(have.size()));
  }
  for (std::size_t i = 0; i < want.size(); ++i) {
    if (want[i].second->shape() != have[i].second->shape()) {
      throw DataError("model params: block " + have[i].first + " has shape " +
                      num::shape_string(have[i].second->shape()) + ", expected " +
                      num::shape_string(want[i].second->shape()));
    }
    if (!have[i].second->all_finite()) {
      throw DataError("model params: block " + have[i].first + " holds a non-finite value");
    }
  }
}

ModelParams zero_params(const ModelConfig& config) {
  config.validate();
  const std::size_t d = config.model_dim;
  ModelParams p;
  p.config = config;
  p.token_embedding = Tensor::zeros(config.vocab_size, d);
  p.position_embedding = Tensor::zeros(config.max_seq_len, d);
  auto ones = [](std::size_t n) {
    Tensor t = Tensor::zeros(1, n);
    t.fill(1.0);
    return t;
  };
  p.layers.resize(config.layers);
  for (LayerParams& l : p.layers) {
    l.ln1_gain = ones(d);
    l.ln1_bias = Tensor::zeros(1, d);
    l.w_q = Tensor::zeros(d, d);
    l.w_k = Tensor::zeros(d, d);
    l.w_v = Tensor::zeros(d, d);
    l.w_o = Tensor::zeros(d, d);
    l.ln2_gain = ones(d);
    l.ln2_bias = Tensor::zeros(1, d);
    l.ff_in = Tensor::zeros(d, config.ff_dim);
    l.ff_in_bias = Tensor::zeros(1, config.ff_dim);
    l.ff_out = Tensor::zeros(config.ff_dim, d);
    l.ff_out_bias = Tensor::zeros(1, d);
  }
  p.final_gain = ones(d);
  p.final_bias = Tensor::zeros(1, d);
  p.unembed = Tensor::zeros(d, config.vocab_size);
  p.unembed_bias = Tensor::zeros(1, config.vocab_size);
  return p;
}

ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
  ModelParams p = zero_params(config);
  std::mt19937_64 rng(seed);
  auto fill = [&rng](Tensor& t, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    for (double& v : t.data()) v = dist(rng);
  };
  const double d = static_cast<double>(config.model_dim);
  const double in_std = 1.0 / std::sqrt(d);
  // Residual-branch outputs are damped with depth so the stream stays O(1).
  const double out_std = in_std / std::sqrt(2.0 * static_cast<double>(config.layers));
  fill(p.token_embedding, 1.0);
  fill(p.position_embedding, 1.0);
  for (LayerParams& l : p.layers) {
    fill(l.w_q, in_std);
    fill(l.w_k, in_std);
    fill(l.w_v, in_std);
    fill(l.w_o, out_std);
    fill(l.ff_in, in_std);
    fill(l.ff_out, out_std * std::sqrt(d / static_cast<double>(config.ff_dim)));
  }
  fill(p.unembed, in_std);
  return p;
}

std::uint64_t content_hash(const ModelParams& params) {
  util::Fnv1a h;
  const ModelConfig& c = params.config;
  h.value(c.layers);
  h.value(c.heads);
  h.value(c.model_dim);
  h.value(c.vocab_size);
  h.value(c.max_seq_len);
  h.value(c.ff_dim);
  h.value(c.layer_norm_epsilon);
  for (const auto& [name, t] : params.named()) {
    h.text(name);
    h.values(t->data());
  }
  return h.digest();
}

}  // namespace hicd::model
