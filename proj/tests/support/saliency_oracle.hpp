#pragma once

// Finite-difference saliency: each attention entry is nudged through the
// forward pass's additive probe and the target NLL is differenced.

#include <cmath>
#include <vector>

#include "hicd/model/transformer.hpp"
#include "hicd/numerics/tape.hpp"

namespace hicd::testing {

inline double target_nll(const model::ModelParams& params, const model::TokenSeq& prefix,
                         model::TokenId realized, const model::InterventionPlan& plan,
                         const model::ProbeSet& probes) {
  num::GradTape tape(false);
  model::GraphOptions opts;
  opts.probes = &probes;
  const std::vector<model::TokenSeq> seqs{prefix};
  const auto g = model::build_forward(tape, params, seqs, plan, opts);
  const auto lp = num::log_softmax(g.logits.value().row(prefix.size() - 1));
  return -lp[static_cast<std::size_t>(realized)];
}

// Returns I in the same layout as analysis::SaliencyMatrix::values.
inline std::vector<double> fd_saliency(const model::ModelParams& params,
                                       const model::TokenSeq& tokens, std::size_t target,
                                       const model::InterventionPlan& plan, double eps = 1e-5) {
  const model::ModelConfig& c = params.config;
  const model::TokenSeq prefix(tokens.begin(), tokens.begin() + target);
  const std::size_t n = target;
  model::Capture cap;
  cap.attention = true;
  const auto trace = model::forward(params, prefix, plan, cap);
  std::vector<double> out(n * n, 0.0);
  for (std::size_t l = 0; l < c.layers; ++l) {
    for (std::size_t h = 0; h < c.heads; ++h) {
      const model::HeadId id{l, h};
      const num::Tensor& s = trace.attention[model::head_index(c, id)];
      for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t i = 0; i <= j; ++i) {
          model::ProbeSet probes;
          probes.attention[id] = num::Tensor::zeros(n, n);
          probes.attention[id][j * n + i] = eps;
          const double up = target_nll(params, prefix, tokens[target], plan, probes);
          probes.attention[id][j * n + i] = -eps;
          const double down = target_nll(params, prefix, tokens[target], plan, probes);
          out[i * n + j] += std::abs(s[j * n + i] * (up - down) / (2.0 * eps));
        }
      }
    }
  }
  return out;
}

}  // namespace hicd::testing
