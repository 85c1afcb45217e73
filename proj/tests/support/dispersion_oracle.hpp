#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "hicd/numerics/tensor.hpp"

namespace hicd::testing {

// Literal composition: zero the visible (lower-triangular) logits of
// Q K^T / sqrt(dk), keep the causal mask at -inf, softmax each row.
inline num::Tensor literal_dispersion(const num::Tensor& q, const num::Tensor& k) {
  const std::size_t n = q.rows();
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<std::vector<double>> logits(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double dot = 0.0;
      for (std::size_t c = 0; c < q.cols(); ++c) dot += q(i, c) * k(j, c);
      const double scaled = dot / std::sqrt(static_cast<double>(q.cols()));
      const double keep = j <= i ? 0.0 : 1.0;  // M zeroes the lower triangle
      logits[i][j] = j <= i ? keep * scaled : -inf;
    }
  }
  num::Tensor out = num::Tensor::zeros(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -inf;
    for (double v : logits[i]) mx = std::max(mx, v);
    double z = 0.0;
    for (double v : logits[i]) z += std::exp(v - mx);
    for (std::size_t j = 0; j < n; ++j) out(i, j) = std::exp(logits[i][j] - mx) / z;
  }
  return out;
}

}  // namespace hicd::testing
