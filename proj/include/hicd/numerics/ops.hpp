#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "hicd/numerics/tape.hpp"

// Differentiable operations. This is the complete list: anything the model
// needs is expressed with these, so every gradient path is covered by the
// finite-difference tests in tests/unit/test_numerics.cpp.
namespace hicd::num {

using TokenId = std::int32_t;

enum class Mask { None, Causal };

Var matmul(Var a, Var b);
// a * b^T
Var matmul_nt(Var a, Var b);
Var add(Var a, Var b);
// a + row broadcast over every row of a; row is 1 x cols(a).
Var add_row(Var a, Var row);
Var scale(Var a, double factor);
Var mul(Var a, Var b);
Var gelu(Var a);
Var sum(Var a);

// Row-wise softmax. With Mask::Causal, entry (i, j) with j > i is treated as
// -infinity and comes out exactly 0.
Var softmax_rows(Var x, Mask mask);
// Explicit visibility mask (row-major, nonzero = visible). A row with no
// visible entry is an error.
Var softmax_rows(Var x, const std::vector<std::uint8_t>& visible);

Var layer_norm(Var x, Var gain, Var bias, double epsilon);
Var embedding(Var table, std::span<const TokenId> ids);

Var concat_cols(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);
Var slice(Var x, std::size_t row0, std::size_t rows, std::size_t col0, std::size_t cols);

// Mean negative log-likelihood: -(1/T) sum_t log softmax(logits_t)[targets_t].
// logits has exactly one row per target.
Var nll_loss(Var logits, std::span<const TokenId> targets);

// Plain (tape-free) helpers.
Tensor matmul(const Tensor& a, const Tensor& b);
void softmax_inplace(std::span<double> row);
std::vector<double> log_softmax(std::span<const double> row);

}  // namespace hicd::num
