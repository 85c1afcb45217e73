#include <cmath>
#include <filesystem>
#include <limits>
#include <random>

#include "doctest.h"
#include "hicd/error.hpp"
#include "hicd/intervene/intervene.hpp"
#include "hicd/model/transformer.hpp"
#include "support/dispersion_oracle.hpp"
#include "support/models.hpp"
#include "support/oracles.hpp"

using namespace hicd;
using namespace hicd::model;
using hicd::testing::all_heads;
using hicd::testing::literal_dispersion;
using hicd::testing::random_tensor;
using hicd::testing::random_tokens;
using hicd::testing::tiny_config;
using num::Tensor;

namespace {

void require_bit_equal(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  for (std::size_t i = 0; i < a.size(); ++i) REQUIRE(a[i] == b[i]);
}

}  // namespace

TEST_CASE("uniform prefix rows") {
  CHECK_THROWS_AS(intervene::disperse_attention_row_form(0), UsageError);
  CHECK(intervene::disperse_attention_row_form(1) == Tensor::from_rows({{1.0}}));
  const Tensor s = intervene::disperse_attention_row_form(3);
  CHECK(s(2, 0) == 1.0 / 3.0);
  CHECK(s(2, 1) == 1.0 / 3.0);
  CHECK(s(2, 2) == 1.0 / 3.0);
  CHECK(s(0, 1) == 0.0);
  CHECK(s(1, 2) == 0.0);
}

TEST_CASE("direct rows equal the literal zero-logit softmax") {
  std::mt19937_64 rng(101);
  for (int draw = 0; draw < 100; ++draw) {
    for (std::size_t n = 1; n <= 16; ++n) {
      const Tensor q = random_tensor(n, 4, rng, -3.0, 3.0);
      const Tensor k = random_tensor(n, 4, rng, -3.0, 3.0);
      const Tensor oracle = literal_dispersion(q, k);
      const Tensor direct = intervene::disperse_attention_row_form(n);
      REQUIRE(hicd::testing::max_abs_diff(oracle, direct) <= 1e-12);
    }
  }
}

TEST_CASE("dispersed rows are prefix-supported distributions") {
  for (std::size_t n = 1; n <= 64; ++n) {
    const Tensor s = intervene::disperse_attention_row_form(n);
    for (std::size_t i = 0; i < n; ++i) {
      double total = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (j > i) REQUIRE(s(i, j) == 0.0);
        REQUIRE(s(i, j) >= 0.0);
        total += s(i, j);
      }
      // Each entry is the correctly rounded 1/(i+1); the row sum carries only
      // summation rounding.
      REQUIRE(std::abs(total - 1.0) <= 1e-14);
    }
  }
}

TEST_CASE("dispersed head output") {
  std::mt19937_64 rng(103);
  const ModelConfig c = tiny_config(1, 1, 4, 8, 8);
  ModelParams p = init_params(c, 21);
  InterventionPlan dispersed;
  dispersed.set({0, 0}, HeadMode::Dispersed);

  SUBCASE("two tokens: row 1 is the mean of both value vectors") {
    const TokenSeq tokens{3, 5};
    const ForwardTrace t = forward(p, tokens, dispersed, Capture::all());
    const Tensor& x = t.layer_inputs[0];
    const Tensor& w = p.layers[0].w_v;
    for (std::size_t col = 0; col < 4; ++col) {
      double v0 = 0.0, v1 = 0.0;
      for (std::size_t r = 0; r < 4; ++r) {
        v0 += x(0, r) * w(r, col);
        v1 += x(1, r) * w(r, col);
      }
      CHECK(t.head_outputs[0](1, col) == doctest::Approx(0.5 * (v0 + v1)).epsilon(1e-13));
      CHECK(t.head_outputs[0](0, col) == doctest::Approx(v0).epsilon(1e-13));
    }
  }
  SUBCASE("single token: dispersion is a no-op") {
    const TokenSeq tokens{6};
    require_bit_equal(forward(p, tokens, dispersed).logits, forward(p, tokens, {}).logits);
  }
  SUBCASE("identical value vectors: dispersed output equals normal output") {
    // Same token at every position and no positional signal: all value rows match.
    p.position_embedding.fill(0.0);
    const TokenSeq tokens{2, 2, 2, 2, 2};
    const ForwardTrace a = forward(p, tokens, dispersed, Capture{.head_outputs = true});
    const ForwardTrace b = forward(p, tokens, {}, Capture{.head_outputs = true});
    CHECK(hicd::testing::max_abs_diff(a.head_outputs[0], b.head_outputs[0]) <= 1e-13);
  }
}

TEST_CASE("dispersing a head leaves lower layers untouched") {
  std::mt19937_64 rng(107);
  const ModelConfig c = tiny_config(3, 2, 8);
  const ModelParams p = init_params(c, 22);
  const TokenSeq tokens = random_tokens(8, 12, rng);
  InterventionPlan plan;
  for (HeadId added : all_heads(c)) {
    const ForwardTrace before = forward(p, tokens, plan, Capture{.attention = true, .head_outputs = true});
    plan.set(added, HeadMode::Dispersed);
    const ForwardTrace after = forward(p, tokens, plan, Capture{.attention = true, .head_outputs = true});
    for (HeadId h : all_heads(c)) {
      if (h.layer >= added.layer) continue;
      const std::size_t i = head_index(c, h);
      require_bit_equal(before.attention[i], after.attention[i]);
      require_bit_equal(before.head_outputs[i], after.head_outputs[i]);
    }
  }
}

TEST_CASE("pruning") {
  std::mt19937_64 rng(109);
  const ModelConfig c = tiny_config(2, 2, 8);
  const ModelParams p = init_params(c, 23);
  const TokenSeq tokens = random_tokens(7, 12, rng);

  SUBCASE("no pruned heads is bit-exact") {
    InterventionPlan none;
    require_bit_equal(forward(p, tokens, none).logits, forward(p, tokens, {}).logits);
  }
  SUBCASE("one head of a two-head layer: [H1; 0] W_O") {
    InterventionPlan plan;
    plan.set({1, 0}, HeadMode::Pruned);
    const ForwardTrace t = forward(p, tokens, plan, Capture{.head_outputs = true});
    const ForwardTrace n = forward(p, tokens, {}, Capture{.head_outputs = true});
    CHECK(t.head_outputs[head_index(c, {1, 0})] == Tensor::zeros(7, 4));
    require_bit_equal(t.head_outputs[head_index(c, {1, 1})], n.head_outputs[head_index(c, {1, 1})]);
    // Structural oracle: zeroing that head's W_O rows removes exactly its block.
    ModelParams cut = p;
    for (std::size_t r = 0; r < 4; ++r) {
      for (std::size_t col = 0; col < 8; ++col) cut.layers[1].w_o(r, col) = 0.0;
    }
    require_bit_equal(t.logits, forward(cut, tokens, {}).logits);
  }
  SUBCASE("whole layer equals removing the attention residual branch") {
    InterventionPlan plan;
    plan.set({0, 0}, HeadMode::Pruned);
    plan.set({0, 1}, HeadMode::Pruned);
    ModelParams no_branch = p;
    no_branch.layers[0].w_o.fill(0.0);
    require_bit_equal(forward(p, tokens, plan).logits, forward(no_branch, tokens, {}).logits);
  }
}

TEST_CASE("dispersion spec") {
  const ModelConfig c = tiny_config(2, 2, 8);
  intervene::DispersionSpec spec{{{0, 1}, {1, 0}}};
  CHECK_NOTHROW(spec.validate(c));
  const InterventionPlan plan = spec.to_plan();
  CHECK(plan.size() == 2);
  CHECK(plan.mode({0, 1}) == HeadMode::Dispersed);
  CHECK(spec.to_plan(HeadMode::Pruned).mode({1, 0}) == HeadMode::Pruned);
  spec.targets.insert({2, 0});
  CHECK_THROWS_AS(spec.validate(c), IndexError);
}

TEST_CASE("plan files") {
  InterventionPlan plan;
  plan.set({0, 1}, HeadMode::Dispersed);
  plan.set({3, 2}, HeadMode::Pruned);
  CHECK(intervene::parse_plan_json(intervene::plan_to_json(plan)) == plan);
  CHECK(intervene::parse_plan_json("[]").empty());
  CHECK(intervene::parse_plan_json(R"([{"layer":0,"head":0,"mode":"normal"}])").empty());
  CHECK_THROWS_AS(intervene::parse_plan_json("{"), DataError);
  CHECK_THROWS_AS(intervene::parse_plan_json(R"({"layer":0})"), DataError);
  CHECK_THROWS_AS(intervene::parse_plan_json(R"([{"layer":0,"head":1}])"), DataError);
  CHECK_THROWS_AS(intervene::parse_plan_json(R"([{"layer":-1,"head":1,"mode":"pruned"}])"),
                  DataError);
  CHECK_THROWS_AS(intervene::parse_plan_json(R"([{"layer":0,"head":1,"mode":"cut"}])"), DataError);
  CHECK_THROWS_AS(intervene::parse_plan_json(
                      R"([{"layer":0,"head":1,"mode":"pruned"},{"layer":0,"head":1,"mode":"dispersed"}])"),
                  DataError);

  const auto path = std::filesystem::temp_directory_path() / "hicd_test_plan.json";
  intervene::write_plan_file(path, plan);
  CHECK(intervene::read_plan_file(path) == plan);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(intervene::read_plan_file(path), DataError);

  InterventionPlan other = plan;
  CHECK(intervene::plan_hash(other) == intervene::plan_hash(plan));
  other.set({0, 1}, HeadMode::Pruned);
  CHECK(intervene::plan_hash(other) != intervene::plan_hash(plan));
}
