#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "doctest.h"
#include "hicd/analysis/analysis.hpp"
#include "hicd/error.hpp"
#include "hicd/model/transformer.hpp"
#include "support/models.hpp"
#include "support/oracles.hpp"
#include "support/saliency_oracle.hpp"

using namespace hicd;
using namespace hicd::analysis;
using hicd::testing::all_heads;
using hicd::testing::random_tokens;
using hicd::testing::tiny_config;
using model::HeadMode;
using num::Tensor;

namespace {

model::InterventionPlan one(HeadId id, HeadMode mode) {
  model::InterventionPlan p;
  p.set(id, mode);
  return p;
}

std::vector<double> tensor_values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST_CASE("mode labels") {
  CHECK(mode_label(HeadMode::Normal) == "None");
  CHECK(mode_label(HeadMode::Pruned) == "Cut");
  CHECK(mode_label(HeadMode::Dispersed) == "Ave");
}

TEST_CASE("identical inputs give identical transformed norms") {
  const auto cfg = tiny_config(2, 2, 8);
  auto params = model::init_params(cfg, 1);
  params.position_embedding.fill(0.0);
  const model::TokenSeq tokens(6, 3);
  const auto p = value_norms(params, tokens, {0, 1}, {});
  for (double v : p.f_norm) CHECK(v == p.f_norm[0]);
  CHECK(p.f_norm[0] > 0.0);
  CHECK(p.mode == "None");
}

TEST_CASE("weighted output matches the head output") {
  const auto cfg = tiny_config(2, 2, 8);
  const auto params = model::init_params(cfg, 2);
  std::mt19937_64 rng(3);
  const auto tokens = random_tokens(7, cfg.vocab_size, rng);
  const HeadId id{1, 0};
  const auto trace = model::forward(params, tokens, {}, model::Capture::all());
  const std::size_t idx = model::head_index(cfg, id);

  NormOptions raw;
  raw.through_output = false;
  const auto pv = value_norms(params, tokens, id, {}, raw);
  CHECK(tensor_values(pv.f) == tensor_values(trace.values[idx]));
  CHECK(testing::max_abs_diff(pv.weighted, trace.head_outputs[idx]) < 1e-14);

  // Through W_O the weighted row equals H times the head's row block of W_O.
  const auto po = value_norms(params, tokens, id, {});
  const std::size_t hd = cfg.head_dim();
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    for (std::size_t c = 0; c < cfg.model_dim; ++c) {
      double want = 0.0;
      for (std::size_t r = 0; r < hd; ++r) {
        want += trace.head_outputs[idx].row(i)[r] * params.layers[1].w_o.row(id.head * hd + r)[c];
      }
      CHECK(std::abs(po.weighted.row(i)[c] - want) < 1e-12);
    }
  }
  CHECK(po.f_norm.size() == tokens.size());
  CHECK(po.alpha_f_norm.size() == tokens.size());
}

TEST_CASE("pruned head has zero weighted norms") {
  const auto cfg = tiny_config(2, 2, 8);
  const auto params = model::init_params(cfg, 4);
  std::mt19937_64 rng(5);
  const auto tokens = random_tokens(5, cfg.vocab_size, rng);
  const auto p = value_norms(params, tokens, {0, 0}, one({0, 0}, HeadMode::Pruned));
  CHECK(p.mode == "Cut");
  for (double v : p.alpha_f_norm) CHECK(v == 0.0);
  for (double v : p.f_norm) CHECK(v > 0.0);
  CHECK_THROWS_AS(norm_cosine(p), NumericError);
}

TEST_CASE("dispersed head averages the transformed prefix") {
  const auto cfg = tiny_config(2, 2, 8);
  const auto params = model::init_params(cfg, 6);
  const model::TokenSeq tokens{4, 9, 1};
  const auto p = value_norms(params, tokens, {1, 1}, one({1, 1}, HeadMode::Dispersed));
  CHECK(p.mode == "Ave");
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    double sq = 0.0;
    for (std::size_t c = 0; c < p.f.cols(); ++c) {
      double mean = 0.0;
      for (std::size_t j = 0; j <= i; ++j) mean += p.f.row(j)[c];
      mean /= static_cast<double>(i + 1);
      CHECK(std::abs(p.weighted.row(i)[c] - mean) < 1e-12);
      sq += mean * mean;
    }
    CHECK(std::abs(p.alpha_f_norm[i] - std::sqrt(sq)) < 1e-12);
  }
  // Row 0 attends only to itself.
  CHECK(std::abs(p.alpha_f_norm[0] - p.f_norm[0]) < 1e-12);
}

TEST_CASE("norm cosine") {
  const std::vector<double> a{1.0, 2.0, 0.5}, b{3.0, 6.0, 1.5};
  CHECK(norm_cosine(a, b) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(norm_cosine(std::vector<double>{1.0, 0.0}, std::vector<double>{0.0, 1.0}) == 0.0);
  CHECK_THROWS_AS(norm_cosine(std::vector<double>{1.0}, std::vector<double>{1.0}), UsageError);
  CHECK_THROWS_AS(norm_cosine(a, std::vector<double>{1.0, 2.0}), UsageError);
  CHECK_THROWS_AS(norm_cosine(a, std::vector<double>{0.0, 0.0, 0.0}), NumericError);
  const std::vector<double> c{1.0, 0.0, 0.0}, d{1.0, 1.0, 0.0};
  CHECK(norm_cosine(c, d) == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-15));
  CHECK_THROWS_AS(value_norms(model::init_params(tiny_config(1, 2, 8), 1),
                              model::TokenSeq{1, 2}, {1, 0}, {}),
                  IndexError);
}

TEST_CASE("token confidence") {
  const auto cfg = tiny_config(2, 2, 8, 64, 16);
  const auto flat = model::zero_params(cfg);
  const auto u = token_confidence(flat, model::TokenSeq{1, 2, 3, 4});
  REQUIRE(u.probability.size() == 3);
  for (double v : u.probability) CHECK(v == doctest::Approx(1.0 / 64.0).epsilon(1e-14));

  auto forced = model::init_params(cfg, 7);
  testing::force_token(forced, 5);
  const auto f = token_confidence(forced, model::TokenSeq{1, 5, 5});
  CHECK(f.probability[0] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(f.probability[1] == doctest::Approx(1.0).epsilon(1e-15));

  const auto params = model::init_params(cfg, 8);
  std::mt19937_64 rng(9);
  const auto tokens = random_tokens(10, cfg.vocab_size, rng);
  const auto s = token_confidence(params, tokens);
  double mean = 0.0;
  for (double v : s.probability) {
    CHECK(v > 0.0);
    CHECK(v <= 1.0);
    mean -= std::log(v);
  }
  mean /= static_cast<double>(s.probability.size());
  const model::TokenSeq ctx{tokens[0]};
  const model::TokenSeq rest(tokens.begin() + 1, tokens.end());
  CHECK(std::abs(mean - model::loss_on_example(params, ctx, rest, {})) < 1e-10);
  CHECK_THROWS_AS(token_confidence(params, model::TokenSeq{1}), UsageError);
}

TEST_CASE("saliency matches finite differences") {
  const auto cfg = tiny_config(2, 2, 8);
  std::mt19937_64 rng(10);
  for (std::uint64_t seed : {11u, 12u, 13u}) {
    const auto params = model::init_params(cfg, seed);
    const auto tokens = random_tokens(5, cfg.vocab_size, rng);
    for (const auto& plan : {model::InterventionPlan{}, one({0, 1}, HeadMode::Dispersed)}) {
      const auto m = saliency(params, tokens, 4, plan);
      REQUIRE(m.size == 4);
      const auto fd = testing::fd_saliency(params, tokens, 4, plan);
      const Tensor got({4, 4}, m.values), want({4, 4}, fd);
      CHECK(testing::relative_error(got, want) < 1e-3);
      for (std::size_t e = 0; e < 16; ++e) {
        CHECK(std::abs(m.values[e] - fd[e]) <= 1e-3 * std::abs(fd[e]) + 1e-9);
      }
    }
  }
}

TEST_CASE("saliency structure") {
  const auto cfg = tiny_config(3, 2, 8);
  const auto params = model::init_params(cfg, 14);
  std::mt19937_64 rng(15);
  const auto tokens = random_tokens(9, cfg.vocab_size, rng);
  const auto m = saliency(params, tokens, 8);
  CHECK(m.aggregation == "sum");
  CHECK(m.per_layer.size() == cfg.layers);
  for (std::size_t i = 0; i < m.size; ++i) {
    for (std::size_t j = 0; j < m.size; ++j) {
      CHECK(m.at(i, j) >= 0.0);
      if (i > j) {
        CHECK(m.at(i, j) == 0.0);
        for (std::size_t l = 0; l < cfg.layers; ++l) CHECK(m.at(l, i, j) == 0.0);
      }
      double total = 0.0;
      for (std::size_t l = 0; l < cfg.layers; ++l) total += m.at(l, i, j);
      CHECK(total == m.at(i, j));
    }
  }

  const auto single = saliency(params, tokens, 1);
  CHECK(single.size == 1);
  CHECK(single.values.size() == 1);

  // With every head pruned no attention entry carries flow.
  const auto cut = saliency(params, tokens, 6,
                            model::InterventionPlan::uniform(all_heads(cfg), HeadMode::Pruned));
  for (double v : cut.values) CHECK(v == 0.0);

  CHECK_THROWS_AS(saliency(params, tokens, 0), UsageError);
  CHECK_THROWS_AS(saliency(params, tokens, 9), RangeError);
}

TEST_CASE("analysis exports") {
  NormProfile p;
  p.mode = "Ave";
  p.f_norm = {1.5, 0.25};
  p.alpha_f_norm = {1.5, 0.1};
  CHECK(norm_profile_csv(p) == "position,f_norm,alpha_f_norm,mode\n0,1.5,1.5,Ave\n1,0.25,0.10000000000000001,Ave\n");
  ConfidenceSeries c{{3, 4, 5}, {0.5, 0.75}};
  CHECK(confidence_csv(c) == "position,token,confidence\n1,4,0.5\n2,5,0.75\n");
  CHECK(matrix_csv(std::vector<double>{1, 2, 0, 4}, 2) == "1,2\n0,4\n");
  CHECK_THROWS_AS(matrix_csv(std::vector<double>{1, 2, 3}, 2), DimensionError);

  const auto dir = std::filesystem::temp_directory_path() / "hicd_analysis_export";
  std::filesystem::create_directories(dir);
  ExportStamp stamp{"saliency", 0xabcULL, 0x12ULL, {{"target", "4"}}};
  write_export(dir / "m.csv", "1,2\n0,4\n", stamp);
  std::ifstream in(dir / "m.csv.json");
  std::stringstream ss;
  ss << in.rdbuf();
  CHECK(ss.str().find("\"kind\": \"saliency\"") != std::string::npos);
  CHECK(ss.str().find("\"target\": \"4\"") != std::string::npos);
  CHECK(ss.str().find("0000000000000abc") != std::string::npos);
  std::filesystem::remove_all(dir);
}
