#pragma once

#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hicd/heads/example.hpp"
#include "hicd/model/config.hpp"
#include "hicd/model/params.hpp"

namespace hicd::decode {

using heads::McExample;
using model::InterventionPlan;
using model::TokenId;
using model::TokenSeq;

// Probabilities are clamped to this value before taking logs in the contrast.
inline constexpr double kProbabilityFloor = 1e-12;

enum class ChoiceNorm { PerToken, Sum };

std::string to_string(ChoiceNorm n);
ChoiceNorm choice_norm_from_string(const std::string& name);

struct ContrastParams {
  double alpha = 0.0;
  InterventionPlan plan;  // applied to the induced pass
  ChoiceNorm norm = ChoiceNorm::PerToken;
  std::size_t max_length = 16;
  std::optional<TokenId> end_token;

  // Throws UsageError for max_length 0 or a non-finite alpha, IndexError for
  // a plan outside the config.
  void validate(const model::ModelConfig& config) const;

  // With alpha 0 or an empty plan the contrast is the base distribution and
  // the induced pass is skipped.
  bool degenerate() const { return alpha == 0.0 || plan.empty(); }
};

using NextTokenDist = std::vector<double>;

NextTokenDist softmax_dist(std::span<const double> logits);
NextTokenDist floor_dist(std::span<const double> p, double floor = kProbabilityFloor);

// p ∝ exp[(1+α) log p_orig − α log p_induc]. Throws NumericError when an
// entry is not strictly positive, DimensionError on a size mismatch and
// DataError when an input does not sum to 1 within 1e-10 plus the slack
// flooring may add.
NextTokenDist contrast_dist(std::span<const double> p_orig, std::span<const double> p_induc,
                            double alpha);

// Same contrast on log probabilities; returns the log of the normalized
// result. Each input is log-normalized before flooring, so unnormalized
// log weights (logits) are accepted.
std::vector<double> contrast_log(std::span<const double> logp_orig,
                                 std::span<const double> logp_induc, double alpha);

// Next-token distributions after `tokens` from the base model and from the
// model under contrast.plan.
std::pair<NextTokenDist, NextTokenDist> next_token_pair(const model::ModelParams& params,
                                                        std::span<const TokenId> tokens,
                                                        const ContrastParams& contrast);

// Log-softmax rows that condition each choice token of an example. Choice c,
// token j reads rows[index[c][j]]; choices sharing a prefix share rows.
struct ExampleDists {
  std::vector<std::vector<double>> rows;
  std::vector<std::vector<std::size_t>> index;
};

ExampleDists example_dists(const model::ModelParams& params, const McExample& example,
                           const InterventionPlan& plan);

// Batched over a dataset; element i belongs to dataset[i].
std::vector<ExampleDists> dataset_dists(const model::ModelParams& params,
                                        const std::vector<McExample>& dataset,
                                        const InterventionPlan& plan);

// Per-choice scores from precomputed rows. `induced` is ignored when alpha is
// 0 and may then be null.
std::vector<double> choice_scores(const McExample& example, const ExampleDists& base,
                                  const ExampleDists* induced, double alpha, ChoiceNorm norm);

// Sum (or per-token mean) of log contrastive probabilities of the choice's
// tokens. RangeError for a bad index, LengthError when context + choice is
// longer than max_seq_len.
double score_choice(const model::ModelParams& params, const McExample& example,
                    std::size_t choice, const ContrastParams& contrast);

std::vector<double> mc_scores(const model::ModelParams& params, const McExample& example,
                              const ContrastParams& contrast);

// Argmax with ties to the lowest index.
std::size_t argmax_lowest(std::span<const double> values);

std::size_t mc_predict(const model::ModelParams& params, const McExample& example,
                       const ContrastParams& contrast);

struct Generation {
  TokenSeq tokens;         // generated tokens only
  bool truncated = false;  // stopped because the context window filled up
  bool ended = false;      // stopped on end_token (which is included)
};

// Greedy argmax over the contrastive distribution.
Generation generate_greedy(const model::ModelParams& params, std::span<const TokenId> prompt,
                           const ContrastParams& contrast);

// One line of a decode report.
struct DecodeRecord {
  std::size_t id = 0;
  std::vector<double> scores;
  std::size_t prediction = 0;
  std::size_t gold = 0;
  bool correct = false;
  double alpha = 0.0;
  std::size_t k = 0;
  double s = 0.0;

  friend bool operator==(const DecodeRecord&, const DecodeRecord&) = default;
};

std::string to_jsonl(const DecodeRecord& r);
DecodeRecord decode_record_from_json(const std::string& line);

}  // namespace hicd::decode
