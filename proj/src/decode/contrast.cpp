#include "hicd/decode/contrast.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "hicd/error.hpp"
#include "hicd/model/transformer.hpp"
#include "json.hpp"

namespace hicd::decode {

std::string to_string(ChoiceNorm n) { return n == ChoiceNorm::PerToken ? "per-token" : "sum"; }

ChoiceNorm choice_norm_from_string(const std::string& name) {
  if (name == "per-token") return ChoiceNorm::PerToken;
  if (name == "sum") return ChoiceNorm::Sum;
  throw UsageError("unknown normalization '" + name + "' (expected per-token|sum)");
}

void ContrastParams::validate(const model::ModelConfig& config) const {
  if (!std::isfinite(alpha)) throw UsageError("alpha must be finite");
  if (max_length == 0) throw UsageError("max_length must be at least 1");
  if (end_token && (*end_token < 0 || static_cast<std::size_t>(*end_token) >= config.vocab_size)) {
    throw IndexError("end token " + std::to_string(*end_token) + " outside the vocabulary");
  }
  plan.validate(config);
}

NextTokenDist softmax_dist(std::span<const double> logits) {
  NextTokenDist p(logits.begin(), logits.end());
  num::softmax_inplace(p);
  return p;
}

NextTokenDist floor_dist(std::span<const double> p, double floor) {
  NextTokenDist out(p.begin(), p.end());
  for (double& v : out) v = std::max(v, floor);
  return out;
}

namespace {

void check_dist(std::span<const double> p, const char* name) {
  double total = 0.0;
  for (double v : p) {
    if (!(v > 0.0)) {
      throw NumericError(std::string(name) +
                         " has a zero or negative probability; floor it before contrasting");
    }
    if (!std::isfinite(v)) throw NumericError(std::string(name) + " is not finite");
    total += v;
  }
  const double slack = 1e-10 + static_cast<double>(p.size()) * kProbabilityFloor;
  if (std::abs(total - 1.0) > slack) {
    throw DataError(std::string(name) + " sums to " + std::to_string(total) + ", not 1");
  }
}

void check_sizes(std::size_t a, std::size_t b) {
  if (a != b) {
    throw DimensionError("contrast over distributions of size " + std::to_string(a) + " and " +
                         std::to_string(b));
  }
  if (a == 0) throw DimensionError("contrast over empty distributions");
}

}  // namespace

NextTokenDist contrast_dist(std::span<const double> p_orig, std::span<const double> p_induc,
                            double alpha) {
  check_sizes(p_orig.size(), p_induc.size());
  check_dist(p_orig, "p_orig");
  check_dist(p_induc, "p_induc");
  NextTokenDist z(p_orig.size());
  for (std::size_t i = 0; i < z.size(); ++i) {
    z[i] = (1.0 + alpha) * std::log(p_orig[i]) - alpha * std::log(p_induc[i]);
  }
  num::softmax_inplace(z);
  return z;
}

std::vector<double> contrast_log(std::span<const double> logp_orig,
                                 std::span<const double> logp_induc, double alpha) {
  check_sizes(logp_orig.size(), logp_induc.size());
  if (logp_orig.empty()) throw DimensionError("contrast of empty distributions");
  const double log_floor = std::log(kProbabilityFloor);
  // Renormalizing first makes constant shifts of either input irrelevant and
  // keeps the floor a floor on probabilities.
  const std::vector<double> lo = num::log_softmax(logp_orig);
  const std::vector<double> li = num::log_softmax(logp_induc);
  std::vector<double> z(lo.size());
  for (std::size_t i = 0; i < z.size(); ++i) {
    z[i] = (1.0 + alpha) * std::max(lo[i], log_floor) - alpha * std::max(li[i], log_floor);
  }
  return num::log_softmax(z);
}

std::pair<NextTokenDist, NextTokenDist> next_token_pair(const model::ModelParams& params,
                                                        std::span<const TokenId> tokens,
                                                        const ContrastParams& contrast) {
  contrast.validate(params.config);
  const num::Tensor base = model::forward(params, tokens, {}).logits;
  NextTokenDist p_orig = softmax_dist(base.row(base.rows() - 1));
  if (contrast.plan.empty()) return {p_orig, p_orig};
  const num::Tensor induced = model::forward(params, tokens, contrast.plan).logits;
  return {std::move(p_orig), softmax_dist(induced.row(induced.rows() - 1))};
}

namespace {

// Sequences to run for one example and where each choice token's row lives.
struct ExamplePlan {
  std::vector<TokenSeq> sequences;
  // Per choice token: (sequence index, row).
  std::vector<std::vector<std::pair<std::size_t, std::size_t>>> sources;
  // Per choice token: deduplicated row slot.
  std::vector<std::vector<std::size_t>> index;
  std::size_t row_count = 0;
};

ExamplePlan plan_example(const model::ModelConfig& config, const McExample& ex) {
  ex.validate();
  ExamplePlan plan;
  std::map<TokenSeq, std::size_t> seq_ids;
  std::map<TokenSeq, std::size_t> prefix_rows;
  plan.sources.resize(ex.choices.size());
  plan.index.resize(ex.choices.size());
  for (std::size_t c = 0; c < ex.choices.size(); ++c) {
    const TokenSeq& choice = ex.choices[c];
    if (ex.context.size() + choice.size() > config.max_seq_len) {
      throw LengthError("context + choice " + std::to_string(c) + " has " +
                        std::to_string(ex.context.size() + choice.size()) +
                        " tokens, above max_seq_len " + std::to_string(config.max_seq_len));
    }
    TokenSeq seq = ex.context;
    seq.insert(seq.end(), choice.begin(), choice.end() - 1);
    auto [it, fresh] = seq_ids.try_emplace(seq, plan.sequences.size());
    if (fresh) plan.sequences.push_back(seq);
    TokenSeq prefix = ex.context;
    for (std::size_t j = 0; j < choice.size(); ++j) {
      auto [row, added] = prefix_rows.try_emplace(prefix, plan.row_count);
      if (added) ++plan.row_count;
      plan.index[c].push_back(row->second);
      plan.sources[c].push_back({it->second, ex.context.size() - 1 + j});
      prefix.push_back(choice[j]);
    }
  }
  return plan;
}

ExampleDists fill_dists(const ExamplePlan& plan, std::span<const num::Tensor> logits) {
  ExampleDists d;
  d.rows.resize(plan.row_count);
  d.index = plan.index;
  for (std::size_t c = 0; c < plan.index.size(); ++c) {
    for (std::size_t j = 0; j < plan.index[c].size(); ++j) {
      auto& row = d.rows[plan.index[c][j]];
      if (!row.empty()) continue;
      const auto [seq, r] = plan.sources[c][j];
      row = num::log_softmax(logits[seq].row(r));
    }
  }
  return d;
}

}  // namespace

ExampleDists example_dists(const model::ModelParams& params, const McExample& example,
                           const InterventionPlan& plan) {
  const ExamplePlan ep = plan_example(params.config, example);
  const auto logits = model::forward_logits(params, ep.sequences, plan);
  return fill_dists(ep, logits);
}

std::vector<ExampleDists> dataset_dists(const model::ModelParams& params,
                                        const std::vector<McExample>& dataset,
                                        const InterventionPlan& plan) {
  std::vector<ExamplePlan> plans;
  plans.reserve(dataset.size());
  std::vector<TokenSeq> all;
  std::vector<std::size_t> first;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    try {
      plans.push_back(plan_example(params.config, dataset[i]));
    } catch (const Error& e) {
      throw DataError("example " + std::to_string(i) + ": " + e.what());
    }
    first.push_back(all.size());
    all.insert(all.end(), plans.back().sequences.begin(), plans.back().sequences.end());
  }
  const auto logits = model::forward_logits(params, all, plan);
  std::vector<ExampleDists> out;
  out.reserve(dataset.size());
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    out.push_back(fill_dists(
        plans[i], std::span(logits).subspan(first[i], plans[i].sequences.size())));
  }
  return out;
}

std::vector<double> choice_scores(const McExample& example, const ExampleDists& base,
                                  const ExampleDists* induced, double alpha, ChoiceNorm norm) {
  if (alpha != 0.0 && induced == nullptr) {
    throw UsageError("a non-zero alpha needs induced distributions");
  }
  std::vector<double> scores;
  scores.reserve(example.choices.size());
  for (std::size_t c = 0; c < example.choices.size(); ++c) {
    const TokenSeq& choice = example.choices[c];
    double total = 0.0;
    for (std::size_t j = 0; j < choice.size(); ++j) {
      const std::size_t row = base.index.at(c).at(j);
      const auto tok = static_cast<std::size_t>(choice[j]);
      if (alpha == 0.0) {
        total += base.rows[row].at(tok);
      } else {
        total += contrast_log(base.rows[row], induced->rows.at(row), alpha).at(tok);
      }
    }
    scores.push_back(norm == ChoiceNorm::PerToken ? total / static_cast<double>(choice.size())
                                                  : total);
  }
  return scores;
}

std::vector<double> mc_scores(const model::ModelParams& params, const McExample& example,
                              const ContrastParams& contrast) {
  contrast.validate(params.config);
  const ExampleDists base = example_dists(params, example, {});
  if (contrast.degenerate()) return choice_scores(example, base, nullptr, 0.0, contrast.norm);
  const ExampleDists induced = example_dists(params, example, contrast.plan);
  return choice_scores(example, base, &induced, contrast.alpha, contrast.norm);
}

double score_choice(const model::ModelParams& params, const McExample& example,
                    std::size_t choice, const ContrastParams& contrast) {
  if (choice >= example.choices.size()) {
    throw RangeError("choice index " + std::to_string(choice) + " out of range for " +
                     std::to_string(example.choices.size()) + " choices");
  }
  return mc_scores(params, example, contrast)[choice];
}

std::size_t argmax_lowest(std::span<const double> values) {
  if (values.empty()) throw UsageError("argmax over an empty list");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

std::size_t mc_predict(const model::ModelParams& params, const McExample& example,
                       const ContrastParams& contrast) {
  return argmax_lowest(mc_scores(params, example, contrast));
}

Generation generate_greedy(const model::ModelParams& params, std::span<const TokenId> prompt,
                           const ContrastParams& contrast) {
  contrast.validate(params.config);
  if (prompt.empty()) throw UsageError("generation needs a non-empty prompt");
  if (prompt.size() > params.config.max_seq_len) {
    throw LengthError("prompt of " + std::to_string(prompt.size()) +
                      " tokens exceeds max_seq_len " + std::to_string(params.config.max_seq_len));
  }
  Generation g;
  TokenSeq seq(prompt.begin(), prompt.end());
  while (g.tokens.size() < contrast.max_length) {
    if (seq.size() > params.config.max_seq_len) {
      g.truncated = true;
      break;
    }
    const num::Tensor base = model::forward(params, seq, {}).logits;
    std::vector<double> scores = num::log_softmax(base.row(base.rows() - 1));
    if (!contrast.degenerate()) {
      const num::Tensor ind = model::forward(params, seq, contrast.plan).logits;
      scores = contrast_log(scores, num::log_softmax(ind.row(ind.rows() - 1)), contrast.alpha);
    }
    const auto next = static_cast<TokenId>(argmax_lowest(scores));
    g.tokens.push_back(next);
    seq.push_back(next);
    if (contrast.end_token && next == *contrast.end_token) {
      g.ended = true;
      break;
    }
  }
  return g;
}

std::string to_jsonl(const DecodeRecord& r) {
  nlohmann::json j = {{"id", r.id},           {"scores", r.scores}, {"prediction", r.prediction},
                      {"gold", r.gold},       {"correct", r.correct}, {"alpha", r.alpha},
                      {"k", r.k},             {"s", r.s}};
  return j.dump();
}

DecodeRecord decode_record_from_json(const std::string& line) {
  try {
    const auto j = nlohmann::json::parse(line);
    DecodeRecord r;
    r.id = j.at("id").get<std::size_t>();
    r.scores = j.at("scores").get<std::vector<double>>();
    r.prediction = j.at("prediction").get<std::size_t>();
    r.gold = j.at("gold").get<std::size_t>();
    r.correct = j.at("correct").get<bool>();
    r.alpha = j.at("alpha").get<double>();
    r.k = j.at("k").get<std::size_t>();
    r.s = j.at("s").get<double>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed decode record: ") + e.what());
  }
}

}  // namespace hicd::decode
