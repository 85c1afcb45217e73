#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "hicd/model/config.hpp"
#include "hicd/model/params.hpp"

namespace hicd::analysis {

using model::HeadId;
using model::InterventionPlan;
using model::TokenId;
using model::TokenSeq;

// "None", "Cut" or "Ave" for Normal, Pruned and Dispersed heads.
std::string mode_label(model::HeadMode mode);

struct NormProfile {
  HeadId head;
  std::string mode;
  std::vector<double> f_norm;        // ||f(x_j)|| per position
  std::vector<double> alpha_f_norm;  // ||sum_j s(i,j) f(x_j)|| per output position i
  num::Tensor f;                     // N x width, the transformed vectors
  num::Tensor weighted;              // N x width, the attention-weighted rows
};

struct NormOptions {
  // f(x) = x W_V^h W_O^h by default; false keeps f(x) = x W_V^h.
  bool through_output = true;
};

// Throws IndexError for a head outside the config; model errors pass through.
NormProfile value_norms(const model::ModelParams& params, std::span<const TokenId> tokens,
                        HeadId head, const InterventionPlan& plan, NormOptions options = {});

// Cosine similarity of two norm vectors. UsageError when shorter than 2 or
// the lengths differ, NumericError when either vector is all zero.
double norm_cosine(std::span<const double> a, std::span<const double> b);
double norm_cosine(const NormProfile& profile);

// probability[t - 1] = p(tokens[t] | tokens[<t]) for t = 1..N-1.
struct ConfidenceSeries {
  TokenSeq tokens;
  std::vector<double> probability;
};

// UsageError for fewer than 2 tokens.
ConfidenceSeries token_confidence(const model::ModelParams& params,
                                  std::span<const TokenId> tokens,
                                  const InterventionPlan& plan = {});

// I(i,j): flow from token i into token j, summed over heads of
// |s(j,i) * dL/ds(j,i)| where L is the NLL of tokens[target] given
// tokens[<target]. The matrix covers the target positions of that prefix.
struct SaliencyMatrix {
  std::size_t size = 0;
  std::size_t target = 0;
  std::string aggregation = "sum";
  std::vector<double> values;                 // size x size, row i = source
  std::vector<std::vector<double>> per_layer;  // same layout, one per layer

  double at(std::size_t i, std::size_t j) const { return values[i * size + j]; }
  double at(std::size_t layer, std::size_t i, std::size_t j) const {
    return per_layer[layer][i * size + j];
  }
};

// UsageError for target 0, RangeError for target >= tokens.size(),
// NumericError when a gradient is not finite.
SaliencyMatrix saliency(const model::ModelParams& params, std::span<const TokenId> tokens,
                        std::size_t target, const InterventionPlan& plan = {});

std::string norm_profile_csv(const NormProfile& profile);
std::string confidence_csv(const ConfidenceSeries& series);
// Dense matrix, one row per source token, no header.
std::string matrix_csv(std::span<const double> values, std::size_t size);

// Written next to every export as <path>.json.
struct ExportStamp {
  std::string kind;
  std::uint64_t checkpoint_hash = 0;
  std::uint64_t plan_hash = 0;
  std::map<std::string, std::string> extra;
};

void write_export(const std::filesystem::path& path, const std::string& csv,
                  const ExportStamp& stamp);

}  // namespace hicd::analysis
