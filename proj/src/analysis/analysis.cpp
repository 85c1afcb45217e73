#include "hicd/analysis/analysis.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "hicd/error.hpp"
#include "hicd/model/transformer.hpp"
#include "hicd/util/hash.hpp"
#include "json.hpp"

namespace hicd::analysis {

std::string mode_label(model::HeadMode mode) {
  switch (mode) {
    case model::HeadMode::Normal:
      return "None";
    case model::HeadMode::Pruned:
      return "Cut";
    case model::HeadMode::Dispersed:
      return "Ave";
  }
  return "None";
}

namespace {

double row_norm(std::span<const double> row) {
  double s = 0.0;
  for (double v : row) s += v * v;
  return std::sqrt(s);
}

void check_head(const model::ModelConfig& c, HeadId head) {
  if (head.layer >= c.layers || head.head >= c.heads) {
    throw IndexError("head " + model::to_string(head) + " outside a model with " +
                     std::to_string(c.layers) + " layers of " + std::to_string(c.heads) +
                     " heads");
  }
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

NormProfile value_norms(const model::ModelParams& params, std::span<const TokenId> tokens,
                        HeadId head, const InterventionPlan& plan, NormOptions options) {
  const model::ModelConfig& c = params.config;
  check_head(c, head);
  model::Capture capture;
  capture.attention = true;
  capture.values = true;
  const auto trace = model::forward(params, tokens, plan, capture);
  const std::size_t idx = model::head_index(c, head);
  const std::size_t hd = c.head_dim();

  num::Tensor f = trace.values[idx];
  if (options.through_output) {
    const auto& w_o = params.layers[head.layer].w_o;
    num::Tensor block = num::Tensor::zeros(hd, c.model_dim);
    for (std::size_t r = 0; r < hd; ++r) {
      const auto src = w_o.row(head.head * hd + r);
      std::copy(src.begin(), src.end(), block.row(r).begin());
    }
    f = num::matmul(f, block);
  }

  NormProfile p;
  p.head = head;
  p.mode = mode_label(plan.mode(head));
  if (plan.mode(head) == model::HeadMode::Pruned) {
    p.weighted = num::Tensor::zeros(f.rows(), f.cols());
  } else {
    p.weighted = num::matmul(trace.attention[idx], f);
  }
  for (std::size_t i = 0; i < f.rows(); ++i) {
    p.f_norm.push_back(row_norm(f.row(i)));
    p.alpha_f_norm.push_back(row_norm(p.weighted.row(i)));
  }
  p.f = std::move(f);
  return p;
}

double norm_cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw UsageError("norm vectors of lengths " + std::to_string(a.size()) + " and " +
                     std::to_string(b.size()));
  }
  if (a.size() < 2) throw UsageError("cosine similarity needs at least 2 positions");
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0) {
    throw NumericError("cosine similarity is undefined for an all-zero norm vector");
  }
  return std::clamp(ab / (std::sqrt(aa) * std::sqrt(bb)), -1.0, 1.0);
}

double norm_cosine(const NormProfile& profile) {
  return norm_cosine(profile.f_norm, profile.alpha_f_norm);
}

ConfidenceSeries token_confidence(const model::ModelParams& params,
                                  std::span<const TokenId> tokens,
                                  const InterventionPlan& plan) {
  if (tokens.size() < 2) throw UsageError("token confidence needs at least 2 tokens");
  const auto logits = model::forward(params, tokens, plan).logits;
  ConfidenceSeries s;
  s.tokens.assign(tokens.begin(), tokens.end());
  for (std::size_t t = 1; t < tokens.size(); ++t) {
    const auto lp = num::log_softmax(logits.row(t - 1));
    s.probability.push_back(std::exp(lp[static_cast<std::size_t>(tokens[t])]));
  }
  return s;
}

SaliencyMatrix saliency(const model::ModelParams& params, std::span<const TokenId> tokens,
                        std::size_t target, const InterventionPlan& plan) {
  const model::ModelConfig& c = params.config;
  if (target == 0) throw UsageError("saliency target must be at least 1");
  if (target >= tokens.size()) {
    throw RangeError("saliency target " + std::to_string(target) + " outside a sequence of " +
                     std::to_string(tokens.size()) + " tokens");
  }
  const std::vector<TokenSeq> seqs{TokenSeq(tokens.begin(), tokens.begin() + target)};
  num::GradTape tape;
  model::GraphOptions opts;
  opts.attention_grads = true;
  const auto g = model::build_forward(tape, params, seqs, plan, opts);
  const TokenId realized = tokens[target];
  num::Var row = num::slice(g.logits, target - 1, 1, 0, c.vocab_size);
  tape.backward(num::nll_loss(row, std::span(&realized, 1)));

  const std::size_t n = target;
  SaliencyMatrix m;
  m.size = n;
  m.target = target;
  m.values.assign(n * n, 0.0);
  m.per_layer.assign(c.layers, std::vector<double>(n * n, 0.0));
  for (std::size_t l = 0; l < c.layers; ++l) {
    for (std::size_t h = 0; h < c.heads; ++h) {
      const std::size_t idx = model::head_index(c, {l, h});
      const num::Tensor& s = g.attention[idx].value();
      const num::Tensor& grad = g.attention_probes[idx].grad();
      if (!grad.all_finite()) {
        throw NumericError("non-finite attention gradient for head " +
                           model::to_string(HeadId{l, h}));
      }
      // Entry (j, i) of the map is query j reading key i, i.e. flow i -> j.
      for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t i = 0; i <= j; ++i) {
          m.per_layer[l][i * n + j] += std::abs(s[j * n + i] * grad[j * n + i]);
        }
      }
    }
    for (std::size_t e = 0; e < n * n; ++e) m.values[e] += m.per_layer[l][e];
  }
  return m;
}

std::string norm_profile_csv(const NormProfile& p) {
  std::string out = "position,f_norm,alpha_f_norm,mode\n";
  for (std::size_t i = 0; i < p.f_norm.size(); ++i) {
    out += std::to_string(i) + "," + fmt(p.f_norm[i]) + "," + fmt(p.alpha_f_norm[i]) + "," +
           p.mode + "\n";
  }
  return out;
}

std::string confidence_csv(const ConfidenceSeries& s) {
  std::string out = "position,token,confidence\n";
  for (std::size_t t = 1; t < s.tokens.size(); ++t) {
    out += std::to_string(t) + "," + std::to_string(s.tokens[t]) + "," +
           fmt(s.probability[t - 1]) + "\n";
  }
  return out;
}

std::string matrix_csv(std::span<const double> values, std::size_t size) {
  if (values.size() != size * size) {
    throw DimensionError("matrix of " + std::to_string(values.size()) + " values is not " +
                         std::to_string(size) + "x" + std::to_string(size));
  }
  std::string out;
  for (std::size_t i = 0; i < size; ++i) {
    for (std::size_t j = 0; j < size; ++j) {
      if (j > 0) out += ",";
      out += fmt(values[i * size + j]);
    }
    out += "\n";
  }
  return out;
}

void write_export(const std::filesystem::path& path, const std::string& csv,
                  const ExportStamp& stamp) {
  {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    out << csv;
  }
  nlohmann::json j = {{"kind", stamp.kind},
                      {"checkpoint_hash", util::hex_digest(stamp.checkpoint_hash)},
                      {"plan_hash", util::hex_digest(stamp.plan_hash)}};
  for (const auto& [k, v] : stamp.extra) j[k] = v;
  std::filesystem::path mp = path;
  mp += ".json";
  std::ofstream mf(mp);
  if (!mf) throw DataError("cannot write " + mp.string());
  mf << j.dump(2) << "\n";
}

}  // namespace hicd::analysis
