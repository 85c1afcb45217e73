#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "hicd/heads/example.hpp"
#include "hicd/model/config.hpp"
#include "hicd/model/params.hpp"

namespace hicd::heads {

using model::HeadId;

// How the gradient tensor dL/dH^{l,h} becomes one number per head.
enum class ScoreReduction {
  Taylor,  // |sum(H * dL/dH)|
  GradL1,  // mean(|dL/dH|)
};

std::string to_string(ScoreReduction r);
ScoreReduction score_reduction_from_string(const std::string& name);

enum class Provenance { Right, WrongAveraged, Combined };

std::string to_string(Provenance p);
Provenance provenance_from_string(const std::string& name);

class ImportanceMatrix {
 public:
  ImportanceMatrix() = default;
  ImportanceMatrix(std::size_t layers, std::size_t heads, Provenance provenance,
                   std::size_t sample_count = 0);

  std::size_t layers() const { return layers_; }
  std::size_t heads() const { return heads_; }
  std::size_t size() const { return scores_.size(); }

  double& at(HeadId id);
  double at(HeadId id) const;
  std::span<double> scores() { return scores_; }
  std::span<const double> scores() const { return scores_; }

  Provenance provenance = Provenance::Right;
  std::size_t sample_count = 0;

  friend bool operator==(const ImportanceMatrix&, const ImportanceMatrix&) = default;

 private:
  std::size_t layers_ = 0;
  std::size_t heads_ = 0;
  std::vector<double> scores_;
};

// Mean over pairs of the per-pair reduced |dL/dH^{l,h}|, where L is the
// continuation NLL of the pair's answer. The reduction sorts each head's
// per-pair values before summing, so the result does not depend on pair
// order. `plan` lets scoring run on an intervened model; it is empty for the
// pipeline. Throws UsageError for no pairs and NumericError naming the head
// and pair when a gradient is not finite.
ImportanceMatrix head_importance(const model::ModelParams& params,
                                 std::span<const ScoredPair> pairs, ScoreReduction reduction,
                                 const model::InterventionPlan& plan = {});

// Reduced score of every head for one pair, in head_index order.
std::vector<double> pair_head_scores(const model::ModelParams& params, const ScoredPair& pair,
                                     ScoreReduction reduction,
                                     const model::InterventionPlan& plan = {});

// One Right-provenance matrix per wrong-answer slot: slot j scores the j-th
// wrong choice of every example that has one.
std::vector<ImportanceMatrix> wrong_slot_importance(const model::ModelParams& params,
                                                    std::span<const AdversarialSet> sets,
                                                    ScoreReduction reduction);

// Elementwise mean; provenance WrongAveraged. UsageError on an empty list,
// DimensionError on mixed shapes.
ImportanceMatrix wrong_head_average(std::span<const ImportanceMatrix> per_wrong_answer);

// F = right - wrong_avg.
ImportanceMatrix discrepancy_factor(const ImportanceMatrix& right, const ImportanceMatrix& wrong_avg);

// S = right - s * F; provenance Combined. UsageError when s < 0.
ImportanceMatrix inducing_scores(const ImportanceMatrix& right, const ImportanceMatrix& wrong_avg,
                                 double s);

struct ScoredHead {
  HeadId id;
  double score = 0.0;

  friend bool operator==(const ScoredHead&, const ScoredHead&) = default;
};

struct InducingSet {
  std::vector<ScoredHead> heads;  // descending score, ties by (layer, head)
  std::size_t k = 0;
  double scale = 0.0;

  std::set<HeadId> ids() const;
  model::InterventionPlan plan(model::HeadMode mode = model::HeadMode::Dispersed) const;

  friend bool operator==(const InducingSet&, const InducingSet&) = default;
};

// RangeError when k > L*M; UsageError when the matrix is not Combined.
InducingSet select_topk(const ImportanceMatrix& scores, std::size_t k, double scale = 0.0);

// Top-k heads of any matrix, same ordering rule, as a set (H_r / H_w).
std::set<HeadId> top_heads(const ImportanceMatrix& scores, std::size_t k);

// Spearman rank correlation with average ranks for ties. UsageError when the
// lengths differ or are < 2; NumericError when either side has no rank
// variance.
double spearman(std::span<const double> a, std::span<const double> b);

// |H_i ∩ H_r| - beta * |H_i ∩ H_w|. UsageError when beta < 0.
double overlap_metric(const InducingSet& inducing, const std::set<HeadId>& right_set,
                      const std::set<HeadId>& wrong_set, double beta = 1.0);

// CSV with header layer,head,score,provenance.
std::string importance_csv(const ImportanceMatrix& m);
ImportanceMatrix parse_importance_csv(const std::string& text);

struct ImportanceMeta {
  std::string reduction;
  std::string checkpoint_hash;
  std::string dataset_hash;
};

void write_importance(const std::filesystem::path& csv_path, const ImportanceMatrix& m,
                      const ImportanceMeta& meta);
// Reads the CSV and checks it against the JSON sidecar (<csv>.json) when present.
ImportanceMatrix read_importance(const std::filesystem::path& csv_path,
                                 ImportanceMeta* meta = nullptr);

// Right and per-slot wrong matrices for one (checkpoint, dataset, reduction).
struct ImportanceBundle {
  ImportanceMatrix right;
  std::vector<ImportanceMatrix> wrong_slots;
  ImportanceMatrix wrong_average;
};

ImportanceBundle score_dataset(const model::ModelParams& params,
                               const std::vector<McExample>& dataset, ScoreReduction reduction);

// Write-once directory cache of ImportanceBundles keyed by
// (checkpoint hash, dataset hash, reduction).
class ImportanceCache {
 public:
  explicit ImportanceCache(std::filesystem::path dir);

  std::optional<ImportanceBundle> load(std::uint64_t checkpoint, std::uint64_t dataset,
                                       ScoreReduction reduction) const;
  void store(std::uint64_t checkpoint, std::uint64_t dataset, ScoreReduction reduction,
             const ImportanceBundle& bundle) const;

  // Loads, or computes and stores.
  ImportanceBundle get(const model::ModelParams& params, const std::vector<McExample>& dataset,
                       ScoreReduction reduction) const;

 private:
  std::filesystem::path entry(std::uint64_t checkpoint, std::uint64_t dataset,
                              ScoreReduction reduction) const;
  std::filesystem::path dir_;
};

}  // namespace hicd::heads
