#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "hicd/decode/contrast.hpp"
#include "hicd/heads/importance.hpp"
#include "hicd/model/params.hpp"

namespace hicd::harness {

using decode::ChoiceNorm;
using heads::McExample;
using heads::ScoreReduction;

struct DualClass {
  double acc_a = 0.0;  // arithmetic mean
  double acc_h = 0.0;  // harmonic mean, 0 when both are 0

  friend bool operator==(const DualClass&, const DualClass&) = default;
};

// UsageError when either accuracy is outside [0, 1].
DualClass dual_class_metrics(double acc_correct, double acc_hallucinated);

struct GridPoint {
  double alpha = 0.0;
  double scale = 0.0;
  std::size_t k = 0;

  friend bool operator==(const GridPoint&, const GridPoint&) = default;
};

struct PipelineOptions {
  ScoreReduction reduction = ScoreReduction::Taylor;
  ChoiceNorm norm = ChoiceNorm::PerToken;
  model::HeadMode mode = model::HeadMode::Dispersed;  // Pruned gives the Cut baseline
  std::uint64_t seed = 42;                            // recorded only
};

struct SummaryAccuracy {
  double acc_correct = 0.0;       // examples whose gold is the "correct" label
  double acc_hallucinated = 0.0;  // examples whose gold is the "hallucinated" label
  DualClass metrics;

  friend bool operator==(const SummaryAccuracy&, const SummaryAccuracy&) = default;
};

struct EvalReport {
  double accuracy = 0.0;
  double accuracy_per_token = 0.0;  // both normalizations, side by side
  double accuracy_sum = 0.0;
  std::vector<decode::DecodeRecord> records;
  std::optional<SummaryAccuracy> summary;  // summary-check datasets only
  GridPoint point;
  std::vector<heads::ScoredHead> heads;    // selected inducing heads
  std::string norm;
  std::string reduction;
  std::string mode;
  std::uint64_t seed = 0;
  std::uint64_t checkpoint_hash = 0;
  std::uint64_t dataset_hash = 0;
  std::uint64_t plan_hash = 0;
  double elapsed_seconds = 0.0;

  // Everything except elapsed_seconds.
  bool same_results(const EvalReport& other) const;
};

// JSON object; timing is left out unless asked for, which keeps reports of
// identical runs byte-identical.
std::string report_json(const EvalReport& r, bool with_timing = false, bool with_records = true);

// Plain greedy multiple-choice evaluation of the base model.
EvalReport plain_evaluation(const model::ModelParams& params, const std::vector<McExample>& data,
                            ChoiceNorm norm = ChoiceNorm::PerToken);

// adversarial set -> importance (right and wrong) -> inducing scores ->
// top-k -> contrastive MC decoding. Scoring is skipped when k is 0, since the
// plan is then empty. A failing stage rethrows with the stage name prefixed
// and the original error category. With a cache the importance bundle is
// loaded or stored there.
EvalReport run_pipeline(const model::ModelParams& params, const std::vector<McExample>& data,
                        const GridPoint& point, const PipelineOptions& options = {},
                        const heads::ImportanceCache* cache = nullptr);

// Contrastive MC evaluation with a given plan instead of selected heads. The
// report's heads list the plan's entries with score 0 and point.k = plan size.
EvalReport evaluate_plan(const model::ModelParams& params, const std::vector<McExample>& data,
                         const model::InterventionPlan& plan, double alpha,
                         const PipelineOptions& options = {});

struct SweepGrid {
  std::vector<double> alphas;
  std::vector<double> scales;
  std::vector<std::size_t> ks;
  std::string preset;

  // UsageError for an empty axis, a non-finite alpha or a negative scale.
  void validate() const;
};

struct SweepResult {
  std::vector<EvalReport> reports;  // k outer, then scale, then alpha
  std::size_t best = 0;
  std::optional<std::size_t> baseline;  // the (k=0, alpha=0) point when present
  // Spearman r between k and the best accuracy reached at each k; empty when
  // fewer than two k values or a flat curve leave it undefined.
  std::optional<double> k_spearman;
  std::vector<std::pair<std::size_t, double>> k_curve;
  bool strict_improvement = false;  // best accuracy > baseline accuracy
};

// Importance is computed once and reused for every point; induced
// distributions are computed once per distinct plan.
SweepResult sweep(const model::ModelParams& params, const std::vector<McExample>& data,
                  const SweepGrid& grid, const PipelineOptions& options = {},
                  const heads::ImportanceCache* cache = nullptr);

std::string sweep_json(const SweepResult& r, bool with_timing = false);

struct InductionReport {
  double base_accuracy = 0.0;
  double induced_accuracy = 0.0;
  double gap = 0.0;  // base - induced
  double base_gold_nll = 0.0;
  double induced_gold_nll = 0.0;
  std::size_t heads = 0;
  std::uint64_t plan_hash = 0;
};

// Accuracy of the base model and of the model under `plan` on its own, plus
// the mean per-token NLL of the gold choices under each.
InductionReport induction_check(const model::ModelParams& params,
                                const std::vector<McExample>& data,
                                const model::InterventionPlan& plan,
                                ChoiceNorm norm = ChoiceNorm::PerToken);

std::string induction_json(const InductionReport& r);

struct Preset {
  std::string name;
  double alpha = 0.0;
  double scale = 0.0;
  std::size_t k = 0;
  bool documentation_only = false;  // values from a 7B model, never asserted here
};

const std::vector<Preset>& presets();
// UsageError for an unknown name.
const Preset& find_preset(const std::string& name);

// Appends one summary line (no per-example records) to a JSONL run log.
void append_run_log(const std::filesystem::path& log, const std::string& command,
                    const EvalReport& report);

// Per-run directory: report.json, records.jsonl and config.txt (the
// effective key = value settings).
void write_run_dir(const std::filesystem::path& dir, const EvalReport& report,
                   const std::string& config_snapshot);

}  // namespace hicd::harness
