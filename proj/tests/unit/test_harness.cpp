#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "doctest.h"
#include "hicd/error.hpp"
#include "hicd/harness/config_file.hpp"
#include "hicd/harness/dataset.hpp"
#include "hicd/harness/pipeline.hpp"
#include "hicd/harness/synthetic.hpp"
#include "hicd/intervene/intervene.hpp"
#include "support/models.hpp"

using namespace hicd;
using namespace hicd::harness;
using hicd::testing::all_heads;
using hicd::testing::tiny_config;
using model::HeadMode;

namespace {

std::vector<McExample> small_kv(std::size_t n = 24, std::uint64_t seed = 5) {
  SyntheticTaskSpec spec;
  spec.examples = n;
  spec.pairs = 3;
  spec.seed = seed;
  return gen_synthetic(spec);
}

model::ModelParams small_model(std::uint64_t seed = 1) {
  return model::init_params(tiny_config(2, 2, 8, kCharVocab, 16), seed);
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::filesystem::path fresh_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("dual class metrics") {
  const auto d = dual_class_metrics(0.2, 0.3);
  CHECK(d.acc_a == 0.25);
  CHECK(d.acc_h == 0.24);
  const auto same = dual_class_metrics(0.7, 0.7);
  CHECK(same.acc_a == doctest::Approx(0.7).epsilon(1e-15));
  CHECK(same.acc_h == doctest::Approx(0.7).epsilon(1e-15));
  CHECK(dual_class_metrics(0.0, 0.9).acc_h == 0.0);
  CHECK(dual_class_metrics(0.0, 0.0).acc_h == 0.0);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 1000; ++i) {
    const auto m = dual_class_metrics(u(rng), u(rng));
    CHECK(m.acc_h <= m.acc_a);
  }
  CHECK_THROWS_AS(dual_class_metrics(1.2, 0.5), UsageError);
  CHECK_THROWS_AS(dual_class_metrics(0.5, -0.1), UsageError);
}

TEST_CASE("dataset lines") {
  const auto ex = parse_example(R"({"context": "A3B7?B", "choices": ["7", "3"], "gold": 0, "task": "kv"})");
  CHECK(ex.context == encode("A3B7?B"));
  CHECK(ex.choices == std::vector<model::TokenSeq>{encode("7"), encode("3")});
  CHECK(ex.task == "kv");
  const auto ids = parse_example(R"({"context": [1, 2], "choices": [[3, 4], [5]], "gold": 1})");
  CHECK(ids.choices[0] == model::TokenSeq{3, 4});
  CHECK(ids.task.empty());

  const std::string bad_lines[] = {
      "not json",
      R"({"context": [1], "choices": [[2]], "gold": 0})",
      R"({"context": [1], "choices": [[2], [3]], "gold": 2})",
      R"({"context": [1], "choices": [[2], [2]], "gold": 0})",
      R"({"context": [], "choices": [[2], [3]], "gold": 0})",
      R"({"context": [1.5], "choices": [[2], [3]], "gold": 0})",
      R"({"context": [-1], "choices": [[2], [3]], "gold": 0})",
      R"({"choices": [[2], [3]], "gold": 0})",
      R"({"context": [1], "choices": [[2], [3]], "gold": -1})",
  };
  for (const auto& line : bad_lines) CHECK_THROWS_AS(parse_example(line, 7), DataError);
  try {
    parse_dataset("{\"context\": [1], \"choices\": [[2], [3]], \"gold\": 0}\n\nbroken\n");
    FAIL("expected a DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("line 3") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_dataset("\n\n"), DataError);
}

TEST_CASE("dataset files round trip") {
  const auto data = small_kv(10);
  const auto dir = fresh_dir("hicd_dataset_io");
  write_dataset(dir / "d.jsonl", data);
  CHECK(read_dataset(dir / "d.jsonl") == data);
  CHECK_THROWS_AS(read_dataset(dir / "missing.jsonl"), DataError);

  check_compatible(data, tiny_config(1, 1, 8, kCharVocab, 16));
  CHECK_THROWS_AS(check_compatible(data, tiny_config(1, 1, 8, 20, 16)), DataError);
  CHECK_THROWS_AS(check_compatible(data, tiny_config(1, 1, 8, kCharVocab, 5)), DataError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("config file text") {
  const auto kv = parse_config_text("# comment\nalpha = 0.5\n\n topk=10  # trailing\nalpha = 1.5\n");
  CHECK(kv.size() == 2);
  CHECK(kv.at("alpha") == "1.5");
  CHECK(kv.at("topk") == "10");
  CHECK_THROWS_AS(parse_config_text("alpha 0.5\n"), UsageError);
  CHECK_THROWS_AS(parse_config_text(" = 3\n"), UsageError);
  CHECK_THROWS_AS(read_config_file("/nonexistent/hicd.conf"), DataError);
}

TEST_CASE("full degeneracy reproduces plain evaluation") {
  const auto params = small_model();
  const auto data = small_kv();
  for (ChoiceNorm norm : {ChoiceNorm::PerToken, ChoiceNorm::Sum}) {
    PipelineOptions opts;
    opts.norm = norm;
    const auto plain = plain_evaluation(params, data, norm);
    const auto piped = run_pipeline(params, data, {0.0, 0.0, 0}, opts);
    CHECK(piped.records == plain.records);
    CHECK(piped.accuracy == plain.accuracy);
    CHECK(piped.accuracy_sum == plain.accuracy_sum);
    CHECK(piped.accuracy_per_token == plain.accuracy_per_token);
    // alpha is irrelevant without heads
    const auto piped_alpha = run_pipeline(params, data, {1.3, 5.0, 0}, opts);
    for (std::size_t i = 0; i < data.size(); ++i) {
      CHECK(piped_alpha.records[i].scores == plain.records[i].scores);
    }
  }
}

TEST_CASE("pipeline is deterministic") {
  const auto params = small_model(2);
  const auto data = small_kv(16);
  const GridPoint p{0.8, 1.0, 2};
  const auto a = run_pipeline(params, data, p);
  const auto b = run_pipeline(params, data, p);
  CHECK(a.same_results(b));
  CHECK(report_json(a) == report_json(b));
  CHECK(a.heads.size() == 2);
  CHECK(a.plan_hash != intervene::plan_hash({}));
  CHECK(a.checkpoint_hash == model::content_hash(params));
  CHECK(a.dataset_hash == heads::dataset_hash(data));
  CHECK(report_json(a).find("elapsed") == std::string::npos);
  CHECK(report_json(a, true).find("elapsed_seconds") != std::string::npos);
}

TEST_CASE("sweep points equal standalone runs") {
  const auto params = small_model(3);
  const auto data = small_kv(16);
  SweepGrid grid{{0.0, 0.5, -0.4}, {0.0, 10.0}, {0, 1, 3}, "test"};
  const auto dir = fresh_dir("hicd_sweep_cache");
  const heads::ImportanceCache cache(dir);
  const auto result = sweep(params, data, grid, {}, &cache);
  REQUIRE(result.reports.size() == 18);
  std::size_t i = 0;
  for (std::size_t k : grid.ks) {
    for (double s : grid.scales) {
      for (double a : grid.alphas) {
        const auto& r = result.reports[i++];
        CHECK(r.point == GridPoint{a, s, k});
        CHECK(r.same_results(run_pipeline(params, data, r.point)));
      }
    }
  }
  REQUIRE(result.baseline.has_value());
  CHECK(result.reports[*result.baseline].point == GridPoint{0.0, 0.0, 0});
  CHECK(result.reports[result.best].accuracy >= result.reports[*result.baseline].accuracy);
  CHECK(result.strict_improvement ==
        (result.reports[result.best].accuracy > result.reports[*result.baseline].accuracy));
  CHECK(result.k_curve.size() == 3);
  for (const auto& r : result.reports) CHECK(r.accuracy <= result.reports[result.best].accuracy);

  // A second sweep reads the cached importance and gives the same reports.
  const auto again = sweep(params, data, grid, {}, &cache);
  for (std::size_t j = 0; j < again.reports.size(); ++j) {
    CHECK(again.reports[j].same_results(result.reports[j]));
  }
  CHECK(sweep_json(again) == sweep_json(result));

  const auto single = sweep(params, data, {{0.7}, {1.0}, {2}, ""});
  REQUIRE(single.reports.size() == 1);
  CHECK(single.reports[0].same_results(run_pipeline(params, data, {0.7, 1.0, 2})));
  CHECK_FALSE(single.baseline.has_value());
  CHECK_FALSE(single.k_spearman.has_value());
  std::filesystem::remove_all(dir);
}

TEST_CASE("sweep tie breaking and validation") {
  const auto params = small_model(4);
  const auto data = small_kv(8);
  // Without heads every point scores the same; the smallest (k, |alpha|, s) wins.
  const auto r = sweep(params, data, {{0.5, -0.3, 0.0}, {2.0, 1.0}, {0}, ""});
  CHECK(r.reports[r.best].point == GridPoint{0.0, 1.0, 0});
  CHECK_FALSE(r.strict_improvement);
  CHECK_THROWS_AS(sweep(params, data, {{}, {1.0}, {0}, ""}), UsageError);
  CHECK_THROWS_AS(sweep(params, data, {{0.5}, {-1.0}, {0}, ""}), UsageError);
  CHECK_THROWS_AS(sweep(params, data, {{std::nan("")}, {1.0}, {0}, ""}), UsageError);
}

TEST_CASE("stage errors keep their category") {
  const auto params = small_model(5);
  const auto data = small_kv(4);
  try {
    run_pipeline(params, data, {1.0, 0.0, 99});
    FAIL("expected a RangeError");
  } catch (const RangeError& e) {
    CHECK(std::string(e.what()).rfind("head selection: ", 0) == 0);
  }
  auto long_data = data;
  long_data[0].context.assign(20, 1);
  try {
    run_pipeline(params, long_data, {1.0, 0.0, 2});
    FAIL("expected a LengthError");
  } catch (const LengthError& e) {
    CHECK(std::string(e.what()).rfind("importance: ", 0) == 0);
  }
  CHECK_THROWS_AS(run_pipeline(params, {}, {}), UsageError);
}

TEST_CASE("induction check") {
  const auto params = small_model(6);
  const auto data = small_kv(20);
  const auto none = induction_check(params, data, {});
  CHECK(none.gap == 0.0);
  CHECK(none.base_gold_nll == none.induced_gold_nll);
  CHECK(none.base_accuracy == plain_evaluation(params, data).accuracy);
  const auto cfg = params.config;
  const auto all =
      induction_check(params, data, model::InterventionPlan::uniform(all_heads(cfg), HeadMode::Dispersed));
  CHECK(all.heads == cfg.head_count());
  CHECK(all.gap == all.base_accuracy - all.induced_accuracy);
  CHECK(all.base_gold_nll == none.base_gold_nll);
  CHECK(all.induced_gold_nll != all.base_gold_nll);
  CHECK(induction_json(all).find("induced_gold_nll") != std::string::npos);
  model::InterventionPlan bad;
  bad.set({5, 0}, HeadMode::Dispersed);
  CHECK_THROWS_AS(induction_check(params, data, bad), IndexError);
}

TEST_CASE("summary datasets report both class accuracies") {
  SyntheticTaskSpec spec;
  spec.kind = TaskKind::SummaryCheck;
  spec.examples = 30;
  spec.pairs = 2;
  const auto data = gen_synthetic(spec);
  const auto params = small_model(7);
  const auto r = run_pipeline(params, data, {});
  REQUIRE(r.summary.has_value());
  std::size_t nc = 0, hc = 0, nh = 0, hh = 0;
  for (const auto& rec : r.records) {
    if (rec.gold == 0) {
      ++nc;
      hc += rec.correct;
    } else {
      ++nh;
      hh += rec.correct;
    }
  }
  CHECK(r.summary->acc_correct == static_cast<double>(hc) / static_cast<double>(nc));
  CHECK(r.summary->acc_hallucinated == static_cast<double>(hh) / static_cast<double>(nh));
  CHECK(r.summary->metrics.acc_h <= r.summary->metrics.acc_a);
  CHECK_FALSE(run_pipeline(params, small_kv(6), {}).summary.has_value());
}

TEST_CASE("presets") {
  CHECK(find_preset("hellaswag").documentation_only);
  CHECK(find_preset("hellaswag").alpha == 1.1);
  CHECK(find_preset("truthfulqa").alpha == -6.0);
  CHECK_FALSE(find_preset("kv-recall").documentation_only);
  CHECK_THROWS_AS(find_preset("nope"), UsageError);
}

TEST_CASE("run log and run directory") {
  const auto params = small_model(8);
  const auto data = small_kv(6);
  const auto r = run_pipeline(params, data, {0.5, 1.0, 1});
  const auto dir = fresh_dir("hicd_run_dir");
  append_run_log(dir / "runs.jsonl", "eval", r);
  append_run_log(dir / "runs.jsonl", "eval", r);
  const std::string log = slurp(dir / "runs.jsonl");
  CHECK(std::count(log.begin(), log.end(), '\n') == 2);
  CHECK(log.find("\"command\":\"eval\"") != std::string::npos);
  CHECK(log.find("\"records\"") == std::string::npos);

  write_run_dir(dir / "run1", r, "alpha = 0.5\n");
  const std::string recs = slurp(dir / "run1" / "records.jsonl");
  CHECK(std::count(recs.begin(), recs.end(), '\n') == 6);
  CHECK(slurp(dir / "run1" / "config.txt") == "alpha = 0.5\n");
  CHECK(slurp(dir / "run1" / "report.json").find("\"accuracy\"") != std::string::npos);
  std::filesystem::remove_all(dir);
}
