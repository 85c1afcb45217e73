#include <set>

#include "doctest.h"
#include "hicd/error.hpp"
#include "hicd/harness/synthetic.hpp"

using namespace hicd;
using namespace hicd::harness;

namespace {

SyntheticTaskSpec spec_for(TaskKind kind, std::size_t n = 200, std::uint64_t seed = 9) {
  SyntheticTaskSpec s;
  s.kind = kind;
  s.examples = n;
  s.seed = seed;
  return s;
}

}  // namespace

TEST_CASE("tokenizer") {
  CHECK(encode("A3?") == model::TokenSeq{33, 19, 31});
  CHECK(encode("abc") == encode("ABC"));
  CHECK(decode(encode("HELLO WORLD_")) == "HELLO WORLD_");
  CHECK(char_token(' ') == 0);
  CHECK(char_token('_') == 63);
  CHECK_THROWS_AS(char_token('~'), DataError);
  CHECK_THROWS_AS(encode("tab\t"), DataError);
  CHECK_THROWS_AS(decode({64}), IndexError);
}

TEST_CASE("generators are deterministic and well formed") {
  for (TaskKind kind :
       {TaskKind::KeyValueRecall, TaskKind::PatternCompletion, TaskKind::SummaryCheck}) {
    CAPTURE(to_string(kind));
    const auto spec = spec_for(kind);
    const auto a = gen_synthetic(spec);
    CHECK(a == gen_synthetic(spec));
    CHECK(a != gen_synthetic(spec_for(kind, 200, 10)));
    REQUIRE(a.size() == 200);
    std::set<std::size_t> golds;
    for (const auto& ex : a) {
      CHECK_NOTHROW(ex.validate());
      CHECK(ex.task == to_string(kind));
      CHECK(ex.choices.size() == (kind == TaskKind::SummaryCheck ? 2u : 4u));
      const std::set<model::TokenSeq> distinct(ex.choices.begin(), ex.choices.end());
      CHECK(distinct.size() == ex.choices.size());
      CHECK(oracle_answer(ex) == ex.gold);
      golds.insert(ex.gold);
    }
    // Gold positions are spread over the choice slots.
    CHECK(golds.size() == a[0].choices.size());
  }
}

TEST_CASE("recall format") {
  auto spec = spec_for(TaskKind::KeyValueRecall, 50);
  spec.pairs = 4;
  for (const auto& ex : gen_synthetic(spec)) {
    const std::string ctx = decode(ex.context);
    REQUIRE(ctx.size() == 10);
    CHECK(ctx[8] == '?');
    const std::string gold = decode(ex.choices[ex.gold]);
    const auto key_at = ctx.substr(0, 8).find(ctx[9]);
    REQUIRE(key_at != std::string::npos);
    CHECK(gold == ctx.substr(key_at + 1, 1));
    // In-context distractors are other values of the record.
    for (std::size_t c = 0; c < ex.choices.size(); ++c) {
      CHECK(ctx.substr(0, 8).find(decode(ex.choices[c])) != std::string::npos);
    }
  }
}

TEST_CASE("spec validation") {
  SyntheticTaskSpec s;
  s.choices = 1;
  CHECK_THROWS_AS(s.validate(), UsageError);
  s = {};
  s.values = "01";
  s.choices = 4;
  CHECK_THROWS_AS(s.validate(), UsageError);
  s = {};
  s.keys = "AB";
  s.pairs = 4;
  CHECK_THROWS_AS(s.validate(), UsageError);
  s = {};
  s.keys = "AAB";
  CHECK_THROWS_AS(s.validate(), UsageError);
  s = {};
  s.keys = "abc";
  CHECK_THROWS_AS(s.validate(), UsageError);
  s = {};
  s.examples = 0;
  CHECK_THROWS_AS(s.validate(), UsageError);
  CHECK_THROWS_AS(task_kind_from_string("qa"), UsageError);
  CHECK(distractor_policy_from_string("random") == DistractorPolicy::Random);
}

TEST_CASE("training corpora") {
  const auto spec = spec_for(TaskKind::KeyValueRecall, 30);
  const auto corpus = training_corpus(spec);
  REQUIRE(corpus.size() == 30);
  CHECK(corpus == training_corpus(spec));
  const auto eval = gen_synthetic(spec);
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const std::string ctx = decode(corpus[i].context);
    const std::string cont = decode(corpus[i].continuation);
    // Every key is queried once with its value.
    CHECK(cont.size() == 3 * spec.pairs - 1);
    for (std::size_t p = 0; p < spec.pairs; ++p) {
      const std::string kv = cont.substr(3 * p, 2);
      CHECK(ctx.find(kv) != std::string::npos);
    }
    CHECK(eval[i].context.size() == ctx.size() + 1);
  }
  const auto plain = to_training(eval);
  CHECK(plain[0].continuation == eval[0].choices[eval[0].gold]);
}
