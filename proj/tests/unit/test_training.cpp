#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "hicd/error.hpp"
#include "hicd/harness/synthetic.hpp"
#include "hicd/model/checkpoint.hpp"
#include "hicd/model/train.hpp"
#include "json.hpp"
#include "support/models.hpp"

using namespace hicd;
using namespace hicd::model;
using hicd::testing::tiny_config;

namespace {

std::vector<TrainingSequence> small_corpus(std::size_t n, std::uint64_t seed) {
  harness::SyntheticTaskSpec spec;
  spec.examples = n;
  spec.pairs = 3;
  spec.choices = 3;
  spec.seed = seed;
  return harness::training_corpus(spec);
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / name;
}

}  // namespace

TEST_CASE("checkpoint round trip") {
  const ModelParams p = init_params(tiny_config(2, 2, 8, 64, 16), 77);
  const auto path = temp_path("hicd_test.ckpt");
  save_checkpoint(path, p, {kCheckpointFormatVersion, 77, "kv-recall"});
  const Checkpoint ck = load_checkpoint(path);
  CHECK(ck.params == p);
  CHECK(ck.info.seed == 77);
  CHECK(ck.info.task_tag == "kv-recall");
  CHECK(content_hash(ck.params) == content_hash(p));

  std::ifstream mf(manifest_path(path));
  const auto manifest = nlohmann::json::parse(mf);
  CHECK(manifest["layers"] == 2);
  CHECK(manifest["heads"] == 2);
  CHECK(manifest["model_dim"] == 8);
  CHECK(manifest["vocab_size"] == 64);
  CHECK(manifest["max_seq_len"] == 16);
  CHECK(manifest["seed"] == 77);
  CHECK(manifest["task"] == "kv-recall");

  SUBCASE("truncated file") {
    const auto size = std::filesystem::file_size(path);
    std::filesystem::resize_file(path, size - 5);
    CHECK_THROWS_AS(load_checkpoint(path), DataError);
  }
  SUBCASE("wrong magic") {
    {
      std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
      f.write("XXXX", 4);
    }
    CHECK_THROWS_AS(load_checkpoint(path), DataError);
  }
  std::filesystem::remove(path);
  std::filesystem::remove(manifest_path(path));
  CHECK_THROWS_AS(load_checkpoint(path), DataError);
}

TEST_CASE("training is deterministic in the seed") {
  const auto data = small_corpus(64, 3);
  TrainOptions o;
  o.steps = 6;
  o.batch_size = 4;
  const ModelConfig c = tiny_config(1, 2, 8, 64, 16);
  const TrainResult a = train_toy(c, data, o, 42);
  const TrainResult b = train_toy(c, data, o, 42);
  CHECK(a.params == b.params);
  CHECK(a.losses == b.losses);
  CHECK_FALSE(train_toy(c, data, o, 43).params == a.params);
}

TEST_CASE("zero learning rate leaves parameters unchanged") {
  const auto data = small_corpus(16, 4);
  TrainOptions o;
  o.steps = 3;
  o.batch_size = 4;
  o.learning_rate = 0.0;
  const ModelConfig c = tiny_config(1, 2, 8, 64, 16);
  CHECK(train_toy(c, data, o, 9).params == init_params(c, 9));
}

TEST_CASE("divergence reports the failing step") {
  const auto data = small_corpus(16, 5);
  TrainOptions o;
  o.steps = 50;
  o.batch_size = 4;
  o.warmup_steps = 0;
  o.learning_rate = 1e300;
  const ModelConfig c = tiny_config(1, 2, 8, 64, 16);
  try {
    train_toy(c, data, o, 1);
    FAIL("expected a TrainingError");
  } catch (const TrainingError& e) {
    CHECK(e.iteration() < 50);
    CHECK(std::string(e.what()).find("step") != std::string::npos);
  }
}

TEST_CASE("bad training inputs") {
  const ModelConfig c = tiny_config(1, 2, 8, 64, 16);
  CHECK_THROWS_AS(train_toy(c, {}, {}, 1), UsageError);
  std::vector<TrainingSequence> too_long{{TokenSeq(10, 1), TokenSeq(10, 2)}};
  CHECK_THROWS_AS(train_toy(c, too_long, {}, 1), LengthError);
}

TEST_CASE("loss decreases over training checkpoints") {
  const auto data = small_corpus(2000, 6);
  TrainOptions o;
  o.steps = 240;
  o.batch_size = 16;
  o.warmup_steps = 20;
  const ModelConfig c = tiny_config(2, 2, 32, 64, 16);
  const TrainResult r = train_toy(c, data, o, 42);
  auto window = [&](std::size_t end) {
    double s = 0.0;
    for (std::size_t i = end - 40; i < end; ++i) s += r.losses[i];
    return s / 40.0;
  };
  const double early = window(40), mid = window(140), late = window(240);
  INFO(early << " " << mid << " " << late);
  CHECK(mid < early);
  CHECK(late < mid);
  CHECK(mean_loss(r.params, std::span(data).first(200)) < mean_loss(init_params(c, 42), std::span(data).first(200)));
}
