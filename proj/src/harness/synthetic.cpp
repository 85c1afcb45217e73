#include "hicd/harness/synthetic.hpp"

#include <algorithm>
#include <random>
#include <set>

#include "hicd/error.hpp"

namespace hicd::harness {

using model::TokenId;

TokenId char_token(char c) {
  if (c >= 'a' && c <= 'z') c = static_cast<char>(c - 'a' + 'A');
  const int code = static_cast<unsigned char>(c);
  if (code < 32 || code > 95) {
    throw DataError(std::string("character code ") + std::to_string(code) +
                    " is outside the tokenizer range 32..95");
  }
  return static_cast<TokenId>(code - 32);
}

TokenSeq encode(const std::string& text) {
  TokenSeq out;
  out.reserve(text.size());
  for (char c : text) out.push_back(char_token(c));
  return out;
}

std::string decode(const TokenSeq& tokens) {
  std::string out;
  out.reserve(tokens.size());
  for (TokenId t : tokens) {
    if (t < 0 || t >= static_cast<TokenId>(kCharVocab)) {
      throw IndexError("token id " + std::to_string(t) + " has no character");
    }
    out.push_back(static_cast<char>(t + 32));
  }
  return out;
}

std::string to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::KeyValueRecall: return "kv-recall";
    case TaskKind::PatternCompletion: return "pattern";
    case TaskKind::SummaryCheck: return "summary";
  }
  return "?";
}

TaskKind task_kind_from_string(const std::string& name) {
  if (name == "kv-recall") return TaskKind::KeyValueRecall;
  if (name == "pattern") return TaskKind::PatternCompletion;
  if (name == "summary") return TaskKind::SummaryCheck;
  throw UsageError("unknown task '" + name + "' (expected kv-recall|pattern|summary)");
}

std::string to_string(DistractorPolicy policy) {
  return policy == DistractorPolicy::InContext ? "in-context" : "random";
}

DistractorPolicy distractor_policy_from_string(const std::string& name) {
  if (name == "in-context") return DistractorPolicy::InContext;
  if (name == "random") return DistractorPolicy::Random;
  throw UsageError("unknown distractor policy '" + name + "' (expected in-context|random)");
}

namespace {

void check_alphabet(const std::string& name, const std::string& symbols) {
  const std::set<char> distinct(symbols.begin(), symbols.end());
  if (distinct.size() != symbols.size()) throw UsageError(name + " alphabet repeats a symbol");
  for (char c : symbols) {
    if (c >= 'a' && c <= 'z') throw UsageError(name + " alphabet must be uppercase");
    try {
      char_token(c);
    } catch (const DataError& e) {
      throw UsageError(name + " alphabet: " + e.what());
    }
  }
}

const std::string kMarkers = "?:=";

template <typename T>
std::vector<T> sample_distinct(const std::vector<T>& pool, std::size_t n, std::mt19937_64& rng) {
  std::vector<T> copy = pool;
  std::vector<T> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, copy.size() - 1);
    std::swap(copy[i], copy[pick(rng)]);
    out.push_back(copy[i]);
  }
  return out;
}

std::size_t uniform_index(std::size_t n, std::mt19937_64& rng) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

// Places gold among the distractors at a uniformly drawn index.
McExample assemble(TokenSeq context, TokenId gold, std::vector<TokenId> distractors,
                   const std::string& task, std::mt19937_64& rng) {
  McExample ex;
  ex.context = std::move(context);
  ex.task = task;
  const std::size_t n = distractors.size() + 1;
  ex.gold = uniform_index(n, rng);
  std::size_t d = 0;
  for (std::size_t c = 0; c < n; ++c) {
    ex.choices.push_back({c == ex.gold ? gold : distractors[d++]});
  }
  return ex;
}

std::vector<TokenId> distractors_for(TokenId gold, const std::vector<TokenId>& in_context,
                                     const std::vector<TokenId>& alphabet, std::size_t count,
                                     DistractorPolicy policy, std::mt19937_64& rng) {
  auto collect = [gold](const std::vector<TokenId>& source, const std::vector<TokenId>& skip) {
    std::vector<TokenId> pool;
    for (TokenId t : source) {
      if (t != gold && std::find(skip.begin(), skip.end(), t) == skip.end() &&
          std::find(pool.begin(), pool.end(), t) == pool.end()) {
        pool.push_back(t);
      }
    }
    return pool;
  };
  if (policy == DistractorPolicy::Random) return sample_distinct(collect(alphabet, {}), count, rng);
  std::vector<TokenId> pool = collect(in_context, {});
  if (pool.size() >= count) return sample_distinct(pool, count, rng);
  // A short in-context pool is topped up from the rest of the alphabet.
  auto extra = sample_distinct(collect(alphabet, pool), count - pool.size(), rng);
  pool.insert(pool.end(), extra.begin(), extra.end());
  return pool;
}

}  // namespace

void SyntheticTaskSpec::validate() const {
  check_alphabet("key", keys);
  check_alphabet("value", values);
  for (char c : kMarkers) {
    if (keys.find(c) != std::string::npos || values.find(c) != std::string::npos) {
      throw UsageError(std::string("alphabets may not contain the marker '") + c + "'");
    }
  }
  if (examples == 0) throw UsageError("examples must be positive");
  const std::size_t n_choices = kind == TaskKind::SummaryCheck ? 2 : choices;
  if (n_choices < 2) throw UsageError("choices must be at least 2");
  switch (kind) {
    case TaskKind::KeyValueRecall:
    case TaskKind::SummaryCheck:
      if (pairs == 0) throw UsageError("pairs must be positive");
      if (keys.size() < pairs) {
        throw UsageError("key alphabet of " + std::to_string(keys.size()) +
                         " symbols cannot supply " + std::to_string(pairs) + " distinct keys");
      }
      if (kind == TaskKind::KeyValueRecall && values.size() < std::max(pairs, n_choices)) {
        throw UsageError("value alphabet of " + std::to_string(values.size()) +
                         " symbols cannot supply " + std::to_string(std::max(pairs, n_choices)) +
                         " distinct values");
      }
      if (kind == TaskKind::SummaryCheck && values.size() < pairs + 1) {
        throw UsageError("value alphabet needs at least pairs + 1 symbols for swapped claims");
      }
      break;
    case TaskKind::PatternCompletion:
      if (min_period < 1 || min_period > max_period) {
        throw UsageError("pattern periods need 1 <= min_period <= max_period");
      }
      if (pattern_length <= max_period) {
        throw UsageError("pattern_length must exceed max_period so the period is visible");
      }
      if (keys.size() < std::max(max_period, n_choices)) {
        throw UsageError("key alphabet too small for the requested period and choices");
      }
      break;
  }
}

std::vector<McExample> gen_synthetic(const SyntheticTaskSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  const TokenSeq key_tokens = encode(spec.keys);
  const TokenSeq value_tokens = encode(spec.values);
  const TokenId query = char_token('?');
  const std::string tag = to_string(spec.kind);
  std::vector<McExample> out;
  out.reserve(spec.examples);
  for (std::size_t e = 0; e < spec.examples; ++e) {
    switch (spec.kind) {
      case TaskKind::KeyValueRecall: {
        const auto keys = sample_distinct(key_tokens, spec.pairs, rng);
        const auto values = sample_distinct(value_tokens, spec.pairs, rng);
        TokenSeq ctx;
        for (std::size_t p = 0; p < spec.pairs; ++p) {
          ctx.push_back(keys[p]);
          ctx.push_back(values[p]);
        }
        const std::size_t asked = uniform_index(spec.pairs, rng);
        ctx.push_back(query);
        ctx.push_back(keys[asked]);
        auto wrong = distractors_for(values[asked], values, value_tokens, spec.choices - 1,
                                     spec.distractors, rng);
        out.push_back(assemble(std::move(ctx), values[asked], std::move(wrong), tag, rng));
        break;
      }
      case TaskKind::PatternCompletion: {
        std::uniform_int_distribution<std::size_t> period_dist(spec.min_period, spec.max_period);
        const std::size_t period = period_dist(rng);
        const auto motif = sample_distinct(key_tokens, period, rng);
        TokenSeq ctx;
        for (std::size_t i = 0; i < spec.pattern_length; ++i) ctx.push_back(motif[i % period]);
        const TokenId gold = motif[spec.pattern_length % period];
        auto wrong = distractors_for(gold, motif, key_tokens, spec.choices - 1, spec.distractors,
                                     rng);
        out.push_back(assemble(std::move(ctx), gold, std::move(wrong), tag, rng));
        break;
      }
      case TaskKind::SummaryCheck: {
        const auto keys = sample_distinct(key_tokens, spec.pairs, rng);
        const auto values = sample_distinct(value_tokens, spec.pairs, rng);
        TokenSeq ctx;
        for (std::size_t p = 0; p < spec.pairs; ++p) {
          ctx.push_back(keys[p]);
          ctx.push_back(values[p]);
        }
        const std::size_t asked = uniform_index(spec.pairs, rng);
        const bool hallucinated = uniform_index(2, rng) == 1;
        TokenId claimed = values[asked];
        if (hallucinated) {
          std::vector<TokenId> others;
          for (TokenId t : value_tokens) {
            if (t != values[asked]) others.push_back(t);
          }
          claimed = others[uniform_index(others.size(), rng)];
        }
        ctx.push_back(char_token(':'));
        ctx.push_back(keys[asked]);
        ctx.push_back(claimed);
        ctx.push_back(char_token('='));
        McExample ex;
        ex.context = std::move(ctx);
        ex.choices = {{char_token('Y')}, {char_token('N')}};
        ex.gold = hallucinated ? 1 : 0;
        ex.task = tag;
        out.push_back(std::move(ex));
        break;
      }
    }
  }
  return out;
}

std::size_t oracle_answer(const McExample& ex) {
  auto choice_of = [&](TokenId t) -> std::size_t {
    for (std::size_t c = 0; c < ex.choices.size(); ++c) {
      if (ex.choices[c].size() == 1 && ex.choices[c][0] == t) return c;
    }
    throw DataError("oracle answer is not among the choices");
  };
  const TokenSeq& x = ex.context;
  const std::size_t n = x.size();
  if (ex.task == to_string(TaskKind::KeyValueRecall)) {
    if (n < 4 || x[n - 2] != char_token('?')) throw DataError("not a recall context");
    for (std::size_t i = 0; i + 1 < n - 2; i += 2) {
      if (x[i] == x[n - 1]) return choice_of(x[i + 1]);
    }
    throw DataError("queried key does not appear in the context");
  }
  if (ex.task == to_string(TaskKind::PatternCompletion)) {
    for (std::size_t p = 1; p < n; ++p) {
      bool periodic = true;
      for (std::size_t i = p; i < n && periodic; ++i) periodic = x[i] == x[i - p];
      if (periodic) return choice_of(x[n - p]);
    }
    throw DataError("pattern context has no period");
  }
  if (ex.task == to_string(TaskKind::SummaryCheck)) {
    if (n < 5 || x[n - 1] != char_token('=') || x[n - 4] != char_token(':')) {
      throw DataError("not a summary-check context");
    }
    for (std::size_t i = 0; i + 1 < n - 4; i += 2) {
      if (x[i] == x[n - 3]) return choice_of(char_token(x[i + 1] == x[n - 2] ? 'Y' : 'N'));
    }
    throw DataError("claimed key does not appear in the record");
  }
  throw DataError("no oracle for task '" + ex.task + "'");
}

std::vector<model::TrainingSequence> to_training(const std::vector<McExample>& dataset) {
  std::vector<model::TrainingSequence> out;
  out.reserve(dataset.size());
  for (const McExample& ex : dataset) out.push_back({ex.context, ex.choices.at(ex.gold)});
  return out;
}

std::vector<model::TrainingSequence> training_corpus(const SyntheticTaskSpec& spec) {
  const auto examples = gen_synthetic(spec);
  if (spec.kind == TaskKind::SummaryCheck) return to_training(examples);
  std::mt19937_64 rng(spec.seed ^ 0x9e3779b97f4a7c15ull);
  const TokenId query = char_token('?');
  std::vector<model::TrainingSequence> out;
  out.reserve(examples.size());
  for (const McExample& ex : examples) {
    const TokenSeq& x = ex.context;
    const TokenId gold = ex.choices[ex.gold][0];
    model::TrainingSequence t;
    if (spec.kind == TaskKind::KeyValueRecall) {
      const std::size_t n_pairs = (x.size() - 2) / 2;
      t.context.assign(x.begin(), x.end() - 1);
      std::vector<std::size_t> order(n_pairs);
      for (std::size_t i = 0; i < n_pairs; ++i) order[i] = i;
      std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t q = 0; q < n_pairs; ++q) {
        if (q > 0) t.continuation.push_back(query);
        t.continuation.push_back(x[2 * order[q]]);
        t.continuation.push_back(x[2 * order[q] + 1]);
      }
    } else {
      const std::size_t split = std::min(spec.max_period, x.size() - 1);
      t.context.assign(x.begin(), x.begin() + static_cast<long>(split));
      t.continuation.assign(x.begin() + static_cast<long>(split), x.end());
      t.continuation.push_back(gold);
    }
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace hicd::harness
