// hicd: command-line front end for the lab.
//
// Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "hicd/analysis/analysis.hpp"
#include "hicd/decode/contrast.hpp"
#include "hicd/error.hpp"
#include "hicd/harness/config_file.hpp"
#include "hicd/harness/dataset.hpp"
#include "hicd/harness/pipeline.hpp"
#include "hicd/harness/synthetic.hpp"
#include "hicd/heads/importance.hpp"
#include "hicd/intervene/intervene.hpp"
#include "hicd/model/checkpoint.hpp"
#include "hicd/model/train.hpp"
#include "hicd/util/hash.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace hicd;
using nlohmann::json;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

struct Settings {
  // shared
  std::string checkpoint, data, out, plan, cache, config;
  std::string reduction = "taylor", norm = "per-token", mode = "dispersed";
  double alpha = 0.0, scale = 0.0;
  std::size_t topk = 0;
  std::uint64_t seed = 42;
  std::uint64_t data_seed = 7;  // training corpus, kept apart from the default eval seed
  // data generation and training
  std::string task = "kv-recall", distractors = "in-context";
  std::size_t examples = 1000, pairs = 4, choices = 4;
  std::size_t layers = 4, heads = 4, dim = 64, ff = 128, max_seq = 64;
  std::size_t steps = 2000, batch = 32, warmup = 100, log_every = 100;
  double lr = 3e-3;
  // sweep
  std::string alphas = "0.3,0.5,0.7,0.9,1.1,1.3,1.5,1.7", scales = "0,1,10,20", ks = "0,10,30,50";
  std::string preset;
  // decode and analyze
  std::string prompt, tokens, kind = "norms", head = "0,0";
  std::size_t max_length = 16, target = 0;
  bool raw_values = false;
};

std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, sep)) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <typename T>
std::vector<T> parse_list(const std::string& text, const char* what) {
  std::vector<T> out;
  for (const auto& item : split(text, ',')) {
    std::istringstream in(item);
    T v{};
    if (!(in >> v) || !(in >> std::ws).eof()) {
      throw UsageError(std::string("cannot parse '") + item + "' in " + what);
    }
    out.push_back(v);
  }
  return out;
}

model::TokenSeq read_tokens(const Settings& s) {
  if (!s.tokens.empty()) {
    model::TokenSeq out;
    for (long v : parse_list<long>(s.tokens, "--tokens")) out.push_back(static_cast<model::TokenId>(v));
    return out;
  }
  if (!s.prompt.empty()) return harness::encode(s.prompt);
  throw UsageError("give --prompt text or --tokens ids");
}

model::Checkpoint load_model(const Settings& s) {
  if (s.checkpoint.empty()) throw UsageError("--checkpoint is required");
  return model::load_checkpoint(s.checkpoint);
}

std::vector<heads::McExample> load_data(const Settings& s, const model::ModelConfig& config) {
  if (s.data.empty()) throw UsageError("--data is required");
  auto data = harness::read_dataset(s.data);
  harness::check_compatible(data, config);
  return data;
}

harness::PipelineOptions pipeline_options(const Settings& s) {
  harness::PipelineOptions o;
  o.reduction = heads::score_reduction_from_string(s.reduction);
  o.norm = decode::choice_norm_from_string(s.norm);
  o.mode = model::head_mode_from_string(s.mode);
  o.seed = s.seed;
  return o;
}

std::optional<heads::ImportanceCache> make_cache(const Settings& s) {
  if (s.cache.empty()) return std::nullopt;
  return heads::ImportanceCache(s.cache);
}

heads::ImportanceBundle bundle_for(const Settings& s, const model::ModelParams& params,
                                   const std::vector<heads::McExample>& data) {
  const auto reduction = heads::score_reduction_from_string(s.reduction);
  if (auto cache = make_cache(s)) return cache->get(params, data, reduction);
  return heads::score_dataset(params, data, reduction);
}

heads::InducingSet selected_heads(const Settings& s, const model::ModelParams& params,
                                  const std::vector<heads::McExample>& data) {
  const auto b = bundle_for(s, params, data);
  return heads::select_topk(heads::inducing_scores(b.right, b.wrong_average, s.scale), s.topk,
                            s.scale);
}

json heads_json(const heads::InducingSet& set) {
  json arr = json::array();
  for (const auto& h : set.heads) {
    arr.push_back({{"layer", h.id.layer}, {"head", h.id.head}, {"score", h.score}});
  }
  return arr;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

std::string config_snapshot(const Settings& s) {
  std::ostringstream o;
  o << "checkpoint = " << s.checkpoint << "\n"
    << "data = " << s.data << "\n"
    << "alpha = " << s.alpha << "\n"
    << "scale = " << s.scale << "\n"
    << "topk = " << s.topk << "\n"
    << "reduction = " << s.reduction << "\n"
    << "norm = " << s.norm << "\n"
    << "mode = " << s.mode << "\n"
    << "plan = " << s.plan << "\n"
    << "seed = " << s.seed << "\n";
  return o.str();
}

void persist_run(const Settings& s, const std::string& command, const harness::EvalReport& r) {
  if (s.out.empty()) return;
  const fs::path dir(s.out);
  fs::create_directories(dir);
  const fs::path log = dir / "runs.jsonl";
  std::size_t n = 0;
  if (std::ifstream in(log); in) {
    std::string line;
    while (std::getline(in, line)) ++n;
  }
  harness::append_run_log(log, command, r);
  char name[64];
  std::snprintf(name, sizeof(name), "%s-%04zu", command.c_str(), n + 1);
  harness::write_run_dir(dir / name, r, config_snapshot(s));
}

// ---- subcommands ----

int cmd_train(const Settings& s) {
  if (s.out.empty()) throw UsageError("--out <checkpoint path> is required");
  harness::SyntheticTaskSpec spec;
  spec.kind = harness::task_kind_from_string(s.task);
  spec.examples = s.examples;
  spec.pairs = s.pairs;
  spec.seed = s.data_seed;
  spec.validate();
  const auto corpus = harness::training_corpus(spec);

  model::ModelConfig c;
  c.layers = s.layers;
  c.heads = s.heads;
  c.model_dim = s.dim;
  c.ff_dim = s.ff;
  c.max_seq_len = s.max_seq;
  c.vocab_size = harness::kCharVocab;
  c.validate();

  model::TrainOptions opt;
  opt.steps = s.steps;
  opt.batch_size = s.batch;
  opt.learning_rate = s.lr;
  opt.warmup_steps = s.warmup;
  const auto result = model::train_toy(c, corpus, opt, s.seed, [&](const model::TrainStep& st) {
    if (s.log_every > 0 && (st.step % s.log_every == 0 || st.step + 1 == s.steps)) {
      std::fprintf(stderr, "step %zu loss %.6f lr %.2e\n", st.step, st.loss, st.learning_rate);
    }
  });
  model::save_checkpoint(s.out, result.params, {model::kCheckpointFormatVersion, s.seed, s.task});
  spec.examples = std::min<std::size_t>(spec.examples, 1000);
  const auto eval = harness::plain_evaluation(result.params, harness::gen_synthetic(spec));
  json j = {{"checkpoint", s.out},
            {"content_hash", util::hex_digest(model::content_hash(result.params))},
            {"final_loss", result.losses.empty() ? 0.0 : result.losses.back()},
            {"train_accuracy", eval.accuracy}};
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_gen_data(const Settings& s) {
  if (s.out.empty()) throw UsageError("--out <dataset path> is required");
  harness::SyntheticTaskSpec spec;
  spec.kind = harness::task_kind_from_string(s.task);
  spec.examples = s.examples;
  spec.pairs = s.pairs;
  spec.choices = s.choices;
  spec.distractors = harness::distractor_policy_from_string(s.distractors);
  spec.seed = s.seed;
  const auto data = harness::gen_synthetic(spec);
  harness::write_dataset(s.out, data);
  json j = {{"dataset", s.out},
            {"examples", data.size()},
            {"dataset_hash", util::hex_digest(heads::dataset_hash(data))}};
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_score_heads(const Settings& s) {
  const auto ck = load_model(s);
  const auto data = load_data(s, ck.params.config);
  const auto b = bundle_for(s, ck.params, data);
  if (!s.out.empty()) {
    const fs::path dir(s.out);
    fs::create_directories(dir);
    const heads::ImportanceMeta meta{s.reduction, util::hex_digest(model::content_hash(ck.params)),
                                     util::hex_digest(heads::dataset_hash(data))};
    heads::write_importance(dir / "right.csv", b.right, meta);
    heads::write_importance(dir / "wrong_average.csv", b.wrong_average, meta);
    for (std::size_t j = 0; j < b.wrong_slots.size(); ++j) {
      heads::write_importance(dir / ("wrong_" + std::to_string(j) + ".csv"), b.wrong_slots[j],
                              meta);
    }
  }
  std::cout << heads::importance_csv(b.right);
  return 0;
}

int cmd_select_heads(const Settings& s) {
  const auto ck = load_model(s);
  const auto data = load_data(s, ck.params.config);
  const auto set = selected_heads(s, ck.params, data);
  const auto plan = set.plan(model::head_mode_from_string(s.mode));
  if (!s.out.empty()) intervene::write_plan_file(s.out, plan);
  json j = {{"k", set.k}, {"scale", set.scale}, {"heads", heads_json(set)},
            {"plan_hash", util::hex_digest(intervene::plan_hash(plan))}};
  std::cout << j.dump(2) << "\n";
  return 0;
}

model::InterventionPlan plan_from(const Settings& s, const model::ModelParams& params,
                                  const std::vector<heads::McExample>* data) {
  if (!s.plan.empty()) return intervene::read_plan_file(s.plan);
  if (s.topk == 0) return {};
  if (data == nullptr) throw UsageError("selecting heads by --topk needs --data");
  return selected_heads(s, params, *data).plan(model::head_mode_from_string(s.mode));
}

int cmd_induce_check(const Settings& s) {
  const auto ck = load_model(s);
  const auto data = load_data(s, ck.params.config);
  const auto plan = plan_from(s, ck.params, &data);
  const auto r = harness::induction_check(ck.params, data, plan,
                                          decode::choice_norm_from_string(s.norm));
  std::cout << harness::induction_json(r) << "\n";
  return 0;
}

int cmd_decode(const Settings& s) {
  const auto ck = load_model(s);
  std::optional<std::vector<heads::McExample>> data;
  if (!s.data.empty()) data = load_data(s, ck.params.config);
  decode::ContrastParams cp;
  cp.alpha = s.alpha;
  cp.plan = plan_from(s, ck.params, data ? &*data : nullptr);
  cp.max_length = s.max_length;
  const auto prompt = read_tokens(s);
  const auto g = decode::generate_greedy(ck.params, prompt, cp);
  std::string text;
  try {
    text = harness::decode(g.tokens);
  } catch (const IndexError&) {
    text = "";
  }
  json j = {{"tokens", g.tokens}, {"text", text}, {"truncated", g.truncated},
            {"ended", g.ended}, {"alpha", s.alpha}, {"heads", cp.plan.size()}};
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_eval(const Settings& s) {
  const auto ck = load_model(s);
  const auto data = load_data(s, ck.params.config);
  const auto opts = pipeline_options(s);
  harness::EvalReport r;
  if (!s.plan.empty()) {
    r = harness::evaluate_plan(ck.params, data, intervene::read_plan_file(s.plan), s.alpha, opts);
  } else {
    const auto cache = make_cache(s);
    r = harness::run_pipeline(ck.params, data, {s.alpha, s.scale, s.topk}, opts,
                              cache ? &*cache : nullptr);
  }
  persist_run(s, "eval", r);
  std::cout << harness::report_json(r, false, false) << "\n";
  return 0;
}

int cmd_sweep(Settings s) {
  const auto ck = load_model(s);
  const auto data = load_data(s, ck.params.config);
  harness::SweepGrid grid;
  grid.alphas = parse_list<double>(s.alphas, "--alphas");
  grid.scales = parse_list<double>(s.scales, "--scales");
  grid.ks = parse_list<std::size_t>(s.ks, "--ks");
  grid.preset = s.preset;
  const auto cache = make_cache(s);
  const auto r = harness::sweep(ck.params, data, grid, pipeline_options(s), cache ? &*cache : nullptr);
  const std::string text = harness::sweep_json(r);
  if (!s.out.empty()) {
    write_text(fs::path(s.out) / "sweep.json", text + "\n");
    persist_run(s, "sweep-best", r.reports[r.best]);
  }
  std::cout << text << "\n";
  return 0;
}

int cmd_analyze(const Settings& s) {
  const auto ck = load_model(s);
  const auto tokens = read_tokens(s);
  const auto plan = s.plan.empty() ? model::InterventionPlan{} : intervene::read_plan_file(s.plan);
  analysis::ExportStamp stamp{s.kind, model::content_hash(ck.params), intervene::plan_hash(plan), {}};
  std::string csv;
  json summary = {{"kind", s.kind}, {"tokens", tokens.size()}};
  if (s.kind == "norms") {
    const auto ids = parse_list<std::size_t>(s.head, "--head");
    if (ids.size() != 2) throw UsageError("--head takes layer,head");
    analysis::NormOptions no;
    no.through_output = !s.raw_values;
    const auto p = analysis::value_norms(ck.params, tokens, {ids[0], ids[1]}, plan, no);
    csv = analysis::norm_profile_csv(p);
    stamp.extra = {{"head", model::to_string(p.head)}, {"mode", p.mode}};
    summary["mode"] = p.mode;
    try {
      summary["cosine"] = analysis::norm_cosine(p);
    } catch (const NumericError&) {
      summary["cosine"] = nullptr;
    }
  } else if (s.kind == "confidence") {
    const auto c = analysis::token_confidence(ck.params, tokens, plan);
    csv = analysis::confidence_csv(c);
    double mean = 0.0;
    for (double v : c.probability) mean += v;
    summary["mean_confidence"] = mean / static_cast<double>(c.probability.size());
  } else if (s.kind == "saliency") {
    const std::size_t target = s.target == 0 ? tokens.size() - 1 : s.target;
    const auto m = analysis::saliency(ck.params, tokens, target, plan);
    csv = analysis::matrix_csv(m.values, m.size);
    stamp.extra = {{"target", std::to_string(target)}, {"aggregation", m.aggregation}};
    summary["target"] = target;
    if (!s.out.empty()) {
      for (std::size_t l = 0; l < m.per_layer.size(); ++l) {
        const fs::path p = fs::path(s.out) / ("saliency_layer" + std::to_string(l) + ".csv");
        auto layer_stamp = stamp;
        layer_stamp.extra["layer"] = std::to_string(l);
        fs::create_directories(s.out);
        analysis::write_export(p, analysis::matrix_csv(m.per_layer[l], m.size), layer_stamp);
      }
    }
  } else {
    throw UsageError("unknown --kind '" + s.kind + "' (expected norms|confidence|saliency)");
  }
  if (!s.out.empty()) {
    fs::create_directories(s.out);
    analysis::write_export(fs::path(s.out) / (s.kind + ".csv"), csv, stamp);
    std::cout << summary.dump(2) << "\n";
  } else {
    std::cout << csv;
  }
  return 0;
}

// Appends `--key value` for config entries not already given on the command
// line, so flags override the file.
std::vector<std::string> merge_config(std::vector<std::string> args) {
  std::string path;
  for (std::size_t i = 0; i + 1 < args.size(); ++i) {
    if (args[i] == "--config") path = args[i + 1];
  }
  for (const auto& a : args) {
    if (a.rfind("--config=", 0) == 0) path = a.substr(9);
  }
  if (path.empty()) return args;
  for (const auto& [key, value] : harness::parse_config_text([&] {
         std::ifstream in(path);
         if (!in) throw DataError("cannot read config file " + path);
         std::stringstream ss;
         ss << in.rdbuf();
         return ss.str();
       }())) {
    const std::string flag = "--" + key;
    bool given = false;
    for (const auto& a : args) given = given || a == flag || a.rfind(flag + "=", 0) == 0;
    if (given) continue;
    if (value == "true") {
      args.push_back(flag);
    } else if (value != "false") {
      args.push_back(flag);
      args.push_back(value);
    }
  }
  return args;
}

int run(int argc, char** argv) {
  CLI::App app{"Hallucination-inducing contrastive decoding lab"};
  app.require_subcommand(1);
  Settings s;

  auto add_model = [&](CLI::App* c) {
    c->add_option("--checkpoint", s.checkpoint, "Checkpoint file");
  };
  auto add_data = [&](CLI::App* c) { c->add_option("--data", s.data, "Dataset JSONL"); };
  auto add_scoring = [&](CLI::App* c) {
    c->add_option("--reduction", s.reduction, "grad-l1|taylor");
    c->add_option("--cache", s.cache, "Importance cache directory");
  };
  auto add_select = [&](CLI::App* c) {
    c->add_option("--scale", s.scale, "Discrepancy scale s");
    c->add_option("--topk", s.topk, "Number of inducing heads");
    c->add_option("--mode", s.mode, "dispersed|pruned");
  };
  auto add_common = [&](CLI::App* c) {
    c->add_option("--out", s.out, "Output path or directory");
    c->add_option("--seed", s.seed, "Seed");
    c->add_option("--config", s.config, "key = value settings file");
  };

  auto* train = app.add_subcommand("train", "Train the toy model on a synthetic task");
  add_common(train);
  train->add_option("--task", s.task, "kv-recall|pattern|summary");
  train->add_option("--examples", s.examples);
  train->add_option("--pairs", s.pairs);
  train->add_option("--layers", s.layers);
  train->add_option("--heads", s.heads);
  train->add_option("--dim", s.dim);
  train->add_option("--ff", s.ff);
  train->add_option("--max-seq", s.max_seq);
  train->add_option("--steps", s.steps);
  train->add_option("--batch", s.batch);
  train->add_option("--lr", s.lr);
  train->add_option("--warmup", s.warmup);
  train->add_option("--log-every", s.log_every);
  train->add_option("--data-seed", s.data_seed, "Seed of the training corpus");

  auto* gen = app.add_subcommand("gen-data", "Write a synthetic multiple-choice dataset");
  add_common(gen);
  gen->add_option("--task", s.task, "kv-recall|pattern|summary");
  gen->add_option("--examples", s.examples);
  gen->add_option("--pairs", s.pairs);
  gen->add_option("--choices", s.choices);
  gen->add_option("--distractors", s.distractors, "in-context|random");

  auto* score = app.add_subcommand("score-heads", "Right and wrong-answer head importance");
  add_common(score);
  add_model(score);
  add_data(score);
  add_scoring(score);

  auto* sel = app.add_subcommand("select-heads", "Top-k inducing heads as a plan file");
  add_common(sel);
  add_model(sel);
  add_data(sel);
  add_scoring(sel);
  add_select(sel);

  auto* induce = app.add_subcommand("induce-check", "Base vs induced accuracy and gold NLL");
  add_common(induce);
  add_model(induce);
  add_data(induce);
  add_scoring(induce);
  add_select(induce);
  induce->add_option("--plan", s.plan, "Plan file");
  induce->add_option("--norm", s.norm, "per-token|sum");

  auto* dec = app.add_subcommand("decode", "Greedy contrastive generation");
  add_common(dec);
  add_model(dec);
  add_data(dec);
  add_scoring(dec);
  add_select(dec);
  dec->add_option("--alpha", s.alpha);
  dec->add_option("--plan", s.plan, "Plan file");
  dec->add_option("--prompt", s.prompt, "Prompt text");
  dec->add_option("--tokens", s.tokens, "Prompt token ids, comma separated");
  dec->add_option("--max-length", s.max_length);

  auto* eval = app.add_subcommand("eval", "Run the pipeline at one grid point");
  add_common(eval);
  add_model(eval);
  add_data(eval);
  add_scoring(eval);
  add_select(eval);
  eval->add_option("--alpha", s.alpha);
  eval->add_option("--plan", s.plan, "Plan file (skips head selection)");
  eval->add_option("--norm", s.norm, "per-token|sum");

  auto* sw = app.add_subcommand("sweep", "Grid over alpha, scale and top-k");
  add_common(sw);
  add_model(sw);
  add_data(sw);
  add_scoring(sw);
  sw->add_option("--mode", s.mode, "dispersed|pruned");
  sw->add_option("--norm", s.norm, "per-token|sum");
  sw->add_option("--alphas", s.alphas, "Comma-separated alpha values");
  sw->add_option("--scales", s.scales, "Comma-separated scales");
  sw->add_option("--ks", s.ks, "Comma-separated top-k values");
  sw->add_option("--preset", s.preset, "Preset name recorded with the sweep");

  auto* an = app.add_subcommand("analyze", "Norm, confidence and saliency exports");
  add_common(an);
  add_model(an);
  an->add_option("--kind", s.kind, "norms|confidence|saliency");
  an->add_option("--prompt", s.prompt, "Input text");
  an->add_option("--tokens", s.tokens, "Input token ids, comma separated");
  an->add_option("--head", s.head, "layer,head for norms");
  an->add_option("--target", s.target, "Saliency target position (default last)");
  an->add_option("--plan", s.plan, "Plan file");
  an->add_flag("--raw-values", s.raw_values, "Norms of x W_V without W_O");

  std::vector<std::string> args(argv + 1, argv + argc);
  args = merge_config(std::move(args));
  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  if (!s.preset.empty() && sw->parsed()) {
    // A preset fills in single-point axes unless they were given.
    const auto& p = harness::find_preset(s.preset);
    if (sw->count("--alphas") == 0) s.alphas = std::to_string(p.alpha);
    if (sw->count("--scales") == 0) s.scales = std::to_string(p.scale);
    if (sw->count("--ks") == 0) s.ks = std::to_string(p.k);
  }

  if (train->parsed()) return cmd_train(s);
  if (gen->parsed()) return cmd_gen_data(s);
  if (score->parsed()) return cmd_score_heads(s);
  if (sel->parsed()) return cmd_select_heads(s);
  if (induce->parsed()) return cmd_induce_check(s);
  if (dec->parsed()) return cmd_decode(s);
  if (eval->parsed()) return cmd_eval(s);
  if (sw->parsed()) return cmd_sweep(s);
  if (an->parsed()) return cmd_analyze(s);
  return kExitUsage;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const RangeError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const Error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
}
