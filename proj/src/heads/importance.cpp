#include "hicd/heads/importance.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "hicd/error.hpp"
#include "hicd/model/transformer.hpp"
#include "hicd/numerics/ops.hpp"
#include "hicd/util/hash.hpp"
#include "json.hpp"

namespace hicd::heads {

using model::head_index;
using num::Var;

std::string to_string(ScoreReduction r) { return r == ScoreReduction::Taylor ? "taylor" : "grad-l1"; }

ScoreReduction score_reduction_from_string(const std::string& name) {
  if (name == "taylor") return ScoreReduction::Taylor;
  if (name == "grad-l1") return ScoreReduction::GradL1;
  throw UsageError("unknown reduction '" + name + "' (expected grad-l1|taylor)");
}

std::string to_string(Provenance p) {
  switch (p) {
    case Provenance::Right: return "right";
    case Provenance::WrongAveraged: return "wrong-averaged";
    case Provenance::Combined: return "combined";
  }
  return "?";
}

Provenance provenance_from_string(const std::string& name) {
  if (name == "right") return Provenance::Right;
  if (name == "wrong-averaged") return Provenance::WrongAveraged;
  if (name == "combined") return Provenance::Combined;
  throw DataError("unknown provenance '" + name + "'");
}

ImportanceMatrix::ImportanceMatrix(std::size_t layers, std::size_t heads, Provenance provenance,
                                   std::size_t sample_count)
    : provenance(provenance),
      sample_count(sample_count),
      layers_(layers),
      heads_(heads),
      scores_(layers * heads, 0.0) {}

double& ImportanceMatrix::at(HeadId id) {
  if (id.layer >= layers_ || id.head >= heads_) {
    throw IndexError("head " + model::to_string(id) + " outside a " + std::to_string(layers_) +
                     "x" + std::to_string(heads_) + " importance matrix");
  }
  return scores_[id.layer * heads_ + id.head];
}

double ImportanceMatrix::at(HeadId id) const {
  return const_cast<ImportanceMatrix*>(this)->at(id);
}

namespace {

constexpr std::size_t kScoreBatch = 32;

double reduce(const num::Tensor& h, const num::Tensor& g, ScoreReduction reduction) {
  double acc = 0.0;
  if (reduction == ScoreReduction::Taylor) {
    for (std::size_t i = 0; i < h.size(); ++i) acc += h[i] * g[i];
    return std::abs(acc);
  }
  for (std::size_t i = 0; i < g.size(); ++i) acc += std::abs(g[i]);
  return acc / static_cast<double>(g.size());
}

// Per-pair scores for a batch of pairs, [pair][head_index]. The summed loss
// decouples across pairs because stacked sequences never attend to each other.
std::vector<std::vector<double>> score_batch(const model::ModelParams& params,
                                             std::span<const ScoredPair> pairs,
                                             std::size_t first_index, ScoreReduction reduction,
                                             const model::InterventionPlan& plan) {
  const model::ModelConfig& c = params.config;
  std::vector<model::TokenSeq> seqs;
  seqs.reserve(pairs.size());
  for (std::size_t b = 0; b < pairs.size(); ++b) {
    const ScoredPair& p = pairs[b];
    const std::string where = "pair " + std::to_string(first_index + b);
    if (p.context.empty()) throw UsageError(where + " has an empty context");
    if (p.answer.empty()) throw UsageError(where + " has an empty answer");
    if (p.context.size() + p.answer.size() > c.max_seq_len) {
      throw LengthError(where + " exceeds max_seq_len " + std::to_string(c.max_seq_len));
    }
    model::TokenSeq s = p.context;
    s.insert(s.end(), p.answer.begin(), p.answer.end());
    seqs.push_back(std::move(s));
  }
  num::GradTape tape;
  model::GraphOptions opts;
  opts.head_output_grads = true;
  const model::ForwardGraph g = model::build_forward(tape, params, seqs, plan, opts);
  Var total;
  for (std::size_t b = 0; b < pairs.size(); ++b) {
    Var rows = num::slice(g.logits, g.row_offsets[b] + pairs[b].context.size() - 1,
                          pairs[b].answer.size(), 0, c.vocab_size);
    Var loss = num::nll_loss(rows, pairs[b].answer);
    total = b == 0 ? loss : num::add(total, loss);
  }
  tape.backward(total);

  std::vector<std::vector<double>> out(pairs.size(), std::vector<double>(c.head_count()));
  for (std::size_t hi = 0; hi < c.head_count(); ++hi) {
    for (std::size_t b = 0; b < pairs.size(); ++b) {
      const std::size_t slot = hi * g.batch + b;
      const num::Tensor& grad = g.head_output_probes[slot].grad();
      const double v = reduce(g.head_outputs[slot].value(), grad, reduction);
      if (!std::isfinite(v) || !grad.all_finite()) {
        const model::HeadId id{hi / c.heads, hi % c.heads};
        throw NumericError("non-finite gradient for head " + model::to_string(id) + " on pair " +
                           std::to_string(first_index + b));
      }
      out[b][hi] = v;
    }
  }
  return out;
}

void require_same_shape(const ImportanceMatrix& a, const ImportanceMatrix& b, const char* what) {
  if (a.layers() != b.layers() || a.heads() != b.heads()) {
    throw DimensionError(std::string(what) + ": importance matrices of shape " +
                         std::to_string(a.layers()) + "x" + std::to_string(a.heads()) + " and " +
                         std::to_string(b.layers()) + "x" + std::to_string(b.heads()));
  }
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

std::filesystem::path sidecar(const std::filesystem::path& csv) {
  std::filesystem::path p = csv;
  p += ".json";
  return p;
}

}  // namespace

std::vector<double> pair_head_scores(const model::ModelParams& params, const ScoredPair& pair,
                                     ScoreReduction reduction,
                                     const model::InterventionPlan& plan) {
  return score_batch(params, std::span(&pair, 1), 0, reduction, plan).front();
}

ImportanceMatrix head_importance(const model::ModelParams& params,
                                 std::span<const ScoredPair> pairs, ScoreReduction reduction,
                                 const model::InterventionPlan& plan) {
  if (pairs.empty()) throw UsageError("head_importance needs at least one pair");
  plan.validate(params.config);
  const std::size_t n_heads = params.config.head_count();
  std::vector<std::vector<double>> per_head(n_heads);
  for (auto& v : per_head) v.reserve(pairs.size());
  for (std::size_t start = 0; start < pairs.size(); start += kScoreBatch) {
    const auto batch = pairs.subspan(start, std::min(kScoreBatch, pairs.size() - start));
    for (const auto& row : score_batch(params, batch, start, reduction, plan)) {
      for (std::size_t hi = 0; hi < n_heads; ++hi) per_head[hi].push_back(row[hi]);
    }
  }
  ImportanceMatrix m(params.config.layers, params.config.heads, Provenance::Right, pairs.size());
  for (std::size_t hi = 0; hi < n_heads; ++hi) {
    auto& v = per_head[hi];
    std::sort(v.begin(), v.end());
    m.scores()[hi] = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  }
  return m;
}

std::vector<ImportanceMatrix> wrong_slot_importance(const model::ModelParams& params,
                                                    std::span<const AdversarialSet> sets,
                                                    ScoreReduction reduction) {
  std::size_t slots = 0;
  for (const auto& s : sets) slots = std::max(slots, s.pairs.size());
  if (slots == 0) throw UsageError("no adversarial pairs to score");
  std::vector<ImportanceMatrix> out;
  for (std::size_t j = 0; j < slots; ++j) {
    std::vector<ScoredPair> pairs;
    for (const auto& s : sets) {
      if (j < s.pairs.size()) pairs.push_back(s.pairs[j]);
    }
    out.push_back(head_importance(params, pairs, reduction));
  }
  return out;
}

ImportanceMatrix wrong_head_average(std::span<const ImportanceMatrix> per_wrong_answer) {
  if (per_wrong_answer.empty()) throw UsageError("wrong_head_average needs at least one matrix");
  const ImportanceMatrix& first = per_wrong_answer.front();
  ImportanceMatrix out(first.layers(), first.heads(), Provenance::WrongAveraged);
  for (const ImportanceMatrix& m : per_wrong_answer) {
    require_same_shape(first, m, "wrong_head_average");
    if (m.provenance == Provenance::Combined) {
      throw UsageError("wrong_head_average expects per-answer importance, not combined scores");
    }
    out.sample_count += m.sample_count;
    for (std::size_t i = 0; i < out.size(); ++i) out.scores()[i] += m.scores()[i];
  }
  const double n = static_cast<double>(per_wrong_answer.size());
  for (double& v : out.scores()) v /= n;
  return out;
}

ImportanceMatrix discrepancy_factor(const ImportanceMatrix& right,
                                    const ImportanceMatrix& wrong_avg) {
  require_same_shape(right, wrong_avg, "discrepancy_factor");
  ImportanceMatrix f(right.layers(), right.heads(), Provenance::Combined, right.sample_count);
  for (std::size_t i = 0; i < f.size(); ++i) f.scores()[i] = right.scores()[i] - wrong_avg.scores()[i];
  return f;
}

ImportanceMatrix inducing_scores(const ImportanceMatrix& right, const ImportanceMatrix& wrong_avg,
                                 double s) {
  if (!(s >= 0.0)) throw UsageError("scale s must be >= 0");
  const ImportanceMatrix f = discrepancy_factor(right, wrong_avg);
  ImportanceMatrix out(right.layers(), right.heads(), Provenance::Combined,
                       right.sample_count + wrong_avg.sample_count);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out.scores()[i] = right.scores()[i] - s * f.scores()[i];
  }
  return out;
}

std::set<HeadId> InducingSet::ids() const {
  std::set<HeadId> out;
  for (const auto& h : heads) out.insert(h.id);
  return out;
}

model::InterventionPlan InducingSet::plan(model::HeadMode mode) const {
  model::InterventionPlan p;
  for (const auto& h : heads) p.set(h.id, mode);
  return p;
}

namespace {

std::vector<ScoredHead> ranked(const ImportanceMatrix& m) {
  std::vector<ScoredHead> all;
  all.reserve(m.size());
  for (std::size_t l = 0; l < m.layers(); ++l) {
    for (std::size_t h = 0; h < m.heads(); ++h) all.push_back({{l, h}, m.at({l, h})});
  }
  std::stable_sort(all.begin(), all.end(), [](const ScoredHead& a, const ScoredHead& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.id < b.id;
  });
  return all;
}

}  // namespace

InducingSet select_topk(const ImportanceMatrix& scores, std::size_t k, double scale) {
  if (scores.provenance != Provenance::Combined) {
    throw UsageError("select_topk expects combined inducing scores");
  }
  if (k > scores.size()) {
    throw RangeError("k = " + std::to_string(k) + " exceeds the " + std::to_string(scores.size()) +
                     " available heads");
  }
  for (double v : scores.scores()) {
    if (!std::isfinite(v)) throw NumericError("inducing scores contain a non-finite value");
  }
  InducingSet out;
  out.heads = ranked(scores);
  out.heads.resize(k);
  out.k = k;
  out.scale = scale;
  return out;
}

std::set<HeadId> top_heads(const ImportanceMatrix& scores, std::size_t k) {
  if (k > scores.size()) {
    throw RangeError("k = " + std::to_string(k) + " exceeds the " + std::to_string(scores.size()) +
                     " available heads");
  }
  const auto all = ranked(scores);
  std::set<HeadId> out;
  for (std::size_t i = 0; i < k; ++i) out.insert(all[i].id);
  return out;
}

namespace {

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = avg;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw UsageError("spearman needs equal lengths, got " + std::to_string(a.size()) + " and " +
                     std::to_string(b.size()));
  }
  if (a.size() < 2) throw UsageError("spearman needs at least 2 observations");
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!std::isfinite(a[i]) || !std::isfinite(b[i])) {
      throw NumericError("spearman input contains a non-finite value");
    }
  }
  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  // Pearson correlation of the ranks; equals 1 - 6 sum d^2 / (n(n^2-1))
  // when there are no ties.
  const double n = static_cast<double>(a.size());
  const double mean = (n + 1.0) / 2.0;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    const double da = ra[i] - mean, db = rb[i] - mean;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa == 0.0 || sbb == 0.0) {
    throw NumericError("spearman is undefined when one side has no rank variance");
  }
  return sab / std::sqrt(saa * sbb);
}

double overlap_metric(const InducingSet& inducing, const std::set<HeadId>& right_set,
                      const std::set<HeadId>& wrong_set, double beta) {
  if (!(beta >= 0.0)) throw UsageError("beta must be >= 0");
  std::size_t with_right = 0, with_wrong = 0;
  for (HeadId id : inducing.ids()) {
    with_right += right_set.count(id);
    with_wrong += wrong_set.count(id);
  }
  return static_cast<double>(with_right) - beta * static_cast<double>(with_wrong);
}

std::string importance_csv(const ImportanceMatrix& m) {
  std::string out = "layer,head,score,provenance\n";
  for (std::size_t l = 0; l < m.layers(); ++l) {
    for (std::size_t h = 0; h < m.heads(); ++h) {
      out += std::to_string(l) + "," + std::to_string(h) + "," + format_double(m.at({l, h})) + "," +
             to_string(m.provenance) + "\n";
    }
  }
  return out;
}

ImportanceMatrix parse_importance_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "layer,head,score,provenance") {
    throw DataError("importance CSV must start with 'layer,head,score,provenance'");
  }
  struct Row {
    std::size_t layer, head;
    double score;
    Provenance prov;
  };
  std::vector<Row> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string f[4];
    for (auto& field : f) {
      if (!std::getline(ls, field, ',')) {
        throw DataError("importance CSV line " + std::to_string(line_no) + " has too few fields");
      }
    }
    try {
      std::size_t used = 0;
      Row r{std::stoul(f[0]), std::stoul(f[1]), std::stod(f[2], &used), provenance_from_string(f[3])};
      if (used != f[2].size()) throw std::invalid_argument("score");
      rows.push_back(r);
    } catch (const std::logic_error&) {
      throw DataError("importance CSV line " + std::to_string(line_no) + " is malformed");
    }
  }
  if (rows.empty()) throw DataError("importance CSV has no rows");
  std::size_t layers = 0, heads = 0;
  for (const Row& r : rows) {
    layers = std::max(layers, r.layer + 1);
    heads = std::max(heads, r.head + 1);
  }
  if (rows.size() != layers * heads) throw DataError("importance CSV does not cover a full grid");
  ImportanceMatrix m(layers, heads, rows.front().prov);
  std::vector<bool> seen(layers * heads, false);
  for (const Row& r : rows) {
    if (r.prov != m.provenance) throw DataError("importance CSV mixes provenances");
    const std::size_t i = r.layer * heads + r.head;
    if (seen[i]) throw DataError("importance CSV repeats a head");
    seen[i] = true;
    m.at({r.layer, r.head}) = r.score;
  }
  return m;
}

void write_importance(const std::filesystem::path& csv_path, const ImportanceMatrix& m,
                      const ImportanceMeta& meta) {
  std::ofstream out(csv_path);
  if (!out) throw DataError("cannot write " + csv_path.string());
  out << importance_csv(m);
  nlohmann::json side = {{"layers", m.layers()},
                         {"heads", m.heads()},
                         {"provenance", to_string(m.provenance)},
                         {"sample_count", m.sample_count},
                         {"reduction", meta.reduction},
                         {"checkpoint_hash", meta.checkpoint_hash},
                         {"dataset_hash", meta.dataset_hash}};
  std::ofstream js(sidecar(csv_path));
  if (!js) throw DataError("cannot write " + sidecar(csv_path).string());
  js << side.dump(2) << "\n";
}

ImportanceMatrix read_importance(const std::filesystem::path& csv_path, ImportanceMeta* meta) {
  ImportanceMatrix m = parse_importance_csv(slurp(csv_path));
  const auto side_path = sidecar(csv_path);
  if (std::filesystem::exists(side_path)) {
    nlohmann::json side;
    try {
      side = nlohmann::json::parse(slurp(side_path));
      if (side.at("layers").get<std::size_t>() != m.layers() ||
          side.at("heads").get<std::size_t>() != m.heads() ||
          side.at("provenance").get<std::string>() != to_string(m.provenance)) {
        throw DataError("sidecar " + side_path.string() + " disagrees with the CSV");
      }
      m.sample_count = side.at("sample_count").get<std::size_t>();
      if (meta != nullptr) {
        meta->reduction = side.at("reduction").get<std::string>();
        meta->checkpoint_hash = side.at("checkpoint_hash").get<std::string>();
        meta->dataset_hash = side.at("dataset_hash").get<std::string>();
      }
    } catch (const nlohmann::json::exception& e) {
      throw DataError("malformed sidecar " + side_path.string() + ": " + e.what());
    }
  }
  return m;
}

ImportanceBundle score_dataset(const model::ModelParams& params,
                               const std::vector<McExample>& dataset, ScoreReduction reduction) {
  if (dataset.empty()) throw UsageError("cannot score heads on an empty dataset");
  ImportanceBundle b;
  const auto right_pairs = gold_pairs(dataset);
  b.right = head_importance(params, right_pairs, reduction);
  const auto sets = build_adversarial(dataset);
  b.wrong_slots = wrong_slot_importance(params, sets, reduction);
  b.wrong_average = wrong_head_average(b.wrong_slots);
  return b;
}

ImportanceCache::ImportanceCache(std::filesystem::path dir) : dir_(std::move(dir)) {}

std::filesystem::path ImportanceCache::entry(std::uint64_t checkpoint, std::uint64_t dataset,
                                             ScoreReduction reduction) const {
  return dir_ / (util::hex_digest(checkpoint) + "-" + util::hex_digest(dataset) + "-" +
                 to_string(reduction));
}

std::optional<ImportanceBundle> ImportanceCache::load(std::uint64_t checkpoint,
                                                      std::uint64_t dataset,
                                                      ScoreReduction reduction) const {
  const auto dir = entry(checkpoint, dataset, reduction);
  if (!std::filesystem::exists(dir / "complete")) return std::nullopt;
  ImportanceBundle b;
  b.right = read_importance(dir / "right.csv");
  b.wrong_average = read_importance(dir / "wrong_average.csv");
  for (std::size_t j = 0;; ++j) {
    const auto p = dir / ("wrong_" + std::to_string(j) + ".csv");
    if (!std::filesystem::exists(p)) break;
    b.wrong_slots.push_back(read_importance(p));
  }
  return b;
}

void ImportanceCache::store(std::uint64_t checkpoint, std::uint64_t dataset,
                            ScoreReduction reduction, const ImportanceBundle& bundle) const {
  const auto dir = entry(checkpoint, dataset, reduction);
  if (std::filesystem::exists(dir / "complete")) return;  // write-once
  std::filesystem::create_directories(dir);
  const ImportanceMeta meta{to_string(reduction), util::hex_digest(checkpoint),
                            util::hex_digest(dataset)};
  write_importance(dir / "right.csv", bundle.right, meta);
  write_importance(dir / "wrong_average.csv", bundle.wrong_average, meta);
  for (std::size_t j = 0; j < bundle.wrong_slots.size(); ++j) {
    write_importance(dir / ("wrong_" + std::to_string(j) + ".csv"), bundle.wrong_slots[j], meta);
  }
  std::ofstream(dir / "complete") << "ok\n";
}

ImportanceBundle ImportanceCache::get(const model::ModelParams& params,
                                      const std::vector<McExample>& dataset,
                                      ScoreReduction reduction) const {
  const auto ck = model::content_hash(params);
  const auto ds = dataset_hash(dataset);
  if (auto hit = load(ck, ds, reduction)) return *hit;
  ImportanceBundle b = score_dataset(params, dataset, reduction);
  store(ck, ds, reduction, b);
  return b;
}

}  // namespace hicd::heads
