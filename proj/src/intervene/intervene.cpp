#include "hicd/intervene/intervene.hpp"

#include <fstream>
#include <sstream>

#include "hicd/error.hpp"
#include "hicd/util/hash.hpp"
#include "json.hpp"

namespace hicd::intervene {

using num::Tensor;
using num::Var;

Tensor disperse_attention_row_form(std::size_t seq_len) {
  if (seq_len == 0) throw UsageError("dispersion needs a sequence of at least one token");
  Tensor s = Tensor::zeros(seq_len, seq_len);
  for (std::size_t i = 0; i < seq_len; ++i) {
    const double w = 1.0 / static_cast<double>(i + 1);
    for (std::size_t j = 0; j <= i; ++j) s(i, j) = w;
  }
  return s;
}

HeadComputation apply_dispersion(num::GradTape& tape, Var values) {
  const std::size_t n = values.value().rows();
  Var attention = tape.leaf(disperse_attention_row_form(n), false);
  return {attention, num::matmul(attention, values)};
}

HeadComputation apply_pruning(num::GradTape& tape, std::size_t seq_len, std::size_t head_dim) {
  return {tape.leaf(Tensor::zeros(seq_len, seq_len), false),
          tape.leaf(Tensor::zeros(seq_len, head_dim), false)};
}

void DispersionSpec::validate(const model::ModelConfig& config) const {
  to_plan().validate(config);
}

InterventionPlan DispersionSpec::to_plan(HeadMode mode) const {
  InterventionPlan plan;
  for (HeadId h : targets) plan.set(h, mode);
  return plan;
}

InterventionPlan parse_plan_json(const std::string& text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("plan file is not valid JSON: ") + e.what());
  }
  if (!doc.is_array()) throw DataError("plan file must be a JSON list of {layer, head, mode}");
  InterventionPlan plan;
  std::set<HeadId> seen;
  for (const auto& rec : doc) {
    if (!rec.is_object() || !rec.contains("layer") || !rec.contains("head") ||
        !rec.contains("mode") || !rec["layer"].is_number_unsigned() ||
        !rec["head"].is_number_unsigned() || !rec["mode"].is_string()) {
      throw DataError("plan record needs unsigned 'layer', 'head' and string 'mode': " +
                      rec.dump());
    }
    const HeadId id{rec["layer"].get<std::size_t>(), rec["head"].get<std::size_t>()};
    if (!seen.insert(id).second) {
      throw DataError("plan lists head " + model::to_string(id) + " more than once");
    }
    plan.set(id, model::head_mode_from_string(rec["mode"].get<std::string>()));
  }
  return plan;
}

std::string plan_to_json(const InterventionPlan& plan) {
  nlohmann::json doc = nlohmann::json::array();
  for (const auto& [id, mode] : plan.entries()) {
    doc.push_back({{"layer", id.layer}, {"head", id.head}, {"mode", model::to_string(mode)}});
  }
  return doc.dump(2);
}

InterventionPlan read_plan_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open plan file " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_plan_json(buf.str());
}

void write_plan_file(const std::filesystem::path& path, const InterventionPlan& plan) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write plan file " + path.string());
  out << plan_to_json(plan) << "\n";
}

std::uint64_t plan_hash(const InterventionPlan& plan) {
  util::Fnv1a h;
  for (const auto& [id, mode] : plan.entries()) {
    h.value(id.layer);
    h.value(id.head);
    h.value(static_cast<int>(mode));
  }
  return h.digest();
}

}  // namespace hicd::intervene
