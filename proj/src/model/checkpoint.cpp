#include "hicd/model/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>

#include "hicd/error.hpp"
#include "hicd/util/hash.hpp"
#include "json.hpp"

namespace hicd::model {

namespace {

constexpr std::array<char, 8> kMagic{'H', 'I', 'C', 'D', 'C', 'K', 'P', 'T'};

template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  }
}

class Writer {
 public:
  explicit Writer(std::ofstream& out) : out_(out) {}

  template <typename T>
  void put(T v) {
    v = to_little(v);
    out_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void put_string(const std::string& s) {
    put(static_cast<std::uint32_t>(s.size()));
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }

 private:
  std::ofstream& out_;
};

class Reader {
 public:
  Reader(std::ifstream& in, std::string path) : in_(in), path_(std::move(path)) {}

  template <typename T>
  T get() {
    T v{};
    in_.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in_) throw DataError("checkpoint " + path_ + " is truncated");
    return to_little(v);
  }
  std::string get_string(std::size_t limit = 1 << 16) {
    const auto n = get<std::uint32_t>();
    if (n > limit) throw DataError("checkpoint " + path_ + " has an implausible string length");
    std::string s(n, '\0');
    in_.read(s.data(), n);
    if (!in_) throw DataError("checkpoint " + path_ + " is truncated");
    return s;
  }

 private:
  std::ifstream& in_;
  std::string path_;
};

}  // namespace

std::filesystem::path manifest_path(const std::filesystem::path& checkpoint) {
  std::filesystem::path p = checkpoint;
  p += ".json";
  return p;
}

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params,
                     const CheckpointInfo& info) {
  params.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  Writer w(out);
  out.write(kMagic.data(), kMagic.size());
  w.put(kCheckpointFormatVersion);
  const ModelConfig& c = params.config;
  for (std::uint64_t v : {c.layers, c.heads, c.model_dim, c.vocab_size, c.max_seq_len, c.ff_dim}) {
    w.put(v);
  }
  w.put(c.layer_norm_epsilon);
  w.put(info.seed);
  w.put_string(info.task_tag);
  const auto blocks = params.named();
  w.put(static_cast<std::uint32_t>(blocks.size()));
  for (const auto& [name, t] : blocks) {
    w.put_string(name);
    w.put(static_cast<std::uint32_t>(t->rank()));
    for (std::size_t dim : t->shape()) w.put(static_cast<std::uint64_t>(dim));
    for (double v : t->data()) w.put(v);
  }
  if (!out) throw DataError("failed while writing checkpoint " + path.string());

  nlohmann::json manifest = {
      {"format_version", kCheckpointFormatVersion},
      {"layers", c.layers},
      {"heads", c.heads},
      {"model_dim", c.model_dim},
      {"vocab_size", c.vocab_size},
      {"max_seq_len", c.max_seq_len},
      {"ff_dim", c.ff_dim},
      {"layer_norm_epsilon", c.layer_norm_epsilon},
      {"seed", info.seed},
      {"task", info.task_tag},
      {"parameter_count", params.parameter_count()},
      {"content_hash", util::hex_digest(content_hash(params))},
  };
  std::ofstream mf(manifest_path(path));
  if (!mf) throw DataError("cannot write checkpoint manifest for " + path.string());
  mf << manifest.dump(2) << "\n";
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  Reader r(in, path.string());
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kMagic) throw DataError(path.string() + " is not a checkpoint file");
  Checkpoint ck;
  ck.info.format_version = r.get<std::uint32_t>();
  if (ck.info.format_version != kCheckpointFormatVersion) {
    throw DataError("checkpoint format version " + std::to_string(ck.info.format_version) +
                    " is not supported");
  }
  ModelConfig c;
  c.layers = r.get<std::uint64_t>();
  c.heads = r.get<std::uint64_t>();
  c.model_dim = r.get<std::uint64_t>();
  c.vocab_size = r.get<std::uint64_t>();
  c.max_seq_len = r.get<std::uint64_t>();
  c.ff_dim = r.get<std::uint64_t>();
  c.layer_norm_epsilon = r.get<double>();
  ck.info.seed = r.get<std::uint64_t>();
  ck.info.task_tag = r.get_string();
  try {
    c.validate();
  } catch (const UsageError& e) {
    throw DataError(std::string("checkpoint header: ") + e.what());
  }
  ck.params = zero_params(c);
  auto blocks = ck.params.named();
  const auto count = r.get<std::uint32_t>();
  if (count != blocks.size()) {
    throw DataError("checkpoint holds " + std::to_string(count) + " blocks, expected " +
                    std::to_string(blocks.size()));
  }
  for (auto& [name, t] : blocks) {
    const std::string got = r.get_string();
    if (got != name) throw DataError("checkpoint block '" + got + "' where '" + name + "' expected");
    const auto rank = r.get<std::uint32_t>();
    num::Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(r.get<std::uint64_t>());
    if (shape != t->shape()) {
      throw DataError("checkpoint block " + name + " has shape " + num::shape_string(shape) +
                      ", expected " + num::shape_string(t->shape()));
    }
    std::vector<double> data(t->size());
    for (double& v : data) v = r.get<double>();
    try {
      *t = num::Tensor(shape, std::move(data));
    } catch (const NumericError&) {
      throw DataError("checkpoint block " + name + " holds a non-finite value");
    }
  }
  return ck;
}

}  // namespace hicd::model
