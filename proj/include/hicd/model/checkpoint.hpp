#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "hicd/model/params.hpp"

namespace hicd::model {

inline constexpr std::uint32_t kCheckpointFormatVersion = 1;

struct CheckpointInfo {
  std::uint32_t format_version = kCheckpointFormatVersion;
  std::uint64_t seed = 0;
  std::string task_tag;
};

struct Checkpoint {
  ModelParams params;
  CheckpointInfo info;
};

// Binary layout (all integers and doubles little-endian):
//   magic "HICDCKPT", u32 format version,
//   header: u64 L, M, d, V, max_seq_len, ff_dim; f64 layer-norm epsilon;
//           u64 seed; u32 tag length + tag bytes,
//   u32 block count, then per block: u32 name length + name, u32 rank,
//           u64 dims[rank], f64 values[prod(dims)] row-major.
// A JSON manifest mirroring the header is written next to it as <path>.json.
void save_checkpoint(const std::filesystem::path& path, const ModelParams& params,
                     const CheckpointInfo& info);

// Throws DataError on a malformed or truncated file.
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::filesystem::path manifest_path(const std::filesystem::path& checkpoint);

}  // namespace hicd::model
