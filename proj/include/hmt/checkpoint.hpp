#pragma once

// Versioned binary checkpoint: "HMTCKPT1", u32 version, u64 recipe digest,
// i64 step, u32 tensor count, then per tensor (u32 name length, name bytes,
// u32 rank, u64 extents, f64 values), then u32 RNG blob length and bytes.
// Little-endian throughout.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "hmt/params.hpp"
#include "hmt/tensor.hpp"

namespace hmt {

struct CheckpointTensor {
  std::string name;
  Shape shape;
  std::vector<double> values;

  bool operator==(const CheckpointTensor&) const = default;
};

struct Checkpoint {
  std::uint64_t digest = 0;
  std::int64_t step = 0;
  std::vector<CheckpointTensor> tensors;
  std::string rng_state;

  const CheckpointTensor* find(const std::string& name) const;
  // Appends the parameters under "<prefix>.<name>".
  void add_params(const std::string& prefix, const ParamList& params);
  // Copies "<prefix>.<name>" entries into the parameters; all must exist.
  void load_params(const std::string& prefix, const ParamList& params) const;
  bool has_prefix(const std::string& prefix) const;
};

// Names under this prefix hold optimizer state and are dropped by averaging.
inline constexpr const char* kOptimizerPrefix = "opt.";

// Written to a temporary file and renamed into place.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Elementwise mean of every non-optimizer tensor. Inputs must agree on names,
// shapes and digest; the step is the largest input step.
Checkpoint average_checkpoints(const std::vector<Checkpoint>& ckpts);

// One line per tensor plus a header.
std::string describe_checkpoint(const Checkpoint& ckpt);

// Checkpoint files "<dir>/step_NNNNNNNN.ckpt" in step order.
std::vector<std::filesystem::path> list_checkpoints(const std::filesystem::path& dir);
std::filesystem::path checkpoint_path(const std::filesystem::path& dir, std::int64_t step);

}  // namespace hmt
