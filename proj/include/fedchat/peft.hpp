#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedchat/model.hpp"

namespace fedchat::peft {

struct AdaptedModel {
  ParamSet params;
  tinylm::ModelConfig config;
};

// Attention projections of every layer.
std::vector<std::string> default_lora_targets(const tinylm::ModelConfig& config);

// Freezes every existing entry and adds `<target>.lora_a` [r, d_in] (Gaussian,
// seeded) and `<target>.lora_b` [d_out, r] (zeros). alpha defaults to 2r.
AdaptedModel attach_lora(const ParamSet& params, const tinylm::ModelConfig& config,
                         const std::vector<std::string>& targets, int rank,
                         std::optional<float> alpha = std::nullopt, std::uint64_t seed = 0);

struct PrefixOptions {
  float init_stddev = 0.02f;  // 0 gives all-zero prefixes
  std::uint64_t seed = 0;
};

// Freezes every existing entry and adds per-layer `attn.prefix_k` and
// `attn.prefix_v` tensors of shape [prefix_len, d_model].
AdaptedModel attach_prefix(const ParamSet& params, const tinylm::ModelConfig& config, int prefix_len,
                           const PrefixOptions& options = {});

struct ParamStats {
  std::size_t total_params = 0;
  std::size_t trainable_params = 0;
  double trainable_percent = 0.0;
  std::size_t model_bytes = 0;
  std::size_t trainable_bytes = 0;
  // LoRA targets whose rank exceeds min(d_in, d_out).
  std::vector<std::string> rank_not_reduced;
};

ParamStats param_stats(const ParamSet& params);

using Digest = std::uint64_t;

// FNV-1a over the canonical parameter-record serialization.
Digest content_hash(const ParamSet& params);

struct Checkpoint {
  std::uint64_t round = 0;
  ParamSet params;
  Digest content_hash = 0;
};

Checkpoint checkpoint_save(const ParamSet& params, std::uint64_t round);

// "TLC1", u64 round, u64 hash, parameter records.
std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& checkpoint);
Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes);

struct SparseEntry {
  std::uint32_t index = 0;
  float value = 0.0f;
  bool operator==(const SparseEntry&) const = default;
};

// Changed elements of one tensor. When the sparse form would be larger than
// the tensor itself the record is dense and carries every new value.
struct DiffRecord {
  std::vector<SparseEntry> entries;
  std::vector<float> dense;
  std::uint32_t changed = 0;

  bool is_dense() const { return !dense.empty(); }
  bool operator==(const DiffRecord&) const = default;
};

struct CheckpointDiff {
  Digest base_hash = 0;
  float tau = 0.0f;
  std::map<std::string, DiffRecord> records;

  // Number of changed elements over all records.
  std::size_t entry_count() const;
  std::vector<std::string> names() const;
  bool operator==(const CheckpointDiff&) const = default;
};

// Whether an element counts as changed. At tau == 0 any bit difference counts
// (so +0/-0 flips survive the roundtrip); otherwise |new - old| > tau.
bool element_changed(float old_value, float new_value, float tau);

CheckpointDiff checkpoint_diff(const Checkpoint& old_checkpoint, const Checkpoint& new_checkpoint, float tau = 0.0f);
ParamSet checkpoint_apply(const Checkpoint& base, const CheckpointDiff& diff);

// "TLD1" diff file: magic, base hash (u64), tau (f32), record count (u32),
// then per record: name, u32 index count, (u32 index, f32 value) pairs. A
// count with the top bit set marks a dense record: low 31 bits = element
// count, then u32 changed count, then every value.
std::vector<std::uint8_t> serialize_diff(const CheckpointDiff& diff);
CheckpointDiff deserialize_diff(std::span<const std::uint8_t> bytes);

}  // namespace fedchat::peft
