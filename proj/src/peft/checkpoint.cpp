#include <bit>
#include <cmath>
#include <cstring>

#include "fedchat/bytes.hpp"
#include "fedchat/peft.hpp"

namespace fedchat::peft {

namespace {

constexpr char kCheckpointMagic[4] = {'T', 'L', 'C', '1'};
constexpr char kDiffMagic[4] = {'T', 'L', 'D', '1'};
constexpr std::uint32_t kDenseFlag = 0x80000000u;

void expect_magic(ByteReader& r, const char (&magic)[4], const char* what) {
  for (char c : magic) {
    if (r.get_u8() != static_cast<std::uint8_t>(c)) {
      throw Error(ErrorCode::kFormatVersionMismatch, std::string("bad magic in ") + what);
    }
  }
}

void put_magic(ByteWriter& w, const char (&magic)[4]) {
  for (char c : magic) w.put_u8(static_cast<std::uint8_t>(c));
}

}  // namespace

Digest content_hash(const ParamSet& params) {
  ByteWriter w;
  tinylm::write_param_records(w, params);
  return fnv1a64(w.bytes());
}

Checkpoint checkpoint_save(const ParamSet& params, std::uint64_t round) {
  return Checkpoint{round, params, content_hash(params)};
}

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& checkpoint) {
  ByteWriter w;
  put_magic(w, kCheckpointMagic);
  w.put_u64(checkpoint.round);
  w.put_u64(checkpoint.content_hash);
  tinylm::write_param_records(w, checkpoint.params);
  return std::move(w).take();
}

Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  expect_magic(r, kCheckpointMagic, "checkpoint");
  Checkpoint c;
  c.round = r.get_u64();
  c.content_hash = r.get_u64();
  c.params = tinylm::read_param_records(r);
  if (!r.at_end()) throw Error(ErrorCode::kCorruptFile, "trailing bytes in checkpoint");
  if (content_hash(c.params) != c.content_hash) throw Error(ErrorCode::kCorruptFile, "checkpoint hash mismatch");
  return c;
}

std::size_t CheckpointDiff::entry_count() const {
  std::size_t n = 0;
  for (const auto& [name, rec] : records) n += rec.changed;
  return n;
}

std::vector<std::string> CheckpointDiff::names() const {
  std::vector<std::string> out;
  for (const auto& [name, rec] : records) out.push_back(name);
  return out;
}

bool element_changed(float old_value, float new_value, float tau) {
  if (tau <= 0.0f) return std::bit_cast<std::uint32_t>(old_value) != std::bit_cast<std::uint32_t>(new_value);
  const double delta = std::abs(static_cast<double>(new_value) - static_cast<double>(old_value));
  // NaN deltas count as changed so they are never silently dropped.
  return !(delta <= static_cast<double>(tau));
}

CheckpointDiff checkpoint_diff(const Checkpoint& old_checkpoint, const Checkpoint& new_checkpoint, float tau) {
  require_aligned(old_checkpoint.params, new_checkpoint.params, "checkpoint_diff");
  if (!(tau >= 0.0f)) throw Error(ErrorCode::kInvalidArgument, "tau must be >= 0");
  CheckpointDiff diff;
  diff.base_hash = old_checkpoint.content_hash;
  diff.tau = tau;
  for (const auto& [name, e] : new_checkpoint.params) {
    const auto& before = old_checkpoint.params.at(name).data;
    const auto& after = e.tensor.data;
    DiffRecord rec;
    for (std::size_t i = 0; i < after.size(); ++i) {
      if (element_changed(before[i], after[i], tau)) {
        rec.entries.push_back({static_cast<std::uint32_t>(i), after[i]});
      }
    }
    if (rec.entries.empty()) continue;
    rec.changed = static_cast<std::uint32_t>(rec.entries.size());
    // Sparse costs 8 bytes per entry, dense 4 per element plus the count.
    if (8 * rec.entries.size() > 4 * after.size() + 4) {
      rec.entries.clear();
      rec.dense = after;
    }
    diff.records.emplace(name, std::move(rec));
  }
  return diff;
}

ParamSet checkpoint_apply(const Checkpoint& base, const CheckpointDiff& diff) {
  if (diff.base_hash != base.content_hash) throw Error(ErrorCode::kBaseHashMismatch, "diff was made against another base");
  ParamSet out = base.params;
  for (const auto& [name, rec] : diff.records) {
    if (!out.contains(name)) throw Error(ErrorCode::kMisalignedParams, "diff names unknown tensor " + name);
    auto& data = out.at(name).data;
    if (rec.is_dense()) {
      if (rec.dense.size() != data.size()) throw Error(ErrorCode::kMisalignedParams, "dense record size for " + name);
      data = rec.dense;
      continue;
    }
    for (const auto& se : rec.entries) {
      if (se.index >= data.size()) throw Error(ErrorCode::kMisalignedParams, "diff index out of range in " + name);
      data[se.index] = se.value;
    }
  }
  return out;
}

std::vector<std::uint8_t> serialize_diff(const CheckpointDiff& diff) {
  ByteWriter w;
  put_magic(w, kDiffMagic);
  w.put_u64(diff.base_hash);
  w.put_f32(diff.tau);
  w.put_u32(static_cast<std::uint32_t>(diff.records.size()));
  for (const auto& [name, rec] : diff.records) {
    w.put_string(name);
    if (rec.is_dense()) {
      w.put_u32(kDenseFlag | static_cast<std::uint32_t>(rec.dense.size()));
      w.put_u32(rec.changed);
      w.put_f32_array(rec.dense);
    } else {
      w.put_u32(static_cast<std::uint32_t>(rec.entries.size()));
      for (const auto& se : rec.entries) {
        w.put_u32(se.index);
        w.put_f32(se.value);
      }
    }
  }
  return std::move(w).take();
}

CheckpointDiff deserialize_diff(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  expect_magic(r, kDiffMagic, "diff");
  CheckpointDiff diff;
  diff.base_hash = r.get_u64();
  diff.tau = r.get_f32();
  const std::uint32_t n = r.get_u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string name = r.get_string();
    const std::uint32_t count = r.get_u32();
    DiffRecord rec;
    if (count & kDenseFlag) {
      const std::uint32_t len = count & ~kDenseFlag;
      rec.changed = r.get_u32();
      if (len == 0 || static_cast<std::size_t>(len) * 4 > r.remaining()) {
        throw Error(ErrorCode::kCorruptFile, "bad dense record in diff");
      }
      rec.dense.resize(len);
      r.get_f32_array(rec.dense);
    } else {
      if (static_cast<std::size_t>(count) * 8 > r.remaining()) throw Error(ErrorCode::kCorruptFile, "truncated diff");
      rec.entries.resize(count);
      for (auto& se : rec.entries) {
        se.index = r.get_u32();
        se.value = r.get_f32();
      }
      rec.changed = count;
    }
    if (!diff.records.emplace(std::move(name), std::move(rec)).second) {
      throw Error(ErrorCode::kCorruptFile, "duplicate record in diff");
    }
  }
  if (!r.at_end()) throw Error(ErrorCode::kCorruptFile, "trailing bytes in diff");
  return diff;
}

}  // namespace fedchat::peft
