#include <algorithm>
#include <cmath>
#include <limits>

#include "fedchat/bytes.hpp"
#include "fedchat/fedsim.hpp"

namespace fedchat::fedsim {

namespace {

constexpr char kQuantMagic[4] = {'T', 'L', 'Q', '1'};

double dequant_value(std::uint8_t code, std::int64_t zero_point, double scale) {
  return static_cast<double>(static_cast<std::int64_t>(code) - zero_point) * scale;
}

// Fills t.scale, t.zero_point and t.codes; true when every reconstruction is
// within scale/2 of the original.
bool encode_codes(const std::vector<float>& data, float lo, float scale, QuantizedTensor& t) {
  if (scale == 0.0f) scale = std::numeric_limits<float>::denorm_min();
  t.scale = scale;
  const double s = scale;
  t.zero_point = std::llround(-static_cast<double>(lo) / s);
  t.codes.resize(data.size());
  bool fits = true;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double x = data[i];
    const std::int64_t guess = std::llround(x / s) + t.zero_point;
    // Pick the code whose float reconstruction is nearest, which absorbs
    // the rounding of the division above.
    std::int64_t best = std::clamp<std::int64_t>(guess, 0, 255);
    double best_err = std::abs(static_cast<float>(dequant_value(static_cast<std::uint8_t>(best), t.zero_point, s)) - x);
    for (std::int64_t c : {guess - 1, guess + 1}) {
      if (c < 0 || c > 255) continue;
      const double err = std::abs(static_cast<float>(dequant_value(static_cast<std::uint8_t>(c), t.zero_point, s)) - x);
      if (err < best_err) {
        best = c;
        best_err = err;
      }
    }
    t.codes[i] = static_cast<std::uint8_t>(best);
    fits = fits && best_err <= s / 2.0;
  }
  return fits;
}

ParamSet trainable_subset(const ParamSet& params) {
  ParamSet out;
  for (const auto& [name, e] : params) {
    if (e.trainable) out.insert(name, e.tensor, true);
  }
  return out;
}

// Overwrites entries of `base` with the received ones; names and shapes must match.
ParamSet overlay(const ParamSet& base, const ParamSet& received) {
  ParamSet out = base;
  for (const auto& [name, e] : received) {
    if (!out.contains(name) || out.at(name).shape != e.tensor.shape) {
      throw Error(ErrorCode::kMisalignedParams, "payload entry does not match the global model: " + name);
    }
    out.at(name).data = e.tensor.data;
  }
  return out;
}

std::vector<std::uint8_t> encode_set(const ParamSet& params, std::uint64_t round, bool quantized) {
  if (quantized) return serialize_quantized(quantize(params));
  return peft::serialize_checkpoint(peft::checkpoint_save(params, round));
}

ParamSet decode_set(std::span<const std::uint8_t> payload, bool quantized) {
  if (quantized) return dequantize(deserialize_quantized(payload));
  return peft::deserialize_checkpoint(payload).params;
}

}  // namespace

QuantizedParams quantize(const ParamSet& params, int bits) {
  if (bits != 8) throw Error(ErrorCode::kInvalidArgument, "only 8-bit quantization is supported");
  QuantizedParams q;
  for (const auto& [name, e] : params) {
    QuantizedTensor t;
    t.name = name;
    t.trainable = e.trainable;
    t.shape = e.tensor.shape;
    const auto& data = e.tensor.data;
    for (float v : data) {
      if (!std::isfinite(v)) throw Error(ErrorCode::kNonFiniteValue, "non-finite value in " + name);
    }
    if (data.empty()) {
      q.tensors.push_back(std::move(t));
      continue;
    }
    const auto [lo_it, hi_it] = std::minmax_element(data.begin(), data.end());
    const float lo = *lo_it;
    const float hi = *hi_it;
    if (lo == hi) {
      t.constant = lo;
      q.tensors.push_back(std::move(t));
      continue;
    }
    const float nearest = static_cast<float>((static_cast<double>(hi) - static_cast<double>(lo)) / 255.0);
    // Float32 reconstruction can land a fraction of an ulp outside scale/2 for
    // values near a cell midpoint. Neighbouring float scales shift the grid, so
    // take the first one, nearest outwards, that keeps every element in bound.
    bool fits = false;
    for (int step = 0; step <= 8 && !fits; ++step) {
      const int offset = step % 2 ? (step + 1) / 2 : -(step / 2);
      float scale = nearest;
      for (int k = 0; k < std::abs(offset); ++k) {
        scale = std::nextafter(scale, offset > 0 ? std::numeric_limits<float>::infinity() : 0.0f);
      }
      fits = encode_codes(data, lo, scale, t);
    }
    if (!fits) encode_codes(data, lo, nearest, t);
    q.tensors.push_back(std::move(t));
  }
  return q;
}

ParamSet dequantize(const QuantizedParams& q) {
  ParamSet out;
  for (const auto& t : q.tensors) {
    Tensor tensor(t.shape);
    if (t.scale == 0.0f) {
      std::fill(tensor.data.begin(), tensor.data.end(), t.constant);
    } else {
      if (t.codes.size() != tensor.numel()) throw Error(ErrorCode::kCorruptFile, "code count mismatch for " + t.name);
      for (std::size_t i = 0; i < t.codes.size(); ++i) {
        tensor.data[i] = static_cast<float>(dequant_value(t.codes[i], t.zero_point, t.scale));
      }
    }
    out.insert(t.name, std::move(tensor), t.trainable);
  }
  return out;
}

std::vector<std::uint8_t> serialize_quantized(const QuantizedParams& q) {
  ByteWriter w;
  for (char c : kQuantMagic) w.put_u8(static_cast<std::uint8_t>(c));
  w.put_u32(static_cast<std::uint32_t>(q.tensors.size()));
  for (const auto& t : q.tensors) {
    w.put_string(t.name);
    w.put_u8(t.trainable ? 1 : 0);
    w.put_u32(static_cast<std::uint32_t>(t.shape.size()));
    for (std::size_t d : t.shape) w.put_u32(static_cast<std::uint32_t>(d));
    w.put_f32(t.scale);
    w.put_u64(static_cast<std::uint64_t>(t.zero_point));
    if (t.scale == 0.0f) {
      w.put_f32(t.constant);
    } else {
      w.put_raw(std::span<const std::uint8_t>(t.codes));
    }
  }
  return std::move(w).take();
}

QuantizedParams deserialize_quantized(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  for (char c : kQuantMagic) {
    if (r.get_u8() != static_cast<std::uint8_t>(c)) throw Error(ErrorCode::kFormatVersionMismatch, "bad quantized magic");
  }
  QuantizedParams q;
  const std::uint32_t n = r.get_u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    QuantizedTensor t;
    t.name = r.get_string();
    t.trainable = r.get_u8() != 0;
    const std::uint32_t rank = r.get_u32();
    if (rank > 8) throw Error(ErrorCode::kCorruptFile, "tensor rank too large");
    std::size_t numel = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      t.shape.push_back(r.get_u32());
      numel *= t.shape.back();
    }
    t.scale = r.get_f32();
    t.zero_point = static_cast<std::int64_t>(r.get_u64());
    if (t.scale == 0.0f) {
      t.constant = r.get_f32();
    } else {
      if (numel > r.remaining()) throw Error(ErrorCode::kCorruptFile, "truncated quantized tensor");
      const std::string raw = r.get_raw(numel);
      t.codes.assign(raw.begin(), raw.end());
    }
    q.tensors.push_back(std::move(t));
  }
  if (!r.at_end()) throw Error(ErrorCode::kCorruptFile, "trailing bytes in quantized payload");
  return q;
}

std::vector<std::uint8_t> encode_uplink(const ParamSet& client, const peft::Checkpoint& round_start,
                                        const RoundConfig& config) {
  const bool quantized = config.quant_bits != 0;
  switch (config.transport_mode) {
    case TransportMode::kFull:
      return encode_set(client, round_start.round, quantized);
    case TransportMode::kAdaptersOnly:
      return encode_set(trainable_subset(client), round_start.round, quantized);
    case TransportMode::kDiff:
      if (quantized) throw Error(ErrorCode::kInvalidConfig, "diff transport cannot be quantized");
      return peft::serialize_diff(peft::checkpoint_diff(round_start, peft::checkpoint_save(client, round_start.round),
                                                        config.tau));
  }
  throw Error(ErrorCode::kInvalidConfig, "unknown transport mode");
}

ParamSet decode_uplink(std::span<const std::uint8_t> payload, const peft::Checkpoint& round_start,
                       const RoundConfig& config) {
  const bool quantized = config.quant_bits != 0;
  switch (config.transport_mode) {
    case TransportMode::kFull: {
      ParamSet p = decode_set(payload, quantized);
      require_aligned(round_start.params, p, "full payload does not match the global model");
      return p;
    }
    case TransportMode::kAdaptersOnly:
      return overlay(round_start.params, decode_set(payload, quantized));
    case TransportMode::kDiff:
      return peft::checkpoint_apply(round_start, peft::deserialize_diff(payload));
  }
  throw Error(ErrorCode::kInvalidConfig, "unknown transport mode");
}

std::vector<std::uint8_t> encode_downlink(const ParamSet& new_global, const peft::Checkpoint& round_start,
                                          TransportMode mode) {
  RoundConfig c;
  c.transport_mode = mode;
  return encode_uplink(new_global, round_start, c);
}

ParamSet decode_downlink(std::span<const std::uint8_t> payload, const peft::Checkpoint& round_start,
                         TransportMode mode) {
  RoundConfig c;
  c.transport_mode = mode;
  return decode_uplink(payload, round_start, c);
}

}  // namespace fedchat::fedsim
