#include "json.hpp"

#include "fedchat/model.hpp"

namespace fedchat::tinylm {
namespace {

constexpr std::string_view kModelMagic = "TLM1";

}  // namespace

std::string ModelConfig::to_json() const {
  nlohmann::ordered_json j;
  j["n_layers"] = n_layers;
  j["d_model"] = d_model;
  j["n_heads"] = n_heads;
  j["d_ff"] = d_ff;
  j["context_len"] = context_len;
  j["vocab_size"] = vocab_size;
  j["seed"] = seed;
  j["prefix_len"] = prefix_len;
  if (lora) {
    j["lora"] = {{"targets", lora->targets}, {"rank", lora->rank}, {"alpha", lora->alpha}};
  }
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kCorruptFile, std::string("model config: ") + e.what());
  }
  ModelConfig c;
  try {
    c.n_layers = j.at("n_layers").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.d_ff = j.at("d_ff").get<int>();
    c.context_len = j.at("context_len").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.seed = j.value("seed", std::uint64_t{0});
    c.prefix_len = j.value("prefix_len", 0);
    if (j.contains("lora")) {
      const auto& l = j.at("lora");
      c.lora = LoraSpec{l.at("targets").get<std::vector<std::string>>(), l.at("rank").get<int>(),
                        l.at("alpha").get<float>()};
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kCorruptFile, std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

void write_param_records(ByteWriter& out, const ParamSet& params) {
  for (const auto& [name, entry] : params) {
    out.put_string(name);
    out.put_u8(entry.trainable ? 1 : 0);
    out.put_u32(static_cast<std::uint32_t>(entry.tensor.rank()));
    for (std::size_t dim : entry.tensor.shape) out.put_u32(static_cast<std::uint32_t>(dim));
    out.put_f32_array(entry.tensor.data);
  }
}

ParamSet read_param_records(ByteReader& in) {
  ParamSet params;
  while (!in.at_end()) {
    std::string name = in.get_string();
    const bool trainable = in.get_u8() != 0;
    const std::uint32_t rank = in.get_u32();
    if (rank > 8) throw Error(ErrorCode::kCorruptFile, "implausible tensor rank for " + name);
    std::vector<std::size_t> shape(rank);
    for (auto& dim : shape) dim = in.get_u32();
    const std::size_t n = Tensor::count(shape);
    if (n * 4 > in.remaining()) throw Error(ErrorCode::kCorruptFile, "tensor " + name + " truncated");
    Tensor t(shape);
    in.get_f32_array(t.data);
    if (params.contains(name)) throw Error(ErrorCode::kCorruptFile, "duplicate tensor " + name);
    params.insert(name, std::move(t), trainable);
  }
  return params;
}

std::vector<std::uint8_t> serialize_model(const ParamSet& params, const ModelConfig& config) {
  ByteWriter out;
  out.put_raw(kModelMagic);
  out.put_string(config.to_json());
  write_param_records(out, params);
  return std::move(out).take();
}

std::pair<ParamSet, ModelConfig> deserialize_model(std::span<const std::uint8_t> bytes) {
  ByteReader in(bytes);
  if (bytes.size() < kModelMagic.size() || in.get_raw(kModelMagic.size()) != kModelMagic) {
    throw Error(ErrorCode::kCorruptFile, "bad model magic");
  }
  ModelConfig config = ModelConfig::from_json(in.get_string());
  ParamSet params = read_param_records(in);
  return {std::move(params), config};
}

void save_model(const std::string& path, const ParamSet& params, const ModelConfig& config) {
  write_file_bytes(path, serialize_model(params, config));
}

std::pair<ParamSet, ModelConfig> load_model(const std::string& path) {
  return deserialize_model(read_file_bytes(path));
}

}  // namespace fedchat::tinylm
