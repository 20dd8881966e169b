#include <algorithm>
#include <cmath>
#include <random>

#include "fedchat/peft.hpp"

namespace fedchat::peft {

using tinylm::ModelConfig;

std::vector<std::string> default_lora_targets(const ModelConfig& config) {
  std::vector<std::string> out;
  for (int l = 0; l < config.n_layers; ++l) {
    for (const char* w : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"}) {
      out.push_back("blocks." + std::to_string(l) + "." + w);
    }
  }
  return out;
}

AdaptedModel attach_lora(const ParamSet& params, const ModelConfig& config, const std::vector<std::string>& targets,
                         int rank, std::optional<float> alpha, std::uint64_t seed) {
  if (rank < 1) throw Error(ErrorCode::kInvalidConfig, "LoRA rank must be >= 1");
  if (config.lora) throw Error(ErrorCode::kInvalidConfig, "model already carries LoRA adapters");
  for (const auto& t : targets) {
    if (!params.contains(t)) throw Error(ErrorCode::kUnknownTarget, t);
    if (params.at(t).rank() != 2) throw Error(ErrorCode::kNonMatrixTarget, t);
  }

  AdaptedModel out{params, config};
  out.params.set_all_trainable(false);
  out.config.lora = tinylm::LoraSpec{targets, rank, alpha.value_or(2.0f * static_cast<float>(rank))};

  std::mt19937_64 rng(seed);
  for (const auto& t : targets) {
    const auto& shape = params.at(t).shape;
    const std::size_t d_out = shape[0];
    const std::size_t d_in = shape[1];
    std::normal_distribution<float> normal(0.0f, 1.0f / std::sqrt(static_cast<float>(d_in)));
    Tensor a({static_cast<std::size_t>(rank), d_in});
    for (float& v : a.data) v = normal(rng);
    out.params.insert(t + ".lora_a", std::move(a), true);
    out.params.insert(t + ".lora_b", Tensor({d_out, static_cast<std::size_t>(rank)}), true);
  }
  return out;
}

AdaptedModel attach_prefix(const ParamSet& params, const ModelConfig& config, int prefix_len,
                           const PrefixOptions& options) {
  if (prefix_len < 1) throw Error(ErrorCode::kInvalidConfig, "prefix_len must be >= 1");
  if (config.prefix_len > 0) throw Error(ErrorCode::kInvalidConfig, "model already carries prefixes");

  AdaptedModel out{params, config};
  out.params.set_all_trainable(false);
  out.config.prefix_len = prefix_len;
  std::mt19937_64 rng(options.seed);
  std::normal_distribution<float> normal(0.0f, options.init_stddev > 0 ? options.init_stddev : 1.0f);
  const std::vector<std::size_t> shape = {static_cast<std::size_t>(prefix_len),
                                          static_cast<std::size_t>(config.d_model)};
  for (int l = 0; l < config.n_layers; ++l) {
    const std::string P = "blocks." + std::to_string(l) + ".attn.";
    for (const char* kind : {"prefix_k", "prefix_v"}) {
      Tensor t(shape);
      if (options.init_stddev > 0) {
        for (float& v : t.data) v = normal(rng);
      }
      out.params.insert(P + kind, std::move(t), true);
    }
  }
  return out;
}

ParamStats param_stats(const ParamSet& params) {
  ParamStats s;
  for (const auto& [name, e] : params) {
    s.total_params += e.tensor.numel();
    if (e.trainable) s.trainable_params += e.tensor.numel();
    const std::string suffix = ".lora_a";
    if (name.size() > suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0) {
      const std::string target = name.substr(0, name.size() - suffix.size());
      if (params.contains(target)) {
        const auto& w = params.at(target).shape;
        const std::size_t r = e.tensor.shape[0];
        if (r > std::min(w[0], w[1])) s.rank_not_reduced.push_back(target);
      }
    }
  }
  s.trainable_percent =
      s.total_params == 0 ? 0.0 : 100.0 * static_cast<double>(s.trainable_params) / static_cast<double>(s.total_params);
  s.model_bytes = 4 * s.total_params;
  s.trainable_bytes = 4 * s.trainable_params;
  return s;
}

}  // namespace fedchat::peft
