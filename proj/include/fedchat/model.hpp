#pragma once

// Small decoder-only transformer (pre-LN, GPT-2 layout) with exact
// backpropagation. Weights are stored [out, in]; linear layers compute
// y = x W^T + b. LoRA adapters and attention prefixes are picked up from the
// config when present.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fedchat/bytes.hpp"
#include "fedchat/tensor.hpp"
#include "fedchat/tokenizer.hpp"

namespace fedchat::tinylm {

struct LoraSpec {
  std::vector<std::string> targets;
  int rank = 4;
  float alpha = 8.0f;

  float scale() const { return alpha / static_cast<float>(rank); }
  bool operator==(const LoraSpec&) const = default;
};

struct ModelConfig {
  int n_layers = 2;
  int d_model = 64;
  int n_heads = 4;
  int d_ff = 256;
  int context_len = 128;
  int vocab_size = Tokenizer::kVocabSize;
  std::uint64_t seed = 0;

  std::optional<LoraSpec> lora;
  int prefix_len = 0;

  int head_dim() const { return d_model / n_heads; }
  void validate() const;

  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);

  bool operator==(const ModelConfig&) const = default;
};

struct TokenMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<TokenId> ids;

  TokenMatrix() = default;
  TokenMatrix(std::size_t r, std::size_t c, TokenId fill = Tokenizer::kPad)
      : rows(r), cols(c), ids(r * c, fill) {}

  TokenId& at(std::size_t r, std::size_t c) { return ids[r * cols + c]; }
  TokenId at(std::size_t r, std::size_t c) const { return ids[r * cols + c]; }

  static TokenMatrix row(const std::vector<TokenId>& tokens);
};

struct TrainBatch {
  TokenMatrix inputs;
  TokenMatrix targets;
  std::vector<std::uint8_t> loss_mask;  // rows * cols, nonzero = counted

  std::size_t rows() const { return inputs.rows; }
  std::size_t cols() const { return inputs.cols; }
};

// Builds a batch from token sequences: inputs = seq[0..n-1], targets =
// seq[1..n], padded to the longest row. Sequences longer than max_len + 1 are
// an error.
TrainBatch make_batch(const std::vector<std::vector<TokenId>>& sequences, std::size_t max_len);

template <class Real>
struct BasicLogits {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::size_t vocab = 0;
  std::vector<Real> data;

  const Real* row(std::size_t b, std::size_t t) const { return data.data() + (b * seq + t) * vocab; }
};

using Logits = BasicLogits<float>;

ParamSet init_params(const ModelConfig& config);

template <class Real>
BasicLogits<Real> forward(const BasicParamSet<Real>& params, const ModelConfig& config,
                          const TokenMatrix& inputs);

// Mean masked cross-entropy in nats, accumulated in double.
template <class Real>
double loss(const BasicLogits<Real>& logits, const TrainBatch& batch);

template <class Real>
struct LossAndGrad {
  double loss = 0.0;
  BasicParamSet<Real> grads;
};

// Gradients are aligned with params; entries with trainable == false are zero.
template <class Real>
LossAndGrad<Real> loss_and_grad(const BasicParamSet<Real>& params, const ModelConfig& config,
                                const TrainBatch& batch);

template <class Real>
BasicParamSet<Real> grad(const BasicParamSet<Real>& params, const ModelConfig& config,
                         const TrainBatch& batch) {
  return loss_and_grad(params, config, batch).grads;
}

template <class Real>
double batch_loss(const BasicParamSet<Real>& params, const ModelConfig& config, const TrainBatch& batch) {
  return loss(forward(params, config, batch.inputs), batch);
}

ParamSet sgd_step(const ParamSet& params, const ParamSet& grads, float lr);

struct GenerateOptions {
  enum class Mode { kGreedy, kTopK };
  Mode mode = Mode::kGreedy;
  int top_k = 8;
  std::uint64_t seed = 0;
  bool stop_at_newline = false;
};

std::string generate(const ParamSet& params, const ModelConfig& config, const std::string& prompt,
                     int max_new, const GenerateOptions& options = {});

// Final-layer (post ln_f) states, one row of d_model per input position.
std::vector<std::vector<float>> final_hidden_states(const ParamSet& params, const ModelConfig& config,
                                                    const std::vector<TokenId>& tokens);

// Mean of final-layer states over all byte positions. Text longer than
// context_len is processed in consecutive windows and the mean is taken over
// every position of every window.
std::vector<float> embed_text(const ParamSet& params, const ModelConfig& config, const std::string& text);

// Model file ("TLM1").
std::vector<std::uint8_t> serialize_model(const ParamSet& params, const ModelConfig& config);
std::pair<ParamSet, ModelConfig> deserialize_model(std::span<const std::uint8_t> bytes);
void save_model(const std::string& path, const ParamSet& params, const ModelConfig& config);
std::pair<ParamSet, ModelConfig> load_model(const std::string& path);

// Parameter records only (no magic/config); used for hashing and transport.
void write_param_records(ByteWriter& out, const ParamSet& params);
ParamSet read_param_records(ByteReader& in);

}  // namespace fedchat::tinylm
