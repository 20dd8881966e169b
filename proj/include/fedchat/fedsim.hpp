#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "fedchat/metrics.hpp"
#include "fedchat/model.hpp"
#include "fedchat/peft.hpp"

namespace fedchat::fedsim {

enum class TransportMode { kFull, kDiff, kAdaptersOnly };

std::string to_string(TransportMode mode);
TransportMode parse_transport_mode(const std::string& text);

struct RoundConfig {
  int num_clients = 4;
  int local_steps = 20;
  float lr = 0.2f;
  TransportMode transport_mode = TransportMode::kFull;
  int quant_bits = 0;  // 0 means none
  int rounds = 5;
  int eval_every = 1;

  // Batching and reproducibility; not part of the aggregation rule.
  int batch_size = 4;
  int seq_len = 64;
  float tau = 0.0f;
  std::uint64_t seed = 0;
  int threads = 1;

  void validate() const;
  std::string to_json() const;
  static RoundConfig from_json(const std::string& text);
};

RoundConfig load_round_config(const std::string& path);

// One client's private shard, cut into fixed-length windows and served as
// batches in a seeded order that is reshuffled each pass.
class ClientState {
 public:
  ClientState(int client_id, const std::vector<std::string>& documents, int batch_size, int seq_len,
              std::uint64_t seed);

  int client_id() const { return client_id_; }
  std::size_t window_count() const { return windows_.size(); }
  tinylm::TrainBatch next_batch();

 private:
  void reshuffle();

  int client_id_;
  std::size_t batch_size_;
  std::size_t seq_len_;
  std::vector<std::vector<tinylm::TokenId>> windows_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::mt19937_64 rng_;
};

// Windows of seq_len + 1 tokens over BOS + text + EOS, stride seq_len.
std::vector<std::vector<tinylm::TokenId>> document_windows(const std::string& text, int seq_len);

// Seeded shuffle of the documents, then contiguous shards.
std::vector<std::vector<std::string>> partition_documents(const std::vector<std::string>& documents, int k,
                                                          std::uint64_t seed);

struct ClientUpdate {
  ParamSet params;
  double mean_loss = 0.0;  // training loss over the local steps, before each step
};

// `steps` sequential grad + sgd_step applications on the client's batches.
ClientUpdate client_update(const ParamSet& global, const tinylm::ModelConfig& config, ClientState& client, float lr,
                           int steps);

struct ClientModel {
  int client_id = 0;
  ParamSet params;
};

// Elementwise mean in 64-bit, accumulated in ascending client id order.
ParamSet fedavg(std::vector<ClientModel> clients);

struct QuantizedTensor {
  std::string name;
  bool trainable = false;
  std::vector<std::size_t> shape;
  float scale = 0.0f;
  std::int64_t zero_point = 0;
  std::vector<std::uint8_t> codes;
  float constant = 0.0f;  // the value of a constant tensor, for which scale is 0
};

struct QuantizedParams {
  std::vector<QuantizedTensor> tensors;
};

QuantizedParams quantize(const ParamSet& params, int bits = 8);
ParamSet dequantize(const QuantizedParams& q);

// "TLQ1", u32 count, then per tensor: name, u8 trainable, u32 rank, u32 dims,
// f32 scale, i64 zero_point, then numel code bytes (or one f32 when scale is 0).
std::vector<std::uint8_t> serialize_quantized(const QuantizedParams& q);
QuantizedParams deserialize_quantized(std::span<const std::uint8_t> bytes);

// Payload a client sends after local training, relative to the round's
// starting global. decode_uplink reconstructs the client's full parameter set.
std::vector<std::uint8_t> encode_uplink(const ParamSet& client, const peft::Checkpoint& round_start,
                                        const RoundConfig& config);
ParamSet decode_uplink(std::span<const std::uint8_t> payload, const peft::Checkpoint& round_start,
                       const RoundConfig& config);

// Payload the server broadcasts: the new global in the same transport mode,
// never quantized.
std::vector<std::uint8_t> encode_downlink(const ParamSet& new_global, const peft::Checkpoint& round_start,
                                          TransportMode mode);
ParamSet decode_downlink(std::span<const std::uint8_t> payload, const peft::Checkpoint& round_start,
                         TransportMode mode);

struct TransportRecord {
  int round = 0;
  std::vector<std::size_t> uplink_bytes;  // by client id
  std::vector<std::size_t> downlink_bytes;
  TransportMode mode = TransportMode::kFull;
  bool quantized = false;

  std::size_t total_uplink() const;
  std::size_t total_downlink() const;
};

struct RoundResult {
  ParamSet global;
  TransportRecord transport;
  std::vector<double> client_losses;  // by client id
};

RoundResult run_round(const ParamSet& global, const tinylm::ModelConfig& model_config,
                      std::vector<ClientState>& clients, const RoundConfig& config, int round);

struct HistoryRow {
  int round = 0;
  std::string client_id;  // "global" for aggregated rows
  double loss = 0.0;
  std::optional<evalmetrics::MetricsReport> metrics;
  std::size_t uplink_bytes = 0;
  std::size_t downlink_bytes = 0;
};

struct RunHistory {
  std::vector<HistoryRow> rows;

  std::vector<const HistoryRow*> global_rows() const;
  std::string to_csv() const;
  void write_csv(const std::string& path) const;
  static RunHistory from_csv(const std::string& text);
};

struct TrainingData {
  std::vector<std::vector<std::string>> client_documents;  // one shard per client
  std::vector<std::string> eval_documents;                // held out, for eval loss
  std::vector<evalmetrics::EvalPair> eval_pairs;           // may be empty
};

struct TrainingOptions {
  evalmetrics::EvalOptions eval;
  std::function<void(const HistoryRow&)> on_row;  // progress callback
};

struct TrainingResult {
  ParamSet global;
  RunHistory history;
  std::vector<TransportRecord> transport;
};

// Mean next-token loss over every window of the evaluation documents.
double eval_loss(const ParamSet& params, const tinylm::ModelConfig& config, const std::vector<std::string>& documents,
                 int seq_len);

TrainingResult run_training(const RoundConfig& config, const TrainingData& data, const ParamSet& base,
                            const tinylm::ModelConfig& model_config, const TrainingOptions& options = {});

struct PretrainOptions {
  int steps = 3000;
  float lr = 0.5f;
  int batch_size = 8;
  int seq_len = 64;
  std::uint64_t seed = 3;
  int log_every = 250;
  std::function<void(int step, double mean_loss)> on_progress;
};

// Centralized full-parameter SGD over a document set; produces a base model
// that federated fine-tuning starts from.
ParamSet pretrain(const ParamSet& init, const tinylm::ModelConfig& config, const std::vector<std::string>& documents,
                  const PretrainOptions& options = {});

}  // namespace fedchat::fedsim
