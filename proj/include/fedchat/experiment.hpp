#pragma once

// Shared setup for the train/eval/pretrain entry points: document loading,
// the held-out split and adapter attachment.

#include <string>
#include <vector>

#include "fedchat/fedsim.hpp"
#include "fedchat/metrics.hpp"
#include "fedchat/peft.hpp"

namespace fedchat::experiment {

// Contents of every .md/.txt file under dir, in sorted path order.
std::vector<std::string> load_text_dir(const std::string& dir);

// JSON lines of {"prompt": ..., "reference": ...}.
std::vector<evalmetrics::EvalPair> load_eval_pairs(const std::string& path);

struct Split {
  std::vector<std::string> train;
  std::vector<std::string> eval;
};

// Document i is held out when i % modulus == residue.
Split holdout_split(const std::vector<std::string>& documents, std::size_t modulus = 17, std::size_t residue = 5);

enum class TuneMode { kLora, kPrefix, kFull };
TuneMode parse_tune_mode(const std::string& s);
std::string to_string(TuneMode m);

struct TrainSpec {
  TuneMode mode = TuneMode::kLora;
  int lora_rank = 4;
  float lora_alpha = 8.0f;
  int prefix_len = 8;
  std::uint64_t adapter_seed = 1;
  std::uint64_t partition_seed = 1;
};

peft::AdaptedModel prepare_model(const ParamSet& base, const tinylm::ModelConfig& config, const TrainSpec& spec);

// Client shards and held-out documents for a federated run.
fedsim::TrainingData make_training_data(const std::vector<std::string>& documents,
                                        const std::vector<evalmetrics::EvalPair>& eval_pairs, int clients,
                                        std::uint64_t partition_seed);

}  // namespace fedchat::experiment
