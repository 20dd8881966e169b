#include "fedchat/experiment.hpp"

#include <algorithm>
#include <filesystem>
#include <sstream>

#include "fedchat/bytes.hpp"
#include "json.hpp"

namespace fedchat::experiment {

std::vector<std::string> load_text_dir(const std::string& dir) {
  if (!std::filesystem::is_directory(dir)) throw Error(ErrorCode::kIoError, "not a directory: " + dir);
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::recursive_directory_iterator(dir)) {
    const auto ext = e.path().extension().string();
    if (e.is_regular_file() && (ext == ".md" || ext == ".txt")) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<std::string> out;
  for (const auto& f : files) out.push_back(read_file_text(f.string()));
  return out;
}

std::vector<evalmetrics::EvalPair> load_eval_pairs(const std::string& path) {
  std::istringstream in(read_file_text(path));
  std::vector<evalmetrics::EvalPair> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      out.push_back({j.at("prompt").get<std::string>(), j.at("reference").get<std::string>()});
    } catch (const std::exception& e) {
      throw Error(ErrorCode::kCorruptFile, "bad eval pair in " + path + ": " + e.what());
    }
  }
  return out;
}

Split holdout_split(const std::vector<std::string>& documents, std::size_t modulus, std::size_t residue) {
  Split s;
  for (std::size_t i = 0; i < documents.size(); ++i) {
    (modulus > 0 && i % modulus == residue ? s.eval : s.train).push_back(documents[i]);
  }
  return s;
}

TuneMode parse_tune_mode(const std::string& s) {
  if (s == "lora") return TuneMode::kLora;
  if (s == "prefix") return TuneMode::kPrefix;
  if (s == "full") return TuneMode::kFull;
  throw Error(ErrorCode::kInvalidConfig, "unknown tuning mode: " + s);
}

std::string to_string(TuneMode m) {
  switch (m) {
    case TuneMode::kLora:
      return "lora";
    case TuneMode::kPrefix:
      return "prefix";
    case TuneMode::kFull:
      return "full";
  }
  return "?";
}

peft::AdaptedModel prepare_model(const ParamSet& base, const tinylm::ModelConfig& config, const TrainSpec& spec) {
  switch (spec.mode) {
    case TuneMode::kLora:
      return peft::attach_lora(base, config, peft::default_lora_targets(config), spec.lora_rank, spec.lora_alpha,
                               spec.adapter_seed);
    case TuneMode::kPrefix: {
      peft::PrefixOptions o;
      o.seed = spec.adapter_seed;
      return peft::attach_prefix(base, config, spec.prefix_len, o);
    }
    case TuneMode::kFull:
      break;
  }
  peft::AdaptedModel m{base, config};
  m.params.set_all_trainable(true);
  return m;
}

fedsim::TrainingData make_training_data(const std::vector<std::string>& documents,
                                        const std::vector<evalmetrics::EvalPair>& eval_pairs, int clients,
                                        std::uint64_t partition_seed) {
  const Split split = holdout_split(documents);
  fedsim::TrainingData d;
  d.client_documents = fedsim::partition_documents(split.train, clients, partition_seed);
  d.eval_documents = split.eval;
  d.eval_pairs = eval_pairs;
  return d;
}

}  // namespace fedchat::experiment
