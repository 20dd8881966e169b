#include <cmath>
#include <cstdio>
#include <exception>
#include <sstream>
#include <thread>

#include "fedchat/bytes.hpp"
#include "fedchat/fedsim.hpp"
#include "fedchat/parallel.hpp"
#include "json.hpp"

namespace fedchat::fedsim {

using nlohmann::ordered_json;

std::string to_string(TransportMode mode) {
  switch (mode) {
    case TransportMode::kFull:
      return "full";
    case TransportMode::kDiff:
      return "diff";
    case TransportMode::kAdaptersOnly:
      return "adapters-only";
  }
  return "full";
}

TransportMode parse_transport_mode(const std::string& text) {
  if (text == "full") return TransportMode::kFull;
  if (text == "diff") return TransportMode::kDiff;
  if (text == "adapters-only" || text == "adapters") return TransportMode::kAdaptersOnly;
  throw Error(ErrorCode::kInvalidConfig, "unknown transport mode: " + text);
}

void RoundConfig::validate() const {
  if (num_clients < 1) throw Error(ErrorCode::kInvalidConfig, "num_clients must be >= 1");
  if (local_steps < 1) throw Error(ErrorCode::kInvalidConfig, "local_steps must be >= 1");
  if (!std::isfinite(lr) || lr < 0) throw Error(ErrorCode::kInvalidConfig, "lr must be finite and >= 0");
  if (quant_bits != 0 && quant_bits != 8) throw Error(ErrorCode::kInvalidConfig, "quant_bits must be none or 8");
  if (quant_bits != 0 && transport_mode == TransportMode::kDiff) {
    throw Error(ErrorCode::kInvalidConfig, "diff transport cannot be combined with quantization");
  }
  if (rounds < 0) throw Error(ErrorCode::kInvalidConfig, "rounds must be >= 0");
  if (eval_every < 1) throw Error(ErrorCode::kInvalidConfig, "eval_every must be >= 1");
  if (batch_size < 1 || seq_len < 1) throw Error(ErrorCode::kInvalidConfig, "batch_size and seq_len must be >= 1");
  if (!(tau >= 0)) throw Error(ErrorCode::kInvalidConfig, "tau must be >= 0");
  if (threads < 1) throw Error(ErrorCode::kInvalidConfig, "threads must be >= 1");
}

std::string RoundConfig::to_json() const {
  ordered_json j;
  j["num_clients"] = num_clients;
  j["local_steps"] = local_steps;
  j["lr"] = lr;
  j["transport_mode"] = fedsim::to_string(transport_mode);
  j["quant_bits"] = quant_bits == 0 ? ordered_json("none") : ordered_json(quant_bits);
  j["rounds"] = rounds;
  j["eval_every"] = eval_every;
  j["batch_size"] = batch_size;
  j["seq_len"] = seq_len;
  j["tau"] = tau;
  j["seed"] = seed;
  j["threads"] = threads;
  return j.dump(2);
}

RoundConfig RoundConfig::from_json(const std::string& text) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const std::exception& e) {
    throw Error(ErrorCode::kInvalidConfig, std::string("round config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw Error(ErrorCode::kInvalidConfig, "round config must be a JSON object");
  RoundConfig c;
  try {
    for (auto it = j.begin(); it != j.end(); ++it) {
      const std::string& key = it.key();
      const auto& v = it.value();
      if (key == "num_clients") c.num_clients = v.get<int>();
      else if (key == "local_steps") c.local_steps = v.get<int>();
      else if (key == "lr") c.lr = v.get<float>();
      else if (key == "transport_mode") c.transport_mode = parse_transport_mode(v.get<std::string>());
      else if (key == "quant_bits") {
        if (v.is_null() || (v.is_string() && v.get<std::string>() == "none")) c.quant_bits = 0;
        else c.quant_bits = v.get<int>();
      } else if (key == "rounds") c.rounds = v.get<int>();
      else if (key == "eval_every") c.eval_every = v.get<int>();
      else if (key == "batch_size") c.batch_size = v.get<int>();
      else if (key == "seq_len") c.seq_len = v.get<int>();
      else if (key == "tau") c.tau = v.get<float>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "threads") c.threads = v.get<int>();
      else throw Error(ErrorCode::kInvalidConfig, "unknown round config key: " + key);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kInvalidConfig, std::string("bad round config value: ") + e.what());
  }
  c.validate();
  return c;
}

RoundConfig load_round_config(const std::string& path) { return RoundConfig::from_json(read_file_text(path)); }

std::size_t TransportRecord::total_uplink() const {
  std::size_t n = 0;
  for (auto b : uplink_bytes) n += b;
  return n;
}

std::size_t TransportRecord::total_downlink() const {
  std::size_t n = 0;
  for (auto b : downlink_bytes) n += b;
  return n;
}

namespace {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t k) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (k + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

std::string fixed(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

RoundResult run_round(const ParamSet& global, const tinylm::ModelConfig& model_config,
                      std::vector<ClientState>& clients, const RoundConfig& config, int round) {
  config.validate();
  if (clients.empty()) throw Error(ErrorCode::kEmptyList, "a round needs at least one client");
  const peft::Checkpoint start = peft::checkpoint_save(global, static_cast<std::uint64_t>(round));

  const std::size_t k = clients.size();
  std::vector<ClientModel> received(k);
  std::vector<std::size_t> uplink(k);
  std::vector<double> losses(k);
  parallel_for(k, config.threads, [&](std::size_t i) {
    ClientUpdate upd = client_update(global, model_config, clients[i], config.lr, config.local_steps);
    const auto payload = encode_uplink(upd.params, start, config);
    uplink[i] = payload.size();
    received[i] = ClientModel{clients[i].client_id(), decode_uplink(payload, start, config)};
    losses[i] = upd.mean_loss;
  });

  RoundResult out;
  out.global = fedavg(received);
  const auto down = encode_downlink(out.global, start, config.transport_mode);
  out.transport.round = round;
  out.transport.mode = config.transport_mode;
  out.transport.quantized = config.quant_bits != 0;
  out.transport.uplink_bytes = std::move(uplink);
  out.transport.downlink_bytes.assign(k, down.size());
  out.client_losses = std::move(losses);
  return out;
}

std::vector<const HistoryRow*> RunHistory::global_rows() const {
  std::vector<const HistoryRow*> out;
  for (const auto& r : rows) {
    if (r.client_id == "global") out.push_back(&r);
  }
  return out;
}

std::string RunHistory::to_csv() const {
  std::string out = "round,client_id,loss,rouge1,rouge2,rougeL,bleu4,uplink_bytes,downlink_bytes\n";
  for (const auto& r : rows) {
    out += std::to_string(r.round) + "," + r.client_id + "," + fixed(r.loss) + ",";
    if (r.metrics) {
      out += fixed(r.metrics->rouge1) + "," + fixed(r.metrics->rouge2) + "," + fixed(r.metrics->rougeL) + "," +
             fixed(r.metrics->bleu4) + ",";
    } else {
      out += ",,,,";
    }
    out += std::to_string(r.uplink_bytes) + "," + std::to_string(r.downlink_bytes) + "\n";
  }
  return out;
}

void RunHistory::write_csv(const std::string& path) const { write_file_text(path, to_csv()); }

RunHistory RunHistory::from_csv(const std::string& text) {
  RunHistory h;
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line.rfind("round,client_id,loss", 0) != 0) {
    throw Error(ErrorCode::kCorruptFile, "history CSV header missing");
  }
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::size_t start = 0;
    while (true) {
      const std::size_t comma = line.find(',', start);
      f.push_back(line.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (f.size() != 9) throw Error(ErrorCode::kCorruptFile, "history row has " + std::to_string(f.size()) + " fields");
    try {
      HistoryRow r;
      r.round = std::stoi(f[0]);
      r.client_id = f[1];
      r.loss = std::stod(f[2]);
      if (!f[3].empty()) {
        evalmetrics::MetricsReport m;
        m.rouge1 = std::stod(f[3]);
        m.rouge2 = std::stod(f[4]);
        m.rougeL = std::stod(f[5]);
        m.bleu4 = std::stod(f[6]);
        r.metrics = m;
      }
      r.uplink_bytes = std::stoull(f[7]);
      r.downlink_bytes = std::stoull(f[8]);
      h.rows.push_back(std::move(r));
    } catch (const std::logic_error&) {
      throw Error(ErrorCode::kCorruptFile, "bad number in history row: " + line);
    }
  }
  return h;
}

double eval_loss(const ParamSet& params, const tinylm::ModelConfig& config, const std::vector<std::string>& documents,
                 int seq_len) {
  std::vector<std::vector<tinylm::TokenId>> windows;
  for (const auto& d : documents) {
    for (auto& w : document_windows(d, seq_len)) windows.push_back(std::move(w));
  }
  if (windows.empty()) throw Error(ErrorCode::kEmptyDataset, "no evaluation text");
  constexpr std::size_t kBatch = 8;
  double total = 0.0;
  double count = 0.0;
  for (std::size_t i = 0; i < windows.size(); i += kBatch) {
    std::vector<std::vector<tinylm::TokenId>> rows(
        windows.begin() + static_cast<std::ptrdiff_t>(i),
        windows.begin() + static_cast<std::ptrdiff_t>(std::min(i + kBatch, windows.size())));
    const auto batch = tinylm::make_batch(rows, static_cast<std::size_t>(seq_len));
    double n = 0.0;
    for (auto m : batch.loss_mask) n += m ? 1.0 : 0.0;
    total += tinylm::batch_loss(params, config, batch) * n;
    count += n;
  }
  return total / count;
}

TrainingResult run_training(const RoundConfig& config, const TrainingData& data, const ParamSet& base,
                            const tinylm::ModelConfig& model_config, const TrainingOptions& options) {
  config.validate();
  if (data.client_documents.size() != static_cast<std::size_t>(config.num_clients)) {
    throw Error(ErrorCode::kInvalidConfig, "expected one document shard per client");
  }
  if (config.seq_len > model_config.context_len) {
    throw Error(ErrorCode::kInvalidConfig, "seq_len exceeds the model context length");
  }
  if (data.eval_documents.empty()) throw Error(ErrorCode::kEmptyDataset, "no evaluation documents");

  std::vector<ClientState> clients;
  for (int k = 0; k < config.num_clients; ++k) {
    clients.emplace_back(k + 1, data.client_documents[static_cast<std::size_t>(k)], config.batch_size,
                         config.seq_len, mix_seed(config.seed, static_cast<std::uint64_t>(k)));
    if (clients.back().window_count() == 0) {
      throw Error(ErrorCode::kEmptyDataset, "client " + std::to_string(k + 1) + " has no training data");
    }
  }

  TrainingResult result;
  result.global = base;
  auto emit = [&](HistoryRow row) {
    if (options.on_row) options.on_row(row);
    result.history.rows.push_back(std::move(row));
  };
  auto global_row = [&](int round, std::size_t up, std::size_t down) {
    HistoryRow row;
    row.round = round;
    row.client_id = "global";
    row.loss = eval_loss(result.global, model_config, data.eval_documents, config.seq_len);
    if (!data.eval_pairs.empty()) {
      row.metrics = evalmetrics::evaluate_model(result.global, model_config, data.eval_pairs, options.eval);
    }
    row.uplink_bytes = up;
    row.downlink_bytes = down;
    emit(std::move(row));
  };

  global_row(0, 0, 0);
  std::size_t pending_up = 0;
  std::size_t pending_down = 0;
  for (int r = 1; r <= config.rounds; ++r) {
    RoundResult rr = run_round(result.global, model_config, clients, config, r);
    for (std::size_t i = 0; i < clients.size(); ++i) {
      HistoryRow row;
      row.round = r;
      row.client_id = std::to_string(clients[i].client_id());
      row.loss = rr.client_losses[i];
      row.uplink_bytes = rr.transport.uplink_bytes[i];
      row.downlink_bytes = rr.transport.downlink_bytes[i];
      emit(std::move(row));
    }
    pending_up += rr.transport.total_uplink();
    pending_down += rr.transport.total_downlink();
    result.global = std::move(rr.global);
    result.transport.push_back(std::move(rr.transport));
    if (r % config.eval_every == 0 || r == config.rounds) {
      global_row(r, pending_up, pending_down);
      pending_up = pending_down = 0;
    }
  }
  return result;
}

}  // namespace fedchat::fedsim
