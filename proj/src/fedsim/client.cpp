#include <algorithm>
#include <numeric>

#include "fedchat/fedsim.hpp"
#include "fedchat/tokenizer.hpp"

namespace fedchat::fedsim {

using tinylm::TokenId;
using tinylm::Tokenizer;

namespace {

// Fisher-Yates with plain modulo draws, so the order depends only on the
// engine's output and not on the standard library's distributions.
template <class T>
void seeded_shuffle(std::vector<T>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace

std::vector<std::vector<TokenId>> document_windows(const std::string& text, int seq_len) {
  if (seq_len < 1) throw Error(ErrorCode::kInvalidArgument, "seq_len must be >= 1");
  const auto tokens = Tokenizer::tokenize(text, {.add_bos = true, .add_eos = true});
  const auto L = static_cast<std::size_t>(seq_len);
  std::vector<std::vector<TokenId>> out;
  for (std::size_t start = 0; start + 1 < tokens.size(); start += L) {
    const std::size_t end = std::min(start + L + 1, tokens.size());
    out.emplace_back(tokens.begin() + static_cast<std::ptrdiff_t>(start),
                     tokens.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

std::vector<std::vector<std::string>> partition_documents(const std::vector<std::string>& documents, int k,
                                                          std::uint64_t seed) {
  if (k < 1) throw Error(ErrorCode::kInvalidConfig, "need at least one client");
  std::vector<std::size_t> order(documents.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  seeded_shuffle(order, rng);
  std::vector<std::vector<std::string>> shards(static_cast<std::size_t>(k));
  const std::size_t n = documents.size();
  for (std::size_t s = 0; s < shards.size(); ++s) {
    const std::size_t begin = n * s / shards.size();
    const std::size_t end = n * (s + 1) / shards.size();
    for (std::size_t i = begin; i < end; ++i) shards[s].push_back(documents[order[i]]);
  }
  return shards;
}

ClientState::ClientState(int client_id, const std::vector<std::string>& documents, int batch_size, int seq_len,
                         std::uint64_t seed)
    : client_id_(client_id),
      batch_size_(static_cast<std::size_t>(batch_size)),
      seq_len_(static_cast<std::size_t>(seq_len)),
      rng_(seed) {
  if (batch_size < 1) throw Error(ErrorCode::kInvalidConfig, "batch_size must be >= 1");
  for (const auto& doc : documents) {
    for (auto& w : document_windows(doc, seq_len)) windows_.push_back(std::move(w));
  }
  order_.resize(windows_.size());
  reshuffle();
}

void ClientState::reshuffle() {
  std::iota(order_.begin(), order_.end(), 0);
  seeded_shuffle(order_, rng_);
  cursor_ = 0;
}

tinylm::TrainBatch ClientState::next_batch() {
  if (windows_.empty()) {
    throw Error(ErrorCode::kEmptyDataset, "client " + std::to_string(client_id_) + " has no training data");
  }
  std::vector<std::vector<TokenId>> rows;
  rows.reserve(batch_size_);
  while (rows.size() < batch_size_) {
    if (cursor_ == order_.size()) reshuffle();
    rows.push_back(windows_[order_[cursor_++]]);
  }
  return tinylm::make_batch(rows, seq_len_);
}

ClientUpdate client_update(const ParamSet& global, const tinylm::ModelConfig& config, ClientState& client, float lr,
                           int steps) {
  if (client.window_count() == 0) {
    throw Error(ErrorCode::kEmptyDataset, "client " + std::to_string(client.client_id()) + " has no training data");
  }
  ClientUpdate out{global, 0.0};
  for (int s = 0; s < steps; ++s) {
    const tinylm::TrainBatch batch = client.next_batch();
    auto lg = tinylm::loss_and_grad(out.params, config, batch);
    out.params = tinylm::sgd_step(out.params, lg.grads, lr);
    out.mean_loss += lg.loss;
  }
  if (steps > 0) out.mean_loss /= steps;
  return out;
}

ParamSet fedavg(std::vector<ClientModel> clients) {
  if (clients.empty()) throw Error(ErrorCode::kEmptyList, "fedavg needs at least one client");
  std::sort(clients.begin(), clients.end(),
            [](const ClientModel& a, const ClientModel& b) { return a.client_id < b.client_id; });
  for (std::size_t i = 1; i < clients.size(); ++i) {
    if (clients[i].client_id == clients[i - 1].client_id) {
      throw Error(ErrorCode::kInvalidArgument, "duplicate client id " + std::to_string(clients[i].client_id));
    }
    require_aligned(clients[0].params, clients[i].params, "fedavg: client parameter sets differ");
  }
  ParamSet out = clients[0].params;
  const auto k = static_cast<double>(clients.size());
  std::vector<double> acc;
  for (auto& [name, entry] : out) {
    // -0.0 is the exact additive identity, so identical inputs keep their sign bits.
    acc.assign(entry.tensor.numel(), -0.0);
    for (const auto& c : clients) {
      const auto& data = c.params.at(name).data;
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += static_cast<double>(data[i]);
    }
    for (std::size_t i = 0; i < acc.size(); ++i) entry.tensor.data[i] = static_cast<float>(acc[i] / k);
  }
  return out;
}

ParamSet pretrain(const ParamSet& init, const tinylm::ModelConfig& config, const std::vector<std::string>& documents,
                  const PretrainOptions& options) {
  ClientState stream(0, documents, options.batch_size, options.seq_len, options.seed);
  ParamSet params = init;
  const int chunk = std::max(1, options.log_every);
  for (int done = 0; done < options.steps;) {
    const int n = std::min(chunk, options.steps - done);
    ClientUpdate upd = client_update(params, config, stream, options.lr, n);
    params = std::move(upd.params);
    done += n;
    if (options.on_progress) options.on_progress(done, upd.mean_loss);
  }
  return params;
}

}  // namespace fedchat::fedsim
