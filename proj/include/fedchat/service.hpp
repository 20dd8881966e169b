#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "fedchat/ingest.hpp"
#include "fedchat/retrieval.hpp"

namespace httplib {
class Server;
}

namespace fedchat::service {

struct ContextFilter {
  std::string name;
  std::vector<std::string> keywords;
  bool operator==(const ContextFilter&) const = default;
};

struct ServiceConfig {
  std::string corpus_dir = "corpus";
  std::string model_path = "data/base/base_model.tlm";
  std::string index_path = "corpus/index.tvi";
  std::string listen_addr = "127.0.0.1:8080";
  int k_sources = 3;
  retrieval::Metric metric = retrieval::Metric::kCosine;
  std::vector<ContextFilter> context_filters;
  std::string history_path;  // optional RunHistory CSV served by /api/metrics
  double similarity_floor = 0.1;
  int threads = 8;  // HTTP worker threads

  void validate() const;
  std::string to_json() const;
  static ServiceConfig from_json(const std::string& text);
  bool operator==(const ServiceConfig&) const = default;
};

// Explicit path if given, else $FEDCHAT_CONFIG, else "fedchat.json".
std::string resolve_config_path(const std::optional<std::string>& explicit_path);
ServiceConfig load_service_config(const std::string& path);

// host:port; port 0 asks the OS for a free port.
std::pair<std::string, int> split_listen_addr(const std::string& addr);

struct Reply {
  int status = 200;
  std::string body;  // JSON
};

// Corpus and index published together; requests read one snapshot and keep it.
struct Snapshot {
  std::uint64_t version = 0;
  std::shared_ptr<const ingest::Corpus> corpus;
  std::shared_ptr<const retrieval::EmbeddingIndex> index;
};

constexpr std::size_t kMaxQuestionBytes = 4096;

class ChatService {
 public:
  explicit ChatService(ServiceConfig config);
  ~ChatService();
  ChatService(const ChatService&) = delete;
  ChatService& operator=(const ChatService&) = delete;

  // Loads the model and corpus, then loads the index or builds it. Readiness
  // flips only after this returns.
  void load();
  bool ready() const { return ready_.load(); }

  std::shared_ptr<const Snapshot> snapshot() const;

  Reply handle_ask(const std::string& body) const;
  Reply handle_ingest(const std::string& body);
  Reply handle_get_block(const std::string& block_id) const;
  Reply handle_health() const;
  Reply handle_metrics() const;
  Reply handle_contexts() const;

  // Binds listen_addr and serves on a background thread. Returns the bound port.
  int start();
  void stop();
  // start() + load(), then blocks until stop().
  void serve();

  const ServiceConfig& config() const { return config_; }

 private:
  void publish(std::shared_ptr<const ingest::Corpus> corpus, std::shared_ptr<const retrieval::EmbeddingIndex> index);

  ServiceConfig config_;
  ParamSet params_;
  tinylm::ModelConfig model_config_;
  std::atomic<bool> ready_{false};

  mutable std::mutex snapshot_mu_;
  std::shared_ptr<const Snapshot> snapshot_;
  std::mutex ingest_mu_;

  std::unique_ptr<httplib::Server> server_;
  std::thread server_thread_;
};

}  // namespace fedchat::service
