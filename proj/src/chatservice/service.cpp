#include "fedchat/service.hpp"

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <set>

#include "fedchat/bytes.hpp"
#include "fedchat/fedsim.hpp"
#include "httplib.h"
#include "json.hpp"

namespace fedchat::service {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

Reply json_reply(int status, const ordered_json& body) { return Reply{status, body.dump()}; }

Reply error_reply(int status, const std::string& message) {
  ordered_json j;
  j["error"] = message;
  return json_reply(status, j);
}

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& what) {
  if (!j.is_object()) throw Error(ErrorCode::kInvalidConfig, what + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (!allowed.count(key)) throw Error(ErrorCode::kInvalidConfig, "unknown " + what + " key: " + key);
  }
}

// Relative paths in a config file are resolved against the file's directory.
std::string rebase(const std::string& path, const std::filesystem::path& base) {
  if (path.empty() || std::filesystem::path(path).is_absolute()) return path;
  return (base / path).lexically_normal().string();
}

}  // namespace

void ServiceConfig::validate() const {
  if (k_sources < 1) throw Error(ErrorCode::kInvalidConfig, "k_sources must be at least 1");
  if (threads < 1) throw Error(ErrorCode::kInvalidConfig, "threads must be at least 1");
  if (corpus_dir.empty() || model_path.empty() || index_path.empty()) {
    throw Error(ErrorCode::kInvalidConfig, "corpus_dir, model_path and index_path are required");
  }
  split_listen_addr(listen_addr);
  std::set<std::string> names;
  for (const auto& c : context_filters) {
    if (c.name.empty() || !names.insert(c.name).second) {
      throw Error(ErrorCode::kInvalidConfig, "context filter names must be unique and nonempty");
    }
  }
}

std::string ServiceConfig::to_json() const {
  ordered_json j;
  j["corpus_dir"] = corpus_dir;
  j["model_path"] = model_path;
  j["index_path"] = index_path;
  j["listen_addr"] = listen_addr;
  j["k_sources"] = k_sources;
  j["metric"] = retrieval::to_string(metric);
  j["context_filters"] = ordered_json::array();
  for (const auto& c : context_filters) j["context_filters"].push_back({{"name", c.name}, {"keywords", c.keywords}});
  j["history_path"] = history_path;
  j["similarity_floor"] = similarity_floor;
  j["threads"] = threads;
  return j.dump(2);
}

ServiceConfig ServiceConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const std::exception& e) {
    throw Error(ErrorCode::kInvalidConfig, std::string("service config is not JSON: ") + e.what());
  }
  check_keys(j,
             {"corpus_dir", "model_path", "index_path", "listen_addr", "k_sources", "metric", "context_filters",
              "history_path", "similarity_floor", "threads"},
             "service config");
  ServiceConfig c;
  try {
    c.corpus_dir = j.value("corpus_dir", c.corpus_dir);
    c.model_path = j.value("model_path", c.model_path);
    c.index_path = j.value("index_path", c.index_path);
    c.listen_addr = j.value("listen_addr", c.listen_addr);
    c.k_sources = j.value("k_sources", c.k_sources);
    if (j.contains("metric")) c.metric = retrieval::parse_metric(j["metric"].get<std::string>());
    if (j.contains("context_filters")) {
      for (const auto& f : j["context_filters"]) {
        check_keys(f, {"name", "keywords"}, "context filter");
        c.context_filters.push_back(
            ContextFilter{f.at("name").get<std::string>(), f.at("keywords").get<std::vector<std::string>>()});
      }
    }
    c.history_path = j.value("history_path", c.history_path);
    c.similarity_floor = j.value("similarity_floor", c.similarity_floor);
    c.threads = j.value("threads", c.threads);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kInvalidConfig, std::string("bad service config value: ") + e.what());
  }
  c.validate();
  return c;
}

std::string resolve_config_path(const std::optional<std::string>& explicit_path) {
  if (explicit_path && !explicit_path->empty()) return *explicit_path;
  if (const char* env = std::getenv("FEDCHAT_CONFIG"); env && *env) return env;
  return "fedchat.json";
}

ServiceConfig load_service_config(const std::string& path) {
  if (!std::filesystem::exists(path)) throw Error(ErrorCode::kIoError, "config file not found: " + path);
  ServiceConfig c = ServiceConfig::from_json(read_file_text(path));
  const auto base = std::filesystem::absolute(path).parent_path();
  c.corpus_dir = rebase(c.corpus_dir, base);
  c.model_path = rebase(c.model_path, base);
  c.index_path = rebase(c.index_path, base);
  c.history_path = rebase(c.history_path, base);
  return c;
}

std::pair<std::string, int> split_listen_addr(const std::string& addr) {
  const auto colon = addr.rfind(':');
  if (colon == std::string::npos || colon == 0) throw Error(ErrorCode::kInvalidConfig, "listen_addr must be host:port");
  int port = -1;
  try {
    std::size_t used = 0;
    port = std::stoi(addr.substr(colon + 1), &used);
    if (used != addr.size() - colon - 1) port = -1;
  } catch (const std::exception&) {
    port = -1;
  }
  if (port < 0 || port > 65535) throw Error(ErrorCode::kInvalidConfig, "bad port in listen_addr: " + addr);
  return {addr.substr(0, colon), port};
}

ChatService::ChatService(ServiceConfig config) : config_(std::move(config)) {
  config_.validate();
  auto empty = std::make_shared<Snapshot>();
  empty->corpus = std::make_shared<ingest::Corpus>();
  empty->index = std::make_shared<retrieval::EmbeddingIndex>();
  snapshot_ = std::move(empty);
}

ChatService::~ChatService() { stop(); }

void ChatService::load() {
  auto [params, model_config] = tinylm::load_model(config_.model_path);
  params_ = std::move(params);
  model_config_ = model_config;

  auto corpus = std::make_shared<ingest::Corpus>();
  if (std::filesystem::exists(std::filesystem::path(config_.corpus_dir) / "corpus.jsonl")) {
    *corpus = ingest::load_corpus(config_.corpus_dir);
  }

  std::shared_ptr<retrieval::EmbeddingIndex> index;
  const std::uint64_t fp = retrieval::embedder_fingerprint(params_, model_config_);
  std::vector<std::string> ids;
  for (const auto& b : corpus->blocks) ids.push_back(b.block_id);
  if (std::filesystem::exists(config_.index_path)) {
    try {
      auto loaded = retrieval::load_index(config_.index_path);
      if (loaded.fingerprint == fp && loaded.block_ids == ids && loaded.metric == config_.metric) {
        index = std::make_shared<retrieval::EmbeddingIndex>(std::move(loaded));
      }
    } catch (const Error&) {
      // A stale or damaged index is rebuilt below.
    }
  }
  if (!index) {
    if (corpus->blocks.empty()) {
      index = std::make_shared<retrieval::EmbeddingIndex>();
      index->dim = static_cast<std::size_t>(model_config_.d_model);
      index->metric = config_.metric;
      index->fingerprint = fp;
    } else {
      retrieval::BuildOptions o;
      o.metric = config_.metric;
      index = std::make_shared<retrieval::EmbeddingIndex>(retrieval::build_index(*corpus, params_, model_config_, o));
      std::filesystem::create_directories(std::filesystem::absolute(config_.index_path).parent_path());
      retrieval::save_index(config_.index_path, *index);
    }
  }
  publish(std::move(corpus), std::move(index));
  ready_ = true;
}

std::shared_ptr<const Snapshot> ChatService::snapshot() const {
  std::lock_guard lock(snapshot_mu_);
  return snapshot_;
}

void ChatService::publish(std::shared_ptr<const ingest::Corpus> corpus,
                          std::shared_ptr<const retrieval::EmbeddingIndex> index) {
  auto next = std::make_shared<Snapshot>();
  next->corpus = std::move(corpus);
  next->index = std::move(index);
  std::lock_guard lock(snapshot_mu_);
  next->version = snapshot_->version + 1;
  snapshot_ = std::move(next);
}

Reply ChatService::handle_ask(const std::string& body) const {
  const auto started = std::chrono::steady_clock::now();
  if (!ready()) return error_reply(503, "index not ready");
  json req;
  try {
    req = json::parse(body);
  } catch (const std::exception&) {
    return error_reply(400, "request body is not JSON");
  }
  if (!req.is_object() || !req.contains("question") || !req["question"].is_string()) {
    return error_reply(400, "question is required");
  }
  const std::string question = req["question"].get<std::string>();
  if (question.find_first_not_of(" \t\r\n") == std::string::npos) return error_reply(400, "question is empty");
  if (question.size() > kMaxQuestionBytes) return error_reply(400, "question is longer than 4096 bytes");

  retrieval::AnswerOptions options;
  options.k = static_cast<std::size_t>(config_.k_sources);
  options.similarity_floor = config_.similarity_floor;
  if (req.contains("k") && !req["k"].is_null()) {
    if (!req["k"].is_number_integer() || req["k"].get<long long>() < 1 || req["k"].get<long long>() > 50) {
      return error_reply(400, "k must be an integer between 1 and 50");
    }
    options.k = req["k"].get<std::size_t>();
  }
  if (req.contains("context") && !req["context"].is_null()) {
    if (!req["context"].is_string()) return error_reply(400, "context must be a string");
    const std::string name = req["context"].get<std::string>();
    const ContextFilter* found = nullptr;
    for (const auto& c : config_.context_filters) {
      if (c.name == name) found = &c;
    }
    if (!found) return error_reply(404, "unknown context: " + name);
    options.keyword_filter = std::set<std::string>(found->keywords.begin(), found->keywords.end());
  }

  const auto snap = snapshot();
  const auto answer = retrieval::answer_question(params_, model_config_, question, *snap->index, *snap->corpus, options);

  ordered_json out;
  out["status"] = answer.status == retrieval::Answer::Status::kOk ? "ok" : "no_context";
  out["answer"] = answer.text;
  out["expanded_question"] = answer.expanded_question;
  out["sources"] = ordered_json::array();
  for (const auto& s : answer.sources) {
    const auto* b = snap->corpus->find_block(s.block_id);
    out["sources"].push_back({{"block_id", s.block_id}, {"header", b ? b->header : ""}, {"score", s.score}});
  }
  out["index_version"] = snap->version;
  out["latency_ms"] =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();
  return json_reply(200, out);
}

Reply ChatService::handle_ingest(const std::string& body) {
  if (!ready()) return error_reply(503, "index not ready");
  json req;
  try {
    req = json::parse(body);
  } catch (const std::exception&) {
    return error_reply(400, "request body is not JSON");
  }
  if (!req.is_object() || !req.contains("documents") || !req["documents"].is_array() || req["documents"].empty()) {
    return error_reply(400, "documents must be a nonempty array");
  }
  std::vector<ingest::RawDocument> docs;
  const std::string now = ingest::utc_now_iso8601();
  for (const auto& d : req["documents"]) {
    if (!d.is_object() || !d.contains("text") || !d["text"].is_string()) {
      return error_reply(400, "every document needs a text field");
    }
    const std::string uri = d.contains("source_uri") && d["source_uri"].is_string() ? d["source_uri"].get<std::string>()
                                                                                      : "api://ingest";
    try {
      docs.push_back(ingest::make_document(d["text"].get<std::string>(), uri, now));
    } catch (const Error& e) {
      return error_reply(400, e.what());
    }
  }

  std::lock_guard writer(ingest_mu_);
  const auto current = snapshot();
  auto next = std::make_shared<ingest::Corpus>(ingest::add_documents(*current->corpus, docs));
  std::set<std::string> before;
  for (const auto& b : current->corpus->blocks) before.insert(b.block_id);
  std::size_t added = 0;
  for (const auto& b : next->blocks) added += before.count(b.block_id) == 0;

  ordered_json out;
  if (next->documents.size() == current->corpus->documents.size()) {
    out["blocks_added"] = 0;
    out["index_version"] = current->version;
    return json_reply(200, out);
  }
  std::shared_ptr<retrieval::EmbeddingIndex> index;
  try {
    retrieval::BuildOptions o;
    o.metric = config_.metric;
    o.previous = current->index.get();
    index = std::make_shared<retrieval::EmbeddingIndex>(retrieval::build_index(*next, params_, model_config_, o));
    ingest::persist_corpus(*next, config_.corpus_dir);
    std::filesystem::create_directories(std::filesystem::absolute(config_.index_path).parent_path());
    retrieval::save_index(config_.index_path, *index);
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kIoError) return error_reply(507, e.what());
    return error_reply(500, e.what());
  } catch (const std::filesystem::filesystem_error& e) {
    return error_reply(507, e.what());
  }
  publish(next, index);
  out["blocks_added"] = added;
  out["index_version"] = snapshot()->version;
  return json_reply(200, out);
}

Reply ChatService::handle_get_block(const std::string& block_id) const {
  const auto snap = snapshot();
  const auto* b = snap->corpus->find_block(block_id);
  if (!b) return error_reply(404, "unknown block: " + block_id);
  auto j = ordered_json::parse(ingest::block_to_json(*b));
  for (const auto& d : snap->corpus->documents) {
    if (d.doc_id == b->doc_id) j["source_uri"] = d.source_uri;
  }
  return json_reply(200, j);
}

Reply ChatService::handle_health() const {
  ordered_json j;
  if (!ready()) {
    j["status"] = "loading";
    return json_reply(503, j);
  }
  const auto snap = snapshot();
  j["status"] = "ok";
  j["index_version"] = snap->version;
  j["blocks"] = snap->index->size();
  return json_reply(200, j);
}

Reply ChatService::handle_metrics() const {
  ordered_json out;
  out["rows"] = ordered_json::array();
  if (config_.history_path.empty() || !std::filesystem::exists(config_.history_path)) return json_reply(200, out);
  fedsim::RunHistory history;
  try {
    history = fedsim::RunHistory::from_csv(read_file_text(config_.history_path));
  } catch (const Error& e) {
    return error_reply(500, e.what());
  }
  for (const auto& r : history.rows) {
    ordered_json row;
    row["round"] = r.round;
    row["client_id"] = r.client_id;
    row["loss"] = r.loss;
    if (r.metrics) {
      row["rouge1"] = r.metrics->rouge1;
      row["rouge2"] = r.metrics->rouge2;
      row["rougeL"] = r.metrics->rougeL;
      row["bleu4"] = r.metrics->bleu4;
    } else {
      row["rouge1"] = row["rouge2"] = row["rougeL"] = row["bleu4"] = nullptr;
    }
    row["uplink_bytes"] = r.uplink_bytes;
    row["downlink_bytes"] = r.downlink_bytes;
    out["rows"].push_back(row);
  }
  return json_reply(200, out);
}

Reply ChatService::handle_contexts() const {
  ordered_json out;
  out["contexts"] = ordered_json::array();
  for (const auto& c : config_.context_filters) out["contexts"].push_back({{"name", c.name}, {"keywords", c.keywords}});
  return json_reply(200, out);
}

int ChatService::start() {
  if (server_) throw Error(ErrorCode::kInvalidArgument, "service already started");
  server_ = std::make_unique<httplib::Server>();
  const auto workers = static_cast<std::size_t>(config_.threads);
  server_->new_task_queue = [workers] { return new httplib::ThreadPool(workers); };

  auto send = [](httplib::Response& res, const Reply& r) {
    res.status = r.status;
    res.set_content(r.body, "application/json");
  };
  auto guarded = [send](auto fn) {
    return [send, fn](const httplib::Request& req, httplib::Response& res) {
      try {
        send(res, fn(req));
      } catch (const std::exception& e) {
        send(res, error_reply(500, e.what()));
      }
    };
  };
  server_->Post("/api/ask", guarded([this](const httplib::Request& req) { return handle_ask(req.body); }));
  server_->Post("/api/ingest", guarded([this](const httplib::Request& req) { return handle_ingest(req.body); }));
  server_->Get(R"(/api/blocks/([^/]+))",
               guarded([this](const httplib::Request& req) { return handle_get_block(req.matches[1].str()); }));
  server_->Get("/api/health", guarded([this](const httplib::Request&) { return handle_health(); }));
  server_->Get("/api/metrics", guarded([this](const httplib::Request&) { return handle_metrics(); }));
  server_->Get("/api/contexts", guarded([this](const httplib::Request&) { return handle_contexts(); }));

  const auto [host, port] = split_listen_addr(config_.listen_addr);
  const int bound = port == 0 ? server_->bind_to_any_port(host) : (server_->bind_to_port(host, port) ? port : -1);
  if (bound < 0) {
    server_.reset();
    throw Error(ErrorCode::kIoError, "cannot listen on " + config_.listen_addr);
  }
  server_thread_ = std::thread([this] { server_->listen_after_bind(); });
  return bound;
}

void ChatService::stop() {
  if (server_) server_->stop();
  if (server_thread_.joinable()) server_thread_.join();
  server_.reset();
}

void ChatService::serve() {
  start();
  try {
    load();
  } catch (...) {
    stop();
    throw;
  }
  if (server_thread_.joinable()) server_thread_.join();
}

}  // namespace fedchat::service
