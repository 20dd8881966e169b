// fedchat command line: corpus ingestion, federated training, evaluation,
// indexing and the chat service.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>

#include "CLI11.hpp"
#include "fedchat/bytes.hpp"
#include "fedchat/experiment.hpp"
#include "fedchat/service.hpp"
#include "json.hpp"

using namespace fedchat;

namespace {

constexpr int kUsageError = 2;

std::string default_data(const std::string& rel) { return (std::filesystem::path("data") / rel).string(); }

int cmd_ingest(const std::string& source, const std::string& corpus_dir, const std::string& fetched_at,
               int qa_per_block, const std::string& model_path) {
  ingest::IngestOptions opts;
  if (!fetched_at.empty()) opts.fetched_at = fetched_at;
  const auto docs = ingest::read_sources(source, opts);
  ingest::Corpus existing;
  if (std::filesystem::exists(std::filesystem::path(corpus_dir) / "corpus.jsonl")) {
    existing = ingest::load_corpus(corpus_dir);
  }
  ingest::Corpus corpus = ingest::add_documents(existing, docs);
  if (qa_per_block > 0) {
    const auto [params, config] = tinylm::load_model(model_path);
    const auto stats = ingest::build_stats(corpus.blocks);
    const auto role = ingest::default_qa_role();
    std::set<std::string> done;
    for (const auto& q : corpus.qa_pairs) done.insert(q.block_id);
    for (const auto& b : corpus.blocks) {
      if (done.count(b.block_id)) continue;
      for (auto& q : ingest::generate_qa(params, config, b, role, qa_per_block, &stats)) {
        corpus.qa_pairs.push_back(std::move(q));
      }
    }
  }
  ingest::persist_corpus(corpus, corpus_dir);
  std::printf("documents %zu (+%zu)  blocks %zu (+%zu)  qa pairs %zu -> %s\n", corpus.documents.size(),
              corpus.documents.size() - existing.documents.size(), corpus.blocks.size(),
              corpus.blocks.size() - existing.blocks.size(), corpus.qa_pairs.size(), corpus_dir.c_str());
  return 0;
}

struct TrainArgs {
  std::string config_path;
  int clients = 4;
  int rounds = 5;
  int steps = 20;
  float lr = 0.2f;
  std::string mode = "lora";
  std::string transport = "full";
  std::string quant = "none";
  int rank = 4;
  int prefix_len = 8;
  int threads = 1;
  std::uint64_t seed = 0;
  std::string docs = default_data("seed/docs");
  std::string eval_pairs = default_data("seed/eval_pairs.jsonl");
  std::string base = default_data("base/base_model.tlm");
  std::string out = "model.tlm";
  std::string history = "history.csv";
};

int cmd_train(const TrainArgs& a, const CLI::App& sub) {
  fedsim::RoundConfig rc;
  if (!a.config_path.empty()) rc = fedsim::load_round_config(a.config_path);
  // Flags given explicitly override the config file.
  auto given = [&](const char* name) { return sub.count(name) > 0 || a.config_path.empty(); };
  if (given("--clients")) rc.num_clients = a.clients;
  if (given("--rounds")) rc.rounds = a.rounds;
  if (given("--steps")) rc.local_steps = a.steps;
  if (given("--lr")) rc.lr = a.lr;
  if (given("--transport")) rc.transport_mode = fedsim::parse_transport_mode(a.transport);
  if (given("--quant")) rc.quant_bits = a.quant == "none" ? 0 : std::stoi(a.quant);
  if (given("--threads")) rc.threads = a.threads;
  if (given("--seed")) rc.seed = a.seed;
  rc.validate();

  experiment::TrainSpec spec;
  spec.mode = experiment::parse_tune_mode(a.mode);
  spec.lora_rank = a.rank;
  spec.lora_alpha = 2.0f * static_cast<float>(a.rank);
  spec.prefix_len = a.prefix_len;

  const auto [base, base_config] = tinylm::load_model(a.base);
  const auto model = experiment::prepare_model(base, base_config, spec);
  const auto stats = peft::param_stats(model.params);
  std::printf("mode %s  trainable %zu / %zu (%.3f%%)  transport %s\n", a.mode.c_str(), stats.trainable_params,
              stats.total_params, stats.trainable_percent, fedsim::to_string(rc.transport_mode).c_str());

  std::vector<evalmetrics::EvalPair> pairs;
  if (!a.eval_pairs.empty() && std::filesystem::exists(a.eval_pairs)) pairs = experiment::load_eval_pairs(a.eval_pairs);
  const auto data = experiment::make_training_data(experiment::load_text_dir(a.docs), pairs, rc.num_clients,
                                                   spec.partition_seed);

  fedsim::TrainingOptions opts;
  opts.on_row = [](const fedsim::HistoryRow& r) {
    if (r.client_id != "global") return;
    std::printf("round %d  eval loss %.4f", r.round, r.loss);
    if (r.metrics) std::printf("  rouge1 %.4f  bleu4 %.4f", r.metrics->rouge1, r.metrics->bleu4);
    std::printf("  uplink %zu B\n", r.uplink_bytes);
    std::fflush(stdout);
  };
  const auto result = fedsim::run_training(rc, data, model.params, model.config, opts);
  tinylm::save_model(a.out, result.global, model.config);
  result.history.write_csv(a.history);
  std::printf("model -> %s\nhistory -> %s\n", a.out.c_str(), a.history.c_str());
  return 0;
}

int cmd_eval(const std::vector<std::string>& model_paths, const std::string& pairs_path, const std::string& docs) {
  const auto pairs = experiment::load_eval_pairs(pairs_path);
  std::vector<std::string> held;
  if (!docs.empty()) held = experiment::holdout_split(experiment::load_text_dir(docs)).eval;
  std::vector<std::pair<std::string, evalmetrics::MetricsReport>> columns;
  for (const auto& path : model_paths) {
    const auto [params, config] = tinylm::load_model(path);
    columns.emplace_back(std::filesystem::path(path).filename().string(), evalmetrics::evaluate_model(params, config, pairs));
    if (!held.empty()) std::printf("%s held-out loss %.4f\n", path.c_str(), fedsim::eval_loss(params, config, held, 64));
  }
  evalmetrics::print_metrics_table(std::cout, columns);
  return 0;
}

int cmd_pretrain(const std::string& docs, const std::string& out, int steps, float lr, const std::string& eval_docs) {
  tinylm::ModelConfig config;
  const auto documents = experiment::load_text_dir(docs);
  std::vector<std::string> held;
  if (!eval_docs.empty()) held = experiment::holdout_split(experiment::load_text_dir(eval_docs)).eval;
  fedsim::PretrainOptions o;
  o.steps = steps;
  o.lr = lr;
  const auto started = std::chrono::steady_clock::now();
  const ParamSet init = tinylm::init_params(config);
  ParamSet trained;
  o.on_progress = [&](int step, double loss) {
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    std::printf("step %d  train loss %.4f  %.0fs\n", step, loss, secs);
    std::fflush(stdout);
  };
  trained = fedsim::pretrain(init, config, documents, o);
  if (!held.empty()) std::printf("held-out loss %.4f\n", fedsim::eval_loss(trained, config, held, 64));
  tinylm::save_model(out, trained, config);
  std::printf("model -> %s\n", out.c_str());
  return 0;
}

service::ServiceConfig service_config(const std::string& path_flag) {
  const std::string path = service::resolve_config_path(path_flag.empty() ? std::nullopt : std::optional(path_flag));
  if (!std::filesystem::exists(path) && path_flag.empty() && !std::getenv("FEDCHAT_CONFIG")) {
    return service::ServiceConfig{};
  }
  return service::load_service_config(path);
}

int cmd_index(const std::string& config_path) {
  const auto cfg = service_config(config_path);
  const auto [params, config] = tinylm::load_model(cfg.model_path);
  const auto corpus = ingest::load_corpus(cfg.corpus_dir);
  retrieval::BuildOptions o;
  o.metric = cfg.metric;
  const auto index = retrieval::build_index(corpus, params, config, o);
  retrieval::save_index(cfg.index_path, index);
  std::printf("indexed %zu blocks (d=%zu, %s) -> %s\n", index.size(), index.dim, retrieval::to_string(index.metric).c_str(),
              cfg.index_path.c_str());
  return 0;
}

int cmd_serve(const std::string& config_path) {
  service::ChatService svc(service_config(config_path));
  std::printf("listening on %s\n", svc.config().listen_addr.c_str());
  std::fflush(stdout);
  svc.serve();
  return 0;
}

int cmd_ask(const std::string& config_path, const std::string& question, int k, const std::string& context) {
  service::ChatService svc(service_config(config_path));
  svc.load();
  nlohmann::json req{{"question", question}};
  if (k > 0) req["k"] = k;
  if (!context.empty()) req["context"] = context;
  const auto reply = svc.handle_ask(req.dump());
  const auto j = nlohmann::json::parse(reply.body);
  if (reply.status != 200) {
    std::fprintf(stderr, "error %d: %s\n", reply.status, j.value("error", "").c_str());
    return 1;
  }
  if (j["status"] == "no_context") {
    std::printf("no relevant block found\n");
    return 0;
  }
  std::printf("answer: %s\nexpanded: %s\nsources:\n", j["answer"].get<std::string>().c_str(),
              j["expanded_question"].get<std::string>().c_str());
  for (const auto& s : j["sources"]) {
    std::printf("  %s  %.4f  %s\n", s["block_id"].get<std::string>().c_str(), s["score"].get<double>(),
                s["header"].get<std::string>().c_str());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fedchat: federated fine-tuning and retrieval chat"};
  app.require_subcommand(1);

  std::string source, corpus_dir = "corpus", fetched_at, qa_model = default_data("base/base_model.tlm");
  int qa = 0;
  auto* ingest_cmd = app.add_subcommand("ingest", "Build or extend a corpus from documents");
  ingest_cmd->add_option("source", source, "Directory of documents, a single file, or a .urls list")->required();
  ingest_cmd->add_option("--corpus", corpus_dir, "Corpus directory")->capture_default_str();
  ingest_cmd->add_option("--fetched-at", fetched_at, "Fixed UTC timestamp for reproducible corpora");
  ingest_cmd->add_option("--qa", qa, "Generated question/answer pairs per new block")->capture_default_str();
  ingest_cmd->add_option("--model", qa_model, "Model used for question generation")->capture_default_str();

  TrainArgs t;
  auto* train_cmd = app.add_subcommand("train", "Run a federated fine-tuning simulation");
  train_cmd->add_option("--config", t.config_path, "RoundConfig JSON file");
  train_cmd->add_option("--clients", t.clients)->capture_default_str();
  train_cmd->add_option("--rounds", t.rounds)->capture_default_str();
  train_cmd->add_option("--steps", t.steps, "Local steps per round")->capture_default_str();
  train_cmd->add_option("--lr", t.lr)->capture_default_str();
  train_cmd->add_option("--mode", t.mode)->check(CLI::IsMember({"lora", "prefix", "full"}))->capture_default_str();
  train_cmd->add_option("--transport", t.transport)
      ->check(CLI::IsMember({"full", "diff", "adapters", "adapters-only"}))
      ->capture_default_str();
  train_cmd->add_option("--quant", t.quant)->check(CLI::IsMember({"none", "8"}))->capture_default_str();
  train_cmd->add_option("--rank", t.rank, "LoRA rank")->capture_default_str();
  train_cmd->add_option("--prefix-len", t.prefix_len)->capture_default_str();
  train_cmd->add_option("--threads", t.threads)->capture_default_str();
  train_cmd->add_option("--seed", t.seed)->capture_default_str();
  train_cmd->add_option("--docs", t.docs)->capture_default_str();
  train_cmd->add_option("--eval-pairs", t.eval_pairs)->capture_default_str();
  train_cmd->add_option("--base", t.base, "Base model")->capture_default_str();
  train_cmd->add_option("--out", t.out)->capture_default_str();
  train_cmd->add_option("--history", t.history)->capture_default_str();

  std::vector<std::string> eval_model;
  std::string eval_pairs = default_data("seed/eval_pairs.jsonl"), eval_docs;
  auto* eval_cmd = app.add_subcommand("eval", "Score a model on prompt/reference pairs");
  eval_cmd->add_option("--model", eval_model, "One or more model files")->required();
  eval_cmd->add_option("--pairs", eval_pairs)->capture_default_str();
  eval_cmd->add_option("--docs", eval_docs, "Also report loss on the held-out documents of this directory");

  std::string config_path;
  auto* index_cmd = app.add_subcommand("index", "Build the embedding index for the configured corpus");
  auto* serve_cmd = app.add_subcommand("serve", "Run the HTTP service");
  std::string question, context;
  int k = 0;
  auto* ask_cmd = app.add_subcommand("ask", "Answer one question and print its sources");
  ask_cmd->add_option("question", question)->required();
  ask_cmd->add_option("--k", k, "Number of sources");
  ask_cmd->add_option("--context", context, "Named context filter");
  for (auto* c : {index_cmd, serve_cmd, ask_cmd}) {
    c->add_option("--config", config_path, "Service config (default $FEDCHAT_CONFIG or fedchat.json)");
  }

  std::string pre_docs = default_data("base/docs"), pre_out = default_data("base/base_model.tlm"), pre_eval;
  int pre_steps = 3000;
  float pre_lr = 0.5f;
  auto* pretrain_cmd = app.add_subcommand("pretrain", "Train the base model on the generic corpus");
  pretrain_cmd->add_option("--docs", pre_docs)->capture_default_str();
  pretrain_cmd->add_option("--out", pre_out)->capture_default_str();
  pretrain_cmd->add_option("--steps", pre_steps)->capture_default_str();
  pretrain_cmd->add_option("--lr", pre_lr)->capture_default_str();
  pretrain_cmd->add_option("--eval-docs", pre_eval, "Report loss on the held-out documents of this directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help();
    return kUsageError;
  }

  try {
    if (*ingest_cmd) return cmd_ingest(source, corpus_dir, fetched_at, qa, qa_model);
    if (*train_cmd) return cmd_train(t, *train_cmd);
    if (*eval_cmd) return cmd_eval(eval_model, eval_pairs, eval_docs);
    if (*index_cmd) return cmd_index(config_path);
    if (*serve_cmd) return cmd_serve(config_path);
    if (*ask_cmd) return cmd_ask(config_path, question, k, context);
    if (*pretrain_cmd) return cmd_pretrain(pre_docs, pre_out, pre_steps, pre_lr, pre_eval);
  } catch (const std::exception& e) {
    std::cerr << "fedchat: " << e.what() << "\n";
    return 1;
  }
  return kUsageError;
}
