#include <doctest.h>

#include <cstdlib>
#include <future>

#include "fedchat/bytes.hpp"
#include "fedchat/fedsim.hpp"
#include "fedchat/service.hpp"
#include "httplib.h"
#include "json.hpp"
#include "test_support.hpp"

using namespace fedchat;
using namespace fedchat::service;
using nlohmann::json;

namespace {

struct Fixture {
  testing::TempDir dir{"service"};
  ServiceConfig config;

  Fixture() {
    auto c = testing::tiny_config(3);
    c.context_len = 48;
    tinylm::save_model((dir.path() / "model.tlm").string(), init_params(c), c);
    ingest::Corpus corpus = ingest::add_documents(
        {}, {ingest::make_document("# Salt\n\nSalt pans lie east of the harbor.\n\nSalt is traded in spring.",
                                   "mem://salt", "2024-01-01T00:00:00Z"),
             ingest::make_document("The mill grinds rye for the valley.", "mem://mill", "2024-01-01T00:00:00Z")});
    ingest::persist_corpus(corpus, (dir.path() / "corpus").string());
    config.corpus_dir = (dir.path() / "corpus").string();
    config.model_path = (dir.path() / "model.tlm").string();
    config.index_path = (dir.path() / "corpus" / "index.tvi").string();
    config.listen_addr = "127.0.0.1:0";
    config.k_sources = 2;
    config.context_filters = {{"milling", {"rye", "mill"}}};
    config.history_path = (dir.path() / "history.csv").string();
    config.threads = 4;
    config.similarity_floor = -1.0;  // an untrained model gives arbitrary similarities
  }
};

json body(const httplib::Result& r) { return json::parse(r->body); }

}  // namespace

TEST_CASE("service config parsing") {
  const auto c = ServiceConfig::from_json(
      R"({"corpus_dir":"c","model_path":"m.tlm","index_path":"i.tvi","listen_addr":"0.0.0.0:9000","k_sources":4,)"
      R"("metric":"euclidean","context_filters":[{"name":"rivers","keywords":["river"]}]})");
  CHECK(c.k_sources == 4);
  CHECK(c.metric == retrieval::Metric::kEuclidean);
  CHECK(c.context_filters.size() == 1);
  CHECK(ServiceConfig::from_json(c.to_json()) == c);
  CHECK(split_listen_addr("127.0.0.1:8080") == std::pair<std::string, int>{"127.0.0.1", 8080});

  for (const char* bad : {R"({"k_sources":0})", R"({"unknown":1})", R"({"listen_addr":"nope"})",
                          R"({"metric":"manhattan"})", R"({"context_filters":[{"name":"a","keywords":[]},{"name":"a","keywords":[]}]})",
                          "not json"}) {
    CHECK(testing::error_code_of([&] { ServiceConfig::from_json(bad); }) == ErrorCode::kInvalidConfig);
  }

  CHECK(resolve_config_path(std::string("given.json")) == "given.json");
  ::setenv("FEDCHAT_CONFIG", "/tmp/from-env.json", 1);
  CHECK(resolve_config_path(std::nullopt) == "/tmp/from-env.json");
  ::unsetenv("FEDCHAT_CONFIG");
  CHECK(resolve_config_path(std::nullopt) == "fedchat.json");

  testing::TempDir dir("cfg");
  write_file_text((dir.path() / "svc.json").string(), R"({"corpus_dir":"data/corpus","model_path":"/abs/m.tlm"})");
  const auto loaded = load_service_config((dir.path() / "svc.json").string());
  CHECK(loaded.corpus_dir == (dir.path() / "data/corpus").string());
  CHECK(loaded.model_path == "/abs/m.tlm");
}

TEST_CASE("service endpoints") {
  Fixture f;
  fedsim::RunHistory h;
  h.rows.push_back({0, "global", 5.5, std::nullopt, 0, 0});
  h.rows.push_back({1, "client-1", 4.0, std::nullopt, 100, 0});
  h.write_csv(f.config.history_path);

  ChatService svc(f.config);
  const int port = svc.start();
  httplib::Client cli("127.0.0.1", port);
  cli.set_read_timeout(60);

  auto health = cli.Get("/api/health");
  REQUIRE(health);
  CHECK(health->status == 503);
  CHECK(cli.Post("/api/ask", R"({"question":"salt?"})", "application/json")->status == 503);

  svc.load();
  health = cli.Get("/api/health");
  CHECK(health->status == 200);
  CHECK(body(health)["status"] == "ok");
  const auto v0 = body(health)["index_version"].get<std::uint64_t>();
  CHECK(std::filesystem::exists(f.config.index_path));

  auto ask = cli.Post("/api/ask", R"({"question":"Where is salt traded?"})", "application/json");
  REQUIRE(ask);
  CHECK(ask->status == 200);
  const auto a = body(ask);
  CHECK(a["status"] == "ok");
  CHECK(a["sources"].size() == 2);
  for (const auto& s : a["sources"]) {
    CHECK(s.contains("block_id"));
    CHECK(s.contains("header"));
    CHECK(s["score"].is_number());
  }
  CHECK(a["answer"].is_string());
  CHECK(a["expanded_question"].get<std::string>().rfind("Where is salt traded?", 0) == 0);
  CHECK(a["latency_ms"].is_number());

  CHECK(cli.Post("/api/ask", R"({"question":""})", "application/json")->status == 400);
  CHECK(cli.Post("/api/ask", R"({"question":"   "})", "application/json")->status == 400);
  CHECK(cli.Post("/api/ask", json{{"question", std::string(4097, 'a')}}.dump(), "application/json")->status == 400);
  CHECK(cli.Post("/api/ask", "{", "application/json")->status == 400);
  CHECK(cli.Post("/api/ask", R"({"question":"x","context":"nope"})", "application/json")->status == 404);
  CHECK(cli.Post("/api/ask", R"({"question":"x","k":0})", "application/json")->status == 400);

  auto ctx = cli.Post("/api/ask", R"({"question":"what about grain","context":"milling","k":3})", "application/json");
  REQUIRE(ctx->status == 200);
  const auto ca = body(ctx);
  REQUIRE(ca["sources"].size() == 1);
  CHECK(ca["sources"][0]["header"] == "The mill grinds rye for the valley.");

  const std::string two = R"({"documents":[{"source_uri":"mem://new","text":"Ferries cross at night.\n\nBoats dock at dawn."}]})";
  auto ing = cli.Post("/api/ingest", two, "application/json");
  REQUIRE(ing->status == 200);
  CHECK(body(ing)["blocks_added"] == 2);
  const auto v1 = body(ing)["index_version"].get<std::uint64_t>();
  CHECK(v1 > v0);
  auto again = cli.Post("/api/ingest", two, "application/json");
  CHECK(body(again)["blocks_added"] == 0);
  CHECK(body(again)["index_version"] == v1);
  CHECK(cli.Post("/api/ingest", R"({"documents":[]})", "application/json")->status == 400);
  CHECK(cli.Post("/api/ingest", R"({"documents":[{"source_uri":"x"}]})", "application/json")->status == 400);
  CHECK(ingest::load_corpus(f.config.corpus_dir).blocks.size() == 5);

  const auto snap = svc.snapshot();
  for (const auto& b : snap->corpus->blocks) {
    auto got = cli.Get("/api/blocks/" + b.block_id);
    REQUIRE(got->status == 200);
    const auto j = body(got);
    CHECK(j["block_id"] == b.block_id);
    CHECK(j["metadata"]["keywords"] == b.metadata.keywords);
    const auto span = j["byte_span"];
    for (const auto& d : snap->corpus->documents) {
      if (d.doc_id != b.doc_id) continue;
      CHECK(d.text.substr(span[0].get<std::size_t>(), span[1].get<std::size_t>() - span[0].get<std::size_t>()) ==
            j["text"].get<std::string>());
      CHECK(j["source_uri"] == d.source_uri);
    }
  }
  CHECK(cli.Get("/api/blocks/blk-unknown")->status == 404);

  const auto metrics = body(cli.Get("/api/metrics"));
  REQUIRE(metrics["rows"].size() == 2);
  CHECK(metrics["rows"][1]["client_id"] == "client-1");
  CHECK(metrics["rows"][1]["uplink_bytes"] == 100);
  CHECK(metrics["rows"][0]["rouge1"].is_null());
  const auto contexts = body(cli.Get("/api/contexts"));
  CHECK(contexts["contexts"][0]["name"] == "milling");

  svc.stop();

  // A restarted service reuses the saved index.
  ChatService restarted(f.config);
  restarted.load();
  CHECK(restarted.snapshot()->corpus->blocks.size() == 5);
  CHECK(*restarted.snapshot()->index == *snap->index);
}

TEST_CASE("asks during an ingest see one consistent snapshot") {
  Fixture f;
  ChatService svc(f.config);
  const int port = svc.start();
  svc.load();
  const auto v0 = svc.snapshot()->version;

  std::vector<std::future<json>> asks;
  std::future<json> ingest_done;
  for (int i = 0; i < 12; ++i) {
    if (i == 4) {
      ingest_done = std::async(std::launch::async, [port] {
        httplib::Client cli("127.0.0.1", port);
        cli.set_read_timeout(60);
        return json::parse(cli.Post("/api/ingest", R"({"documents":[{"text":"Bells ring at noon.\n\nThe tower is old."}]})",
                                    "application/json")
                               ->body);
      });
    }
    asks.push_back(std::async(std::launch::async, [port, i] {
      httplib::Client cli("127.0.0.1", port);
      cli.set_read_timeout(60);
      auto r = cli.Post("/api/ask", json{{"question", "question " + std::to_string(i)}}.dump(), "application/json");
      return r && r->status == 200 ? json::parse(r->body) : json();
    }));
  }
  const auto v1 = ingest_done.get()["index_version"].get<std::uint64_t>();
  CHECK(v1 == v0 + 1);
  const auto final_corpus = svc.snapshot()->corpus;
  for (auto& a : asks) {
    const json r = a.get();
    REQUIRE(r.is_object());
    const auto v = r["index_version"].get<std::uint64_t>();
    CHECK((v == v0 || v == v1));
    for (const auto& s : r["sources"]) CHECK(final_corpus->find_block(s["block_id"]) != nullptr);
  }
  svc.stop();
}
