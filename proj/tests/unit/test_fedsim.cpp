#include <doctest.h>

#include <cmath>
#include <cstring>
#include <random>
#include <set>

#include "fedchat/fedsim.hpp"
#include "test_support.hpp"

using namespace fedchat;
using namespace fedchat::fedsim;

namespace {

std::vector<std::string> toy_documents(std::size_t n, std::uint64_t seed) {
  static const char* words[] = {"the", "river", "town", "salt", "bridge", "market", "festival", "mayor", "stone"};
  std::mt19937_64 rng(seed);
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::string doc;
    const std::size_t len = 8 + rng() % 20;
    for (std::size_t w = 0; w < len; ++w) {
      if (w) doc += ' ';
      doc += words[rng() % 9];
    }
    out.push_back(doc + ".");
  }
  return out;
}

ParamSet random_params(std::mt19937_64& rng, const std::vector<std::vector<std::size_t>>& shapes) {
  std::normal_distribution<float> n(0.0f, 1.0f);
  ParamSet p;
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    Tensor t(shapes[i]);
    for (float& v : t.data) v = n(rng);
    p.insert("t" + std::to_string(i), std::move(t), true);
  }
  return p;
}

RoundConfig small_round(TransportMode mode) {
  RoundConfig rc;
  rc.num_clients = 4;
  rc.local_steps = 2;
  rc.lr = 0.1f;
  rc.transport_mode = mode;
  rc.rounds = 3;
  rc.batch_size = 2;
  rc.seq_len = 12;
  rc.seed = 5;
  return rc;
}

}  // namespace

TEST_CASE("document windows and partition") {
  const auto w = document_windows("abcdefghij", 4);
  // BOS + 10 bytes + EOS = 12 tokens, stride 4 -> starts 0,4,8
  REQUIRE(w.size() == 3);
  CHECK(w[0].size() == 5);
  CHECK(w[0][0] == tinylm::Tokenizer::kBos);
  CHECK(w[2].back() == tinylm::Tokenizer::kEos);
  CHECK(document_windows("", 4).size() == 1);

  const auto docs = toy_documents(10, 1);
  const auto shards = partition_documents(docs, 3, 9);
  std::multiset<std::string> all;
  for (const auto& s : shards) {
    CHECK(s.size() >= 3);
    all.insert(s.begin(), s.end());
  }
  CHECK(all == std::multiset<std::string>(docs.begin(), docs.end()));
  CHECK(partition_documents(docs, 3, 9) == shards);
}

TEST_CASE("client_update composition") {
  const auto c = testing::tiny_config();
  const ParamSet theta = init_params(c);
  const auto docs = toy_documents(6, 2);
  ClientState client(1, docs, 2, 12, 77);

  SUBCASE("zero learning rate leaves parameters unchanged") {
    ClientState copy = client;
    CHECK(bitwise_equal(client_update(theta, c, copy, 0.0f, 3).params, theta));
  }
  SUBCASE("one step equals sgd_step of the first batch") {
    ClientState a = client;
    ClientState b = client;
    const auto got = client_update(theta, c, a, 0.1f, 1).params;
    const auto want = tinylm::sgd_step(theta, tinylm::grad(theta, c, b.next_batch()), 0.1f);
    CHECK(bitwise_equal(got, want));
  }
  SUBCASE("three steps equal a scripted loop") {
    ClientState a = client;
    ClientState b = client;
    const auto got = client_update(theta, c, a, 0.1f, 3).params;
    ParamSet want = theta;
    for (int i = 0; i < 3; ++i) want = tinylm::sgd_step(want, tinylm::grad(want, c, b.next_batch()), 0.1f);
    CHECK(bitwise_equal(got, want));
  }
  CHECK_THROWS_AS(ClientState(2, {}, 2, 12, 1).next_batch(), Error);
}

TEST_CASE("fedavg algebra") {
  Tensor a({2}), b({2});
  a.data = {1.0f, 2.0f};
  b.data = {3.0f, 4.0f};
  ParamSet pa, pb;
  pa.insert("w", a, true);
  pb.insert("w", b, true);
  const ParamSet m = fedavg({{1, pa}, {2, pb}});
  CHECK(m.at("w").data == std::vector<float>{2.0f, 3.0f});

  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    const ParamSet p = random_params(rng, {{3, 4}, {5}, {2, 2}});
    std::vector<ClientModel> same;
    for (int k = 1; k <= 1 + trial % 6; ++k) same.push_back({k, p});
    CHECK(bitwise_equal(fedavg(same), p));

    std::vector<ClientModel> mixed;
    for (int k = 1; k <= 5; ++k) mixed.push_back({k, random_params(rng, {{3, 4}, {5}, {2, 2}})});
    const ParamSet ref = fedavg(mixed);
    std::shuffle(mixed.begin(), mixed.end(), rng);
    CHECK(bitwise_equal(fedavg(mixed), ref));
  }

  ParamSet z;
  Tensor nz({1});
  nz.data = {-0.0f};
  z.insert("w", nz, true);
  CHECK(std::signbit(fedavg({{1, z}, {2, z}}).at("w").data[0]));

  CHECK_THROWS_AS(fedavg({}), Error);
  ParamSet other;
  other.insert("v", a, true);
  CHECK_THROWS_AS(fedavg({{1, pa}, {2, other}}), Error);
  CHECK_THROWS_AS(fedavg({{1, pa}, {1, pb}}), Error);
}

TEST_CASE("single-client full transport round equals centralized training") {
  const auto c = testing::tiny_config();
  const ParamSet theta = init_params(c);
  RoundConfig rc = small_round(TransportMode::kFull);
  rc.num_clients = 1;
  std::vector<ClientState> clients{ClientState(1, toy_documents(5, 3), 2, 12, 4)};
  ClientState copy = clients[0];
  const auto rr = run_round(theta, c, clients, rc, 1);
  CHECK(bitwise_equal(rr.global, client_update(theta, c, copy, rc.lr, rc.local_steps).params));
}

TEST_CASE("quantization bounds") {
  ParamSet p;
  Tensor k({3});
  k.data = {5.0f, 5.0f, 5.0f};
  p.insert("const", k, true);
  Tensor pm({2});
  pm.data = {-1.0f, 1.0f};
  p.insert("pm", pm, false);
  const auto q = quantize(p);
  const ParamSet back = dequantize(deserialize_quantized(serialize_quantized(q)));
  CHECK(back.at("const").data == k.data);
  CHECK_FALSE(back.trainable("pm"));
  const auto& t = q.tensors[1];
  CHECK(t.scale == static_cast<float>(2.0 / 255.0));
  for (std::size_t i = 0; i < 2; ++i) CHECK(std::abs(back.at("pm").data[i] - pm.data[i]) <= 1.0 / 255.0);

  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 400; ++trial) {
    std::uniform_real_distribution<float> u(-3.0f, 3.0f);
    Tensor r({1 + rng() % 200});
    // Large offsets with a narrow spread put float32 rounding close to scale/2.
    const float offset = u(rng) * 10.0f;
    const float spread = trial % 2 ? 1.0f : 0.01f + std::abs(u(rng));
    for (float& v : r.data) v = offset + spread * u(rng);
    ParamSet one;
    one.insert("r", r, true);
    const auto qq = quantize(one);
    const ParamSet d = dequantize(qq);
    const double half = static_cast<double>(qq.tensors[0].scale) / 2.0;
    for (std::size_t i = 0; i < r.data.size(); ++i) {
      REQUIRE(std::abs(static_cast<double>(d.at("r").data[i]) - static_cast<double>(r.data[i])) <= half);
    }
  }

  Tensor bad({1});
  bad.data = {std::nanf("")};
  ParamSet pb;
  pb.insert("bad", bad, true);
  try {
    quantize(pb);
    FAIL("expected NonFiniteValue");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kNonFiniteValue);
  }
}

TEST_CASE("lossless transport modes agree bitwise and the ledger is exact") {
  const auto c = testing::tiny_config();
  const auto adapted = peft::attach_lora(init_params(c), c, peft::default_lora_targets(c), 2);
  const auto docs = toy_documents(16, 6);

  std::vector<ParamSet> finals;
  std::vector<std::size_t> uplinks;
  for (TransportMode mode : {TransportMode::kFull, TransportMode::kDiff, TransportMode::kAdaptersOnly}) {
    const RoundConfig rc = small_round(mode);
    TrainingData data;
    data.client_documents = partition_documents(docs, rc.num_clients, 1);
    data.eval_documents = {docs[0]};
    const auto result = run_training(rc, data, adapted.params, adapted.config);
    finals.push_back(result.global);
    std::size_t up = 0;
    for (const auto& t : result.transport) up += t.total_uplink();
    uplinks.push_back(up);
  }
  CHECK(bitwise_equal(finals[0], finals[1]));
  CHECK(bitwise_equal(finals[0], finals[2]));
  CHECK(uplinks[1] < uplinks[0]);
  CHECK(uplinks[2] < uplinks[0]);

  // Recorded bytes are the payload sizes.
  RoundConfig rc = small_round(TransportMode::kDiff);
  std::vector<ClientState> clients;
  for (int k = 0; k < 4; ++k) clients.emplace_back(k + 1, partition_documents(docs, 4, 1)[k], 2, 12, k);
  std::vector<ClientState> replay = clients;
  const auto rr = run_round(adapted.params, adapted.config, clients, rc, 1);
  const auto start = peft::checkpoint_save(adapted.params, 1);
  for (std::size_t k = 0; k < 4; ++k) {
    const auto upd = client_update(adapted.params, adapted.config, replay[k], rc.lr, rc.local_steps);
    CHECK(rr.transport.uplink_bytes[k] == encode_uplink(upd.params, start, rc).size());
  }
  const auto down = encode_downlink(rr.global, start, TransportMode::kDiff);
  CHECK(rr.transport.downlink_bytes[0] == down.size());
  CHECK(bitwise_equal(decode_downlink(down, start, TransportMode::kDiff), rr.global));

  // No learning: the diff payload is the bare 20-byte header.
  rc.lr = 0.0f;
  const auto idle = run_round(adapted.params, adapted.config, clients, rc, 2);
  for (auto b : idle.transport.uplink_bytes) CHECK(b == 20);
  CHECK(bitwise_equal(idle.global, adapted.params));
}

TEST_CASE("quantized transport stays within half a step of exact fedavg") {
  const auto c = testing::tiny_config();
  const ParamSet theta = init_params(c);
  const auto docs = toy_documents(12, 8);
  RoundConfig exact = small_round(TransportMode::kFull);
  RoundConfig quant = exact;
  quant.quant_bits = 8;
  std::vector<ClientState> a, b;
  for (int k = 0; k < 4; ++k) {
    a.emplace_back(k + 1, partition_documents(docs, 4, 2)[k], 2, 12, k);
    b.push_back(a.back());
  }
  std::vector<ClientState> replay = a;
  const auto re = run_round(theta, c, a, exact, 1);
  const auto rq = run_round(theta, c, b, quant, 1);

  double max_half_scale = 0.0;
  for (std::size_t k = 0; k < 4; ++k) {
    const auto upd = client_update(theta, c, replay[k], exact.lr, exact.local_steps);
    for (const auto& t : quantize(upd.params).tensors) max_half_scale = std::max(max_half_scale, t.scale / 2.0);
  }
  double worst = 0.0;
  for (const auto& [name, e] : re.global) {
    for (std::size_t i = 0; i < e.tensor.data.size(); ++i) {
      worst = std::max(worst, std::abs(double(e.tensor.data[i]) - double(rq.global.at(name).data[i])));
    }
  }
  CHECK(worst <= max_half_scale);
  CHECK(rq.transport.total_uplink() < re.transport.total_uplink() / 3);

  RoundConfig bad = exact;
  bad.transport_mode = TransportMode::kDiff;
  bad.quant_bits = 8;
  CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("run_training history") {
  const auto c = testing::tiny_config();
  const ParamSet theta = init_params(c);
  const auto docs = toy_documents(12, 10);
  RoundConfig rc = small_round(TransportMode::kFull);
  rc.rounds = 0;
  TrainingData data;
  data.client_documents = partition_documents(docs, 4, 3);
  data.eval_documents = {docs[0], docs[1]};
  data.eval_pairs = {{"the river", "town"}};

  const auto zero = run_training(rc, data, theta, c);
  REQUIRE(zero.history.rows.size() == 1);
  CHECK(zero.history.rows[0].client_id == "global");
  CHECK(zero.history.rows[0].metrics.has_value());

  rc.rounds = 2;
  const auto a = run_training(rc, data, theta, c);
  const auto b = run_training(rc, data, theta, c);
  CHECK(a.history.to_csv() == b.history.to_csv());
  CHECK(a.history.rows.size() == 1 + 2 * 5);
  CHECK(a.history.global_rows().size() == 3);

  const std::string csv = a.history.to_csv();
  CHECK(csv.rfind("round,client_id,loss,rouge1,rouge2,rougeL,bleu4,uplink_bytes,downlink_bytes\n", 0) == 0);
  CHECK(RunHistory::from_csv(csv).to_csv() == csv);

  rc.threads = 3;
  CHECK(run_training(rc, data, theta, c).history.to_csv() == csv);
}

TEST_CASE("round config file") {
  RoundConfig rc;
  rc.transport_mode = TransportMode::kAdaptersOnly;
  rc.quant_bits = 8;
  const RoundConfig back = RoundConfig::from_json(rc.to_json());
  CHECK(back.transport_mode == TransportMode::kAdaptersOnly);
  CHECK(back.quant_bits == 8);
  CHECK(back.to_json() == rc.to_json());
  CHECK(RoundConfig::from_json(R"({"quant_bits": "none", "transport_mode": "diff"})").quant_bits == 0);
  CHECK_THROWS_AS(RoundConfig::from_json(R"({"num_client": 4})"), Error);
  CHECK_THROWS_AS(RoundConfig::from_json(R"({"local_steps": 0})"), Error);
  CHECK_THROWS_AS(RoundConfig::from_json("not json"), Error);
}
