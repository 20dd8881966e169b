#include <doctest.h>

#include <cmath>
#include <fstream>
#include <random>
#include <set>

#include "fedchat/bytes.hpp"
#include "fedchat/ingest.hpp"
#include "test_support.hpp"

using namespace fedchat;
using namespace fedchat::ingest;

namespace {

const std::string kSeedDocs = std::string(FEDCHAT_DATA_DIR) + "/seed/docs";

RawDocument doc(const std::string& text) { return make_document(text, "mem://test", "2024-01-01T00:00:00Z"); }

std::string random_text(std::mt19937_64& rng) {
  static const char* pieces[] = {"alpha", "beta", "Żółw", "naïve", "\"quoted\"", "back\\slash", "tab\there",
                                 "line\nbreak", "東京", "{brace}", "emoji 🚲", "x"};
  std::string out;
  const std::size_t n = 1 + rng() % 12;
  for (std::size_t i = 0; i < n; ++i) {
    if (i) out += ' ';
    out += pieces[rng() % 12];
  }
  return out;
}

tinylm::ModelConfig role_config() {
  auto c = testing::tiny_config(11);
  c.context_len = 96;
  return c;
}

RolePromptSet small_role() {
  return RolePromptSet{"qa",
                       {{"The mill grinds rye.", "What does the mill grind?"},
                        {"The bridge is made of stone.", "What is the bridge made of?"},
                        {"Salt is sold at the market.", "Where is salt sold?"}}};
}

}  // namespace

TEST_CASE("parse_blocks basic cases") {
  CHECK(parse_blocks(doc("")).empty());
  CHECK(parse_blocks(doc("\n\n  \n")).empty());

  const auto two = parse_blocks(doc("First paragraph here.\n\nSecond one follows."));
  REQUIRE(two.size() == 2);
  CHECK(two[0].seq == 0);
  CHECK(two[1].seq == 1);
  CHECK(two[0].text == "First paragraph here.");
  CHECK(two[1].text == "Second one follows.");

  const auto titled = parse_blocks(doc("# Title\n\nThe body text of the document."));
  REQUIRE(titled.size() == 1);
  CHECK(titled[0].header == "Title");
  CHECK(titled[0].text == "# Title\n\nThe body text of the document.");

  const auto inline_title = parse_blocks(doc("## Harbor\nShips dock here every spring."));
  REQUIRE(inline_title.size() == 1);
  CHECK(inline_title[0].header == "Harbor");

  CHECK(block_header("Short heading line\nrest of it.") == "Short heading line");
  CHECK(block_header("This sentence ends with a period and has more than eight words in it.") ==
        "This sentence ends with a period and has");

  CHECK(testing::error_code_of([] { parse_blocks(RawDocument{"d", "u", "t", std::string("bad \xff byte")}); }) ==
        ErrorCode::kInvalidEncoding);
  CHECK(testing::error_code_of([] { make_document("\xc0\xaf", "u", "t"); }) == ErrorCode::kInvalidEncoding);
}

TEST_CASE("TF-IDF keywords match a hand-computed table") {
  // Three single-paragraph documents. Hand table (N = 3):
  //   df: salt 2, mill 2, harbor 1, bridge 1
  //   idf: ln(4/3)+1 = 1.2876821, ln(4/2)+1 = 1.6931472
  //   d1 salt: (1+ln 2)*1.2876821 = 2.1802, harbor: 1.6931
  //   d2 salt = mill = 1.2877, tie broken lexicographically
  //   d3 bridge: (1+ln 3)*1.6931472 = 3.5533, mill: 1.2877
  std::vector<Block> blocks;
  for (const char* t : {"salt salt harbor", "salt mill", "mill bridge bridge bridge"}) {
    for (auto& b : parse_blocks(doc(t))) blocks.push_back(b);
  }
  const auto stats = build_stats(blocks);
  CHECK(stats.block_count == 3);
  CHECK(stats.idf("salt") == doctest::Approx(1.2876820724517808).epsilon(1e-12));
  CHECK(stats.idf("bridge") == doctest::Approx(1.6931471805599454).epsilon(1e-12));
  CHECK(stats.idf("unseen") == doctest::Approx(std::log(4.0) + 1.0).epsilon(1e-12));

  CHECK(enrich_metadata(blocks[0], stats, "").metadata.keywords == std::vector<std::string>{"salt", "harbor"});
  CHECK(enrich_metadata(blocks[1], stats, "").metadata.keywords == std::vector<std::string>{"mill", "salt"});
  CHECK(enrich_metadata(blocks[2], stats, "").metadata.keywords == std::vector<std::string>{"bridge", "mill"});

  // Single-block corpus: idf is constant, so keywords are the top-5 by tf.
  const auto one = parse_blocks(doc("zeta zeta zeta eta eta theta iota kappa lambda mu"));
  const auto one_stats = build_stats(one);
  CHECK(enrich_metadata(one[0], one_stats, "").metadata.keywords ==
        std::vector<std::string>{"zeta", "eta", "iota", "kappa", "lambda"});

  // Boilerplate shared by every document loses to distinctive terms.
  std::vector<Block> shared;
  for (const char* t : {"common footer text river", "common footer text harbor", "common footer text valley"}) {
    for (auto& b : parse_blocks(doc(t))) shared.push_back(b);
  }
  const auto shared_stats = build_stats(shared);
  CHECK(extract_keywords(shared[0].text, shared_stats, 1) == std::vector<std::string>{"river"});
  CHECK(extract_keywords("the and of", shared_stats).empty());
}

TEST_CASE("char_count counts code points and created_at follows the document") {
  const auto b = parse_blocks(make_document("Żółw 東京", "u", "2024-05-05T00:00:00Z"));
  REQUIRE(b.size() == 1);
  CHECK(b[0].metadata.char_count == 7);
  CHECK(b[0].metadata.created_at == "2024-05-05T00:00:00Z");
}

TEST_CASE("span fidelity and id uniqueness over the seed documents") {
  const auto docs = read_sources(kSeedDocs, {.fetched_at = std::string("2024-01-01T00:00:00Z")});
  REQUIRE(docs.size() > 50);
  std::set<std::string> ids;
  std::size_t blocks = 0;
  for (const auto& d : docs) {
    const auto parsed = parse_blocks(d);
    for (std::size_t i = 0; i < parsed.size(); ++i) {
      const auto& b = parsed[i];
      CHECK(b.seq == i);
      CHECK(d.text.substr(b.span_start, b.span_end - b.span_start) == b.text);
      CHECK(b.block_id == block_id_for(d.doc_id, b.seq, b.text));
      ids.insert(b.block_id);
      ++blocks;
    }
    // Everything outside the spans is whitespace.
    std::vector<bool> covered(d.text.size(), false);
    for (const auto& b : parsed) {
      for (std::size_t k = b.span_start; k < b.span_end; ++k) covered[k] = true;
    }
    for (std::size_t k = 0; k < d.text.size(); ++k) {
      if (!covered[k]) CHECK(std::isspace(static_cast<unsigned char>(d.text[k])));
    }
    CHECK(parse_blocks(d) == parsed);
  }
  CHECK(ids.size() == blocks);

  const auto again = read_sources(kSeedDocs, {.fetched_at = std::string("2024-01-01T00:00:00Z")});
  CHECK(again == docs);
}

TEST_CASE("corpus store roundtrip") {
  testing::TempDir dir("corpus");
  {
    Corpus empty;
    persist_corpus(empty, dir.str());
    CHECK(load_corpus(dir.str()) == empty);
  }

  std::mt19937_64 rng(99);
  Corpus c;
  for (int d = 0; d < 10; ++d) {
    c.documents.push_back(make_document(random_text(rng), "file:///docs/" + std::to_string(d) + ".md",
                                        "2024-02-0" + std::to_string(d % 9 + 1) + "T10:00:00Z"));
  }
  for (int i = 0; i < 100; ++i) {
    Block b;
    b.doc_id = c.documents[static_cast<std::size_t>(i) % 10].doc_id;
    b.seq = static_cast<std::size_t>(i / 10);
    b.text = random_text(rng);
    b.header = block_header(b.text);
    b.block_id = block_id_for(b.doc_id, b.seq, b.text);
    b.span_start = rng() % 1000;
    b.span_end = b.span_start + b.text.size();
    for (std::size_t k = 0; k < rng() % 6; ++k) b.metadata.keywords.push_back(random_text(rng));
    b.metadata.char_count = rng() % 5000;
    b.metadata.created_at = "2024-03-03T03:03:03Z";
    c.blocks.push_back(b);
    if (i % 3 == 0) c.qa_pairs.push_back(QAPair{random_text(rng) + "?", random_text(rng), b.block_id});
  }
  persist_corpus(c, dir.str());
  const Corpus loaded = load_corpus(dir.str());
  CHECK(loaded == c);

  for (int i : {0, 37, 99}) {
    const auto one = load_block(dir.str(), c.blocks[static_cast<std::size_t>(i)].block_id);
    REQUIRE(one.has_value());
    CHECK(*one == c.blocks[static_cast<std::size_t>(i)]);
  }
  CHECK_FALSE(load_block(dir.str(), "blk-missing").has_value());

  // The block line uses the documented field order.
  const std::string line = block_to_json(c.blocks[0]);
  CHECK(line.rfind("{\"block_id\":", 0) == 0);
  CHECK(line.find("\"byte_span\":[") != std::string::npos);
  CHECK(line.find("\"metadata\":{\"keywords\":") != std::string::npos);
  const std::string first_line = read_file_text((dir.path() / "corpus.jsonl").string()).substr(0, 40);
  CHECK(first_line.rfind("{\"format\":\"fedchat-corpus\",\"version\":1}\n", 0) == 0);
}

TEST_CASE("corpus store guards") {
  testing::TempDir dir("guard");
  persist_corpus(Corpus{}, dir.str());
  const auto path = (dir.path() / "corpus.jsonl").string();
  write_file_text(path, "{\"format\":\"fedchat-corpus\",\"version\":2}\n");
  CHECK(testing::error_code_of([&] { load_corpus(dir.str()); }) == ErrorCode::kFormatVersionMismatch);
  write_file_text(path, "");
  CHECK(testing::error_code_of([&] { load_corpus(dir.str()); }) == ErrorCode::kFormatVersionMismatch);
  write_file_text(path, "{\"format\":\"fedchat-corpus\",\"version\":1}\n{\"block_id\":1}\n");
  CHECK(testing::error_code_of([&] { load_corpus(dir.str()); }) == ErrorCode::kCorruptFile);
  CHECK(testing::error_code_of([&] { load_corpus((dir.path() / "absent").string()); }) == ErrorCode::kIoError);
}

TEST_CASE("read_sources handles html and url lists") {
  testing::TempDir dir("sources");
  write_file_text((dir.path() / "b.html").string(),
                  "<html><head><style>p{}</style></head><body><h1>Dock</h1><p>Boats &amp; nets.</p></body></html>");
  write_file_text((dir.path() / "a.md").string(), "# A\n\nText a.");
  write_file_text((dir.path() / "skip.bin").string(), "x");
  const auto docs = read_sources(dir.str(), {.fetched_at = std::string("2024-01-01T00:00:00Z")});
  REQUIRE(docs.size() == 2);
  CHECK(docs[0].text == "# A\n\nText a.");
  CHECK(docs[1].text.find("Boats & nets.") != std::string::npos);
  CHECK(docs[1].text.find("<") == std::string::npos);
  CHECK(docs[1].text.find("p{}") == std::string::npos);
  CHECK(docs[0].fetched_at == "2024-01-01T00:00:00Z");

  const auto list = (dir.path() / "sources.urls").string();
  write_file_text(list, "# comment\nfile://" + (dir.path() / "a.md").string() + "\n" +
                            (dir.path() / "b.html").string() + "\n");
  const auto listed = read_sources(list, {.fetched_at = std::string("2024-01-01T00:00:00Z")});
  REQUIRE(listed.size() == 2);
  CHECK(listed[0].doc_id == docs[0].doc_id);
  CHECK(listed[1].doc_id == docs[1].doc_id);

  const auto no_fixed = read_sources((dir.path() / "a.md").string());
  REQUIRE(no_fixed.size() == 1);
  CHECK(no_fixed[0].fetched_at.size() == 20);
}

TEST_CASE("add_documents is idempotent by doc_id") {
  Corpus c = add_documents(Corpus{}, {doc("alpha river\n\nbeta harbor")});
  REQUIRE(c.blocks.size() == 2);
  c.qa_pairs.push_back(QAPair{"What about alpha?", "alpha river", c.blocks[0].block_id});
  const Corpus same = add_documents(c, {doc("alpha river\n\nbeta harbor")});
  CHECK(same == c);
  const Corpus more = add_documents(c, {doc("gamma valley")});
  CHECK(more.documents.size() == 2);
  CHECK(more.blocks.size() == 3);
  CHECK(more.blocks[0].block_id == c.blocks[0].block_id);
  CHECK(more.qa_pairs == c.qa_pairs);
}

TEST_CASE("role batches mask everything but the output") {
  const auto role = small_role();
  const auto batch = role_batch(role, 0, 3, 96);
  CHECK(batch.rows() == 3);
  for (std::size_t r = 0; r < 3; ++r) {
    std::size_t counted = 0;
    std::string out;
    for (std::size_t t = 0; t < batch.cols(); ++t) {
      if (!batch.loss_mask[r * batch.cols() + t]) continue;
      ++counted;
      if (batch.targets.at(r, t) < 256) out.push_back(static_cast<char>(batch.targets.at(r, t)));
    }
    CHECK(out == role.pairs[r].output);
    CHECK(counted == role.pairs[r].output.size() + 1);
  }

  // Long inputs are cut from the left and the output survives intact.
  RolePromptSet long_role{"qa", {{std::string(500, 'x') + " tail", "Kept?"}}};
  const auto cut = role_batch(long_role, 0, 1, 64);
  CHECK(cut.cols() == 64);
  std::size_t counted = 0;
  for (auto m : cut.loss_mask) counted += m != 0;
  CHECK(counted == 6);

  CHECK(testing::error_code_of([] { role_batches(RolePromptSet{"empty", {}}, 64); }) == ErrorCode::kEmptyPromptSet);
  CHECK(role_batches(RolePromptSet{"many", std::vector<RolePair>(17, {"in", "out"})}, 64).size() == 3);
}

TEST_CASE("fine_tune_role follows gradient descent") {
  const auto c = role_config();
  const ParamSet p = init_params(c);
  const auto role = small_role();

  CHECK(bitwise_equal(fine_tune_role(p, c, role, 0.0f, 3), p));

  const auto batches = role_batches(role, static_cast<std::size_t>(c.context_len));
  const ParamSet scripted = tinylm::sgd_step(p, tinylm::grad(p, c, batches[0]), 0.3f);
  CHECK(bitwise_equal(fine_tune_role(p, c, role, 0.3f, 1), scripted));

  const double before = tinylm::batch_loss(p, c, batches[0]);
  const ParamSet tuned = fine_tune_role(p, c, role, 0.5f, 50);
  const double after = tinylm::batch_loss(tuned, c, batches[0]);
  MESSAGE("role loss " << before << " -> " << after);
  CHECK(after < before);

  CHECK(testing::error_code_of([&] { fine_tune_role(p, c, RolePromptSet{"none", {}}, 0.1f, 1); }) ==
        ErrorCode::kEmptyPromptSet);
}

TEST_CASE("generate_qa provenance and determinism") {
  const auto c = role_config();
  const ParamSet p = init_params(c);
  const auto blocks = parse_blocks(doc("# Saltmere\n\nSaltmere is known for smoked eel. The festival opens in May."));
  REQUIRE(blocks.size() == 1);
  const auto stats = build_stats(blocks);
  const Block b = enrich_metadata(blocks[0], stats, "");

  CHECK(generate_qa(p, c, b, default_qa_role(), 0).empty());
  const auto qa = generate_qa(p, c, b, default_qa_role(), 3);
  CHECK(!qa.empty());
  CHECK(qa.size() <= 3);
  std::set<std::string> questions;
  for (const auto& q : qa) {
    CHECK(q.block_id == b.block_id);
    CHECK(q.question.back() == '?');
    CHECK(b.text.find(q.answer) != std::string::npos);
    questions.insert(q.question);
  }
  CHECK(questions.size() == qa.size());
  CHECK(generate_qa(p, c, b, default_qa_role(), 3) == qa);

  Block empty = b;
  empty.text = "  \n";
  CHECK(testing::error_code_of([&] { generate_qa(p, c, empty, default_qa_role(), 1); }) == ErrorCode::kEmptyBlock);
}
