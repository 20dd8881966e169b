#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "fedchat/model.hpp"

namespace fedchat::ingest {

struct RawDocument {
  std::string doc_id;
  std::string source_uri;
  std::string fetched_at;  // ISO-8601 UTC, e.g. 2024-01-31T12:00:00Z
  std::string text;

  bool operator==(const RawDocument&) const = default;
};

// doc_id is "doc-" + FNV-1a hex of the text bytes. Throws InvalidEncoding for
// text that is not valid UTF-8.
RawDocument make_document(std::string text, std::string source_uri, std::string fetched_at);

bool is_valid_utf8(std::string_view text);
// Drops bytes that are not part of a well-formed UTF-8 sequence.
std::string sanitize_utf8(std::string_view text);
std::string utc_now_iso8601();

struct BlockMetadata {
  std::vector<std::string> keywords;
  std::size_t char_count = 0;  // code points
  std::string created_at;

  bool operator==(const BlockMetadata&) const = default;
};

struct Block {
  std::string block_id;
  std::string doc_id;
  std::size_t seq = 0;
  std::string header;
  std::string text;
  std::size_t span_start = 0;
  std::size_t span_end = 0;  // exclusive; text == doc.text.substr(start, end - start)
  BlockMetadata metadata;

  bool operator==(const Block&) const = default;
};

std::string block_id_for(const std::string& doc_id, std::size_t seq, std::string_view text);

// Blank-line separated paragraphs. A paragraph made only of markdown heading
// lines is merged with the paragraph that follows it.
std::vector<Block> parse_blocks(const RawDocument& doc);

std::string block_header(std::string_view text);

// Lowercased alphanumeric runs of at least two bytes, stopwords removed.
std::vector<std::string> terms(std::string_view text);

struct CorpusStats {
  std::size_t block_count = 0;
  std::map<std::string, std::size_t> document_frequency;

  double idf(const std::string& term) const;
};

CorpusStats build_stats(const std::vector<Block>& blocks);

// Top-k terms by (1 + ln tf) * idf, ties broken lexicographically.
std::vector<std::string> extract_keywords(std::string_view text, const CorpusStats& stats, std::size_t k = 5);

Block enrich_metadata(Block block, const CorpusStats& stats, const std::string& created_at);

struct RolePair {
  std::string input;
  std::string output;
  bool operator==(const RolePair&) const = default;
};

struct RolePromptSet {
  std::string role;
  std::vector<RolePair> pairs;
};

struct QAPair {
  std::string question;
  std::string answer;
  std::string block_id;
  bool operator==(const QAPair&) const = default;
};

// Built-in role used for question generation.
RolePromptSet default_qa_role();

// "Role: <role>\nInput: <x>\nOutput: " then <y> and EOS. Only the output and
// EOS positions count toward the loss. The input is cut from the left when the
// sequence would exceed max_tokens.
tinylm::TrainBatch role_batch(const RolePromptSet& role, std::size_t first, std::size_t count, std::size_t max_tokens);

// One batch per group of up to 8 pairs, in order; step s uses batch s mod n.
std::vector<tinylm::TrainBatch> role_batches(const RolePromptSet& role, std::size_t max_tokens);

ParamSet fine_tune_role(const ParamSet& params, const tinylm::ModelConfig& config, const RolePromptSet& role, float lr,
                        int steps);

std::vector<QAPair> generate_qa(const ParamSet& params, const tinylm::ModelConfig& config, const Block& block,
                                const RolePromptSet& role, int max_q, const CorpusStats* stats = nullptr);

// The block sentence sharing the most terms with the question; first wins ties.
std::string extractive_answer(const Block& block, const std::string& question);

struct Corpus {
  std::vector<RawDocument> documents;
  std::vector<Block> blocks;
  std::vector<QAPair> qa_pairs;

  const Block* find_block(const std::string& block_id) const;
  bool operator==(const Corpus&) const = default;
};

// Directory layout: corpus.jsonl (blocks), qa.jsonl, documents.jsonl and the
// sidecar corpus.idx mapping block ids to line offsets in corpus.jsonl.
void persist_corpus(const Corpus& corpus, const std::string& dir);
Corpus load_corpus(const std::string& dir);

// Reads one block through the sidecar index without loading the corpus.
std::optional<Block> load_block(const std::string& dir, const std::string& block_id);

std::string block_to_json(const Block& block);

struct IngestOptions {
  std::optional<std::string> fetched_at;  // fixed timestamp for reproducible runs
};

// Text documents from a directory (.md, .txt, .html with tags stripped),
// sorted by path. A single file is read as one document, except *.urls and
// *.list files, which hold one URL (http:// or file://) or path per line.
std::vector<RawDocument> read_sources(const std::string& path, const IngestOptions& options = {});

// Adds documents not already present (by doc_id), re-parses, and recomputes
// keywords for every block. Existing QA pairs whose block survives are kept.
Corpus add_documents(const Corpus& corpus, const std::vector<RawDocument>& documents);

std::string strip_html_tags(std::string_view html);

}  // namespace fedchat::ingest
