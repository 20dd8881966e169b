#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "fedchat/ingest.hpp"
#include "fedchat/model.hpp"

namespace fedchat::retrieval {

enum class Metric : std::uint8_t { kCosine = 0, kEuclidean = 1 };

std::string to_string(Metric m);
Metric parse_metric(const std::string& s);

struct EmbeddingIndex {
  std::vector<std::string> block_ids;
  std::size_t dim = 0;
  std::vector<float> vectors;  // size() * dim, row-major
  Metric metric = Metric::kCosine;
  std::uint64_t fingerprint = 0;

  std::size_t size() const { return block_ids.size(); }
  std::span<const float> row(std::size_t i) const { return {vectors.data() + i * dim, dim}; }
  std::optional<std::size_t> find(const std::string& block_id) const;

  bool operator==(const EmbeddingIndex&) const = default;
};

// Digest of the model parameters and configuration that produced an index.
std::uint64_t embedder_fingerprint(const ParamSet& params, const tinylm::ModelConfig& config);

// Checks shape and finiteness.
EmbeddingIndex make_index(std::vector<std::string> block_ids, std::size_t dim, std::vector<float> vectors,
                          Metric metric, std::uint64_t fingerprint = 0);

struct BuildOptions {
  Metric metric = Metric::kCosine;
  int threads = 1;
  // Rows of blocks already embedded by the same model are copied from here.
  const EmbeddingIndex* previous = nullptr;
};

// Row i is embed_text(corpus.blocks[i].text). Throws EmptyCorpus.
EmbeddingIndex build_index(const ingest::Corpus& corpus, const ParamSet& params, const tinylm::ModelConfig& config,
                           const BuildOptions& options = {});

// "TVI1" file format.
std::vector<std::uint8_t> serialize_index(const EmbeddingIndex& index);
EmbeddingIndex deserialize_index(std::span<const std::uint8_t> bytes);
void save_index(const std::string& path, const EmbeddingIndex& index);
EmbeddingIndex load_index(const std::string& path);

struct SearchResult {
  std::string block_id;
  double score = 0.0;  // similarity for cosine, distance for euclidean
  std::size_t rank = 0;

  bool operator==(const SearchResult&) const = default;
};

// Cosine similarity in double; 0 when either vector has zero norm.
double cosine(std::span<const float> a, std::span<const float> b);
double euclidean(std::span<const float> a, std::span<const float> b);

// Exact full scan. Best first; equal scores are ordered by block_id. Rows
// whose entry in `allowed` is zero are skipped.
std::vector<SearchResult> nn_search(const EmbeddingIndex& index, std::span<const float> query, std::size_t k,
                                    const std::vector<std::uint8_t>* allowed = nullptr);

struct SvmOptions {
  double c = 1.0;  // lambda = 1 / (c * samples)
  int epochs = 40;
  std::uint64_t seed = 0;
};

struct SvmModel {
  std::vector<double> w;
  double b = 0.0;
  double c = 0.0;
  int epochs = 0;

  double decision(std::span<const float> v) const;  // v is L2-normalized first
};

// Exemplar SVM: the query is the single positive, every negative row is -1.
// The positive is weighted by the number of negatives. Seeded subgradient
// descent over shuffled samples for a fixed number of epochs.
SvmModel train_exemplar_svm(std::span<const float> query, const std::vector<std::span<const float>>& negatives,
                            const SvmOptions& options = {});

// Candidates ranked by descending decision value, ties by block_id. The score
// field holds the decision value. Throws EmptyCandidates.
std::vector<SearchResult> svm_rerank(const EmbeddingIndex& index, std::span<const float> query,
                                     const std::vector<std::string>& candidate_ids, const SvmOptions& options = {});

// Blocks whose terms share at least one keyword with the filter.
std::vector<std::uint8_t> keyword_mask(const EmbeddingIndex& index, const ingest::Corpus& corpus,
                                       const std::set<std::string>& keywords);

struct ExpandOptions {
  std::size_t headers = 3;
  // Long elaborations from a small model drift the query embedding away from
  // the question; a dozen bytes keeps verbatim questions on their own block.
  int max_new = 12;
};

// Headers come from a first-pass search on the raw question. The result always
// starts with the question itself.
std::string expansion_prompt(const std::vector<std::string>& headers, const std::string& question);
std::string expand_query(const ParamSet& params, const tinylm::ModelConfig& config, const std::string& question,
                         const EmbeddingIndex& index, const ingest::Corpus& corpus, const ExpandOptions& options = {});

struct AnswerOptions {
  std::size_t k = 3;
  double similarity_floor = 0.1;
  ExpandOptions expand;
  SvmOptions svm;
  std::optional<std::set<std::string>> keyword_filter;
  int max_new = 64;
};

struct Answer {
  enum class Status { kOk, kNoContext };
  Status status = Status::kOk;
  std::string text;
  std::string expanded_question;
  std::vector<SearchResult> sources;  // score is the cosine similarity to the expanded query
};

Answer answer_question(const ParamSet& params, const tinylm::ModelConfig& config, const std::string& question,
                       const EmbeddingIndex& index, const ingest::Corpus& corpus, const AnswerOptions& options = {});

}  // namespace fedchat::retrieval
