#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>

#include "fedchat/bytes.hpp"
#include "fedchat/parallel.hpp"
#include "fedchat/retrieval.hpp"

namespace fedchat::retrieval {

namespace {

constexpr char kMagic[4] = {'T', 'V', 'I', '1'};

bool better(Metric metric, const SearchResult& a, const SearchResult& b) {
  if (a.score != b.score) return metric == Metric::kCosine ? a.score > b.score : a.score < b.score;
  return a.block_id < b.block_id;
}

std::vector<double> normalized(std::span<const float> v) {
  double norm = 0.0;
  for (float x : v) norm += static_cast<double>(x) * x;
  norm = std::sqrt(norm);
  std::vector<double> out(v.size() + 1, 0.0);
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = norm > 0.0 ? v[i] / norm : 0.0;
  out[v.size()] = 1.0;  // bias feature
  return out;
}

}  // namespace

std::string to_string(Metric m) { return m == Metric::kCosine ? "cosine" : "euclidean"; }

Metric parse_metric(const std::string& s) {
  if (s == "cosine") return Metric::kCosine;
  if (s == "euclidean") return Metric::kEuclidean;
  throw Error(ErrorCode::kInvalidConfig, "unknown metric: " + s);
}

std::optional<std::size_t> EmbeddingIndex::find(const std::string& block_id) const {
  for (std::size_t i = 0; i < block_ids.size(); ++i) {
    if (block_ids[i] == block_id) return i;
  }
  return std::nullopt;
}

std::uint64_t embedder_fingerprint(const ParamSet& params, const tinylm::ModelConfig& config) {
  Fnv1a64 h;
  h.update(tinylm::serialize_model(params, config));
  return h.digest();
}

EmbeddingIndex make_index(std::vector<std::string> block_ids, std::size_t dim, std::vector<float> vectors,
                          Metric metric, std::uint64_t fingerprint) {
  if (vectors.size() != block_ids.size() * dim) {
    throw Error(ErrorCode::kDimensionMismatch, "index has " + std::to_string(vectors.size()) + " values for " +
                                                   std::to_string(block_ids.size()) + " rows of " +
                                                   std::to_string(dim));
  }
  for (float v : vectors) {
    if (!std::isfinite(v)) throw Error(ErrorCode::kNonFiniteValue, "index rows must be finite");
  }
  EmbeddingIndex index;
  index.block_ids = std::move(block_ids);
  index.dim = dim;
  index.vectors = std::move(vectors);
  index.metric = metric;
  index.fingerprint = fingerprint;
  return index;
}

EmbeddingIndex build_index(const ingest::Corpus& corpus, const ParamSet& params, const tinylm::ModelConfig& config,
                           const BuildOptions& options) {
  if (corpus.blocks.empty()) throw Error(ErrorCode::kEmptyCorpus, "cannot index an empty corpus");
  const std::uint64_t fp = embedder_fingerprint(params, config);
  const auto d = static_cast<std::size_t>(config.d_model);
  const EmbeddingIndex* prev =
      options.previous && options.previous->fingerprint == fp && options.previous->dim == d ? options.previous : nullptr;
  std::map<std::string, std::size_t> prev_rows;
  if (prev) {
    for (std::size_t i = 0; i < prev->size(); ++i) prev_rows.emplace(prev->block_ids[i], i);
  }

  const std::size_t n = corpus.blocks.size();
  std::vector<std::string> ids(n);
  std::vector<float> vectors(n * d);
  parallel_for(n, options.threads, [&](std::size_t i) {
    const auto& block = corpus.blocks[i];
    ids[i] = block.block_id;
    std::vector<float> row;
    if (auto it = prev_rows.find(block.block_id); it != prev_rows.end()) {
      const auto src = prev->row(it->second);
      row.assign(src.begin(), src.end());
    } else {
      row = tinylm::embed_text(params, config, block.text);
    }
    std::copy(row.begin(), row.end(), vectors.begin() + static_cast<std::ptrdiff_t>(i * d));
  });
  return make_index(std::move(ids), d, std::move(vectors), options.metric, fp);
}

std::vector<std::uint8_t> serialize_index(const EmbeddingIndex& index) {
  ByteWriter w;
  for (char c : kMagic) w.put_u8(static_cast<std::uint8_t>(c));
  w.put_u32(static_cast<std::uint32_t>(index.size()));
  w.put_u32(static_cast<std::uint32_t>(index.dim));
  w.put_u8(static_cast<std::uint8_t>(index.metric));
  w.put_u64(index.fingerprint);
  for (const auto& id : index.block_ids) w.put_string(id);
  w.put_f32_array(index.vectors);
  return std::move(w).take();
}

EmbeddingIndex deserialize_index(std::span<const std::uint8_t> bytes) {
  try {
    ByteReader r(bytes);
    for (char c : kMagic) {
      if (r.get_u8() != static_cast<std::uint8_t>(c)) throw Error(ErrorCode::kFormatVersionMismatch, "not a TVI1 index");
    }
    const std::uint32_t n = r.get_u32();
    const std::uint32_t d = r.get_u32();
    const std::uint8_t metric = r.get_u8();
    if (metric > 1) throw Error(ErrorCode::kCorruptFile, "unknown metric byte " + std::to_string(metric));
    const std::uint64_t fp = r.get_u64();
    std::vector<std::string> ids;
    for (std::uint32_t i = 0; i < n; ++i) ids.push_back(r.get_string());
    if (r.remaining() != static_cast<std::size_t>(n) * d * 4) throw Error(ErrorCode::kCorruptFile, "index size mismatch");
    std::vector<float> values(static_cast<std::size_t>(n) * d);
    r.get_f32_array(values);
    return make_index(std::move(ids), d, std::move(values), static_cast<Metric>(metric), fp);
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kFormatVersionMismatch) throw;
    throw Error(ErrorCode::kCorruptFile, std::string("bad index file: ") + e.what());
  }
}

void save_index(const std::string& path, const EmbeddingIndex& index) { write_file_bytes(path, serialize_index(index)); }

EmbeddingIndex load_index(const std::string& path) { return deserialize_index(read_file_bytes(path)); }

double cosine(std::span<const float> a, std::span<const float> b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

double euclidean(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double diff = static_cast<double>(a[i]) - b[i];
    s += diff * diff;
  }
  return std::sqrt(s);
}

std::vector<SearchResult> nn_search(const EmbeddingIndex& index, std::span<const float> query, std::size_t k,
                                    const std::vector<std::uint8_t>* allowed) {
  if (query.size() != index.dim) {
    throw Error(ErrorCode::kDimensionMismatch, "query has dimension " + std::to_string(query.size()) + ", index " +
                                                   std::to_string(index.dim));
  }
  if (k == 0) throw Error(ErrorCode::kInvalidArgument, "k must be at least 1");
  std::vector<SearchResult> all;
  all.reserve(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (allowed && !(*allowed)[i]) continue;
    const double s = index.metric == Metric::kCosine ? cosine(query, index.row(i)) : euclidean(query, index.row(i));
    all.push_back(SearchResult{index.block_ids[i], s, 0});
  }
  const std::size_t take = std::min(k, all.size());
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(take), all.end(),
                    [&](const SearchResult& a, const SearchResult& b) { return better(index.metric, a, b); });
  all.resize(take);
  for (std::size_t i = 0; i < take; ++i) all[i].rank = i;
  return all;
}

double SvmModel::decision(std::span<const float> v) const {
  const auto x = normalized(v);
  double s = 0.0;
  for (std::size_t i = 0; i < w.size() && i + 1 < x.size(); ++i) s += w[i] * x[i];
  return s + b;
}

SvmModel train_exemplar_svm(std::span<const float> query, const std::vector<std::span<const float>>& negatives,
                            const SvmOptions& options) {
  if (negatives.empty()) throw Error(ErrorCode::kEmptyCandidates, "exemplar SVM needs at least one negative");
  if (!(options.c > 0.0) || options.epochs < 1) throw Error(ErrorCode::kInvalidConfig, "SVM needs c > 0 and epochs >= 1");
  const std::size_t d = query.size();
  struct Sample {
    std::vector<double> x;
    double y, weight;
  };
  std::vector<Sample> samples;
  samples.push_back({normalized(query), 1.0, static_cast<double>(negatives.size())});
  for (const auto& v : negatives) {
    if (v.size() != d) throw Error(ErrorCode::kDimensionMismatch, "negative row has the wrong dimension");
    samples.push_back({normalized(v), -1.0, 1.0});
  }

  // Pegasos on the bias-augmented features.
  const double lambda = 1.0 / (options.c * static_cast<double>(samples.size()));
  std::vector<double> w(d + 1, 0.0);
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(options.seed);
  std::uint64_t t = 0;
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
    for (std::size_t idx : order) {
      ++t;
      const Sample& s = samples[idx];
      const double eta = 1.0 / (lambda * static_cast<double>(t));
      double margin = 0.0;
      for (std::size_t j = 0; j <= d; ++j) margin += w[j] * s.x[j];
      margin *= s.y;
      const double shrink = 1.0 - eta * lambda;
      for (double& wj : w) wj *= shrink;
      if (margin < 1.0) {
        for (std::size_t j = 0; j <= d; ++j) w[j] += eta * s.weight * s.y * s.x[j];
      }
    }
  }
  SvmModel m;
  m.b = w[d];
  w.pop_back();
  m.w = std::move(w);
  m.c = options.c;
  m.epochs = options.epochs;
  return m;
}

std::vector<SearchResult> svm_rerank(const EmbeddingIndex& index, std::span<const float> query,
                                     const std::vector<std::string>& candidate_ids, const SvmOptions& options) {
  if (candidate_ids.empty()) throw Error(ErrorCode::kEmptyCandidates, "no candidates to rerank");
  if (query.size() != index.dim) throw Error(ErrorCode::kDimensionMismatch, "query dimension differs from the index");
  std::vector<std::span<const float>> rows;
  for (const auto& id : candidate_ids) {
    const auto i = index.find(id);
    if (!i) throw Error(ErrorCode::kInvalidArgument, "candidate " + id + " is not in the index");
    rows.push_back(index.row(*i));
  }
  const SvmModel model = train_exemplar_svm(query, rows, options);
  std::vector<SearchResult> out;
  for (std::size_t i = 0; i < rows.size(); ++i) out.push_back(SearchResult{candidate_ids[i], model.decision(rows[i]), 0});
  std::stable_sort(out.begin(), out.end(), [](const SearchResult& a, const SearchResult& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.block_id < b.block_id;
  });
  for (std::size_t i = 0; i < out.size(); ++i) out[i].rank = i;
  return out;
}

std::vector<std::uint8_t> keyword_mask(const EmbeddingIndex& index, const ingest::Corpus& corpus,
                                       const std::set<std::string>& keywords) {
  std::map<std::string, const ingest::Block*> by_id;
  for (const auto& b : corpus.blocks) by_id.emplace(b.block_id, &b);
  std::set<std::string> wanted;
  for (const auto& k : keywords) {
    for (auto& t : ingest::terms(k)) wanted.insert(t);
  }
  std::vector<std::uint8_t> mask(index.size(), 0);
  for (std::size_t i = 0; i < index.size(); ++i) {
    auto it = by_id.find(index.block_ids[i]);
    if (it == by_id.end()) continue;
    for (const auto& t : ingest::terms(it->second->text)) {
      if (wanted.count(t)) {
        mask[i] = 1;
        break;
      }
    }
  }
  return mask;
}

}  // namespace fedchat::retrieval
