#include <algorithm>
#include <cctype>

#include "fedchat/retrieval.hpp"

namespace fedchat::retrieval {

namespace {

bool has_alnum(std::string_view s) {
  return std::any_of(s.begin(), s.end(), [](char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; });
}

std::string trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return std::string(s);
}

std::string keep_tail(const std::string& s, std::size_t budget) {
  return s.size() > budget ? s.substr(s.size() - budget) : s;
}

std::size_t prompt_budget(const tinylm::ModelConfig& config) {
  return static_cast<std::size_t>(std::max(config.context_len - 1, 1));
}

std::string greedy_line(const ParamSet& params, const tinylm::ModelConfig& config, const std::string& prompt,
                        int max_new) {
  tinylm::GenerateOptions g;
  g.stop_at_newline = true;
  return trim(ingest::sanitize_utf8(tinylm::generate(params, config, prompt, max_new, g)));
}

}  // namespace

std::string expansion_prompt(const std::vector<std::string>& headers, const std::string& question) {
  std::string p = "Role: query expander\n";
  if (!headers.empty()) {
    p += "Headers:";
    for (std::size_t i = 0; i < headers.size(); ++i) p += (i ? "; " : " ") + headers[i];
    p += "\n";
  }
  p += "Question: " + question + "\nElaborated question:";
  return p;
}

std::string expand_query(const ParamSet& params, const tinylm::ModelConfig& config, const std::string& question,
                         const EmbeddingIndex& index, const ingest::Corpus& corpus, const ExpandOptions& options) {
  if (question.empty()) return question;
  std::vector<std::string> headers;
  if (options.headers > 0 && index.size() > 0) {
    const auto q = tinylm::embed_text(params, config, question);
    for (const auto& r : nn_search(index, q, options.headers)) {
      if (const auto* b = corpus.find_block(r.block_id)) headers.push_back(b->header);
    }
  }
  const std::string prompt = keep_tail(expansion_prompt(headers, question), prompt_budget(config));
  const std::string elaboration = greedy_line(params, config, prompt, options.max_new);
  if (!has_alnum(elaboration)) return question;
  return question + " " + elaboration;
}

Answer answer_question(const ParamSet& params, const tinylm::ModelConfig& config, const std::string& question,
                       const EmbeddingIndex& index, const ingest::Corpus& corpus, const AnswerOptions& options) {
  Answer out;
  out.expanded_question = question;
  if (index.size() == 0 || corpus.blocks.empty() || trim(question).empty()) {
    out.status = Answer::Status::kNoContext;
    return out;
  }
  const std::size_t k = std::max<std::size_t>(options.k, 1);
  out.expanded_question = expand_query(params, config, question, index, corpus, options.expand);
  const auto q = tinylm::embed_text(params, config, out.expanded_question);

  std::vector<std::uint8_t> mask;
  if (options.keyword_filter) mask = keyword_mask(index, corpus, *options.keyword_filter);
  const auto candidates = nn_search(index, q, 3 * k, options.keyword_filter ? &mask : nullptr);

  double best = -1.0;
  std::vector<std::string> ids;
  for (const auto& c : candidates) {
    best = std::max(best, cosine(q, index.row(*index.find(c.block_id))));
    ids.push_back(c.block_id);
  }
  if (candidates.empty() || best < options.similarity_floor) {
    out.status = Answer::Status::kNoContext;
    return out;
  }

  const auto ranked = svm_rerank(index, q, ids, options.svm);
  std::string context;
  for (std::size_t i = 0; i < ranked.size() && i < k; ++i) {
    const auto row = index.row(*index.find(ranked[i].block_id));
    out.sources.push_back(SearchResult{ranked[i].block_id, cosine(q, row), i});
    if (const auto* b = corpus.find_block(ranked[i].block_id)) {
      if (!context.empty()) context += "\n";
      context += b->text;
    }
  }

  // The question and the start of the best block have to fit in the window.
  const std::size_t budget = prompt_budget(config);
  const std::string head = "Role: answer writer\nContext: ";
  std::string tail = "\nQuestion: " + question + "\nAnswer:";
  tail = keep_tail(tail, budget / 2);
  const std::size_t room = budget > head.size() + tail.size() ? budget - head.size() - tail.size() : 0;
  const std::string prompt = keep_tail(head + context.substr(0, room) + tail, budget);

  out.text = greedy_line(params, config, prompt, options.max_new);
  if (!has_alnum(out.text)) {
    const auto* top = corpus.find_block(out.sources.front().block_id);
    out.text = top ? ingest::extractive_answer(*top, question) : std::string();
  }
  return out;
}

}  // namespace fedchat::retrieval
