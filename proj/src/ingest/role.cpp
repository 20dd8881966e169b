#include <algorithm>
#include <set>

#include "fedchat/ingest.hpp"
#include "fedchat/tokenizer.hpp"

namespace fedchat::ingest {

using tinylm::TokenId;
using tinylm::Tokenizer;

namespace {

constexpr std::size_t kRoleBatchSize = 8;
constexpr std::size_t kExemplarsInPrompt = 2;

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r' || s.front() == '\n')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r' || s.back() == '\n')) s.remove_suffix(1);
  return s;
}

std::vector<std::string> sentences(std::string_view text) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    const bool end_mark = (c == '.' || c == '?' || c == '!') && (i + 1 == text.size() || text[i + 1] == ' ' || text[i + 1] == '\n');
    if (end_mark || c == '\n') {
      const auto s = trim(text.substr(start, i + 1 - start));
      if (!s.empty()) out.emplace_back(s);
      start = i + 1;
    }
  }
  const auto tail = trim(text.substr(std::min(start, text.size())));
  if (!tail.empty()) out.emplace_back(tail);
  return out;
}

}  // namespace

std::string extractive_answer(const Block& block, const std::string& question) {
  const auto q = terms(question);
  const std::set<std::string> qset(q.begin(), q.end());
  std::string best;
  std::size_t best_score = 0;
  for (const auto& s : sentences(block.text)) {
    if (!s.empty() && s.front() == '#') continue;
    const auto t = terms(s);
    std::size_t score = 0;
    for (const auto& term : std::set<std::string>(t.begin(), t.end())) score += qset.count(term);
    if (best.empty() || score > best_score) {
      best = s;
      best_score = score;
    }
  }
  return best.empty() ? std::string(trim(block.text)) : best;
}

RolePromptSet default_qa_role() {
  return RolePromptSet{"question writer",
                       {{"The mill on the north bank grinds rye for the whole valley.",
                         "What does the mill on the north bank grind?"},
                        {"The harbor was rebuilt in 1820 after a great storm.", "When was the harbor rebuilt?"}}};
}

tinylm::TrainBatch role_batch(const RolePromptSet& role, std::size_t first, std::size_t count, std::size_t max_tokens) {
  std::vector<std::vector<TokenId>> seqs;
  std::vector<std::size_t> y_starts;
  for (std::size_t i = first; i < first + count && i < role.pairs.size(); ++i) {
    const auto& pair = role.pairs[i];
    const std::string head = "Role: " + role.role + "\nInput: ";
    const std::string tail = "\nOutput: ";
    std::vector<TokenId> y = Tokenizer::tokenize(pair.output, {.add_eos = true});
    std::string input = pair.input;
    const std::size_t fixed = 1 + head.size() + tail.size() + y.size();
    // A sequence of n tokens yields n - 1 model inputs.
    if (fixed + input.size() > max_tokens + 1) {
      const std::size_t room = fixed > max_tokens + 1 ? 0 : max_tokens + 1 - fixed;
      input = input.substr(input.size() - std::min(room, input.size()));
    }
    std::vector<TokenId> seq = Tokenizer::tokenize(head + input + tail, {.add_bos = true});
    const std::size_t y_start = seq.size();
    seq.insert(seq.end(), y.begin(), y.end());
    if (seq.size() > max_tokens + 1) seq.resize(max_tokens + 1);
    seqs.push_back(std::move(seq));
    y_starts.push_back(y_start);
  }
  tinylm::TrainBatch batch = tinylm::make_batch(seqs, max_tokens);
  for (std::size_t r = 0; r < seqs.size(); ++r) {
    for (std::size_t t = 0; t < batch.cols(); ++t) {
      // target position t + 1 must lie inside the output segment
      if (t + 1 < y_starts[r]) batch.loss_mask[r * batch.cols() + t] = 0;
    }
  }
  return batch;
}

std::vector<tinylm::TrainBatch> role_batches(const RolePromptSet& role, std::size_t max_tokens) {
  if (role.pairs.empty()) throw Error(ErrorCode::kEmptyPromptSet, "role '" + role.role + "' has no pairs");
  std::vector<tinylm::TrainBatch> out;
  for (std::size_t i = 0; i < role.pairs.size(); i += kRoleBatchSize) {
    out.push_back(role_batch(role, i, kRoleBatchSize, max_tokens));
  }
  return out;
}

ParamSet fine_tune_role(const ParamSet& params, const tinylm::ModelConfig& config, const RolePromptSet& role, float lr,
                        int steps) {
  const auto batches = role_batches(role, static_cast<std::size_t>(config.context_len));
  ParamSet out = params;
  for (int s = 0; s < steps; ++s) {
    const auto& b = batches[static_cast<std::size_t>(s) % batches.size()];
    out = tinylm::sgd_step(out, tinylm::grad(out, config, b), lr);
  }
  return out;
}

std::vector<QAPair> generate_qa(const ParamSet& params, const tinylm::ModelConfig& config, const Block& block,
                                const RolePromptSet& role, int max_q, const CorpusStats* stats) {
  if (trim(block.text).empty()) throw Error(ErrorCode::kEmptyBlock, "block " + block.block_id + " has no text");
  std::vector<QAPair> out;
  if (max_q <= 0) return out;

  std::string prompt = "Role: " + role.role + "\n";
  for (std::size_t i = 0; i < role.pairs.size() && i < kExemplarsInPrompt; ++i) {
    prompt += "Input: " + role.pairs[i].input + "\nOutput: " + role.pairs[i].output + "\n";
  }
  prompt += "Input: " + block.text + "\nOutput: ";

  std::vector<std::string> keywords = block.metadata.keywords;
  if (keywords.empty()) {
    const CorpusStats local = stats ? *stats : build_stats({block});
    keywords = extract_keywords(block.text, local, 5);
  }
  std::size_t next_keyword = 0;
  std::set<std::string> seen;

  tinylm::GenerateOptions g;
  g.stop_at_newline = true;
  const std::size_t budget = static_cast<std::size_t>(std::max(config.context_len - 1, 1));
  for (int q = 0; q < max_q; ++q) {
    const std::string window = prompt.size() > budget ? prompt.substr(prompt.size() - budget) : prompt;
    std::string line(trim(tinylm::generate(params, config, window, 48, g)));
    const bool usable = line.size() >= 8 && line.back() == '?' && !seen.count(line);
    if (!usable) {
      line.clear();
      while (next_keyword < keywords.size()) {
        std::string candidate = "What does the text say about " + keywords[next_keyword++] + "?";
        if (!seen.count(candidate)) {
          line = std::move(candidate);
          break;
        }
      }
      if (line.empty()) break;
    }
    seen.insert(line);
    out.push_back(QAPair{line, extractive_answer(block, line), block.block_id});
    prompt += line + "\nOutput: ";
  }
  return out;
}

}  // namespace fedchat::ingest
