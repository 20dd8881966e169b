#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <ctime>
#include <set>

#include "fedchat/bytes.hpp"
#include "fedchat/ingest.hpp"

namespace fedchat::ingest {

namespace {

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\r' || c == '\f' || c == '\v' || c == '\n'; }

std::string_view trim(std::string_view s) {
  while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
  while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
  return s;
}

std::size_t code_points(std::string_view s) {
  std::size_t n = 0;
  for (char c : s) {
    if ((static_cast<unsigned char>(c) & 0xC0) != 0x80) ++n;
  }
  return n;
}

bool is_heading_line(std::string_view line) {
  line = trim(line);
  return !line.empty() && line.front() == '#';
}

const std::set<std::string>& stopwords() {
  static const std::set<std::string> words = {
      "a",     "about", "after", "all",   "also",  "an",    "and",   "any",   "are",   "as",    "at",
      "be",    "been",  "but",   "by",    "can",   "could", "did",   "do",    "does",  "each",  "for",
      "from",  "had",   "has",   "have",  "he",    "her",   "his",   "how",   "if",    "in",    "into",
      "is",    "it",    "its",   "may",   "more",  "most",  "no",    "not",   "of",    "on",    "one",
      "or",    "other", "our",   "out",   "she",   "so",    "some",  "such",  "than",  "that",  "the",
      "their", "them",  "then",  "there", "these", "they",  "this",  "to",    "up",    "was",   "we",
      "were",  "what",  "when",  "where", "which", "who",   "why",   "will",  "with",  "would", "you",
      "your"};
  return words;
}

}  // namespace

namespace {

// Length of the well-formed UTF-8 sequence starting at s[i], or 0.
std::size_t sequence_length(const unsigned char* s, std::size_t n, std::size_t i) {
  const unsigned char c = s[i];
  if (c < 0x80) return 1;
  std::size_t len = 0;
  std::uint32_t cp = 0;
  if ((c & 0xE0) == 0xC0) {
    len = 2;
    cp = c & 0x1F;
  } else if ((c & 0xF0) == 0xE0) {
    len = 3;
    cp = c & 0x0F;
  } else if ((c & 0xF8) == 0xF0) {
    len = 4;
    cp = c & 0x07;
  } else {
    return 0;
  }
  if (i + len > n) return 0;
  for (std::size_t k = 1; k < len; ++k) {
    if ((s[i + k] & 0xC0) != 0x80) return 0;
    cp = (cp << 6) | (s[i + k] & 0x3F);
  }
  static constexpr std::uint32_t kMin[] = {0, 0, 0x80, 0x800, 0x10000};
  if (cp < kMin[len] || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) return 0;
  return len;
}

}  // namespace

bool is_valid_utf8(std::string_view text) {
  const auto* s = reinterpret_cast<const unsigned char*>(text.data());
  for (std::size_t i = 0; i < text.size();) {
    const std::size_t len = sequence_length(s, text.size(), i);
    if (len == 0) return false;
    i += len;
  }
  return true;
}

std::string sanitize_utf8(std::string_view text) {
  const auto* s = reinterpret_cast<const unsigned char*>(text.data());
  std::string out;
  out.reserve(text.size());
  for (std::size_t i = 0; i < text.size();) {
    const std::size_t len = sequence_length(s, text.size(), i);
    if (len == 0) {
      ++i;
      continue;
    }
    out.append(text.substr(i, len));
    i += len;
  }
  return out;
}

std::string utc_now_iso8601() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

RawDocument make_document(std::string text, std::string source_uri, std::string fetched_at) {
  if (!is_valid_utf8(text)) throw Error(ErrorCode::kInvalidEncoding, "document is not valid UTF-8: " + source_uri);
  RawDocument d;
  d.doc_id = "doc-" + hex64(fnv1a64(text));
  d.source_uri = std::move(source_uri);
  d.fetched_at = std::move(fetched_at);
  d.text = std::move(text);
  return d;
}

std::string block_id_for(const std::string& doc_id, std::size_t seq, std::string_view text) {
  Fnv1a64 h;
  h.update(doc_id);
  h.update(std::string_view("\x1f", 1));
  h.update(std::to_string(seq));
  h.update(std::string_view("\x1f", 1));
  h.update(text);
  return "blk-" + hex64(h.digest());
}

std::string block_header(std::string_view text) {
  const std::size_t nl = text.find('\n');
  const std::string_view first = trim(text.substr(0, nl));
  if (!first.empty() && first.front() == '#') {
    std::string_view h = first;
    while (!h.empty() && h.front() == '#') h.remove_prefix(1);
    h = trim(h);
    if (!h.empty()) return std::string(h);
  } else if (!first.empty() && code_points(first) <= 80 && first.back() != '.') {
    return std::string(first);
  }
  std::string out;
  int words = 0;
  std::size_t i = 0;
  while (i < text.size() && words < 8) {
    while (i < text.size() && is_space(text[i])) ++i;
    const std::size_t start = i;
    while (i < text.size() && !is_space(text[i])) ++i;
    if (i > start) {
      if (!out.empty()) out += ' ';
      out.append(text.substr(start, i - start));
      ++words;
    }
  }
  return out;
}

std::vector<Block> parse_blocks(const RawDocument& doc) {
  if (!is_valid_utf8(doc.text)) throw Error(ErrorCode::kInvalidEncoding, "document is not valid UTF-8: " + doc.doc_id);
  const std::string_view text = doc.text;

  struct Paragraph {
    std::size_t start, end;
    bool heading_only;
  };
  std::vector<Paragraph> paras;
  std::size_t pos = 0;
  bool open = false;
  Paragraph cur{0, 0, true};
  while (pos <= text.size()) {
    std::size_t nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    const std::string_view line = text.substr(pos, nl - pos);
    if (trim(line).empty()) {
      if (open) paras.push_back(cur);
      open = false;
    } else {
      if (!open) cur = Paragraph{pos, nl, true};
      open = true;
      cur.end = nl;
      cur.heading_only = cur.heading_only && is_heading_line(line);
    }
    if (nl == text.size()) break;
    pos = nl + 1;
  }
  if (open) paras.push_back(cur);

  std::vector<Block> blocks;
  std::optional<std::size_t> pending;
  for (std::size_t i = 0; i < paras.size(); ++i) {
    const std::size_t start = pending.value_or(paras[i].start);
    if (paras[i].heading_only && i + 1 < paras.size()) {
      pending = start;
      continue;
    }
    pending.reset();
    Block b;
    b.doc_id = doc.doc_id;
    b.seq = blocks.size();
    b.span_start = start;
    b.span_end = paras[i].end;
    b.text = std::string(text.substr(b.span_start, b.span_end - b.span_start));
    b.header = block_header(b.text);
    b.block_id = block_id_for(doc.doc_id, b.seq, b.text);
    b.metadata.char_count = code_points(b.text);
    b.metadata.created_at = doc.fetched_at;
    blocks.push_back(std::move(b));
  }
  return blocks;
}

std::vector<std::string> terms(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (cur.size() >= 2 && !stopwords().count(cur)) out.push_back(cur);
    cur.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (c >= 0x80 || std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else {
      flush();
    }
  }
  flush();
  return out;
}

double CorpusStats::idf(const std::string& term) const {
  auto it = document_frequency.find(term);
  const double df = it == document_frequency.end() ? 0.0 : static_cast<double>(it->second);
  return std::log((static_cast<double>(block_count) + 1.0) / (df + 1.0)) + 1.0;
}

CorpusStats build_stats(const std::vector<Block>& blocks) {
  CorpusStats s;
  s.block_count = blocks.size();
  for (const auto& b : blocks) {
    const auto t = terms(b.text);
    for (const auto& term : std::set<std::string>(t.begin(), t.end())) ++s.document_frequency[term];
  }
  return s;
}

std::vector<std::string> extract_keywords(std::string_view text, const CorpusStats& stats, std::size_t k) {
  std::map<std::string, std::size_t> tf;
  for (auto& t : terms(text)) ++tf[t];
  std::vector<std::pair<double, std::string>> scored;
  for (const auto& [term, count] : tf) {
    scored.emplace_back((1.0 + std::log(static_cast<double>(count))) * stats.idf(term), term);
  }
  std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  std::vector<std::string> out;
  for (std::size_t i = 0; i < scored.size() && i < k; ++i) out.push_back(scored[i].second);
  return out;
}

Block enrich_metadata(Block block, const CorpusStats& stats, const std::string& created_at) {
  block.metadata.keywords = extract_keywords(block.text, stats, 5);
  block.metadata.char_count = code_points(block.text);
  if (!created_at.empty()) block.metadata.created_at = created_at;
  return block;
}

}  // namespace fedchat::ingest
