#include <sys/stat.h>

#include <algorithm>
#include <cctype>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "fedchat/bytes.hpp"
#include "fedchat/ingest.hpp"
#include "httplib.h"
#include "json.hpp"

namespace fedchat::ingest {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

constexpr char kCorpusFile[] = "corpus.jsonl";
constexpr char kQaFile[] = "qa.jsonl";
constexpr char kDocumentsFile[] = "documents.jsonl";
constexpr char kIndexFile[] = "corpus.idx";
constexpr char kIndexMagic[4] = {'T', 'C', 'X', '1'};

std::string header_line(const char* format) {
  ordered_json h;
  h["format"] = format;
  h["version"] = 1;
  return h.dump();
}

ordered_json block_json(const Block& b) {
  ordered_json j;
  j["block_id"] = b.block_id;
  j["doc_id"] = b.doc_id;
  j["seq"] = b.seq;
  j["header"] = b.header;
  j["text"] = b.text;
  j["byte_span"] = {b.span_start, b.span_end};
  ordered_json m;
  m["keywords"] = b.metadata.keywords;
  m["char_count"] = b.metadata.char_count;
  m["created_at"] = b.metadata.created_at;
  j["metadata"] = m;
  return j;
}

Block block_from_json(const ordered_json& j) {
  Block b;
  b.block_id = j.at("block_id").get<std::string>();
  b.doc_id = j.at("doc_id").get<std::string>();
  b.seq = j.at("seq").get<std::size_t>();
  b.header = j.at("header").get<std::string>();
  b.text = j.at("text").get<std::string>();
  const auto& span = j.at("byte_span");
  if (!span.is_array() || span.size() != 2) throw Error(ErrorCode::kCorruptFile, "byte_span must be [start, end]");
  b.span_start = span[0].get<std::size_t>();
  b.span_end = span[1].get<std::size_t>();
  const auto& m = j.at("metadata");
  b.metadata.keywords = m.at("keywords").get<std::vector<std::string>>();
  b.metadata.char_count = m.at("char_count").get<std::size_t>();
  b.metadata.created_at = m.at("created_at").get<std::string>();
  return b;
}

// Splits a JSONL file and checks its header line.
std::vector<std::string> read_jsonl(const fs::path& path, const char* format) {
  if (!fs::exists(path)) throw Error(ErrorCode::kIoError, "missing corpus file " + path.string());
  const std::string text = read_file_text(path.string());
  std::vector<std::string> lines;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t nl = text.find('\n', pos);
    if (nl == std::string::npos) nl = text.size();
    if (nl > pos) lines.push_back(text.substr(pos, nl - pos));
    pos = nl + 1;
  }
  if (lines.empty()) throw Error(ErrorCode::kFormatVersionMismatch, path.string() + " has no header line");
  ordered_json h;
  try {
    h = ordered_json::parse(lines.front());
  } catch (const std::exception&) {
    throw Error(ErrorCode::kFormatVersionMismatch, path.string() + " header is not JSON");
  }
  if (!h.is_object() || h.value("format", "") != format || !h.contains("version") || h["version"] != 1) {
    throw Error(ErrorCode::kFormatVersionMismatch, path.string() + " has an unsupported format or version");
  }
  lines.erase(lines.begin());
  return lines;
}

template <class Fn>
auto parse_line(const std::string& line, const fs::path& path, Fn fn) {
  try {
    return fn(ordered_json::parse(line));
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    throw Error(ErrorCode::kCorruptFile, "bad record in " + path.string() + ": " + e.what());
  }
}

std::string file_mtime_utc(const fs::path& p) {
  struct stat st {};
  if (::stat(p.c_str(), &st) != 0) return utc_now_iso8601();
  std::tm tm{};
  gmtime_r(&st.st_mtime, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

bool has_text_extension(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".md" || ext == ".markdown" || ext == ".txt" || ext == ".html" || ext == ".htm";
}

bool is_html(const std::string& name) {
  std::string lower = name;
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  return lower.ends_with(".html") || lower.ends_with(".htm");
}

RawDocument read_local(const fs::path& p, const IngestOptions& options) {
  std::string text = read_file_text(p.string());
  if (is_html(p.string())) text = strip_html_tags(text);
  return make_document(std::move(text), "file://" + fs::absolute(p).lexically_normal().string(),
                       options.fetched_at.value_or(file_mtime_utc(p)));
}

RawDocument fetch_url(const std::string& url, const IngestOptions& options) {
  if (url.rfind("file://", 0) == 0) return read_local(url.substr(7), options);
  if (url.rfind("http://", 0) != 0) {
    // Plain paths are accepted in URL lists as well.
    if (url.find("://") == std::string::npos) return read_local(url, options);
    throw Error(ErrorCode::kIoError, "unsupported URL scheme: " + url);
  }
  const std::size_t slash = url.find('/', 7);
  const std::string host = url.substr(0, slash);
  const std::string path = slash == std::string::npos ? "/" : url.substr(slash);
  httplib::Client client(host);
  client.set_connection_timeout(10);
  client.set_read_timeout(30);
  auto res = client.Get(path);
  if (!res || res->status != 200) throw Error(ErrorCode::kIoError, "could not fetch " + url);
  std::string text = res->body;
  const std::string type = res->get_header_value("Content-Type");
  if (type.find("html") != std::string::npos || is_html(path)) text = strip_html_tags(text);
  return make_document(std::move(text), url, options.fetched_at.value_or(utc_now_iso8601()));
}

}  // namespace

const Block* Corpus::find_block(const std::string& block_id) const {
  for (const auto& b : blocks) {
    if (b.block_id == block_id) return &b;
  }
  return nullptr;
}

std::string block_to_json(const Block& block) { return block_json(block).dump(); }

void persist_corpus(const Corpus& corpus, const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::kIoError, "cannot create corpus directory " + dir + ": " + ec.message());
  const fs::path root(dir);

  std::string blocks = header_line("fedchat-corpus") + "\n";
  ByteWriter idx;
  for (char c : kIndexMagic) idx.put_u8(static_cast<std::uint8_t>(c));
  idx.put_u32(static_cast<std::uint32_t>(corpus.blocks.size()));
  for (const auto& b : corpus.blocks) {
    const std::string line = block_json(b).dump();
    idx.put_string(b.block_id);
    idx.put_u64(blocks.size());
    idx.put_u32(static_cast<std::uint32_t>(line.size()));
    blocks += line + "\n";
  }

  std::string qa = header_line("fedchat-qa") + "\n";
  for (const auto& p : corpus.qa_pairs) {
    ordered_json j;
    j["question"] = p.question;
    j["answer"] = p.answer;
    j["block_id"] = p.block_id;
    qa += j.dump() + "\n";
  }

  std::string docs = header_line("fedchat-documents") + "\n";
  for (const auto& d : corpus.documents) {
    ordered_json j;
    j["doc_id"] = d.doc_id;
    j["source_uri"] = d.source_uri;
    j["fetched_at"] = d.fetched_at;
    j["text"] = d.text;
    docs += j.dump() + "\n";
  }

  write_file_text((root / kDocumentsFile).string(), docs);
  write_file_text((root / kQaFile).string(), qa);
  write_file_text((root / kCorpusFile).string(), blocks);
  write_file_bytes((root / kIndexFile).string(), idx.bytes());
}

Corpus load_corpus(const std::string& dir) {
  const fs::path root(dir);
  Corpus c;
  const fs::path blocks_path = root / kCorpusFile;
  for (const auto& line : read_jsonl(blocks_path, "fedchat-corpus")) {
    c.blocks.push_back(parse_line(line, blocks_path, [](const ordered_json& j) { return block_from_json(j); }));
  }
  const fs::path qa_path = root / kQaFile;
  for (const auto& line : read_jsonl(qa_path, "fedchat-qa")) {
    c.qa_pairs.push_back(parse_line(line, qa_path, [](const ordered_json& j) {
      return QAPair{j.at("question").get<std::string>(), j.at("answer").get<std::string>(),
                    j.at("block_id").get<std::string>()};
    }));
  }
  const fs::path docs_path = root / kDocumentsFile;
  for (const auto& line : read_jsonl(docs_path, "fedchat-documents")) {
    c.documents.push_back(parse_line(line, docs_path, [](const ordered_json& j) {
      return RawDocument{j.at("doc_id").get<std::string>(), j.at("source_uri").get<std::string>(),
                         j.at("fetched_at").get<std::string>(), j.at("text").get<std::string>()};
    }));
  }
  return c;
}

std::optional<Block> load_block(const std::string& dir, const std::string& block_id) {
  const fs::path root(dir);
  const auto idx_bytes = read_file_bytes((root / kIndexFile).string());
  ByteReader r(idx_bytes);
  for (char c : kIndexMagic) {
    if (r.get_u8() != static_cast<std::uint8_t>(c)) throw Error(ErrorCode::kFormatVersionMismatch, "bad corpus index");
  }
  const std::uint32_t n = r.get_u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::string id = r.get_string();
    const std::uint64_t offset = r.get_u64();
    const std::uint32_t length = r.get_u32();
    if (id != block_id) continue;
    std::ifstream in(root / kCorpusFile, std::ios::binary);
    if (!in) throw Error(ErrorCode::kIoError, "cannot open corpus file in " + dir);
    in.seekg(static_cast<std::streamoff>(offset));
    std::string line(length, '\0');
    if (!in.read(line.data(), length)) throw Error(ErrorCode::kCorruptFile, "corpus index points past the file end");
    return parse_line(line, root / kCorpusFile, [](const ordered_json& j) { return block_from_json(j); });
  }
  return std::nullopt;
}

std::vector<RawDocument> read_sources(const std::string& path, const IngestOptions& options) {
  const fs::path p(path);
  std::vector<RawDocument> out;
  if (fs::is_directory(p)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(p)) {
      if (e.is_regular_file() && has_text_extension(e.path())) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) out.push_back(read_local(f, options));
    return out;
  }
  if (!fs::exists(p)) throw Error(ErrorCode::kIoError, "no such file or directory: " + path);
  const std::string ext = p.extension().string();
  if (ext == ".urls" || ext == ".list") {
    std::istringstream in(read_file_text(path));
    std::string line;
    while (std::getline(in, line)) {
      while (!line.empty() && std::isspace(static_cast<unsigned char>(line.back()))) line.pop_back();
      if (line.empty() || line[0] == '#') continue;
      out.push_back(fetch_url(line, options));
    }
    return out;
  }
  out.push_back(read_local(p, options));
  return out;
}

Corpus add_documents(const Corpus& corpus, const std::vector<RawDocument>& documents) {
  Corpus out;
  std::set<std::string> seen;
  for (const auto& d : corpus.documents) {
    if (seen.insert(d.doc_id).second) out.documents.push_back(d);
  }
  for (const auto& d : documents) {
    if (seen.insert(d.doc_id).second) out.documents.push_back(d);
  }
  for (const auto& d : out.documents) {
    for (auto& b : parse_blocks(d)) out.blocks.push_back(std::move(b));
  }
  const CorpusStats stats = build_stats(out.blocks);
  for (auto& b : out.blocks) b = enrich_metadata(std::move(b), stats, "");
  std::set<std::string> ids;
  for (const auto& b : out.blocks) ids.insert(b.block_id);
  for (const auto& q : corpus.qa_pairs) {
    if (ids.count(q.block_id)) out.qa_pairs.push_back(q);
  }
  return out;
}

std::string strip_html_tags(std::string_view html) {
  static const std::set<std::string> block_tags = {"p",  "div", "br", "h1", "h2", "h3", "h4", "h5",
                                                   "h6", "li",  "tr", "section", "article", "pre"};
  std::string out;
  std::size_t i = 0;
  while (i < html.size()) {
    if (html[i] == '<') {
      const std::size_t close = html.find('>', i);
      if (close == std::string_view::npos) break;
      std::string tag;
      std::size_t k = i + 1;
      if (k < close && html[k] == '/') ++k;
      while (k < close && std::isalnum(static_cast<unsigned char>(html[k]))) {
        tag.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(html[k]))));
        ++k;
      }
      if ((tag == "script" || tag == "style") && html[i + 1] != '/') {
        const std::size_t end = html.find("</" + tag, close);
        i = end == std::string_view::npos ? html.size() : html.find('>', end) + 1;
        continue;
      }
      if (block_tags.count(tag)) out += "\n\n";
      i = close + 1;
      continue;
    }
    if (html[i] == '&') {
      static const std::pair<const char*, const char*> entities[] = {
          {"&amp;", "&"}, {"&lt;", "<"}, {"&gt;", ">"}, {"&quot;", "\""}, {"&#39;", "'"}, {"&nbsp;", " "}};
      bool matched = false;
      for (const auto& [name, value] : entities) {
        if (html.substr(i).rfind(name, 0) == 0) {
          out += value;
          i += std::string_view(name).size();
          matched = true;
          break;
        }
      }
      if (matched) continue;
    }
    out.push_back(html[i++]);
  }
  // Collapse runs of blank lines left behind by removed tags.
  std::string collapsed;
  int newlines = 0;
  for (char c : out) {
    if (c == '\n') {
      if (++newlines <= 2) collapsed.push_back(c);
    } else {
      newlines = 0;
      collapsed.push_back(c);
    }
  }
  return collapsed;
}

}  // namespace fedchat::ingest
