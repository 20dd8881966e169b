#include "fedchat/tokenizer.hpp"

namespace fedchat::tinylm {

std::vector<TokenId> Tokenizer::tokenize(std::string_view text, Options opts) {
  std::vector<TokenId> ids;
  ids.reserve(text.size() + 2);
  if (opts.add_bos) ids.push_back(kBos);
  for (char c : text) ids.push_back(static_cast<TokenId>(static_cast<unsigned char>(c)));
  if (opts.add_eos) ids.push_back(kEos);
  return ids;
}

std::string Tokenizer::detokenize(const std::vector<TokenId>& ids) {
  std::string out;
  out.reserve(ids.size());
  for (TokenId id : ids) {
    if (id >= 0 && id < 256) out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
  }
  return out;
}

std::map<std::string, TokenId> Tokenizer::special_ids() {
  return {{"bos", kBos}, {"eos", kEos}, {"pad", kPad}};
}

}  // namespace fedchat::tinylm
