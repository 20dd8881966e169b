#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace fedchat::tinylm {

using TokenId = std::int32_t;

struct TokenizeOptions {
  bool add_bos = false;
  bool add_eos = false;
};

// Byte-level tokenizer: ids 0..255 are raw bytes, followed by three specials.
class Tokenizer {
 public:
  static constexpr TokenId kBos = 256;
  static constexpr TokenId kEos = 257;
  static constexpr TokenId kPad = 258;
  static constexpr int kVocabSize = 259;

  using Options = TokenizeOptions;

  static std::vector<TokenId> tokenize(std::string_view text, Options opts = {});
  // Special ids are dropped.
  static std::string detokenize(const std::vector<TokenId>& ids);

  static bool is_special(TokenId id) { return id >= 256; }
  static std::map<std::string, TokenId> special_ids();
};

}  // namespace fedchat::tinylm
