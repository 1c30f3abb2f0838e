// SPDX-License-Identifier: Apache-2.0
#pragma once

// Character-level vocabulary with the special tokens of the packed input layout.

#include <array>
#include <cstdint>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "tspmn/error.hpp"
#include "tspmn/random.hpp"
#include "tspmn/terminology.hpp"
#include "tspmn/unicode.hpp"

namespace tspmn {

using TokenId = std::int32_t;

namespace special {
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kUnk = 1;
inline constexpr TokenId kCls = 2;
inline constexpr TokenId kSep = 3;
inline constexpr TokenId kEot = 4;
inline constexpr TokenId kMask = 5;
inline constexpr TokenId kPatient = 6;
inline constexpr TokenId kDoctor = 7;
inline constexpr std::size_t kCount = 8;
inline constexpr std::array<std::string_view, kCount> kNames = {"[PAD]", "[UNK]", "[CLS]", "[SEP]",
                                                                 "[EOT]", "[MASK]", "[P]", "[D]"};
}  // namespace special

class Vocab {
 public:
  Vocab() {
    for (std::string_view name : special::kNames) tokens_.emplace_back(name);
  }

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(TokenId id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  bool is_special(TokenId id) const { return id >= 0 && static_cast<std::size_t>(id) < special::kCount; }

  TokenId id_of(char32_t c) const {
    auto it = char_ids_.find(c);
    return it == char_ids_.end() ? special::kUnk : it->second;
  }

  /// Adds a character if unseen. Line breaks are never vocabulary entries.
  void add(char32_t c) {
    if (c == U'\n' || c == U'\r' || char_ids_.contains(c)) return;
    const auto id = static_cast<TokenId>(tokens_.size());
    char_ids_.emplace(c, id);
    std::string s;
    utf8_append(s, c);
    tokens_.push_back(std::move(s));
  }

  /// One token per line, line number = id.
  std::string serialize() const {
    std::string out;
    for (const auto& t : tokens_) {
      out += t;
      out += '\n';
    }
    return out;
  }

  std::string digest() const {
    std::ostringstream os;
    os << std::hex << fnv1a(serialize());
    return os.str();
  }

  static Vocab deserialize(std::string_view text) {
    Vocab v;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos < text.size()) {
      std::size_t nl = text.find('\n', pos);
      if (nl == std::string_view::npos) nl = text.size();
      const std::string_view line = text.substr(pos, nl - pos);
      pos = nl + 1;
      if (line_no < special::kCount) {
        if (line != special::kNames[line_no])
          throw DataError("vocab line " + std::to_string(line_no + 1) + ": expected special token " +
                          std::string(special::kNames[line_no]));
      } else {
        const std::u32string chars = utf8_decode(line);
        if (chars.size() != 1)
          throw DataError("vocab line " + std::to_string(line_no + 1) + ": expected a single character");
        if (v.char_ids_.contains(chars[0]))
          throw DataError("vocab line " + std::to_string(line_no + 1) + ": duplicate token");
        v.add(chars[0]);
      }
      ++line_no;
    }
    if (line_no < special::kCount) throw DataError("vocab file is missing special tokens");
    return v;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<char32_t, TokenId> char_ids_;
};

/// Specials, then every character of the dictionary surfaces and the
/// (normalized) corpus texts in first-seen order.
inline Vocab build_vocab(const TermDictionary& dict, std::span<const std::string> corpus_texts) {
  Vocab v;
  for (const auto& e : dict.entries())
    for (char32_t c : dict.surface_chars(e.id)) v.add(c);
  for (const auto& text : corpus_texts)
    for (char32_t c : normalize_utf8(text)) v.add(c);
  return v;
}

inline std::vector<TokenId> encode_text(const Vocab& vocab, std::u32string_view text) {
  std::vector<TokenId> ids;
  ids.reserve(text.size());
  for (char32_t c : text) ids.push_back(vocab.id_of(c));
  return ids;
}

inline std::vector<TokenId> encode_text(const Vocab& vocab, std::string_view utf8_text) {
  return encode_text(vocab, std::u32string_view(utf8_decode(utf8_text)));
}

inline std::string decode_tokens(const Vocab& vocab, std::span<const TokenId> ids) {
  std::string out;
  for (TokenId id : ids) out += vocab.token(id);
  return out;
}

inline void save_vocab(const Vocab& vocab, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write vocab file: " + path);
  out << vocab.serialize();
}

inline Vocab load_vocab(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open vocab file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return Vocab::deserialize(ss.str());
}

}  // namespace tspmn
