// SPDX-License-Identifier: Apache-2.0
#pragma once

// UTF-8 <-> code point conversion and the length-preserving text normalization
// used for dictionary matching. All offsets in this library count Unicode
// scalar values, never bytes.

#include <string>
#include <string_view>

#include <unicode/normalizer2.h>
#include <unicode/uchar.h>
#include <unicode/uscript.h>
#include <unicode/unistr.h>

#include "tspmn/error.hpp"

namespace tspmn {

inline std::u32string utf8_decode(std::string_view s) {
  std::u32string out;
  out.reserve(s.size());
  std::size_t i = 0;
  const auto byte = [&](std::size_t k) { return static_cast<unsigned char>(s[k]); };
  while (i < s.size()) {
    const unsigned char c = byte(i);
    char32_t cp = 0;
    std::size_t len = 0;
    if (c < 0x80) { cp = c; len = 1; }
    else if ((c >> 5) == 0x6) { cp = c & 0x1F; len = 2; }
    else if ((c >> 4) == 0xE) { cp = c & 0x0F; len = 3; }
    else if ((c >> 3) == 0x1E) { cp = c & 0x07; len = 4; }
    else throw DataError("invalid UTF-8 lead byte at offset " + std::to_string(i));
    if (i + len > s.size()) throw DataError("truncated UTF-8 sequence at offset " + std::to_string(i));
    for (std::size_t k = 1; k < len; ++k) {
      const unsigned char cc = byte(i + k);
      if ((cc >> 6) != 0x2) throw DataError("invalid UTF-8 continuation byte at offset " + std::to_string(i + k));
      cp = (cp << 6) | (cc & 0x3F);
    }
    const bool overlong = (len == 2 && cp < 0x80) || (len == 3 && cp < 0x800) || (len == 4 && cp < 0x10000);
    if (overlong || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF))
      throw DataError("invalid code point in UTF-8 at offset " + std::to_string(i));
    out.push_back(cp);
    i += len;
  }
  return out;
}

inline void utf8_append(std::string& out, char32_t cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

inline std::string utf8_encode(std::u32string_view s) {
  std::string out;
  out.reserve(s.size());
  for (char32_t cp : s) utf8_append(out, cp);
  return out;
}

inline std::size_t utf8_length(std::string_view s) { return utf8_decode(s).size(); }

/// NFKC of a single code point, kept only when the composition yields exactly
/// one code point (so offsets survive), followed by lowercasing of Latin letters.
inline char32_t normalize_char(char32_t cp) {
  if (cp < 0x80) {
    return (cp >= U'A' && cp <= U'Z') ? cp + 32 : cp;
  }
  UErrorCode status = U_ZERO_ERROR;
  static const icu::Normalizer2* nfkc = icu::Normalizer2::getNFKCInstance(status);
  char32_t mapped = cp;
  if (nfkc != nullptr) {
    status = U_ZERO_ERROR;
    const icu::UnicodeString src(static_cast<UChar32>(cp));
    const icu::UnicodeString dst = nfkc->normalize(src, status);
    if (U_SUCCESS(status) && dst.countChar32() == 1) mapped = static_cast<char32_t>(dst.char32At(0));
  }
  status = U_ZERO_ERROR;
  if (uscript_getScript(static_cast<UChar32>(mapped), &status) == USCRIPT_LATIN && U_SUCCESS(status)) {
    mapped = static_cast<char32_t>(u_tolower(static_cast<UChar32>(mapped)));
  }
  return mapped;
}

inline std::u32string normalize(std::u32string_view s) {
  std::u32string out(s.size(), U'\0');
  for (std::size_t i = 0; i < s.size(); ++i) out[i] = normalize_char(s[i]);
  return out;
}

inline std::u32string normalize_utf8(std::string_view s) { return normalize(utf8_decode(s)); }

}  // namespace tspmn
