// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <random>

#include "tspmn/vocab.hpp"

using namespace tspmn;

TEST_CASE("specials come first in fixed order", "[vocab]") {
  const Vocab v;
  REQUIRE(v.size() == special::kCount);
  CHECK(v.token(special::kPad) == "[PAD]");
  CHECK(special::kPad == 0);
  CHECK(v.token(special::kEot) == "[EOT]");
  CHECK(v.token(special::kDoctor) == "[D]");
}

TEST_CASE("vocabulary is specials plus characters in first-seen order", "[vocab]") {
  const TermDictionary dict = build_dictionary({{"ab", "S"}});
  const std::vector<std::string> corpus{"abc"};
  const Vocab v = build_vocab(dict, corpus);
  REQUIRE(v.size() == special::kCount + 3);
  CHECK(v.token(8) == "a");
  CHECK(v.token(9) == "b");
  CHECK(v.token(10) == "c");
  CHECK(build_vocab(dict, corpus).serialize() == v.serialize());
  CHECK(build_vocab(dict, corpus).digest() == v.digest());
}

TEST_CASE("dictionary surfaces round-trip without UNK", "[vocab]") {
  const TermDictionary dict = build_dictionary({{"头孢克肟", "Medicine"}, {"腹痛", "Symptom"}, {"fever", "Symptom"}});
  const Vocab v = build_vocab(dict, {});
  for (const auto& e : dict.entries()) {
    const auto ids = encode_text(v, std::string_view(e.surface));
    CHECK(std::find(ids.begin(), ids.end(), special::kUnk) == ids.end());
    CHECK(decode_tokens(v, ids) == e.surface);
  }
}

TEST_CASE("encode_text maps one id per code point", "[vocab]") {
  const TermDictionary dict = build_dictionary({{"ab", "S"}});
  const Vocab v = build_vocab(dict, std::vector<std::string>{"腹痛 abc"});
  CHECK(encode_text(v, std::string_view("")).empty());
  const auto ids = encode_text(v, std::string_view("a中b"));
  REQUIRE(ids.size() == 3);
  CHECK(ids[1] == special::kUnk);

  std::mt19937_64 rng(3);
  const std::u32string alphabet = U"ab c腹痛中z";
  for (int trial = 0; trial < 200; ++trial) {
    std::u32string s(rng() % 30, U'a');
    for (auto& c : s) c = alphabet[rng() % alphabet.size()];
    const auto encoded = encode_text(v, std::u32string_view(s));
    CHECK(encoded.size() == s.size());
    if (std::find(encoded.begin(), encoded.end(), special::kUnk) == encoded.end())
      CHECK(decode_tokens(v, encoded) == utf8_encode(s));
  }
}

TEST_CASE("vocab file round trip and validation", "[vocab]") {
  const TermDictionary dict = build_dictionary({{"腹痛", "Symptom"}});
  const Vocab v = build_vocab(dict, std::vector<std::string>{"xyz"});
  const Vocab r = Vocab::deserialize(v.serialize());
  CHECK(r.serialize() == v.serialize());
  CHECK(r.id_of(U'痛') == v.id_of(U'痛'));
  CHECK_THROWS_AS(Vocab::deserialize("[PAD]\n[CLS]\n"), DataError);
  CHECK_THROWS_AS(Vocab::deserialize(Vocab().serialize() + "ab\n"), DataError);
  CHECK_THROWS_AS(Vocab::deserialize(Vocab().serialize() + "a\na\n"), DataError);
}
