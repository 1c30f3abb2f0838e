// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "tspmn/error.hpp"

namespace tspmn {

enum class Speaker { Patient, Doctor };

inline std::string_view speaker_tag(Speaker s) { return s == Speaker::Patient ? "P" : "D"; }

inline Speaker parse_speaker(std::string_view tag) {
  if (tag == "P") return Speaker::Patient;
  if (tag == "D") return Speaker::Doctor;
  throw DataError("unknown speaker tag \"" + std::string(tag) + "\" (expected \"P\" or \"D\")");
}

struct Turn {
  Speaker speaker = Speaker::Patient;
  std::string text;  // UTF-8

  friend bool operator==(const Turn&, const Turn&) = default;
};

struct Dialogue {
  std::string dialogue_id;
  std::vector<Turn> turns;

  friend bool operator==(const Dialogue&, const Dialogue&) = default;
};

inline void validate(const Dialogue& d) {
  if (d.dialogue_id.empty()) throw DataError("dialogue with empty dialogue_id");
  if (d.turns.empty()) throw DataError("dialogue " + d.dialogue_id + " has no turns");
  for (std::size_t i = 0; i < d.turns.size(); ++i) {
    if (d.turns[i].text.empty())
      throw DataError("dialogue " + d.dialogue_id + " turn " + std::to_string(i) + " has empty text");
  }
}

}  // namespace tspmn
