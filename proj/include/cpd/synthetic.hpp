// Copyright 2026 The cpd-toolkit Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <cstdio>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "cpd/corpus.hpp"
#include "cpd/error.hpp"
#include "cpd/rng.hpp"

namespace cpd {

// Parameters of the planted-dependency generator.
//
// Every dialogue has `key_slots` response slots. A planted ("causal") turn
// states the value of one slot ("my city is city07"); the response lists one
// token per slot, copying the planted key or emitting the slot's absent
// marker ("nocity"). Distractor turns never contain slot words or keys, so the
// planted turns are causal by construction.
//
// Optional decoy turns mention a slot value about someone else ("his city is
// city03"). They differ from planted turns by one word and never feed the
// response, so they are non-causal.
struct SyntheticSpec {
  int n_dialogues = 100;
  std::pair<int, int> turns_range{8, 16};
  std::pair<int, int> n_causal_range{1, 3};
  // Placement weight for turn distance d (index d); distances past the end
  // have weight 0.
  std::vector<double> distance_bias = std::vector<double>(16, 1.0);
  std::pair<int, int> n_decoy_range{0, 0};
  std::vector<double> decoy_bias = std::vector<double>(16, 1.0);
  // Total number of key tokens, split evenly across the slots.
  int vocab_size = 40;
  std::uint64_t seed = 0;
  int key_slots = 4;
  std::string instruction = "list the details the user shared";
  // Fixed words opening every response; must not occur in any turn.
  std::string response_preamble;
  std::string id_prefix = "syn";
};

namespace synthetic {

inline constexpr std::array<const char*, 8> kSlotNames{"city", "pet", "color", "food", "sport", "band", "car", "tree"};

inline const std::vector<std::string>& standalone_distractors() {
  static const std::vector<std::string> kPool{
      "hello",         "thank you",   "okay",       "yes",          "I see",       "alright",
      "how are you",   "really",      "tell me more", "sure thing", "no worries",  "that sounds nice",
      "good morning",  "I agree",     "not bad",    "see you soon"};
  return kPool;
}

inline constexpr std::array<const char*, 6> kSubjects{"i", "we", "my friend", "the kids", "my boss", "our neighbor"};
inline constexpr std::array<const char*, 8> kVerbs{"went to", "talked about", "looked at", "cleaned",
                                                   "fixed",   "visited",      "watched",   "forgot"};
inline constexpr std::array<const char*, 8> kObjects{"the store",  "the garden", "the movie", "the kitchen",
                                                     "the office", "the park",   "the game",  "the news"};
inline constexpr std::array<const char*, 5> kTails{"today", "yesterday", "again", "last week", "this morning"};

inline constexpr std::array<const char*, 4> kUserPlanted{"my {slot} is {key}", "i think my {slot} is {key}",
                                                         "by the way my {slot} is {key}", "you know my {slot} is {key}"};
inline constexpr std::array<const char*, 2> kAssistantPlanted{"so your {slot} is {key}", "got it your {slot} is {key}"};
inline constexpr std::array<const char*, 4> kUserDecoy{"his {slot} is {key}", "i think her {slot} is {key}",
                                                       "by the way his {slot} is {key}", "you know her {slot} is {key}"};
inline constexpr std::array<const char*, 2> kAssistantDecoy{"so his {slot} is {key}", "got it her {slot} is {key}"};

inline std::string key_token(int slot, int value) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%02d", value);
  return std::string(kSlotNames[static_cast<std::size_t>(slot)]) + buf;
}

inline std::string absent_token(int slot) { return std::string("no") + kSlotNames[static_cast<std::size_t>(slot)]; }

inline std::string fill_template(std::string_view tmpl, int slot, const std::string& key) {
  std::string out(tmpl);
  const auto replace = [&out](std::string_view what, const std::string& with) {
    const auto pos = out.find(what);
    if (pos != std::string::npos) out.replace(pos, what.size(), with);
  };
  replace("{slot}", kSlotNames[static_cast<std::size_t>(slot)]);
  replace("{key}", key);
  return out;
}

inline std::string distractor(Rng& rng) {
  if (rng.bernoulli(0.3)) {
    const auto& pool = standalone_distractors();
    return pool[rng.uniform_index(pool.size())];
  }
  std::string s = std::string(kSubjects[rng.uniform_index(kSubjects.size())]) + " " +
                  kVerbs[rng.uniform_index(kVerbs.size())] + " " + kObjects[rng.uniform_index(kObjects.size())];
  if (rng.bernoulli(0.5)) s += std::string(" ") + kTails[rng.uniform_index(kTails.size())];
  return s;
}

inline int keys_per_slot(const SyntheticSpec& spec) { return spec.vocab_size / spec.key_slots; }

// Response tokens that are planted keys (slot name plus two digits).
inline std::vector<std::string> response_keys(const Dialogue& d) {
  std::vector<std::string> keys;
  std::string tok;
  std::istringstream in(d.response);
  while (in >> tok)
    if (tok.size() > 2 && std::isdigit(static_cast<unsigned char>(tok.back())) && tok.rfind("no", 0) != 0)
      keys.push_back(tok);
  return keys;
}

// For each response token, the history index of the last turn containing it
// as a word, or 0 when no turn does (absent markers).
inline std::vector<int> response_sources(const Dialogue& d) {
  std::vector<int> out;
  std::string tok;
  std::istringstream in(d.response);
  while (in >> tok) {
    int src = 0;
    for (const auto& u : d.history) {
      std::istringstream words(u.text);
      std::string w;
      while (words >> w)
        if (w == tok) src = u.index;
    }
    out.push_back(src);
  }
  return out;
}

}  // namespace synthetic

inline void validate(const SyntheticSpec& spec) {
  const auto bad = [](const std::string& what) { return CorpusError("infeasible synthetic spec: " + what); };
  if (spec.n_dialogues < 0) throw bad("n_dialogues must be non-negative");
  if (spec.turns_range.first < 1 || spec.turns_range.first > spec.turns_range.second)
    throw bad("turns_range must be a non-empty range of positive counts");
  if (spec.n_causal_range.first < 1 || spec.n_causal_range.first > spec.n_causal_range.second)
    throw bad("n_causal_range must be a non-empty range of positive counts");
  if (spec.key_slots < 1 || spec.key_slots > static_cast<int>(synthetic::kSlotNames.size()))
    throw bad("key_slots must be in [1, 8]");
  if (spec.n_causal_range.second > spec.turns_range.first)
    throw bad("n_causal_range max exceeds turns_range min");
  if (spec.n_causal_range.second > spec.key_slots) throw bad("n_causal_range max exceeds key_slots");
  if (synthetic::keys_per_slot(spec) < 1) throw bad("vocab_size must be at least key_slots");
  if (synthetic::keys_per_slot(spec) > 100) throw bad("vocab_size allows at most 100 keys per slot");
  double total = 0.0;
  for (double w : spec.distance_bias) {
    if (!(w >= 0.0)) throw bad("distance_bias weights must be non-negative");
    total += w;
  }
  if (!(total > 0.0)) throw bad("distance_bias weights are all zero");
  int placeable = 0;
  for (int d = 0; d < spec.turns_range.first && d < static_cast<int>(spec.distance_bias.size()); ++d)
    if (spec.distance_bias[static_cast<std::size_t>(d)] > 0.0) ++placeable;
  if (placeable < spec.n_causal_range.second)
    throw bad("distance_bias has fewer positive distances than n_causal_range max within turns_range min");
  if (spec.n_decoy_range.first < 0 || spec.n_decoy_range.first > spec.n_decoy_range.second)
    throw bad("n_decoy_range must be a non-empty range of non-negative counts");
  if (spec.n_decoy_range.second > 0) {
    if (synthetic::keys_per_slot(spec) < 2) throw bad("decoys need at least two keys per slot");
    for (double w : spec.decoy_bias)
      if (!(w >= 0.0)) throw bad("decoy_bias weights must be non-negative");
  }
}

inline Corpus generate_synthetic(const SyntheticSpec& spec) {
  validate(spec);
  Rng rng(spec.seed);
  Corpus corpus;
  corpus.dialogues.reserve(static_cast<std::size_t>(spec.n_dialogues));
  const int per_slot = synthetic::keys_per_slot(spec);

  for (int n = 0; n < spec.n_dialogues; ++n) {
    const int turns = rng.uniform_int(spec.turns_range.first, spec.turns_range.second);
    const int n_causal = rng.uniform_int(spec.n_causal_range.first, spec.n_causal_range.second);

    // Weighted draw of planted distances without replacement.
    std::vector<double> weights(static_cast<std::size_t>(turns), 0.0);
    for (int d = 0; d < turns && d < static_cast<int>(spec.distance_bias.size()); ++d)
      weights[static_cast<std::size_t>(d)] = spec.distance_bias[static_cast<std::size_t>(d)];
    std::vector<int> planted;
    for (int k = 0; k < n_causal; ++k) {
      const auto d = rng.categorical(weights);
      weights[d] = 0.0;
      planted.push_back(turns - static_cast<int>(d));
    }

    // Decoys take free turns; a draw with no weight left ends placement.
    const int n_decoys = rng.uniform_int(spec.n_decoy_range.first, spec.n_decoy_range.second);
    std::vector<double> decoy_weights(static_cast<std::size_t>(turns), 0.0);
    for (int d = 0; d < turns && d < static_cast<int>(spec.decoy_bias.size()); ++d)
      decoy_weights[static_cast<std::size_t>(d)] = spec.decoy_bias[static_cast<std::size_t>(d)];
    for (int p : planted) decoy_weights[static_cast<std::size_t>(turns - p)] = 0.0;
    std::vector<int> decoys;
    for (int k = 0; k < n_decoys; ++k) {
      double left = 0.0;
      for (double w : decoy_weights) left += w;
      if (!(left > 0.0)) break;
      const auto d = rng.categorical(decoy_weights);
      decoy_weights[d] = 0.0;
      decoys.push_back(turns - static_cast<int>(d));
    }

    std::vector<int> slots(static_cast<std::size_t>(spec.key_slots));
    for (int s = 0; s < spec.key_slots; ++s) slots[static_cast<std::size_t>(s)] = s;
    rng.shuffle(slots.begin(), slots.end());

    Dialogue d;
    char idbuf[32];
    std::snprintf(idbuf, sizeof idbuf, "-%llu-%05d", static_cast<unsigned long long>(spec.seed), n);
    d.dialogue_id = spec.id_prefix + idbuf;
    d.instruction = spec.instruction;

    std::vector<int> slot_of_turn(static_cast<std::size_t>(turns) + 1, -1);
    std::vector<std::string> slot_value(static_cast<std::size_t>(spec.key_slots));
    for (std::size_t k = 0; k < planted.size(); ++k) {
      const int slot = slots[k];
      slot_of_turn[static_cast<std::size_t>(planted[k])] = slot;
      slot_value[static_cast<std::size_t>(slot)] = synthetic::key_token(slot, rng.uniform_int(0, per_slot - 1));
    }
    std::vector<std::string> decoy_text(static_cast<std::size_t>(turns) + 1);
    for (int i : decoys) {
      const int slot = rng.uniform_int(0, spec.key_slots - 1);
      std::string key;
      do key = synthetic::key_token(slot, rng.uniform_int(0, per_slot - 1));
      while (key == slot_value[static_cast<std::size_t>(slot)]);
      const bool user = (turns - i) % 2 == 0;
      const std::string_view tmpl =
          user ? synthetic::kUserDecoy[rng.uniform_index(synthetic::kUserDecoy.size())]
               : synthetic::kAssistantDecoy[rng.uniform_index(synthetic::kAssistantDecoy.size())];
      decoy_text[static_cast<std::size_t>(i)] = synthetic::fill_template(tmpl, slot, key);
    }

    for (int i = 1; i <= turns; ++i) {
      const Speaker sp = (turns - i) % 2 == 0 ? Speaker::user : Speaker::assistant;
      std::string text;
      const int slot = slot_of_turn[static_cast<std::size_t>(i)];
      if (slot >= 0) {
        const std::string_view tmpl =
            sp == Speaker::user ? synthetic::kUserPlanted[rng.uniform_index(synthetic::kUserPlanted.size())]
                                : synthetic::kAssistantPlanted[rng.uniform_index(synthetic::kAssistantPlanted.size())];
        text = synthetic::fill_template(tmpl, slot, slot_value[static_cast<std::size_t>(slot)]);
      } else if (!decoy_text[static_cast<std::size_t>(i)].empty()) {
        text = decoy_text[static_cast<std::size_t>(i)];
      } else {
        text = synthetic::distractor(rng);
      }
      d.history.push_back({i, sp, std::move(text)});
    }

    std::string response = spec.response_preamble;
    for (int s = 0; s < spec.key_slots; ++s) {
      if (!response.empty()) response += ' ';
      const auto& v = slot_value[static_cast<std::size_t>(s)];
      response += v.empty() ? synthetic::absent_token(s) : v;
    }
    d.response = std::move(response);
    std::sort(planted.begin(), planted.end());
    d.gold_causal = planted;
    corpus.dialogues.push_back(std::move(d));
  }
  return corpus;
}

}  // namespace cpd
