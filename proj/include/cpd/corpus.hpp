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
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "cpd/error.hpp"
#include "cpd/rng.hpp"

namespace cpd {

enum class Speaker { user, assistant };

inline std::string_view to_string(Speaker s) { return s == Speaker::user ? "user" : "assistant"; }

inline std::optional<Speaker> parse_speaker(std::string_view s) {
  if (s == "user") return Speaker::user;
  if (s == "assistant") return Speaker::assistant;
  return std::nullopt;
}

struct Utterance {
  int index = 0;  // 1-based turn position within the history
  Speaker speaker = Speaker::user;
  std::string text;

  bool operator==(const Utterance&) const = default;
};

struct Dialogue {
  std::string dialogue_id;
  std::optional<std::string> instruction;
  std::vector<Utterance> history;
  std::string response;
  std::optional<std::vector<int>> gold_causal;  // sorted, 1-based history indices

  int turns() const { return static_cast<int>(history.size()); }

  // Turn distance to the response; the last history utterance is at distance 0.
  int distance(int index) const { return turns() - index; }

  bool is_gold_causal(int index) const {
    return gold_causal && std::binary_search(gold_causal->begin(), gold_causal->end(), index);
  }

  bool operator==(const Dialogue&) const = default;
};

enum class SplitTag { train, valid, test, unsplit };

inline std::string_view to_string(SplitTag t) {
  switch (t) {
    case SplitTag::train: return "train";
    case SplitTag::valid: return "valid";
    case SplitTag::test: return "test";
    case SplitTag::unsplit: return "unsplit";
  }
  return "unsplit";
}

struct Corpus {
  std::vector<Dialogue> dialogues;
  SplitTag split_tag = SplitTag::unsplit;

  std::size_t size() const { return dialogues.size(); }
  bool empty() const { return dialogues.empty(); }

  bool operator==(const Corpus&) const = default;
};

inline std::string trim(std::string_view s) {
  const auto* ws = " \t\r\n\f\v";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(ws);
  return std::string(s.substr(b, e - b + 1));
}

namespace detail {

inline CorpusError record_error(std::size_t line, const std::string& what) {
  return CorpusError("line " + std::to_string(line) + ": " + what);
}

// Checks every Dialogue invariant; throws CorpusError tagged with `line`.
inline void validate_dialogue(const Dialogue& d, std::size_t line) {
  if (d.history.empty()) throw record_error(line, "empty history");
  for (std::size_t i = 0; i < d.history.size(); ++i) {
    if (d.history[i].index != static_cast<int>(i) + 1)
      throw record_error(line, "history indices must be consecutive from 1");
    if (trim(d.history[i].text).empty())
      throw record_error(line, "empty utterance text at turn " + std::to_string(i + 1));
  }
  if (trim(d.response).empty()) throw record_error(line, "missing response");
  if (d.gold_causal) {
    for (int g : *d.gold_causal)
      if (g < 1 || g > d.turns())
        throw record_error(line, "gold index out of range: " + std::to_string(g));
  }
}

}  // namespace detail

struct LoadOptions {
  bool expect_gold = false;
  // Applied to records that carry no instruction of their own.
  std::optional<std::string> default_instruction;
};

inline Dialogue parse_dialogue_record(const nlohmann::json& j, std::size_t line) {
  using detail::record_error;
  if (!j.is_object()) throw record_error(line, "malformed record: expected a JSON object");
  Dialogue d;
  if (!j.contains("dialogue_id") || !j["dialogue_id"].is_string())
    throw record_error(line, "malformed record: missing string field \"dialogue_id\"");
  d.dialogue_id = j["dialogue_id"].get<std::string>();
  if (j.contains("instruction") && !j["instruction"].is_null()) {
    if (!j["instruction"].is_string()) throw record_error(line, "malformed record: instruction must be a string");
    d.instruction = j["instruction"].get<std::string>();
  }
  if (!j.contains("turns") || !j["turns"].is_array())
    throw record_error(line, "malformed record: missing array field \"turns\"");
  for (const auto& t : j["turns"]) {
    if (!t.is_object() || !t.contains("speaker") || !t.contains("text") || !t["speaker"].is_string() ||
        !t["text"].is_string())
      throw record_error(line, "malformed record: turn needs string \"speaker\" and \"text\"");
    const auto sp = parse_speaker(t["speaker"].get<std::string>());
    if (!sp) throw record_error(line, "malformed record: unknown speaker \"" + t["speaker"].get<std::string>() + "\"");
    d.history.push_back({static_cast<int>(d.history.size()) + 1, *sp, t["text"].get<std::string>()});
  }
  if (d.history.empty()) throw record_error(line, "empty history");
  if (j.contains("response") && !j["response"].is_null()) {
    if (!j["response"].is_string()) throw record_error(line, "malformed record: response must be a string");
    d.response = j["response"].get<std::string>();
  } else if (d.history.back().speaker == Speaker::assistant) {
    d.response = d.history.back().text;
    d.history.pop_back();
  } else {
    throw record_error(line, "missing response");
  }
  if (j.contains("gold_causal") && !j["gold_causal"].is_null()) {
    if (!j["gold_causal"].is_array()) throw record_error(line, "malformed record: gold_causal must be an array");
    std::vector<int> gold;
    for (const auto& g : j["gold_causal"]) {
      if (!g.is_number_integer()) throw record_error(line, "malformed record: gold_causal entries must be integers");
      gold.push_back(g.get<int>());
    }
    std::sort(gold.begin(), gold.end());
    gold.erase(std::unique(gold.begin(), gold.end()), gold.end());
    d.gold_causal = std::move(gold);
  }
  detail::validate_dialogue(d, line);
  return d;
}

inline nlohmann::json to_json(const Dialogue& d) {
  nlohmann::json j;
  j["dialogue_id"] = d.dialogue_id;
  if (d.instruction) j["instruction"] = *d.instruction;
  nlohmann::json turns = nlohmann::json::array();
  for (const auto& u : d.history) turns.push_back({{"speaker", to_string(u.speaker)}, {"text", u.text}});
  j["turns"] = std::move(turns);
  j["response"] = d.response;
  if (d.gold_causal) j["gold_causal"] = *d.gold_causal;
  return j;
}

// Parses line-delimited dialogue records. Blank lines are skipped.
inline Corpus parse_corpus(std::istream& in, const LoadOptions& opts = {}) {
  Corpus corpus;
  std::unordered_set<std::string> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw detail::record_error(lineno, std::string("malformed record: ") + e.what());
    }
    Dialogue d = parse_dialogue_record(j, lineno);
    if (!d.instruction && opts.default_instruction) d.instruction = opts.default_instruction;
    if (opts.expect_gold && !d.gold_causal) throw detail::record_error(lineno, "missing gold_causal");
    if (!seen.insert(d.dialogue_id).second)
      throw detail::record_error(lineno, "duplicate dialogue_id \"" + d.dialogue_id + "\"");
    corpus.dialogues.push_back(std::move(d));
  }
  return corpus;
}

inline Corpus load_corpus(const std::filesystem::path& path, const LoadOptions& opts = {}) {
  std::ifstream in(path);
  if (!in) throw CorpusError("cannot open corpus file: " + path.string());
  return parse_corpus(in, opts);
}

inline Corpus load_corpus(const std::filesystem::path& path, bool expect_gold) {
  LoadOptions opts;
  opts.expect_gold = expect_gold;
  return load_corpus(path, opts);
}

inline void write_corpus(std::ostream& out, const Corpus& corpus) {
  for (const auto& d : corpus.dialogues) out << to_json(d).dump() << '\n';
}

inline void save_corpus(const Corpus& corpus, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw CorpusError("cannot write corpus file: " + path.string());
  write_corpus(out, corpus);
}

struct CorpusSplits {
  Corpus train;
  Corpus valid;
  Corpus test;
};

// Seeded partition. valid/test sizes are floor(n * ratio); train takes the
// remainder. Members keep their original corpus order within each split.
inline CorpusSplits split_corpus(const Corpus& corpus, const std::array<double, 3>& ratios, std::uint64_t seed) {
  if (corpus.empty()) throw CorpusError("cannot split an empty corpus");
  double sum = 0.0;
  for (double r : ratios) {
    if (!(r >= 0.0)) throw CorpusError("split ratios must be non-negative");
    sum += r;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw CorpusError("split ratios must sum to 1");

  const std::size_t n = corpus.size();
  // The epsilon absorbs representation error such as 10 * 0.7 = 6.9999...
  const auto floor_share = [n](double r) {
    return static_cast<std::size_t>(std::floor(static_cast<double>(n) * r + 1e-9));
  };
  const std::size_t n_valid = floor_share(ratios[1]);
  const std::size_t n_test = floor_share(ratios[2]);

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order.begin(), order.end());

  std::vector<int> assignment(n, 0);
  for (std::size_t k = 0; k < n_valid; ++k) assignment[order[k]] = 1;
  for (std::size_t k = n_valid; k < n_valid + n_test; ++k) assignment[order[k]] = 2;

  CorpusSplits out;
  out.train.split_tag = SplitTag::train;
  out.valid.split_tag = SplitTag::valid;
  out.test.split_tag = SplitTag::test;
  for (std::size_t i = 0; i < n; ++i) {
    Corpus& dst = assignment[i] == 0 ? out.train : assignment[i] == 1 ? out.valid : out.test;
    dst.dialogues.push_back(corpus.dialogues[i]);
  }
  return out;
}

// Writes train/valid/test JSONL files plus manifest.json listing the ids of
// each split.
inline void save_splits(const CorpusSplits& splits, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  const std::array<std::pair<const char*, const Corpus*>, 3> parts{
      {{"train", &splits.train}, {"valid", &splits.valid}, {"test", &splits.test}}};
  for (const auto& [name, c] : parts) {
    save_corpus(*c, dir / (std::string(name) + ".jsonl"));
    nlohmann::json ids = nlohmann::json::array();
    for (const auto& d : c->dialogues) ids.push_back(d.dialogue_id);
    manifest[name] = std::move(ids);
  }
  std::ofstream out(dir / "manifest.json");
  out << manifest.dump(2) << '\n';
}

}  // namespace cpd
