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
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "cpd/corpus.hpp"
#include "cpd/error.hpp"

namespace cpd {

struct TokenSequence {
  std::vector<int> token_ids;
  std::vector<int> segment_of;  // non-decreasing

  std::size_t size() const { return token_ids.size(); }
  bool empty() const { return token_ids.empty(); }
  bool operator==(const TokenSequence&) const = default;
};

// A token with its character span [begin, end) in the source text.
struct TokenSpan {
  int id = 0;
  std::size_t begin = 0;
  std::size_t end = 0;
};

// Whitespace word vocabulary. Ids 0..4 are reserved: the unknown token and
// the segment tags used when rendering prompts.
class Vocabulary {
 public:
  static constexpr int kUnk = 0;
  static constexpr int kInstructionTag = 1;
  static constexpr int kUserTag = 2;
  static constexpr int kAssistantTag = 3;
  static constexpr int kResponseTag = 4;

  static constexpr std::string_view kUnkText = "<unk>";
  static constexpr std::string_view kInstructionText = "<inst>";
  static constexpr std::string_view kUserText = "<user>";
  static constexpr std::string_view kAssistantText = "<assistant>";
  static constexpr std::string_view kResponseText = "<resp>";

  Vocabulary() {
    for (auto s : {kUnkText, kInstructionText, kUserText, kAssistantText, kResponseText}) add(s);
  }

  // Tokens in first-appearance order over instructions, turns and responses,
  // followed by any extra texts (e.g. a filler pool).
  static Vocabulary fit(const Corpus& corpus, std::span<const std::string> extra_texts = {}) {
    Vocabulary v;
    const auto add_words = [&v](std::string_view text) {
      for_each_word(text, [&v](std::string_view w, std::size_t, std::size_t) { v.add(w); });
    };
    for (const auto& d : corpus.dialogues) {
      if (d.instruction) add_words(*d.instruction);
      for (const auto& u : d.history) add_words(u.text);
      add_words(d.response);
    }
    for (const auto& t : extra_texts) add_words(t);
    return v;
  }

  int size() const { return static_cast<int>(tokens_.size()); }

  int id(std::string_view token) const {
    const auto it = index_.find(std::string(token));
    return it == index_.end() ? kUnk : it->second;
  }

  bool contains(std::string_view token) const { return index_.count(std::string(token)) != 0; }

  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }

  TokenSequence tokenize(std::string_view text) const {
    TokenSequence seq;
    for_each_word(text, [&](std::string_view w, std::size_t, std::size_t) {
      seq.token_ids.push_back(id(w));
      seq.segment_of.push_back(0);
    });
    return seq;
  }

  std::vector<TokenSpan> tokenize_with_offsets(std::string_view text) const {
    std::vector<TokenSpan> out;
    for_each_word(text, [&](std::string_view w, std::size_t b, std::size_t e) { out.push_back({id(w), b, e}); });
    return out;
  }

  std::string detokenize(std::span<const int> ids) const {
    std::string out;
    for (int i : ids) {
      if (!out.empty()) out += ' ';
      out += token(i);
    }
    return out;
  }

  static std::size_t count_words(std::string_view text) {
    std::size_t n = 0;
    for_each_word(text, [&n](std::string_view, std::size_t, std::size_t) { ++n; });
    return n;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw ModelError("cannot write vocabulary: " + path.string());
    for (const auto& t : tokens_) out << t << '\n';
  }

  static Vocabulary load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ModelError("cannot read vocabulary: " + path.string());
    Vocabulary v;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
      if (n < 5) {
        if (line != v.tokens_[n]) throw ModelError("vocabulary file has unexpected reserved token: " + line);
      } else {
        v.add(line);
      }
      ++n;
    }
    return v;
  }

  bool operator==(const Vocabulary& o) const { return tokens_ == o.tokens_; }

 private:
  template <class F>
  static void for_each_word(std::string_view text, F&& f) {
    std::size_t i = 0;
    const auto is_space = [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; };
    while (i < text.size()) {
      while (i < text.size() && is_space(text[i])) ++i;
      const std::size_t b = i;
      while (i < text.size() && !is_space(text[i])) ++i;
      if (i > b) f(text.substr(b, i - b), b, i);
    }
  }

  void add(std::string_view token) {
    std::string t(token);
    if (index_.count(t)) return;
    index_.emplace(t, static_cast<int>(tokens_.size()));
    tokens_.push_back(std::move(t));
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

enum class SegmentKind { instruction, utterance, response };

// Character span of one prompt segment.
struct SegmentSpan {
  SegmentKind kind = SegmentKind::utterance;
  int utterance_index = 0;  // 1-based for utterances, 0 otherwise
  std::size_t begin = 0;
  std::size_t end = 0;
};

// Rendered prompt text: optional instruction block, one block per history
// utterance (speaker tag + text), then the response block (response tag +
// response-so-far). Blocks are separated by a single space.
struct PromptLayout {
  std::string text;
  std::vector<SegmentSpan> segments;
};

inline PromptLayout render_prompt(const Dialogue& d, std::string_view response_prefix) {
  PromptLayout layout;
  const auto append = [&layout](SegmentKind kind, int idx, std::string_view tag, std::string_view body) {
    if (!layout.text.empty()) layout.text += ' ';
    SegmentSpan span{kind, idx, layout.text.size(), 0};
    layout.text += tag;
    if (!body.empty()) {
      layout.text += ' ';
      layout.text += body;
    }
    span.end = layout.text.size();
    layout.segments.push_back(span);
  };
  if (d.instruction) append(SegmentKind::instruction, 0, Vocabulary::kInstructionText, trim(*d.instruction));
  for (const auto& u : d.history)
    append(SegmentKind::utterance, u.index,
           u.speaker == Speaker::user ? Vocabulary::kUserText : Vocabulary::kAssistantText, trim(u.text));
  append(SegmentKind::response, 0, Vocabulary::kResponseText, trim(response_prefix));
  return layout;
}

}  // namespace cpd
