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
#include <cctype>
#include <cmath>
#include <map>
#include <ostream>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "cpd/error.hpp"

namespace cpd {

using Tokens = std::vector<std::string>;

// Lowercase, split on whitespace, and split every punctuation character into
// its own token.
inline Tokens metric_tokens(std::string_view text) {
  Tokens out;
  std::string cur;
  const auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      flush();
    } else if (std::ispunct(c)) {
      flush();
      out.emplace_back(1, ch);
    } else {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  flush();
  return out;
}

namespace detail {

inline std::map<Tokens, int> ngram_counts(const Tokens& toks, int n) {
  std::map<Tokens, int> out;
  for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= toks.size(); ++i)
    ++out[Tokens(toks.begin() + static_cast<std::ptrdiff_t>(i), toks.begin() + static_cast<std::ptrdiff_t>(i) + n)];
  return out;
}

}  // namespace detail

// Sentence BLEU: geometric mean of add-one smoothed clipped precisions for
// orders 1..n, times the brevity penalty.
inline double bleu_n(const Tokens& candidate, const Tokens& reference, int n) {
  if (n < 1 || n > 4) throw Error("bleu_n: n must be in [1, 4]");
  if (reference.empty()) throw Error("bleu_n: empty reference");
  if (candidate.empty()) return 0.0;
  double log_p = 0.0;
  for (int k = 1; k <= n; ++k) {
    const auto cand = detail::ngram_counts(candidate, k);
    const auto ref = detail::ngram_counts(reference, k);
    double match = 0.0, total = 0.0;
    for (const auto& [g, c] : cand) {
      total += c;
      auto it = ref.find(g);
      if (it != ref.end()) match += std::min(c, it->second);
    }
    log_p += std::log((match + 1.0) / (total + 1.0));
  }
  const double c = static_cast<double>(candidate.size()), r = static_cast<double>(reference.size());
  const double bp = c >= r ? 1.0 : std::exp(1.0 - r / c);
  return bp * std::exp(log_p / n);
}

inline std::size_t lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline double rouge_l(const Tokens& candidate, const Tokens& reference) {
  if (reference.empty()) throw Error("rouge_l: empty reference");
  if (candidate.empty()) return 0.0;
  const double l = static_cast<double>(lcs_length(candidate, reference));
  if (l == 0.0) return 0.0;
  const double p = l / static_cast<double>(candidate.size()), r = l / static_cast<double>(reference.size());
  return 2.0 * p * r / (p + r);
}

inline double distinct_n(const std::vector<Tokens>& corpus, int n) {
  if (n < 1) throw Error("distinct_n: n must be >= 1");
  std::set<Tokens> unique;
  std::size_t total = 0;
  for (const auto& toks : corpus)
    for (const auto& [g, c] : detail::ngram_counts(toks, n)) {
      unique.insert(g);
      total += static_cast<std::size_t>(c);
    }
  if (total == 0) throw Error("distinct_n: no " + std::to_string(n) + "-grams in corpus");
  return static_cast<double>(unique.size()) / static_cast<double>(total);
}

struct MetricReport {
  double bleu1 = 0.0, bleu2 = 0.0, rouge_l = 0.0, distinct1 = 0.0, distinct2 = 0.0;
  std::size_t samples = 0;

  nlohmann::json to_json() const {
    return {{"BLEU-1", bleu1}, {"BLEU-2", bleu2}, {"ROUGE-L", rouge_l}, {"Distinct-1", distinct1},
            {"Distinct-2", distinct2}, {"samples", samples}};
  }

  static void write_csv_header(std::ostream& out) { out << "model,BLEU-1,BLEU-2,ROUGE-L,Distinct-1,Distinct-2,samples\n"; }

  void write_csv_row(std::ostream& out, std::string_view model) const {
    out << model << ',' << bleu1 << ',' << bleu2 << ',' << rouge_l << ',' << distinct1 << ',' << distinct2 << ','
        << samples << '\n';
  }
};

// Distinct-2 is reported as 0 when the corpus has no bigrams.
inline MetricReport evaluate_corpus(const std::vector<std::string>& generated, const std::vector<std::string>& gold) {
  if (generated.size() != gold.size()) throw Error("evaluate_corpus: generated and gold lists differ in length");
  if (generated.empty()) throw Error("evaluate_corpus: no samples");
  MetricReport rep;
  rep.samples = generated.size();
  std::vector<Tokens> cands;
  for (std::size_t i = 0; i < generated.size(); ++i) {
    Tokens c = metric_tokens(generated[i]), r = metric_tokens(gold[i]);
    rep.bleu1 += bleu_n(c, r, 1);
    rep.bleu2 += bleu_n(c, r, 2);
    rep.rouge_l += rouge_l(c, r);
    cands.push_back(std::move(c));
  }
  const double n = static_cast<double>(generated.size());
  rep.bleu1 /= n;
  rep.bleu2 /= n;
  rep.rouge_l /= n;
  rep.distinct1 = distinct_n(cands, 1);
  try {
    rep.distinct2 = distinct_n(cands, 2);
  } catch (const Error&) {
    rep.distinct2 = 0.0;
  }
  return rep;
}

}  // namespace cpd
