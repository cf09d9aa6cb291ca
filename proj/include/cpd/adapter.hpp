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

#include <cmath>
#include <span>
#include <string_view>
#include <vector>

#include "cpd/autograd.hpp"
#include "cpd/corpus.hpp"
#include "cpd/error.hpp"
#include "cpd/position_control.hpp"
#include "cpd/tokenizer.hpp"

namespace cpd {

// Teacher-forced next-token distributions over the gold response: row t is
// p(r_t | instruction, history, r_1..r_{t-1}).
struct ResponseDistribution {
  Matrix probs;           // response tokens x vocabulary, row-stochastic
  std::vector<int> gold;  // gold token id per row

  std::size_t positions() const { return gold.size(); }
};

// Contract every analysis consumes. A third-party backbone satisfies it by
// tokenizing text and returning teacher-forced response distributions.
class ModelAdapter {
 public:
  virtual ~ModelAdapter() = default;

  virtual TokenSequence tokenize(std::string_view text) const = 0;

  virtual ResponseDistribution response_distributions(const Dialogue& dialogue, AttentionMode mode) const = 0;

  // Per response token -log p(gold). Overridden where a direct log-space
  // computation is available.
  virtual std::vector<double> response_nll(const Dialogue& dialogue, AttentionMode mode) const {
    const ResponseDistribution dist = response_distributions(dialogue, mode);
    std::vector<double> out(dist.positions());
    for (std::size_t t = 0; t < out.size(); ++t)
      out[t] = -std::log(dist.probs(static_cast<Eigen::Index>(t), dist.gold[t]));
    return out;
  }

  virtual bool supports(AttentionMode) const { return true; }
  virtual bool trainable() const { return false; }
};

inline std::vector<double> response_nll(const ModelAdapter& adapter, const Dialogue& dialogue, AttentionMode mode) {
  if (!adapter.supports(mode)) throw ModelError("adapter does not support attention mode " + std::string(to_string(mode)));
  return adapter.response_nll(dialogue, mode);
}

inline ResponseDistribution response_distributions(const ModelAdapter& adapter, const Dialogue& dialogue,
                                                   AttentionMode mode) {
  if (!adapter.supports(mode)) throw ModelError("adapter does not support attention mode " + std::string(to_string(mode)));
  return adapter.response_distributions(dialogue, mode);
}

// exp(mean NLL) over response tokens.
inline double perplexity(std::span<const double> nlls) {
  if (nlls.empty()) throw Error("perplexity of an empty NLL list");
  double total = 0.0;
  for (double v : nlls) total += v;
  return std::exp(total / static_cast<double>(nlls.size()));
}

inline double response_perplexity(const ModelAdapter& adapter, const Dialogue& dialogue, AttentionMode mode) {
  const auto nll = response_nll(adapter, dialogue, mode);
  return perplexity(nll);
}

// Per response token: does the teacher-forced argmax equal the gold token?
inline std::vector<bool> response_token_hits(const ModelAdapter& adapter, const Dialogue& dialogue, AttentionMode mode) {
  const ResponseDistribution dist = response_distributions(adapter, dialogue, mode);
  std::vector<bool> out(dist.positions());
  for (std::size_t t = 0; t < out.size(); ++t) {
    Eigen::Index best = 0;
    dist.probs.row(static_cast<Eigen::Index>(t)).maxCoeff(&best);
    out[t] = best == dist.gold[t];
  }
  return out;
}

}  // namespace cpd
