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

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cpd/adapter.hpp"
#include "cpd/corpus.hpp"
#include "cpd/perturbation.hpp"
#include "cpd/stats.hpp"
#include "cpd/synthetic.hpp"
#include "cpd/tokenizer.hpp"

namespace cpd {

// Vocabulary covering a synthetic training split plus every key, absent
// marker and filler, so held-out sets never hit <unk>.
inline Vocabulary synthetic_vocabulary(const Corpus& train, const SyntheticSpec& spec,
                                       const FillerPool& fillers = FillerPool::defaults()) {
  std::vector<std::string> extra;
  for (int s = 0; s < spec.key_slots; ++s) {
    extra.push_back(synthetic::absent_token(s));
    for (int v = 0; v < synthetic::keys_per_slot(spec); ++v) extra.push_back(synthetic::key_token(s, v));
  }
  for (const auto& f : fillers.fillers) extra.push_back(f);
  if (!spec.response_preamble.empty()) extra.push_back(spec.response_preamble);
  return Vocabulary::fit(train, extra);
}

// Teacher-forced argmax accuracy on response tokens copied from the history,
// split by the turn distance of their source.
struct CopyAccuracy {
  int far_from = 5;
  std::size_t far_hits = 0, far_total = 0, near_hits = 0, near_total = 0;

  double far() const { return far_total ? static_cast<double>(far_hits) / static_cast<double>(far_total) : 0.0; }
  double near() const { return near_total ? static_cast<double>(near_hits) / static_cast<double>(near_total) : 0.0; }

  nlohmann::json to_json() const {
    return {{"far_from", far_from}, {"far_accuracy", far()}, {"far_tokens", far_total},
            {"near_accuracy", near()}, {"near_tokens", near_total}};
  }
};

inline CopyAccuracy copy_accuracy(const ModelAdapter& adapter, const Corpus& corpus, AttentionMode mode,
                                  int far_from = 5) {
  CopyAccuracy acc;
  acc.far_from = far_from;
  for (const auto& d : corpus.dialogues) {
    const auto hits = response_token_hits(adapter, d, mode);
    const auto src = synthetic::response_sources(d);
    if (src.size() != hits.size()) throw Error("copy_accuracy: response tokenization differs for " + d.dialogue_id);
    for (std::size_t t = 0; t < hits.size(); ++t) {
      if (!src[t]) continue;
      const bool far = d.distance(src[t]) >= far_from;
      (far ? acc.far_total : acc.near_total) += 1;
      if (hits[t]) (far ? acc.far_hits : acc.near_hits) += 1;
    }
  }
  return acc;
}

// AUC of -te_reg for gold-causal versus non-causal turns.
inline double separation_auc(const Corpus& corpus, const std::vector<TreatmentEffectProfile>& profiles) {
  if (profiles.size() != corpus.size()) throw Error("separation_auc: profiles do not match corpus");
  std::vector<double> pos, neg;
  for (std::size_t k = 0; k < corpus.size(); ++k) {
    const Dialogue& d = corpus.dialogues[k];
    if (!d.gold_causal) throw Error("separation_auc needs gold labels (dialogue " + d.dialogue_id + ")");
    for (int i = 1; i <= d.turns(); ++i)
      (d.is_gold_causal(i) ? pos : neg).push_back(-profiles[k].te_reg[static_cast<std::size_t>(i - 1)]);
  }
  return stats::auc(pos, neg);
}

}  // namespace cpd
