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
#include <cstdint>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "cpd/adapter.hpp"
#include "cpd/corpus.hpp"
#include "cpd/error.hpp"
#include "cpd/parallel.hpp"
#include "cpd/rng.hpp"
#include "cpd/tokenizer.hpp"

namespace cpd {

// Neutral utterances used to "remove" a turn without changing turn count.
struct FillerPool {
  std::vector<std::string> fillers;

  static FillerPool defaults() { return {{"hello", "thank you", "okay", "yes", "I see", "alright"}}; }

  void validate() const {
    if (fillers.empty()) throw Error("empty filler pool");
    for (const auto& f : fillers)
      if (trim(f).empty()) throw Error("filler pool contains an empty utterance");
  }

  // Entry whose word count is closest to `words`; ties go to the
  // lexicographically smallest text.
  const std::string& closest(std::size_t words) const {
    validate();
    const std::string* best = nullptr;
    std::size_t best_gap = std::numeric_limits<std::size_t>::max();
    for (const auto& f : fillers) {
      const std::size_t n = Vocabulary::count_words(f);
      const std::size_t gap = n > words ? n - words : words - n;
      if (gap < best_gap || (gap == best_gap && f < *best)) {
        best = &f;
        best_gap = gap;
      }
    }
    return *best;
  }
};

enum class SubstitutionSource { filler, foreign_noncausal, foreign_any, self };

inline std::string_view to_string(SubstitutionSource s) {
  switch (s) {
    case SubstitutionSource::filler: return "filler";
    case SubstitutionSource::foreign_noncausal: return "foreign_noncausal";
    case SubstitutionSource::foreign_any: return "foreign_any";
    case SubstitutionSource::self: return "self";
  }
  return "self";
}

// An utterance available for substitution into other dialogues.
struct ForeignUtterance {
  std::string dialogue_id;
  int index = 0;
  std::string text;

  std::string source_id() const { return dialogue_id + "#" + std::to_string(index); }
};

using UtterancePool = std::vector<ForeignUtterance>;

inline UtterancePool all_utterances(const Corpus& corpus) {
  UtterancePool pool;
  for (const auto& d : corpus.dialogues)
    for (const auto& u : d.history) pool.push_back({d.dialogue_id, u.index, u.text});
  return pool;
}

struct Substitution {
  int index = 0;  // 1-based history index
  std::string text;
  SubstitutionSource source = SubstitutionSource::self;
  std::string source_id;  // "<dialogue_id>#<index>" for foreign sources
};

// A base dialogue plus a set of turn replacements. Turn count and speaker
// labels are preserved; only texts change.
class CounterfactualDialogue {
 public:
  explicit CounterfactualDialogue(Dialogue base) : base_(std::move(base)) {}

  const Dialogue& base() const { return base_; }
  const std::vector<Substitution>& substitutions() const { return subs_; }

  void add(Substitution s) {
    if (s.index < 1 || s.index > base_.turns()) throw Error("substitution index out of range: " + std::to_string(s.index));
    for (const auto& o : subs_)
      if (o.index == s.index) throw Error("duplicate substitution index: " + std::to_string(s.index));
    subs_.push_back(std::move(s));
  }

  Dialogue realize() const {
    Dialogue d = base_;
    for (const auto& s : subs_) d.history[static_cast<std::size_t>(s.index - 1)].text = s.text;
    return d;
  }

 private:
  Dialogue base_;
  std::vector<Substitution> subs_;
};

// Where replacement texts come from. Only the members needed by the chosen
// policy have to be set.
struct SubstitutionContext {
  const FillerPool* fillers = nullptr;
  const UtterancePool* foreign = nullptr;
};

inline Substitution draw_substitution(const Dialogue& d, int index, SubstitutionSource policy,
                                      const SubstitutionContext& ctx, Rng& rng) {
  if (index < 1 || index > d.turns()) throw Error("history index out of range: " + std::to_string(index));
  const std::string& original = d.history[static_cast<std::size_t>(index - 1)].text;
  switch (policy) {
    case SubstitutionSource::self: return {index, original, policy, {}};
    case SubstitutionSource::filler: {
      if (!ctx.fillers) throw Error("filler policy needs a filler pool");
      return {index, ctx.fillers->closest(Vocabulary::count_words(original)), policy, {}};
    }
    case SubstitutionSource::foreign_noncausal:
    case SubstitutionSource::foreign_any: {
      if (!ctx.foreign || ctx.foreign->empty()) throw Error("empty foreign utterance pool");
      // Rejection sampling keeps the draw uniform over eligible entries.
      for (int attempt = 0; attempt < 64; ++attempt) {
        const auto& u = (*ctx.foreign)[rng.uniform_index(ctx.foreign->size())];
        if (u.dialogue_id != d.dialogue_id) return {index, u.text, policy, u.source_id()};
      }
      std::vector<const ForeignUtterance*> eligible;
      for (const auto& u : *ctx.foreign)
        if (u.dialogue_id != d.dialogue_id) eligible.push_back(&u);
      if (eligible.empty()) throw Error("foreign context contains no eligible utterance");
      const auto* u = eligible[rng.uniform_index(eligible.size())];
      return {index, u->text, policy, u->source_id()};
    }
  }
  throw Error("unknown substitution policy");
}

inline CounterfactualDialogue make_counterfactual(const Dialogue& d, int index, SubstitutionSource policy,
                                                  const SubstitutionContext& ctx, Rng& rng) {
  CounterfactualDialogue cf(d);
  cf.add(draw_substitution(d, index, policy, ctx, rng));
  return cf;
}

inline CounterfactualDialogue make_counterfactual(const Dialogue& d, int index, SubstitutionSource policy,
                                                  const SubstitutionContext& ctx, std::uint64_t seed) {
  Rng rng(seed);
  return make_counterfactual(d, index, policy, ctx, rng);
}

inline Dialogue with_fillers(const Dialogue& d, const std::vector<int>& indices, const FillerPool& fillers) {
  CounterfactualDialogue cf(d);
  Rng unused(0);
  const SubstitutionContext ctx{&fillers, nullptr};
  for (int i : indices) cf.add(draw_substitution(d, i, SubstitutionSource::filler, ctx, unused));
  return cf.realize();
}

struct TreatmentEffectProfile {
  double base_perplexity = 0.0;
  std::vector<double> te;
  std::vector<double> te_reg;
};

inline double treatment_effect(const ModelAdapter& adapter, const CounterfactualDialogue& cf, AttentionMode mode) {
  return response_perplexity(adapter, cf.base(), mode) - response_perplexity(adapter, cf.realize(), mode);
}

// f(D) - f(D with turn `index` replaced by the closest-length filler).
inline double treatment_effect(const ModelAdapter& adapter, const Dialogue& d, int index, AttentionMode mode,
                               const FillerPool& fillers = FillerPool::defaults()) {
  Rng unused(0);
  return treatment_effect(adapter, make_counterfactual(d, index, SubstitutionSource::filler, {&fillers, nullptr}, unused),
                          mode);
}

// One base evaluation plus one per history turn.
inline TreatmentEffectProfile te_profile(const ModelAdapter& adapter, const Dialogue& d, AttentionMode mode,
                                         const FillerPool& fillers = FillerPool::defaults()) {
  fillers.validate();
  TreatmentEffectProfile p;
  p.base_perplexity = response_perplexity(adapter, d, mode);
  const auto n = static_cast<std::size_t>(d.turns());
  p.te.resize(n);
  p.te_reg.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Dialogue cf = with_fillers(d, {static_cast<int>(i) + 1}, fillers);
    p.te[i] = p.base_perplexity - response_perplexity(adapter, cf, mode);
    p.te_reg[i] = p.te[i] / p.base_perplexity;
  }
  return p;
}

inline std::vector<TreatmentEffectProfile> te_profiles(const ModelAdapter& adapter, const Corpus& corpus,
                                                       AttentionMode mode,
                                                       const FillerPool& fillers = FillerPool::defaults()) {
  std::vector<TreatmentEffectProfile> out(corpus.size());
  parallel_for(corpus.size(), [&](std::size_t i) { out[i] = te_profile(adapter, corpus.dialogues[i], mode, fillers); });
  return out;
}

struct HeatmapCell {
  double mean = 0.0;      // mean te_reg
  double mean_abs = 0.0;  // mean |te_reg|
  std::size_t count = 0;

  bool empty() const { return count == 0; }
};

// Distances 0..max_distance-1 get their own row; the last row pools every
// distance >= max_distance.
struct HeatmapBucketing {
  int max_distance = 5;

  int rows() const { return max_distance + 1; }
  int row_of(int distance) const { return std::min(distance, max_distance); }
  std::string label(int row) const {
    return row < max_distance ? std::to_string(row) : ">=" + std::to_string(max_distance);
  }
};

struct HeatmapMatrix {
  static constexpr int kCausal = 0;
  static constexpr int kNonCausal = 1;

  HeatmapBucketing bucketing;
  std::vector<std::array<HeatmapCell, 2>> cells;  // [row][label]

  const HeatmapCell& at(int row, int label) const { return cells.at(static_cast<std::size_t>(row))[static_cast<std::size_t>(label)]; }

  // Empty cells leave the mean columns blank.
  void write_csv(std::ostream& out) const {
    out << "bucket,label,mean,count,mean_abs\n";
    for (int r = 0; r < bucketing.rows(); ++r)
      for (int l = 0; l < 2; ++l) {
        const HeatmapCell& c = at(r, l);
        out << bucketing.label(r) << ',' << (l == kCausal ? "causal" : "non_causal") << ',';
        if (!c.empty()) out << c.mean;
        out << ',' << c.count << ',';
        if (!c.empty()) out << c.mean_abs;
        out << '\n';
      }
  }
};

inline HeatmapMatrix aggregate_heatmap(const Corpus& corpus, const std::vector<TreatmentEffectProfile>& profiles,
                                       HeatmapBucketing bucketing) {
  if (profiles.size() != corpus.size()) throw Error("heatmap: profiles do not match corpus");
  HeatmapMatrix h;
  h.bucketing = bucketing;
  h.cells.resize(static_cast<std::size_t>(bucketing.rows()));
  std::vector<std::array<double, 2>> sum(h.cells.size(), {0.0, 0.0}), abs_sum(h.cells.size(), {0.0, 0.0});
  for (std::size_t k = 0; k < corpus.size(); ++k) {
    const Dialogue& d = corpus.dialogues[k];
    if (!d.gold_causal) throw Error("heatmap needs gold_causal labels (dialogue " + d.dialogue_id + ")");
    for (int i = 1; i <= d.turns(); ++i) {
      const auto row = static_cast<std::size_t>(bucketing.row_of(d.distance(i)));
      const auto label = static_cast<std::size_t>(d.is_gold_causal(i) ? HeatmapMatrix::kCausal : HeatmapMatrix::kNonCausal);
      const double v = profiles[k].te_reg[static_cast<std::size_t>(i - 1)];
      sum[row][label] += v;
      abs_sum[row][label] += std::abs(v);
      ++h.cells[row][label].count;
    }
  }
  for (std::size_t r = 0; r < h.cells.size(); ++r)
    for (std::size_t l = 0; l < 2; ++l) {
      HeatmapCell& c = h.cells[r][l];
      if (c.count) {
        c.mean = sum[r][l] / static_cast<double>(c.count);
        c.mean_abs = abs_sum[r][l] / static_cast<double>(c.count);
      }
    }
  return h;
}

inline HeatmapMatrix bias_heatmap(const ModelAdapter& adapter, const Corpus& probe, AttentionMode mode,
                                  HeatmapBucketing bucketing = {}, const FillerPool& fillers = FillerPool::defaults()) {
  for (const auto& d : probe.dialogues)
    if (!d.gold_causal) throw Error("heatmap needs gold_causal labels (dialogue " + d.dialogue_id + ")");
  return aggregate_heatmap(probe, te_profiles(adapter, probe, mode, fillers), bucketing);
}

// One-sided sign test: P(X >= wins) for X ~ Binomial(trials, 1/2).
inline double sign_test_p(std::size_t wins, std::size_t trials) {
  if (wins == 0) return 1.0;
  double p = 0.0;
  for (std::size_t k = wins; k <= trials; ++k) {
    const double log_choose = std::lgamma(static_cast<double>(trials) + 1) - std::lgamma(static_cast<double>(k) + 1) -
                              std::lgamma(static_cast<double>(trials - k) + 1);
    p += std::exp(log_choose - static_cast<double>(trials) * std::log(2.0));
  }
  return std::min(1.0, p);
}

// Mean response perplexity after perturbing n random causal turns, and after
// one further causal or non-causal perturbation, for n = 0..max_extra.
struct ProbeCurves {
  std::vector<double> base;
  std::vector<double> extra_causal;
  std::vector<double> extra_noncausal;
  std::vector<std::size_t> wins;    // dialogues where the causal extra raised perplexity more
  std::vector<std::size_t> trials;  // non-tied dialogues
  std::vector<double> sign_p;
  std::size_t dialogues = 0;

  void write_csv(std::ostream& out) const {
    out << "n,base,extra_causal,extra_noncausal,wins,trials,sign_p\n";
    for (std::size_t n = 0; n < base.size(); ++n)
      out << n << ',' << base[n] << ',' << extra_causal[n] << ',' << extra_noncausal[n] << ',' << wins[n] << ','
          << trials[n] << ',' << sign_p[n] << '\n';
  }
};

inline ProbeCurves independence_probe(const ModelAdapter& adapter, const Corpus& corpus, int max_extra,
                                      std::uint64_t seed, AttentionMode mode,
                                      const FillerPool& fillers = FillerPool::defaults()) {
  if (max_extra < 0) throw Error("independence probe: max_extra must be non-negative");
  std::vector<const Dialogue*> eligible;
  for (const auto& d : corpus.dialogues) {
    if (!d.gold_causal) continue;
    const auto n_causal = static_cast<int>(d.gold_causal->size());
    if (n_causal >= max_extra + 1 && n_causal < d.turns()) eligible.push_back(&d);
  }
  if (eligible.empty()) throw Error("independence probe: insufficient eligible dialogues");

  const std::size_t steps = static_cast<std::size_t>(max_extra) + 1;
  // [dialogue][n] -> (base, causal, noncausal)
  std::vector<std::vector<std::array<double, 3>>> results(eligible.size(), std::vector<std::array<double, 3>>(steps));
  const Rng root(seed);
  parallel_for(eligible.size(), [&](std::size_t k) {
    const Dialogue& d = *eligible[k];
    std::vector<int> noncausal;
    for (int i = 1; i <= d.turns(); ++i)
      if (!d.is_gold_causal(i)) noncausal.push_back(i);
    for (std::size_t n = 0; n < steps; ++n) {
      Rng rng = root.split(k * 1009 + n);
      std::vector<int> causal = *d.gold_causal;
      rng.shuffle(causal.begin(), causal.end());
      std::vector<int> chosen(causal.begin(), causal.begin() + static_cast<std::ptrdiff_t>(n));
      const int extra_c = causal[n];
      const int extra_s = noncausal[rng.uniform_index(noncausal.size())];
      auto with = [&](int extra) {
        std::vector<int> idx = chosen;
        if (extra > 0) idx.push_back(extra);
        return response_perplexity(adapter, with_fillers(d, idx, fillers), mode);
      };
      results[k][n] = {with(0), with(extra_c), with(extra_s)};
    }
  });

  ProbeCurves c;
  c.dialogues = eligible.size();
  for (std::size_t n = 0; n < steps; ++n) {
    std::array<double, 3> total{0.0, 0.0, 0.0};
    std::size_t wins = 0, trials = 0;
    for (const auto& r : results) {
      for (int j = 0; j < 3; ++j) total[static_cast<std::size_t>(j)] += r[n][static_cast<std::size_t>(j)];
      if (r[n][1] != r[n][2]) {
        ++trials;
        if (r[n][1] > r[n][2]) ++wins;
      }
    }
    const double m = static_cast<double>(eligible.size());
    c.base.push_back(total[0] / m);
    c.extra_causal.push_back(total[1] / m);
    c.extra_noncausal.push_back(total[2] / m);
    c.wins.push_back(wins);
    c.trials.push_back(trials);
    c.sign_p.push_back(sign_test_p(wins, trials));
  }
  return c;
}

}  // namespace cpd
