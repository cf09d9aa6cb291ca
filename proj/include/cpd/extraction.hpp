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
#include <cmath>
#include <fstream>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cpd/adapter.hpp"
#include "cpd/corpus.hpp"
#include "cpd/error.hpp"
#include "cpd/parallel.hpp"
#include "cpd/perturbation.hpp"

namespace cpd {

struct KMeansResult {
  std::vector<int> set1;  // 0-based indices, cluster anchored at the minimum
  std::vector<int> set2;
  double center1 = 0.0;
  double center2 = 0.0;
  int iterations = 0;
  bool degenerate = false;  // every value identical
};

// Two-cluster Lloyd iteration on scalars. Centers start at the minimum and
// the upper median; ties in distance go to the min-anchored cluster.
inline KMeansResult kmeans_1d(std::span<const double> values, int max_iterations = 100) {
  if (values.empty()) throw Error("kmeans_1d: empty input");
  const std::size_t n = values.size();
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  KMeansResult r;
  const std::size_t argmin = static_cast<std::size_t>(std::min_element(values.begin(), values.end()) - values.begin());
  if (sorted.front() == sorted.back()) {
    r.degenerate = true;
    r.center1 = r.center2 = sorted.front();
    for (std::size_t i = 0; i < n; ++i) (i == argmin ? r.set1 : r.set2).push_back(static_cast<int>(i));
    return r;
  }
  double c1 = sorted.front(), c2 = sorted[n / 2];
  std::vector<char> in1(n, 0), prev;
  for (int it = 0; it < max_iterations; ++it) {
    for (std::size_t i = 0; i < n; ++i) in1[i] = std::abs(values[i] - c1) <= std::abs(values[i] - c2) ? 1 : 0;
    r.iterations = it + 1;
    if (in1 == prev) break;
    prev = in1;
    double s1 = 0.0, s2 = 0.0, k1 = 0.0, k2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (in1[i]) {
        s1 += values[i];
        k1 += 1.0;
      } else {
        s2 += values[i];
        k2 += 1.0;
      }
    }
    if (k1 > 0) c1 = s1 / k1;
    if (k2 > 0) c2 = s2 / k2;
  }
  // Lloyd steps keep the minimum with the lower center, but make it explicit.
  if (!in1[argmin])
    for (auto& b : in1) b = static_cast<char>(!b);
  for (std::size_t i = 0; i < n; ++i) (in1[i] ? r.set1 : r.set2).push_back(static_cast<int>(i));
  r.center1 = c1;
  r.center2 = c2;
  return r;
}

struct CausalPartition {
  std::vector<int> causal;     // sorted 1-based history indices
  std::vector<int> noncausal;  // sorted 1-based history indices
  bool degenerate = false;

  bool is_causal(int index) const { return std::binary_search(causal.begin(), causal.end(), index); }
  int turns() const { return static_cast<int>(causal.size() + noncausal.size()); }
};

inline CausalPartition partition_from_causal(int turns, std::vector<int> causal, bool degenerate = false) {
  std::sort(causal.begin(), causal.end());
  causal.erase(std::unique(causal.begin(), causal.end()), causal.end());
  CausalPartition p;
  for (int c : causal)
    if (c < 1 || c > turns) throw Error("causal index out of range: " + std::to_string(c));
  p.causal = std::move(causal);
  for (int i = 1; i <= turns; ++i)
    if (!p.is_causal(i)) p.noncausal.push_back(i);
  p.degenerate = degenerate;
  return p;
}

inline CausalPartition gold_partition(const Dialogue& d) {
  if (!d.gold_causal) throw Error("dialogue " + d.dialogue_id + " has no gold_causal labels");
  return partition_from_causal(d.turns(), *d.gold_causal);
}

inline CausalPartition partition_profile(const TreatmentEffectProfile& profile) {
  const auto& te = profile.te;
  if (te.empty()) return {};
  const auto [lo, hi] = std::minmax_element(te.begin(), te.end());
  const double tol = 1e-9 * std::max(1.0, std::abs(profile.base_perplexity));
  if (*hi - *lo < tol) return partition_from_causal(static_cast<int>(te.size()), {static_cast<int>(lo - te.begin()) + 1}, true);
  const KMeansResult km = kmeans_1d(te);
  std::vector<int> causal;
  for (int i : km.set1) causal.push_back(i + 1);
  return partition_from_causal(static_cast<int>(te.size()), std::move(causal), km.degenerate);
}

struct ExtractionRecord {
  std::string dialogue_id;
  TreatmentEffectProfile profile;
  CausalPartition partition;
};

inline ExtractionRecord extract_causal(const ModelAdapter& adapter, const Dialogue& d,
                                       AttentionMode mode = AttentionMode::local_position,
                                       const FillerPool& fillers = FillerPool::defaults()) {
  ExtractionRecord r{d.dialogue_id, te_profile(adapter, d, mode, fillers), {}};
  r.partition = partition_profile(r.profile);
  return r;
}

inline std::vector<ExtractionRecord> extract_corpus(const ModelAdapter& adapter, const Corpus& corpus,
                                                    AttentionMode mode = AttentionMode::local_position,
                                                    const FillerPool& fillers = FillerPool::defaults()) {
  std::vector<ExtractionRecord> out(corpus.size());
  parallel_for(corpus.size(), [&](std::size_t i) { out[i] = extract_causal(adapter, corpus.dialogues[i], mode, fillers); });
  return out;
}

inline std::vector<CausalPartition> partitions_of(const std::vector<ExtractionRecord>& records) {
  std::vector<CausalPartition> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(r.partition);
  return out;
}

inline nlohmann::json to_json(const ExtractionRecord& r) {
  return {{"dialogue_id", r.dialogue_id},
          {"base_perplexity", r.profile.base_perplexity},
          {"te", r.profile.te},
          {"te_reg", r.profile.te_reg},
          {"causal", r.partition.causal},
          {"degenerate", r.partition.degenerate}};
}

inline void write_extractions(std::ostream& out, const std::vector<ExtractionRecord>& records) {
  for (const auto& r : records) out << to_json(r).dump() << '\n';
}

inline std::vector<ExtractionRecord> read_extractions(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open extraction file " + path.string());
  std::vector<ExtractionRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      ExtractionRecord r;
      r.dialogue_id = j.at("dialogue_id").get<std::string>();
      r.profile.base_perplexity = j.value("base_perplexity", 0.0);
      r.profile.te = j.at("te").get<std::vector<double>>();
      r.profile.te_reg = j.at("te_reg").get<std::vector<double>>();
      r.partition = partition_from_causal(static_cast<int>(r.profile.te.size()), j.at("causal").get<std::vector<int>>(),
                                          j.value("degenerate", false));
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw Error(path.string() + ": line " + std::to_string(line_no) + ": malformed extraction record: " + e.what());
    }
  }
  return out;
}

// Partitions reordered to follow `corpus`, matched by dialogue_id.
inline std::vector<CausalPartition> align_partitions(const Corpus& corpus, const std::vector<ExtractionRecord>& records) {
  std::map<std::string, const ExtractionRecord*> by_id;
  for (const auto& r : records) by_id[r.dialogue_id] = &r;
  std::vector<CausalPartition> out;
  for (const auto& d : corpus.dialogues) {
    auto it = by_id.find(d.dialogue_id);
    if (it == by_id.end()) throw Error("missing partition for dialogue " + d.dialogue_id);
    if (it->second->partition.turns() != d.turns())
      throw Error("partition for dialogue " + d.dialogue_id + " does not match its turn count");
    out.push_back(it->second->partition);
  }
  return out;
}

struct PositionFrequency {
  std::map<int, std::size_t> count;    // dialogues with a causal utterance at distance d
  std::map<int, std::size_t> support;  // dialogues having any utterance at distance d

  double q(int d) const {
    auto it = support.find(d);
    if (it == support.end() || it->second == 0) return 0.0;
    return static_cast<double>(count.at(d)) / static_cast<double>(it->second);
  }

  // Add-one smoothing; unseen distances get 1/2.
  double q_smoothed(int d) const {
    auto it = support.find(d);
    const double total = it == support.end() ? 0.0 : static_cast<double>(it->second);
    const double c = it == support.end() ? 0.0 : static_cast<double>(count.at(d));
    return (c + 1.0) / (total + 2.0);
  }

  int max_distance() const { return support.empty() ? -1 : support.rbegin()->first; }

  void write_csv(std::ostream& out) const {
    out << "distance,q,q_smoothed,count\n";
    for (const auto& [d, n] : support) out << d << ',' << q(d) << ',' << q_smoothed(d) << ',' << n << '\n';
  }
};

inline PositionFrequency position_frequency(const std::vector<CausalPartition>& partitions, const Corpus& corpus) {
  if (corpus.empty()) throw Error("position_frequency: empty input");
  if (partitions.size() != corpus.size()) throw Error("position_frequency: partitions not aligned with dialogues");
  PositionFrequency q;
  for (std::size_t k = 0; k < corpus.size(); ++k) {
    const Dialogue& d = corpus.dialogues[k];
    if (partitions[k].turns() != d.turns())
      throw Error("position_frequency: partition for " + d.dialogue_id + " does not match its turn count");
    for (int i = 1; i <= d.turns(); ++i) {
      const int dist = d.distance(i);
      ++q.support[dist];
      q.count[dist] += partitions[k].is_causal(i) ? 1 : 0;
    }
  }
  return q;
}

struct Confusion {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;

  double precision() const { return tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0; }
  double recall() const { return tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0; }
  double f1() const {
    const double p = precision(), r = recall();
    return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
  }
};

struct ExtractionReport {
  Confusion total;
  std::map<int, Confusion> by_distance;

  double precision() const { return total.precision(); }
  double recall() const { return total.recall(); }
  double f1() const { return total.f1(); }

  nlohmann::json to_json() const {
    nlohmann::json per = nlohmann::json::array();
    for (const auto& [d, c] : by_distance)
      per.push_back({{"distance", d}, {"tp", c.tp}, {"fp", c.fp}, {"fn", c.fn}, {"precision", c.precision()},
                     {"recall", c.recall()}, {"f1", c.f1()}});
    return {{"precision", precision()}, {"recall", recall()}, {"f1", f1()}, {"by_distance", per}};
  }
};

inline ExtractionReport score_against_gold(const std::vector<CausalPartition>& partitions, const Corpus& corpus) {
  if (partitions.size() != corpus.size()) throw Error("score_against_gold: partitions not aligned with dialogues");
  ExtractionReport rep;
  for (std::size_t k = 0; k < corpus.size(); ++k) {
    const Dialogue& d = corpus.dialogues[k];
    if (!d.gold_causal) throw Error("score_against_gold: dialogue " + d.dialogue_id + " has no gold labels");
    for (int i = 1; i <= d.turns(); ++i) {
      const bool pred = partitions[k].is_causal(i), gold = d.is_gold_causal(i);
      for (Confusion* c : {&rep.total, &rep.by_distance[d.distance(i)]}) {
        if (pred && gold) ++c->tp;
        else if (pred) ++c->fp;
        else if (gold) ++c->fn;
        else ++c->tn;
      }
    }
  }
  return rep;
}

}  // namespace cpd
