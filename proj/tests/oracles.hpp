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

// Independent reference computations shared by the unit tests and the
// acceptance binary.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <utility>
#include <vector>

#include "cpd/adapter.hpp"
#include "cpd/autograd.hpp"
#include "cpd/extraction.hpp"
#include "cpd/minilm.hpp"
#include "cpd/position_control.hpp"
#include "cpd/rng.hpp"

namespace cpd::testing {

// ---- clustering ----

inline double sse(std::span<const double> v, const std::vector<int>& idx) {
  if (idx.empty()) return 0.0;
  double m = 0.0;
  for (int i : idx) m += v[static_cast<std::size_t>(i)];
  m /= static_cast<double>(idx.size());
  double s = 0.0;
  for (int i : idx) s += (v[static_cast<std::size_t>(i)] - m) * (v[static_cast<std::size_t>(i)] - m);
  return s;
}

// Best split of the sorted values into a lower and an upper run.
inline double oracle_sse(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t k = 1; k < v.size(); ++k) {
    std::vector<int> lo, hi;
    for (std::size_t i = 0; i < v.size(); ++i) (i < k ? lo : hi).push_back(static_cast<int>(i));
    best = std::min(best, sse(v, lo) + sse(v, hi));
  }
  return best;
}

// ---- position frequency and perturbation rounds ----

// PositionFrequency whose smoothed value at distance d is (c_d + 1) / (t_d + 2).
inline PositionFrequency frequency_with(const std::vector<std::pair<int, int>>& counts_totals) {
  PositionFrequency q;
  for (std::size_t d = 0; d < counts_totals.size(); ++d) {
    q.count[static_cast<int>(d)] = static_cast<std::size_t>(counts_totals[d].first);
    q.support[static_cast<int>(d)] = static_cast<std::size_t>(counts_totals[d].second);
  }
  return q;
}

// (c, t) with (c + 1) / (t + 2) == q for small integers.
inline std::pair<int, int> smoothed(double q) {
  for (int t = 0; t < 200; ++t)
    for (int c = 0; c <= t; ++c)
      if (std::abs((c + 1.0) / (t + 2.0) - q) < 1e-12) return {c, t};
  throw Error("no integer smoothing for q");
}

struct RoundsCase {
  std::vector<double> q;  // smoothed q of each causal turn
  int cap;
  int n;
};

inline std::vector<RoundsCase> rounds_cases() {
  return {
      {{0.4, 0.1}, 8, 4},          {{0.5}, 8, 2},
      {{0.5, 0.5}, 8, 2},          {{0.75}, 8, 1},
      {{0.75, 0.75}, 8, 1},        {{0.1}, 8, 8},
      {{0.1}, 20, 10},             {{0.1}, 1, 1},
      {{0.25}, 8, 4},              {{0.25, 0.25}, 8, 4},
      {{0.25, 0.5}, 8, 2},         {{1.0 / 3.0}, 8, 3},
      {{1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0}, 8, 3},
      {{0.2}, 8, 5},               {{0.2, 0.2}, 8, 5},
      {{0.2, 0.4}, 8, 3},          {{0.1, 0.1, 0.1}, 12, 10},
      {{0.9}, 8, 1},               {{0.6, 0.9}, 8, 1},
      {{0.5, 0.25, 0.25}, 8, 3},
  };
}

// Causal turns sit at distances 0, 1, ... with the case's q values; two
// further non-causal turns precede them.
inline std::pair<CausalPartition, PositionFrequency> rounds_fixture(const RoundsCase& cs) {
  std::vector<std::pair<int, int>> table;
  for (double v : cs.q) table.push_back(smoothed(v));
  const int turns = static_cast<int>(cs.q.size()) + 2;
  std::vector<int> causal;
  for (std::size_t d = 0; d < cs.q.size(); ++d) causal.push_back(turns - static_cast<int>(d));
  return {partition_from_causal(turns, causal), frequency_with(table)};
}

// ---- attention mixing ----

inline Matrix random_stochastic(Eigen::Index n, std::uint64_t seed) {
  Rng rng(seed);
  Matrix a = Matrix::Zero(n, n);
  for (Eigen::Index t = 0; t < n; ++t) {
    for (Eigen::Index s = 0; s <= t; ++s) a(t, s) = 0.1 + rng.uniform01();
    a.row(t) /= a.row(t).sum();
  }
  return a;
}

inline SegmentMap map_of(std::vector<int> seg) {
  SegmentMap m;
  m.segment_of = std::move(seg);
  for (int i = 0; i <= m.segment_of.back(); ++i) m.segments.push_back({SegmentKind::utterance, i + 1, 0, 0});
  return m;
}

struct MixCase {
  Matrix a_pe, a_nope, expect;
  SegmentMap segments;
};

// Two segments of two tokens. Both means are 4/10 (row sums over 10 causal
// entries), so cross entries keep their no-position weight before
// renormalization.
inline MixCase hand_mix_case() {
  MixCase c;
  c.a_pe.resize(4, 4);
  c.a_nope.resize(4, 4);
  c.expect.resize(4, 4);
  c.a_pe << 1, 0, 0, 0,  //
      0.6, 0.4, 0, 0,  //
      0.2, 0.3, 0.5, 0,  //
      0.1, 0.2, 0.3, 0.4;
  c.a_nope << 1, 0, 0, 0,  //
      0.5, 0.5, 0, 0,  //
      0.4, 0.4, 0.2, 0,  //
      0.25, 0.25, 0.25, 0.25;
  c.expect << 1, 0, 0, 0,  //
      0.6, 0.4, 0, 0,  //
      0.4 / 1.3, 0.4 / 1.3, 0.5 / 1.3, 0,  //
      0.25 / 1.2, 0.25 / 1.2, 0.3 / 1.2, 0.4 / 1.2;
  c.segments = map_of({0, 0, 1, 1});
  return c;
}

// ---- gradients ----

using LossFn = std::function<ag::Var(ag::Tape&, const MiniLM&)>;

inline std::vector<Matrix> analytic_gradients(const MiniLM& m, const LossFn& f) {
  std::vector<Matrix> grads;
  for (const auto& p : m.parameters()) grads.push_back(Matrix::Zero(p.rows(), p.cols()));
  ag::Tape tape;
  tape.backward(f(tape, m));
  tape.accumulate_parameter_grads(grads);
  return grads;
}

inline double loss_value(const MiniLM& m, const LossFn& f) {
  ag::Tape tape(false);
  return f(tape, m).scalar();
}

// Relative error between analytic and central-difference gradients over a
// random sample of parameter entries.
inline double gradient_error(MiniLM& m, const LossFn& f, int samples, std::uint64_t seed, double h = 1e-4) {
  const auto grads = analytic_gradients(m, f);
  Rng rng(seed);
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (int s = 0; s < samples; ++s) {
    const std::size_t pi = rng.uniform_index(m.parameters().size());
    Matrix& p = m.parameters()[pi];
    const Eigen::Index r = static_cast<Eigen::Index>(rng.uniform_index(static_cast<std::size_t>(p.rows())));
    const Eigen::Index c = static_cast<Eigen::Index>(rng.uniform_index(static_cast<std::size_t>(p.cols())));
    const double orig = p(r, c);
    p(r, c) = orig + h;
    const double up = loss_value(m, f);
    p(r, c) = orig - h;
    const double down = loss_value(m, f);
    p(r, c) = orig;
    const double numeric = (up - down) / (2 * h);
    const double a = grads[pi](r, c);
    diff += (a - numeric) * (a - numeric);
    na += a * a;
    nn += numeric * numeric;
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), 1e-12});
}

// ---- treatment effects ----

// Perplexity 10 for the untouched dialogue, 15 once any turn text changes.
class TwoLevelAdapter final : public ModelAdapter {
 public:
  explicit TwoLevelAdapter(Dialogue base) : base_(std::move(base)) {}
  TokenSequence tokenize(std::string_view) const override { return {}; }
  ResponseDistribution response_distributions(const Dialogue&, AttentionMode) const override {
    throw Error("not used");
  }
  std::vector<double> response_nll(const Dialogue& d, AttentionMode) const override {
    return {std::log(d == base_ ? 10.0 : 15.0)};
  }

 private:
  Dialogue base_;
};

}  // namespace cpd::testing
