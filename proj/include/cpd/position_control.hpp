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
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cpd/autograd.hpp"
#include "cpd/error.hpp"
#include "cpd/tokenizer.hpp"

namespace cpd {

enum class AttentionMode { standard, no_position, local_position };

inline std::string_view to_string(AttentionMode m) {
  switch (m) {
    case AttentionMode::standard: return "standard";
    case AttentionMode::no_position: return "no_position";
    case AttentionMode::local_position: return "local_position";
  }
  return "standard";
}

inline std::optional<AttentionMode> parse_attention_mode(std::string_view s) {
  if (s == "standard") return AttentionMode::standard;
  if (s == "no_position") return AttentionMode::no_position;
  if (s == "local_position") return AttentionMode::local_position;
  return std::nullopt;
}

// Segment id per token. Segments are contiguous and numbered from 0 in
// prompt order: instruction block (if any), one per history utterance, then
// the response block.
struct SegmentMap {
  std::vector<int> segment_of;
  std::vector<SegmentSpan> segments;

  int count() const { return static_cast<int>(segments.size()); }
  std::size_t tokens() const { return segment_of.size(); }

  static SegmentMap single(std::size_t n_tokens) {
    SegmentMap m;
    m.segment_of.assign(n_tokens, 0);
    m.segments.push_back({SegmentKind::utterance, 1, 0, 0});
    return m;
  }

  // 1 where query t and key s share a segment, 0 elsewhere.
  Matrix same_segment_mask() const {
    const auto n = static_cast<Eigen::Index>(segment_of.size());
    Matrix m(n, n);
    for (Eigen::Index t = 0; t < n; ++t)
      for (Eigen::Index s = 0; s < n; ++s)
        m(t, s) = segment_of[static_cast<std::size_t>(t)] == segment_of[static_cast<std::size_t>(s)] ? 1.0 : 0.0;
    return m;
  }
};

// Assigns every token to the segment whose character span contains it.
inline SegmentMap build_segment_map(const PromptLayout& layout, std::span<const TokenSpan> tokens) {
  SegmentMap map;
  map.segments = layout.segments;
  std::size_t seg = 0;
  for (const auto& tok : tokens) {
    while (seg < layout.segments.size() && tok.begin >= layout.segments[seg].end) ++seg;
    if (seg == layout.segments.size() || tok.begin < layout.segments[seg].begin)
      throw Error("segment boundary misalignment: token at offset " + std::to_string(tok.begin) +
                  " lies outside every segment");
    if (tok.end > layout.segments[seg].end)
      throw Error("segment boundary misalignment: token at offset " + std::to_string(tok.begin) +
                  " straddles two segments");
    map.segment_of.push_back(static_cast<int>(seg));
  }
  return map;
}

// Mean of the causal-valid (lower-triangular) entries of an attention matrix.
inline double attention_mean(const Matrix& a) {
  double total = 0.0;
  double count = 0.0;
  for (Eigen::Index r = 0; r < a.rows(); ++r)
    for (Eigen::Index c = 0; c <= r && c < a.cols(); ++c) {
      total += a(r, c);
      count += 1.0;
    }
  return count > 0.0 ? total / count : 0.0;
}

// Local-position mixing with explicit mean statistics: intra-segment entries
// come from a_pe, cross-segment entries are a_nope * m_pe / m_nope, then each
// row is renormalized to sum to one.
inline Matrix mix_attention(const Matrix& a_pe, const Matrix& a_nope, const SegmentMap& segmap, double m_pe,
                            double m_nope) {
  if (a_pe.rows() != a_nope.rows() || a_pe.cols() != a_nope.cols())
    throw Error("mix_attention: attention matrices differ in shape");
  if (a_pe.rows() != static_cast<Eigen::Index>(segmap.tokens()) || a_pe.cols() != a_pe.rows())
    throw Error("mix_attention: segment map does not match attention shape");
  if (m_nope == 0.0) throw Error("mix_attention: degenerate no-position attention (mean is zero)");
  const double ratio = m_pe / m_nope;
  Matrix out(a_pe.rows(), a_pe.cols());
  for (Eigen::Index t = 0; t < out.rows(); ++t) {
    for (Eigen::Index s = 0; s < out.cols(); ++s) {
      const bool same = segmap.segment_of[static_cast<std::size_t>(t)] == segmap.segment_of[static_cast<std::size_t>(s)];
      out(t, s) = same ? a_pe(t, s) : a_nope(t, s) * ratio;
    }
    const double z = out.row(t).sum();
    if (z > 0.0) out.row(t) /= z;
  }
  return out;
}

inline Matrix mix_attention(const Matrix& a_pe, const Matrix& a_nope, const SegmentMap& segmap) {
  return mix_attention(a_pe, a_nope, segmap, attention_mean(a_pe), attention_mean(a_nope));
}

namespace ag {

// Differentiable counterpart of mix_attention for one head. The mean
// statistics are computed on the tape so gradients flow through them too.
inline Var mix_attention(Var a_pe, Var a_nope, const Matrix& same_segment) {
  Var ratio = divide_scalar(lower_triangular_mean(a_pe), lower_triangular_mean(a_nope));
  Matrix cross = Matrix::Ones(same_segment.rows(), same_segment.cols()) - same_segment;
  Var intra = mul_const(a_pe, same_segment);
  Var inter = scale_by(mul_const(a_nope, std::move(cross)), ratio);
  return row_normalize(add(intra, inter));
}

}  // namespace ag
}  // namespace cpd
