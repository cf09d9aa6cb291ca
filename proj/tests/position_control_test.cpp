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

#include <algorithm>

#include <gtest/gtest.h>

#include "cpd/minilm.hpp"
#include "cpd/position_control.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

namespace cpd {
namespace {

using testing::make_dialogue;
using testing::map_of;
using testing::random_stochastic;

SegmentMap segments_of(const Dialogue& d, const Vocabulary& v) {
  const PromptLayout layout = render_prompt(d, d.response);
  const auto spans = v.tokenize_with_offsets(layout.text);
  return build_segment_map(layout, spans);
}

TEST(SegmentMap, CountsSegments) {
  const Dialogue with = make_dialogue("a", {"one two", "three", "four five six"}, "seven", std::nullopt, "be brief");
  Dialogue without = with;
  without.instruction.reset();
  Corpus c;
  c.dialogues = {with};
  const Vocabulary v = Vocabulary::fit(c);
  EXPECT_EQ(segments_of(with, v).count(), 5);
  EXPECT_EQ(segments_of(without, v).count(), 4);
}

TEST(SegmentMap, SegmentIdsFollowCharacterSpans) {
  const Dialogue d = make_dialogue("a", {"my  pet is rex", "ok", "he likes\tthe park"}, "rex park", std::nullopt, "x y");
  Corpus c;
  c.dialogues = {d};
  const Vocabulary v = Vocabulary::fit(c);
  const PromptLayout layout = render_prompt(d, d.response);
  const auto spans = v.tokenize_with_offsets(layout.text);
  const SegmentMap map = build_segment_map(layout, spans);
  ASSERT_EQ(map.tokens(), spans.size());
  for (std::size_t i = 0; i < spans.size(); ++i) {
    const auto& seg = layout.segments[static_cast<std::size_t>(map.segment_of[i])];
    EXPECT_GE(spans[i].begin, seg.begin);
    EXPECT_LE(spans[i].end, seg.end);
  }
  EXPECT_TRUE(std::is_sorted(map.segment_of.begin(), map.segment_of.end()));
  // Speaker tags belong to their utterance.
  EXPECT_EQ(map.segment_of[3], 1);
  EXPECT_EQ(v.token(spans[3].id), "<user>");
}

TEST(SegmentMap, MisalignmentIsAnError) {
  PromptLayout layout;
  layout.text = "abc def";
  layout.segments = {{SegmentKind::utterance, 1, 0, 5}, {SegmentKind::response, 0, 5, 7}};
  const std::vector<TokenSpan> spans{{0, 0, 3}, {0, 4, 7}};
  EXPECT_THROW(build_segment_map(layout, spans), Error);
}

TEST(MixAttention, SingleSegmentReturnsPositionAttention) {
  const Matrix a_pe = random_stochastic(6, 1), a_nope = random_stochastic(6, 2);
  const Matrix out = mix_attention(a_pe, a_nope, SegmentMap::single(6));
  EXPECT_LT((out - a_pe).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(MixAttention, ExplicitMeansScaleCrossEntries) {
  const Matrix a_pe = random_stochastic(4, 3), a_nope = random_stochastic(4, 4);
  const SegmentMap seg = map_of({0, 0, 1, 1});
  const Matrix out = mix_attention(a_pe, a_nope, seg, 0.25, 0.125);
  // Row 2: one cross entry per earlier token in segment 0, doubled.
  const double z = 2 * a_nope(2, 0) + 2 * a_nope(2, 1) + a_pe(2, 2);
  EXPECT_NEAR(out(2, 0), 2 * a_nope(2, 0) / z, 1e-15);
  EXPECT_NEAR(out(2, 2), a_pe(2, 2) / z, 1e-15);
}

TEST(MixAttention, HandEvaluatedFourByFour) {
  const testing::MixCase hand = testing::hand_mix_case();
  const Matrix& a_pe = hand.a_pe;
  const Matrix& a_nope = hand.a_nope;
  const SegmentMap& seg = hand.segments;
  EXPECT_LT((mix_attention(a_pe, a_nope, seg) - hand.expect).cwiseAbs().maxCoeff(), 1e-9);

  // Explicit means m_pe = 0.3, m_nope = 0.15 double the cross entries.
  Matrix expect2(4, 4);
  expect2 << 1, 0, 0, 0,  //
      0.6, 0.4, 0, 0,  //
      0.8 / 2.1, 0.8 / 2.1, 0.5 / 2.1, 0,  //
      0.5 / 1.7, 0.5 / 1.7, 0.3 / 1.7, 0.4 / 1.7;
  EXPECT_LT((mix_attention(a_pe, a_nope, seg, 0.3, 0.15) - expect2).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(MixAttention, RowStochasticCausalAndIdempotent) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const Matrix a_pe = random_stochastic(9, 10 + s), a_nope = random_stochastic(9, 50 + s);
    const SegmentMap seg = map_of({0, 0, 1, 1, 1, 2, 3, 3, 3});
    const Matrix out = mix_attention(a_pe, a_nope, seg, 0.3, 0.2);
    for (Eigen::Index r = 0; r < 9; ++r) EXPECT_NEAR(out.row(r).sum(), 1.0, 1e-6);
    EXPECT_EQ(out.triangularView<Eigen::StrictlyUpper>().toDenseMatrix().cwiseAbs().maxCoeff(), 0.0);
    EXPECT_LT((mix_attention(a_pe, a_pe, seg) - a_pe).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(MixAttention, Errors) {
  const Matrix a = random_stochastic(3, 1);
  EXPECT_THROW(mix_attention(a, random_stochastic(4, 1), SegmentMap::single(3)), Error);
  EXPECT_THROW(mix_attention(a, Matrix::Zero(3, 3), SegmentMap::single(3)), Error);
  EXPECT_THROW(mix_attention(a, a, SegmentMap::single(4)), Error);
}

TEST(MixAttention, DifferentiableVersionMatches) {
  const Matrix a_pe = random_stochastic(7, 5), a_nope = random_stochastic(7, 6);
  const SegmentMap seg = map_of({0, 0, 0, 1, 1, 2, 2});
  ag::Tape tape(false);
  const Matrix out = ag::mix_attention(tape.constant(a_pe), tape.constant(a_nope), seg.same_segment_mask()).value();
  EXPECT_LT((out - mix_attention(a_pe, a_nope, seg)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(LocalPosition, SingleSegmentModelMatchesStandard) {
  Corpus c;
  c.dialogues = {make_dialogue("a", {"my pet is rex and he likes the park"}, "rex")};
  for (auto scheme : {PositionScheme::rotary, PositionScheme::learned_absolute}) {
    const MiniLM m = testing::tiny_model(c, scheme);
    const EncodedDialogue enc = m.encode(c.dialogues[0]);
    const SegmentMap one = SegmentMap::single(enc.ids.size());
    ag::Tape tape(false);
    const auto rows = enc.prediction_rows();
    const Matrix a = m.forward_logits(tape, enc.ids, one, AttentionMode::standard, rows).value();
    const Matrix b = m.forward_logits(tape, enc.ids, one, AttentionMode::local_position, rows).value();
    EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-9);
  }
}

// Reordering utterances permutes the first layer's no-position attention
// without changing the weights a query gives identical tokens.
TEST(LocalPosition, CrossSegmentAttentionIsPermutationEquivariant) {
  Corpus c;
  c.dialogues = {make_dialogue("a", {"red blue", "green", "red blue"}, "green")};
  const MiniLM m = testing::tiny_model(c, PositionScheme::rotary, 8, 1, 3);
  const Dialogue d = c.dialogues[0];
  Dialogue swapped = d;
  std::swap(swapped.history[0].text, swapped.history[1].text);
  std::swap(swapped.history[1].text, swapped.history[2].text);  // green, red blue, red blue
  const auto trace_of = [&m](const Dialogue& x) {
    const EncodedDialogue enc = m.encode(x);
    ag::Tape tape(false);
    AttentionTrace trace;
    m.response_log_probs(tape, enc, AttentionMode::local_position, &trace);
    return std::make_pair(enc, trace);
  };
  const auto [enc_a, ta] = trace_of(d);
  const auto [enc_b, tb] = trace_of(swapped);
  // Response token rows attend to both "red" tokens with identical no-position
  // weights regardless of which utterance slot they sit in.
  const auto red = m.vocab().id("red");
  for (std::size_t h = 0; h < ta.entries.size(); ++h) {
    const Matrix& na = ta.entries[h].a_nope;
    const Matrix& nb = tb.entries[h].a_nope;
    const Eigen::Index last = na.rows() - 1;
    std::vector<double> wa, wb;
    for (std::size_t s = 0; s < enc_a.ids.size(); ++s)
      if (enc_a.ids[s] == red) wa.push_back(na(last, static_cast<Eigen::Index>(s)));
    for (std::size_t s = 0; s < enc_b.ids.size(); ++s)
      if (enc_b.ids[s] == red) wb.push_back(nb(last, static_cast<Eigen::Index>(s)));
    ASSERT_EQ(wa.size(), 2u);
    ASSERT_EQ(wb.size(), 2u);
    std::sort(wa.begin(), wa.end());
    std::sort(wb.begin(), wb.end());
    EXPECT_NEAR(wa[0], wb[0], 1e-6);
    EXPECT_NEAR(wa[1], wb[1], 1e-6);
    EXPECT_NEAR(wa[0], wa[1], 1e-6);
    // Mixed cross-segment weights keep the no-position ratios within a row.
    const Matrix& ua = ta.entries[h].used;
    std::vector<Eigen::Index> cols;
    for (std::size_t s = 0; s < enc_a.ids.size(); ++s)
      if (enc_a.ids[s] == red) cols.push_back(static_cast<Eigen::Index>(s));
    EXPECT_NEAR(ua(last, cols[0]) / ua(last, cols[1]), na(last, cols[0]) / na(last, cols[1]), 1e-9);
  }
}

}  // namespace
}  // namespace cpd
