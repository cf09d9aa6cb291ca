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

#include <cmath>
#include <map>

#include <gtest/gtest.h>

#include "cpd/minilm.hpp"
#include "cpd/optim.hpp"
#include "cpd/synthetic.hpp"
#include "cpd/trainer.hpp"
#include "test_support.hpp"

namespace cpd {
namespace {

using testing::make_dialogue;

Corpus small_corpus() {
  Corpus c;
  c.dialogues.push_back(make_dialogue("a", {"my pet is rex", "nice name", "he likes the park"}, "rex park", {{1, 3}},
                                      "answer briefly"));
  c.dialogues.push_back(make_dialogue("b", {"hello", "i went to the store"}, "store"));
  return c;
}

// Plain Eigen forward pass written from the architecture description, used
// as an oracle for the taped implementation.
Matrix reference_logits(const MiniLM& m, const EncodedDialogue& enc, AttentionMode mode) {
  const auto& cfg = m.config();
  std::map<std::string, const Matrix*> P;
  for (std::size_t i = 0; i < m.parameters().size(); ++i) P[m.parameter_names()[i]] = &m.parameters()[i];
  const auto T = static_cast<Eigen::Index>(enc.ids.size());
  const int dh = cfg.head_dim();
  const auto rms = [](const Matrix& x, const Matrix& g) {
    Matrix out(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      const double s = std::sqrt(x.row(r).squaredNorm() / static_cast<double>(x.cols()) + 1e-6);
      out.row(r) = x.row(r).cwiseProduct(g.row(0)) / s;
    }
    return out;
  };
  const auto rotate = [&](const Matrix& x) {
    Matrix out = x;
    for (Eigen::Index t = 0; t < T; ++t)
      for (Eigen::Index h = 0; h < x.cols(); h += dh)
        for (int j = 0; j < dh / 2; ++j) {
          const double ang = static_cast<double>(t) * std::pow(cfg.rotary_base, -2.0 * j / dh);
          const double a = x(t, h + 2 * j), b = x(t, h + 2 * j + 1);
          out(t, h + 2 * j) = a * std::cos(ang) - b * std::sin(ang);
          out(t, h + 2 * j + 1) = a * std::sin(ang) + b * std::cos(ang);
        }
    return out;
  };
  const auto softmax_causal = [&](const Matrix& s) {
    Matrix a = Matrix::Zero(T, T);
    for (Eigen::Index t = 0; t < T; ++t) {
      const double mx = s.row(t).head(t + 1).maxCoeff();
      for (Eigen::Index u = 0; u <= t; ++u) a(t, u) = std::exp(s(t, u) - mx);
      a.row(t) /= a.row(t).sum();
    }
    return a;
  };
  const auto lower_mean = [&](const Matrix& a) {
    double s = 0.0;
    for (Eigen::Index t = 0; t < T; ++t) s += a.row(t).head(t + 1).sum();
    return s / (static_cast<double>(T) * static_cast<double>(T + 1) / 2.0);
  };

  Matrix h(T, cfg.model_width);
  for (Eigen::Index t = 0; t < T; ++t) h.row(t) = P["tok_emb"]->row(enc.ids[static_cast<std::size_t>(t)]);
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    const Matrix x = rms(h, *P[p + "norm1"]);
    const Matrix q = x * *P[p + "wq"], k = x * *P[p + "wk"], v = x * *P[p + "wv"];
    const Matrix qr = rotate(q), kr = rotate(k);
    Matrix heads(T, cfg.model_width);
    for (int hd = 0; hd < cfg.heads; ++hd) {
      const auto c0 = static_cast<Eigen::Index>(hd) * dh;
      const Matrix a_pe = softmax_causal(qr.middleCols(c0, dh) * kr.middleCols(c0, dh).transpose() / std::sqrt(dh));
      const Matrix a_np = softmax_causal(q.middleCols(c0, dh) * k.middleCols(c0, dh).transpose() / std::sqrt(dh));
      Matrix a = mode == AttentionMode::standard ? a_pe : a_np;
      if (mode == AttentionMode::local_position) {
        const double ratio = lower_mean(a_pe) / lower_mean(a_np);
        for (Eigen::Index t = 0; t < T; ++t) {
          for (Eigen::Index u = 0; u <= t; ++u)
            a(t, u) = enc.segments.segment_of[static_cast<std::size_t>(t)] == enc.segments.segment_of[static_cast<std::size_t>(u)]
                          ? a_pe(t, u)
                          : a_np(t, u) * ratio;
          a.row(t) /= a.row(t).sum();
        }
      }
      heads.middleCols(c0, dh) = a * v.middleCols(c0, dh);
    }
    h += heads * *P[p + "wo"];
    const Matrix x2 = rms(h, *P[p + "norm2"]);
    Matrix z = x2 * *P[p + "w1"];
    z.rowwise() += P[p + "b1"]->row(0);
    const Matrix g = (0.5 * z.array() * (1.0 + (ag::kGeluC * (z.array() + 0.044715 * z.array().cube())).tanh())).matrix();
    Matrix o = g * *P[p + "w2"];
    o.rowwise() += P[p + "b2"]->row(0);
    h += o;
  }
  const auto rows = enc.prediction_rows();
  Matrix sel(static_cast<Eigen::Index>(rows.size()), cfg.model_width);
  for (std::size_t i = 0; i < rows.size(); ++i) sel.row(static_cast<Eigen::Index>(i)) = h.row(rows[i]);
  return rms(sel, *P["final_norm"]) * *P["w_out"];
}

TEST(Tokenizer, Basics) {
  const Vocabulary v = Vocabulary::fit(small_corpus());
  EXPECT_TRUE(v.tokenize("").token_ids.empty());
  EXPECT_EQ(v.tokenize("my pet").token_ids, v.tokenize("my pet").token_ids);
  const auto unk = v.tokenize("my zebra").token_ids;
  EXPECT_EQ(unk[1], Vocabulary::kUnk);
  EXPECT_EQ(v.detokenize(v.tokenize("  my   pet is\trex ").token_ids), "my pet is rex");
  EXPECT_EQ(v.token(Vocabulary::kResponseTag), "<resp>");
}

TEST(Tokenizer, SaveLoad) {
  const Vocabulary v = Vocabulary::fit(small_corpus());
  const auto dir = testing::temp_dir("vocab");
  v.save(dir / "vocab.txt");
  EXPECT_EQ(Vocabulary::load(dir / "vocab.txt"), v);
}

TEST(Perplexity, Examples) {
  const std::vector<double> zeros{0.0, 0.0, 0.0};
  EXPECT_DOUBLE_EQ(perplexity(zeros), 1.0);
  const std::vector<double> lnv(4, std::log(7.0));
  EXPECT_NEAR(perplexity(lnv), 7.0, 1e-12);
  const std::vector<double> mixed{std::log(2.0), std::log(8.0)};
  EXPECT_NEAR(perplexity(mixed), 4.0, 1e-12);
  EXPECT_THROW(perplexity(std::vector<double>{}), Error);
}

TEST(ResponseNll, TableOracle) {
  // Response "x y": "x" occurs in the history (p = 0.8), "y" does not (p = 0.1).
  const testing::TableAdapter table({"<unk>", "x", "y", "z", "w"}, 0.8, 0.1);
  const Dialogue d = make_dialogue("t", {"z x", "w"}, "x y");
  const auto nll = response_nll(table, d, AttentionMode::standard);
  ASSERT_EQ(nll.size(), 2u);
  EXPECT_NEAR(nll[0], -std::log(0.8), 1e-12);
  EXPECT_NEAR(nll[1], -std::log(0.1), 1e-12);
}

TEST(MiniLM, UniformModelGivesLogV) {
  MiniLM m = testing::tiny_model(small_corpus());
  m.parameters().back().setZero();  // w_out
  const Corpus c = small_corpus();
  const Dialogue& d = c.dialogues[0];
  for (double v : response_nll(m, d, AttentionMode::standard)) EXPECT_NEAR(v, std::log(m.vocab().size()), 1e-12);
}

TEST(MiniLM, DistributionsAgreeWithNll) {
  for (auto scheme : {PositionScheme::rotary, PositionScheme::learned_absolute}) {
    const MiniLM m = testing::tiny_model(small_corpus(), scheme);
    const Corpus c = small_corpus();
    for (const auto& d : c.dialogues)
      for (auto mode : {AttentionMode::standard, AttentionMode::no_position, AttentionMode::local_position}) {
        const auto dist = response_distributions(m, d, mode);
        const auto nll = response_nll(m, d, mode);
        ASSERT_EQ(dist.positions(), nll.size());
        for (std::size_t t = 0; t < nll.size(); ++t) {
          EXPECT_NEAR(dist.probs.row(static_cast<Eigen::Index>(t)).sum(), 1.0, 1e-6);
          EXPECT_GE(dist.probs.row(static_cast<Eigen::Index>(t)).minCoeff(), 0.0);
          EXPECT_NEAR(dist.probs(static_cast<Eigen::Index>(t), dist.gold[t]), std::exp(-nll[t]), 1e-6);
          EXPECT_GE(nll[t], 0.0);
        }
      }
  }
}

TEST(MiniLM, MatchesIndependentForwardPass) {
  const MiniLM m = testing::tiny_model(small_corpus(), PositionScheme::rotary, 8, 2, 7);
  const Corpus c = small_corpus();
  const Dialogue& d = c.dialogues[0];
  const EncodedDialogue enc = m.encode(d);
  for (auto mode : {AttentionMode::standard, AttentionMode::no_position, AttentionMode::local_position}) {
    ag::Tape tape(false);
    const Matrix got = m.forward_logits(tape, enc.ids, enc.segments, mode, enc.prediction_rows()).value();
    const Matrix want = reference_logits(m, enc, mode);
    EXPECT_LT((got - want).cwiseAbs().maxCoeff(), 1e-9) << to_string(mode);
  }
}

TEST(MiniLM, SingleTokenPromptIgnoresPosition) {
  for (auto scheme : {PositionScheme::rotary, PositionScheme::learned_absolute}) {
    const MiniLM m = testing::tiny_model(small_corpus(), scheme);
    const std::vector<int> ids{m.vocab().id("pet")};
    const SegmentMap seg = SegmentMap::single(1);
    const Vector a = m.next_token_distribution(ids, seg, AttentionMode::standard);
    const Vector b = m.next_token_distribution(ids, seg, AttentionMode::no_position);
    EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(MiniLM, OverflowIsAnError) {
  MiniLMConfig c;
  c.layers = 1;
  c.heads = 1;
  c.model_width = 4;
  c.max_sequence_length = 6;
  const Corpus corpus = small_corpus();
  MiniLM m(c, Vocabulary::fit(corpus));
  EXPECT_THROW(response_nll(m, corpus.dialogues[0], AttentionMode::standard), SequenceOverflowError);
  m.set_truncation(TruncationPolicy::left);
  const Dialogue short_one = make_dialogue("s", {"my pet is rex"}, "rex");
  EXPECT_EQ(response_nll(m, short_one, AttentionMode::standard).size(), 1u);
}

TEST(MiniLM, CheckpointRoundTrip) {
  const Corpus c = small_corpus();
  const MiniLM m = testing::tiny_model(c, PositionScheme::learned_absolute);
  const auto dir = testing::temp_dir("ckpt");
  m.save(dir / "m.json");
  const MiniLM back = MiniLM::load(dir / "m.json", m.vocab());
  EXPECT_EQ(back.config(), m.config());
  for (std::size_t i = 0; i < m.parameters().size(); ++i) EXPECT_EQ(back.parameters()[i], m.parameters()[i]);
  EXPECT_EQ(response_nll(back, c.dialogues[0], AttentionMode::local_position),
            response_nll(m, c.dialogues[0], AttentionMode::local_position));
}

TEST(MiniLM, AttentionTraceRowsAreStochastic) {
  const MiniLM m = testing::tiny_model(small_corpus());
  const EncodedDialogue enc = m.encode(small_corpus().dialogues[0]);
  ag::Tape tape(false);
  AttentionTrace trace;
  m.response_log_probs(tape, enc, AttentionMode::local_position, &trace);
  ASSERT_EQ(trace.entries.size(), 4u);
  for (const auto& e : trace.entries) {
    for (Eigen::Index r = 0; r < e.used.rows(); ++r) EXPECT_NEAR(e.used.row(r).sum(), 1.0, 1e-9);
    EXPECT_EQ(e.used.triangularView<Eigen::StrictlyUpper>().toDenseMatrix().cwiseAbs().maxCoeff(), 0.0);
  }
  std::ostringstream csv;
  trace.write_csv(csv);
  EXPECT_EQ(csv.str().rfind("layer,head,matrix,query,key,weight\n", 0), 0u);
}

TEST(MiniLM, MemorizesFiftySequences) {
  SyntheticSpec spec;
  spec.n_dialogues = 50;
  spec.turns_range = {3, 4};
  spec.n_causal_range = {1, 2};
  spec.key_slots = 2;
  spec.vocab_size = 10;
  spec.seed = 17;
  const Corpus c = generate_synthetic(spec);
  MiniLMConfig mc;
  mc.layers = 2;
  mc.heads = 2;
  mc.model_width = 32;
  mc.seed = 4;
  MiniLM m(mc, Vocabulary::fit(c));
  TrainerConfig tc;
  tc.epochs = 60;
  tc.batch_size = 5;
  tc.learning_rate = 1e-2;
  vanilla_finetune(m, c, tc);
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& d : c.dialogues)
    for (double v : response_nll(m, d, AttentionMode::standard)) {
      total += v;
      ++n;
    }
  EXPECT_LT(total / static_cast<double>(n), 0.05);
}

}  // namespace
}  // namespace cpd
