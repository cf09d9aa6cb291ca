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
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "cpd/adapter.hpp"
#include "cpd/autograd.hpp"
#include "cpd/error.hpp"
#include "cpd/position_control.hpp"
#include "cpd/rng.hpp"
#include "cpd/tokenizer.hpp"

namespace cpd {

enum class PositionScheme { learned_absolute, rotary };

inline std::string_view to_string(PositionScheme p) {
  return p == PositionScheme::rotary ? "rotary" : "learned_absolute";
}

inline std::optional<PositionScheme> parse_position_scheme(std::string_view s) {
  if (s == "rotary") return PositionScheme::rotary;
  if (s == "learned_absolute") return PositionScheme::learned_absolute;
  return std::nullopt;
}

enum class TruncationPolicy { error, left };

struct MiniLMConfig {
  int layers = 4;
  int heads = 4;
  int model_width = 128;
  int vocab_size = 0;
  int max_sequence_length = 256;
  PositionScheme position_scheme = PositionScheme::rotary;
  std::uint64_t seed = 0;
  int mlp_ratio = 4;
  double rotary_base = 10000.0;
  TruncationPolicy truncation = TruncationPolicy::error;

  int head_dim() const { return model_width / heads; }

  void validate() const {
    if (layers < 1 || heads < 1 || model_width < 1) throw ModelError("model config: layers, heads and width must be positive");
    if (model_width % heads != 0) throw ModelError("model config: model_width must be divisible by heads");
    if (position_scheme == PositionScheme::rotary && head_dim() % 2 != 0)
      throw ModelError("model config: rotary positions need an even head width");
    if (vocab_size < 5) throw ModelError("model config: vocab_size too small");
    if (max_sequence_length < 2) throw ModelError("model config: max_sequence_length too small");
    if (mlp_ratio < 1) throw ModelError("model config: mlp_ratio must be positive");
  }

  bool operator==(const MiniLMConfig&) const = default;
};

inline nlohmann::json to_json(const MiniLMConfig& c) {
  return {{"layers", c.layers},
          {"heads", c.heads},
          {"model_width", c.model_width},
          {"vocab_size", c.vocab_size},
          {"max_sequence_length", c.max_sequence_length},
          {"position_scheme", to_string(c.position_scheme)},
          {"seed", c.seed},
          {"mlp_ratio", c.mlp_ratio},
          {"rotary_base", c.rotary_base},
          {"truncation", c.truncation == TruncationPolicy::left ? "left" : "error"}};
}

inline MiniLMConfig config_from_json(const nlohmann::json& j) {
  MiniLMConfig c;
  c.layers = j.at("layers").get<int>();
  c.heads = j.at("heads").get<int>();
  c.model_width = j.at("model_width").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_sequence_length = j.at("max_sequence_length").get<int>();
  const auto scheme = parse_position_scheme(j.at("position_scheme").get<std::string>());
  if (!scheme) throw ModelError("checkpoint: unknown position scheme");
  c.position_scheme = *scheme;
  c.seed = j.at("seed").get<std::uint64_t>();
  c.mlp_ratio = j.value("mlp_ratio", 4);
  c.rotary_base = j.value("rotary_base", 10000.0);
  c.truncation = j.value("truncation", std::string("error")) == "left" ? TruncationPolicy::left : TruncationPolicy::error;
  return c;
}

// Token ids of a rendered prompt with the response appended.
struct EncodedDialogue {
  std::vector<int> ids;
  SegmentMap segments;
  std::size_t response_start = 0;  // index of the first response token
  std::vector<int> response_ids;

  // Rows whose next-token prediction is a response token.
  std::vector<int> prediction_rows() const {
    std::vector<int> rows(response_ids.size());
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = static_cast<int>(response_start + i) - 1;
    return rows;
  }
};

// Per-layer, per-head attention matrices captured during a forward pass.
struct AttentionTrace {
  struct Entry {
    int layer = 0;
    int head = 0;
    Matrix a_pe;    // empty when not computed in this mode
    Matrix a_nope;  // empty when not computed in this mode
    Matrix used;    // the matrix applied to the values
  };
  std::vector<Entry> entries;

  void write_csv(std::ostream& out) const {
    out << "layer,head,matrix,query,key,weight\n";
    const auto dump = [&out](const Entry& e, const char* name, const Matrix& m) {
      for (Eigen::Index t = 0; t < m.rows(); ++t)
        for (Eigen::Index s = 0; s <= t && s < m.cols(); ++s)
          out << e.layer << ',' << e.head << ',' << name << ',' << t << ',' << s << ',' << m(t, s) << '\n';
    };
    for (const auto& e : entries) {
      if (e.a_pe.size()) dump(e, "pe", e.a_pe);
      if (e.a_nope.size()) dump(e, "nope", e.a_nope);
      dump(e, "used", e.used);
    }
  }
};

// Miniature decoder-only transformer (pre-norm, RMSNorm, GELU MLP).
//
// Position information enters only through attention scores: rotary rotates
// queries and keys, learned absolute embeddings are added to the query/key
// inputs of every layer. Either way the residual stream is position-free, so
// scores can be evaluated with and without position on the same hidden
// states, which is what local_position mixing needs.
class MiniLM final : public ModelAdapter {
 public:
  MiniLM(MiniLMConfig config, Vocabulary vocab) : config_(config), vocab_(std::move(vocab)) {
    if (config_.vocab_size == 0) config_.vocab_size = vocab_.size();
    if (config_.vocab_size != vocab_.size()) throw ModelError("model vocab_size does not match vocabulary");
    config_.validate();
    initialize();
  }

  const MiniLMConfig& config() const { return config_; }
  const Vocabulary& vocab() const { return vocab_; }
  std::vector<Matrix>& parameters() { return params_; }
  const std::vector<Matrix>& parameters() const { return params_; }
  const std::vector<std::string>& parameter_names() const { return names_; }
  void set_truncation(TruncationPolicy p) { config_.truncation = p; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p.size());
    return n;
  }

  // Renders and tokenizes instruction + history + response. Throws
  // SequenceOverflowError when the prompt exceeds the context unless the
  // truncation policy drops the oldest tokens.
  EncodedDialogue encode(const Dialogue& d) const { return encode_with_prefix(d, d.response); }

  EncodedDialogue encode_with_prefix(const Dialogue& d, std::string_view response_prefix) const {
    const PromptLayout layout = render_prompt(d, response_prefix);
    const auto spans = vocab_.tokenize_with_offsets(layout.text);
    EncodedDialogue enc;
    enc.segments = build_segment_map(layout, spans);
    enc.ids.reserve(spans.size());
    for (const auto& s : spans) enc.ids.push_back(s.id);
    const int response_segment = enc.segments.count() - 1;
    std::size_t tag = 0;
    while (enc.segments.segment_of[tag] != response_segment) ++tag;
    enc.response_start = tag + 1;
    enc.response_ids.assign(enc.ids.begin() + static_cast<std::ptrdiff_t>(enc.response_start), enc.ids.end());

    const auto limit = static_cast<std::size_t>(config_.max_sequence_length);
    if (enc.ids.size() > limit) {
      if (config_.truncation == TruncationPolicy::error)
        throw SequenceOverflowError("prompt of " + std::to_string(enc.ids.size()) +
                                    " tokens exceeds max_sequence_length " + std::to_string(limit) +
                                    " (dialogue " + d.dialogue_id + "); enable left truncation to drop the oldest tokens");
      const std::size_t drop = enc.ids.size() - limit;
      if (drop > tag) throw SequenceOverflowError("response block alone exceeds max_sequence_length");
      enc.ids.erase(enc.ids.begin(), enc.ids.begin() + static_cast<std::ptrdiff_t>(drop));
      enc.segments.segment_of.erase(enc.segments.segment_of.begin(),
                                    enc.segments.segment_of.begin() + static_cast<std::ptrdiff_t>(drop));
      enc.response_start -= drop;
    }
    return enc;
  }

  // Logits (rows.size() x vocab) for the selected sequence positions.
  ag::Var forward_logits(ag::Tape& tape, std::span<const int> ids, const SegmentMap& segments, AttentionMode mode,
                         std::span<const int> rows, AttentionTrace* trace = nullptr) const {
    const auto T = static_cast<Eigen::Index>(ids.size());
    if (T == 0) throw ModelError("forward pass on an empty sequence");
    if (T > config_.max_sequence_length) throw SequenceOverflowError("sequence exceeds max_sequence_length");
    if (static_cast<Eigen::Index>(segments.tokens()) != T) throw ModelError("segment map does not match sequence");

    const int dh = config_.head_dim();
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    const bool need_pe = mode != AttentionMode::no_position;
    const bool need_nope = mode != AttentionMode::standard;

    std::vector<int> positions(static_cast<std::size_t>(T));
    for (Eigen::Index i = 0; i < T; ++i) positions[static_cast<std::size_t>(i)] = static_cast<int>(i);
    const Matrix same = mode == AttentionMode::local_position ? segments.same_segment_mask() : Matrix();

    const auto P = [&](std::size_t slot) { return tape.parameter(params_[slot], slot); };

    ag::Var pos_rows;
    if (need_pe && config_.position_scheme == PositionScheme::learned_absolute)
      pos_rows = ag::gather_rows(P(pos_emb_), positions);

    ag::Var h = ag::gather_rows(P(tok_emb_), ids);
    for (int l = 0; l < config_.layers; ++l) {
      const LayerSlots& L = layers_[static_cast<std::size_t>(l)];
      ag::Var x = ag::rms_norm(h, P(L.norm1));
      ag::Var wq = P(L.wq), wk = P(L.wk), wv = P(L.wv);
      ag::Var v = ag::matmul(x, wv);
      ag::Var q_nope, k_nope, q_pe, k_pe;
      if (need_nope || config_.position_scheme == PositionScheme::rotary) {
        q_nope = ag::matmul(x, wq);
        k_nope = ag::matmul(x, wk);
      }
      if (need_pe) {
        if (config_.position_scheme == PositionScheme::rotary) {
          q_pe = ag::rotary(q_nope, positions, dh, config_.rotary_base);
          k_pe = ag::rotary(k_nope, positions, dh, config_.rotary_base);
        } else {
          ag::Var xp = ag::add(x, pos_rows);
          q_pe = ag::matmul(xp, wq);
          k_pe = ag::matmul(xp, wk);
        }
      }

      std::vector<ag::Var> head_out;
      head_out.reserve(static_cast<std::size_t>(config_.heads));
      for (int hd = 0; hd < config_.heads; ++hd) {
        const Eigen::Index c0 = static_cast<Eigen::Index>(hd) * dh;
        const auto attention = [&](ag::Var q, ag::Var k) {
          return ag::causal_softmax(ag::scale(ag::matmul_nt(ag::slice_cols(q, c0, dh), ag::slice_cols(k, c0, dh)), inv_sqrt));
        };
        ag::Var a_pe, a_nope, used;
        if (need_pe) a_pe = attention(q_pe, k_pe);
        if (need_nope) a_nope = attention(q_nope, k_nope);
        switch (mode) {
          case AttentionMode::standard: used = a_pe; break;
          case AttentionMode::no_position: used = a_nope; break;
          case AttentionMode::local_position: used = ag::mix_attention(a_pe, a_nope, same); break;
        }
        if (trace)
          trace->entries.push_back({l, hd, need_pe ? a_pe.value() : Matrix(), need_nope ? a_nope.value() : Matrix(),
                                    used.value()});
        head_out.push_back(ag::matmul(used, ag::slice_cols(v, c0, dh)));
      }
      h = ag::add(h, ag::matmul(ag::concat_cols(head_out), P(L.wo)));

      ag::Var x2 = ag::rms_norm(h, P(L.norm2));
      ag::Var hidden = ag::gelu(ag::add_row(ag::matmul(x2, P(L.w1)), P(L.b1)));
      h = ag::add(h, ag::add_row(ag::matmul(hidden, P(L.w2)), P(L.b2)));
    }
    ag::Var selected = ag::select_rows(h, rows);
    return ag::matmul(ag::rms_norm(selected, P(final_norm_)), P(w_out_));
  }

  // Log-probabilities (response tokens x vocab) under teacher forcing.
  ag::Var response_log_probs(ag::Tape& tape, const EncodedDialogue& enc, AttentionMode mode,
                             AttentionTrace* trace = nullptr) const {
    const auto rows = enc.prediction_rows();
    return ag::log_softmax(forward_logits(tape, enc.ids, enc.segments, mode, rows, trace));
  }

  // Next-token distribution after the last token of `ids`.
  Vector next_token_distribution(std::span<const int> ids, const SegmentMap& segments, AttentionMode mode) const {
    ag::Tape tape(false);
    const int last = static_cast<int>(ids.size()) - 1;
    ag::Var lp = ag::log_softmax(forward_logits(tape, ids, segments, mode, std::span<const int>(&last, 1)));
    return lp.value().row(0).array().exp().transpose();
  }

  // Greedy decoding of up to max_new_tokens response tokens.
  std::string generate(const Dialogue& d, int max_new_tokens, AttentionMode mode) const {
    std::vector<int> out;
    for (int step = 0; step < max_new_tokens; ++step) {
      const EncodedDialogue enc = encode_with_prefix(d, vocab_.detokenize(out));
      const Vector p = next_token_distribution(enc.ids, enc.segments, mode);
      Eigen::Index best = 0;
      p.maxCoeff(&best);
      out.push_back(static_cast<int>(best));
    }
    return vocab_.detokenize(out);
  }

  // ModelAdapter
  TokenSequence tokenize(std::string_view text) const override { return vocab_.tokenize(text); }

  ResponseDistribution response_distributions(const Dialogue& d, AttentionMode mode) const override {
    const EncodedDialogue enc = encode(d);
    ag::Tape tape(false);
    ag::Var lp = response_log_probs(tape, enc, mode);
    return {lp.value().array().exp().matrix(), enc.response_ids};
  }

  std::vector<double> response_nll(const Dialogue& d, AttentionMode mode) const override {
    const EncodedDialogue enc = encode(d);
    ag::Tape tape(false);
    const Matrix& lp = response_log_probs(tape, enc, mode).value();
    std::vector<double> out(enc.response_ids.size());
    for (std::size_t t = 0; t < out.size(); ++t) out[t] = -lp(static_cast<Eigen::Index>(t), enc.response_ids[t]);
    return out;
  }

  bool trainable() const override { return true; }

  void save(const std::filesystem::path& path) const {
    nlohmann::json j;
    j["format"] = "cpd-minilm-v1";
    j["config"] = to_json(config_);
    nlohmann::json ps = nlohmann::json::array();
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const Matrix& m = params_[i];
      ps.push_back({{"name", names_[i]},
                    {"rows", m.rows()},
                    {"cols", m.cols()},
                    {"data", std::vector<double>(m.data(), m.data() + m.size())}});
    }
    j["parameters"] = std::move(ps);
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw ModelError("cannot write checkpoint: " + path.string());
    out << j.dump() << '\n';
  }

  static MiniLM load(const std::filesystem::path& path, Vocabulary vocab) {
    std::ifstream in(path);
    if (!in) throw ModelError("cannot read checkpoint: " + path.string());
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ModelError("checkpoint is not valid JSON: " + std::string(e.what()));
    }
    if (j.value("format", std::string()) != "cpd-minilm-v1") throw ModelError("unknown checkpoint format");
    MiniLM model(config_from_json(j.at("config")), std::move(vocab));
    const auto& ps = j.at("parameters");
    if (ps.size() != model.params_.size()) throw ModelError("checkpoint parameter count mismatch");
    for (std::size_t i = 0; i < ps.size(); ++i) {
      Matrix& m = model.params_[i];
      if (ps[i].at("name").get<std::string>() != model.names_[i] || ps[i].at("rows").get<Eigen::Index>() != m.rows() ||
          ps[i].at("cols").get<Eigen::Index>() != m.cols())
        throw ModelError("checkpoint parameter layout mismatch at " + model.names_[i]);
      const auto data = ps[i].at("data").get<std::vector<double>>();
      std::copy(data.begin(), data.end(), m.data());
    }
    return model;
  }

 private:
  struct LayerSlots {
    std::size_t norm1, wq, wk, wv, wo, norm2, w1, b1, w2, b2;
  };

  std::size_t add_param(std::string name, Matrix m) {
    names_.push_back(std::move(name));
    params_.push_back(std::move(m));
    return params_.size() - 1;
  }

  void initialize() {
    Rng rng(config_.seed);
    const auto normal = [&rng](Eigen::Index r, Eigen::Index c, double std) {
      Matrix m(r, c);
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal() * std;
      return m;
    };
    const Eigen::Index d = config_.model_width;
    const Eigen::Index ff = d * config_.mlp_ratio;
    const Eigen::Index V = config_.vocab_size;
    const double proj = 1.0 / std::sqrt(static_cast<double>(d));
    const double resid = proj / std::sqrt(2.0 * config_.layers);

    tok_emb_ = add_param("tok_emb", normal(V, d, 1.0));
    pos_emb_ = add_param("pos_emb", config_.position_scheme == PositionScheme::learned_absolute
                                        ? normal(config_.max_sequence_length, d, 0.5)
                                        : Matrix::Zero(1, 1));
    for (int l = 0; l < config_.layers; ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      LayerSlots s{};
      s.norm1 = add_param(p + "norm1", Matrix::Ones(1, d));
      s.wq = add_param(p + "wq", normal(d, d, proj));
      s.wk = add_param(p + "wk", normal(d, d, proj));
      s.wv = add_param(p + "wv", normal(d, d, proj));
      s.wo = add_param(p + "wo", normal(d, d, resid));
      s.norm2 = add_param(p + "norm2", Matrix::Ones(1, d));
      s.w1 = add_param(p + "w1", normal(d, ff, proj));
      s.b1 = add_param(p + "b1", Matrix::Zero(1, ff));
      s.w2 = add_param(p + "w2", normal(ff, d, resid / std::sqrt(static_cast<double>(config_.mlp_ratio))));
      s.b2 = add_param(p + "b2", Matrix::Zero(1, d));
      layers_.push_back(s);
    }
    final_norm_ = add_param("final_norm", Matrix::Ones(1, d));
    w_out_ = add_param("w_out", normal(d, V, proj));
  }

  MiniLMConfig config_;
  Vocabulary vocab_;
  std::vector<Matrix> params_;
  std::vector<std::string> names_;
  std::size_t tok_emb_ = 0, pos_emb_ = 0, final_norm_ = 0, w_out_ = 0;
  std::vector<LayerSlots> layers_;
};

}  // namespace cpd
