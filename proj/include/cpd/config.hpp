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

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cpd/corpus.hpp"
#include "cpd/error.hpp"
#include "cpd/minilm.hpp"
#include "cpd/perturbation.hpp"
#include "cpd/synthetic.hpp"
#include "cpd/trainer.hpp"

namespace cpd {

inline constexpr const char* kVersion = "0.1.0";

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// Flat "key = value" file. Blank lines and lines starting with '#' are
// ignored; later assignments override earlier ones.
class KeyValues {
 public:
  static KeyValues parse(std::istream& in, const std::string& source = "config") {
    KeyValues kv;
    std::string line;
    int line_no = 0;
    std::vector<std::string> problems;
    while (std::getline(in, line)) {
      ++line_no;
      const auto text = trim(line);
      if (text.empty() || text.front() == '#') continue;
      const auto eq = text.find('=');
      if (eq == std::string::npos) {
        problems.push_back(source + ":" + std::to_string(line_no) + ": expected key = value");
        continue;
      }
      const std::string key(trim(text.substr(0, eq)));
      if (key.empty()) {
        problems.push_back(source + ":" + std::to_string(line_no) + ": empty key");
        continue;
      }
      kv.values_[key] = std::string(trim(text.substr(eq + 1)));
    }
    if (!problems.empty()) throw ConfigError(join(problems));
    return kv;
  }

  static KeyValues load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path.string());
    return parse(in, path.string());
  }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  bool has(const std::string& key) const { return values_.count(key) > 0; }
  const std::map<std::string, std::string>& values() const { return values_; }

  // Canonical sorted "key=value" lines; the config hash covers exactly this.
  std::string canonical() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + "=" + v + "\n";
    return out;
  }

  std::string hash() const { return hex64(fnv1a(canonical())); }

  static std::string join(const std::vector<std::string>& items) {
    std::string out;
    for (const auto& s : items) out += (out.empty() ? "" : "\n") + s;
    return out;
  }

 private:
  std::map<std::string, std::string> values_;
};

// Typed view over KeyValues that records every problem instead of stopping
// at the first one.
class ConfigReader {
 public:
  explicit ConfigReader(const KeyValues& kv) : kv_(kv) {}

  std::string str(const std::string& key, const std::string& def) {
    used_.insert(key);
    auto it = kv_.values().find(key);
    return it == kv_.values().end() ? def : it->second;
  }

  std::optional<std::string> optional_str(const std::string& key) {
    used_.insert(key);
    auto it = kv_.values().find(key);
    if (it == kv_.values().end() || it->second.empty()) return std::nullopt;
    return it->second;
  }

  template <class T>
  T num(const std::string& key, T def) {
    used_.insert(key);
    auto it = kv_.values().find(key);
    if (it == kv_.values().end()) return def;
    std::istringstream in(it->second);
    T v{};
    if (!(in >> v) || !(in >> std::ws).eof()) {
      problems_.push_back(key + ": expected a number, got '" + it->second + "'");
      return def;
    }
    return v;
  }

  bool flag(const std::string& key, bool def) {
    const std::string v = str(key, def ? "true" : "false");
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    problems_.push_back(key + ": expected true or false, got '" + v + "'");
    return def;
  }

  std::vector<double> list(const std::string& key, std::vector<double> def) {
    used_.insert(key);
    auto it = kv_.values().find(key);
    if (it == kv_.values().end()) return def;
    std::vector<double> out;
    std::stringstream in(it->second);
    std::string item;
    while (std::getline(in, item, ',')) {
      std::istringstream one{std::string(trim(item))};
      double v = 0.0;
      if (!(one >> v) || !(one >> std::ws).eof()) {
        problems_.push_back(key + ": expected comma-separated numbers, got '" + it->second + "'");
        return def;
      }
      out.push_back(v);
    }
    return out;
  }

  std::vector<std::string> strings(const std::string& key, std::vector<std::string> def, char sep = '|') {
    used_.insert(key);
    auto it = kv_.values().find(key);
    if (it == kv_.values().end()) return def;
    std::vector<std::string> out;
    std::stringstream in(it->second);
    std::string item;
    while (std::getline(in, item, sep)) out.emplace_back(trim(item));
    return out;
  }

  void problem(std::string p) { problems_.push_back(std::move(p)); }

  std::vector<std::string> finish() {
    for (const auto& [k, v] : kv_.values())
      if (!used_.count(k)) problems_.push_back(k + ": unknown key");
    return problems_;
  }

 private:
  const KeyValues& kv_;
  std::set<std::string> used_;
  std::vector<std::string> problems_;
};

struct RunConfig {
  KeyValues source;
  std::filesystem::path out_dir = "cpd-run";

  std::optional<std::filesystem::path> train_corpus, test_corpus, probe_corpus;
  std::optional<std::filesystem::path> checkpoint;  // model bundle directory
  std::optional<std::filesystem::path> extractions;

  SyntheticSpec synth;
  int held_out_dialogues = 150;
  std::uint64_t held_out_seed = 1;

  MiniLMConfig model;
  AttentionMode extraction_mode = AttentionMode::local_position;
  AttentionMode analysis_mode = AttentionMode::standard;
  TrainerConfig extractor_trainer;
  TrainerConfig trainer;
  FillerPool fillers = FillerPool::defaults();

  int heatmap_max_distance = 5;
  int independence_max_extra = 3;
  std::uint64_t independence_seed = 0;
  int far_from = 5;
  int max_new_tokens = 0;  // 0: gold response length
  bool baseline = true;    // pipeline also trains a vanilla model for comparison

  nlohmann::json seeds() const {
    return {{"synth", synth.seed},         {"held_out", held_out_seed},     {"model", model.seed},
            {"extractor_train", extractor_trainer.seed}, {"train", trainer.seed}, {"independence", independence_seed}};
  }
};

namespace detail {

inline AttentionMode read_mode(ConfigReader& r, const std::string& key, AttentionMode def) {
  const std::string v = r.str(key, std::string(to_string(def)));
  if (auto m = parse_attention_mode(v)) return *m;
  r.problem(key + ": unknown attention mode '" + v + "' (standard, no_position, local_position)");
  return def;
}

inline void read_trainer(ConfigReader& r, const std::string& prefix, TrainerConfig& t) {
  t.alpha = r.num(prefix + "alpha", t.alpha);
  t.beta = r.num(prefix + "beta", t.beta);
  t.kl_clip = r.num(prefix + "kl_clip", t.kl_clip);
  t.round_cap = r.num(prefix + "round_cap", t.round_cap);
  t.auto_balance = r.flag(prefix + "auto_balance", t.auto_balance);
  t.learning_rate = r.num(prefix + "learning_rate", t.learning_rate);
  t.clip_norm = r.num(prefix + "clip_norm", t.clip_norm);
  t.weight_decay = r.num(prefix + "weight_decay", t.weight_decay);
  t.epochs = r.num(prefix + "epochs", t.epochs);
  t.batch_size = r.num(prefix + "batch_size", t.batch_size);
  t.seed = r.num(prefix + "seed", t.seed);
  for (const auto& p : t.problems()) r.problem(prefix + p);
}

}  // namespace detail

// Builds a RunConfig; throws ConfigError listing every problem found.
inline RunConfig read_run_config(const KeyValues& kv) {
  RunConfig c;
  c.source = kv;
  ConfigReader r(kv);
  c.out_dir = r.str("out_dir", c.out_dir.string());
  if (auto p = r.optional_str("corpus.train")) c.train_corpus = *p;
  if (auto p = r.optional_str("corpus.test")) c.test_corpus = *p;
  if (auto p = r.optional_str("corpus.probe")) c.probe_corpus = *p;
  if (auto p = r.optional_str("model.checkpoint")) c.checkpoint = *p;
  if (auto p = r.optional_str("extractions")) c.extractions = *p;

  SyntheticSpec& s = c.synth;
  s.n_dialogues = r.num("synth.n_dialogues", 600);
  s.turns_range = {r.num("synth.turns_min", 8), r.num("synth.turns_max", 12)};
  s.n_causal_range = {r.num("synth.causal_min", 1), r.num("synth.causal_max", 3)};
  s.n_decoy_range = {r.num("synth.decoys_min", 1), r.num("synth.decoys_max", 2)};
  s.distance_bias = r.list("synth.distance_bias", {1.0, 1.0, 0.8, 0.4, 0.1, 0.03, 0.03, 0.03, 0.03, 0.03, 0.03, 0.03});
  s.decoy_bias = r.list("synth.decoy_bias", {0.05, 0.05, 0.2, 0.5, 1, 1, 1, 1, 1, 1, 1, 1});
  s.vocab_size = r.num("synth.vocab_size", s.vocab_size);
  s.key_slots = r.num("synth.key_slots", s.key_slots);
  s.seed = r.num<std::uint64_t>("synth.seed", 11);
  s.response_preamble = r.str("synth.response_preamble", "summary of shared details follows here with every listed item below");
  c.held_out_dialogues = r.num("synth.held_out_dialogues", c.held_out_dialogues);
  c.held_out_seed = r.num<std::uint64_t>("synth.held_out_seed", 99);
  try {
    validate(s);
  } catch (const CorpusError& e) {
    r.problem(std::string("synth: ") + e.what());
  }
  if (c.held_out_dialogues < 0) r.problem("synth.held_out_dialogues must be >= 0");

  MiniLMConfig& m = c.model;
  m.layers = r.num("model.layers", 2);
  m.heads = r.num("model.heads", 2);
  m.model_width = r.num("model.width", 32);
  m.mlp_ratio = r.num("model.mlp_ratio", 4);
  m.max_sequence_length = r.num("model.max_sequence_length", 160);
  m.seed = r.num<std::uint64_t>("model.seed", 5);
  const std::string scheme = r.str("model.position", "rotary");
  if (scheme == "rotary") m.position_scheme = PositionScheme::rotary;
  else if (scheme == "learned_absolute") m.position_scheme = PositionScheme::learned_absolute;
  else r.problem("model.position: unknown scheme '" + scheme + "' (rotary, learned_absolute)");
  const std::string trunc = r.str("model.truncation", "error");
  if (trunc == "error") m.truncation = TruncationPolicy::error;
  else if (trunc == "left") m.truncation = TruncationPolicy::left;
  else r.problem("model.truncation: unknown policy '" + trunc + "' (error, left)");
  {
    MiniLMConfig probe = m;
    probe.vocab_size = 1000;
    try {
      probe.validate();
    } catch (const ModelError& e) {
      r.problem(e.what());
    }
  }

  c.extraction_mode = detail::read_mode(r, "extract.mode", c.extraction_mode);
  c.analysis_mode = detail::read_mode(r, "analysis.mode", c.analysis_mode);

  c.extractor_trainer.epochs = 20;
  c.extractor_trainer.seed = 3;
  detail::read_trainer(r, "extractor.", c.extractor_trainer);
  c.extractor_trainer.alpha = c.extractor_trainer.beta = 0.0;
  c.extractor_trainer.mode = c.extraction_mode;

  c.trainer.epochs = 20;
  c.trainer.seed = 200;
  c.trainer.alpha = 0.1;
  c.trainer.beta = 0.02;
  c.trainer.round_cap = 4;
  detail::read_trainer(r, "train.", c.trainer);
  c.trainer.mode = detail::read_mode(r, "train.mode", AttentionMode::standard);

  c.fillers.fillers = r.strings("fillers", c.fillers.fillers);
  try {
    c.fillers.validate();
  } catch (const Error& e) {
    r.problem(std::string("fillers: ") + e.what());
  }

  c.heatmap_max_distance = r.num("probe.max_distance", c.heatmap_max_distance);
  if (c.heatmap_max_distance < 1) r.problem("probe.max_distance must be >= 1");
  c.independence_max_extra = r.num("independence.max_extra", c.independence_max_extra);
  if (c.independence_max_extra < 0) r.problem("independence.max_extra must be >= 0");
  c.independence_seed = r.num<std::uint64_t>("independence.seed", 7);
  c.far_from = r.num("eval.far_from", c.far_from);
  c.max_new_tokens = r.num("eval.max_new_tokens", c.max_new_tokens);
  if (c.max_new_tokens < 0) r.problem("eval.max_new_tokens must be >= 0");
  c.baseline = r.flag("pipeline.baseline", c.baseline);

  const auto problems = r.finish();
  if (!problems.empty()) {
    std::string msg = "invalid configuration (" + std::to_string(problems.size()) + " problem" +
                      (problems.size() == 1 ? "" : "s") + "):";
    for (const auto& p : problems) msg += "\n  - " + p;
    throw ConfigError(msg);
  }
  return c;
}

}  // namespace cpd
