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

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "cpd/config.hpp"
#include "cpd/evalsuite.hpp"
#include "cpd/experiment.hpp"
#include "cpd/extraction.hpp"
#include "cpd/minilm.hpp"
#include "cpd/perturbation.hpp"
#include "cpd/plot.hpp"
#include "cpd/synthetic.hpp"
#include "cpd/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace cpd::cli {
namespace {

// Raised when an upstream artifact is absent; names the stage that makes it.
class MissingArtifact : public Error {
 public:
  MissingArtifact(const fs::path& path, int stage, const std::string& how)
      : Error("missing " + path.string() + "\n  it is produced by pipeline stage " + std::to_string(stage) + " (" +
              how + ")\n  rerun it with: cpd pipeline --stage " + std::to_string(stage) + " [-c CONFIG]") {}
};

struct Layout {
  fs::path root;

  fs::path corpus_dir() const { return root / "corpus"; }
  fs::path vocab() const { return root / "vocab.txt"; }
  fs::path extractor() const { return root / "extractor"; }
  fs::path extraction_dir() const { return root / "extraction"; }
  fs::path partitions() const { return extraction_dir() / "partitions.jsonl"; }
  fs::path frequency() const { return extraction_dir() / "position_frequency.csv"; }
  fs::path cpd_model() const { return root / "model"; }
  fs::path vanilla_model() const { return root / "vanilla"; }
  fs::path eval_dir() const { return root / "eval"; }
  fs::path probe_dir() const { return root / "probe"; }
  fs::path independence_dir() const { return root / "independence"; }
  fs::path manifest() const { return root / "manifest.json"; }
};

struct Context {
  RunConfig cfg;
  Layout layout;
  std::vector<fs::path> written;

  bool synthetic() const { return !cfg.train_corpus; }
  fs::path train_path() const { return cfg.train_corpus.value_or(layout.corpus_dir() / "train.jsonl"); }
  fs::path test_path() const { return cfg.test_corpus.value_or(layout.corpus_dir() / "test.jsonl"); }
  fs::path probe_path() const { return cfg.probe_corpus.value_or(layout.corpus_dir() / "probe.jsonl"); }
  fs::path partitions_path() const { return cfg.extractions.value_or(layout.partitions()); }

  void wrote(const fs::path& p) {
    written.push_back(p);
    std::cerr << "  wrote " << p.string() << "\n";
  }
};

void log(const std::string& msg) { std::cerr << msg << "\n"; }

std::ofstream open_out(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p);
  if (!out) throw Error("cannot write " + p.string());
  return out;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---- configuration ---------------------------------------------------------

struct CommonOptions {
  std::string config_path;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* app, CommonOptions& o) {
  app->add_option("-c,--config", o.config_path, "key = value configuration file");
  app->add_option("--set", o.overrides, "override one configuration key (KEY=VALUE); repeatable");
}

Context load_context(const CommonOptions& o) {
  KeyValues kv;
  if (!o.config_path.empty()) kv = KeyValues::load(o.config_path);
  std::vector<std::string> problems;
  for (const auto& s : o.overrides) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) problems.push_back("--set " + s + ": expected KEY=VALUE");
    else kv.set(trim(s.substr(0, eq)), trim(s.substr(eq + 1)));
  }
  Context ctx;
  try {
    ctx.cfg = read_run_config(kv);
  } catch (const ConfigError& e) {
    std::string msg = e.what();
    for (const auto& p : problems) msg += "\n  - " + p;
    throw ConfigError(msg);
  }
  const auto check = [&](const std::optional<fs::path>& p, const char* key) {
    if (p && !fs::exists(*p)) problems.push_back(std::string(key) + ": no such file or directory: " + p->string());
  };
  check(ctx.cfg.train_corpus, "corpus.train");
  check(ctx.cfg.test_corpus, "corpus.test");
  check(ctx.cfg.probe_corpus, "corpus.probe");
  check(ctx.cfg.checkpoint, "model.checkpoint");
  check(ctx.cfg.extractions, "extractions");
  if (!problems.empty()) {
    std::string msg = "invalid configuration (" + std::to_string(problems.size()) + " problem" +
                      (problems.size() == 1 ? "" : "s") + "):";
    for (const auto& p : problems) msg += "\n  - " + p;
    throw ConfigError(msg);
  }
  ctx.layout.root = ctx.cfg.out_dir;
  return ctx;
}

// Records the configuration, seeds and artifact hashes of a command. Re-running
// a command replaces its entry; a changed configuration starts a new manifest.
void update_manifest(Context& ctx, const std::string& command) {
  const fs::path path = ctx.layout.manifest();
  json m = json::object();
  if (fs::exists(path)) {
    try {
      m = json::parse(read_file(path));
    } catch (const json::exception&) {
    }
    if (!m.is_object()) m = json::object();
  }
  const std::string hash = ctx.cfg.source.hash();
  if (m.value("config_hash", std::string()) != hash) {
    if (m.contains("config_hash"))
      log("note: configuration changed (hash " + m["config_hash"].get<std::string>() + " -> " + hash +
          "); starting a new manifest");
    m = json::object();
  }
  m["tool"] = "cpd";
  m["version"] = kVersion;
  m["config_hash"] = hash;
  m["config"] = ctx.cfg.source.values();
  m["seeds"] = ctx.cfg.seeds();
  json artifacts = json::object();
  for (const auto& p : ctx.written)
    artifacts[fs::relative(p, ctx.layout.root).generic_string()] = hex64(fnv1a(read_file(p)));
  m["commands"][command] = {{"artifacts", artifacts}};
  auto out = open_out(path);
  out << m.dump(2) << "\n";
  std::ofstream(ctx.layout.root / "config.txt") << ctx.cfg.source.canonical();
}

// ---- corpora and models ----------------------------------------------------

Corpus require_corpus(const fs::path& p, Context& ctx, const char* what) {
  if (!fs::exists(p)) {
    if (ctx.synthetic() && p.parent_path() == ctx.layout.corpus_dir())
      throw MissingArtifact(p, 1, "synthetic corpora; `cpd synth` also makes them");
    throw Error("cannot open " + std::string(what) + " corpus " + p.string());
  }
  return load_corpus(p);
}

SyntheticSpec held_out_spec(const RunConfig& c, int n_causal_min, int n_causal_max, std::uint64_t seed) {
  SyntheticSpec s = c.synth;
  s.n_dialogues = c.held_out_dialogues;
  s.seed = seed;
  const std::size_t span = static_cast<std::size_t>(s.turns_range.second) + 1;
  s.distance_bias.assign(span, 1.0);
  s.decoy_bias.assign(span, 1.0);
  s.n_causal_range = {n_causal_min, n_causal_max};
  s.id_prefix = s.id_prefix + "-heldout";
  return s;
}

void synth(Context& ctx) {
  const RunConfig& c = ctx.cfg;
  const Corpus train = generate_synthetic(c.synth);
  const Corpus test = generate_synthetic(
      held_out_spec(c, c.synth.n_causal_range.first, c.synth.n_causal_range.second, c.held_out_seed));
  // Probe dialogues carry enough causal turns for the independence probe.
  const int k = std::min({c.independence_max_extra + 1, c.synth.key_slots, c.synth.turns_range.first});
  SyntheticSpec probe_spec = held_out_spec(c, k, k, c.held_out_seed + 1);
  probe_spec.id_prefix = c.synth.id_prefix + "-probe";
  const Corpus probe = generate_synthetic(probe_spec);
  for (const auto& [corpus, name] : {std::pair{&train, "train"}, {&test, "test"}, {&probe, "probe"}}) {
    const fs::path p = ctx.layout.corpus_dir() / (std::string(name) + ".jsonl");
    save_corpus(*corpus, p);
    ctx.wrote(p);
  }
}

Vocabulary build_vocabulary(Context& ctx, const Corpus& train) {
  if (fs::exists(ctx.layout.vocab())) return Vocabulary::load(ctx.layout.vocab());
  const Vocabulary v = ctx.synthetic() ? synthetic_vocabulary(train, ctx.cfg.synth, ctx.cfg.fillers)
                                       : Vocabulary::fit(train, ctx.cfg.fillers.fillers);
  fs::create_directories(ctx.layout.root);
  v.save(ctx.layout.vocab());
  ctx.wrote(ctx.layout.vocab());
  return v;
}

struct Bundle {
  MiniLM model;
  AttentionMode mode;
  std::string name;
};

void save_bundle(Context& ctx, const fs::path& dir, const MiniLM& model, AttentionMode mode, const std::string& kind) {
  fs::create_directories(dir);
  model.save(dir / "model.json");
  model.vocab().save(dir / "vocab.txt");
  std::ofstream(dir / "meta.json") << json{{"kind", kind}, {"mode", std::string(to_string(mode))}}.dump(2) << "\n";
  for (const char* f : {"model.json", "vocab.txt", "meta.json"}) ctx.wrote(dir / f);
}

Bundle load_bundle(const fs::path& dir, const std::string& name) {
  for (const char* f : {"model.json", "vocab.txt"})
    if (!fs::exists(dir / f)) throw ModelError("model bundle " + dir.string() + " lacks " + f);
  Bundle b{MiniLM::load(dir / "model.json", Vocabulary::load(dir / "vocab.txt")), AttentionMode::standard, name};
  if (fs::exists(dir / "meta.json")) {
    const json meta = json::parse(read_file(dir / "meta.json"));
    if (auto m = parse_attention_mode(meta.value("mode", std::string("standard")))) b.mode = *m;
  }
  return b;
}

// `ref` is extractor, cpd, vanilla or a bundle directory.
Bundle resolve_model(const Context& ctx, const std::string& ref) {
  const Layout& l = ctx.layout;
  if (ref == "extractor") {
    if (!fs::exists(l.extractor() / "model.json"))
      throw MissingArtifact(l.extractor() / "model.json", 1, "extractor fine-tuning in local_position mode");
    return load_bundle(l.extractor(), "extractor");
  }
  if (ref == "cpd") {
    if (!fs::exists(l.cpd_model() / "model.json"))
      throw MissingArtifact(l.cpd_model() / "model.json", 3, "CPD fine-tuning of the standard-mode model");
    return load_bundle(l.cpd_model(), "cpd");
  }
  if (ref == "vanilla") {
    if (!fs::exists(l.vanilla_model() / "model.json"))
      throw MissingArtifact(l.vanilla_model() / "model.json", 3, "vanilla baseline fine-tuning");
    return load_bundle(l.vanilla_model(), "vanilla");
  }
  return load_bundle(ref, fs::path(ref).filename().string());
}

AttentionMode mode_or(const std::string& s, AttentionMode def) {
  if (s.empty()) return def;
  if (auto m = parse_attention_mode(s)) return *m;
  throw ConfigError("unknown attention mode '" + s + "' (standard, no_position, local_position)");
}

// ---- commands --------------------------------------------------------------

enum class FinetuneKind { extractor, cpd, vanilla };

void finetune_cmd(Context& ctx, FinetuneKind kind) {
  const RunConfig& c = ctx.cfg;
  const Corpus train = require_corpus(ctx.train_path(), ctx, "training");
  const Vocabulary vocab = build_vocabulary(ctx, train);

  TrainerConfig tc = kind == FinetuneKind::extractor ? c.extractor_trainer : c.trainer;
  std::vector<CausalPartition> partitions;
  if (kind == FinetuneKind::vanilla) tc.alpha = tc.beta = 0.0;
  if (kind == FinetuneKind::cpd && tc.auxiliary()) {
    if (!fs::exists(ctx.partitions_path()))
      throw MissingArtifact(ctx.partitions_path(), 2, "causal extraction over the training corpus");
    partitions = align_partitions(train, read_extractions(ctx.partitions_path()));
  }

  MiniLM model = c.checkpoint ? load_bundle(*c.checkpoint, "checkpoint").model : MiniLM(c.model, vocab);
  if (c.checkpoint && model.vocab().size() != vocab.size())
    throw ModelError("model.checkpoint vocabulary differs from " + ctx.layout.vocab().string());
  const char* names[] = {"extractor", "cpd", "vanilla"};
  const std::string name = names[static_cast<int>(kind)];
  const fs::path dir = kind == FinetuneKind::extractor ? ctx.layout.extractor()
                       : kind == FinetuneKind::cpd     ? ctx.layout.cpd_model()
                                                       : ctx.layout.vanilla_model();
  log("fine-tuning " + name + " model (" + std::string(to_string(tc.mode)) + ", " + std::to_string(tc.epochs) +
      " epochs, " + std::to_string(train.size()) + " dialogues)");

  fs::create_directories(dir);
  auto log_out = open_out(dir / "train_log.csv");
  log_out << "epoch,step,loss,l_pred,l_irm,mte_kl,rounds,grad_norm\n";
  int last_epoch = 0;
  double epoch_loss = 0.0;
  std::size_t epoch_steps = 0;
  const auto t0 = std::chrono::steady_clock::now();
  const auto flush_epoch = [&] {
    if (epoch_steps == 0) return;
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    char buf[128];
    std::snprintf(buf, sizeof buf, "  epoch %d/%d  loss %.4f  (%.0fs)", last_epoch, tc.epochs,
                  epoch_loss / static_cast<double>(epoch_steps), secs);
    log(buf);
  };
  const auto on_step = [&](const TrainStep& s) {
    if (s.epoch != last_epoch) {
      flush_epoch();
      last_epoch = s.epoch;
      epoch_loss = 0.0;
      epoch_steps = 0;
    }
    epoch_loss += s.loss;
    ++epoch_steps;
    double pred = 0, irm = 0, mte = 0, rounds = 0;
    for (const auto& r : s.reports) pred += r.l_pred, irm += r.l_irm, mte += r.mte_kl, rounds += r.n;
    const double inv = 1.0 / static_cast<double>(s.reports.size());
    log_out << s.epoch << ',' << s.step << ',' << s.loss << ',' << pred * inv << ',' << irm * inv << ',' << mte * inv
            << ',' << rounds * inv << ',' << s.grad_norm << '\n';
  };
  if (kind == FinetuneKind::cpd && tc.auxiliary()) cpd_finetune(model, train, std::move(partitions), tc, on_step);
  else vanilla_finetune(model, train, tc, on_step);
  flush_epoch();
  log_out.close();
  ctx.wrote(dir / "train_log.csv");
  save_bundle(ctx, dir, model, tc.mode, name);
}

void extract_cmd(Context& ctx, const std::string& model_ref, const std::string& corpus_arg, const std::string& out_arg,
                 const std::string& mode_arg) {
  const Bundle b = resolve_model(ctx, model_ref);
  const fs::path corpus_path = corpus_arg.empty() ? ctx.train_path() : fs::path(corpus_arg);
  const Corpus corpus = require_corpus(corpus_path, ctx, "extraction");
  const AttentionMode mode = mode_or(mode_arg, ctx.cfg.extraction_mode);
  const fs::path out = out_arg.empty() ? ctx.layout.partitions() : fs::path(out_arg);
  log("extracting causal turns from " + std::to_string(corpus.size()) + " dialogues with the " + b.name + " model (" +
      std::string(to_string(mode)) + ")");
  const auto records = extract_corpus(b.model, corpus, mode, ctx.cfg.fillers);
  {
    auto o = open_out(out);
    write_extractions(o, records);
  }
  ctx.wrote(out);
  bool labeled = !corpus.empty();
  for (const auto& d : corpus.dialogues) labeled = labeled && d.gold_causal.has_value();
  if (labeled) {
    const ExtractionReport rep = score_against_gold(partitions_of(records), corpus);
    const fs::path rp = out.parent_path() / (out.stem().string() + "-report.json");
    open_out(rp) << rep.to_json().dump(2) << "\n";
    ctx.wrote(rp);
    char buf[96];
    std::snprintf(buf, sizeof buf, "  precision %.3f  recall %.3f  F1 %.3f", rep.precision(), rep.recall(), rep.f1());
    log(buf);
  }
}

void render_plot(Context* ctx, const fs::path& csv, const fs::path& svg, const std::string& title) {
  std::ifstream in(csv);
  if (!in) throw Error("cannot open " + csv.string());
  auto out = open_out(svg);
  plot::render_svg(in, out, title);
  out.close();
  if (ctx) ctx->wrote(svg);
  else std::cerr << "  wrote " << svg.string() << "\n";
}

void stats_cmd(Context& ctx, const std::string& corpus_arg) {
  const fs::path corpus_path = corpus_arg.empty() ? ctx.train_path() : fs::path(corpus_arg);
  const Corpus corpus = require_corpus(corpus_path, ctx, "training");
  if (!fs::exists(ctx.partitions_path()))
    throw MissingArtifact(ctx.partitions_path(), 2, "causal extraction over the training corpus");
  const PositionFrequency q = position_frequency(align_partitions(corpus, read_extractions(ctx.partitions_path())), corpus);
  {
    auto o = open_out(ctx.layout.frequency());
    q.write_csv(o);
  }
  ctx.wrote(ctx.layout.frequency());
  fs::path svg = ctx.layout.frequency();
  render_plot(&ctx, ctx.layout.frequency(), svg.replace_extension(".svg"), "causal position frequency by turn distance");
}

std::string tag_of(const Bundle& b, AttentionMode mode) { return b.name + "-" + std::string(to_string(mode)); }

void probe_cmd(Context& ctx, const std::string& model_ref, const std::string& corpus_arg, const std::string& mode_arg) {
  const Bundle b = resolve_model(ctx, model_ref);
  const AttentionMode mode = mode_or(mode_arg, b.mode);
  const fs::path corpus_path = corpus_arg.empty() ? ctx.test_path() : fs::path(corpus_arg);
  const Corpus corpus = require_corpus(corpus_path, ctx, "probe");
  log("position-bias heatmap for the " + b.name + " model (" + std::string(to_string(mode)) + ", " +
      std::to_string(corpus.size()) + " dialogues)");
  const HeatmapMatrix h = bias_heatmap(b.model, corpus, mode, HeatmapBucketing{ctx.cfg.heatmap_max_distance},
                                       ctx.cfg.fillers);
  const fs::path csv = ctx.layout.probe_dir() / ("heatmap-" + tag_of(b, mode) + ".csv");
  {
    auto o = open_out(csv);
    h.write_csv(o);
  }
  ctx.wrote(csv);
  fs::path svg = csv;
  render_plot(&ctx, csv, svg.replace_extension(".svg"), "normalized treatment effect, " + tag_of(b, mode));
}

void independence_cmd(Context& ctx, const std::string& model_ref, const std::string& corpus_arg,
                      const std::string& mode_arg) {
  const Bundle b = resolve_model(ctx, model_ref);
  const AttentionMode mode = mode_or(mode_arg, b.mode);
  const fs::path corpus_path = corpus_arg.empty() ? ctx.probe_path() : fs::path(corpus_arg);
  const Corpus corpus = require_corpus(corpus_path, ctx, "probe");
  log("independence probe with the " + b.name + " model (" + std::string(to_string(mode)) + ")");
  const ProbeCurves curves =
      independence_probe(b.model, corpus, ctx.cfg.independence_max_extra, ctx.cfg.independence_seed, mode, ctx.cfg.fillers);
  const fs::path csv = ctx.layout.independence_dir() / ("curves-" + tag_of(b, mode) + ".csv");
  {
    auto o = open_out(csv);
    curves.write_csv(o);
  }
  ctx.wrote(csv);
  fs::path svg = csv;
  render_plot(&ctx, csv, svg.replace_extension(".svg"), "perplexity after n causal perturbations, " + tag_of(b, mode));
  for (std::size_t n = 0; n < curves.base.size(); ++n) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "  n=%zu  causal %.3f  non-causal %.3f  wins %zu/%zu  p=%.3g", n,
                  curves.extra_causal[n], curves.extra_noncausal[n], curves.wins[n], curves.trials[n], curves.sign_p[n]);
    log(buf);
  }
}

void eval_cmd(Context& ctx, const std::string& model_ref, const std::string& corpus_arg, const std::string& mode_arg) {
  const Bundle b = resolve_model(ctx, model_ref);
  const AttentionMode mode = mode_or(mode_arg, b.mode);
  const fs::path corpus_path = corpus_arg.empty() ? ctx.test_path() : fs::path(corpus_arg);
  const Corpus corpus = require_corpus(corpus_path, ctx, "test");
  log("evaluating the " + b.name + " model on " + std::to_string(corpus.size()) + " dialogues");

  std::vector<std::string> generated(corpus.size()), gold(corpus.size());
  parallel_for(corpus.size(), [&](std::size_t i) {
    const Dialogue& d = corpus.dialogues[i];
    const int len = ctx.cfg.max_new_tokens > 0 ? ctx.cfg.max_new_tokens
                                               : static_cast<int>(b.model.tokenize(d.response).size());
    generated[i] = b.model.generate(d, len, mode);
    gold[i] = d.response;
  });
  const MetricReport metrics = evaluate_corpus(generated, gold);
  json report = {{"model", b.name}, {"mode", std::string(to_string(mode))}, {"corpus", corpus_path.string()},
                 {"metrics", metrics.to_json()}};
  report["perplexity"] = [&] {
    double total = 0.0;
    for (const auto& d : corpus.dialogues) total += response_perplexity(b.model, d, mode);
    return total / static_cast<double>(corpus.size());
  }();
  const CopyAccuracy copy = copy_accuracy(b.model, corpus, mode, ctx.cfg.far_from);
  if (copy.far_total + copy.near_total > 0) report["copy_accuracy"] = copy.to_json();
  bool labeled = true;
  for (const auto& d : corpus.dialogues) labeled = labeled && d.gold_causal.has_value();
  if (labeled) {
    const auto records = extract_corpus(b.model, corpus, mode, ctx.cfg.fillers);
    std::vector<TreatmentEffectProfile> profiles;
    for (const auto& r : records) profiles.push_back(r.profile);
    report["separation_auc"] = separation_auc(corpus, profiles);
    report["extraction"] = score_against_gold(partitions_of(records), corpus).to_json();
  }

  const std::string tag = tag_of(b, mode);
  const fs::path jp = ctx.layout.eval_dir() / (tag + ".json");
  open_out(jp) << report.dump(2) << "\n";
  ctx.wrote(jp);
  const fs::path cp = ctx.layout.eval_dir() / (tag + ".csv");
  {
    auto o = open_out(cp);
    MetricReport::write_csv_header(o);
    metrics.write_csv_row(o, b.name);
  }
  ctx.wrote(cp);
  const fs::path gp = ctx.layout.eval_dir() / (tag + "-generations.jsonl");
  {
    auto o = open_out(gp);
    for (std::size_t i = 0; i < corpus.size(); ++i)
      o << json{{"dialogue_id", corpus.dialogues[i].dialogue_id}, {"generated", generated[i]}, {"gold", gold[i]}}.dump()
        << '\n';
  }
  ctx.wrote(gp);
  char buf[160];
  std::snprintf(buf, sizeof buf, "  BLEU-1 %.4f  BLEU-2 %.4f  ROUGE-L %.4f  Distinct-1 %.4f  Distinct-2 %.4f",
                metrics.bleu1, metrics.bleu2, metrics.rouge_l, metrics.distinct1, metrics.distinct2);
  log(buf);
  if (copy.far_total + copy.near_total > 0) {
    std::snprintf(buf, sizeof buf, "  copy accuracy: distance >= %d %.3f, nearer %.3f", copy.far_from, copy.far(),
                  copy.near());
    log(buf);
  }
}

// ---- pipeline --------------------------------------------------------------

struct Stage {
  int number;
  const char* what;
  std::vector<fs::path> outputs;
};

void pipeline(Context& ctx, std::optional<int> only, int from, bool force) {
  const Layout& l = ctx.layout;
  std::vector<Stage> stages = {
      {1, "train the extraction model in local_position mode", {l.extractor() / "model.json"}},
      {2, "extract causal turns and the position frequency table", {l.partitions(), l.frequency()}},
      {3, "CPD fine-tuning of a standard-mode model", {l.cpd_model() / "model.json"}},
      {4, "evaluation, heatmaps and independence probe", {l.eval_dir() / "cpd-standard.json"}},
  };
  if (ctx.cfg.baseline) stages[2].outputs.push_back(l.vanilla_model() / "model.json");

  bool same_config = false;
  if (fs::exists(l.manifest())) {
    try {
      same_config = json::parse(read_file(l.manifest())).value("config_hash", std::string()) == ctx.cfg.source.hash();
    } catch (const json::exception&) {
    }
  }
  for (const Stage& s : stages) {
    if (only ? s.number != *only : s.number < from) continue;
    bool done = same_config && !s.outputs.empty();
    for (const auto& p : s.outputs) done = done && fs::exists(p);
    if (done && !force && !only) {
      log("stage " + std::to_string(s.number) + ": up to date (" + s.what + ")");
      continue;
    }
    log("stage " + std::to_string(s.number) + ": " + s.what);
    switch (s.number) {
      case 1:
        if (ctx.synthetic() && (force || !fs::exists(ctx.train_path()) || !same_config)) synth(ctx);
        finetune_cmd(ctx, FinetuneKind::extractor);
        break;
      case 2:
        extract_cmd(ctx, "extractor", "", "", "");
        stats_cmd(ctx, "");
        break;
      case 3:
        if (!fs::exists(ctx.partitions_path()))
          throw MissingArtifact(ctx.partitions_path(), 2, "causal extraction over the training corpus");
        finetune_cmd(ctx, FinetuneKind::cpd);
        if (ctx.cfg.baseline) finetune_cmd(ctx, FinetuneKind::vanilla);
        break;
      case 4: {
        std::vector<std::string> models = {"cpd"};
        if (ctx.cfg.baseline && fs::exists(l.vanilla_model() / "model.json")) models.push_back("vanilla");
        for (const auto& m : models) eval_cmd(ctx, m, "", "");
        probe_cmd(ctx, "extractor", "", "");
        for (const auto& m : models) probe_cmd(ctx, m, "", "");
        independence_cmd(ctx, "extractor", "", "");
        break;
      }
    }
    update_manifest(ctx, "pipeline.stage" + std::to_string(s.number));
    ctx.written.clear();
  }
}

}  // namespace

int run(int argc, char** argv) {
  CLI::App app{"Causal perception dialogue toolkit: treatment-effect probing, causal-turn extraction and "
               "CPD fine-tuning of small dialogue models.",
               "cpd"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);
  app.fallthrough(false);

  CommonOptions common;
  std::string model_ref, corpus_arg, out_arg, mode_arg, kind = "cpd", plot_in, plot_out, plot_title;
  std::optional<int> stage;
  int from = 1;
  bool force = false;

  auto* synth_cmd = app.add_subcommand("synth", "generate planted synthetic train/test/probe corpora");
  auto* finetune = app.add_subcommand("finetune", "fine-tune a model (extractor, cpd or vanilla)");
  finetune->add_option("--kind", kind, "extractor | cpd | vanilla")
      ->check(CLI::IsMember({"extractor", "cpd", "vanilla"}))
      ->capture_default_str();
  auto* extract = app.add_subcommand("extract", "extract causal turns from a corpus (one JSON line per dialogue)");
  auto* stats = app.add_subcommand("stats", "position frequency table of extracted causal turns");
  auto* probe = app.add_subcommand("probe", "position-bias heatmap of normalized treatment effects");
  auto* eval = app.add_subcommand("eval", "generation metrics, copy accuracy and treatment-effect separation");
  auto* indep = app.add_subcommand("independence", "perplexity under stacked causal and non-causal perturbations");
  auto* plot_cmd = app.add_subcommand("plot", "render a CSV artifact as SVG");
  auto* pipe = app.add_subcommand("pipeline", "run stages 1-4: extractor, extraction, CPD fine-tuning, evaluation");

  for (auto* s : {synth_cmd, finetune, extract, stats, probe, eval, indep, pipe}) add_common(s, common);
  for (auto* s : {extract, probe, eval, indep}) {
    s->add_option("--model", model_ref, "extractor, cpd, vanilla or a model bundle directory");
    s->add_option("--corpus", corpus_arg, "corpus JSONL overriding the configured one");
    s->add_option("--mode", mode_arg, "attention mode (default: the model's training mode)");
  }
  extract->add_option("-o,--out", out_arg, "output JSONL path");
  stats->add_option("--corpus", corpus_arg, "corpus the partitions were extracted from");
  plot_cmd->add_option("input", plot_in, "CSV file")->required()->check(CLI::ExistingFile);
  plot_cmd->add_option("-o,--out", plot_out, "SVG path (default: input with .svg extension)");
  plot_cmd->add_option("--title", plot_title, "chart title");
  pipe->add_option("--stage", stage, "run only this stage")->check(CLI::Range(1, 4));
  pipe->add_option("--from", from, "first stage to run")->check(CLI::Range(1, 4));
  pipe->add_flag("--force", force, "rerun stages whose artifacts already exist");

  if (argc > 1 && argv[1][0] != '-') {
    bool known = false;
    for (const auto* s : app.get_subcommands({})) known = known || s->get_name() == argv[1];
    if (!known) {
      std::cerr << "cpd: unknown subcommand '" << argv[1] << "'\n\n" << app.help();
      return 2;
    }
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "cpd: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    if (plot_cmd->parsed()) {
      fs::path out = plot_out.empty() ? fs::path(plot_in).replace_extension(".svg") : fs::path(plot_out);
      render_plot(nullptr, plot_in, out, plot_title.empty() ? fs::path(plot_in).stem().string() : plot_title);
      return 0;
    }
    Context ctx = load_context(common);
    std::string name;
    if (synth_cmd->parsed()) {
      name = "synth";
      synth(ctx);
    } else if (finetune->parsed()) {
      name = "finetune." + kind;
      finetune_cmd(ctx, kind == "extractor" ? FinetuneKind::extractor
                        : kind == "vanilla" ? FinetuneKind::vanilla
                                            : FinetuneKind::cpd);
    } else if (extract->parsed()) {
      name = "extract";
      extract_cmd(ctx, model_ref.empty() ? "extractor" : model_ref, corpus_arg, out_arg, mode_arg);
    } else if (stats->parsed()) {
      name = "stats";
      stats_cmd(ctx, corpus_arg);
    } else if (probe->parsed()) {
      name = "probe";
      probe_cmd(ctx, model_ref.empty() ? "cpd" : model_ref, corpus_arg, mode_arg);
    } else if (eval->parsed()) {
      name = "eval";
      eval_cmd(ctx, model_ref.empty() ? "cpd" : model_ref, corpus_arg, mode_arg);
    } else if (indep->parsed()) {
      name = "independence";
      independence_cmd(ctx, model_ref.empty() ? "extractor" : model_ref, corpus_arg, mode_arg);
    } else if (pipe->parsed()) {
      pipeline(ctx, stage, from, force);
      return 0;
    }
    update_manifest(ctx, name);
  } catch (const ConfigError& e) {
    std::cerr << "cpd: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "cpd: error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace cpd::cli

int main(int argc, char** argv) { return cpd::cli::run(argc, argv); }
