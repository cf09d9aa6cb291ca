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

#include <array>
#include <cstdio>
#include <sstream>
#include <string>

#include <sys/wait.h>

#include <gtest/gtest.h>

#include "cpd/config.hpp"
#include "cpd/plot.hpp"
#include "test_support.hpp"

namespace cpd {
namespace {

namespace fs = std::filesystem;
using testing::make_dialogue;
using testing::read_text;
using testing::temp_dir;
using testing::write_text;

struct Result {
  int status = -1;
  std::string output;  // stdout and stderr
};

Result run_cli(const std::string& args, const fs::path& cwd) {
  const std::string cmd = "cd '" + cwd.string() + "' && '" CPD_CLI_PATH "' " + args + " 2>&1";
  Result r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  std::array<char, 4096> buf{};
  std::size_t n = 0;
  while ((n = std::fread(buf.data(), 1, buf.size(), pipe)) > 0) r.output.append(buf.data(), n);
  const int raw = pclose(pipe);
  r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  return r;
}

std::size_t count_lines(const std::string& s) {
  std::size_t n = 0;
  for (char c : s) n += c == '\n';
  return n;
}

constexpr const char* kTinyConfig =
    "# smallest useful run\n"
    "out_dir = run\n"
    "synth.n_dialogues = 12\n"
    "synth.held_out_dialogues = 6\n"
    "model.width = 8\n"
    "model.layers = 1\n"
    "extractor.epochs = 1\n"
    "train.epochs = 1\n";

TEST(KeyValues, ParsesCommentsAndOverrides) {
  std::istringstream in("# comment\n a = 1 \n\nb=two words\na = 3\n");
  const KeyValues kv = KeyValues::parse(in);
  EXPECT_EQ(kv.values().at("a"), "3");
  EXPECT_EQ(kv.values().at("b"), "two words");
  EXPECT_EQ(kv.canonical(), "a=3\nb=two words\n");

  std::istringstream bad("x\n= 2\nok = 1\n");
  try {
    KeyValues::parse(bad, "f.cfg");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("f.cfg:1"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("f.cfg:2"), std::string::npos);
  }
}

TEST(KeyValues, HashDependsOnContentNotOrder) {
  std::istringstream a("x = 1\ny = 2\n"), b("y=2\nx=1\n"), c("x = 1\ny = 3\n");
  EXPECT_EQ(KeyValues::parse(a).hash(), KeyValues::parse(b).hash());
  std::istringstream a2("x = 1\ny = 2\n");
  EXPECT_NE(KeyValues::parse(a2).hash(), KeyValues::parse(c).hash());
  EXPECT_EQ(fnv1a(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a("a"), 0xaf63dc4c8601ec8cULL);
}

TEST(RunConfig, DefaultsAreValidAndSeedsExplicit) {
  const RunConfig c = read_run_config(KeyValues{});
  EXPECT_EQ(c.extraction_mode, AttentionMode::local_position);
  EXPECT_EQ(c.trainer.mode, AttentionMode::standard);
  EXPECT_EQ(c.extractor_trainer.alpha, 0.0);
  EXPECT_GT(c.trainer.alpha, 0.0);
  const nlohmann::json seeds = c.seeds();
  EXPECT_EQ(seeds.size(), 6u);
  for (const auto& [k, v] : seeds.items()) EXPECT_TRUE(v.is_number_unsigned()) << k;
}

TEST(RunConfig, ReportsEveryProblem) {
  std::istringstream in(
      "model.width = wide\nextract.mode = sideways\ntrain.alpha = -1\nsynth.causal_max = 9\nmystery = 1\n");
  try {
    read_run_config(KeyValues::parse(in));
    FAIL();
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    for (const char* key : {"model.width", "extract.mode", "train.alpha", "synth:", "mystery"})
      EXPECT_NE(msg.find(key), std::string::npos) << key << "\n" << msg;
    EXPECT_NE(msg.find("5 problems"), std::string::npos) << msg;
  }
}

TEST(Plot, InfersChartKindFromHeader) {
  std::istringstream heat("bucket,label,mean,count,mean_abs\n0,causal,-0.5,3,0.5\n0,non-causal,,0,\n");
  std::ostringstream svg;
  EXPECT_EQ(plot::render_svg(heat, svg, "t"), plot::ChartKind::heatmap);
  EXPECT_NE(svg.str().find("<svg"), std::string::npos);
  EXPECT_NE(svg.str().find("n/a"), std::string::npos);

  std::istringstream curve("n,base,extra_causal,extra_noncausal,wins,trials,sign_p\n0,1,2,1.5,3,4,0.3\n1,2,3,2,4,4,0.06\n");
  std::ostringstream svg2;
  EXPECT_EQ(plot::render_svg(curve, svg2, "t"), plot::ChartKind::lines);
  EXPECT_NE(svg2.str().find("extra_causal"), std::string::npos);
  EXPECT_EQ(svg2.str().find(">wins<"), std::string::npos);

  std::istringstream ragged("a,b\n1\n");
  std::ostringstream sink;
  EXPECT_THROW(plot::render_svg(ragged, sink, "t"), Error);
}

TEST(Cli, UnknownSubcommandPrintsUsage) {
  const auto dir = temp_dir("cli-unknown");
  const Result r = run_cli("frobnicate", dir);
  EXPECT_EQ(r.status, 2);
  EXPECT_NE(r.output.find("unknown subcommand"), std::string::npos);
  EXPECT_NE(r.output.find("Usage"), std::string::npos);
  EXPECT_EQ(run_cli("", dir).status, 2);
  EXPECT_EQ(run_cli("--help", dir).status, 0);
}

TEST(Cli, InvalidConfigIsItemized) {
  const auto dir = temp_dir("cli-config");
  write_text(dir / "bad.cfg", "model.heads = 0\nfillers =\ncorpus.train = nowhere.jsonl\n");
  const Result r = run_cli("synth -c bad.cfg --set train.epochs=soon", dir);
  EXPECT_EQ(r.status, 1);
  for (const char* key : {"train.epochs", "fillers", "heads"}) EXPECT_NE(r.output.find(key), std::string::npos) << r.output;
  EXPECT_FALSE(fs::exists(dir / "cpd-run"));

  write_text(dir / "missing.cfg", "corpus.train = nowhere.jsonl\n");
  const Result m = run_cli("synth -c missing.cfg", dir);
  EXPECT_EQ(m.status, 1);
  EXPECT_NE(m.output.find("corpus.train: no such file"), std::string::npos) << m.output;
  EXPECT_EQ(run_cli("synth -c absent.cfg", dir).status, 1);
}

TEST(Cli, StageThreeWithoutExtractionNamesStageTwo) {
  const auto dir = temp_dir("cli-stage3");
  write_text(dir / "tiny.cfg", kTinyConfig);
  const Result r = run_cli("pipeline -c tiny.cfg --stage 3", dir);
  EXPECT_EQ(r.status, 1);
  EXPECT_NE(r.output.find("partitions.jsonl"), std::string::npos) << r.output;
  EXPECT_NE(r.output.find("pipeline --stage 2"), std::string::npos) << r.output;
  const Result f = run_cli("finetune -c tiny.cfg --kind cpd", dir);
  EXPECT_EQ(f.status, 1);
  EXPECT_NE(f.output.find("stage 1"), std::string::npos) << f.output;  // no corpus yet
}

TEST(Cli, ExtractWritesOneLinePerDialogueAndIsDeterministic) {
  const auto dir = temp_dir("cli-extract");
  Corpus c;
  c.dialogues = {make_dialogue("a", {"my pet is rex", "ok", "we went to the park"}, "rex park", std::vector<int>{1, 3}),
                 make_dialogue("b", {"hi", "my city is rome"}, "rome", std::vector<int>{2}),
                 make_dialogue("c", {"the sky is blue", "yes", "sure"}, "blue", std::vector<int>{1})};
  save_corpus(c, dir / "three.jsonl");
  const std::string before = read_text(dir / "three.jsonl");
  write_text(dir / "tiny.cfg", std::string(kTinyConfig) + "corpus.train = three.jsonl\nextractor.epochs = 2\n");

  ASSERT_EQ(run_cli("finetune -c tiny.cfg --kind extractor", dir).status, 0);
  const Result r = run_cli("extract -c tiny.cfg -o out/three.jsonl", dir);
  ASSERT_EQ(r.status, 0) << r.output;
  const std::string first = read_text(dir / "out/three.jsonl");
  EXPECT_EQ(count_lines(first), 3u);
  EXPECT_TRUE(fs::exists(dir / "out/three-report.json"));
  EXPECT_EQ(read_text(dir / "three.jsonl"), before);

  ASSERT_EQ(run_cli("extract -c tiny.cfg", dir).status, 0);
  ASSERT_EQ(run_cli("stats -c tiny.cfg", dir).status, 0);
  const std::string stats = read_text(dir / "run/extraction/position_frequency.csv");
  EXPECT_EQ(stats.substr(0, stats.find('\n')), "distance,q,q_smoothed,count");

  // Same configuration and seeds from scratch: identical artifacts.
  fs::remove_all(dir / "run");
  ASSERT_EQ(run_cli("finetune -c tiny.cfg --kind extractor", dir).status, 0);
  ASSERT_EQ(run_cli("extract -c tiny.cfg -o out/again.jsonl", dir).status, 0);
  ASSERT_EQ(run_cli("extract -c tiny.cfg", dir).status, 0);
  ASSERT_EQ(run_cli("stats -c tiny.cfg", dir).status, 0);
  EXPECT_EQ(read_text(dir / "out/again.jsonl"), first);
  EXPECT_EQ(read_text(dir / "run/extraction/position_frequency.csv"), stats);

  const auto manifest = nlohmann::json::parse(read_text(dir / "run/manifest.json"));
  EXPECT_EQ(manifest.at("config").at("corpus.train"), "three.jsonl");
  EXPECT_TRUE(manifest.at("commands").contains("stats"));
  EXPECT_EQ(manifest.at("seeds").at("model"), 5u);
}

TEST(Cli, PipelineProducesEveryArtifactAndResumes) {
  const auto dir = temp_dir("cli-pipeline");
  write_text(dir / "tiny.cfg", kTinyConfig);
  const Result r = run_cli("pipeline -c tiny.cfg", dir);
  ASSERT_EQ(r.status, 0) << r.output;
  for (const char* p : {"corpus/train.jsonl", "corpus/test.jsonl", "corpus/probe.jsonl", "vocab.txt",
                        "extractor/model.json", "extraction/partitions.jsonl", "extraction/position_frequency.csv",
                        "extraction/position_frequency.svg", "model/model.json", "model/train_log.csv",
                        "vanilla/model.json", "eval/cpd-standard.json", "eval/vanilla-standard.json",
                        "probe/heatmap-extractor-local_position.svg", "probe/heatmap-cpd-standard.csv",
                        "independence/curves-extractor-local_position.csv", "manifest.json", "config.txt"})
    EXPECT_TRUE(fs::exists(dir / "run" / p)) << p;
  const auto report = nlohmann::json::parse(read_text(dir / "run/eval/cpd-standard.json"));
  EXPECT_TRUE(report.at("metrics").contains("BLEU-1"));
  EXPECT_TRUE(report.contains("separation_auc"));

  const Result again = run_cli("pipeline -c tiny.cfg", dir);
  ASSERT_EQ(again.status, 0);
  EXPECT_EQ(again.output.find("wrote"), std::string::npos) << again.output;

  const Result plot = run_cli("plot run/probe/heatmap-cpd-standard.csv -o heat.svg", dir);
  ASSERT_EQ(plot.status, 0) << plot.output;
  EXPECT_NE(read_text(dir / "heat.svg").find("<rect"), std::string::npos);
}

}  // namespace
}  // namespace cpd
