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
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cpd/adapter.hpp"
#include "cpd/corpus.hpp"
#include "cpd/error.hpp"
#include "cpd/extraction.hpp"
#include "cpd/minilm.hpp"
#include "cpd/optim.hpp"
#include "cpd/perturbation.hpp"
#include "cpd/rng.hpp"

namespace cpd {

struct TrainerConfig {
  double alpha = 1.0;
  double beta = 1.0;
  double kl_clip = 10.0;  // per-position cap in nats
  int round_cap = 8;
  bool auto_balance = false;
  double learning_rate = 3e-3;
  double clip_norm = 1.0;
  double weight_decay = 0.0;
  int epochs = 10;
  int batch_size = 8;
  std::uint64_t seed = 0;
  AttentionMode mode = AttentionMode::standard;
  std::optional<std::filesystem::path> checkpoint_dir;

  // Itemized problems; empty when valid.
  std::vector<std::string> problems() const {
    std::vector<std::string> out;
    if (!(alpha >= 0.0)) out.push_back("alpha must be >= 0");
    if (!(beta >= 0.0)) out.push_back("beta must be >= 0");
    if (!(kl_clip > 0.0)) out.push_back("kl_clip must be > 0");
    if (round_cap < 1) out.push_back("round_cap must be >= 1");
    if (!(learning_rate > 0.0)) out.push_back("learning_rate must be > 0");
    if (epochs < 0) out.push_back("epochs must be >= 0");
    if (batch_size < 1) out.push_back("batch_size must be >= 1");
    return out;
  }

  void validate() const {
    const auto p = problems();
    if (p.empty()) return;
    std::string msg = "invalid trainer config:";
    for (const auto& s : p) msg += " " + s + ";";
    throw ConfigError(msg);
  }

  bool auxiliary() const { return alpha > 0.0 || beta > 0.0; }
};

// ---- loss values on plain distributions ----

inline double pred_loss(const ModelAdapter& adapter, const Dialogue& d, AttentionMode mode = AttentionMode::standard) {
  const auto nll = response_nll(adapter, d, mode);
  if (nll.empty()) throw Error("pred_loss: empty response");
  return std::accumulate(nll.begin(), nll.end(), 0.0) / static_cast<double>(nll.size());
}

inline double kl_row(const Matrix& p, const Matrix& q, Eigen::Index r) {
  double kl = 0.0;
  for (Eigen::Index c = 0; c < p.cols(); ++c)
    if (p(r, c) > 0.0) kl += p(r, c) * (std::log(p(r, c)) - std::log(q(r, c)));
  return kl;
}

// Sum over positions of min(KL(p_t || q_t), kappa).
inline double kl_positionwise(const ResponseDistribution& p, const ResponseDistribution& q, double kappa) {
  if (p.probs.rows() != q.probs.rows() || p.probs.cols() != q.probs.cols())
    throw Error("kl_positionwise: distribution shapes differ");
  double total = 0.0;
  for (Eigen::Index r = 0; r < p.probs.rows(); ++r) total += std::min(kl_row(p.probs, q.probs, r), kappa);
  return total;
}

inline void require_within(const CounterfactualDialogue& cf, const std::vector<int>& allowed, std::string_view what) {
  for (const auto& s : cf.substitutions())
    if (!std::binary_search(allowed.begin(), allowed.end(), s.index))
      throw Error(std::string(what) + ": substitution at index " + std::to_string(s.index) + " is outside the permitted set");
}

inline double irm_loss(const ModelAdapter& adapter, const CounterfactualDialogue& cf, const CausalPartition& part,
                       double kappa, AttentionMode mode = AttentionMode::standard) {
  require_within(cf, part.noncausal, "irm_loss");
  return kl_positionwise(response_distributions(adapter, cf.base(), mode),
                         response_distributions(adapter, cf.realize(), mode), kappa);
}

inline double mte_loss(const ModelAdapter& adapter, const CounterfactualDialogue& cf, const CausalPartition& part,
                       double kappa, AttentionMode mode = AttentionMode::standard) {
  require_within(cf, part.causal, "mte_loss");
  return -kl_positionwise(response_distributions(adapter, cf.base(), mode),
                          response_distributions(adapter, cf.realize(), mode), kappa);
}

// ---- differentiable losses on a MiniLM tape ----

namespace ag {

// Mean gold NLL from response log-probabilities.
inline Var pred_loss(Var log_probs, std::span<const int> gold) { return scale(sum(pick(log_probs, gold)), -1.0 / static_cast<double>(gold.size())); }

// Clipped position-wise KL with a constant reference p.
inline Var kl_positionwise(const Matrix& p, Var log_q, double kappa) { return sum(clip_max(kl_rows(p, log_q), kappa)); }

}  // namespace ag

// ---- round count and sampling laws ----

inline double causal_q_sum(const CausalPartition& part, int turns, const PositionFrequency& q) {
  double s = 0.0;
  for (int i : part.causal) s += q.q_smoothed(turns - i);
  return s;
}

// n = clamp(floor(|C| / sum q), 1, cap)
inline int perturbation_rounds(const CausalPartition& part, int turns, const PositionFrequency& q, int cap) {
  if (part.causal.empty()) throw Error("perturbation_rounds: empty causal set");
  if (cap < 1) throw Error("perturbation_rounds: cap must be >= 1");
  const double ratio = static_cast<double>(part.causal.size()) / causal_q_sum(part, turns, q);
  const double n = std::floor(ratio + 1e-9);
  if (!(n < static_cast<double>(cap))) return cap;
  return std::max(1, static_cast<int>(n));
}

inline int perturbation_rounds(const CausalPartition& part, const PositionFrequency& q, int cap) {
  return perturbation_rounds(part, part.turns(), q, cap);
}

enum class AuxTask { irm, mte };

inline std::string_view to_string(AuxTask t) { return t == AuxTask::irm ? "irm" : "mte"; }

struct SamplingPlan {
  AuxTask task = AuxTask::irm;
  std::vector<double> probability;  // per history index (0-based), 0 outside the task's set
  std::vector<std::vector<int>> rounds;
};

inline SamplingPlan irm_plan(const CausalPartition& part, const PositionFrequency& q) {
  SamplingPlan plan{AuxTask::irm, std::vector<double>(static_cast<std::size_t>(part.turns()), 0.0), {}};
  for (int i : part.noncausal) plan.probability[static_cast<std::size_t>(i - 1)] = q.q_smoothed(part.turns() - i);
  return plan;
}

inline SamplingPlan mte_plan(const CausalPartition& part, const PositionFrequency& q) {
  SamplingPlan plan{AuxTask::mte, std::vector<double>(static_cast<std::size_t>(part.turns()), 0.0), {}};
  double z = 0.0;
  for (int i : part.causal) z += 1.0 / q.q_smoothed(part.turns() - i);
  for (int i : part.causal) plan.probability[static_cast<std::size_t>(i - 1)] = (1.0 / q.q_smoothed(part.turns() - i)) / z;
  return plan;
}

// Independent Bernoulli(q) per non-causal turn; an empty draw falls back to
// the non-causal turn with the highest q (earliest on ties).
inline std::vector<int> sample_irm(const CausalPartition& part, const PositionFrequency& q, Rng& rng) {
  if (part.noncausal.empty()) return {};
  std::vector<int> out;
  int best = part.noncausal.front();
  double best_q = -1.0;
  for (int i : part.noncausal) {
    const double p = q.q_smoothed(part.turns() - i);
    if (rng.bernoulli(p)) out.push_back(i);
    if (p > best_q) {
      best_q = p;
      best = i;
    }
  }
  if (out.empty()) out.push_back(best);
  return out;
}

// One categorical draw over C with weights 1/q.
inline int sample_mte(const CausalPartition& part, const PositionFrequency& q, Rng& rng) {
  if (part.causal.empty()) throw Error("sample_mte: empty causal set");
  std::vector<double> w;
  for (int i : part.causal) w.push_back(1.0 / q.q_smoothed(part.turns() - i));
  return part.causal[rng.categorical(w)];
}

// ---- training loop ----

struct PerturbationRecord {
  AuxTask task = AuxTask::irm;
  int round = 0;
  int index = 0;
  std::string source_id;
};

struct CPDLossReport {
  std::string dialogue_id;
  double l_pred = 0.0;
  double l_irm = 0.0;     // summed over rounds
  double mte_kl = 0.0;    // summed clipped KL before negation
  double l_mte = 0.0;     // -mte_kl
  double alpha = 0.0;     // effective scales used for this dialogue
  double beta = 0.0;
  int n = 0;
  std::vector<PerturbationRecord> perturbations;

  double total() const { return l_pred + alpha * l_irm + beta * l_mte; }
};

struct TrainStep {
  int epoch = 0;
  long step = 0;
  double loss = 0.0;  // mean total over the batch
  double grad_norm = 0.0;
  std::vector<CPDLossReport> reports;

  nlohmann::json to_json() const {
    nlohmann::json rs = nlohmann::json::array();
    for (const auto& r : reports) {
      nlohmann::json ps = nlohmann::json::array();
      for (const auto& p : r.perturbations)
        ps.push_back({{"task", to_string(p.task)}, {"round", p.round}, {"index", p.index}, {"source", p.source_id}});
      rs.push_back({{"dialogue_id", r.dialogue_id}, {"l_pred", r.l_pred}, {"l_irm", r.l_irm}, {"l_mte", r.l_mte},
                    {"mte_kl", r.mte_kl}, {"alpha", r.alpha}, {"beta", r.beta}, {"n", r.n}, {"total", r.total()},
                    {"perturbations", ps}});
    }
    return {{"epoch", epoch}, {"step", step}, {"loss", loss}, {"grad_norm", grad_norm}, {"dialogues", rs}};
  }
};

struct TrainResult {
  std::vector<TrainStep> log;
  std::vector<std::filesystem::path> checkpoints;
};

struct CPDData {
  const Corpus* corpus = nullptr;
  std::vector<CausalPartition> partitions;  // aligned with corpus; empty for vanilla runs
  PositionFrequency q;
  UtterancePool all;        // every training utterance
  UtterancePool noncausal;  // training utterances outside their dialogue's C
};

inline CPDData prepare_cpd_data(const Corpus& train, std::vector<CausalPartition> partitions) {
  if (partitions.size() != train.size()) throw Error("cpd_finetune: missing partitions");
  CPDData data;
  data.corpus = &train;
  data.q = position_frequency(partitions, train);
  data.all = all_utterances(train);
  for (std::size_t k = 0; k < train.size(); ++k)
    for (int i : partitions[k].noncausal) {
      const Dialogue& d = train.dialogues[k];
      data.noncausal.push_back({d.dialogue_id, i, d.history[static_cast<std::size_t>(i - 1)].text});
    }
  data.partitions = std::move(partitions);
  return data;
}

namespace detail {

// Loss and parameter gradient for one dialogue.
inline CPDLossReport dialogue_step(const MiniLM& model, const CPDData& data, std::size_t k, const TrainerConfig& cfg,
                                   double alpha, double beta, Rng& sample_rng, Rng& subst_rng,
                                   std::vector<Matrix>& grads) {
  const Dialogue& d = data.corpus->dialogues[k];
  CPDLossReport rep;
  rep.dialogue_id = d.dialogue_id;
  rep.alpha = alpha;
  rep.beta = beta;

  ag::Tape tape;
  const EncodedDialogue enc = model.encode(d);
  ag::Var lp = model.response_log_probs(tape, enc, cfg.mode);
  ag::Var total = ag::pred_loss(lp, enc.response_ids);
  rep.l_pred = total.scalar();

  if (alpha > 0.0 || beta > 0.0) {
    const CausalPartition& part = data.partitions.at(k);
    const Matrix p = lp.value().array().exp().matrix();  // stop-gradient reference
    rep.n = perturbation_rounds(part, d.turns(), data.q, cfg.round_cap);
    const auto branch = [&](const CounterfactualDialogue& cf) {
      const EncodedDialogue e = model.encode(cf.realize());
      if (e.response_ids != enc.response_ids) throw Error("counterfactual changed the response tokens");
      return ag::kl_positionwise(p, model.response_log_probs(tape, e, cfg.mode), cfg.kl_clip);
    };
    const SubstitutionContext irm_ctx{nullptr, &data.noncausal}, mte_ctx{nullptr, &data.all};
    for (int r = 0; r < rep.n; ++r) {
      if (alpha > 0.0 && !part.noncausal.empty()) {
        CounterfactualDialogue cf(d);
        for (int i : sample_irm(part, data.q, sample_rng)) {
          cf.add(draw_substitution(d, i, SubstitutionSource::foreign_noncausal, irm_ctx, subst_rng));
          rep.perturbations.push_back({AuxTask::irm, r, i, cf.substitutions().back().source_id});
        }
        ag::Var kl = branch(cf);
        rep.l_irm += kl.scalar();
        total = ag::add(total, ag::scale(kl, alpha));
      }
      if (beta > 0.0) {
        const int i = sample_mte(part, data.q, sample_rng);
        CounterfactualDialogue cf(d);
        cf.add(draw_substitution(d, i, SubstitutionSource::foreign_any, mte_ctx, subst_rng));
        rep.perturbations.push_back({AuxTask::mte, r, i, cf.substitutions().back().source_id});
        ag::Var kl = branch(cf);
        rep.mte_kl += kl.scalar();
        total = ag::sub(total, ag::scale(kl, beta));
      }
    }
    rep.l_mte = -rep.mte_kl;
  }
  tape.backward(total);
  tape.accumulate_parameter_grads(grads);
  return rep;
}

}  // namespace detail

using StepCallback = std::function<void(const TrainStep&)>;

// Shared loop for CPD and vanilla fine-tuning. With alpha = beta = 0 no
// auxiliary sampling happens and the trajectory equals vanilla training.
inline TrainResult finetune(MiniLM& model, const CPDData& data, const TrainerConfig& cfg,
                            const StepCallback& on_step = {}) {
  cfg.validate();
  if (!model.trainable()) throw Error("adapter is not trainable");
  if (!data.corpus || data.corpus->empty()) throw Error("finetune: empty training corpus");
  if (cfg.auxiliary() && data.partitions.size() != data.corpus->size()) throw Error("cpd_finetune: missing partitions");

  const Rng root(cfg.seed);
  Rng order_rng = root.split(1), sample_rng = root.split(2), subst_rng = root.split(3);
  Adam opt(model.parameters(), {cfg.learning_rate, 0.9, 0.999, 1e-8, cfg.weight_decay, cfg.clip_norm});
  TrainResult result;
  double ema_pred = 0.0, ema_irm = 0.0, ema_mte = 0.0;
  bool ema_init = false;

  std::vector<std::size_t> order(data.corpus->size());
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    order_rng.shuffle(order.begin(), order.end());
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t e = std::min(order.size(), b + static_cast<std::size_t>(cfg.batch_size));
      std::vector<Matrix> grads;
      for (const auto& p : model.parameters()) grads.push_back(Matrix::Zero(p.rows(), p.cols()));
      double alpha = cfg.alpha, beta = cfg.beta;
      if (cfg.auto_balance && ema_init) {
        if (ema_irm > 0.0) alpha *= ema_pred / ema_irm;
        if (ema_mte > 0.0) beta *= ema_pred / ema_mte;
      }
      TrainStep step;
      step.epoch = epoch;
      for (std::size_t j = b; j < e; ++j) {
        step.reports.push_back(
            detail::dialogue_step(model, data, order[j], cfg, alpha, beta, sample_rng, subst_rng, grads));
        step.loss += step.reports.back().total();
      }
      const double inv = 1.0 / static_cast<double>(e - b);
      for (auto& g : grads) g *= inv;
      step.loss *= inv;
      step.grad_norm = opt.step(model.parameters(), grads);
      step.step = opt.steps();
      for (const auto& r : step.reports) {
        const double decay = ema_init ? 0.9 : 0.0;
        ema_pred = decay * ema_pred + (1 - decay) * r.l_pred;
        ema_irm = decay * ema_irm + (1 - decay) * r.l_irm;
        ema_mte = decay * ema_mte + (1 - decay) * r.mte_kl;
        ema_init = true;
      }
      if (on_step) on_step(step);
      result.log.push_back(std::move(step));
    }
    if (cfg.checkpoint_dir) {
      std::filesystem::create_directories(*cfg.checkpoint_dir);
      const auto path = *cfg.checkpoint_dir / ("epoch-" + std::to_string(epoch) + ".json");
      model.save(path);
      result.checkpoints.push_back(path);
    }
  }
  return result;
}

inline TrainResult cpd_finetune(MiniLM& model, const Corpus& train, std::vector<CausalPartition> partitions,
                                const TrainerConfig& cfg, const StepCallback& on_step = {}) {
  const CPDData data = prepare_cpd_data(train, std::move(partitions));
  return finetune(model, data, cfg, on_step);
}

inline TrainResult vanilla_finetune(MiniLM& model, const Corpus& train, TrainerConfig cfg,
                                    const StepCallback& on_step = {}) {
  cfg.alpha = cfg.beta = 0.0;
  CPDData data;
  data.corpus = &train;
  return finetune(model, data, cfg, on_step);
}

}  // namespace cpd
