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
#include <vector>

#include <nlohmann/json.hpp>

#include "cpd/autograd.hpp"

namespace cpd {

struct AdamConfig {
  double learning_rate = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled
  double clip_norm = 1.0;     // global gradient norm cap, <= 0 disables
};

class Adam {
 public:
  Adam(const std::vector<Matrix>& params, AdamConfig cfg) : cfg_(cfg) {
    for (const auto& p : params) {
      m_.push_back(Matrix::Zero(p.rows(), p.cols()));
      v_.push_back(Matrix::Zero(p.rows(), p.cols()));
    }
  }

  const AdamConfig& config() const { return cfg_; }
  long steps() const { return t_; }

  // Returns the pre-clipping global gradient norm.
  double step(std::vector<Matrix>& params, std::vector<Matrix>& grads) {
    double sq = 0.0;
    for (const auto& g : grads) sq += g.squaredNorm();
    const double norm = std::sqrt(sq);
    if (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm)
      for (auto& g : grads) g *= cfg_.clip_norm / norm;
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * grads[i];
      v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * grads[i].cwiseAbs2();
      params[i].array() -= cfg_.learning_rate * ((m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + cfg_.eps));
      if (cfg_.weight_decay > 0.0) params[i] *= 1.0 - cfg_.learning_rate * cfg_.weight_decay;
    }
    return norm;
  }

 private:
  AdamConfig cfg_;
  std::vector<Matrix> m_, v_;
  long t_ = 0;
};

}  // namespace cpd
