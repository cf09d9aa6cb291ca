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

#include <gtest/gtest.h>

#include "cpd/autograd.hpp"
#include "cpd/rng.hpp"

namespace cpd {
namespace {

Matrix random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

// Compares the tape gradient of f against central differences on every
// entry of every input.
template <class F>
void expect_gradients_match(std::vector<Matrix> inputs, F f, double tol = 1e-6) {
  std::vector<Matrix> grads;
  for (auto& m : inputs) grads.push_back(Matrix::Zero(m.rows(), m.cols()));
  {
    ag::Tape tape;
    std::vector<ag::Var> vars;
    for (std::size_t i = 0; i < inputs.size(); ++i) vars.push_back(tape.parameter(inputs[i], i));
    tape.backward(f(vars));
    tape.accumulate_parameter_grads(grads);
  }
  const double h = 1e-5;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (Eigen::Index k = 0; k < inputs[i].size(); ++k) {
      const double orig = inputs[i].data()[k];
      const auto eval = [&] {
        ag::Tape tape(false);
        std::vector<ag::Var> vars;
        for (std::size_t j = 0; j < inputs.size(); ++j) vars.push_back(tape.parameter(inputs[j], j));
        return f(vars).scalar();
      };
      inputs[i].data()[k] = orig + h;
      const double up = eval();
      inputs[i].data()[k] = orig - h;
      const double down = eval();
      inputs[i].data()[k] = orig;
      EXPECT_NEAR(grads[i].data()[k], (up - down) / (2 * h), tol) << "input " << i << " entry " << k;
    }
  }
}

TEST(AutogradTest, MatmulAndBroadcast) {
  Rng rng(1);
  expect_gradients_match({random_matrix(rng, 3, 4), random_matrix(rng, 4, 2), random_matrix(rng, 1, 2)},
                         [](auto& v) { return ag::sum(ag::gelu(ag::add_row(ag::matmul(v[0], v[1]), v[2]))); });
}

TEST(AutogradTest, TransposedMatmulSoftmaxChain) {
  Rng rng(2);
  Matrix w = random_matrix(rng, 5, 5);
  expect_gradients_match({random_matrix(rng, 5, 4), random_matrix(rng, 5, 4)}, [w](auto& v) {
    ag::Var a = ag::causal_softmax(ag::matmul_nt(v[0], v[1]));
    return ag::sum(ag::mul_const(a, w));
  });
}

TEST(AutogradTest, RmsNormAndRotary) {
  Rng rng(3);
  Matrix w = random_matrix(rng, 4, 8);
  std::vector<int> pos{0, 1, 2, 3};
  expect_gradients_match({random_matrix(rng, 4, 8), random_matrix(rng, 1, 8)}, [w, pos](auto& v) {
    return ag::sum(ag::mul_const(ag::rotary(ag::rms_norm(v[0], v[1]), pos, 4), w));
  });
}

TEST(AutogradTest, MixingOpsAndRowNormalize) {
  Rng rng(4);
  Matrix w = random_matrix(rng, 4, 4);
  Matrix same = Matrix::Identity(4, 4);
  same(1, 0) = 1;
  expect_gradients_match({random_matrix(rng, 4, 4), random_matrix(rng, 4, 4)}, [w, same](auto& v) {
    ag::Var a = ag::causal_softmax(v[0]);
    ag::Var b = ag::causal_softmax(v[1]);
    ag::Var r = ag::divide_scalar(ag::lower_triangular_mean(ag::mul_const(a, w)), ag::lower_triangular_mean(b));
    ag::Var m = ag::add(ag::mul_const(a, same), ag::scale_by(ag::mul_const(b, Matrix::Ones(4, 4) - same), r));
    return ag::sum(ag::mul_const(ag::row_normalize(m), w));
  });
}

TEST(AutogradTest, LogSoftmaxPickAndKl) {
  Rng rng(5);
  Matrix p = random_matrix(rng, 3, 6).array().exp().matrix();
  for (Eigen::Index r = 0; r < p.rows(); ++r) p.row(r) /= p.row(r).sum();
  std::vector<int> cols{1, 5, 0};
  expect_gradients_match({random_matrix(rng, 3, 6)}, [p, cols](auto& v) {
    ag::Var lp = ag::log_softmax(v[0]);
    return ag::add(ag::sum(ag::pick(lp, cols)), ag::sum(ag::clip_max(ag::kl_rows(p, lp), 100.0)));
  });
}

TEST(AutogradTest, GatherSliceConcat) {
  Rng rng(6);
  std::vector<int> ids{2, 0, 2, 1};
  Matrix w = random_matrix(rng, 4, 5);
  expect_gradients_match({random_matrix(rng, 3, 5)}, [ids, w](auto& v) {
    ag::Var g = ag::gather_rows(v[0], ids);
    ag::Var c = ag::concat_cols({ag::slice_cols(g, 3, 2), ag::slice_cols(g, 0, 3)});
    return ag::sum(ag::mul(c, c));
  });
}

TEST(AutogradTest, ClipBlocksGradient) {
  ag::Tape tape;
  Matrix x(1, 2);
  x << 5.0, 20.0;
  ag::Var v = tape.parameter(x, 0);
  tape.backward(ag::sum(ag::clip_max(v, 10.0)));
  std::vector<Matrix> g{Matrix::Zero(1, 2)};
  tape.accumulate_parameter_grads(g);
  EXPECT_EQ(g[0](0, 0), 1.0);
  EXPECT_EQ(g[0](0, 1), 0.0);
}

TEST(AutogradTest, DetachIsExactlyConstant) {
  ag::Tape tape;
  Matrix x = Matrix::Constant(2, 2, 3.0);
  ag::Var v = tape.parameter(x, 0);
  tape.backward(ag::sum(ag::mul(ag::detach(v), ag::detach(v))));
  std::vector<Matrix> g{Matrix::Zero(2, 2)};
  tape.accumulate_parameter_grads(g);
  EXPECT_TRUE(g[0].isZero(0.0));
}

}  // namespace
}  // namespace cpd
