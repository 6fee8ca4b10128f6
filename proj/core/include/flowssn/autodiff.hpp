// Copyright 2026 The FlowSSN Authors.
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

// Reverse-mode automatic differentiation over dense Eigen matrices.
//
// A Var is a handle to a node in a dynamically built graph. Nodes created from
// inputs that require gradients keep their parents alive and carry a closure
// that pushes the node's gradient back into them; everything else is a plain
// constant. Graphs are freed when the last Var referencing them goes away.
//
// Feature maps are stored channel-major as (channels, batch * height * width)
// with column index b * H * W + y * W + x. Flat per-sample vectors are stored as
// (features, samples).

#pragma once

#include <Eigen/Dense>

#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace flowssn::ad {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct Node {
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void accumulate(const Matrix& g);
  template <typename Expr>
  void accumulate_expr(const Expr& g) {
    if (grad.size() == 0) {
      grad = g;
    } else {
      grad += g;
    }
  }
};

class Var {
 public:
  Var() = default;
  explicit Var(Matrix value, bool requires_grad = false);
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Matrix& value() const { return node_->value; }
  Matrix& mutable_value() { return node_->value; }
  const Matrix& grad() const { return node_->grad; }
  Matrix& mutable_grad() { return node_->grad; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  double scalar() const { return node_->value(0, 0); }
  bool defined() const { return static_cast<bool>(node_); }
  void zero_grad() { node_->grad.resize(0, 0); }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

Var constant(Matrix value);
Var parameter(Matrix value);
Var scalar_constant(double v);

// Runs reverse accumulation from a 1x1 root.
void backward(const Var& root);

// Disables graph recording on this thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};
bool grad_enabled();

// Elementwise and linear algebra.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var cmul(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator-(const Var& a) { return neg(a); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }

// Broadcasting: b is (rows x 1) or (1 x cols).
Var add_col_broadcast(const Var& x, const Var& b);
Var add_row_broadcast(const Var& x, const Var& b);
Var mul_col_broadcast(const Var& x, const Var& s);
Var mul_row_broadcast(const Var& x, const Var& s);

Var exp(const Var& a);
Var log(const Var& a);
Var softplus(const Var& a);
Var sigmoid(const Var& a);
Var silu(const Var& a);
Var tanh(const Var& a);
Var square(const Var& a);
Var expm1(const Var& a);
// Gradient is zero outside [lo, hi].
Var clamp(const Var& a, double lo, double hi);

// Reductions.
Var sum(const Var& a);
Var mean(const Var& a);
Var sum_rows(const Var& a);  // (1 x cols)
Var sum_cols(const Var& a);  // (rows x 1)
Var logsumexp_cols(const Var& a);  // log-sum-exp across columns, (rows x 1)

// Category-blocked softmax. Each column holds k blocks of d rows; row c*d + j is
// category c at pixel j.
Var log_softmax_blocks(const Var& a, int k);
Var softmax_blocks(const Var& a, int k);

// Layout.
Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count);
Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count);
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
// (C, B*P) feature map <-> (C*P, B) flat vectors.
Var fmap_to_flat(const Var& x, int batch);
Var flat_to_fmap(const Var& x, int channels);
// (n, B) -> (n, B*times), column b*times + m copies column b.
Var repeat_cols(const Var& x, int times);
// Output element i (column-major) is a.data()[index[i]]; the result is rows x cols.
Var gather(const Var& a, std::shared_ptr<const std::vector<Eigen::Index>> index,
           Eigen::Index rows, Eigen::Index cols);
// x is (C, B*P), e is (C, B); adds e[:, b] to every column of sample b.
Var add_sample_bias(const Var& x, const Var& e, int positions);

// Spatial ops on (C, B*H*W) maps.
Var conv2d(const Var& x, const Var& weight, const Var& bias, int batch, int height,
           int width, int kernel);
Var avg_pool2(const Var& x, int batch, int height, int width);
Var upsample2(const Var& x, int batch, int height, int width);
Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, int batch,
               int positions, double eps = 1e-5);

// Scaled dot-product attention over sequences laid out as (dim, nseq*len).
// With causal set, position i attends to positions <= i.
Var attention(const Var& q, const Var& k, const Var& v, int len, bool causal);

}  // namespace flowssn::ad
