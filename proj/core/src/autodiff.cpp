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

#include "flowssn/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <unordered_set>
#include <utility>

namespace flowssn::ad {

namespace {

thread_local bool g_grad_enabled = true;

using Backward = std::function<void(Node&)>;

Var make_result(Matrix value, const std::vector<const Var*>& inputs, Backward bw) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (g_grad_enabled) {
    bool needs = false;
    for (const Var* v : inputs) {
      needs = needs || (v->defined() && v->requires_grad());
    }
    if (needs) {
      node->requires_grad = true;
      for (const Var* v : inputs) {
        node->parents.push_back(v->defined() ? v->node() : nullptr);
      }
      node->backward = std::move(bw);
    }
  }
  return Var(std::move(node));
}

bool wants(const Node& self, std::size_t i) {
  return self.parents[i] && self.parents[i]->requires_grad;
}

void accumulate_block(Node& target, Eigen::Index r0, Eigen::Index c0, const Matrix& g) {
  if (target.grad.size() == 0) {
    target.grad = Matrix::Zero(target.value.rows(), target.value.cols());
  }
  target.grad.block(r0, c0, g.rows(), g.cols()) += g;
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch (" +
                                std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                                " vs " + std::to_string(b.rows()) + "x" +
                                std::to_string(b.cols()) + ")");
  }
}

double stable_softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

double stable_sigmoid(double x) {
  if (x >= 0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Unary elementwise op with derivative computed from (input, output).
template <typename F, typename D>
Var unary(const Var& a, F f, D dfdx) {
  Matrix out = a.value().unaryExpr(f);
  return make_result(std::move(out), {&a}, [dfdx](Node& self) {
    const Matrix& x = self.parents[0]->value;
    Matrix g = self.grad;
    for (Eigen::Index i = 0; i < g.size(); ++i) {
      g.data()[i] *= dfdx(x.data()[i], self.value.data()[i]);
    }
    self.parents[0]->accumulate(g);
  });
}

}  // namespace

void Node::accumulate(const Matrix& g) {
  if (grad.size() == 0) {
    grad = g;
  } else {
    grad += g;
  }
}

Var::Var(Matrix value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Var constant(Matrix value) { return Var(std::move(value), false); }
Var parameter(Matrix value) { return Var(std::move(value), true); }
Var scalar_constant(double v) { return Var(Matrix::Constant(1, 1, v), false); }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

void backward(const Var& root) {
  if (!root.defined() || root.rows() != 1 || root.cols() != 1) {
    throw std::invalid_argument("backward: root must be a 1x1 value");
  }
  if (!root.requires_grad()) {
    return;
  }
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p != nullptr && p->requires_grad && visited.insert(p).second) {
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root.node()->accumulate(Matrix::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->grad.size() != 0) {
      n->backward(*n);
      n->grad.resize(0, 0);
    }
  }
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  return make_result(a.value() + b.value(), {&a, &b}, [](Node& self) {
    if (wants(self, 0)) self.parents[0]->accumulate(self.grad);
    if (wants(self, 1)) self.parents[1]->accumulate(self.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  return make_result(a.value() - b.value(), {&a, &b}, [](Node& self) {
    if (wants(self, 0)) self.parents[0]->accumulate(self.grad);
    if (wants(self, 1)) self.parents[1]->accumulate_expr(-self.grad);
  });
}

Var cmul(const Var& a, const Var& b) {
  require_same_shape(a, b, "cmul");
  return make_result(a.value().cwiseProduct(b.value()), {&a, &b}, [](Node& self) {
    if (wants(self, 0)) {
      self.parents[0]->accumulate_expr(self.grad.cwiseProduct(self.parents[1]->value));
    }
    if (wants(self, 1)) {
      self.parents[1]->accumulate_expr(self.grad.cwiseProduct(self.parents[0]->value));
    }
  });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var scale(const Var& a, double s) {
  return make_result(a.value() * s, {&a},
                     [s](Node& self) { self.parents[0]->accumulate_expr(self.grad * s); });
}

Var add_scalar(const Var& a, double s) {
  return make_result((a.value().array() + s).matrix(), {&a},
                     [](Node& self) { self.parents[0]->accumulate(self.grad); });
}

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) {
    throw std::invalid_argument("matmul: inner dimensions differ (" + std::to_string(a.cols()) +
                                " vs " + std::to_string(b.rows()) + ")");
  }
  Matrix out(a.rows(), b.cols());
  out.noalias() = a.value() * b.value();
  return make_result(std::move(out), {&a, &b}, [](Node& self) {
    const Matrix& av = self.parents[0]->value;
    const Matrix& bv = self.parents[1]->value;
    if (wants(self, 0)) {
      Matrix ga(av.rows(), av.cols());
      ga.noalias() = self.grad * bv.transpose();
      self.parents[0]->accumulate(ga);
    }
    if (wants(self, 1)) {
      Matrix gb(bv.rows(), bv.cols());
      gb.noalias() = av.transpose() * self.grad;
      self.parents[1]->accumulate(gb);
    }
  });
}

Var transpose(const Var& a) {
  return make_result(a.value().transpose(), {&a}, [](Node& self) {
    self.parents[0]->accumulate_expr(self.grad.transpose());
  });
}

Var add_col_broadcast(const Var& x, const Var& b) {
  if (b.cols() != 1 || b.rows() != x.rows()) {
    throw std::invalid_argument("add_col_broadcast: bias must be (rows x 1)");
  }
  Matrix out = x.value().colwise() + b.value().col(0);
  return make_result(std::move(out), {&x, &b}, [](Node& self) {
    if (wants(self, 0)) self.parents[0]->accumulate(self.grad);
    if (wants(self, 1)) self.parents[1]->accumulate_expr(self.grad.rowwise().sum());
  });
}

Var add_row_broadcast(const Var& x, const Var& b) {
  if (b.rows() != 1 || b.cols() != x.cols()) {
    throw std::invalid_argument("add_row_broadcast: bias must be (1 x cols)");
  }
  Matrix out = x.value().rowwise() + b.value().row(0);
  return make_result(std::move(out), {&x, &b}, [](Node& self) {
    if (wants(self, 0)) self.parents[0]->accumulate(self.grad);
    if (wants(self, 1)) self.parents[1]->accumulate_expr(self.grad.colwise().sum());
  });
}

Var mul_col_broadcast(const Var& x, const Var& s) {
  if (s.cols() != 1 || s.rows() != x.rows()) {
    throw std::invalid_argument("mul_col_broadcast: scale must be (rows x 1)");
  }
  Matrix out = s.value().col(0).asDiagonal() * x.value();
  return make_result(std::move(out), {&x, &s}, [](Node& self) {
    const Matrix& xv = self.parents[0]->value;
    const Matrix& sv = self.parents[1]->value;
    if (wants(self, 0)) {
      self.parents[0]->accumulate_expr(sv.col(0).asDiagonal() * self.grad);
    }
    if (wants(self, 1)) {
      self.parents[1]->accumulate_expr(self.grad.cwiseProduct(xv).rowwise().sum());
    }
  });
}

Var mul_row_broadcast(const Var& x, const Var& s) {
  if (s.rows() != 1 || s.cols() != x.cols()) {
    throw std::invalid_argument("mul_row_broadcast: scale must be (1 x cols)");
  }
  Matrix out = x.value() * s.value().row(0).asDiagonal();
  return make_result(std::move(out), {&x, &s}, [](Node& self) {
    const Matrix& xv = self.parents[0]->value;
    const Matrix& sv = self.parents[1]->value;
    if (wants(self, 0)) {
      self.parents[0]->accumulate_expr(self.grad * sv.row(0).asDiagonal());
    }
    if (wants(self, 1)) {
      self.parents[1]->accumulate_expr(self.grad.cwiseProduct(xv).colwise().sum());
    }
  });
}

Var exp(const Var& a) {
  return unary(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(const Var& a) {
  return unary(
      a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var softplus(const Var& a) {
  return unary(a, stable_softplus, [](double x, double) { return stable_sigmoid(x); });
}

Var sigmoid(const Var& a) {
  return unary(a, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Var silu(const Var& a) {
  return unary(
      a, [](double x) { return x * stable_sigmoid(x); },
      [](double x, double) {
        const double s = stable_sigmoid(x);
        return s * (1.0 + x * (1.0 - s));
      });
}

Var tanh(const Var& a) {
  return unary(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var square(const Var& a) {
  return unary(
      a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var expm1(const Var& a) {
  return unary(
      a, [](double x) { return std::expm1(x); }, [](double x, double) { return std::exp(x); });
}

Var clamp(const Var& a, double lo, double hi) {
  return unary(
      a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Var sum(const Var& a) {
  return make_result(Matrix::Constant(1, 1, a.value().sum()), {&a}, [](Node& self) {
    const Matrix& av = self.parents[0]->value;
    self.parents[0]->accumulate_expr(Matrix::Constant(av.rows(), av.cols(), self.grad(0, 0)));
  });
}

Var mean(const Var& a) {
  const double n = static_cast<double>(a.value().size());
  return make_result(Matrix::Constant(1, 1, a.value().sum() / n), {&a}, [n](Node& self) {
    const Matrix& av = self.parents[0]->value;
    self.parents[0]->accumulate_expr(
        Matrix::Constant(av.rows(), av.cols(), self.grad(0, 0) / n));
  });
}

Var sum_rows(const Var& a) {
  return make_result(a.value().colwise().sum(), {&a}, [](Node& self) {
    const Eigen::Index r = self.parents[0]->value.rows();
    self.parents[0]->accumulate_expr(self.grad.replicate(r, 1));
  });
}

Var sum_cols(const Var& a) {
  return make_result(a.value().rowwise().sum(), {&a}, [](Node& self) {
    const Eigen::Index c = self.parents[0]->value.cols();
    self.parents[0]->accumulate_expr(self.grad.replicate(1, c));
  });
}

Var logsumexp_cols(const Var& a) {
  const Matrix& av = a.value();
  Eigen::VectorXd m = av.rowwise().maxCoeff();
  Matrix weights = (av.colwise() - m).array().exp().matrix();
  Eigen::VectorXd s = weights.rowwise().sum();
  Matrix out = (m.array() + s.array().log()).matrix();
  weights = s.cwiseInverse().asDiagonal() * weights;
  return make_result(std::move(out), {&a}, [weights = std::move(weights)](Node& self) {
    self.parents[0]->accumulate_expr(self.grad.col(0).asDiagonal() * weights);
  });
}

Var log_softmax_blocks(const Var& a, int k) {
  const Matrix& av = a.value();
  if (k < 1 || av.rows() % k != 0) {
    throw std::invalid_argument("log_softmax_blocks: rows not divisible by k");
  }
  const Eigen::Index d = av.rows() / k;
  Matrix m = av.topRows(d);
  for (int c = 1; c < k; ++c) {
    m = m.cwiseMax(av.middleRows(c * d, d));
  }
  Matrix s = Matrix::Zero(d, av.cols());
  for (int c = 0; c < k; ++c) {
    s.array() += (av.middleRows(c * d, d) - m).array().exp();
  }
  Matrix lse = m + s.array().log().matrix();
  Matrix out(av.rows(), av.cols());
  for (int c = 0; c < k; ++c) {
    out.middleRows(c * d, d) = av.middleRows(c * d, d) - lse;
  }
  return make_result(std::move(out), {&a}, [k, d](Node& self) {
    Matrix gsum = self.grad.topRows(d);
    for (int c = 1; c < k; ++c) {
      gsum += self.grad.middleRows(c * d, d);
    }
    Matrix ga(self.grad.rows(), self.grad.cols());
    for (int c = 0; c < k; ++c) {
      ga.middleRows(c * d, d) =
          self.grad.middleRows(c * d, d) -
          self.value.middleRows(c * d, d).array().exp().matrix().cwiseProduct(gsum);
    }
    self.parents[0]->accumulate(ga);
  });
}

Var softmax_blocks(const Var& a, int k) {
  Matrix p;
  {
    NoGradGuard guard;
    p = log_softmax_blocks(constant(a.value()), k).value().array().exp().matrix();
  }
  const Eigen::Index d = p.rows() / k;
  return make_result(std::move(p), {&a}, [k, d](Node& self) {
    const Matrix& pv = self.value;
    Matrix dot = Matrix::Zero(d, pv.cols());
    for (int c = 0; c < k; ++c) {
      dot += self.grad.middleRows(c * d, d).cwiseProduct(pv.middleRows(c * d, d));
    }
    Matrix ga(pv.rows(), pv.cols());
    for (int c = 0; c < k; ++c) {
      ga.middleRows(c * d, d) =
          pv.middleRows(c * d, d).cwiseProduct(self.grad.middleRows(c * d, d) - dot);
    }
    self.parents[0]->accumulate(ga);
  });
}

Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) {
    throw std::out_of_range("slice_rows: range outside matrix");
  }
  return make_result(a.value().middleRows(start, count), {&a}, [start](Node& self) {
    accumulate_block(*self.parents[0], start, 0, self.grad);
  });
}

Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) {
    throw std::out_of_range("slice_cols: range outside matrix");
  }
  return make_result(a.value().middleCols(start, count), {&a}, [start](Node& self) {
    accumulate_block(*self.parents[0], 0, start, self.grad);
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) {
    throw std::invalid_argument("concat_rows: no inputs");
  }
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts.front().cols();
  for (const auto& p : parts) {
    if (p.cols() != cols) throw std::invalid_argument("concat_rows: column count mismatch");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  std::vector<const Var*> inputs;
  std::vector<Eigen::Index> offsets;
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    offsets.push_back(r);
    inputs.push_back(&p);
    r += p.rows();
  }
  return make_result(std::move(out), inputs, [offsets](Node& self) {
    for (std::size_t i = 0; i < offsets.size(); ++i) {
      if (wants(self, i)) {
        self.parents[i]->accumulate_expr(
            self.grad.middleRows(offsets[i], self.parents[i]->value.rows()));
      }
    }
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) {
    throw std::invalid_argument("concat_cols: no inputs");
  }
  Eigen::Index cols = 0;
  const Eigen::Index rows = parts.front().rows();
  for (const auto& p : parts) {
    if (p.rows() != rows) throw std::invalid_argument("concat_cols: row count mismatch");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::vector<const Var*> inputs;
  std::vector<Eigen::Index> offsets;
  Eigen::Index c = 0;
  for (const auto& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    offsets.push_back(c);
    inputs.push_back(&p);
    c += p.cols();
  }
  return make_result(std::move(out), inputs, [offsets](Node& self) {
    for (std::size_t i = 0; i < offsets.size(); ++i) {
      if (wants(self, i)) {
        self.parents[i]->accumulate_expr(
            self.grad.middleCols(offsets[i], self.parents[i]->value.cols()));
      }
    }
  });
}

namespace {

Matrix fmap_to_flat_value(const Matrix& x, int batch) {
  const Eigen::Index c = x.rows();
  const Eigen::Index p = x.cols() / batch;
  Matrix out(c * p, batch);
  for (int b = 0; b < batch; ++b) {
    Eigen::Map<Matrix> dst(out.col(b).data(), p, c);
    dst = x.middleCols(b * p, p).transpose();
  }
  return out;
}

Matrix flat_to_fmap_value(const Matrix& x, int channels) {
  const Eigen::Index batch = x.cols();
  const Eigen::Index p = x.rows() / channels;
  Matrix out(channels, batch * p);
  for (Eigen::Index b = 0; b < batch; ++b) {
    Eigen::Map<const Matrix> src(x.col(b).data(), p, channels);
    out.middleCols(b * p, p) = src.transpose();
  }
  return out;
}

}  // namespace

Var fmap_to_flat(const Var& x, int batch) {
  if (batch < 1 || x.cols() % batch != 0) {
    throw std::invalid_argument("fmap_to_flat: columns not divisible by batch");
  }
  return make_result(fmap_to_flat_value(x.value(), batch), {&x}, [](Node& self) {
    const auto channels = static_cast<int>(self.parents[0]->value.rows());
    self.parents[0]->accumulate(flat_to_fmap_value(self.grad, channels));
  });
}

Var flat_to_fmap(const Var& x, int channels) {
  if (channels < 1 || x.rows() % channels != 0) {
    throw std::invalid_argument("flat_to_fmap: rows not divisible by channels");
  }
  return make_result(flat_to_fmap_value(x.value(), channels), {&x}, [](Node& self) {
    const auto batch = static_cast<int>(self.parents[0]->value.cols());
    self.parents[0]->accumulate(fmap_to_flat_value(self.grad, batch));
  });
}

Var repeat_cols(const Var& x, int times) {
  if (times < 1) {
    throw std::invalid_argument("repeat_cols: times must be >= 1");
  }
  const Matrix& xv = x.value();
  Matrix out(xv.rows(), xv.cols() * times);
  for (Eigen::Index b = 0; b < xv.cols(); ++b) {
    out.middleCols(b * times, times) = xv.col(b).replicate(1, times);
  }
  return make_result(std::move(out), {&x}, [times](Node& self) {
    const Eigen::Index n = self.parents[0]->value.cols();
    Matrix g(self.grad.rows(), n);
    for (Eigen::Index b = 0; b < n; ++b) {
      g.col(b) = self.grad.middleCols(b * times, times).rowwise().sum();
    }
    self.parents[0]->accumulate(g);
  });
}

Var gather(const Var& a, std::shared_ptr<const std::vector<Eigen::Index>> index,
           Eigen::Index rows, Eigen::Index cols) {
  if (!index || static_cast<Eigen::Index>(index->size()) != rows * cols) {
    throw std::invalid_argument("gather: index size does not match output shape");
  }
  const Matrix& av = a.value();
  Matrix out(rows, cols);
  for (Eigen::Index i = 0; i < out.size(); ++i) {
    const Eigen::Index src = (*index)[static_cast<std::size_t>(i)];
    if (src < 0 || src >= av.size()) throw std::out_of_range("gather: index out of range");
    out.data()[i] = av.data()[src];
  }
  return make_result(std::move(out), {&a}, [index](Node& self) {
    Node& p = *self.parents[0];
    if (p.grad.size() == 0) p.grad = Matrix::Zero(p.value.rows(), p.value.cols());
    for (Eigen::Index i = 0; i < self.grad.size(); ++i) {
      p.grad.data()[(*index)[static_cast<std::size_t>(i)]] += self.grad.data()[i];
    }
  });
}

Var add_sample_bias(const Var& x, const Var& e, int positions) {
  if (e.rows() != x.rows() || e.cols() * positions != x.cols()) {
    throw std::invalid_argument("add_sample_bias: shape mismatch");
  }
  Matrix out = x.value();
  for (Eigen::Index b = 0; b < e.cols(); ++b) {
    out.middleCols(b * positions, positions).colwise() += e.value().col(b);
  }
  return make_result(std::move(out), {&x, &e}, [positions](Node& self) {
    if (wants(self, 0)) self.parents[0]->accumulate(self.grad);
    if (wants(self, 1)) {
      const Eigen::Index n = self.parents[1]->value.cols();
      Matrix g(self.grad.rows(), n);
      for (Eigen::Index b = 0; b < n; ++b) {
        g.col(b) = self.grad.middleCols(b * positions, positions).rowwise().sum();
      }
      self.parents[1]->accumulate(g);
    }
  });
}

namespace {

// Column layout of the unfolded patch matrix: row (ky*K + kx)*C + c.
Matrix im2col(const Matrix& x, int batch, int h, int w, int kernel) {
  const Eigen::Index c = x.rows();
  const int pad = kernel / 2;
  Matrix cols = Matrix::Zero(c * kernel * kernel, static_cast<Eigen::Index>(batch) * h * w);
  for (int b = 0; b < batch; ++b) {
    for (int y = 0; y < h; ++y) {
      for (int xx = 0; xx < w; ++xx) {
        const Eigen::Index n = (static_cast<Eigen::Index>(b) * h + y) * w + xx;
        for (int ky = 0; ky < kernel; ++ky) {
          const int sy = y + ky - pad;
          if (sy < 0 || sy >= h) continue;
          for (int kx = 0; kx < kernel; ++kx) {
            const int sx = xx + kx - pad;
            if (sx < 0 || sx >= w) continue;
            const Eigen::Index m = (static_cast<Eigen::Index>(b) * h + sy) * w + sx;
            cols.block((ky * kernel + kx) * c, n, c, 1) = x.col(m);
          }
        }
      }
    }
  }
  return cols;
}

Matrix col2im(const Matrix& cols, Eigen::Index c, int batch, int h, int w, int kernel) {
  const int pad = kernel / 2;
  Matrix x = Matrix::Zero(c, static_cast<Eigen::Index>(batch) * h * w);
  for (int b = 0; b < batch; ++b) {
    for (int y = 0; y < h; ++y) {
      for (int xx = 0; xx < w; ++xx) {
        const Eigen::Index n = (static_cast<Eigen::Index>(b) * h + y) * w + xx;
        for (int ky = 0; ky < kernel; ++ky) {
          const int sy = y + ky - pad;
          if (sy < 0 || sy >= h) continue;
          for (int kx = 0; kx < kernel; ++kx) {
            const int sx = xx + kx - pad;
            if (sx < 0 || sx >= w) continue;
            const Eigen::Index m = (static_cast<Eigen::Index>(b) * h + sy) * w + sx;
            x.col(m) += cols.block((ky * kernel + kx) * c, n, c, 1);
          }
        }
      }
    }
  }
  return x;
}

}  // namespace

Var conv2d(const Var& x, const Var& weight, const Var& bias, int batch, int height, int width,
           int kernel) {
  const Eigen::Index cin = x.rows();
  if (kernel % 2 != 1) {
    throw std::invalid_argument("conv2d: kernel size must be odd");
  }
  if (x.cols() != static_cast<Eigen::Index>(batch) * height * width) {
    throw std::invalid_argument("conv2d: input columns do not match batch*height*width");
  }
  if (weight.cols() != cin * kernel * kernel) {
    throw std::invalid_argument("conv2d: weight has " + std::to_string(weight.cols()) +
                                " columns, expected " +
                                std::to_string(cin * kernel * kernel));
  }
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rows() != weight.rows() || bias.cols() != 1)) {
    throw std::invalid_argument("conv2d: bias must be (out_channels x 1)");
  }
  auto cols = std::make_shared<Matrix>(kernel == 1 ? x.value()
                                                   : im2col(x.value(), batch, height, width,
                                                            kernel));
  Matrix out(weight.rows(), cols->cols());
  out.noalias() = weight.value() * (*cols);
  if (has_bias) {
    out.colwise() += bias.value().col(0);
  }
  return make_result(
      std::move(out), {&x, &weight, &bias},
      [cols, cin, batch, height, width, kernel, has_bias](Node& self) {
        if (wants(self, 1)) {
          Matrix gw(self.parents[1]->value.rows(), self.parents[1]->value.cols());
          gw.noalias() = self.grad * cols->transpose();
          self.parents[1]->accumulate(gw);
        }
        if (has_bias && wants(self, 2)) {
          self.parents[2]->accumulate_expr(self.grad.rowwise().sum());
        }
        if (wants(self, 0)) {
          Matrix gcols(cols->rows(), cols->cols());
          gcols.noalias() = self.parents[1]->value.transpose() * self.grad;
          if (kernel == 1) {
            self.parents[0]->accumulate(gcols);
          } else {
            self.parents[0]->accumulate(col2im(gcols, cin, batch, height, width, kernel));
          }
        }
      });
}

Var avg_pool2(const Var& x, int batch, int height, int width) {
  if (height % 2 != 0 || width % 2 != 0) {
    throw std::invalid_argument("avg_pool2: spatial size must be even");
  }
  const int oh = height / 2;
  const int ow = width / 2;
  const Matrix& xv = x.value();
  Matrix out(xv.rows(), static_cast<Eigen::Index>(batch) * oh * ow);
  for (int b = 0; b < batch; ++b) {
    for (int y = 0; y < oh; ++y) {
      for (int xx = 0; xx < ow; ++xx) {
        const Eigen::Index base = static_cast<Eigen::Index>(b) * height * width;
        const Eigen::Index i00 = base + (2 * y) * width + 2 * xx;
        out.col((static_cast<Eigen::Index>(b) * oh + y) * ow + xx) =
            0.25 * (xv.col(i00) + xv.col(i00 + 1) + xv.col(i00 + width) +
                    xv.col(i00 + width + 1));
      }
    }
  }
  return make_result(std::move(out), {&x}, [batch, height, width, oh, ow](Node& self) {
    Matrix g = Matrix::Zero(self.parents[0]->value.rows(), self.parents[0]->value.cols());
    for (int b = 0; b < batch; ++b) {
      for (int y = 0; y < oh; ++y) {
        for (int xx = 0; xx < ow; ++xx) {
          const Eigen::Index base = static_cast<Eigen::Index>(b) * height * width;
          const Eigen::Index i00 = base + (2 * y) * width + 2 * xx;
          const auto go = 0.25 * self.grad.col((static_cast<Eigen::Index>(b) * oh + y) * ow + xx);
          g.col(i00) += go;
          g.col(i00 + 1) += go;
          g.col(i00 + width) += go;
          g.col(i00 + width + 1) += go;
        }
      }
    }
    self.parents[0]->accumulate(g);
  });
}

Var upsample2(const Var& x, int batch, int height, int width) {
  const int oh = height * 2;
  const int ow = width * 2;
  const Matrix& xv = x.value();
  Matrix out(xv.rows(), static_cast<Eigen::Index>(batch) * oh * ow);
  for (int b = 0; b < batch; ++b) {
    for (int y = 0; y < oh; ++y) {
      for (int xx = 0; xx < ow; ++xx) {
        out.col((static_cast<Eigen::Index>(b) * oh + y) * ow + xx) =
            xv.col((static_cast<Eigen::Index>(b) * height + y / 2) * width + xx / 2);
      }
    }
  }
  return make_result(std::move(out), {&x}, [batch, height, width, oh, ow](Node& self) {
    Matrix g = Matrix::Zero(self.parents[0]->value.rows(), self.parents[0]->value.cols());
    for (int b = 0; b < batch; ++b) {
      for (int y = 0; y < oh; ++y) {
        for (int xx = 0; xx < ow; ++xx) {
          g.col((static_cast<Eigen::Index>(b) * height + y / 2) * width + xx / 2) +=
              self.grad.col((static_cast<Eigen::Index>(b) * oh + y) * ow + xx);
        }
      }
    }
    self.parents[0]->accumulate(g);
  });
}

Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, int batch,
               int positions, double eps) {
  const Matrix& xv = x.value();
  const Eigen::Index c = xv.rows();
  if (groups < 1 || c % groups != 0) {
    throw std::invalid_argument("group_norm: channels not divisible by groups");
  }
  if (xv.cols() != static_cast<Eigen::Index>(batch) * positions) {
    throw std::invalid_argument("group_norm: columns do not match batch*positions");
  }
  const Eigen::Index cg = c / groups;
  auto xhat = std::make_shared<Matrix>(c, xv.cols());
  auto inv_std = std::make_shared<Eigen::VectorXd>(static_cast<Eigen::Index>(batch) * groups);
  for (int b = 0; b < batch; ++b) {
    for (int g = 0; g < groups; ++g) {
      auto blk = xv.block(g * cg, static_cast<Eigen::Index>(b) * positions, cg, positions);
      const double m = blk.mean();
      const double var = (blk.array() - m).square().mean();
      const double is = 1.0 / std::sqrt(var + eps);
      (*inv_std)(b * groups + g) = is;
      xhat->block(g * cg, static_cast<Eigen::Index>(b) * positions, cg, positions) =
          ((blk.array() - m) * is).matrix();
    }
  }
  Matrix out = (gamma.value().col(0).asDiagonal() * (*xhat)).colwise() + beta.value().col(0);
  return make_result(
      std::move(out), {&x, &gamma, &beta},
      [xhat, inv_std, groups, batch, positions, cg](Node& self) {
        const Matrix& gv = self.parents[1]->value;
        if (wants(self, 1)) {
          self.parents[1]->accumulate_expr(self.grad.cwiseProduct(*xhat).rowwise().sum());
        }
        if (wants(self, 2)) {
          self.parents[2]->accumulate_expr(self.grad.rowwise().sum());
        }
        if (wants(self, 0)) {
          Matrix gxhat = gv.col(0).asDiagonal() * self.grad;
          Matrix gx(gxhat.rows(), gxhat.cols());
          for (int b = 0; b < batch; ++b) {
            for (int g = 0; g < groups; ++g) {
              const Eigen::Index c0 = g * cg;
              const Eigen::Index p0 = static_cast<Eigen::Index>(b) * positions;
              auto gh = gxhat.block(c0, p0, cg, positions);
              auto xh = xhat->block(c0, p0, cg, positions);
              const double mg = gh.mean();
              const double mgx = gh.cwiseProduct(xh).mean();
              gx.block(c0, p0, cg, positions) =
                  ((gh.array() - mg - xh.array() * mgx) * (*inv_std)(b * groups + g)).matrix();
            }
          }
          self.parents[0]->accumulate(gx);
        }
      });
}

Var attention(const Var& q, const Var& k, const Var& v, int len, bool causal) {
  require_same_shape(q, k, "attention");
  if (v.cols() != q.cols() || len < 1 || q.cols() % len != 0) {
    throw std::invalid_argument("attention: inconsistent sequence layout");
  }
  const Eigen::Index dh = q.rows();
  const Eigen::Index nseq = q.cols() / len;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  auto weights = std::make_shared<std::vector<Matrix>>(nseq);
  Matrix out(v.rows(), q.cols());
  for (Eigen::Index s = 0; s < nseq; ++s) {
    auto qs = q.value().middleCols(s * len, len);
    auto ks = k.value().middleCols(s * len, len);
    Matrix scores = (ks.transpose() * qs) * inv_sqrt;  // (keys, queries)
    for (int j = 0; j < len; ++j) {
      const int last = causal ? j : len - 1;
      const double m = scores.col(j).head(last + 1).maxCoeff();
      double z = 0.0;
      for (int i = 0; i <= last; ++i) {
        scores(i, j) = std::exp(scores(i, j) - m);
        z += scores(i, j);
      }
      for (int i = 0; i <= last; ++i) scores(i, j) /= z;
      for (int i = last + 1; i < len; ++i) scores(i, j) = 0.0;
    }
    out.middleCols(s * len, len).noalias() = v.value().middleCols(s * len, len) * scores;
    (*weights)[s] = std::move(scores);
  }
  return make_result(std::move(out), {&q, &k, &v}, [weights, len, nseq, inv_sqrt](Node& self) {
    const Matrix& qv = self.parents[0]->value;
    const Matrix& kv = self.parents[1]->value;
    const Matrix& vv = self.parents[2]->value;
    Matrix gq = Matrix::Zero(qv.rows(), qv.cols());
    Matrix gk = Matrix::Zero(kv.rows(), kv.cols());
    Matrix gv = Matrix::Zero(vv.rows(), vv.cols());
    for (Eigen::Index s = 0; s < nseq; ++s) {
      const Matrix& a = (*weights)[s];
      auto go = self.grad.middleCols(s * len, len);
      gv.middleCols(s * len, len).noalias() = go * a.transpose();
      Matrix ga = vv.middleCols(s * len, len).transpose() * go;
      Eigen::RowVectorXd colsum = ga.cwiseProduct(a).colwise().sum();
      Matrix gs = a.cwiseProduct(ga - colsum.replicate(len, 1)) * inv_sqrt;
      gk.middleCols(s * len, len).noalias() = qv.middleCols(s * len, len) * gs.transpose();
      gq.middleCols(s * len, len).noalias() = kv.middleCols(s * len, len) * gs;
    }
    if (wants(self, 0)) self.parents[0]->accumulate(gq);
    if (wants(self, 1)) self.parents[1]->accumulate(gk);
    if (wants(self, 2)) self.parents[2]->accumulate(gv);
  });
}

}  // namespace flowssn::ad
