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

#include "flowssn/flows_discrete.hpp"
#include "flowssn/networks.hpp"

#include <benchmark/benchmark.h>

namespace {

using flowssn::Rng;
using flowssn::ad::Matrix;
namespace ad = flowssn::ad;
namespace flows = flowssn::flows;
namespace nn = flowssn::nn;

// Parallel IAF sampling pass over M samples of a 2x16x16 field.
void BM_IafForwardMadeLinear(benchmark::State& state) {
  const int m = static_cast<int>(state.range(0));
  nn::ParameterSet ps;
  auto c = std::make_shared<nn::MadeLinearConditioner>(ps, "made", 512, 0);
  const flows::AutoregressiveTransform t{c, flows::Direction::kIAF};
  Rng rng(3);
  const Matrix u = flowssn::standard_normal(512, m, rng);
  ad::NoGradGuard guard;
  for (auto _ : state) {
    benchmark::DoNotOptimize(flows::iaf_forward(ad::constant(u), nullptr, t).eta.value().data());
  }
  state.SetItemsProcessed(state.iterations() * m);
}
BENCHMARK(BM_IafForwardMadeLinear)->Arg(16)->Arg(512);

void BM_IafForwardTransformer(benchmark::State& state) {
  const int m = static_cast<int>(state.range(0));
  nn::ParameterSet ps;
  Rng rng(4);
  nn::TransformerSpec spec;
  spec.patch = {2, 16, 16, 2, 2};
  auto c = std::make_shared<nn::CausalTransformerConditioner>(ps, "tf", spec, rng);
  const flows::AutoregressiveTransform t{c, flows::Direction::kIAF};
  const Matrix u = flowssn::standard_normal(512, m, rng);
  ad::NoGradGuard guard;
  for (auto _ : state) {
    benchmark::DoNotOptimize(flows::iaf_forward(ad::constant(u), nullptr, t).eta.value().data());
  }
  state.SetItemsProcessed(state.iterations() * m);
}
BENCHMARK(BM_IafForwardTransformer)->Arg(16);

// Sequential inversion costs one conditioner pass per autoregressive group.
void BM_IafInverseTransformer(benchmark::State& state) {
  nn::ParameterSet ps;
  Rng rng(5);
  nn::TransformerSpec spec;
  spec.patch = {2, 16, 16, 2, 2};
  auto c = std::make_shared<nn::CausalTransformerConditioner>(ps, "tf", spec, rng);
  const flows::AutoregressiveTransform t{c, flows::Direction::kIAF};
  const Matrix eta = flowssn::standard_normal(512, 4, rng);
  for (auto _ : state) {
    benchmark::DoNotOptimize(flows::iaf_inverse(eta, nullptr, t).data());
  }
}
BENCHMARK(BM_IafInverseTransformer)->Unit(benchmark::kMillisecond);

}  // namespace
