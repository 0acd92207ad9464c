// Copyright 2026 The petsynth Authors
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

#include <benchmark/benchmark.h>

#include <cmath>
#include <random>
#include <vector>

#include "petsynth/ad/ops.hpp"
#include "petsynth/objective.hpp"
#include "petsynth/synthnet.hpp"

using namespace petsynth;

namespace {

std::vector<float> noise(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> d(0.0f, 1.0f);
  std::vector<float> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

Volume desk_input(Dims dims) {
  std::vector<VoxelUnit> units(kCanonicalInputs.size(), VoxelUnit::Dimensionless);
  auto data = noise(dims.voxels() * kCanonicalInputs.size(), 1);
  for (auto& v : data) v = std::abs(v);  // CBF channels must be non-negative
  return Volume(dims, {kCanonicalInputs.begin(), kCanonicalInputs.end()}, units, std::move(data));
}

// Args: spatial edge, channels in, channels out.
void BM_Conv3dForward(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const int ci = static_cast<int>(state.range(1)), co = static_cast<int>(state.range(2));
  const auto x = noise(static_cast<std::size_t>(n) * n * n * ci, 2);
  const auto k = noise(125u * ci * co, 3);
  for (auto _ : state) {
    ad::Tape<float> tape;
    tape.set_grad_enabled(false);
    auto xi = tape.input({n, n, n, ci}, x);
    auto ki = tape.parameter({5, 5, 5, ci, co}, k);
    auto bi = tape.parameter({co}, std::vector<float>(static_cast<std::size_t>(co), 0.0f));
    benchmark::DoNotOptimize(tape.value(ad::conv3d(tape, xi, ki, bi)).data());
  }
  state.SetItemsProcessed(state.iterations() * n * n * n);
}
BENCHMARK(BM_Conv3dForward)->Args({16, 8, 4})->Args({16, 4, 8})->Args({8, 32, 32})->Unit(benchmark::kMillisecond);

void BM_Conv3dBackward(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const int ci = static_cast<int>(state.range(1)), co = static_cast<int>(state.range(2));
  const auto x = noise(static_cast<std::size_t>(n) * n * n * ci, 2);
  const auto k = noise(125u * ci * co, 3);
  for (auto _ : state) {
    ad::Tape<float> tape;
    auto xi = tape.input({n, n, n, ci}, x);
    auto ki = tape.parameter({5, 5, 5, ci, co}, k);
    auto bi = tape.parameter({co}, std::vector<float>(static_cast<std::size_t>(co), 0.0f));
    auto y = ad::sum(tape, ad::conv3d(tape, xi, ki, bi));
    benchmark::DoNotOptimize(ad::backward(tape, y));
  }
}
BENCHMARK(BM_Conv3dBackward)->Args({16, 8, 4})->Args({8, 32, 32})->Unit(benchmark::kMillisecond);

void BM_DeskForward(benchmark::State& state) {
  const auto cfg = net::NetworkConfig::desk();
  const auto params = net::init_params(cfg, 1);
  const auto x = desk_input({32, 32, 16});
  for (auto _ : state) benchmark::DoNotOptimize(net::forward(x, params, cfg).data().data());
}
BENCHMARK(BM_DeskForward)->Unit(benchmark::kMillisecond);

void BM_GlobalSsim(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto x = noise(n, 4), y = noise(n, 5);
  const objective::LossConfig cfg;
  for (auto _ : state) benchmark::DoNotOptimize(objective::ssim_global(x, y, cfg));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n));
}
BENCHMARK(BM_GlobalSsim)->Arg(32 * 32 * 16)->Arg(96 * 96 * 64);

}  // namespace

BENCHMARK_MAIN();
