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

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "gradcheck.hpp"
#include "petsynth/error.hpp"
#include "petsynth/objective.hpp"

using namespace petsynth;
using objective::LossConfig;
using objective::LossKind;

namespace {

std::vector<float> random_floats(std::mt19937_64& rng, std::size_t n, float lo = 0.0f,
                                 float hi = 1.0f) {
  std::uniform_real_distribution<float> dist(lo, hi);
  std::vector<float> v(n);
  for (auto& x : v) x = dist(rng);
  return v;
}

Volume pet(Dims dims, std::vector<float> data) {
  return Volume(dims, {ChannelRole::PET_CBF}, {VoxelUnit::Dimensionless}, std::move(data));
}

// Straight-line 64-bit SSIM used as an oracle.
double oracle_ssim(const std::vector<float>& x, const std::vector<float>& y) {
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double vx = 0, vy = 0, cov = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    vx += (x[i] - mx) * (x[i] - mx);
    vy += (y[i] - my) * (y[i] - my);
    cov += (x[i] - mx) * (y[i] - my);
  }
  vx /= n;
  vy /= n;
  cov /= n;
  const double c1 = 1e-4, c2 = 9e-4;
  return (2 * mx * my + c1) * (2 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
}

}  // namespace

TEST_CASE("mae examples") {
  std::vector<float> ones(27, 1.0f), nines(27, 0.9f);
  CHECK(objective::mae(ones, ones) == 0.0);
  CHECK(objective::mae(ones, nines) == doctest::Approx(0.1).epsilon(1e-7));
  std::vector<float> shorter(26, 1.0f);
  CHECK_THROWS_AS(objective::mae(ones, shorter), ShapeError);
  CHECK_THROWS_AS(objective::mae(pet({3, 3, 3}, ones), pet({27, 1, 1}, ones)), ShapeError);
}

TEST_CASE("rmse and nrmse examples") {
  std::vector<float> x(16), y(16);
  for (std::size_t i = 0; i < 16; ++i) {
    x[i] = i < 8 ? 0.0f : 1.0f;
    y[i] = 1.0f - x[i];
  }
  auto same = objective::rmse_nrmse(x, x);
  CHECK(same.rmse == 0.0);
  CHECK(same.nrmse == 0.0);
  auto r = objective::rmse_nrmse(x, y);
  CHECK(r.rmse == 1.0);
  CHECK(r.nrmse == 1.0);
  std::vector<float> flat(16, 0.3f);
  CHECK_THROWS_AS(objective::rmse_nrmse(flat, y), ValidationError);
}

TEST_CASE("ssim examples") {
  std::mt19937_64 rng(1);
  auto x = random_floats(rng, 64);
  CHECK(objective::ssim_global(x, x, LossConfig{}) == 1.0);
  std::vector<float> half(64, 0.5f), quarter(64, 0.25f);
  CHECK(objective::ssim_global(half, quarter, LossConfig{}) ==
        doctest::Approx((2 * 0.125 + 1e-4) / (0.3125 + 1e-4)).epsilon(1e-12));
  for (int t = 0; t < 20; ++t) {
    auto a = random_floats(rng, 50), b = random_floats(rng, 50);
    CHECK(objective::ssim_global(a, b, LossConfig{}) == objective::ssim_global(b, a, LossConfig{}));
    // Perturbing y never lifts SSIM above its value at y = x.
    auto p = x;
    std::normal_distribution<float> noise(0.0f, 0.05f);
    for (auto& v : p) v += noise(rng);
    CHECK(objective::ssim_global(x, p, LossConfig{}) <= 1.0);
  }
}

TEST_CASE("psnr examples") {
  std::vector<float> ones(100, 1.0f), nines(100, 0.9f);
  CHECK(objective::psnr(ones, nines, LossConfig{}) == doctest::Approx(20.0).epsilon(1e-6));
  CHECK(std::isinf(objective::psnr(ones, ones, LossConfig{})));

  std::mt19937_64 rng(2);
  auto x = random_floats(rng, 200);
  auto noise = random_floats(rng, 200, -0.01f, 0.01f);
  std::vector<float> y1(200), y2(200);
  for (std::size_t i = 0; i < 200; ++i) {
    // Powers of two keep the doubled noise exact in float.
    y1[i] = x[i] + noise[i];
    y2[i] = x[i] + 2.0f * noise[i];
  }
  // Float rounding of x + e makes the ratio approximate; 1e-3 dB is ample.
  CHECK(objective::psnr(x, y1, LossConfig{}) - objective::psnr(x, y2, LossConfig{}) ==
        doctest::Approx(20.0 * std::log10(2.0)).epsilon(1e-3));
}

TEST_CASE("metrics match 64-bit oracles on random pairs") {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> extent(1, 16);
  for (int t = 0; t < 100; ++t) {
    const Dims dims{extent(rng), extent(rng), std::max(2, extent(rng))};
    auto x = random_floats(rng, dims.voxels());
    auto y = random_floats(rng, dims.voxels());
    double abs = 0, sq = 0, lo = x[0], hi = x[0];
    for (std::size_t i = 0; i < x.size(); ++i) {
      abs += std::abs(static_cast<double>(x[i]) - y[i]);
      sq += (static_cast<double>(x[i]) - y[i]) * (static_cast<double>(x[i]) - y[i]);
      lo = std::min(lo, static_cast<double>(x[i]));
      hi = std::max(hi, static_cast<double>(x[i]));
    }
    const double n = static_cast<double>(x.size());
    const auto r = objective::quality_report(pet(dims, x), pet(dims, y), LossConfig{});
    CHECK(std::abs(objective::mae(x, y) - abs / n) < 1e-6);
    CHECK(std::abs(r.nrmse - std::sqrt(sq / n) / (hi - lo)) < 1e-6);
    CHECK(std::abs(r.psnr_db - 10 * std::log10(n / sq)) < 1e-4);
    CHECK(std::abs(r.ssim - oracle_ssim(x, y)) < 1e-6);
    CHECK(r.computed_over == "whole-volume");
  }
}

TEST_CASE("metrics are permutation invariant") {
  std::mt19937_64 rng(4);
  auto x = random_floats(rng, 300), y = random_floats(rng, 300);
  std::vector<std::size_t> perm(300);
  for (std::size_t i = 0; i < 300; ++i) perm[i] = i;
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<float> px(300), py(300);
  for (std::size_t i = 0; i < 300; ++i) {
    px[i] = x[perm[i]];
    py[i] = y[perm[i]];
  }
  LossConfig cfg;
  CHECK(objective::ssim_global(x, y, cfg) == doctest::Approx(objective::ssim_global(px, py, cfg)).epsilon(1e-12));
  CHECK(objective::psnr(x, y, cfg) == doctest::Approx(objective::psnr(px, py, cfg)).epsilon(1e-12));
  CHECK(objective::mae(x, y) == doctest::Approx(objective::mae(px, py)).epsilon(1e-12));
}

TEST_CASE("masked statistics") {
  std::vector<float> x = {0.0f, 1.0f, 5.0f, 7.0f};
  std::vector<float> y = {0.5f, 1.0f, 9.0f, 9.0f};
  std::vector<std::uint8_t> mask = {1, 1, 0, 0};
  CHECK(objective::mae(x, y, mask) == doctest::Approx(0.25));
  CHECK(objective::rmse_nrmse(x, y, mask).nrmse == doctest::Approx(std::sqrt(0.125)));
  auto r = objective::quality_report(pet({4, 1, 1}, x), pet({4, 1, 1}, y), LossConfig{}, mask);
  CHECK(r.computed_over == "mask");
}

TEST_CASE("composite loss recomposes from components") {
  std::mt19937_64 rng(5);
  LossConfig cfg;
  for (int t = 0; t < 50; ++t) {
    auto x = random_floats(rng, 500), y = random_floats(rng, 500);
    const double expected =
        0.2 * objective::mae(x, y) + 0.8 * (1.0 - objective::ssim_global(x, y, cfg));
    CHECK(std::abs(objective::composite_loss(x, y, cfg) - expected) < 1e-9);
    CHECK(objective::composite_loss(x, y, cfg) >= 0.0);
  }
  for (auto kind : {LossKind::Mse, LossKind::Mae, LossKind::Ssim, LossKind::Custom}) {
    auto x = random_floats(rng, 64);
    LossConfig k;
    k.kind = kind;
    CHECK(objective::composite_loss(x, x, k) == 0.0);
  }
  LossConfig bad;
  bad.lambda_r = 0.5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK(objective::parse_loss_kind("ssim") == LossKind::Ssim);
  CHECK_THROWS_AS(objective::parse_loss_kind("l2"), ConfigError);
}

TEST_CASE("composite components example") {
  // mae = 0.1 and ssim = 0.8 combine to 0.18.
  CHECK(0.2 * 0.1 + 0.8 * (1 - 0.8) == doctest::Approx(0.18).epsilon(1e-15));
}

TEST_CASE("loss node value and gradient") {
  for (auto kind : {LossKind::Mse, LossKind::Mae, LossKind::Ssim, LossKind::Custom}) {
    for (int seed = 0; seed < 20; ++seed) {
      std::mt19937_64 rng(600 + seed);
      auto ref = petsynth::testing::uniform_values(rng, 4 * 3 * 2, 0, 1);
      // Offsets of at least 0.01 keep the |y - x| kink outside the FD stencil.
      auto pred = ref;
      std::uniform_real_distribution<double> offset(0.01, 0.3);
      std::bernoulli_distribution sign(0.5);
      for (auto& v : pred) v += sign(rng) ? offset(rng) : -offset(rng);
      LossConfig cfg;
      cfg.kind = kind;
      const auto r = petsynth::testing::grad_check(
          [&](auto& tape, const std::vector<ad::NodeId>& p) {
            using T = std::remove_const_t<
                typename std::decay_t<decltype(tape.value(p[0]))>::value_type>;
            const auto cast = petsynth::testing::cast_values<T>(ref);
            return objective::loss_node(tape, p[0], std::span<const T>(cast), cfg);
          },
          {{{4, 3, 2, 1}, pred}});
      CHECK(r.rel32 < 1e-3);
      CHECK(r.rel64 < 1e-6);

      ad::Tape<float> tape;
      auto y = tape.input({4, 3, 2, 1}, petsynth::testing::cast_values<float>(pred));
      const auto xf = petsynth::testing::cast_values<float>(ref);
      auto node = objective::loss_node(tape, y, std::span<const float>(xf), cfg);
      const auto yf = petsynth::testing::cast_values<float>(pred);
      CHECK(tape.value(node)[0] == doctest::Approx(objective::composite_loss(xf, yf, cfg)).epsilon(1e-6));
    }
  }
}

TEST_CASE("quality csv row") {
  objective::QualityReport r{0.05, 30.5, 0.9, "whole-volume"};
  CHECK(objective::quality_csv_header() == "subject_id,condition,nrmse,psnr_db,ssim");
  CHECK(objective::quality_csv_row("hc001", "pre", r) == "hc001,pre,0.05,30.5,0.9");
}

TEST_CASE("error map") {
  std::mt19937_64 rng(8);
  const Dims dims{5, 4, 3};
  auto x = random_floats(rng, dims.voxels());
  const auto zero = objective::error_map(pet(dims, x), pet(dims, x), 1.0);
  for (float v : zero.data()) CHECK(v == 0.0f);

  auto y = x;
  y[0] += 0.1f;
  y[1] += 0.9f;
  const auto e = objective::error_map(pet(dims, x), pet(dims, y), 1.0);
  CHECK(e.data()[0] == doctest::Approx(0.3).epsilon(1e-5));
  CHECK(e.data()[1] == 1.0f);
  CHECK_THROWS_AS(objective::error_map(pet(dims, x), pet({5, 4, 2}, random_floats(rng, 40)), 1.0), ShapeError);
}
