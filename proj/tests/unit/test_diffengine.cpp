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

#include <cmath>
#include <numeric>
#include <random>

#include "gradcheck.hpp"
#include "petsynth/ad/ops.hpp"
#include "petsynth/error.hpp"

using namespace petsynth;
using petsynth::testing::grad_check;
using petsynth::testing::ParamInit;
using petsynth::testing::random_projection;
using petsynth::testing::uniform_values;

namespace {

constexpr int kSeeds = 20;

// Values bounded away from zero so ReLU kinks stay outside the FD stencil.
std::vector<double> away_from_zero(std::mt19937_64& rng, std::size_t n) {
  auto v = uniform_values(rng, n, 0.05, 1.0);
  std::bernoulli_distribution sign(0.5);
  for (auto& x : v)
    if (sign(rng)) x = -x;
  return v;
}

// Distinct values on a 0.01 grid so max-pool winners never swap under FD.
std::vector<double> separated(std::mt19937_64& rng, std::size_t n) {
  std::vector<double> v(n);
  std::iota(v.begin(), v.end(), 0.0);
  std::shuffle(v.begin(), v.end(), rng);
  for (auto& x : v) x = x * 0.01 - 0.3;
  return v;
}

void require_ok(const petsynth::testing::GradCheckResult& r) {
  CHECK(r.rel32 < 1e-3);
  CHECK(r.rel64 < 1e-6);
}

}  // namespace

TEST_CASE("conv3d shape arithmetic") {
  ad::Tape<float> tape;
  tape.set_grad_enabled(false);
  auto x = tape.input({12, 10, 6, 3}, std::vector<float>(12 * 10 * 6 * 3, 1.0f));
  auto k = tape.parameter({5, 5, 5, 3, 4}, std::vector<float>(125 * 12, 0.0f));
  auto b = tape.parameter({4}, std::vector<float>(4, 0.0f));
  CHECK(tape.shape(ad::conv3d(tape, x, k, b)) == ad::Shape{12, 10, 6, 4});

  auto k2 = tape.parameter({2, 2, 2, 3, 4}, std::vector<float>(8 * 12, 0.0f));
  CHECK(tape.shape(ad::conv3d(tape, x, k2, b, {2, ad::Padding::Same})) == ad::Shape{6, 5, 3, 4});

  auto x_odd = tape.input({5, 3, 7, 3}, std::vector<float>(5 * 3 * 7 * 3, 1.0f));
  CHECK(tape.shape(ad::conv3d(tape, x_odd, k, b, {2, ad::Padding::Same})) ==
        ad::Shape{3, 2, 4, 4});

  auto k_bad = tape.parameter({3, 3, 3, 2, 4}, std::vector<float>(27 * 8, 0.0f));
  CHECK_THROWS_AS(ad::conv3d(tape, x, k_bad, b), ShapeError);
}

TEST_CASE("conv3d identity kernel") {
  std::mt19937_64 rng(1);
  auto xv = uniform_values(rng, 4 * 3 * 2);
  ad::Tape<double> tape;
  auto x = tape.input({4, 3, 2, 1}, xv);
  auto k = tape.parameter({1, 1, 1, 1, 1}, {1.0});
  auto b = tape.parameter({1}, {0.0});
  auto y = ad::conv3d(tape, x, k, b);
  auto out = tape.value(y);
  for (std::size_t i = 0; i < xv.size(); ++i) CHECK(out[i] == xv[i]);
}

TEST_CASE("conv3d matches a direct loop") {
  std::mt19937_64 rng(3);
  const int h = 5, w = 4, d = 3, ci = 2, co = 3, ks = 3;
  auto xv = uniform_values(rng, h * w * d * ci);
  auto kv = uniform_values(rng, ks * ks * ks * ci * co);
  auto bv = uniform_values(rng, co);
  ad::Tape<double> tape;
  auto y = ad::conv3d(tape, tape.input({h, w, d, ci}, xv), tape.parameter({ks, ks, ks, ci, co}, kv),
                      tape.parameter({co}, bv));
  auto out = tape.value(y);
  double worst = 0;
  for (int z = 0; z < d; ++z)
    for (int yy = 0; yy < w; ++yy)
      for (int x = 0; x < h; ++x)
        for (int o = 0; o < co; ++o) {
          double acc = bv[o];
          for (int dx = 0; dx < ks; ++dx)
            for (int dy = 0; dy < ks; ++dy)
              for (int dz = 0; dz < ks; ++dz) {
                const int sx = x + dx - 1, sy = yy + dy - 1, sz = z + dz - 1;
                if (sx < 0 || sy < 0 || sz < 0 || sx >= h || sy >= w || sz >= d) continue;
                for (int c = 0; c < ci; ++c)
                  acc += xv[((sz * w + sy) * h + sx) * ci + c] *
                         kv[(((dx * ks + dy) * ks + dz) * ci + c) * co + o];
              }
          worst = std::max(worst, std::abs(acc - out[((z * w + yy) * h + x) * co + o]));
        }
  CHECK(worst < 1e-12);
}

TEST_CASE("conv3d gradients, stride 1 and 2") {
  for (int seed = 0; seed < kSeeds; ++seed) {
    std::mt19937_64 rng(100 + seed);
    std::vector<ParamInit> params = {
        {{6, 6, 4, 2}, uniform_values(rng, 6 * 6 * 4 * 2)},
        {{3, 3, 3, 2, 3}, uniform_values(rng, 27 * 6)},
        {{3}, uniform_values(rng, 3)},
    };
    require_ok(grad_check(
        [seed](auto& tape, const std::vector<ad::NodeId>& p) {
          return random_projection(tape, ad::conv3d(tape, p[0], p[1], p[2]), seed);
        },
        params));

    std::vector<ParamInit> strided = {
        {{6, 4, 4, 2}, uniform_values(rng, 6 * 4 * 4 * 2)},
        {{2, 2, 2, 2, 2}, uniform_values(rng, 8 * 4)},
        {{2}, uniform_values(rng, 2)},
    };
    require_ok(grad_check(
        [seed](auto& tape, const std::vector<ad::NodeId>& p) {
          auto y = ad::conv3d(tape, p[0], p[1], p[2], {2, ad::Padding::Same});
          return random_projection(tape, y, seed);
        },
        strided));
  }
}

TEST_CASE("maxpool3d values and tie rule") {
  ad::Tape<double> tape;
  std::vector<double> block(8);
  std::iota(block.begin(), block.end(), 0.0);
  auto x = tape.parameter({2, 2, 2, 1}, block);
  auto y = ad::maxpool3d(tape, x);
  CHECK(tape.value(y)[0] == 7.0);

  auto c = tape.parameter({4, 4, 2, 1}, std::vector<double>(32, 3.0));
  auto yc = ad::maxpool3d(tape, c);
  CHECK(tape.shape(yc) == ad::Shape{2, 2, 1, 1});
  auto g = ad::backward(tape, ad::sum(tape, yc));
  auto gc = g[c];
  for (int z = 0; z < 2; ++z)
    for (int yy = 0; yy < 4; ++yy)
      for (int xx = 0; xx < 4; ++xx) {
        const bool first = xx % 2 == 0 && yy % 2 == 0 && z % 2 == 0;
        CHECK(gc[(z * 4 + yy) * 4 + xx] == (first ? 1.0 : 0.0));
      }

  auto odd = tape.input({3, 2, 2, 1}, std::vector<double>(12, 0.0));
  CHECK_THROWS_AS(ad::maxpool3d(tape, odd), ShapeError);
}

TEST_CASE("maxpool3d gradients") {
  for (int seed = 0; seed < kSeeds; ++seed) {
    std::mt19937_64 rng(200 + seed);
    require_ok(grad_check(
        [seed](auto& tape, const std::vector<ad::NodeId>& p) {
          return random_projection(tape, ad::maxpool3d(tape, p[0]), seed);
        },
        {{{4, 4, 4, 2}, separated(rng, 128)}}));
  }
}

TEST_CASE("upsample_trilinear values") {
  ad::Tape<double> tape;
  auto ramp = tape.input({2, 1, 1, 1}, {0.0, 1.0});
  auto up = tape.value(ad::upsample_trilinear(tape, ramp));
  REQUIRE(up.size() == 16);
  // Doubled along every axis; the first x-row carries the ramp.
  CHECK(up[0] == doctest::Approx(0.0));
  CHECK(up[1] == doctest::Approx(0.25));
  CHECK(up[2] == doctest::Approx(0.75));
  CHECK(up[3] == doctest::Approx(1.0));

  auto c = tape.input({3, 2, 1, 2}, std::vector<double>(12, 2.5));
  auto uc = ad::upsample_trilinear(tape, c);
  CHECK(tape.shape(uc) == ad::Shape{6, 4, 2, 2});
  for (double v : tape.value(uc)) CHECK(v == 2.5);
}

TEST_CASE("upsample_trilinear gradients") {
  for (int seed = 0; seed < kSeeds; ++seed) {
    std::mt19937_64 rng(300 + seed);
    require_ok(grad_check(
        [seed](auto& tape, const std::vector<ad::NodeId>& p) {
          return random_projection(tape, ad::upsample_trilinear(tape, p[0]), seed);
        },
        {{{3, 3, 2, 1}, uniform_values(rng, 18)}}));
  }
}

TEST_CASE("group_norm values") {
  ad::Tape<double> tape;
  auto x = tape.input({2, 2, 2, 4}, std::vector<double>(32, 1.7));
  auto gamma = tape.parameter({4}, std::vector<double>(4, 1.0));
  auto beta = tape.parameter({4}, std::vector<double>(4, 0.0));
  for (double v : tape.value(ad::group_norm(tape, x, gamma, beta, 2))) CHECK(v == 0.0);

  std::mt19937_64 rng(5);
  auto xr = tape.input({2, 2, 2, 4}, uniform_values(rng, 32));
  auto g0 = tape.parameter({4}, std::vector<double>(4, 0.0));
  auto b1 = tape.parameter({4}, {0.5, -1.0, 2.0, 3.0});
  auto y = tape.value(ad::group_norm(tape, xr, g0, b1, 2));
  for (std::size_t i = 0; i < y.size(); ++i) CHECK(y[i] == tape.value(b1)[i % 4]);

  CHECK(ad::default_groups(64) == 8);
  CHECK(ad::default_groups(4) == 4);
  CHECK(ad::default_groups(12) == 4);
  CHECK_THROWS_AS(ad::group_norm(tape, xr, gamma, beta, 3), ConfigError);
}

TEST_CASE("group_norm gradients") {
  for (int seed = 0; seed < kSeeds; ++seed) {
    std::mt19937_64 rng(400 + seed);
    require_ok(grad_check(
        [seed](auto& tape, const std::vector<ad::NodeId>& p) {
          return random_projection(tape, ad::group_norm(tape, p[0], p[1], p[2], 2), seed);
        },
        {{{4, 4, 2, 4}, uniform_values(rng, 128)},
         {{4}, uniform_values(rng, 4, 0.5, 1.5)},
         {{4}, uniform_values(rng, 4)}}));
  }
}

TEST_CASE("activations") {
  ad::Tape<double> tape;
  auto x = tape.parameter({3}, {-1.0, 0.5, 0.0});
  auto r = tape.value(ad::relu(tape, x));
  CHECK(r[0] == 0.0);
  CHECK(r[1] == 0.5);
  auto gr = ad::backward(tape, ad::sum(tape, ad::relu(tape, x)));
  CHECK(gr[x][2] == 0.0);

  ad::Tape<double> t2;
  auto z = t2.parameter({1}, {0.0});
  auto s = ad::sigmoid(t2, z);
  CHECK(t2.value(s)[0] == 0.5);
  CHECK(ad::backward(t2, ad::sum(t2, s))[z][0] == doctest::Approx(0.25).epsilon(1e-15));

  std::mt19937_64 rng(9);
  auto v = uniform_values(rng, 50, -8, 8);
  std::vector<double> neg(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) neg[i] = -v[i];
  ad::Tape<double> t3;
  auto a = t3.value(ad::sigmoid(t3, t3.input({50}, v)));
  auto b = t3.value(ad::sigmoid(t3, t3.input({50}, neg)));
  for (std::size_t i = 0; i < v.size(); ++i) CHECK(a[i] + b[i] == doctest::Approx(1.0));

  for (int seed = 0; seed < kSeeds; ++seed) {
    std::mt19937_64 g(500 + seed);
    auto init = away_from_zero(g, 2 * 3 * 2 * 2);
    require_ok(grad_check(
        [seed](auto& tape, const std::vector<ad::NodeId>& p) {
          return random_projection(tape, ad::relu(tape, p[0]), seed);
        },
        {{{2, 3, 2, 2}, init}}));
    require_ok(grad_check(
        [seed](auto& tape, const std::vector<ad::NodeId>& p) {
          return random_projection(tape, ad::sigmoid(tape, p[0]), seed);
        },
        {{{2, 3, 2, 2}, uniform_values(g, 24, -3, 3)}}));
  }
}

TEST_CASE("combine values and shapes") {
  ad::Tape<double> tape;
  std::mt19937_64 rng(11);
  auto xv = uniform_values(rng, 2 * 2 * 2 * 3);
  auto x = tape.input({2, 2, 2, 3}, xv);
  auto ones = tape.input({2, 2, 2, 1}, std::vector<double>(8, 1.0));
  auto m = tape.value(ad::multiply(tape, x, ones));
  for (std::size_t i = 0; i < xv.size(); ++i) CHECK(m[i] == xv[i]);

  auto five = tape.input({2, 2, 2, 5}, std::vector<double>(40, 0.0));
  CHECK(tape.shape(ad::concat_channels(tape, x, five)) == ad::Shape{2, 2, 2, 8});
  CHECK_THROWS_AS(ad::add(tape, x, five), ShapeError);
  auto other = tape.input({2, 2, 1, 3}, std::vector<double>(12, 0.0));
  CHECK_THROWS_AS(ad::concat_channels(tape, x, other), ShapeError);
}

TEST_CASE("combine gradients") {
  for (int seed = 0; seed < kSeeds; ++seed) {
    std::mt19937_64 rng(600 + seed);
    const int c = 1 + seed % 4;
    std::vector<ParamInit> params = {{{3, 2, 2, c}, uniform_values(rng, 12 * c)},
                                     {{3, 2, 2, 1}, uniform_values(rng, 12)}};
    require_ok(grad_check(
        [seed](auto& tape, const std::vector<ad::NodeId>& p) {
          return random_projection(tape, ad::multiply(tape, p[0], p[1]), seed);
        },
        params));
    require_ok(grad_check(
        [seed](auto& tape, const std::vector<ad::NodeId>& p) {
          return random_projection(tape, ad::multiply(tape, p[1], p[0]), seed);
        },
        params));
    require_ok(grad_check(
        [seed](auto& tape, const std::vector<ad::NodeId>& p) {
          return random_projection(tape, ad::concat_channels(tape, p[0], p[1]), seed);
        },
        params));
    std::vector<ParamInit> same = {{{3, 2, 2, c}, uniform_values(rng, 12 * c)},
                                   {{3, 2, 2, c}, uniform_values(rng, 12 * c)}};
    require_ok(grad_check(
        [seed](auto& tape, const std::vector<ad::NodeId>& p) {
          return random_projection(tape, ad::add(tape, p[0], p[1]), seed);
        },
        same));
  }
}

TEST_CASE("backward basics") {
  ad::Tape<double> tape;
  std::mt19937_64 rng(13);
  auto xv = uniform_values(rng, 10);
  auto x = tape.parameter({10}, xv);
  auto g = ad::backward(tape, ad::sum(tape, x));
  for (double v : g[x]) CHECK(v == 1.0);

  auto half_sq = ad::scale(tape, ad::sum(tape, ad::multiply(tape, x, x)), 0.5);
  auto g2 = ad::backward(tape, half_sq);
  for (std::size_t i = 0; i < xv.size(); ++i) CHECK(g2[x][i] == doctest::Approx(xv[i]));

  CHECK_THROWS_AS(ad::backward(tape, x), ContractError);

  // A parameter that does not reach the seed still gets a zero gradient.
  auto unused = tape.parameter({2}, {1.0, 2.0});
  auto g3 = ad::backward(tape, ad::sum(tape, x));
  REQUIRE(g3.contains(unused));
  CHECK(g3[unused][0] == 0.0);
}

TEST_CASE("forward and backward are deterministic") {
  auto run = [] {
    std::mt19937_64 rng(21);
    ad::Tape<float> tape;
    auto x = tape.input({6, 6, 4, 2}, petsynth::testing::cast_values<float>(uniform_values(rng, 288)));
    auto k = tape.parameter({3, 3, 3, 2, 4},
                            petsynth::testing::cast_values<float>(uniform_values(rng, 216)));
    auto b = tape.parameter({4}, std::vector<float>(4, 0.1f));
    auto y = ad::relu(tape, ad::conv3d(tape, x, k, b));
    auto g = ad::backward(tape, ad::sum(tape, ad::maxpool3d(tape, y)));
    return std::vector<float>(g[k].begin(), g[k].end());
  };
  CHECK(run() == run());
}
