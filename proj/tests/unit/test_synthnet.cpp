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

#include <filesystem>
#include <fstream>
#include <random>

#include "gradcheck.hpp"
#include "petsynth/error.hpp"
#include "petsynth/objective.hpp"
#include "petsynth/synthnet.hpp"

using namespace petsynth;
using petsynth::testing::cast_values;
using petsynth::testing::uniform_values;
namespace fs = std::filesystem;

namespace {

Volume random_input(std::mt19937_64& rng, Dims dims, const std::vector<ChannelRole>& roles) {
  std::uniform_real_distribution<float> dist(0.0f, 1.0f);
  std::vector<float> data(dims.voxels() * roles.size());
  for (auto& v : data) v = dist(rng);
  return Volume(dims, roles, std::vector<VoxelUnit>(roles.size(), VoxelUnit::Dimensionless),
                std::move(data));
}

struct GateFixture {
  ad::Tape<double> tape;
  net::AttentionGateNodes nodes;
  ad::NodeId fi, fg;

  GateFixture(std::mt19937_64& rng, int ci, int cg, double psi_scale, bool zero_fi = false) {
    const int inter = std::max(1, ci / 2);
    auto fi_values = uniform_values(rng, 4 * 4 * 2 * static_cast<std::size_t>(ci), -2, 2);
    if (zero_fi) std::fill(fi_values.begin(), fi_values.end(), 0.0);
    fi = tape.input({4, 4, 2, ci}, fi_values);
    fg = tape.input({2, 2, 1, cg}, uniform_values(rng, 4 * static_cast<std::size_t>(cg), -2, 2));
    auto param = [&](ad::Shape s, double lo, double hi) {
      return tape.parameter(s, uniform_values(rng, s.size(), lo, hi));
    };
    nodes.wi_kernel = param({2, 2, 2, ci, inter}, -1, 1);
    nodes.wi_bias = param({inter}, -1, 1);
    nodes.wg_kernel = param({1, 1, 1, cg, inter}, -1, 1);
    nodes.wg_bias = param({inter}, -1, 1);
    nodes.psi_kernel = param({1, 1, 1, inter, 1}, -psi_scale, psi_scale);
    nodes.psi_bias = param({1}, -psi_scale, psi_scale);
    nodes.gn_gamma = param({ci}, 0.5, 1.5);
    nodes.gn_beta = param({ci}, -1, 1);
    nodes.groups = ad::default_groups(ci);
  }
};

}  // namespace

TEST_CASE("desk preset shape contract and non-negativity") {
  const auto cfg = net::NetworkConfig::desk();
  const auto params = net::init_params(cfg, 1);
  std::mt19937_64 rng(2);
  const auto x = random_input(rng, {32, 32, 16}, cfg.input_channels);
  const auto y = net::forward(x, params, cfg);
  CHECK(y.dims() == Dims{32, 32, 16});
  REQUIRE(y.channels() == 1);
  CHECK(y.roles()[0] == ChannelRole::PET_CBF);
  bool nonneg = true;
  for (float v : y.data()) nonneg = nonneg && v >= 0.0f;
  CHECK(nonneg);

  const auto maps = net::attention_maps(x, params, cfg);
  REQUIRE(maps.size() == 3);
  CHECK(maps.front().dims() == Dims{8, 8, 4});
  CHECK(maps.back().dims() == Dims{32, 32, 16});
  for (const auto& m : maps)
    for (float a : m.data()) REQUIRE((a > 0.0f && a < 1.0f));
}

TEST_CASE("zero input gives zero output") {
  const auto cfg = net::NetworkConfig::desk();
  const auto params = net::init_params(cfg, 3);
  const auto x = Volume::zeros({16, 16, 8}, cfg.input_channels);
  const auto y = net::forward(x, params, cfg);
  for (float v : y.data()) REQUIRE(v == 0.0f);
}

TEST_CASE("input validation") {
  const auto cfg = net::NetworkConfig::desk();
  const auto params = net::init_params(cfg, 4);
  CHECK_THROWS_AS(cfg.validate_dims({12, 12, 8}), ShapeError);
  const auto wrong = Volume::zeros({16, 16, 8}, {ChannelRole::T1w, ChannelRole::T2FLAIR});
  CHECK_THROWS_AS(net::forward(wrong, params, cfg), ShapeError);

  auto bad = cfg;
  bad.input_channels = {ChannelRole::T2FLAIR, ChannelRole::T1w};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.kernel = 4;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  auto other = cfg;
  other.widths = {4, 8, 16};
  CHECK_THROWS_AS(net::check_layout(params, other), ConfigError);
}

TEST_CASE("channel subsets build and run") {
  for (auto subset : {net::ChannelSubset::Asl, net::ChannelSubset::Structural}) {
    auto cfg = net::NetworkConfig::desk();
    cfg.input_channels = net::subset_roles(subset);
    cfg.validate();
    const auto params = net::init_params(cfg, 5);
    CHECK(params.at("enc0.conv.w").shape ==
          ad::Shape{5, 5, 5, static_cast<int>(cfg.input_channels.size()), 4});
    std::mt19937_64 rng(6);
    const auto y = net::forward(random_input(rng, {16, 16, 8}, cfg.input_channels), params, cfg);
    CHECK(y.dims() == Dims{16, 16, 8});
  }
  CHECK(net::subset_roles(net::ChannelSubset::Asl).size() == 5);
  CHECK(net::subset_roles(net::ChannelSubset::Structural).size() == 2);
}

TEST_CASE("disabling attention reduces parameters and passes skips through") {
  auto cfg = net::NetworkConfig::desk();
  auto off = cfg;
  off.attention_enabled = false;
  const auto on_params = net::init_params(cfg, 7);
  const auto off_params = net::init_params(off, 7);
  CHECK(off_params.scalar_count() < on_params.scalar_count());
  CHECK_FALSE(off_params.contains("dec0.gate.psi.w"));
  std::mt19937_64 rng(8);
  const auto x = random_input(rng, {16, 16, 8}, cfg.input_channels);
  CHECK(net::attention_maps(x, off_params, off).empty());
  CHECK(net::forward(x, off_params, off).dims() == Dims{16, 16, 8});
}

TEST_CASE("attention gate examples") {
  std::mt19937_64 rng(9);
  {
    GateFixture f(rng, 4, 6, 0.0);
    auto out = net::attention_gate(f.tape, f.fi, f.fg, f.nodes);
    for (double a : f.tape.value(out.alpha)) CHECK(a == 0.5);
    // gated = GN(0.5 * F_i) with the same affine parameters.
    auto half = ad::scale(f.tape, f.fi, 0.5);
    auto ref = ad::group_norm(f.tape, half, f.nodes.gn_gamma, f.nodes.gn_beta, f.nodes.groups);
    auto g = f.tape.value(out.gated);
    auto r = f.tape.value(ref);
    for (std::size_t i = 0; i < g.size(); ++i) CHECK(g[i] == doctest::Approx(r[i]).epsilon(1e-12));
  }
  {
    GateFixture f(rng, 4, 6, 1.0, true);
    auto out = net::attention_gate(f.tape, f.fi, f.fg, f.nodes);
    auto g = f.tape.value(out.gated);
    auto beta = f.tape.value(f.nodes.gn_beta);
    for (std::size_t i = 0; i < g.size(); ++i) CHECK(g[i] == beta[i % 4]);
  }
  {
    GateFixture f(rng, 4, 6, 1.0);
    auto bad_fg = f.tape.input({4, 4, 2, 6}, std::vector<double>(4 * 4 * 2 * 6, 0.0));
    CHECK_THROWS_AS(net::attention_gate(f.tape, f.fi, bad_fg, f.nodes), ShapeError);
  }
}

TEST_CASE("attention coefficients stay inside (0, 1)") {
  std::mt19937_64 rng(10);
  for (int draw = 0; draw < 1000; ++draw) {
    GateFixture f(rng, 2, 3, 3.0);
    f.tape.set_grad_enabled(false);
    auto out = net::attention_gate(f.tape, f.fi, f.fg, f.nodes);
    for (double a : f.tape.value(out.alpha)) REQUIRE((a > 0.0 && a < 1.0));
  }
}

TEST_CASE("init_params") {
  const auto cfg = net::NetworkConfig::desk();
  CHECK(net::init_params(cfg, 11) == net::init_params(cfg, 11));
  CHECK_FALSE(net::init_params(cfg, 11) == net::init_params(cfg, 12));
  const auto p = net::init_params(cfg, 11);
  for (float b : p.at("enc0.conv.b").values) CHECK(b == 0.0f);
  for (float g : p.at("enc0.gn.gamma").values) CHECK(g == 1.0f);

  net::NetworkConfig wide;
  wide.widths = {64, 64};
  const auto big = net::init_params(wide, 13).at("enc1.conv.w");
  REQUIRE(big.values.size() == 125u * 64 * 64);
  double sum = 0, sq = 0;
  for (float v : big.values) {
    sum += v;
    sq += static_cast<double>(v) * v;
  }
  const double n = static_cast<double>(big.values.size());
  const double var = sq / n - (sum / n) * (sum / n);
  const double expected = 2.0 / (125.0 * 64.0);
  CHECK(std::abs(var - expected) < 0.1 * expected);
}

TEST_CASE("head starts alive for every seed") {
  const auto cfg = net::NetworkConfig::desk();
  for (std::uint64_t seed = 0; seed < 64; ++seed) {
    const auto p = net::init_params(cfg, seed);
    bool any_positive = false;
    for (float w : p.at("head.conv.w").values) {
      CHECK(w >= 0.0f);
      any_positive = any_positive || w > 0.0f;
    }
    CHECK(any_positive);
  }
}

TEST_CASE("checkpoint round trip") {
  const auto dir = fs::temp_directory_path() / "petsynth_synthnet_ckpt";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const auto cfg = net::NetworkConfig::desk();
  const auto p = net::init_params(cfg, 14);
  net::save_checkpoint(p, dir / "m.nprm");
  const auto back = net::load_checkpoint(dir / "m.nprm");
  CHECK(back == p);
  net::check_layout(back, cfg);

  {
    std::ofstream out(dir / "bad.nprm", std::ios::binary);
    out << "XPRMxxxx";
  }
  CHECK_THROWS_AS(net::load_checkpoint(dir / "bad.nprm"), FormatError);
  CHECK_THROWS_AS(net::load_checkpoint(dir / "missing.nprm"), IoError);
}

TEST_CASE("full network loss gradient matches finite differences") {
  net::NetworkConfig cfg;
  cfg.widths = {4, 8, 16};
  cfg.validate();
  const auto layout = net::parameter_layout(cfg);
  const auto init = net::init_params(cfg, 15).cast<double>();
  std::mt19937_64 rng(16);
  const Dims dims{12, 12, 8};
  auto x = uniform_values(rng, dims.voxels() * 8, 0, 1);
  auto target = uniform_values(rng, dims.voxels(), 0, 1);

  std::vector<petsynth::testing::ParamInit> params;
  for (const auto& t : init.tensors) {
    auto v = t.values;
    // Non-zero biases and betas so every path carries signal.
    if (t.path.ends_with(".b") || t.path.ends_with(".beta"))
      v = uniform_values(rng, v.size(), -0.1, 0.1);
    params.push_back({t.shape, v});
  }
  auto build = [&](auto& tape, const std::vector<ad::NodeId>& ids) {
    using T = typename std::decay_t<decltype(tape.value(ids[0]))>::value_type;
    std::unordered_map<std::string, ad::NodeId> nodes;
    for (std::size_t i = 0; i < layout.size(); ++i) nodes.emplace(layout[i].path, ids[i]);
    net::BoundParameters<std::remove_const_t<T>> bound(std::move(nodes));
    auto in = tape.input({dims.h, dims.w, dims.d, 8}, cast_values<std::remove_const_t<T>>(x));
    auto out = net::forward_graph(tape, in, bound, cfg).output;
    const auto ref = cast_values<std::remove_const_t<T>>(target);
    return objective::loss_node(tape, out, std::span<const std::remove_const_t<T>>(ref),
                                objective::LossConfig{});
  };
  const auto r = petsynth::testing::grad_check(build, params, 1e-3, 1e-5, 150);
  MESSAGE("full network rel64 = " << r.rel64 << ", rel32 = " << r.rel32);
  CHECK(r.rel64 < 2e-3);
}
