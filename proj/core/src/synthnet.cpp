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

#include "petsynth/synthnet.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include "petsynth/error.hpp"

namespace petsynth::net {

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;

std::string enc(int level, const char* leaf) { return "enc" + std::to_string(level) + "." + leaf; }
std::string dec(int stage, const char* leaf) { return "dec" + std::to_string(stage) + "." + leaf; }

int gate_width(int skip_channels) { return std::max(1, skip_channels / 2); }

template <class T>
void drop(ad::Tape<T>& tape, ad::NodeId id) {
  if (!tape.grad_enabled()) tape.release(id);
}

template <class T>
ad::NodeId conv_gn_relu(ad::Tape<T>& tape, ad::NodeId x, const BoundParameters<T>& p,
                        const std::string& prefix, int groups) {
  const auto conv = ad::conv3d(tape, x, p[prefix + "conv.w"], p[prefix + "conv.b"]);
  const auto gn = ad::group_norm(tape, conv, p[prefix + "gn.gamma"], p[prefix + "gn.beta"], groups);
  drop(tape, conv);
  const auto out = ad::relu(tape, gn);
  drop(tape, gn);
  return out;
}

void put_u32(std::ofstream& out, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
  out.write(b, 4);
}

bool get_u32(std::ifstream& in, std::uint32_t& v) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) return false;
  v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return true;
}

}  // namespace

std::vector<ChannelRole> subset_roles(ChannelSubset subset) {
  switch (subset) {
    case ChannelSubset::All:
      return {kCanonicalInputs.begin(), kCanonicalInputs.end()};
    case ChannelSubset::Asl:
      return {ChannelRole::SD_ASL_PW, ChannelRole::MD_ASL_PW, ChannelRole::ATT,
              ChannelRole::SD_CBF, ChannelRole::MD_CBF};
    case ChannelSubset::Structural:
      return {ChannelRole::T1w, ChannelRole::T2FLAIR};
  }
  throw ConfigError("unknown channel subset");
}

ChannelSubset parse_subset(std::string_view name) {
  if (name == "all") return ChannelSubset::All;
  if (name == "asl") return ChannelSubset::Asl;
  if (name == "structural") return ChannelSubset::Structural;
  throw ConfigError("unknown channel subset '" + std::string(name) + "'");
}

std::string_view subset_name(ChannelSubset subset) {
  switch (subset) {
    case ChannelSubset::All: return "all";
    case ChannelSubset::Asl: return "asl";
    case ChannelSubset::Structural: return "structural";
  }
  return "?";
}

NetworkConfig NetworkConfig::paper() {
  NetworkConfig cfg;
  cfg.widths = {64, 128, 256, 512};
  return cfg;
}

NetworkConfig NetworkConfig::desk() { return NetworkConfig{}; }

int NetworkConfig::groups_for(int channels) const {
  if (groupnorm_groups <= 0) return ad::default_groups(channels);
  if (channels % groupnorm_groups != 0)
    throw ConfigError("groupnorm_groups " + std::to_string(groupnorm_groups) + " does not divide " +
                      std::to_string(channels) + " channels");
  return groupnorm_groups;
}

void NetworkConfig::validate() const {
  if (widths.empty()) throw ConfigError("network needs at least one level");
  for (int w : widths)
    if (w <= 0) throw ConfigError("layer widths must be positive");
  if (kernel <= 0 || kernel % 2 == 0) throw ConfigError("kernel size must be odd and positive");
  if (input_channels.empty()) throw ConfigError("network needs at least one input channel");
  int last = -1;
  for (auto r : input_channels) {
    const auto idx = canonical_index(r);
    if (!idx) throw ConfigError("'" + std::string(role_name(r)) + "' is not an input channel role");
    if (*idx <= last) throw ConfigError("input channels must follow canonical order without repeats");
    last = *idx;
  }
  for (int w : widths) (void)groups_for(w);
}

void NetworkConfig::validate_dims(Dims dims) const {
  const int f = 1 << (levels() - 1);
  if (dims.h % f || dims.w % f || dims.d % f)
    throw ShapeError("input dims " + to_string(dims) + " must be divisible by " + std::to_string(f));
}

template <class T>
const typename BasicParameterSet<T>::Tensor& BasicParameterSet<T>::at(const std::string& path) const {
  for (const auto& t : tensors)
    if (t.path == path) return t;
  throw ConfigError("no parameter tensor '" + path + "'");
}

template <class T>
typename BasicParameterSet<T>::Tensor& BasicParameterSet<T>::at(const std::string& path) {
  for (auto& t : tensors)
    if (t.path == path) return t;
  throw ConfigError("no parameter tensor '" + path + "'");
}

template <class T>
bool BasicParameterSet<T>::contains(const std::string& path) const {
  for (const auto& t : tensors)
    if (t.path == path) return true;
  return false;
}

template <class T>
std::size_t BasicParameterSet<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.values.size();
  return n;
}

template struct BasicParameterSet<float>;
template struct BasicParameterSet<double>;

std::vector<ParamSpec> parameter_layout(const NetworkConfig& cfg) {
  cfg.validate();
  std::vector<ParamSpec> out;
  const int k = cfg.kernel;
  auto conv = [&](const std::string& prefix, int kk, int ci, int co) {
    out.push_back({prefix + ".w", ad::Shape{kk, kk, kk, ci, co}, ParamKind::Kernel, kk * kk * kk * ci});
    out.push_back({prefix + ".b", ad::Shape{co}, ParamKind::Bias, 0});
  };
  auto norm = [&](const std::string& prefix, int c) {
    out.push_back({prefix + ".gamma", ad::Shape{c}, ParamKind::Gamma, 0});
    out.push_back({prefix + ".beta", ad::Shape{c}, ParamKind::Beta, 0});
  };

  int in = static_cast<int>(cfg.input_channels.size());
  for (int l = 0; l < cfg.levels(); ++l) {
    conv(enc(l, "conv"), k, in, cfg.widths[static_cast<std::size_t>(l)]);
    norm(enc(l, "gn"), cfg.widths[static_cast<std::size_t>(l)]);
    in = cfg.widths[static_cast<std::size_t>(l)];
  }
  for (int s = 0; s + 1 < cfg.levels(); ++s) {
    const int level = cfg.levels() - 2 - s;
    const int skip = cfg.widths[static_cast<std::size_t>(level)];
    const int gating = cfg.widths[static_cast<std::size_t>(level + 1)];
    if (cfg.attention_enabled) {
      const int inter = gate_width(skip);
      conv(dec(s, "gate.wi"), 2, skip, inter);
      conv(dec(s, "gate.wg"), 1, gating, inter);
      conv(dec(s, "gate.psi"), 1, inter, 1);
      norm(dec(s, "gate.gn"), skip);
    }
    conv(dec(s, "conv"), k, gating + skip, skip);
    norm(dec(s, "gn"), skip);
  }
  conv("head.conv", 1, cfg.widths.front(), 1);
  return out;
}

ParameterSet init_params(const NetworkConfig& cfg, std::uint64_t seed) {
  ParameterSet params;
  params.init_seed = seed;
  std::mt19937_64 rng(seed);
  for (const auto& spec : parameter_layout(cfg)) {
    std::vector<float> values(spec.shape.size());
    switch (spec.kind) {
      case ParamKind::Kernel: {
        std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / spec.fan_in));
        for (auto& v : values) v = static_cast<float>(dist(rng));
        // A ReLU head fed by non-negative features is dead from the start
        // when every head weight is negative (1 in 2^width at init).
        if (spec.path == "head.conv.w")
          for (auto& v : values) v = std::abs(v);
        break;
      }
      case ParamKind::Gamma:
        std::fill(values.begin(), values.end(), 1.0f);
        break;
      case ParamKind::Bias:
      case ParamKind::Beta:
        std::fill(values.begin(), values.end(), 0.0f);
        break;
    }
    params.tensors.push_back({spec.path, spec.shape, std::move(values)});
  }
  return params;
}

template <class T>
void check_layout(const BasicParameterSet<T>& params, const NetworkConfig& cfg) {
  const auto layout = parameter_layout(cfg);
  if (layout.size() != params.tensors.size())
    throw ConfigError("parameter set has " + std::to_string(params.tensors.size()) +
                      " tensors, configuration needs " + std::to_string(layout.size()));
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const auto& t = params.tensors[i];
    if (t.path != layout[i].path || !(t.shape == layout[i].shape))
      throw ConfigError("parameter '" + t.path + "' " + ad::to_string(t.shape) +
                        " does not match expected '" + layout[i].path + "' " +
                        ad::to_string(layout[i].shape));
  }
}

template void check_layout(const BasicParameterSet<float>&, const NetworkConfig&);
template void check_layout(const BasicParameterSet<double>&, const NetworkConfig&);

void save_checkpoint(const ParameterSet& params, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write("NPRM", 4);
  put_u32(out, kCheckpointVersion);
  for (const auto& t : params.tensors) {
    put_u32(out, static_cast<std::uint32_t>(t.path.size()));
    out.write(t.path.data(), static_cast<std::streamsize>(t.path.size()));
    put_u32(out, static_cast<std::uint32_t>(t.shape.rank));
    for (int i = 0; i < t.shape.rank; ++i) put_u32(out, static_cast<std::uint32_t>(t.shape[i]));
    for (float v : t.values) put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  out.flush();
  if (!out) throw IoError("write failure on " + path.string());
}

ParameterSet load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "NPRM", 4) != 0)
    throw FormatError(path.string() + ": bad checkpoint magic");
  std::uint32_t version = 0;
  if (!get_u32(in, version)) throw FormatError(path.string() + ": truncated header");
  if (version != kCheckpointVersion)
    throw FormatError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  ParameterSet params;
  std::uint32_t len = 0;
  while (get_u32(in, len)) {
    if (len == 0 || len > 4096) throw FormatError(path.string() + ": bad tensor path length");
    std::string name(len, '\0');
    std::uint32_t rank = 0;
    if (!in.read(name.data(), len) || !get_u32(in, rank) || rank > ad::Shape::kMaxRank)
      throw FormatError(path.string() + ": truncated tensor record");
    ad::Shape shape;
    shape.rank = static_cast<int>(rank);
    for (std::uint32_t i = 0; i < rank; ++i) {
      std::uint32_t d = 0;
      if (!get_u32(in, d) || d == 0) throw FormatError(path.string() + ": bad tensor dims");
      shape.dims[i] = static_cast<int>(d);
    }
    std::vector<float> values(shape.size());
    for (auto& v : values) {
      std::uint32_t bits = 0;
      if (!get_u32(in, bits)) throw FormatError(path.string() + ": truncated tensor payload");
      v = std::bit_cast<float>(bits);
      if (!std::isfinite(v)) throw ValidationError(path.string() + ": non-finite parameter in " + name);
    }
    params.tensors.push_back({std::move(name), shape, std::move(values)});
  }
  return params;
}

template <class T>
BoundParameters<T>::BoundParameters(ad::Tape<T>& tape, const BasicParameterSet<T>& params) {
  for (const auto& t : params.tensors) nodes_.emplace(t.path, tape.parameter(t.shape, t.values));
}

template <class T>
ad::NodeId BoundParameters<T>::operator[](const std::string& path) const {
  auto it = nodes_.find(path);
  if (it == nodes_.end()) throw ConfigError("parameter '" + path + "' is not bound");
  return it->second;
}

template class BoundParameters<float>;
template class BoundParameters<double>;

template <class T>
GateOutput attention_gate(ad::Tape<T>& tape, ad::NodeId fi, ad::NodeId fg,
                          const AttentionGateNodes& p) {
  const auto& si = tape.shape(fi);
  const auto& sg = tape.shape(fg);
  if (si.rank != 4 || sg.rank != 4 || si.h() != 2 * sg.h() || si.w() != 2 * sg.w() ||
      si.d() != 2 * sg.d())
    throw ShapeError("attention_gate: gating dims " + ad::to_string(sg) +
                     " must be half of skip dims " + ad::to_string(si));
  const auto theta = ad::conv3d(tape, fi, p.wi_kernel, p.wi_bias, {2, ad::Padding::Same});
  const auto phi = ad::conv3d(tape, fg, p.wg_kernel, p.wg_bias);
  const auto joint = ad::add(tape, theta, phi);
  drop(tape, theta);
  drop(tape, phi);
  const auto act = ad::relu(tape, joint);
  drop(tape, joint);
  const auto psi = ad::conv3d(tape, act, p.psi_kernel, p.psi_bias);
  drop(tape, act);
  const auto coarse = ad::sigmoid(tape, psi);
  drop(tape, psi);
  const auto alpha = ad::upsample_trilinear(tape, coarse);
  drop(tape, coarse);
  const auto scaled = ad::multiply(tape, fi, alpha);
  const auto gated = ad::group_norm(tape, scaled, p.gn_gamma, p.gn_beta, p.groups);
  drop(tape, scaled);
  return {gated, alpha};
}

template GateOutput attention_gate(ad::Tape<float>&, ad::NodeId, ad::NodeId, const AttentionGateNodes&);
template GateOutput attention_gate(ad::Tape<double>&, ad::NodeId, ad::NodeId, const AttentionGateNodes&);

template <class T>
GraphOutput forward_graph(ad::Tape<T>& tape, ad::NodeId input, const BoundParameters<T>& p,
                          const NetworkConfig& cfg) {
  cfg.validate();
  const auto& s = tape.shape(input);
  if (s.rank != 4 || s.c() != static_cast<int>(cfg.input_channels.size()))
    throw ShapeError("network expects " + std::to_string(cfg.input_channels.size()) +
                     " input channels, got shape " + ad::to_string(s));
  cfg.validate_dims(Dims{s.h(), s.w(), s.d()});

  GraphOutput result;
  std::vector<ad::NodeId> skips;
  ad::NodeId x = input;
  for (int l = 0; l < cfg.levels(); ++l) {
    const int width = cfg.widths[static_cast<std::size_t>(l)];
    const auto feat = conv_gn_relu(tape, x, p, enc(l, ""), cfg.groups_for(width));
    if (x != input) drop(tape, x);
    skips.push_back(feat);
    x = l + 1 < cfg.levels() ? ad::maxpool3d(tape, feat) : feat;
  }

  ad::NodeId g = skips.back();
  for (int s_idx = 0; s_idx + 1 < cfg.levels(); ++s_idx) {
    const int level = cfg.levels() - 2 - s_idx;
    const int skip_width = cfg.widths[static_cast<std::size_t>(level)];
    const ad::NodeId fi = skips[static_cast<std::size_t>(level)];
    const auto up = ad::upsample_trilinear(tape, g);
    ad::NodeId skip = fi;
    if (cfg.attention_enabled) {
      AttentionGateNodes gp{p[dec(s_idx, "gate.wi.w")],   p[dec(s_idx, "gate.wi.b")],
                            p[dec(s_idx, "gate.wg.w")],   p[dec(s_idx, "gate.wg.b")],
                            p[dec(s_idx, "gate.psi.w")],  p[dec(s_idx, "gate.psi.b")],
                            p[dec(s_idx, "gate.gn.gamma")], p[dec(s_idx, "gate.gn.beta")],
                            cfg.groups_for(skip_width)};
      const auto gate = attention_gate(tape, fi, g, gp);
      skip = gate.gated;
      result.attention.push_back(gate.alpha);
      drop(tape, fi);
    }
    drop(tape, g);
    const auto cat = ad::concat_channels(tape, up, skip);
    drop(tape, up);
    drop(tape, skip);
    g = conv_gn_relu(tape, cat, p, dec(s_idx, ""), cfg.groups_for(skip_width));
    drop(tape, cat);
  }

  const auto head = ad::conv3d(tape, g, p["head.conv.w"], p["head.conv.b"]);
  drop(tape, g);
  result.output = ad::relu(tape, head);
  drop(tape, head);
  return result;
}

template GraphOutput forward_graph(ad::Tape<float>&, ad::NodeId, const BoundParameters<float>&,
                                   const NetworkConfig&);
template GraphOutput forward_graph(ad::Tape<double>&, ad::NodeId, const BoundParameters<double>&,
                                   const NetworkConfig&);

namespace {

ad::NodeId input_node(ad::Tape<float>& tape, const Volume& x, const NetworkConfig& cfg) {
  if (x.roles() != cfg.input_channels)
    throw ShapeError("input volume channels do not match the network's input channels");
  const Dims d = x.dims();
  return tape.input(ad::Shape::volume(d.h, d.w, d.d, x.channels()),
                    std::vector<float>(x.data().begin(), x.data().end()));
}

Volume node_volume(const ad::Tape<float>& tape, ad::NodeId id, ChannelRole role) {
  const auto& s = tape.shape(id);
  const auto v = tape.value(id);
  return Volume(Dims{s.h(), s.w(), s.d()}, {role}, {VoxelUnit::Dimensionless},
                std::vector<float>(v.begin(), v.end()));
}

}  // namespace

Volume forward(const Volume& x, const ParameterSet& params, const NetworkConfig& cfg) {
  check_layout(params, cfg);
  ad::Tape<float> tape;
  tape.set_grad_enabled(false);
  const auto in = input_node(tape, x, cfg);
  const BoundParameters<float> bound(tape, params);
  const auto out = forward_graph(tape, in, bound, cfg);
  return node_volume(tape, out.output, ChannelRole::PET_CBF);
}

std::vector<Volume> attention_maps(const Volume& x, const ParameterSet& params,
                                   const NetworkConfig& cfg) {
  check_layout(params, cfg);
  ad::Tape<float> tape;
  const auto in = input_node(tape, x, cfg);
  const BoundParameters<float> bound(tape, params);
  const auto out = forward_graph(tape, in, bound, cfg);
  std::vector<Volume> maps;
  for (auto id : out.attention) maps.push_back(node_volume(tape, id, ChannelRole::Unlabeled));
  return maps;
}

}  // namespace petsynth::net
