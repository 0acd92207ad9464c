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

#pragma once

// Attention-gated 3D encoder-decoder that maps multi-contrast MRI channels to
// a single PET CBF channel.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "petsynth/ad/ops.hpp"
#include "petsynth/volgrid.hpp"

namespace petsynth::net {

enum class ChannelSubset : std::uint8_t { All, Asl, Structural };

/// Roles of a subset, in canonical input order.
std::vector<ChannelRole> subset_roles(ChannelSubset subset);
ChannelSubset parse_subset(std::string_view name);
std::string_view subset_name(ChannelSubset subset);

struct NetworkConfig {
  std::vector<int> widths = {4, 8, 16, 32};
  int kernel = 5;
  bool attention_enabled = true;
  std::vector<ChannelRole> input_channels = {kCanonicalInputs.begin(), kCanonicalInputs.end()};
  /// 0 selects default_groups(c) per layer.
  int groupnorm_groups = 0;

  static NetworkConfig paper();  // widths 64..512
  static NetworkConfig desk();   // widths 4..32

  int levels() const { return static_cast<int>(widths.size()); }
  int groups_for(int channels) const;
  /// Throws ConfigError on an inconsistent configuration.
  void validate() const;
  /// Throws ShapeError unless every spatial dim is divisible by 2^(levels-1).
  void validate_dims(Dims dims) const;
};

/// Learnable tensors keyed by layer path, kept in creation order.
template <class T>
struct BasicParameterSet {
  struct Tensor {
    std::string path;
    ad::Shape shape;
    std::vector<T> values;
  };

  std::vector<Tensor> tensors;
  std::uint64_t init_seed = 0;

  const Tensor& at(const std::string& path) const;
  Tensor& at(const std::string& path);
  bool contains(const std::string& path) const;
  std::size_t scalar_count() const;

  template <class U>
  BasicParameterSet<U> cast() const {
    BasicParameterSet<U> out;
    out.init_seed = init_seed;
    out.tensors.reserve(tensors.size());
    for (const auto& t : tensors)
      out.tensors.push_back({t.path, t.shape, std::vector<U>(t.values.begin(), t.values.end())});
    return out;
  }

  friend bool operator==(const BasicParameterSet& a, const BasicParameterSet& b) {
    if (a.tensors.size() != b.tensors.size()) return false;
    for (std::size_t i = 0; i < a.tensors.size(); ++i) {
      const auto& x = a.tensors[i];
      const auto& y = b.tensors[i];
      if (x.path != y.path || !(x.shape == y.shape) || x.values != y.values) return false;
    }
    return true;
  }
};

using ParameterSet = BasicParameterSet<float>;

enum class ParamKind : std::uint8_t { Kernel, Bias, Gamma, Beta };

struct ParamSpec {
  std::string path;
  ad::Shape shape;
  ParamKind kind;
  int fan_in = 0;  // kernels only
};

/// Every tensor the configuration needs, in a fixed order.
std::vector<ParamSpec> parameter_layout(const NetworkConfig& cfg);

/// He-normal kernels (std = sqrt(2 / fan_in)), zero biases and betas, unit
/// gammas. Deterministic per seed.
ParameterSet init_params(const NetworkConfig& cfg, std::uint64_t seed);

/// Throws ConfigError if the set does not match the configuration's layout.
template <class T>
void check_layout(const BasicParameterSet<T>& params, const NetworkConfig& cfg);

// NPRM checkpoint: "NPRM", u32 version, then per tensor: u32 path length,
// path bytes, u32 rank, rank x u32 dims, float32 little-endian payload.
void save_checkpoint(const ParameterSet& params, const std::filesystem::path& path);
ParameterSet load_checkpoint(const std::filesystem::path& path);

/// Parameter tensors placed on a tape, addressable by path.
template <class T>
class BoundParameters {
 public:
  BoundParameters(ad::Tape<T>& tape, const BasicParameterSet<T>& params);
  /// Adopts nodes that are already on a tape.
  explicit BoundParameters(std::unordered_map<std::string, ad::NodeId> nodes)
      : nodes_(std::move(nodes)) {}
  ad::NodeId operator[](const std::string& path) const;
  const std::unordered_map<std::string, ad::NodeId>& nodes() const { return nodes_; }

 private:
  std::unordered_map<std::string, ad::NodeId> nodes_;
};

struct AttentionGateNodes {
  ad::NodeId wi_kernel, wi_bias;    // strided 2x2x2, C_i -> C_int
  ad::NodeId wg_kernel, wg_bias;    // 1x1x1, C_g -> C_int
  ad::NodeId psi_kernel, psi_bias;  // 1x1x1, C_int -> 1
  ad::NodeId gn_gamma, gn_beta;     // on the gated output
  int groups = 1;
};

struct GateOutput {
  ad::NodeId gated;
  ad::NodeId alpha;  // (h, w, d, 1), strictly inside (0, 1)
};

/// Additive soft attention. fi is the encoder skip, fg the gating signal at
/// half its resolution.
template <class T>
GateOutput attention_gate(ad::Tape<T>& tape, ad::NodeId fi, ad::NodeId fg,
                          const AttentionGateNodes& p);

struct GraphOutput {
  ad::NodeId output;
  std::vector<ad::NodeId> attention;  // coarsest stage first; empty when disabled
};

/// Records the whole network on a tape. The input node must carry
/// cfg.input_channels in canonical order. With gradients disabled, interior
/// activations are released as soon as they are consumed.
template <class T>
GraphOutput forward_graph(ad::Tape<T>& tape, ad::NodeId input, const BoundParameters<T>& params,
                          const NetworkConfig& cfg);

/// Inference on a normalized input volume; returns a normalized PET_CBF volume.
Volume forward(const Volume& x, const ParameterSet& params, const NetworkConfig& cfg);

/// Attention maps of one inference pass, coarsest stage first.
std::vector<Volume> attention_maps(const Volume& x, const ParameterSet& params,
                                   const NetworkConfig& cfg);

}  // namespace petsynth::net
