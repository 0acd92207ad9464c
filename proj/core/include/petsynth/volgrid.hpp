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

// Volume data model shared by every other module: a 3D grid with channels,
// stored channel-last with x varying fastest.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace petsynth {

struct Dims {
  int h = 0;  // x extent (axis 0, left-right)
  int w = 0;  // y extent (axis 1, anterior-posterior)
  int d = 0;  // z extent (axis 2, inferior-superior)

  std::size_t voxels() const {
    return static_cast<std::size_t>(h) * static_cast<std::size_t>(w) *
           static_cast<std::size_t>(d);
  }
  bool positive() const { return h > 0 && w > 0 && d > 0; }
  friend bool operator==(const Dims&, const Dims&) = default;
};

std::string to_string(const Dims& dims);

enum class ChannelRole : std::uint8_t {
  T1w,
  T2FLAIR,
  SD_ASL_PW,
  MD_ASL_PW,
  PD,
  ATT,
  SD_CBF,
  MD_CBF,
  PET_CBF,
  Unlabeled,
};

inline constexpr std::array<ChannelRole, 8> kCanonicalInputs = {
    ChannelRole::T1w,    ChannelRole::T2FLAIR, ChannelRole::SD_ASL_PW,
    ChannelRole::MD_ASL_PW, ChannelRole::PD,   ChannelRole::ATT,
    ChannelRole::SD_CBF, ChannelRole::MD_CBF};

std::string_view role_name(ChannelRole role);
/// Throws ConfigError for an unknown name.
ChannelRole parse_role(std::string_view name);
/// Position in the canonical 8-channel input order, or nullopt for PET_CBF
/// and unlabeled channels.
std::optional<int> canonical_index(ChannelRole role);
bool is_intensity(ChannelRole role);
bool is_cbf(ChannelRole role);

enum class VoxelUnit : std::uint8_t {
  Dimensionless,
  MlPer100gPerMin,
  Milliseconds,
};

/// Physical unit a channel of this role carries before normalization.
VoxelUnit native_unit(ChannelRole role);

/// Immutable 4D volume. Construction validates the size and finiteness
/// invariants, so any Volume in hand is well formed.
class Volume {
 public:
  Volume() = default;
  Volume(Dims dims, std::vector<ChannelRole> roles, std::vector<float> data);
  Volume(Dims dims, std::vector<ChannelRole> roles, std::vector<VoxelUnit> units,
         std::vector<float> data);

  static Volume zeros(Dims dims, std::vector<ChannelRole> roles);

  const Dims& dims() const { return dims_; }
  int channels() const { return static_cast<int>(roles_.size()); }
  std::size_t size() const { return data_.size(); }
  std::span<const float> data() const { return data_; }
  const std::vector<ChannelRole>& roles() const { return roles_; }
  const std::vector<VoxelUnit>& units() const { return units_; }

  std::size_t index(int x, int y, int z, int c = 0) const {
    return ((static_cast<std::size_t>(z) * dims_.w + y) * dims_.h + x) *
               roles_.size() +
           c;
  }
  float at(int x, int y, int z, int c = 0) const { return data_[index(x, y, z, c)]; }

  /// Copies one channel out as a single-channel volume.
  Volume channel(int c) const;
  /// Index of the first channel with the given role, if any.
  std::optional<int> find(ChannelRole role) const;

  /// Bitwise comparison of dims, roles, units and payload.
  friend bool operator==(const Volume& a, const Volume& b);

 private:
  Dims dims_{};
  std::vector<ChannelRole> roles_;
  std::vector<VoxelUnit> units_;
  std::vector<float> data_;
};

/// Stacks single- or multi-channel volumes with identical dims along the
/// channel axis.
Volume stack_channels(std::span<const Volume> parts);
/// Keeps the listed channel roles, in the order given.
Volume select_channels(const Volume& v, std::span<const ChannelRole> roles);

/// ASPECTS-style territory labels: 0 background, 1..10 territories.
class TerritoryMask {
 public:
  static constexpr int kTerritories = 10;

  TerritoryMask() = default;
  TerritoryMask(Dims dims, std::vector<std::uint8_t> labels);

  const Dims& dims() const { return dims_; }
  std::span<const std::uint8_t> labels() const { return labels_; }
  std::uint8_t at(int x, int y, int z) const {
    return labels_[(static_cast<std::size_t>(z) * dims_.w + y) * dims_.h + x];
  }
  /// Voxel count per label, index 0 = background.
  std::array<std::size_t, kTerritories + 1> counts() const;
  bool has_all_territories() const;

  friend bool operator==(const TerritoryMask&, const TerritoryMask&) = default;

 private:
  Dims dims_{};
  std::vector<std::uint8_t> labels_;
};

// NVL1: "NVL1", u32 h, u32 w, u32 d, u32 c, 8 reserved zero bytes, then
// h*w*d*c little-endian float32 values. Roles are not stored; callers pass the
// roles they expect, otherwise every channel reads back as Unlabeled.
void write_volume(const Volume& v, const std::filesystem::path& path);
Volume read_volume(const std::filesystem::path& path,
                   std::vector<ChannelRole> roles = {});

// NLB1: "NLB1", u32 h, u32 w, u32 d, then h*w*d label bytes.
void write_labels(const TerritoryMask& mask, const std::filesystem::path& path);
TerritoryMask read_labels(const std::filesystem::path& path);

struct NormalizationScheme {
  float cbf_scale = 150.0f;   // ml/100g/min mapped to 1.0
  float att_scale = 4000.0f;  // ms mapped to 1.0
};

/// Intensity channels are divided by their per-volume maximum (left zero when
/// the maximum is not positive); CBF and ATT channels are divided by the fixed
/// scales. Channels already tagged Dimensionless keep their quantitative
/// scaling, which makes the operation idempotent.
Volume normalize_channels(const Volume& v, const NormalizationScheme& scheme = {});
/// Maps a normalized CBF-role volume back to ml/100g/min.
Volume denormalize_cbf(const Volume& v, const NormalizationScheme& scheme = {});

/// Center-crops axes larger than the target and zero-pads smaller ones
/// symmetrically; odd remainders go to the far side.
Volume crop_or_pad(const Volume& v, Dims target);
TerritoryMask crop_or_pad(const TerritoryMask& m, Dims target);

/// Mirrors the volume along the x (left-right) axis.
Volume flip_x(const Volume& v);

}  // namespace petsynth
