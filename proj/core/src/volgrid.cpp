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

#include "petsynth/volgrid.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "petsynth/error.hpp"

namespace petsynth {

namespace {

constexpr std::array<std::string_view, 10> kRoleNames = {
    "T1w",    "T2FLAIR", "SD_ASL_PW", "MD_ASL_PW", "PD",
    "ATT",    "SD_CBF",  "MD_CBF",    "PET_CBF",   "Unlabeled"};

void put_u32(std::vector<char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

std::uint32_t get_u32(const char* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

void put_f32(char* out, float f) {
  const auto bits = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) out[i] = static_cast<char>((bits >> (8 * i)) & 0xffu);
}

float get_f32(const char* p) { return std::bit_cast<float>(get_u32(p)); }

std::vector<char> slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failure on " + path.string());
  return bytes;
}

void dump(const std::filesystem::path& path, const std::vector<char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.flush();
  if (!out) throw IoError("write failure on " + path.string());
}

std::vector<VoxelUnit> native_units(const std::vector<ChannelRole>& roles) {
  std::vector<VoxelUnit> units;
  units.reserve(roles.size());
  for (auto r : roles) units.push_back(native_unit(r));
  return units;
}

// Per-axis mapping used by crop_or_pad: output index o reads input index
// o + shift when it falls inside the input.
int axis_shift(int in, int target) {
  return in >= target ? (in - target) / 2 : -((target - in) / 2);
}

}  // namespace

std::string to_string(const Dims& dims) {
  std::ostringstream s;
  s << dims.h << "x" << dims.w << "x" << dims.d;
  return s.str();
}

std::string_view role_name(ChannelRole role) {
  return kRoleNames[static_cast<std::size_t>(role)];
}

ChannelRole parse_role(std::string_view name) {
  for (std::size_t i = 0; i < kRoleNames.size(); ++i)
    if (kRoleNames[i] == name) return static_cast<ChannelRole>(i);
  throw ConfigError("unknown channel role '" + std::string(name) + "'");
}

std::optional<int> canonical_index(ChannelRole role) {
  for (std::size_t i = 0; i < kCanonicalInputs.size(); ++i)
    if (kCanonicalInputs[i] == role) return static_cast<int>(i);
  return std::nullopt;
}

bool is_intensity(ChannelRole role) {
  switch (role) {
    case ChannelRole::T1w:
    case ChannelRole::T2FLAIR:
    case ChannelRole::SD_ASL_PW:
    case ChannelRole::MD_ASL_PW:
    case ChannelRole::PD:
      return true;
    default:
      return false;
  }
}

bool is_cbf(ChannelRole role) {
  return role == ChannelRole::SD_CBF || role == ChannelRole::MD_CBF ||
         role == ChannelRole::PET_CBF;
}

VoxelUnit native_unit(ChannelRole role) {
  if (is_cbf(role)) return VoxelUnit::MlPer100gPerMin;
  if (role == ChannelRole::ATT) return VoxelUnit::Milliseconds;
  return VoxelUnit::Dimensionless;
}

Volume::Volume(Dims dims, std::vector<ChannelRole> roles, std::vector<float> data)
    : Volume(dims, roles, native_units(roles), std::move(data)) {}

Volume::Volume(Dims dims, std::vector<ChannelRole> roles, std::vector<VoxelUnit> units,
               std::vector<float> data)
    : dims_(dims), roles_(std::move(roles)), units_(std::move(units)), data_(std::move(data)) {
  if (!dims_.positive()) throw ShapeError("volume dims must be positive, got " + to_string(dims_));
  if (roles_.empty()) throw ShapeError("volume needs at least one channel");
  if (units_.size() != roles_.size()) throw ShapeError("one unit tag per channel required");
  if (data_.size() != dims_.voxels() * roles_.size())
    throw ShapeError("volume payload has " + std::to_string(data_.size()) + " values, expected " +
                     std::to_string(dims_.voxels() * roles_.size()));
  const std::size_t c = roles_.size();
  for (std::size_t i = 0; i < data_.size(); ++i) {
    if (!std::isfinite(data_[i]))
      throw ValidationError("non-finite value at flat index " + std::to_string(i));
    if (is_cbf(roles_[i % c]) && data_[i] < 0.0f)
      throw ValidationError("negative value in CBF channel at flat index " + std::to_string(i));
  }
}

Volume Volume::zeros(Dims dims, std::vector<ChannelRole> roles) {
  std::vector<float> data(dims.voxels() * roles.size(), 0.0f);
  return Volume(dims, std::move(roles), std::move(data));
}

Volume Volume::channel(int c) const {
  if (c < 0 || c >= channels()) throw ShapeError("channel index out of range");
  std::vector<float> out(dims_.voxels());
  const std::size_t stride = roles_.size();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = data_[i * stride + c];
  return Volume(dims_, {roles_[c]}, {units_[c]}, std::move(out));
}

std::optional<int> Volume::find(ChannelRole role) const {
  for (std::size_t i = 0; i < roles_.size(); ++i)
    if (roles_[i] == role) return static_cast<int>(i);
  return std::nullopt;
}

bool operator==(const Volume& a, const Volume& b) {
  return a.dims_ == b.dims_ && a.roles_ == b.roles_ && a.units_ == b.units_ &&
         a.data_.size() == b.data_.size() &&
         std::memcmp(a.data_.data(), b.data_.data(), a.data_.size() * sizeof(float)) == 0;
}

Volume stack_channels(std::span<const Volume> parts) {
  if (parts.empty()) throw ShapeError("stack_channels needs at least one volume");
  const Dims dims = parts.front().dims();
  std::vector<ChannelRole> roles;
  std::vector<VoxelUnit> units;
  for (const auto& p : parts) {
    if (!(p.dims() == dims)) throw ShapeError("stack_channels: dims differ");
    roles.insert(roles.end(), p.roles().begin(), p.roles().end());
    units.insert(units.end(), p.units().begin(), p.units().end());
  }
  const std::size_t c = roles.size();
  std::vector<float> data(dims.voxels() * c);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t pc = static_cast<std::size_t>(p.channels());
    auto src = p.data();
    for (std::size_t v = 0; v < dims.voxels(); ++v)
      for (std::size_t k = 0; k < pc; ++k) data[v * c + offset + k] = src[v * pc + k];
    offset += pc;
  }
  return Volume(dims, std::move(roles), std::move(units), std::move(data));
}

Volume select_channels(const Volume& v, std::span<const ChannelRole> roles) {
  std::vector<Volume> parts;
  parts.reserve(roles.size());
  for (auto r : roles) {
    auto idx = v.find(r);
    if (!idx) throw ShapeError("volume has no " + std::string(role_name(r)) + " channel");
    parts.push_back(v.channel(*idx));
  }
  return stack_channels(parts);
}

TerritoryMask::TerritoryMask(Dims dims, std::vector<std::uint8_t> labels)
    : dims_(dims), labels_(std::move(labels)) {
  if (!dims_.positive()) throw ShapeError("mask dims must be positive");
  if (labels_.size() != dims_.voxels()) throw ShapeError("mask payload size mismatch");
  for (auto l : labels_)
    if (l > kTerritories) throw ValidationError("territory label out of range: " + std::to_string(l));
}

std::array<std::size_t, TerritoryMask::kTerritories + 1> TerritoryMask::counts() const {
  std::array<std::size_t, kTerritories + 1> n{};
  for (auto l : labels_) ++n[l];
  return n;
}

bool TerritoryMask::has_all_territories() const {
  auto n = counts();
  return std::all_of(n.begin() + 1, n.end(), [](std::size_t k) { return k > 0; });
}

// Magic, four dims, eight reserved bytes.
constexpr std::size_t kNvlHeader = 28;

void write_volume(const Volume& v, const std::filesystem::path& path) {
  for (float f : v.data())
    if (!std::isfinite(f)) throw ValidationError("refusing to write non-finite volume");
  std::vector<char> bytes;
  bytes.reserve(kNvlHeader + v.size() * 4);
  bytes.insert(bytes.end(), {'N', 'V', 'L', '1'});
  put_u32(bytes, static_cast<std::uint32_t>(v.dims().h));
  put_u32(bytes, static_cast<std::uint32_t>(v.dims().w));
  put_u32(bytes, static_cast<std::uint32_t>(v.dims().d));
  put_u32(bytes, static_cast<std::uint32_t>(v.channels()));
  bytes.insert(bytes.end(), 8, '\0');
  const std::size_t header = bytes.size();
  bytes.resize(header + v.size() * 4);
  auto src = v.data();
  for (std::size_t i = 0; i < src.size(); ++i) put_f32(bytes.data() + header + 4 * i, src[i]);
  dump(path, bytes);
}

Volume read_volume(const std::filesystem::path& path, std::vector<ChannelRole> roles) {
  const auto bytes = slurp(path);
  if (bytes.size() < kNvlHeader) throw FormatError(path.string() + ": truncated header");
  if (std::memcmp(bytes.data(), "NVL1", 4) != 0) throw FormatError(path.string() + ": bad magic");
  const Dims dims{static_cast<int>(get_u32(bytes.data() + 4)),
                  static_cast<int>(get_u32(bytes.data() + 8)),
                  static_cast<int>(get_u32(bytes.data() + 12))};
  const auto c = get_u32(bytes.data() + 16);
  if (!dims.positive() || c == 0) throw FormatError(path.string() + ": zero dimension");
  const std::size_t count = dims.voxels() * c;
  if (bytes.size() < kNvlHeader + count * 4) throw FormatError(path.string() + ": truncated payload");
  if (bytes.size() > kNvlHeader + count * 4) throw FormatError(path.string() + ": trailing bytes");
  if (roles.empty()) roles.assign(c, ChannelRole::Unlabeled);
  if (roles.size() != c)
    throw ShapeError(path.string() + ": expected " + std::to_string(roles.size()) +
                     " channels, file has " + std::to_string(c));
  std::vector<float> data(count);
  for (std::size_t i = 0; i < count; ++i) data[i] = get_f32(bytes.data() + kNvlHeader + 4 * i);
  return Volume(dims, std::move(roles), std::move(data));
}

void write_labels(const TerritoryMask& mask, const std::filesystem::path& path) {
  std::vector<char> bytes;
  bytes.insert(bytes.end(), {'N', 'L', 'B', '1'});
  put_u32(bytes, static_cast<std::uint32_t>(mask.dims().h));
  put_u32(bytes, static_cast<std::uint32_t>(mask.dims().w));
  put_u32(bytes, static_cast<std::uint32_t>(mask.dims().d));
  for (auto l : mask.labels()) bytes.push_back(static_cast<char>(l));
  dump(path, bytes);
}

TerritoryMask read_labels(const std::filesystem::path& path) {
  const auto bytes = slurp(path);
  if (bytes.size() < 16) throw FormatError(path.string() + ": truncated header");
  if (std::memcmp(bytes.data(), "NLB1", 4) != 0) throw FormatError(path.string() + ": bad magic");
  const Dims dims{static_cast<int>(get_u32(bytes.data() + 4)),
                  static_cast<int>(get_u32(bytes.data() + 8)),
                  static_cast<int>(get_u32(bytes.data() + 12))};
  if (!dims.positive()) throw FormatError(path.string() + ": zero dimension");
  if (bytes.size() != 16 + dims.voxels()) throw FormatError(path.string() + ": payload size mismatch");
  std::vector<std::uint8_t> labels(bytes.begin() + 16, bytes.end());
  return TerritoryMask(dims, std::move(labels));
}

Volume normalize_channels(const Volume& v, const NormalizationScheme& scheme) {
  const std::size_t c = static_cast<std::size_t>(v.channels());
  // Per-channel divisor; 0 marks an intensity channel with no positive value.
  std::vector<float> divisor(c, 1.0f);
  auto src = v.data();
  for (std::size_t k = 0; k < c; ++k) {
    const ChannelRole role = v.roles()[k];
    if (role == ChannelRole::Unlabeled) throw ConfigError("cannot normalize an unlabeled channel");
    if (is_intensity(role)) {
      float mx = 0.0f;
      for (std::size_t i = k; i < src.size(); i += c) mx = std::max(mx, src[i]);
      divisor[k] = mx > 0.0f ? mx : 0.0f;
    } else if (v.units()[k] == VoxelUnit::Dimensionless) {
      divisor[k] = 1.0f;
    } else if (is_cbf(role)) {
      divisor[k] = scheme.cbf_scale;
    } else {
      divisor[k] = scheme.att_scale;
    }
  }
  std::vector<float> out(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) {
    const float q = divisor[i % c];
    out[i] = q == 0.0f ? 0.0f : src[i] / q;
  }
  return Volume(v.dims(), v.roles(), std::vector<VoxelUnit>(c, VoxelUnit::Dimensionless),
                std::move(out));
}

Volume denormalize_cbf(const Volume& v, const NormalizationScheme& scheme) {
  for (auto r : v.roles())
    if (!is_cbf(r)) throw ConfigError("denormalize_cbf expects CBF channels only");
  std::vector<float> out(v.data().begin(), v.data().end());
  for (auto& f : out) f *= scheme.cbf_scale;
  return Volume(v.dims(), v.roles(), std::move(out));
}

Volume crop_or_pad(const Volume& v, Dims target) {
  if (!target.positive()) throw ShapeError("crop_or_pad target must be positive");
  const Dims in = v.dims();
  const int sx = axis_shift(in.h, target.h);
  const int sy = axis_shift(in.w, target.w);
  const int sz = axis_shift(in.d, target.d);
  const std::size_t c = static_cast<std::size_t>(v.channels());
  std::vector<float> out(target.voxels() * c, 0.0f);
  auto src = v.data();
  for (int z = 0; z < target.d; ++z) {
    const int iz = z + sz;
    if (iz < 0 || iz >= in.d) continue;
    for (int y = 0; y < target.w; ++y) {
      const int iy = y + sy;
      if (iy < 0 || iy >= in.w) continue;
      for (int x = 0; x < target.h; ++x) {
        const int ix = x + sx;
        if (ix < 0 || ix >= in.h) continue;
        const std::size_t o = ((static_cast<std::size_t>(z) * target.w + y) * target.h + x) * c;
        const std::size_t i = v.index(ix, iy, iz);
        std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(i), c, out.begin() + static_cast<std::ptrdiff_t>(o));
      }
    }
  }
  return Volume(target, v.roles(), v.units(), std::move(out));
}

TerritoryMask crop_or_pad(const TerritoryMask& m, Dims target) {
  if (!target.positive()) throw ShapeError("crop_or_pad target must be positive");
  const Dims in = m.dims();
  const int sx = axis_shift(in.h, target.h);
  const int sy = axis_shift(in.w, target.w);
  const int sz = axis_shift(in.d, target.d);
  std::vector<std::uint8_t> out(target.voxels(), 0);
  for (int z = 0; z < target.d; ++z)
    for (int y = 0; y < target.w; ++y)
      for (int x = 0; x < target.h; ++x) {
        const int ix = x + sx, iy = y + sy, iz = z + sz;
        if (ix < 0 || iy < 0 || iz < 0 || ix >= in.h || iy >= in.w || iz >= in.d) continue;
        out[(static_cast<std::size_t>(z) * target.w + y) * target.h + x] = m.at(ix, iy, iz);
      }
  return TerritoryMask(target, std::move(out));
}

Volume flip_x(const Volume& v) {
  const Dims dims = v.dims();
  const std::size_t c = static_cast<std::size_t>(v.channels());
  std::vector<float> out(v.size());
  auto src = v.data();
  for (int z = 0; z < dims.d; ++z)
    for (int y = 0; y < dims.w; ++y)
      for (int x = 0; x < dims.h; ++x) {
        const std::size_t o = v.index(x, y, z);
        const std::size_t i = v.index(dims.h - 1 - x, y, z);
        for (std::size_t k = 0; k < c; ++k) out[o + k] = src[i + k];
      }
  return Volume(dims, v.roles(), v.units(), std::move(out));
}

}  // namespace petsynth
