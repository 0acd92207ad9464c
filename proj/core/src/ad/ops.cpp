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

#include "petsynth/ad/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>

#include "petsynth/error.hpp"

namespace petsynth::ad {

namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <class T>
void require_volume(const Tape<T>& tape, NodeId id, const char* what) {
  if (tape.shape(id).rank != 4)
    throw ShapeError(std::string(what) + ": expected a rank-4 (h,w,d,c) node, got " +
                     to_string(tape.shape(id)));
}

// Geometry of one conv3d call, per spatial axis (x, y, z).
struct ConvGeometry {
  int k = 1, ci = 1, co = 1, stride = 1;
  std::array<int, 3> in{}, out{}, before{}, padded{};

  std::size_t padded_voxels() const {
    return static_cast<std::size_t>(padded[0]) * padded[1] * padded[2];
  }
  std::size_t out_voxels() const { return static_cast<std::size_t>(out[0]) * out[1] * out[2]; }
  // Rows of the flat output computed on the padded grid (stride 1 only).
  std::size_t flat_rows() const {
    return (static_cast<std::size_t>(out[2] - 1) * padded[1] + (out[1] - 1)) * padded[0] +
           static_cast<std::size_t>(out[0]);
  }
};

ConvGeometry conv_geometry(const Shape& x, const Shape& w, const Shape& b, Conv3dOptions opts) {
  if (w.rank != 5) throw ShapeError("conv3d: kernel must be rank 5 (k,k,k,ci,co), got " + to_string(w));
  if (w[0] != w[1] || w[1] != w[2]) throw ShapeError("conv3d: kernel must be cubic");
  ConvGeometry g;
  g.k = w[0];
  g.ci = w[3];
  g.co = w[4];
  g.stride = opts.stride;
  if (x.c() != g.ci)
    throw ShapeError("conv3d: input has " + std::to_string(x.c()) + " channels, kernel expects " +
                     std::to_string(g.ci));
  if (b.rank != 1 || b[0] != g.co) throw ShapeError("conv3d: bias must have shape (co)");
  if (g.stride != 1 && g.stride != 2) throw ShapeError("conv3d: stride must be 1 or 2");
  if (opts.padding == Padding::Same && g.k % 2 == 0 && g.k > 2)
    throw ShapeError("conv3d: same padding needs an odd kernel or k <= 2");
  for (int a = 0; a < 3; ++a) {
    const int n = x[a];
    g.in[a] = n;
    if (opts.padding == Padding::Same) {
      const int out = (n + g.stride - 1) / g.stride;
      const int total = std::max((out - 1) * g.stride + g.k - n, 0);
      g.out[a] = out;
      g.before[a] = total / 2;
      g.padded[a] = n + total;
    } else {
      if (n < g.k) throw ShapeError("conv3d: valid padding with input smaller than kernel");
      g.out[a] = (n - g.k) / g.stride + 1;
      g.before[a] = 0;
      g.padded[a] = n;
    }
  }
  return g;
}

template <class T>
std::vector<T> pad_input(std::span<const T> x, const ConvGeometry& g) {
  std::vector<T> xp(g.padded_voxels() * g.ci, T(0));
  const std::size_t row = static_cast<std::size_t>(g.in[0]) * g.ci;
  for (int z = 0; z < g.in[2]; ++z)
    for (int y = 0; y < g.in[1]; ++y) {
      const std::size_t src = (static_cast<std::size_t>(z) * g.in[1] + y) * g.in[0] * g.ci;
      const std::size_t dst =
          ((static_cast<std::size_t>(z + g.before[2]) * g.padded[1] + (y + g.before[1])) *
               g.padded[0] +
           g.before[0]) *
          g.ci;
      std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(src), row,
                  xp.begin() + static_cast<std::ptrdiff_t>(dst));
    }
  return xp;
}

// Adds the interior of a padded gradient back onto the unpadded input grad.
template <class T>
void unpad_accumulate(const std::vector<T>& gp, std::span<T> gx, const ConvGeometry& g) {
  const std::size_t row = static_cast<std::size_t>(g.in[0]) * g.ci;
  for (int z = 0; z < g.in[2]; ++z)
    for (int y = 0; y < g.in[1]; ++y) {
      const std::size_t dst = (static_cast<std::size_t>(z) * g.in[1] + y) * g.in[0] * g.ci;
      const std::size_t src =
          ((static_cast<std::size_t>(z + g.before[2]) * g.padded[1] + (y + g.before[1])) *
               g.padded[0] +
           g.before[0]) *
          g.ci;
      for (std::size_t i = 0; i < row; ++i) gx[dst + i] += gp[src + i];
    }
}

std::size_t tap_offset(const ConvGeometry& g, int dx, int dy, int dz) {
  return static_cast<std::size_t>(dx) +
         static_cast<std::size_t>(g.padded[0]) *
             (static_cast<std::size_t>(dy) + static_cast<std::size_t>(g.padded[1]) * dz);
}

std::size_t flat_row(const ConvGeometry& g, int x, int y, int z) {
  return (static_cast<std::size_t>(z) * g.padded[1] + y) * g.padded[0] + x;
}

// im2col for strided convolutions: one row per output voxel, columns ordered
// like the kernel's (dx, dy, dz, ci) rows.
template <class T>
RowMat<T> im2col(std::span<const T> x, const ConvGeometry& g) {
  const int k = g.k;
  RowMat<T> col = RowMat<T>::Zero(static_cast<Eigen::Index>(g.out_voxels()),
                                  static_cast<Eigen::Index>(k * k * k * g.ci));
  Eigen::Index r = 0;
  for (int oz = 0; oz < g.out[2]; ++oz)
    for (int oy = 0; oy < g.out[1]; ++oy)
      for (int ox = 0; ox < g.out[0]; ++ox, ++r) {
        T* dst = col.row(r).data();
        for (int dx = 0; dx < k; ++dx)
          for (int dy = 0; dy < k; ++dy)
            for (int dz = 0; dz < k; ++dz, dst += g.ci) {
              const int ix = ox * g.stride + dx - g.before[0];
              const int iy = oy * g.stride + dy - g.before[1];
              const int iz = oz * g.stride + dz - g.before[2];
              if (ix < 0 || iy < 0 || iz < 0 || ix >= g.in[0] || iy >= g.in[1] || iz >= g.in[2])
                continue;
              const std::size_t src =
                  ((static_cast<std::size_t>(iz) * g.in[1] + iy) * g.in[0] + ix) * g.ci;
              std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(src), g.ci, dst);
            }
      }
  return col;
}

template <class T>
void col2im_accumulate(const RowMat<T>& gcol, std::span<T> gx, const ConvGeometry& g) {
  const int k = g.k;
  Eigen::Index r = 0;
  for (int oz = 0; oz < g.out[2]; ++oz)
    for (int oy = 0; oy < g.out[1]; ++oy)
      for (int ox = 0; ox < g.out[0]; ++ox, ++r) {
        const T* src = gcol.row(r).data();
        for (int dx = 0; dx < k; ++dx)
          for (int dy = 0; dy < k; ++dy)
            for (int dz = 0; dz < k; ++dz, src += g.ci) {
              const int ix = ox * g.stride + dx - g.before[0];
              const int iy = oy * g.stride + dy - g.before[1];
              const int iz = oz * g.stride + dz - g.before[2];
              if (ix < 0 || iy < 0 || iz < 0 || ix >= g.in[0] || iy >= g.in[1] || iz >= g.in[2])
                continue;
              const std::size_t dst =
                  ((static_cast<std::size_t>(iz) * g.in[1] + iy) * g.in[0] + ix) * g.ci;
              for (int c = 0; c < g.ci; ++c) gx[dst + c] += src[c];
            }
      }
}

// Stride-1 convolution evaluated as one GEMM per kernel tap: on the flattened
// padded grid, tap (dx,dy,dz) is a constant row offset, so the input slab it
// reads is a contiguous (rows x ci) matrix. Rows that fall in the padding
// margin are computed and discarded.
template <class T>
std::vector<T> conv_forward_flat(std::span<const T> x, std::span<const T> w, std::span<const T> b,
                                 const ConvGeometry& g) {
  const std::vector<T> xp = pad_input(x, g);
  const auto rows = static_cast<Eigen::Index>(g.flat_rows());
  RowMat<T> acc = RowMat<T>::Zero(rows, g.co);
  const std::size_t tap_size = static_cast<std::size_t>(g.ci) * g.co;
  for (int dx = 0; dx < g.k; ++dx)
    for (int dy = 0; dy < g.k; ++dy)
      for (int dz = 0; dz < g.k; ++dz) {
        const std::size_t off = tap_offset(g, dx, dy, dz) * g.ci;
        const std::size_t widx = ((static_cast<std::size_t>(dx) * g.k + dy) * g.k + dz) * tap_size;
        acc.noalias() += ConstMatMap<T>(xp.data() + off, rows, g.ci) *
                         ConstMatMap<T>(w.data() + widx, g.ci, g.co);
      }
  std::vector<T> out(g.out_voxels() * g.co);
  std::size_t o = 0;
  for (int z = 0; z < g.out[2]; ++z)
    for (int y = 0; y < g.out[1]; ++y)
      for (int x0 = 0; x0 < g.out[0]; ++x0) {
        const auto r = static_cast<Eigen::Index>(flat_row(g, x0, y, z));
        for (int c = 0; c < g.co; ++c) out[o++] = acc(r, c) + b[static_cast<std::size_t>(c)];
      }
  return out;
}

template <class T>
void conv_backward_flat(Tape<T>& tape, NodeId self, NodeId input, NodeId kernel, NodeId bias,
                        const ConvGeometry& g) {
  const auto gy = tape.grad(self);
  const auto rows = static_cast<Eigen::Index>(g.flat_rows());
  RowMat<T> gflat = RowMat<T>::Zero(rows, g.co);
  std::size_t o = 0;
  for (int z = 0; z < g.out[2]; ++z)
    for (int y = 0; y < g.out[1]; ++y)
      for (int x0 = 0; x0 < g.out[0]; ++x0) {
        const auto r = static_cast<Eigen::Index>(flat_row(g, x0, y, z));
        for (int c = 0; c < g.co; ++c) gflat(r, c) = gy[o++];
      }

  const std::size_t tap_size = static_cast<std::size_t>(g.ci) * g.co;
  const bool want_x = tape.requires_grad(input);
  const bool want_w = tape.requires_grad(kernel);
  const std::vector<T> xp = want_w ? pad_input(tape.value(input), g) : std::vector<T>{};
  std::vector<T> gxp(want_x ? g.padded_voxels() * g.ci : 0, T(0));
  const auto w = tape.value(kernel);
  std::span<T> gw = want_w ? tape.grad_slot(kernel) : std::span<T>{};
  for (int dx = 0; dx < g.k; ++dx)
    for (int dy = 0; dy < g.k; ++dy)
      for (int dz = 0; dz < g.k; ++dz) {
        const std::size_t off = tap_offset(g, dx, dy, dz) * g.ci;
        const std::size_t widx = ((static_cast<std::size_t>(dx) * g.k + dy) * g.k + dz) * tap_size;
        if (want_w) {
          MatMap<T>(gw.data() + widx, g.ci, g.co).noalias() +=
              ConstMatMap<T>(xp.data() + off, rows, g.ci).transpose() * gflat;
        }
        if (want_x) {
          MatMap<T>(gxp.data() + off, rows, g.ci).noalias() +=
              gflat * ConstMatMap<T>(w.data() + widx, g.ci, g.co).transpose();
        }
      }
  if (want_x) unpad_accumulate(gxp, tape.grad_slot(input), g);
  if (tape.requires_grad(bias)) {
    auto gb = tape.grad_slot(bias);
    for (int c = 0; c < g.co; ++c) {
      double s = 0.0;
      for (std::size_t v = 0; v < g.out_voxels(); ++v) s += static_cast<double>(gy[v * g.co + c]);
      gb[static_cast<std::size_t>(c)] += static_cast<T>(s);
    }
  }
}

template <class T>
void upsample_axis(const T* src, T* dst, std::size_t outer, int n, std::size_t inner) {
  const int m = 2 * n;
  for (int o = 0; o < m; ++o) {
    const double s = std::clamp(0.5 * o - 0.25, 0.0, static_cast<double>(n - 1));
    const int lo = static_cast<int>(std::floor(s));
    const int hi = std::min(lo + 1, n - 1);
    const T f = static_cast<T>(s - lo);
    const T wl = T(1) - f;
    for (std::size_t b = 0; b < outer; ++b) {
      const T* a = src + (b * n + lo) * inner;
      const T* c = src + (b * n + hi) * inner;
      T* out = dst + (b * m + o) * inner;
      for (std::size_t j = 0; j < inner; ++j) out[j] = wl * a[j] + f * c[j];
    }
  }
}

template <class T>
void upsample_axis_transpose(const T* gdst, T* gsrc, std::size_t outer, int n, std::size_t inner) {
  const int m = 2 * n;
  for (int o = 0; o < m; ++o) {
    const double s = std::clamp(0.5 * o - 0.25, 0.0, static_cast<double>(n - 1));
    const int lo = static_cast<int>(std::floor(s));
    const int hi = std::min(lo + 1, n - 1);
    const T f = static_cast<T>(s - lo);
    const T wl = T(1) - f;
    for (std::size_t b = 0; b < outer; ++b) {
      const T* g = gdst + (b * m + o) * inner;
      T* a = gsrc + (b * n + lo) * inner;
      T* c = gsrc + (b * n + hi) * inner;
      for (std::size_t j = 0; j < inner; ++j) {
        a[j] += wl * g[j];
        c[j] += f * g[j];
      }
    }
  }
}

}  // namespace

template <class T>
NodeId conv3d(Tape<T>& tape, NodeId input, NodeId kernel, NodeId bias, Conv3dOptions opts) {
  require_volume(tape, input, "conv3d");
  const ConvGeometry g = conv_geometry(tape.shape(input), tape.shape(kernel), tape.shape(bias), opts);
  const Shape out_shape = Shape::volume(g.out[0], g.out[1], g.out[2], g.co);

  if (g.stride == 1) {
    auto value = conv_forward_flat<T>(tape.value(input), tape.value(kernel), tape.value(bias), g);
    return tape.record(OpKind::Conv3d, out_shape, std::move(value), {input, kernel, bias},
                       [input, kernel, bias, g](Tape<T>& t, NodeId self) {
                         conv_backward_flat(t, self, input, kernel, bias, g);
                       });
  }

  const RowMat<T> col = im2col(tape.value(input), g);
  const auto wrows = static_cast<Eigen::Index>(g.k * g.k * g.k * g.ci);
  RowMat<T> y = col * ConstMatMap<T>(tape.value(kernel).data(), wrows, g.co);
  const auto b = tape.value(bias);
  for (Eigen::Index r = 0; r < y.rows(); ++r)
    for (int c = 0; c < g.co; ++c) y(r, c) += b[static_cast<std::size_t>(c)];
  std::vector<T> value(y.data(), y.data() + y.size());
  return tape.record(
      OpKind::Conv3d, out_shape, std::move(value), {input, kernel, bias},
      [input, kernel, bias, g, wrows](Tape<T>& t, NodeId self) {
        const auto gy = t.grad(self);
        const ConstMatMap<T> gym(gy.data(), static_cast<Eigen::Index>(g.out_voxels()), g.co);
        if (t.requires_grad(kernel)) {
          const RowMat<T> c2 = im2col(t.value(input), g);
          MatMap<T>(t.grad_slot(kernel).data(), wrows, g.co).noalias() += c2.transpose() * gym;
        }
        if (t.requires_grad(input)) {
          const RowMat<T> gcol = gym * ConstMatMap<T>(t.value(kernel).data(), wrows, g.co).transpose();
          col2im_accumulate(gcol, t.grad_slot(input), g);
        }
        if (t.requires_grad(bias)) {
          auto gb = t.grad_slot(bias);
          for (int c = 0; c < g.co; ++c) {
            double s = 0.0;
            for (Eigen::Index r = 0; r < gym.rows(); ++r) s += static_cast<double>(gym(r, c));
            gb[static_cast<std::size_t>(c)] += static_cast<T>(s);
          }
        }
      });
}

template <class T>
NodeId maxpool3d(Tape<T>& tape, NodeId input) {
  require_volume(tape, input, "maxpool3d");
  const Shape s = tape.shape(input);
  if (s.h() % 2 || s.w() % 2 || s.d() % 2)
    throw ShapeError("maxpool3d: spatial dims must be even, got " + to_string(s));
  const int h = s.h() / 2, w = s.w() / 2, d = s.d() / 2, c = s.c();
  const Shape out_shape = Shape::volume(h, w, d, c);
  const auto x = tape.value(input);
  std::vector<T> value(out_shape.size());
  std::vector<std::uint32_t> argmax(out_shape.size());
  std::size_t o = 0;
  for (int z = 0; z < d; ++z)
    for (int y = 0; y < w; ++y)
      for (int x0 = 0; x0 < h; ++x0)
        for (int ch = 0; ch < c; ++ch, ++o) {
          std::size_t best = 0;
          T best_v = T(0);
          bool first = true;
          for (int dz = 0; dz < 2; ++dz)
            for (int dy = 0; dy < 2; ++dy)
              for (int dx = 0; dx < 2; ++dx) {
                const std::size_t i =
                    ((static_cast<std::size_t>(2 * z + dz) * s.w() + (2 * y + dy)) * s.h() +
                     (2 * x0 + dx)) *
                        c +
                    ch;
                if (first || x[i] > best_v) {
                  best = i;
                  best_v = x[i];
                  first = false;
                }
              }
          value[o] = best_v;
          argmax[o] = static_cast<std::uint32_t>(best);
        }
  return tape.record(OpKind::MaxPool3d, out_shape, std::move(value), {input},
                     [input, argmax = std::move(argmax)](Tape<T>& t, NodeId self) {
                       const auto gy = t.grad(self);
                       auto gx = t.grad_slot(input);
                       for (std::size_t i = 0; i < argmax.size(); ++i) gx[argmax[i]] += gy[i];
                     });
}

template <class T>
NodeId upsample_trilinear(Tape<T>& tape, NodeId input) {
  require_volume(tape, input, "upsample_trilinear");
  const Shape s = tape.shape(input);
  const int h = s.h(), w = s.w(), d = s.d(), c = s.c();
  const Shape out_shape = Shape::volume(2 * h, 2 * w, 2 * d, c);
  const auto x = tape.value(input);
  const std::size_t cc = static_cast<std::size_t>(c);
  std::vector<T> ax(static_cast<std::size_t>(2) * h * w * d * cc);
  upsample_axis(x.data(), ax.data(), static_cast<std::size_t>(w) * d, h, cc);
  std::vector<T> ay(static_cast<std::size_t>(4) * h * w * d * cc);
  upsample_axis(ax.data(), ay.data(), static_cast<std::size_t>(d), w, 2 * h * cc);
  std::vector<T> value(out_shape.size());
  upsample_axis(ay.data(), value.data(), 1, d, static_cast<std::size_t>(4) * h * w * cc);
  return tape.record(
      OpKind::UpsampleTrilinear, out_shape, std::move(value), {input},
      [input, h, w, d, cc](Tape<T>& t, NodeId self) {
        const auto gy = t.grad(self);
        std::vector<T> gay(static_cast<std::size_t>(4) * h * w * d * cc, T(0));
        upsample_axis_transpose(gy.data(), gay.data(), 1, d, static_cast<std::size_t>(4) * h * w * cc);
        std::vector<T> gax(static_cast<std::size_t>(2) * h * w * d * cc, T(0));
        upsample_axis_transpose(gay.data(), gax.data(), static_cast<std::size_t>(d), w, 2 * h * cc);
        auto gx = t.grad_slot(input);
        upsample_axis_transpose(gax.data(), gx.data(), static_cast<std::size_t>(w) * d, h, cc);
      });
}

int default_groups(int channels) {
  if (channels <= 0) throw ConfigError("group_norm: channel count must be positive");
  return std::gcd(std::min(8, channels), channels);
}

template <class T>
NodeId group_norm(Tape<T>& tape, NodeId input, NodeId gamma, NodeId beta, int groups, double eps) {
  require_volume(tape, input, "group_norm");
  const Shape s = tape.shape(input);
  const int c = s.c();
  if (tape.shape(gamma) != Shape{c} || tape.shape(beta) != Shape{c})
    throw ShapeError("group_norm: gamma and beta must have shape (c)");
  if (groups <= 0 || c % groups != 0)
    throw ConfigError("group_norm: " + std::to_string(c) + " channels not divisible into " +
                      std::to_string(groups) + " groups");
  const int cpg = c / groups;
  const std::size_t vox = s.voxels();
  const auto x = tape.value(input);
  const auto ga = tape.value(gamma);
  const auto be = tape.value(beta);
  const double n = static_cast<double>(vox) * cpg;

  std::vector<T> xhat(x.size());
  std::vector<double> inv_std(static_cast<std::size_t>(groups));
  std::vector<T> value(x.size());
  for (int g = 0; g < groups; ++g) {
    // Shifted by the first element so a constant group centres to exact zeros.
    const double shift = static_cast<double>(x[static_cast<std::size_t>(g * cpg)]);
    double offset = 0.0;
    for (std::size_t v = 0; v < vox; ++v)
      for (int k = 0; k < cpg; ++k) offset += static_cast<double>(x[v * c + g * cpg + k]) - shift;
    const double mean = shift + offset / n;
    double var = 0.0;
    for (std::size_t v = 0; v < vox; ++v)
      for (int k = 0; k < cpg; ++k) {
        const double dlt = static_cast<double>(x[v * c + g * cpg + k]) - mean;
        var += dlt * dlt;
      }
    var /= n;
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(g)] = is;
    for (std::size_t v = 0; v < vox; ++v)
      for (int k = 0; k < cpg; ++k) {
        const std::size_t i = v * c + g * cpg + k;
        const std::size_t ch = static_cast<std::size_t>(g * cpg + k);
        xhat[i] = static_cast<T>((static_cast<double>(x[i]) - mean) * is);
        value[i] = ga[ch] * xhat[i] + be[ch];
      }
  }
  return tape.record(
      OpKind::GroupNorm, s, std::move(value), {input, gamma, beta},
      [input, gamma, beta, groups, cpg, c, vox, n, xhat = std::move(xhat),
       inv_std = std::move(inv_std)](Tape<T>& t, NodeId self) {
        const auto gy = t.grad(self);
        if (t.requires_grad(gamma) || t.requires_grad(beta)) {
          std::vector<double> dg(static_cast<std::size_t>(c), 0.0), db(static_cast<std::size_t>(c), 0.0);
          for (std::size_t v = 0; v < vox; ++v)
            for (int ch = 0; ch < c; ++ch) {
              const std::size_t i = v * c + ch;
              dg[static_cast<std::size_t>(ch)] += static_cast<double>(gy[i]) * xhat[i];
              db[static_cast<std::size_t>(ch)] += static_cast<double>(gy[i]);
            }
          if (t.requires_grad(gamma)) {
            auto s_g = t.grad_slot(gamma);
            for (int ch = 0; ch < c; ++ch) s_g[static_cast<std::size_t>(ch)] += static_cast<T>(dg[static_cast<std::size_t>(ch)]);
          }
          if (t.requires_grad(beta)) {
            auto s_b = t.grad_slot(beta);
            for (int ch = 0; ch < c; ++ch) s_b[static_cast<std::size_t>(ch)] += static_cast<T>(db[static_cast<std::size_t>(ch)]);
          }
        }
        if (!t.requires_grad(input)) return;
        const auto ga_v = t.value(gamma);
        auto gx = t.grad_slot(input);
        for (int g = 0; g < groups; ++g) {
          double s1 = 0.0, s2 = 0.0;
          for (std::size_t v = 0; v < vox; ++v)
            for (int k = 0; k < cpg; ++k) {
              const std::size_t i = v * c + g * cpg + k;
              const double dxh = static_cast<double>(gy[i]) * ga_v[static_cast<std::size_t>(g * cpg + k)];
              s1 += dxh;
              s2 += dxh * xhat[i];
            }
          s1 /= n;
          s2 /= n;
          const double is = inv_std[static_cast<std::size_t>(g)];
          for (std::size_t v = 0; v < vox; ++v)
            for (int k = 0; k < cpg; ++k) {
              const std::size_t i = v * c + g * cpg + k;
              const double dxh = static_cast<double>(gy[i]) * ga_v[static_cast<std::size_t>(g * cpg + k)];
              gx[i] += static_cast<T>(is * (dxh - s1 - static_cast<double>(xhat[i]) * s2));
            }
        }
      });
}

template <class T>
NodeId activation(Tape<T>& tape, Activation kind, NodeId input) {
  const auto x = tape.value(input);
  std::vector<T> value(x.size());
  if (kind == Activation::Relu) {
    for (std::size_t i = 0; i < x.size(); ++i) value[i] = x[i] > T(0) ? x[i] : T(0);
    return tape.record(OpKind::Relu, tape.shape(input), std::move(value), {input},
                       [input](Tape<T>& t, NodeId self) {
                         const auto gy = t.grad(self);
                         const auto xv = t.value(input);
                         auto gx = t.grad_slot(input);
                         for (std::size_t i = 0; i < gx.size(); ++i)
                           if (xv[i] > T(0)) gx[i] += gy[i];
                       });
  }
  for (std::size_t i = 0; i < x.size(); ++i) value[i] = T(1) / (T(1) + std::exp(-x[i]));
  return tape.record(OpKind::Sigmoid, tape.shape(input), std::move(value), {input},
                     [input](Tape<T>& t, NodeId self) {
                       const auto gy = t.grad(self);
                       const auto yv = t.value(self);
                       auto gx = t.grad_slot(input);
                       for (std::size_t i = 0; i < gx.size(); ++i)
                         gx[i] += gy[i] * yv[i] * (T(1) - yv[i]);
                     });
}

template <class T>
NodeId combine(Tape<T>& tape, Combine kind, NodeId a, NodeId b) {
  const Shape sa = tape.shape(a), sb = tape.shape(b);
  const auto va = tape.value(a), vb = tape.value(b);

  if (kind == Combine::Add) {
    if (sa != sb) throw ShapeError("add: shapes differ " + to_string(sa) + " vs " + to_string(sb));
    std::vector<T> value(va.size());
    for (std::size_t i = 0; i < va.size(); ++i) value[i] = va[i] + vb[i];
    return tape.record(OpKind::Add, sa, std::move(value), {a, b}, [a, b](Tape<T>& t, NodeId self) {
      const auto gy = t.grad(self);
      for (NodeId p : {a, b}) {
        if (!t.requires_grad(p)) continue;
        auto gp = t.grad_slot(p);
        for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += gy[i];
      }
    });
  }

  if (kind == Combine::ConcatChannels) {
    if (sa.rank != 4 || sb.rank != 4 || sa.h() != sb.h() || sa.w() != sb.w() || sa.d() != sb.d())
      throw ShapeError("concat_channels: spatial dims differ " + to_string(sa) + " vs " + to_string(sb));
    const std::size_t ca = static_cast<std::size_t>(sa.c()), cb = static_cast<std::size_t>(sb.c());
    const std::size_t vox = sa.voxels();
    std::vector<T> value(vox * (ca + cb));
    for (std::size_t v = 0; v < vox; ++v) {
      std::copy_n(va.begin() + static_cast<std::ptrdiff_t>(v * ca), ca,
                  value.begin() + static_cast<std::ptrdiff_t>(v * (ca + cb)));
      std::copy_n(vb.begin() + static_cast<std::ptrdiff_t>(v * cb), cb,
                  value.begin() + static_cast<std::ptrdiff_t>(v * (ca + cb) + ca));
    }
    const Shape out = Shape::volume(sa.h(), sa.w(), sa.d(), static_cast<int>(ca + cb));
    return tape.record(OpKind::ConcatChannels, out, std::move(value), {a, b},
                       [a, b, ca, cb, vox](Tape<T>& t, NodeId self) {
                         const auto gy = t.grad(self);
                         if (t.requires_grad(a)) {
                           auto ga = t.grad_slot(a);
                           for (std::size_t v = 0; v < vox; ++v)
                             for (std::size_t k = 0; k < ca; ++k) ga[v * ca + k] += gy[v * (ca + cb) + k];
                         }
                         if (t.requires_grad(b)) {
                           auto gb = t.grad_slot(b);
                           for (std::size_t v = 0; v < vox; ++v)
                             for (std::size_t k = 0; k < cb; ++k)
                               gb[v * cb + k] += gy[v * (ca + cb) + ca + k];
                         }
                       });
  }

  // Multiply, with optional single-channel broadcast on either side.
  if (sa == sb) {
    std::vector<T> value(va.size());
    for (std::size_t i = 0; i < va.size(); ++i) value[i] = va[i] * vb[i];
    return tape.record(OpKind::Multiply, sa, std::move(value), {a, b},
                       [a, b](Tape<T>& t, NodeId self) {
                         const auto gy = t.grad(self);
                         const auto xa = t.value(a), xb = t.value(b);
                         if (t.requires_grad(a)) {
                           auto ga = t.grad_slot(a);
                           for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i] * xb[i];
                         }
                         if (t.requires_grad(b)) {
                           auto gb = t.grad_slot(b);
                           for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gy[i] * xa[i];
                         }
                       });
  }
  const bool spatial_match = sa.rank == 4 && sb.rank == 4 && sa.h() == sb.h() && sa.w() == sb.w() &&
                             sa.d() == sb.d();
  if (!spatial_match || (sa.c() != 1 && sb.c() != 1))
    throw ShapeError("multiply: shapes " + to_string(sa) + " and " + to_string(sb) +
                     " are neither equal nor single-channel broadcastable");
  // Normalize so that `full` is the multi-channel operand.
  const NodeId full = sa.c() == 1 ? b : a;
  const NodeId mask = sa.c() == 1 ? a : b;
  const Shape sf = tape.shape(full);
  const std::size_t c = static_cast<std::size_t>(sf.c());
  const std::size_t vox = sf.voxels();
  const auto vf = tape.value(full), vm = tape.value(mask);
  std::vector<T> value(vf.size());
  for (std::size_t v = 0; v < vox; ++v)
    for (std::size_t k = 0; k < c; ++k) value[v * c + k] = vf[v * c + k] * vm[v];
  return tape.record(OpKind::Multiply, sf, std::move(value), {a, b},
                     [full, mask, c, vox](Tape<T>& t, NodeId self) {
                       const auto gy = t.grad(self);
                       const auto xf = t.value(full), xm = t.value(mask);
                       if (t.requires_grad(full)) {
                         auto gf = t.grad_slot(full);
                         for (std::size_t v = 0; v < vox; ++v)
                           for (std::size_t k = 0; k < c; ++k) gf[v * c + k] += gy[v * c + k] * xm[v];
                       }
                       if (t.requires_grad(mask)) {
                         auto gm = t.grad_slot(mask);
                         for (std::size_t v = 0; v < vox; ++v) {
                           T s = T(0);
                           for (std::size_t k = 0; k < c; ++k) s += gy[v * c + k] * xf[v * c + k];
                           gm[v] += s;
                         }
                       }
                     });
}

template <class T>
NodeId sum(Tape<T>& tape, NodeId input) {
  const auto x = tape.value(input);
  double s = 0.0;
  for (T v : x) s += static_cast<double>(v);
  return tape.record(OpKind::Sum, Shape::scalar(), {static_cast<T>(s)}, {input},
                     [input](Tape<T>& t, NodeId self) {
                       const T g = t.grad(self)[0];
                       auto gx = t.grad_slot(input);
                       for (auto& v : gx) v += g;
                     });
}

template <class T>
NodeId scale(Tape<T>& tape, NodeId input, double factor) {
  const auto x = tape.value(input);
  const T f = static_cast<T>(factor);
  std::vector<T> value(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) value[i] = x[i] * f;
  return tape.record(OpKind::Scale, tape.shape(input), std::move(value), {input},
                     [input, f](Tape<T>& t, NodeId self) {
                       const auto gy = t.grad(self);
                       auto gx = t.grad_slot(input);
                       for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * f;
                     });
}

#define PETSYNTH_INSTANTIATE_OPS(T)                                                      \
  template NodeId conv3d<T>(Tape<T>&, NodeId, NodeId, NodeId, Conv3dOptions);            \
  template NodeId maxpool3d<T>(Tape<T>&, NodeId);                                        \
  template NodeId upsample_trilinear<T>(Tape<T>&, NodeId);                               \
  template NodeId group_norm<T>(Tape<T>&, NodeId, NodeId, NodeId, int, double);          \
  template NodeId activation<T>(Tape<T>&, Activation, NodeId);                           \
  template NodeId combine<T>(Tape<T>&, Combine, NodeId, NodeId);                         \
  template NodeId sum<T>(Tape<T>&, NodeId);                                              \
  template NodeId scale<T>(Tape<T>&, NodeId, double);

PETSYNTH_INSTANTIATE_OPS(float)
PETSYNTH_INSTANTIATE_OPS(double)

#undef PETSYNTH_INSTANTIATE_OPS

}  // namespace petsynth::ad
