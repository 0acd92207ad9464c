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

#include "petsynth/objective.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include "petsynth/error.hpp"

namespace petsynth::objective {

namespace {

void check_pair(std::size_t nx, std::size_t ny, Mask mask) {
  if (nx != ny) throw ShapeError("metric inputs differ in size");
  if (!mask.empty() && mask.size() != nx) throw ShapeError("mask size does not match volume");
  if (nx == 0) throw ShapeError("metric inputs are empty");
}

bool keep(Mask mask, std::size_t i) { return mask.empty() || mask[i] != 0; }

void check_volumes(const Volume& x, const Volume& y) {
  if (!(x.dims() == y.dims()) || x.channels() != y.channels())
    throw ShapeError("metric volumes differ: " + to_string(x.dims()) + "x" +
                     std::to_string(x.channels()) + " vs " + to_string(y.dims()) + "x" +
                     std::to_string(y.channels()));
}

struct Moments {
  double n = 0, mx = 0, my = 0, vx = 0, vy = 0, cxy = 0;
};

template <class T>
Moments moments(std::span<const T> x, std::span<const T> y, Mask mask) {
  Moments m;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!keep(mask, i)) continue;
    m.n += 1;
    m.mx += static_cast<double>(x[i]);
    m.my += static_cast<double>(y[i]);
  }
  if (m.n == 0) throw ShapeError("mask selects no voxels");
  m.mx /= m.n;
  m.my /= m.n;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!keep(mask, i)) continue;
    const double dx = static_cast<double>(x[i]) - m.mx;
    const double dy = static_cast<double>(y[i]) - m.my;
    m.vx += dx * dx;
    m.vy += dy * dy;
    m.cxy += dx * dy;
  }
  m.vx /= m.n;
  m.vy /= m.n;
  m.cxy /= m.n;
  return m;
}

struct SsimTerms {
  double a, b, c, d;
  double value() const { return (a * b) / (c * d); }
};

SsimTerms ssim_terms(const Moments& m, const LossConfig& cfg) {
  return {2 * m.mx * m.my + cfg.c1(), 2 * m.cxy + cfg.c2(), m.mx * m.mx + m.my * m.my + cfg.c1(),
          m.vx + m.vy + cfg.c2()};
}

template <class T>
double sum_abs(std::span<const T> x, std::span<const T> y) {
  double s = 0;
  for (std::size_t i = 0; i < x.size(); ++i) s += std::abs(static_cast<double>(y[i]) - x[i]);
  return s;
}

template <class T>
double sum_sq(std::span<const T> x, std::span<const T> y) {
  double s = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = static_cast<double>(y[i]) - x[i];
    s += d * d;
  }
  return s;
}

}  // namespace

LossKind parse_loss_kind(std::string_view name) {
  if (name == "mse") return LossKind::Mse;
  if (name == "mae") return LossKind::Mae;
  if (name == "ssim") return LossKind::Ssim;
  if (name == "custom") return LossKind::Custom;
  throw ConfigError("unknown loss kind '" + std::string(name) + "'");
}

std::string_view loss_kind_name(LossKind kind) {
  switch (kind) {
    case LossKind::Mse: return "mse";
    case LossKind::Mae: return "mae";
    case LossKind::Ssim: return "ssim";
    case LossKind::Custom: return "custom";
  }
  return "?";
}

void LossConfig::validate() const {
  if (ssim_k1 <= 0 || ssim_k2 <= 0) throw ConfigError("SSIM constants k1, k2 must be positive");
  if (dynamic_range <= 0) throw ConfigError("dynamic range must be positive");
  if (lambda_r < 0 || lambda_p < 0) throw ConfigError("loss weights must be non-negative");
  if (kind == LossKind::Custom && std::abs(lambda_r + lambda_p - 1.0) > 1e-12)
    throw ConfigError("custom loss weights must sum to 1");
}

double mae(std::span<const float> x, std::span<const float> y, Mask mask) {
  check_pair(x.size(), y.size(), mask);
  double s = 0, n = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!keep(mask, i)) continue;
    s += std::abs(static_cast<double>(x[i]) - y[i]);
    n += 1;
  }
  if (n == 0) throw ShapeError("mask selects no voxels");
  return s / n;
}

double mse(std::span<const float> x, std::span<const float> y, Mask mask) {
  check_pair(x.size(), y.size(), mask);
  double s = 0, n = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!keep(mask, i)) continue;
    const double d = static_cast<double>(x[i]) - y[i];
    s += d * d;
    n += 1;
  }
  if (n == 0) throw ShapeError("mask selects no voxels");
  return s / n;
}

RmseNrmse rmse_nrmse(std::span<const float> x, std::span<const float> y, Mask mask) {
  const double rmse = std::sqrt(mse(x, y, mask));
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!keep(mask, i)) continue;
    lo = std::min(lo, static_cast<double>(x[i]));
    hi = std::max(hi, static_cast<double>(x[i]));
  }
  if (!(hi > lo)) throw ValidationError("NRMSE undefined for a constant reference");
  return {rmse, rmse / (hi - lo)};
}

double ssim_global(std::span<const float> x, std::span<const float> y, const LossConfig& cfg,
                   Mask mask) {
  check_pair(x.size(), y.size(), mask);
  return ssim_terms(moments(x, y, mask), cfg).value();
}

double psnr(std::span<const float> x, std::span<const float> y, const LossConfig& cfg, Mask mask) {
  check_pair(x.size(), y.size(), mask);
  double s = 0, n = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!keep(mask, i)) continue;
    const double d = static_cast<double>(x[i]) - y[i];
    s += d * d;
    n += 1;
  }
  if (s == 0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(cfg.dynamic_range * n / s);
}

double composite_loss(std::span<const float> x, std::span<const float> y, const LossConfig& cfg) {
  switch (cfg.kind) {
    case LossKind::Mse: return mse(x, y);
    case LossKind::Mae: return mae(x, y);
    case LossKind::Ssim: return 1.0 - ssim_global(x, y, cfg);
    case LossKind::Custom:
      return cfg.lambda_r * mae(x, y) + cfg.lambda_p * (1.0 - ssim_global(x, y, cfg));
  }
  throw ConfigError("unknown loss kind");
}

double mae(const Volume& x, const Volume& y) {
  check_volumes(x, y);
  return mae(x.data(), y.data());
}

RmseNrmse rmse_nrmse(const Volume& x, const Volume& y) {
  check_volumes(x, y);
  return rmse_nrmse(x.data(), y.data());
}

double ssim_global(const Volume& x, const Volume& y, const LossConfig& cfg) {
  check_volumes(x, y);
  return ssim_global(x.data(), y.data(), cfg);
}

double psnr(const Volume& x, const Volume& y, const LossConfig& cfg) {
  check_volumes(x, y);
  return psnr(x.data(), y.data(), cfg);
}

double composite_loss(const Volume& x, const Volume& y, const LossConfig& cfg) {
  check_volumes(x, y);
  return composite_loss(x.data(), y.data(), cfg);
}

QualityReport quality_report(const Volume& x, const Volume& y, const LossConfig& cfg, Mask mask) {
  check_volumes(x, y);
  QualityReport r;
  r.nrmse = rmse_nrmse(x.data(), y.data(), mask).nrmse;
  r.psnr_db = psnr(x.data(), y.data(), cfg, mask);
  r.ssim = ssim_global(x.data(), y.data(), cfg, mask);
  r.computed_over = mask.empty() ? "whole-volume" : "mask";
  return r;
}

Volume error_map(const Volume& reference, const Volume& prediction, double dynamic_range) {
  check_volumes(reference, prediction);
  std::vector<float> err(reference.size());
  const auto range = static_cast<float>(dynamic_range);
  for (std::size_t i = 0; i < err.size(); ++i)
    err[i] = std::min(std::abs(reference.data()[i] - prediction.data()[i]) * 3.0f, range);
  return Volume(reference.dims(), {ChannelRole::PET_CBF}, {VoxelUnit::Dimensionless}, std::move(err));
}

std::string quality_csv_header() { return "subject_id,condition,nrmse,psnr_db,ssim"; }

std::string quality_csv_row(const std::string& subject_id, const std::string& condition,
                            const QualityReport& report) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "%.9g,%.9g,%.9g", report.nrmse, report.psnr_db, report.ssim);
  return subject_id + "," + condition + "," + buf;
}

template <class T>
ad::NodeId loss_node(ad::Tape<T>& tape, ad::NodeId prediction, std::span<const T> reference,
                     const LossConfig& cfg) {
  cfg.validate();
  const auto y = tape.value(prediction);
  check_pair(reference.size(), y.size(), {});
  const double n = static_cast<double>(y.size());
  const double w_mae = cfg.kind == LossKind::Mae ? 1.0 : cfg.kind == LossKind::Custom ? cfg.lambda_r : 0.0;
  const double w_ssim = cfg.kind == LossKind::Ssim ? 1.0 : cfg.kind == LossKind::Custom ? cfg.lambda_p : 0.0;
  const double w_mse = cfg.kind == LossKind::Mse ? 1.0 : 0.0;

  double value = 0.0;
  if (w_mae != 0) value += w_mae * sum_abs(reference, y) / n;
  if (w_mse != 0) value += w_mse * sum_sq(reference, y) / n;
  Moments m{};
  SsimTerms terms{1, 1, 1, 1};
  if (w_ssim != 0) {
    m = moments(reference, y, {});
    terms = ssim_terms(m, cfg);
    value += w_ssim * (1.0 - terms.value());
  }
  std::vector<T> ref(reference.begin(), reference.end());
  return tape.record(
      ad::OpKind::Custom, ad::Shape::scalar(), {static_cast<T>(value)}, {prediction},
      [prediction, ref = std::move(ref), n, w_mae, w_mse, w_ssim, m, terms](ad::Tape<T>& t,
                                                                           ad::NodeId self) {
        const double g = static_cast<double>(t.grad(self)[0]);
        const auto yv = t.value(prediction);
        auto gy = t.grad_slot(prediction);
        const double s = terms.value();
        for (std::size_t i = 0; i < gy.size(); ++i) {
          const double diff = static_cast<double>(yv[i]) - ref[i];
          double d = 0.0;
          if (w_mae != 0) d += w_mae * (diff > 0 ? 1.0 : diff < 0 ? -1.0 : 0.0) / n;
          if (w_mse != 0) d += w_mse * 2.0 * diff / n;
          if (w_ssim != 0) {
            // d/dy_i of (a b)/(c d) via logarithmic derivative.
            const double da = 2.0 * m.mx / n;
            const double db = 2.0 * (static_cast<double>(ref[i]) - m.mx) / n;
            const double dc = 2.0 * m.my / n;
            const double dd = 2.0 * (static_cast<double>(yv[i]) - m.my) / n;
            const double ds = s * (da / terms.a + db / terms.b - dc / terms.c - dd / terms.d);
            d -= w_ssim * ds;
          }
          gy[i] += static_cast<T>(g * d);
        }
      });
}

template ad::NodeId loss_node(ad::Tape<float>&, ad::NodeId, std::span<const float>, const LossConfig&);
template ad::NodeId loss_node(ad::Tape<double>&, ad::NodeId, std::span<const double>, const LossConfig&);

}  // namespace petsynth::objective
