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

// Image-quality metrics and the training loss. Throughout, x is the reference
// PET and y the synthetic one. Reductions accumulate in double.

#include <cstdint>
#include <span>
#include <string>

#include "petsynth/ad/tape.hpp"
#include "petsynth/volgrid.hpp"

namespace petsynth::objective {

enum class LossKind : std::uint8_t { Mse, Mae, Ssim, Custom };

LossKind parse_loss_kind(std::string_view name);
std::string_view loss_kind_name(LossKind kind);

struct LossConfig {
  LossKind kind = LossKind::Custom;
  double lambda_r = 0.2;  // reconstruction (MAE) weight
  double lambda_p = 0.8;  // perceptual (1 - SSIM) weight
  double ssim_k1 = 0.01;
  double ssim_k2 = 0.03;
  double dynamic_range = 1.0;

  double c1() const { return (ssim_k1 * dynamic_range) * (ssim_k1 * dynamic_range); }
  double c2() const { return (ssim_k2 * dynamic_range) * (ssim_k2 * dynamic_range); }
  void validate() const;
};

/// Optional voxel mask; an empty span means the whole volume.
using Mask = std::span<const std::uint8_t>;

double mae(std::span<const float> x, std::span<const float> y, Mask mask = {});
double mse(std::span<const float> x, std::span<const float> y, Mask mask = {});

struct RmseNrmse {
  double rmse = 0.0;
  double nrmse = 0.0;  // rmse / (x_max - x_min)
};
/// Throws ValidationError when the reference is constant (NRMSE undefined).
RmseNrmse rmse_nrmse(std::span<const float> x, std::span<const float> y, Mask mask = {});

/// Single-window SSIM from global means, population variances and covariance.
double ssim_global(std::span<const float> x, std::span<const float> y, const LossConfig& cfg,
                   Mask mask = {});

/// 10 log10(L * n / sum (x - y)^2). Returns +infinity for identical inputs.
double psnr(std::span<const float> x, std::span<const float> y, const LossConfig& cfg,
            Mask mask = {});

double composite_loss(std::span<const float> x, std::span<const float> y, const LossConfig& cfg);

// Volume overloads check that shapes agree.
double mae(const Volume& x, const Volume& y);
RmseNrmse rmse_nrmse(const Volume& x, const Volume& y);
double ssim_global(const Volume& x, const Volume& y, const LossConfig& cfg);
double psnr(const Volume& x, const Volume& y, const LossConfig& cfg);
double composite_loss(const Volume& x, const Volume& y, const LossConfig& cfg);

struct QualityReport {
  double nrmse = 0.0;
  double psnr_db = 0.0;
  double ssim = 0.0;
  std::string computed_over = "whole-volume";
};

QualityReport quality_report(const Volume& x, const Volume& y, const LossConfig& cfg,
                             Mask mask = {});

/// min(|x - y| * 3, dynamic_range) per voxel, as a single PET_CBF channel.
Volume error_map(const Volume& reference, const Volume& prediction, double dynamic_range);

/// Header and row for the per-record quality CSV.
std::string quality_csv_header();
std::string quality_csv_row(const std::string& subject_id, const std::string& condition,
                            const QualityReport& report);

/// Scalar loss node for a prediction node against a constant reference.
template <class T>
ad::NodeId loss_node(ad::Tape<T>& tape, ad::NodeId prediction, std::span<const T> reference,
                     const LossConfig& cfg);

}  // namespace petsynth::objective
