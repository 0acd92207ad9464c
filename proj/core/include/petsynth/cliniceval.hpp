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

// Regional CBF statistics and the clinical analyses built on them: agreement,
// correlation, threshold-based abnormality labels, ROC and confusion metrics.

#include <array>
#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "petsynth/cohort.hpp"
#include "petsynth/volgrid.hpp"

namespace petsynth::clinic {

constexpr int kTerritories = TerritoryMask::kTerritories;

enum class Source : std::uint8_t { TruePET, SyntheticPET, SD_CBF, MD_CBF };
std::string_view source_name(Source s);  // "true", "synthetic", "sd", "md"
Source parse_source(std::string_view name);

struct RegionalCBF {
  std::string subject_id;
  Cohort cohort = Cohort::HC;
  Condition condition = Condition::Pre;
  Source source = Source::TruePET;
  std::array<double, kTerritories> means{};  // index 0 is territory 1
};

/// Per-territory mean of one channel, accumulated in double. The channel must
/// carry a CBF role. Throws ContractError when a territory label is missing.
RegionalCBF regional_cbf(const Volume& v, const TerritoryMask& territories, int channel = 0);

struct ConditionStats {
  double mean = 0.0;
  double sd = 0.0;  // sample standard deviation
  std::size_t n = 0;
};

/// Healthy-control statistics pooled over territories and subjects, kept
/// separately per condition.
struct HCStats {
  std::map<Condition, ConditionStats> by_condition;

  /// Throws ContractError when the condition was not fitted.
  const ConditionStats& at(Condition c) const;
};

/// Fits from HC records; non-HC records are ignored. Throws ValidationError
/// if a fitted condition has fewer than two values or zero spread.
HCStats fit_hc_stats(std::span<const RegionalCBF> records);

/// Territory i is abnormal iff means[i] < mean - k * sd (strict).
std::array<bool, kTerritories> abnormality_labels(const RegionalCBF& regional, const HCStats& hc,
                                                  double k);

struct AgreementReport {
  double bias = 0.0;
  double sd_diff = 0.0;
  double loa_low = 0.0;
  double loa_high = 0.0;
  std::size_t n = 0;
  std::string cohort;
  std::string condition;
  std::string pair;
};

/// d = a - b; bias = mean(d); sd with n - 1; limits bias -/+ 1.96 sd.
AgreementReport bland_altman(std::span<const double> a, std::span<const double> b);

/// Sample Pearson correlation. Throws ValidationError for constant input.
double pearson_r(std::span<const double> a, std::span<const double> b);

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
  double threshold = 0.0;  // +inf for the origin
};

struct RocResult {
  std::vector<RocPoint> points;
  double auc = 0.0;
};

/// Higher score means more likely positive. Sweeps every distinct score as a
/// threshold (predict positive when score >= threshold); trapezoid area, so
/// tied scores count one half as in the Mann-Whitney statistic. Throws
/// ValidationError when only one class is present.
RocResult roc_auc(std::span<const double> scores, const std::vector<bool>& labels);

struct ClassificationMetrics {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  // Empty when the denominator is zero.
  std::optional<double> accuracy, sensitivity, specificity, ppv, npv;
};

ClassificationMetrics classification_metrics(const std::vector<bool>& predicted,
                                             const std::vector<bool>& truth);

// CSV emitters. Headers are fixed strings.
std::string bland_altman_csv_header();  // mean_pair,diff,cohort,condition,pair
std::string bland_altman_csv_rows(std::span<const double> a, std::span<const double> b,
                                  const std::string& cohort, const std::string& condition,
                                  const std::string& pair);
std::string roc_csv(const RocResult& roc);  // fpr,tpr,threshold

}  // namespace petsynth::clinic
