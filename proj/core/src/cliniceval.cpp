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

#include "petsynth/cliniceval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

#include "petsynth/error.hpp"

namespace petsynth {

std::string_view cohort_name(Cohort c) { return c == Cohort::HC ? "HC" : "PT"; }
std::string_view condition_name(Condition c) { return c == Condition::Pre ? "pre" : "post"; }

Cohort parse_cohort(std::string_view name) {
  if (name == "HC") return Cohort::HC;
  if (name == "PT") return Cohort::PT;
  throw ConfigError("unknown cohort '" + std::string(name) + "'");
}

Condition parse_condition(std::string_view name) {
  if (name == "pre") return Condition::Pre;
  if (name == "post") return Condition::Post;
  throw ConfigError("unknown condition '" + std::string(name) + "'");
}

}  // namespace petsynth

namespace petsynth::clinic {

namespace {

void require_paired(std::span<const double> a, std::span<const double> b, const char* what) {
  if (a.size() != b.size())
    throw ShapeError(std::string(what) + ": length mismatch " + std::to_string(a.size()) + " vs " +
                     std::to_string(b.size()));
  if (a.size() < 2) throw ContractError(std::string(what) + " needs at least two pairs");
}

double mean_of(std::span<const double> v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

std::string_view source_name(Source s) {
  switch (s) {
    case Source::TruePET: return "true";
    case Source::SyntheticPET: return "synthetic";
    case Source::SD_CBF: return "sd";
    case Source::MD_CBF: return "md";
  }
  return "?";
}

Source parse_source(std::string_view name) {
  if (name == "true") return Source::TruePET;
  if (name == "synthetic") return Source::SyntheticPET;
  if (name == "sd") return Source::SD_CBF;
  if (name == "md") return Source::MD_CBF;
  throw ConfigError("unknown source '" + std::string(name) + "'");
}

RegionalCBF regional_cbf(const Volume& v, const TerritoryMask& territories, int channel) {
  if (v.dims() != territories.dims())
    throw ShapeError("regional_cbf: volume " + to_string(v.dims()) + " vs mask " +
                     to_string(territories.dims()));
  if (channel < 0 || channel >= v.channels())
    throw ContractError("regional_cbf: channel " + std::to_string(channel) + " out of range");
  const auto role = v.roles()[static_cast<std::size_t>(channel)];
  if (!is_cbf(role) && role != ChannelRole::PET_CBF)
    throw ContractError("regional_cbf: channel role " + std::string(role_name(role)) + " is not CBF");

  std::array<double, kTerritories> sum{};
  std::array<std::size_t, kTerritories> count{};
  const auto labels = territories.labels();
  const auto data = v.data();
  const auto stride = static_cast<std::size_t>(v.channels());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int l = labels[i];
    if (l == 0) continue;
    sum[static_cast<std::size_t>(l - 1)] += data[i * stride + static_cast<std::size_t>(channel)];
    ++count[static_cast<std::size_t>(l - 1)];
  }
  RegionalCBF out;
  for (int t = 0; t < kTerritories; ++t) {
    const auto ti = static_cast<std::size_t>(t);
    if (count[ti] == 0) throw ContractError("regional_cbf: territory " + std::to_string(t + 1) + " is empty");
    out.means[ti] = sum[ti] / static_cast<double>(count[ti]);
  }
  return out;
}

const ConditionStats& HCStats::at(Condition c) const {
  const auto it = by_condition.find(c);
  if (it == by_condition.end())
    throw ContractError("no HC statistics for condition " + std::string(condition_name(c)));
  return it->second;
}

HCStats fit_hc_stats(std::span<const RegionalCBF> records) {
  std::map<Condition, std::vector<double>> pooled;
  for (const auto& r : records) {
    if (r.cohort != Cohort::HC) continue;
    auto& bucket = pooled[r.condition];
    bucket.insert(bucket.end(), r.means.begin(), r.means.end());
  }
  HCStats out;
  for (const auto& [cond, values] : pooled) {
    if (values.size() < 2) throw ValidationError("HC statistics need at least two values");
    const double m = mean_of(values);
    double ss = 0.0;
    for (double v : values) ss += (v - m) * (v - m);
    const double sd = std::sqrt(ss / static_cast<double>(values.size() - 1));
    if (!(sd > 0.0))
      throw ValidationError("HC regional CBF has zero spread for condition " +
                            std::string(condition_name(cond)));
    out.by_condition[cond] = {m, sd, values.size()};
  }
  return out;
}

std::array<bool, kTerritories> abnormality_labels(const RegionalCBF& regional, const HCStats& hc,
                                                  double k) {
  if (!(k > 0.0)) throw ContractError("abnormality threshold k must be positive");
  const auto& s = hc.at(regional.condition);
  const double threshold = s.mean - k * s.sd;
  std::array<bool, kTerritories> out{};
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = regional.means[i] < threshold;
  return out;
}

AgreementReport bland_altman(std::span<const double> a, std::span<const double> b) {
  require_paired(a, b, "bland_altman");
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  AgreementReport r;
  r.n = d.size();
  r.bias = mean_of(d);
  double ss = 0.0;
  for (double v : d) ss += (v - r.bias) * (v - r.bias);
  r.sd_diff = std::sqrt(ss / static_cast<double>(d.size() - 1));
  r.loa_low = r.bias - 1.96 * r.sd_diff;
  r.loa_high = r.bias + 1.96 * r.sd_diff;
  return r;
}

double pearson_r(std::span<const double> a, std::span<const double> b) {
  require_paired(a, b, "pearson_r");
  const double ma = mean_of(a), mb = mean_of(b);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma, db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa == 0.0 || sbb == 0.0) throw ValidationError("pearson_r: constant input, correlation undefined");
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

RocResult roc_auc(std::span<const double> scores, const std::vector<bool>& labels) {
  if (scores.size() != labels.size())
    throw ShapeError("roc_auc: " + std::to_string(scores.size()) + " scores vs " +
                     std::to_string(labels.size()) + " labels");
  std::size_t pos = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!std::isfinite(scores[i])) throw ValidationError("roc_auc: non-finite score");
    pos += labels[i] ? 1 : 0;
  }
  const std::size_t neg = labels.size() - pos;
  if (pos == 0 || neg == 0) throw ValidationError("roc_auc: labels contain a single class, AUC undefined");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](auto i, auto j) { return scores[i] > scores[j]; });

  RocResult out;
  out.points.push_back({0.0, 0.0, std::numeric_limits<double>::infinity()});
  // Twice the area in units of pos*neg, kept integral until the end.
  std::uint64_t area2 = 0;
  std::uint64_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double s = scores[order[i]];
    const std::uint64_t tp0 = tp, fp0 = fp;
    for (; i < order.size() && scores[order[i]] == s; ++i) (labels[order[i]] ? tp : fp) += 1;
    area2 += (fp - fp0) * (tp + tp0);
    out.points.push_back({static_cast<double>(fp) / static_cast<double>(neg),
                          static_cast<double>(tp) / static_cast<double>(pos), s});
  }
  out.auc = static_cast<double>(area2) / (2.0 * static_cast<double>(pos) * static_cast<double>(neg));
  return out;
}

ClassificationMetrics classification_metrics(const std::vector<bool>& predicted,
                                             const std::vector<bool>& truth) {
  if (predicted.size() != truth.size())
    throw ShapeError("classification_metrics: length mismatch");
  ClassificationMetrics m;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (predicted[i]) (truth[i] ? m.tp : m.fp) += 1;
    else (truth[i] ? m.fn : m.tn) += 1;
  }
  const auto ratio = [](std::size_t num, std::size_t den) -> std::optional<double> {
    if (den == 0) return std::nullopt;
    return static_cast<double>(num) / static_cast<double>(den);
  };
  m.accuracy = ratio(m.tp + m.tn, truth.size());
  m.sensitivity = ratio(m.tp, m.tp + m.fn);
  m.specificity = ratio(m.tn, m.tn + m.fp);
  m.ppv = ratio(m.tp, m.tp + m.fp);
  m.npv = ratio(m.tn, m.tn + m.fn);
  return m;
}

std::string bland_altman_csv_header() { return "mean_pair,diff,cohort,condition,pair"; }

std::string bland_altman_csv_rows(std::span<const double> a, std::span<const double> b,
                                  const std::string& cohort, const std::string& condition,
                                  const std::string& pair) {
  if (a.size() != b.size()) throw ShapeError("bland_altman_csv_rows: length mismatch");
  std::string out;
  for (std::size_t i = 0; i < a.size(); ++i)
    out += fmt(0.5 * (a[i] + b[i])) + "," + fmt(a[i] - b[i]) + "," + cohort + "," + condition + "," +
           pair + "\n";
  return out;
}

std::string roc_csv(const RocResult& roc) {
  std::string out = "fpr,tpr,threshold\n";
  for (const auto& p : roc.points)
    out += fmt(p.fpr) + "," + fmt(p.tpr) + "," + (std::isinf(p.threshold) ? std::string("inf") : fmt(p.threshold)) + "\n";
  return out;
}

}  // namespace petsynth::clinic
