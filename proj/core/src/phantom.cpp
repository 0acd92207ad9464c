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

#include "petsynth/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <mutex>
#include <numbers>
#include <random>
#include <sstream>

#include <json.hpp>

#include "petsynth/error.hpp"

namespace petsynth::phantom {

namespace fs = std::filesystem;

namespace {

constexpr int kT = TerritoryMask::kTerritories;
constexpr int kReferenceSubjects = 20;
constexpr double kAbnormalK = 3.0;

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

std::uint64_t mix(std::uint64_t a, std::uint64_t b) { return splitmix(a ^ splitmix(b)); }

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

// Sum of a few random low-frequency cosines, scaled so |f| <= 1.
class LowFreq {
 public:
  explicit LowFreq(std::mt19937_64& rng, int terms = 6) {
    double total = 0.0;
    for (int i = 0; i < terms; ++i) {
      Wave w;
      do {
        w.k = {static_cast<double>(static_cast<int>(rng() % 5) - 2),
               static_cast<double>(static_cast<int>(rng() % 5) - 2),
               static_cast<double>(static_cast<int>(rng() % 3) - 1)};
      } while (w.k[0] == 0 && w.k[1] == 0 && w.k[2] == 0);
      w.phase = uniform(rng, 0.0, 2 * std::numbers::pi);
      w.amp = uniform(rng, 0.5, 1.0);
      total += w.amp;
      waves_.push_back(w);
    }
    for (auto& w : waves_) w.amp /= total;
  }

  // u, v, w in [0, 1].
  double operator()(double u, double v, double w) const {
    double s = 0.0;
    for (const auto& wave : waves_)
      s += wave.amp *
           std::cos(2 * std::numbers::pi * (wave.k[0] * u + wave.k[1] * v + wave.k[2] * w) + wave.phase);
    return s;
  }

 private:
  struct Wave {
    std::array<double, 3> k{};
    double phase = 0.0;
    double amp = 0.0;
  };
  std::vector<Wave> waves_;
};

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

double ellipsoid_radius(double x, double y, double z, const std::array<double, 3>& c,
                        const std::array<double, 3>& r) {
  const double a = (x - c[0]) / r[0], b = (y - c[1]) / r[1], d = (z - c[2]) / r[2];
  return std::sqrt(a * a + b * b + d * d);
}

// Everything that does not depend on condition or session.
struct Anatomy {
  Dims dims;
  std::vector<double> gm, wm, csf, brain;  // fractions; brain = gm + wm + csf
  std::vector<double> base_cbf;            // pre-ACZ, unlesioned
  std::vector<double> att_base;            // ms
  std::vector<double> bias_sd, bias_md, bias_struct;  // multiplicative, centred on 1
  double gain_sd = 1.0, gain_md = 1.0;                 // global ASL calibration error
  TerritoryMask territories;
};

Anatomy build_anatomy(const PhantomSpec& spec) {
  std::mt19937_64 rng(mix(spec.seed, 0xA11A));
  const Dims dims = spec.dims;
  Anatomy a;
  a.dims = dims;
  const std::array<double, 3> centre{(dims.h - 1) / 2.0, (dims.w - 1) / 2.0, (dims.d - 1) / 2.0};
  const std::array<double, 3> radii{0.44 * dims.h * uniform(rng, 0.96, 1.04),
                                    0.46 * dims.w * uniform(rng, 0.96, 1.04),
                                    0.42 * dims.d * uniform(rng, 0.96, 1.04)};
  const LowFreq thickness(rng), hetero(rng), att_field(rng), sd_field(rng), md_field(rng), struct_field(rng);
  const double scale = uniform(rng, 0.94, 1.06);
  a.gain_sd = uniform(rng, 0.85, 1.15);
  a.gain_md = uniform(rng, 0.95, 1.05);

  // Ventricles and deep grey nuclei, mirrored across the midline.
  auto offset = [&](double fx, double fy, double fz) {
    return std::array<double, 3>{centre[0] + fx * radii[0], centre[1] + fy * radii[1], centre[2] + fz * radii[2]};
  };
  const std::array<double, 3> vent_r{0.12 * radii[0], 0.35 * radii[1], 0.22 * radii[2]};
  const std::array<double, 3> deep_r{0.16 * radii[0], 0.2 * radii[1], 0.28 * radii[2]};
  const std::array<std::array<double, 3>, 2> vents{offset(-0.18, 0.05, 0.05), offset(0.18, 0.05, 0.05)};
  const std::array<std::array<double, 3>, 2> deeps{offset(-0.4, -0.05, 0.0), offset(0.4, -0.05, 0.0)};

  const std::size_t n = dims.voxels();
  for (auto* v : {&a.gm, &a.wm, &a.csf, &a.brain, &a.base_cbf, &a.att_base, &a.bias_sd, &a.bias_md,
                  &a.bias_struct})
    v->assign(n, 0.0);
  std::vector<std::uint8_t> mask(n, 0);
  const double amp_sd = spec.asl_bias_field_amplitude, amp_md = 0.4 * spec.asl_bias_field_amplitude;

  std::size_t i = 0;
  for (int z = 0; z < dims.d; ++z)
    for (int y = 0; y < dims.w; ++y)
      for (int x = 0; x < dims.h; ++x, ++i) {
        const double u = (x + 0.5) / dims.h, v = (y + 0.5) / dims.w, w = (z + 0.5) / dims.d;
        const double r = ellipsoid_radius(x, y, z, centre, radii);
        const double b = clamp01((1.0 - r) / 0.08 + 0.5);
        a.bias_sd[i] = 1.0 + amp_sd * sd_field(u, v, w);
        a.bias_md[i] = 1.0 + amp_md * md_field(u, v, w);
        a.bias_struct[i] = 1.0 + 0.05 * struct_field(u, v, w);
        if (b <= 0.0) continue;
        mask[i] = r <= 1.0 ? 1 : 0;

        const double t = 0.24 + 0.06 * thickness(u, v, w);
        double g = clamp01((r - (1.0 - t)) / 0.1 + 0.5);
        for (const auto& c : deeps) g = std::max(g, clamp01(2.0 * (1.0 - ellipsoid_radius(x, y, z, c, deep_r))));
        double csf = 0.6 * clamp01((r - 0.9) / 0.1);
        for (const auto& c : vents) csf = std::max(csf, clamp01(2.5 * (1.0 - ellipsoid_radius(x, y, z, c, vent_r))));
        const double gm = (1.0 - csf) * g;
        const double wm = (1.0 - csf) - gm;
        a.gm[i] = b * gm;
        a.wm[i] = b * wm;
        a.csf[i] = b * csf;
        a.brain[i] = b;
        a.base_cbf[i] = scale * (spec.gm_cbf_mean * a.gm[i] * (1.0 + 0.08 * hetero(u, v, w)) +
                                 spec.wm_cbf_mean * a.wm[i]);
        const double dy = (y - centre[1]) / radii[1];
        const double wm_share = wm / std::max(gm + wm, 1e-9);
        a.att_base[i] = b * (1000.0 + 200.0 * att_field(u, v, w) + 350.0 * dy * dy + 300.0 * wm_share);
      }
  a.territories = aspects_partition(mask, dims);
  return a;
}

struct Bounds {
  std::array<int, 3> lo{1 << 30, 1 << 30, 1 << 30};
  std::array<int, 3> hi{-1, -1, -1};
  std::size_t count = 0;
};

std::array<Bounds, kT> territory_bounds(const TerritoryMask& m) {
  std::array<Bounds, kT> out;
  const Dims d = m.dims();
  for (int z = 0; z < d.d; ++z)
    for (int y = 0; y < d.w; ++y)
      for (int x = 0; x < d.h; ++x) {
        const int l = m.at(x, y, z);
        if (l == 0) continue;
        auto& b = out[static_cast<std::size_t>(l - 1)];
        const std::array<int, 3> p{x, y, z};
        for (int k = 0; k < 3; ++k) {
          b.lo[static_cast<std::size_t>(k)] = std::min(b.lo[static_cast<std::size_t>(k)], p[static_cast<std::size_t>(k)]);
          b.hi[static_cast<std::size_t>(k)] = std::max(b.hi[static_cast<std::size_t>(k)], p[static_cast<std::size_t>(k)]);
        }
        ++b.count;
      }
  return out;
}

struct Pathology {
  std::vector<Lesion> lesions;
  std::vector<double> cbf_mult;   // pre-ACZ multiplier, 1 outside lesions
  std::vector<double> weight;     // strongest lesion weight per voxel
  std::array<double, kT> delay{};  // ms added to ATT per territory
};

Pathology place_pathology(const PhantomSpec& spec, const Anatomy& a) {
  Pathology p;
  const std::size_t n = a.dims.voxels();
  p.cbf_mult.assign(n, 1.0);
  p.weight.assign(n, 0.0);
  if (spec.cohort == Cohort::HC) return p;

  std::mt19937_64 rng(mix(spec.seed, 0x1E51));
  std::vector<int> order(kT);
  for (int t = 0; t < kT; ++t) order[static_cast<std::size_t>(t)] = t + 1;
  std::shuffle(order.begin(), order.end(), rng);

  if (!spec.lesions.empty()) {
    p.lesions = spec.lesions;
  } else {
    for (int l = 0; l < spec.lesion_count; ++l) {
      Lesion les;
      les.territory = order[static_cast<std::size_t>(l)];
      les.cbf_factor = uniform(rng, spec.lesion_factor_min, spec.lesion_factor_max);
      les.extent = uniform(rng, 1.0, 2.5);
      p.lesions.push_back(les);
    }
  }
  // Collateral supply delays transit in one to three territories, drawn
  // independently of the lesions.
  std::vector<int> pick(order);
  std::shuffle(pick.begin(), pick.end(), rng);
  const int delayed = 1 + static_cast<int>(rng() % 3);
  for (int c = 0; c < delayed; ++c)
    p.delay[static_cast<std::size_t>(pick[static_cast<std::size_t>(c)] - 1)] = uniform(rng, 800.0, 1500.0);

  const auto bounds = territory_bounds(a.territories);
  const Dims d = a.dims;
  for (const auto& les : p.lesions) {
    const auto& b = bounds[static_cast<std::size_t>(les.territory - 1)];
    if (b.count < 8)
      throw GenerationError("territory " + std::to_string(les.territory) + " has " + std::to_string(b.count) +
                            " voxels, too small for a lesion at dims " + to_string(d));
    std::array<double, 3> c{}, r{};
    for (std::size_t k = 0; k < 3; ++k) {
      c[k] = 0.5 * (b.lo[k] + b.hi[k]);
      r[k] = les.extent * std::max(0.5 * (b.hi[k] - b.lo[k] + 1), 1.0);
    }
    std::size_t i = 0;
    for (int z = 0; z < d.d; ++z)
      for (int y = 0; y < d.w; ++y)
        for (int x = 0; x < d.h; ++x, ++i) {
          if (a.territories.labels()[i] != les.territory) continue;
          const double w = clamp01((1.0 - ellipsoid_radius(x, y, z, c, r)) / 0.25);
          if (w <= 0.0) continue;
          p.cbf_mult[i] *= 1.0 - w * (1.0 - les.cbf_factor);
          p.weight[i] = std::max(p.weight[i], w);
        }
  }
  return p;
}

std::vector<double> latent_field(const PhantomSpec& spec, const Anatomy& a, const Pathology& p) {
  std::vector<double> out(a.base_cbf.size());
  const double acz = spec.acz_factor;
  const double blunted = 1.0 + (acz - 1.0) * spec.lesion_acz_response;
  for (std::size_t i = 0; i < out.size(); ++i) {
    double v = a.base_cbf[i] * p.cbf_mult[i];
    if (spec.condition == Condition::Post) v *= acz + (blunted - acz) * p.weight[i];
    out[i] = v;
  }
  return out;
}

std::vector<float> to_float(const std::vector<double>& v) {
  return std::vector<float>(v.begin(), v.end());
}

Volume cbf_volume(const Dims& dims, const std::vector<double>& v) {
  return Volume(dims, {ChannelRole::PET_CBF}, {VoxelUnit::MlPer100gPerMin}, to_float(v));
}

clinic::RegionalCBF latent_regional(const PhantomSpec& spec, const Anatomy& a, const std::vector<double>& latent) {
  auto r = clinic::regional_cbf(cbf_volume(a.dims, latent), a.territories);
  r.cohort = spec.cohort;
  r.condition = spec.condition;
  r.source = clinic::Source::TruePET;
  return r;
}

std::string reference_key(const PhantomSpec& s) {
  char buf[200];
  std::snprintf(buf, sizeof buf, "%d,%d,%d|%.17g|%.17g|%.17g", s.dims.h, s.dims.w, s.dims.d, s.gm_cbf_mean,
                s.wm_cbf_mean, s.acz_factor);
  return buf;
}

}  // namespace

void PhantomSpec::validate() const {
  if (!dims.positive()) throw ConfigError("phantom dims must be positive, got " + to_string(dims));
  if (!(gm_cbf_mean > 0 && wm_cbf_mean > 0 && acz_factor > 0))
    throw ConfigError("phantom CBF means and ACZ factor must be positive");
  if (!(lesion_acz_response >= 0 && lesion_acz_response <= 1))
    throw ConfigError("lesion_acz_response must lie in [0, 1]");
  if (lesion_count < 0 || lesion_count > 3) throw ConfigError("lesion_count must lie in 0..3");
  if (!(lesion_factor_min > 0 && lesion_factor_min <= lesion_factor_max && lesion_factor_max <= 1))
    throw ConfigError("lesion factor range must satisfy 0 < min <= max <= 1");
  if (cohort == Cohort::HC && (lesion_count != 0 || !lesions.empty()))
    throw ConfigError("healthy controls carry no lesions");
  for (const auto& l : lesions) {
    if (l.territory < 1 || l.territory > kT) throw ConfigError("lesion territory must lie in 1..10");
    if (!(l.cbf_factor > 0 && l.cbf_factor <= 1)) throw ConfigError("lesion cbf_factor must lie in (0, 1]");
    if (!(l.extent > 0)) throw ConfigError("lesion extent must be positive");
  }
  if (!(asl_noise_sd >= 0 && pet_noise_sd >= 0)) throw ConfigError("noise levels must be non-negative");
  if (!(asl_bias_field_amplitude >= 0 && asl_bias_field_amplitude < 1))
    throw ConfigError("asl_bias_field_amplitude must lie in [0, 1)");
  if (session < 1) throw ConfigError("session numbers start at 1");
}

TerritoryMask aspects_partition(const std::vector<std::uint8_t>& brain_mask, Dims dims) {
  if (brain_mask.size() != dims.voxels()) throw ShapeError("brain mask size does not match " + to_string(dims));
  int xmin = dims.h, xmax = -1, ymin = dims.w, ymax = -1;
  std::size_t i = 0;
  for (int z = 0; z < dims.d; ++z)
    for (int y = 0; y < dims.w; ++y)
      for (int x = 0; x < dims.h; ++x, ++i)
        if (brain_mask[i]) {
          xmin = std::min(xmin, x), xmax = std::max(xmax, x);
          ymin = std::min(ymin, y), ymax = std::max(ymax, y);
        }
  if (xmax < 0) throw GenerationError("territory partition needs a nonempty brain mask");
  const int len = ymax - ymin + 1;
  if (len < 10)
    throw GenerationError("brain mask spans " + std::to_string(len) + " voxels along y; at least 10 are needed");
  const std::array<int, 4> cut{3 * len / 12, 5 * len / 12, 7 * len / 12, 9 * len / 12};

  std::vector<std::uint8_t> labels(brain_mask.size(), 0);
  i = 0;
  for (int z = 0; z < dims.d; ++z)
    for (int y = 0; y < dims.w; ++y)
      for (int x = 0; x < dims.h; ++x, ++i) {
        if (!brain_mask[i]) continue;
        const int o = y - ymin;
        int slab = 0;
        while (slab < 4 && o >= cut[static_cast<std::size_t>(slab)]) ++slab;
        const bool low_x = 2 * x < xmin + xmax + 1;
        labels[i] = static_cast<std::uint8_t>(slab + 1 + (low_x ? 0 : 5));
      }
  TerritoryMask out(dims, std::move(labels));
  if (!out.has_all_territories())
    throw GenerationError("brain mask too narrow along x to split into hemispheres");
  return out;
}

const clinic::HCStats& reference_hc_stats(const PhantomSpec& spec) {
  static std::mutex mu;
  static std::map<std::string, clinic::HCStats> cache;
  const auto key = reference_key(spec);
  std::lock_guard lock(mu);
  if (auto it = cache.find(key); it != cache.end()) return it->second;

  std::vector<clinic::RegionalCBF> regional;
  for (int s = 0; s < kReferenceSubjects; ++s) {
    PhantomSpec ref;
    ref.dims = spec.dims;
    ref.gm_cbf_mean = spec.gm_cbf_mean;
    ref.wm_cbf_mean = spec.wm_cbf_mean;
    ref.acz_factor = spec.acz_factor;
    ref.seed = mix(0x5EEDF00Dull, static_cast<std::uint64_t>(s));
    const auto anatomy = build_anatomy(ref);
    const Pathology none = place_pathology(ref, anatomy);
    for (Condition c : {Condition::Pre, Condition::Post}) {
      ref.condition = c;
      regional.push_back(latent_regional(ref, anatomy, latent_field(ref, anatomy, none)));
    }
  }
  return cache.emplace(key, clinic::fit_hc_stats(regional)).first->second;
}

SubjectRecord generate_subject(const PhantomSpec& spec, const std::string& subject_id) {
  spec.validate();
  const Anatomy a = build_anatomy(spec);
  const Pathology path = place_pathology(spec, a);
  const std::vector<double> latent = latent_field(spec, a, path);

  SubjectRecord rec;
  rec.subject_id = subject_id;
  rec.cohort = spec.cohort;
  rec.condition = spec.condition;
  rec.session = spec.session;
  rec.territories = a.territories;
  rec.lesions = path.lesions;
  rec.latent_cbf = cbf_volume(a.dims, latent);
  {
    std::vector<float> t(a.dims.voxels() * 3);
    for (std::size_t i = 0; i < a.dims.voxels(); ++i) {
      t[3 * i] = static_cast<float>(a.gm[i]);
      t[3 * i + 1] = static_cast<float>(a.wm[i]);
      t[3 * i + 2] = static_cast<float>(a.csf[i]);
    }
    rec.tissue = Volume(a.dims, std::vector<ChannelRole>(3, ChannelRole::Unlabeled), std::move(t));
  }
  rec.abnormal_territories =
      clinic::abnormality_labels(latent_regional(spec, a, latent), reference_hc_stats(spec), kAbnormalK);

  const std::uint64_t noise_seed =
      mix(mix(spec.seed, static_cast<std::uint64_t>(spec.condition) + 1), static_cast<std::uint64_t>(spec.session));
  std::mt19937_64 rng(noise_seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  const std::size_t n = a.dims.voxels();
  constexpr std::size_t C = kCanonicalInputs.size();
  std::vector<float> input(n * C);
  std::vector<double> pet(n);
  const double sd_sigma = 1.5 * spec.asl_noise_sd * spec.gm_cbf_mean;
  const double md_sigma = spec.asl_noise_sd * spec.gm_cbf_mean;
  const double att_scale = spec.condition == Condition::Post ? 0.85 : 1.0;
  const double steal = spec.condition == Condition::Post ? 1.25 : 1.0;

  for (std::size_t i = 0; i < n; ++i) {
    const double b = a.brain[i];
    // Fixed draw count per voxel keeps the stream aligned across specs.
    std::array<double, 8> e{};
    for (auto& v : e) v = normal(rng);
    const double gm = a.gm[i], wm = a.wm[i], csf = a.csf[i];
    const double les = path.weight[i] * (gm + wm);
    const int label = a.territories.labels()[i];
    // ACZ shortens normal transit and lengthens collateral delay (steal).
    double att = a.att_base[i] * att_scale;
    if (label > 0) att += path.delay[static_cast<std::size_t>(label - 1)] * steal;
    // Late-arriving label is undercounted, more so with a single delay.
    const double sd_transit = a.gain_sd * std::exp(-std::max(0.0, att - 1200.0) / 700.0);
    const double md_transit = a.gain_md * std::exp(-std::max(0.0, att - 1500.0) / 700.0);
    const double cbf = latent[i];
    const double sb = a.bias_struct[i];

    float* out = &input[i * C];
    out[0] = static_cast<float>(std::max(0.0, sb * (0.15 * csf + 0.65 * gm + 1.0 * wm - 0.1 * les) + 0.01 * b * e[0]));
    out[1] = static_cast<float>(std::max(0.0, sb * (0.1 * csf + 0.75 * gm + 0.55 * wm + 0.3 * les) + 0.01 * b * e[1]));
    out[2] = static_cast<float>(std::max(
        0.0, cbf * sd_transit * std::exp(-att / 1600.0) * a.bias_sd[i] / spec.gm_cbf_mean + 0.75 * spec.asl_noise_sd * b * e[2]));
    out[3] = static_cast<float>(std::max(
        0.0, cbf * md_transit * std::exp(-att / 4000.0) * a.bias_md[i] / spec.gm_cbf_mean + 0.5 * spec.asl_noise_sd * b * e[3]));
    out[4] = static_cast<float>(std::max(0.0, sb * (1.0 * csf + 0.85 * gm + 0.7 * wm) + 0.01 * b * e[4]));
    out[5] = static_cast<float>(att);
    out[6] = static_cast<float>(std::max(0.0, cbf * sd_transit * a.bias_sd[i] + sd_sigma * b * e[5]));
    out[7] = static_cast<float>(std::max(0.0, cbf * md_transit * a.bias_md[i] + md_sigma * b * e[6]));
    pet[i] = std::max(0.0, cbf + spec.pet_noise_sd * b * e[7]);
  }
  rec.input = Volume(a.dims, {kCanonicalInputs.begin(), kCanonicalInputs.end()}, std::move(input));
  rec.target = cbf_volume(a.dims, pet);
  return rec;
}

// ---------------------------------------------------------------------------
// Cohort files

namespace {

using ojson = nlohmann::ordered_json;

std::string record_stem(const std::string& id, int session, Condition c) {
  return id + "_ses" + std::to_string(session) + "_" + std::string(condition_name(c));
}

std::string subject_id(const char* prefix, Cohort c, int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%s%03d", prefix, std::string(cohort_name(c)).c_str(), index + 1);
  return buf;
}

}  // namespace

std::string record_stem(const ManifestEntry& e) { return record_stem(e.subject_id, e.session, e.condition); }

std::string manifest_line(const ManifestEntry& e) {
  ojson j;
  j["subject_id"] = e.subject_id;
  j["cohort"] = cohort_name(e.cohort);
  j["session"] = e.session;
  j["condition"] = condition_name(e.condition);
  j["split"] = e.split;
  j["input"] = e.input;
  j["target"] = e.target;
  j["labels"] = e.labels;
  j["abnormal_territories"] = e.abnormal_territories;
  return j.dump();
}

std::vector<ManifestEntry> build_cohort(const CohortCounts& counts, const PhantomSpec& tmpl, std::uint64_t seed,
                                        const fs::path& out_dir) {
  if (counts.hc < 1 || counts.pt < 1) throw ConfigError("cohort needs at least one HC and one PT subject");
  if (counts.generalization_hc < 0 || counts.generalization_pt < 0)
    throw ConfigError("generalization counts must be non-negative");
  if (counts.hc_sessions != 1 && counts.hc_sessions != 2) throw ConfigError("hc_sessions must be 1 or 2");
  PhantomSpec base = tmpl;
  base.lesions.clear();
  base.lesion_count = 0;
  base.cohort = Cohort::HC;
  base.validate();

  std::error_code ec;
  fs::create_directories(out_dir / "subjects", ec);
  if (ec) throw IoError("cannot create " + (out_dir / "subjects").string() + ": " + ec.message());

  struct Group {
    const char* split;
    const char* prefix;
    Cohort cohort;
    int n;
  };
  const std::array<Group, 4> groups{{{"development", "", Cohort::HC, counts.hc},
                                     {"development", "", Cohort::PT, counts.pt},
                                     {"generalization", "G", Cohort::HC, counts.generalization_hc},
                                     {"generalization", "G", Cohort::PT, counts.generalization_pt}}};
  std::vector<ManifestEntry> entries;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const auto& grp = groups[g];
    for (int s = 0; s < grp.n; ++s) {
      PhantomSpec spec = tmpl;
      spec.cohort = grp.cohort;
      spec.seed = mix(mix(seed, g), static_cast<std::uint64_t>(s));
      if (grp.cohort == Cohort::HC) {
        spec.lesions.clear();
        spec.lesion_count = 0;
      } else if (spec.lesions.empty() && spec.lesion_count == 0) {
        spec.lesion_count = 1 + static_cast<int>(mix(spec.seed, 0xC0) % 3);
      }
      const std::string id = subject_id(grp.prefix, grp.cohort, s);
      const std::string labels_rel = "subjects/" + id + "_labels.nlb";

      std::vector<std::pair<int, Condition>> visits{{1, Condition::Pre}, {1, Condition::Post}};
      if (grp.cohort == Cohort::HC && counts.hc_sessions == 2) visits.emplace_back(2, Condition::Pre);
      bool labels_written = false;
      for (const auto& [session, cond] : visits) {
        spec.session = session;
        spec.condition = cond;
        const auto rec = generate_subject(spec, id);
        const std::string stem = "subjects/" + record_stem(id, session, cond);
        ManifestEntry e;
        e.subject_id = id;
        e.cohort = grp.cohort;
        e.session = session;
        e.condition = cond;
        e.split = grp.split;
        e.input = stem + "_input.nvl";
        e.target = stem + "_target.nvl";
        e.labels = labels_rel;
        e.abnormal_territories = rec.abnormal_territories;
        write_volume(rec.input, out_dir / e.input);
        write_volume(rec.target, out_dir / e.target);
        if (!labels_written) write_labels(rec.territories, out_dir / labels_rel);
        labels_written = true;
        entries.push_back(std::move(e));
      }
    }
  }

  const fs::path manifest = out_dir / kManifestName;
  std::ofstream os(manifest, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write " + manifest.string());
  for (const auto& e : entries) os << manifest_line(e) << '\n';
  if (!os) throw IoError("write failed for " + manifest.string());
  return entries;
}

std::vector<ManifestEntry> read_manifest(const fs::path& dir) {
  const fs::path path = dir / kManifestName;
  std::ifstream is(path);
  if (!is) throw IoError("cannot open manifest " + path.string());
  std::vector<ManifestEntry> out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    try {
      const auto j = nlohmann::json::parse(line);
      ManifestEntry e;
      e.subject_id = j.at("subject_id").get<std::string>();
      e.cohort = parse_cohort(j.at("cohort").get<std::string>());
      e.session = j.at("session").get<int>();
      e.condition = parse_condition(j.at("condition").get<std::string>());
      e.split = j.at("split").get<std::string>();
      e.input = j.at("input").get<std::string>();
      e.target = j.at("target").get<std::string>();
      e.labels = j.at("labels").get<std::string>();
      const auto flags = j.at("abnormal_territories").get<std::vector<bool>>();
      if (flags.size() != static_cast<std::size_t>(kT)) throw FormatError("abnormal_territories needs 10 entries");
      std::copy(flags.begin(), flags.end(), e.abnormal_territories.begin());
      out.push_back(std::move(e));
    } catch (const nlohmann::json::exception& ex) {
      throw FormatError(where + ": " + ex.what());
    } catch (const Error& ex) {
      throw FormatError(where + ": " + ex.what());
    }
  }
  if (out.empty()) throw FormatError("manifest " + path.string() + " has no records");
  return out;
}

LoadedRecord load_record(const fs::path& dir, const ManifestEntry& e) {
  LoadedRecord r;
  r.entry = e;
  r.input = read_volume(dir / e.input, {kCanonicalInputs.begin(), kCanonicalInputs.end()});
  r.target = read_volume(dir / e.target, {ChannelRole::PET_CBF});
  r.territories = read_labels(dir / e.labels);
  if (r.input.dims() != r.target.dims() || r.input.dims() != r.territories.dims())
    throw ShapeError("record " + e.subject_id + " has mismatched volume dims");
  return r;
}

}  // namespace petsynth::phantom
