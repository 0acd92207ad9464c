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

// Deterministic synthetic cohort: paired 8-channel MRI-like inputs, PET CBF
// targets, territory masks and abnormality labels.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "petsynth/cliniceval.hpp"
#include "petsynth/cohort.hpp"
#include "petsynth/volgrid.hpp"

namespace petsynth::phantom {

struct Lesion {
  int territory = 1;        // 1..10
  double cbf_factor = 0.5;  // multiplies latent CBF at the lesion core
  // Ellipsoid radii as a multiple of the territory's bounding half-extents.
  // Values >= 2.5 cover the whole territory.
  double extent = 1.0;
};

struct PhantomSpec {
  Dims dims{32, 32, 16};
  Cohort cohort = Cohort::HC;
  Condition condition = Condition::Pre;
  int session = 1;
  double gm_cbf_mean = 60.0;  // ml/100g/min
  double wm_cbf_mean = 20.0;
  double acz_factor = 1.4;
  // Share of the ACZ augmentation a lesion keeps (0 = no response).
  double lesion_acz_response = 0.25;
  int lesion_count = 0;  // random lesions, used when `lesions` is empty
  double lesion_factor_min = 0.3;
  double lesion_factor_max = 0.7;
  std::vector<Lesion> lesions;  // explicit placement
  double asl_noise_sd = 0.06;              // fraction of gm_cbf_mean
  double asl_bias_field_amplitude = 0.25;  // SD; MD gets 40 % of it
  double pet_noise_sd = 1.0;               // ml/100g/min
  std::uint64_t seed = 0;

  /// Throws ConfigError.
  void validate() const;
};

struct SubjectRecord {
  std::string subject_id;
  Cohort cohort = Cohort::HC;
  Condition condition = Condition::Pre;
  int session = 1;
  Volume input;       // canonical 8 channels, native units
  Volume target;      // PET_CBF, ml/100g/min
  Volume latent_cbf;  // noise-free ground truth, ml/100g/min
  Volume tissue;      // gm, wm, csf fractions as three unlabeled channels
  TerritoryMask territories;
  std::array<bool, TerritoryMask::kTerritories> abnormal_territories{};
  std::vector<Lesion> lesions;  // as placed
};

/// Throws GenerationError when lesions cannot be placed at the given dims.
SubjectRecord generate_subject(const PhantomSpec& spec, const std::string& subject_id = "subject");

/// Midline split on x, then 25/50/25 slabs along y with the middle half cut
/// in three; slab boundaries at floor(k*L/12) for k = 3, 5, 7, 9. Labels 1..5
/// (ACA, MCA1..3, PCA) on the low-x side, 6..10 on the other. Throws
/// GenerationError for an empty mask or a y-extent under 10 voxels.
TerritoryMask aspects_partition(const std::vector<std::uint8_t>& brain_mask, Dims dims);

/// Pooled HC statistics of noise-free regional latent CBF over a fixed
/// 20-subject reference population matching the spec's dims and physiology.
/// Memoized per configuration.
const clinic::HCStats& reference_hc_stats(const PhantomSpec& spec);

struct CohortCounts {
  int hc = 1;
  int pt = 1;
  int hc_sessions = 1;  // 2 adds a second pre-ACZ session for each HC
  int generalization_hc = 0;
  int generalization_pt = 0;
};

struct ManifestEntry {
  std::string subject_id;
  Cohort cohort = Cohort::HC;
  int session = 1;
  Condition condition = Condition::Pre;
  std::string split;  // "development" or "generalization"
  std::string input;  // paths relative to the manifest directory
  std::string target;
  std::string labels;
  std::array<bool, TerritoryMask::kTerritories> abnormal_territories{};
};

inline constexpr const char* kManifestName = "manifest.jsonl";

/// Generates every record, writes NVL1/NLB1 files under out_dir/subjects and
/// out_dir/manifest.jsonl. PT subjects draw 1..3 lesions unless the template
/// fixes lesion_count or lesions. Throws IoError, ConfigError.
std::vector<ManifestEntry> build_cohort(const CohortCounts& counts, const PhantomSpec& tmpl,
                                        std::uint64_t seed, const std::filesystem::path& out_dir);

/// File stem shared by a record's volumes, e.g. "HC001_ses1_pre".
std::string record_stem(const ManifestEntry& e);
std::string manifest_line(const ManifestEntry& e);
/// Throws IoError, FormatError.
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& dir);

/// Inputs and target of one manifest entry, roles restored.
struct LoadedRecord {
  ManifestEntry entry;
  Volume input;
  Volume target;
  TerritoryMask territories;
};
LoadedRecord load_record(const std::filesystem::path& dir, const ManifestEntry& e);

}  // namespace petsynth::phantom
