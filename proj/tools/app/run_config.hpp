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

// RunConfig: the JSON document every command reads. Unknown keys are
// rejected at every level; all fields default except io paths and seed.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "petsynth/phantom.hpp"
#include "petsynth/synthnet.hpp"
#include "petsynth/trainer.hpp"

namespace petsynth::app {

struct EvaluationConfig {
  std::vector<int> k = {2, 3, 4};
  std::vector<std::string> sources = {"synthetic", "sd", "md"};
};

struct IoConfig {
  std::optional<std::filesystem::path> data;
  std::optional<std::filesystem::path> out;
  std::optional<std::filesystem::path> report;
};

struct RunConfig {
  phantom::PhantomSpec phantom;
  phantom::CohortCounts cohort{12, 8, 1, 8, 8};
  std::string preset = "desk";
  net::NetworkConfig network = net::NetworkConfig::desk();
  train::TrainConfig training;
  int k_folds = 5;
  EvaluationConfig evaluation;
  IoConfig io;
  std::optional<std::uint64_t> seed;
};

/// Throws ConfigError on unknown keys, wrong types or invalid values.
RunConfig parse_run_config(const nlohmann::json& doc);
/// Throws IoError when unreadable, ConfigError when malformed.
RunConfig load_run_config(const std::filesystem::path& path);

nlohmann::ordered_json network_to_json(const net::NetworkConfig& cfg);
/// Inverse of network_to_json; throws ConfigError.
net::NetworkConfig network_from_json(const nlohmann::json& j);

}  // namespace petsynth::app
