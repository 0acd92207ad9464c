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

#include <cstdint>
#include <string_view>

namespace petsynth {

enum class Cohort : std::uint8_t { HC, PT };
enum class Condition : std::uint8_t { Pre, Post };

std::string_view cohort_name(Cohort c);      // "HC", "PT"
std::string_view condition_name(Condition c);  // "pre", "post"
/// Both throw ConfigError for unknown names.
Cohort parse_cohort(std::string_view name);
Condition parse_condition(std::string_view name);

}  // namespace petsynth
