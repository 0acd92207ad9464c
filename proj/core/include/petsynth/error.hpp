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

#include <stdexcept>
#include <string>

namespace petsynth {

enum class ErrorKind {
  Io,
  Format,
  Validation,
  Shape,
  Config,
  Contract,
  Numeric,
  Generation,
};

/// Base of every exception thrown by the library. The kind lets callers map
/// failures onto exit codes without catching each subclass.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

#define PETSYNTH_DEFINE_ERROR(Name, Kind)                              \
  class Name : public Error {                                          \
   public:                                                             \
    explicit Name(const std::string& what) : Error(ErrorKind::Kind, what) {} \
  }

PETSYNTH_DEFINE_ERROR(IoError, Io);
PETSYNTH_DEFINE_ERROR(FormatError, Format);
PETSYNTH_DEFINE_ERROR(ValidationError, Validation);
PETSYNTH_DEFINE_ERROR(ShapeError, Shape);
PETSYNTH_DEFINE_ERROR(ConfigError, Config);
PETSYNTH_DEFINE_ERROR(ContractError, Contract);
PETSYNTH_DEFINE_ERROR(NumericError, Numeric);
PETSYNTH_DEFINE_ERROR(GenerationError, Generation);

#undef PETSYNTH_DEFINE_ERROR

}  // namespace petsynth
