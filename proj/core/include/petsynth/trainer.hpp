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

// Nesterov-Adam optimization, subject-level k-fold splitting and the epoch
// loop with early stopping.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "petsynth/objective.hpp"
#include "petsynth/synthnet.hpp"
#include "petsynth/volgrid.hpp"

namespace petsynth::train {

struct NadamConfig {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Moments are kept in double regardless of the parameter precision.
struct OptimizerState {
  NadamConfig hp;
  std::uint64_t t = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;

  template <class T>
  static OptimizerState fresh(const net::BasicParameterSet<T>& params, NadamConfig hp = {});
};

/// One update. grads[i] pairs with params.tensors[i]. Throws NumericError on a
/// non-finite gradient, leaving params and state untouched.
template <class T>
void nadam_step(net::BasicParameterSet<T>& params, const std::vector<std::vector<T>>& grads,
                OptimizerState& state);

struct Fold {
  std::vector<std::string> train;
  std::vector<std::string> validation;
  std::vector<std::string> test;
};

struct FoldPlan {
  int k = 5;
  std::vector<Fold> folds;
};

/// Seeded shuffle, then k contiguous near-equal groups. Fold f validates on
/// group (f + k - 2) mod k, tests on group (f + k - 1) mod k and trains on the
/// rest. Throws ContractError with fewer than k subjects, k < 3 or repeated ids.
FoldPlan kfold_split(std::vector<std::string> subject_ids, int k, std::uint64_t seed);

struct Augmentation {
  bool lr_flip = false;
  double intensity_jitter_sd = 0.0;
};

struct TrainConfig {
  int max_epochs = 150;
  int early_stop_patience = 20;  // 0 disables early stopping
  int batch_size = 4;
  objective::LossConfig loss;
  NadamConfig optimizer;
  std::uint64_t shuffle_seed = 0;
  Augmentation augmentation;

  void validate() const;
};

/// One training record: normalized input channels and normalized PET target.
struct Sample {
  std::string subject_id;
  std::string condition;
  Volume input;
  Volume target;
};

struct EpochRecord {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
};

struct History {
  std::vector<EpochRecord> epochs;
  int stopped_epoch = 0;
  int best_epoch = 0;
  std::string stop_reason;  // "max_epochs", "early_stop" or "callback"

  std::string to_csv() const;  // header: epoch,train_loss,val_loss
  void write_csv(const std::filesystem::path& path) const;
};

/// Tracks the best validation loss (strict improvement) and a copy of the
/// parameters that achieved it.
class EarlyStopping {
 public:
  explicit EarlyStopping(int patience) : patience_(patience) {}

  /// Returns true when training should stop after this epoch.
  bool update(int epoch, double val_loss, const net::ParameterSet& params);

  int best_epoch() const { return best_epoch_; }
  double best_loss() const { return best_loss_; }
  const net::ParameterSet& best_params() const { return best_params_; }

 private:
  int patience_;
  int best_epoch_ = 0;
  int since_best_ = 0;
  double best_loss_ = 0.0;
  net::ParameterSet best_params_;
};

/// Called after every epoch; returning true stops training.
using EpochCallback = std::function<bool(const EpochRecord&, const net::ParameterSet&)>;

struct TrainResult {
  net::ParameterSet params;  // best-validation parameters
  History history;
};

/// Mean loss of the network over a sample set, without gradients.
double evaluate_loss(const std::vector<Sample>& samples, const net::ParameterSet& params,
                     const net::NetworkConfig& net_cfg, const objective::LossConfig& loss);

TrainResult train(const std::vector<Sample>& train_set, const std::vector<Sample>& val_set,
                  const net::NetworkConfig& net_cfg, const TrainConfig& cfg, std::uint64_t seed,
                  const EpochCallback& on_epoch = {});

}  // namespace petsynth::train
