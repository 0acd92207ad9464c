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

#include "petsynth/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include "petsynth/error.hpp"

namespace petsynth::train {

template <class T>
OptimizerState OptimizerState::fresh(const net::BasicParameterSet<T>& params, NadamConfig hp) {
  OptimizerState s;
  s.hp = hp;
  for (const auto& t : params.tensors) {
    s.m.emplace_back(t.values.size(), 0.0);
    s.v.emplace_back(t.values.size(), 0.0);
  }
  return s;
}

template OptimizerState OptimizerState::fresh(const net::BasicParameterSet<float>&, NadamConfig);
template OptimizerState OptimizerState::fresh(const net::BasicParameterSet<double>&, NadamConfig);

template <class T>
void nadam_step(net::BasicParameterSet<T>& params, const std::vector<std::vector<T>>& grads,
                OptimizerState& state) {
  const std::size_t n = params.tensors.size();
  if (grads.size() != n || state.m.size() != n || state.v.size() != n)
    throw ContractError("nadam_step: parameter, gradient and state counts differ");
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t len = params.tensors[i].values.size();
    if (grads[i].size() != len || state.m[i].size() != len || state.v[i].size() != len)
      throw ContractError("nadam_step: size mismatch for '" + params.tensors[i].path + "'");
    for (T g : grads[i])
      if (!std::isfinite(static_cast<double>(g)))
        throw NumericError("non-finite gradient for '" + params.tensors[i].path + "'");
  }

  const auto& hp = state.hp;
  const double t = static_cast<double>(++state.t);
  const double m_corr_next = 1.0 - std::pow(hp.beta1, t + 1.0);
  const double g_corr = 1.0 - std::pow(hp.beta1, t);
  const double v_corr = 1.0 - std::pow(hp.beta2, t);
  for (std::size_t i = 0; i < n; ++i) {
    auto& theta = params.tensors[i].values;
    auto& m = state.m[i];
    auto& v = state.v[i];
    const auto& g = grads[i];
    for (std::size_t j = 0; j < theta.size(); ++j) {
      const double gj = static_cast<double>(g[j]);
      m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * gj;
      v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * gj * gj;
      const double m_bar = hp.beta1 * m[j] / m_corr_next + (1.0 - hp.beta1) * gj / g_corr;
      const double v_hat = v[j] / v_corr;
      theta[j] = static_cast<T>(static_cast<double>(theta[j]) -
                                hp.lr * m_bar / (std::sqrt(v_hat) + hp.eps));
    }
  }
}

template void nadam_step(net::BasicParameterSet<float>&, const std::vector<std::vector<float>>&,
                         OptimizerState&);
template void nadam_step(net::BasicParameterSet<double>&, const std::vector<std::vector<double>>&,
                         OptimizerState&);

FoldPlan kfold_split(std::vector<std::string> subject_ids, int k, std::uint64_t seed) {
  if (k < 3) throw ContractError("k-fold needs k >= 3");
  if (subject_ids.size() < static_cast<std::size_t>(k))
    throw ContractError("k-fold with k=" + std::to_string(k) + " needs at least k subjects, got " +
                        std::to_string(subject_ids.size()));
  if (std::set<std::string>(subject_ids.begin(), subject_ids.end()).size() != subject_ids.size())
    throw ContractError("k-fold subject ids must be unique");

  std::mt19937_64 rng(seed);
  std::shuffle(subject_ids.begin(), subject_ids.end(), rng);

  const std::size_t n = subject_ids.size();
  const std::size_t ku = static_cast<std::size_t>(k);
  std::vector<std::vector<std::string>> groups(ku);
  std::size_t pos = 0;
  for (std::size_t g = 0; g < ku; ++g) {
    const std::size_t len = n / ku + (g < n % ku ? 1 : 0);
    groups[g].assign(subject_ids.begin() + static_cast<std::ptrdiff_t>(pos),
                     subject_ids.begin() + static_cast<std::ptrdiff_t>(pos + len));
    pos += len;
  }

  FoldPlan plan;
  plan.k = k;
  for (int f = 0; f < k; ++f) {
    const int val = (f + k - 2) % k;
    const int test = (f + k - 1) % k;
    Fold fold;
    for (int g = 0; g < k; ++g) {
      auto& dst = g == val ? fold.validation : g == test ? fold.test : fold.train;
      const auto& src = groups[static_cast<std::size_t>(g)];
      dst.insert(dst.end(), src.begin(), src.end());
    }
    plan.folds.push_back(std::move(fold));
  }
  return plan;
}

void TrainConfig::validate() const {
  if (max_epochs < 1) throw ConfigError("max_epochs must be at least 1");
  if (early_stop_patience < 0) throw ConfigError("early_stop_patience must be >= 0");
  if (early_stop_patience > 0 && early_stop_patience >= max_epochs)
    throw ConfigError("early_stop_patience must be smaller than max_epochs");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (!(optimizer.lr > 0) || !(optimizer.eps > 0)) throw ConfigError("lr and eps must be positive");
  if (optimizer.beta1 < 0 || optimizer.beta1 >= 1 || optimizer.beta2 < 0 || optimizer.beta2 >= 1)
    throw ConfigError("Nadam betas must lie in [0, 1)");
  if (augmentation.intensity_jitter_sd < 0) throw ConfigError("jitter sd must be >= 0");
  loss.validate();
}

std::string History::to_csv() const {
  std::string out = "epoch,train_loss,val_loss\n";
  char buf[96];
  for (const auto& e : epochs) {
    std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g\n", e.epoch, e.train_loss, e.val_loss);
    out += buf;
  }
  return out;
}

void History::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << to_csv();
  if (!out) throw IoError("write failure on " + path.string());
}

bool EarlyStopping::update(int epoch, double val_loss, const net::ParameterSet& params) {
  if (best_epoch_ == 0 || val_loss < best_loss_) {
    best_epoch_ = epoch;
    best_loss_ = val_loss;
    best_params_ = params;
    since_best_ = 0;
    return false;
  }
  ++since_best_;
  return patience_ > 0 && since_best_ >= patience_;
}

namespace {

void check_sample(const Sample& s, const net::NetworkConfig& cfg) {
  if (s.input.roles() != cfg.input_channels)
    throw ShapeError("sample " + s.subject_id + "/" + s.condition +
                     ": input channels do not match the network configuration");
  if (s.target.channels() != 1 || !(s.target.dims() == s.input.dims()))
    throw ShapeError("sample " + s.subject_id + "/" + s.condition +
                     ": target must be one channel on the input grid");
  cfg.validate_dims(s.input.dims());
}

Sample augment(const Sample& s, const Augmentation& aug, std::mt19937_64& rng) {
  Sample out = s;
  if (aug.lr_flip && std::bernoulli_distribution(0.5)(rng)) {
    out.input = flip_x(out.input);
    out.target = flip_x(out.target);
  }
  if (aug.intensity_jitter_sd > 0) {
    std::normal_distribution<double> jitter(0.0, aug.intensity_jitter_sd);
    const int c = out.input.channels();
    std::vector<double> factor(static_cast<std::size_t>(c));
    for (auto& f : factor) f = std::max(0.0, 1.0 + jitter(rng));
    std::vector<float> data(out.input.data().begin(), out.input.data().end());
    for (std::size_t i = 0; i < data.size(); ++i)
      data[i] = static_cast<float>(data[i] * factor[i % static_cast<std::size_t>(c)]);
    out.input = Volume(out.input.dims(), out.input.roles(), out.input.units(), std::move(data));
  }
  return out;
}

// Forward and backward for one sample; adds the gradients into acc.
double accumulate_sample(const Sample& s, const net::ParameterSet& params,
                         const net::NetworkConfig& cfg, const objective::LossConfig& loss,
                         std::vector<std::vector<double>>& acc) {
  ad::Tape<float> tape;
  net::BoundParameters<float> bound(tape, params);
  const auto& d = s.input.dims();
  auto in = tape.input({d.h, d.w, d.d, s.input.channels()},
                       std::vector<float>(s.input.data().begin(), s.input.data().end()));
  auto out = net::forward_graph(tape, in, bound, cfg).output;
  auto l = objective::loss_node(tape, out, s.target.data(), loss);
  const double value = static_cast<double>(tape.value(l)[0]);
  if (!std::isfinite(value))
    throw NumericError("non-finite training loss on " + s.subject_id + "/" + s.condition);
  const auto grads = ad::backward(tape, l);
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    const auto g = grads[bound[params.tensors[i].path]];
    auto& a = acc[i];
    for (std::size_t j = 0; j < g.size(); ++j) a[j] += static_cast<double>(g[j]);
  }
  return value;
}

}  // namespace

double evaluate_loss(const std::vector<Sample>& samples, const net::ParameterSet& params,
                     const net::NetworkConfig& net_cfg, const objective::LossConfig& loss) {
  if (samples.empty()) throw ContractError("evaluate_loss: empty sample set");
  double total = 0.0;
  for (const auto& s : samples) {
    check_sample(s, net_cfg);
    const auto pred = net::forward(s.input, params, net_cfg);
    total += objective::composite_loss(s.target.data(), pred.data(), loss);
  }
  return total / static_cast<double>(samples.size());
}

TrainResult train(const std::vector<Sample>& train_set, const std::vector<Sample>& val_set,
                  const net::NetworkConfig& net_cfg, const TrainConfig& cfg, std::uint64_t seed,
                  const EpochCallback& on_epoch) {
  if (train_set.empty()) throw ContractError("training split is empty");
  if (val_set.empty()) throw ContractError("validation split is empty");
  net_cfg.validate();
  cfg.validate();
  for (const auto& s : train_set) check_sample(s, net_cfg);
  for (const auto& s : val_set) check_sample(s, net_cfg);

  auto params = net::init_params(net_cfg, seed);
  auto state = OptimizerState::fresh(params, cfg.optimizer);
  EarlyStopping stopper(cfg.early_stop_patience);
  std::mt19937_64 order_rng(cfg.shuffle_seed);
  std::mt19937_64 aug_rng(cfg.shuffle_seed ^ 0x9e3779b97f4a7c15ULL);
  const bool augmenting = cfg.augmentation.lr_flip || cfg.augmentation.intensity_jitter_sd > 0;

  TrainResult result;
  std::vector<std::size_t> order(train_set.size());
  std::vector<std::vector<double>> acc;
  std::vector<std::vector<float>> grads;
  for (const auto& t : params.tensors) {
    acc.emplace_back(t.values.size());
    grads.emplace_back(t.values.size());
  }

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), order_rng);

    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      for (auto& a : acc) std::fill(a.begin(), a.end(), 0.0);
      for (std::size_t b = start; b < end; ++b) {
        const Sample& s = train_set[order[b]];
        epoch_loss += augmenting ? accumulate_sample(augment(s, cfg.augmentation, aug_rng), params,
                                                     net_cfg, cfg.loss, acc)
                                 : accumulate_sample(s, params, net_cfg, cfg.loss, acc);
      }
      const double inv = 1.0 / static_cast<double>(end - start);
      for (std::size_t i = 0; i < acc.size(); ++i)
        for (std::size_t j = 0; j < acc[i].size(); ++j)
          grads[i][j] = static_cast<float>(acc[i][j] * inv);
      nadam_step(params, grads, state);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = epoch_loss / static_cast<double>(train_set.size());
    rec.val_loss = evaluate_loss(val_set, params, net_cfg, cfg.loss);
    if (!std::isfinite(rec.val_loss))
      throw NumericError("non-finite validation loss at epoch " + std::to_string(epoch));
    result.history.epochs.push_back(rec);
    result.history.stopped_epoch = epoch;

    if (stopper.update(epoch, rec.val_loss, params)) {
      result.history.stop_reason = "early_stop";
      break;
    }
    if (on_epoch && on_epoch(rec, params)) {
      result.history.stop_reason = "callback";
      break;
    }
    if (epoch == cfg.max_epochs) result.history.stop_reason = "max_epochs";
  }
  result.history.best_epoch = stopper.best_epoch();
  result.params = stopper.best_params();
  return result;
}

}  // namespace petsynth::train
