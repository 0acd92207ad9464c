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

#include "run_config.hpp"

#include <fstream>
#include <set>

#include "petsynth/error.hpp"

namespace petsynth::app {

namespace {

using json = nlohmann::json;

// Reads typed fields from one JSON object and rejects keys nobody asked for.
class Section {
 public:
  Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw ConfigError("config section '" + name_ + "' must be an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    known_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(name_ + "." + key + ": " + e.what());
    }
  }

  std::optional<json> sub(const char* key) {
    known_.insert(key);
    if (!j_.contains(key)) return std::nullopt;
    return j_.at(key);
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!known_.count(k)) throw ConfigError("unknown config key '" + (name_.empty() ? k : name_ + "." + k) + "'");
  }

 private:
  const json& j_;
  std::string name_;
  std::set<std::string> known_;
};

void read_phantom(const json& j, RunConfig& rc) {
  Section s(j, "phantom");
  auto& p = rc.phantom;
  std::vector<int> dims{p.dims.h, p.dims.w, p.dims.d};
  s.get("dims", dims);
  if (dims.size() != 3) throw ConfigError("phantom.dims needs three entries");
  p.dims = {dims[0], dims[1], dims[2]};
  s.get("gm_cbf_mean", p.gm_cbf_mean);
  s.get("wm_cbf_mean", p.wm_cbf_mean);
  s.get("acz_factor", p.acz_factor);
  s.get("lesion_acz_response", p.lesion_acz_response);
  s.get("lesion_count", p.lesion_count);
  s.get("lesion_factor_min", p.lesion_factor_min);
  s.get("lesion_factor_max", p.lesion_factor_max);
  s.get("asl_noise_sd", p.asl_noise_sd);
  s.get("asl_bias_field_amplitude", p.asl_bias_field_amplitude);
  s.get("pet_noise_sd", p.pet_noise_sd);
  s.get("hc", rc.cohort.hc);
  s.get("pt", rc.cohort.pt);
  s.get("hc_sessions", rc.cohort.hc_sessions);
  s.get("generalization_hc", rc.cohort.generalization_hc);
  s.get("generalization_pt", rc.cohort.generalization_pt);
  s.finish();
  // Lesion count applies to PT only; validate against a PT template.
  auto check = p;
  check.cohort = Cohort::PT;
  check.validate();
}

void read_network(const json& j, RunConfig& rc) {
  Section s(j, "network");
  s.get("preset", rc.preset);
  if (rc.preset == "desk") rc.network = net::NetworkConfig::desk();
  else if (rc.preset == "paper") rc.network = net::NetworkConfig::paper();
  else throw ConfigError("network.preset must be 'desk' or 'paper'");
  auto& n = rc.network;
  s.get("widths", n.widths);
  s.get("kernel", n.kernel);
  s.get("attention", n.attention_enabled);
  s.get("groupnorm_groups", n.groupnorm_groups);
  std::string channels = "all";
  s.get("channels", channels);
  n.input_channels = net::subset_roles(net::parse_subset(channels));
  s.finish();
  n.validate();
}

void read_training(const json& j, RunConfig& rc) {
  Section s(j, "training");
  auto& t = rc.training;
  s.get("max_epochs", t.max_epochs);
  s.get("early_stop_patience", t.early_stop_patience);
  s.get("batch_size", t.batch_size);
  s.get("lr", t.optimizer.lr);
  s.get("beta1", t.optimizer.beta1);
  s.get("beta2", t.optimizer.beta2);
  s.get("eps", t.optimizer.eps);
  std::string loss = std::string(objective::loss_kind_name(t.loss.kind));
  s.get("loss", loss);
  t.loss.kind = objective::parse_loss_kind(loss);
  s.get("lambda_r", t.loss.lambda_r);
  s.get("lambda_p", t.loss.lambda_p);
  s.get("ssim_k1", t.loss.ssim_k1);
  s.get("ssim_k2", t.loss.ssim_k2);
  s.get("dynamic_range", t.loss.dynamic_range);
  s.get("shuffle_seed", t.shuffle_seed);
  s.get("lr_flip", t.augmentation.lr_flip);
  s.get("intensity_jitter_sd", t.augmentation.intensity_jitter_sd);
  s.get("k_folds", rc.k_folds);
  s.finish();
  t.validate();
  if (rc.k_folds < 3) throw ConfigError("training.k_folds must be at least 3");
}

void read_evaluation(const json& j, RunConfig& rc) {
  Section s(j, "evaluation");
  s.get("k", rc.evaluation.k);
  s.get("sources", rc.evaluation.sources);
  s.finish();
  for (int k : rc.evaluation.k)
    if (k < 2 || k > 4) throw ConfigError("evaluation.k admits only 2, 3 and 4");
  for (const auto& src : rc.evaluation.sources) clinic::parse_source(src);
}

void read_io(const json& j, RunConfig& rc) {
  Section s(j, "io");
  for (auto [key, slot] : {std::pair{"data", &rc.io.data}, {"out", &rc.io.out}, {"report", &rc.io.report}}) {
    std::string v;
    s.get(key, v);
    if (!v.empty()) *slot = v;
  }
  s.finish();
}

}  // namespace

RunConfig parse_run_config(const json& doc) {
  RunConfig rc;
  Section top(doc, "");
  if (auto j = top.sub("phantom")) read_phantom(*j, rc);
  if (auto j = top.sub("network")) read_network(*j, rc);
  if (auto j = top.sub("training")) read_training(*j, rc);
  if (auto j = top.sub("evaluation")) read_evaluation(*j, rc);
  if (auto j = top.sub("io")) read_io(*j, rc);
  if (auto j = top.sub("seed")) {
    if (!j->is_number_unsigned() && !(j->is_number_integer() && j->get<std::int64_t>() >= 0))
      throw ConfigError("seed must be a non-negative integer");
    rc.seed = j->get<std::uint64_t>();
  }
  top.finish();
  return rc;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config " + path.string());
  json doc;
  try {
    doc = json::parse(is);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return parse_run_config(doc);
}

nlohmann::ordered_json network_to_json(const net::NetworkConfig& cfg) {
  nlohmann::ordered_json j;
  j["widths"] = cfg.widths;
  j["kernel"] = cfg.kernel;
  j["attention"] = cfg.attention_enabled;
  j["groupnorm_groups"] = cfg.groupnorm_groups;
  std::vector<std::string> roles;
  for (auto r : cfg.input_channels) roles.emplace_back(role_name(r));
  j["input_channels"] = roles;
  return j;
}

net::NetworkConfig network_from_json(const nlohmann::json& j) {
  net::NetworkConfig cfg;
  Section s(j, "network");
  s.get("widths", cfg.widths);
  s.get("kernel", cfg.kernel);
  s.get("attention", cfg.attention_enabled);
  s.get("groupnorm_groups", cfg.groupnorm_groups);
  std::vector<std::string> roles;
  s.get("input_channels", roles);
  s.finish();
  cfg.input_channels.clear();
  for (const auto& r : roles) cfg.input_channels.push_back(parse_role(r));
  cfg.validate();
  return cfg;
}

}  // namespace petsynth::app
