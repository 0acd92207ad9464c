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

#include "commands.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "petsynth/cliniceval.hpp"
#include "petsynth/error.hpp"
#include "petsynth/objective.hpp"
#include "petsynth/phantom.hpp"
#include "petsynth/synthnet.hpp"
#include "petsynth/trainer.hpp"
#include "run_config.hpp"

namespace petsynth::app {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

// Usage problems found after parsing (missing seed, bad paths in flags).
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string fmt(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
  if (!os) throw IoError("write failed for " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

RunConfig config_or_default(const std::string& path) {
  return path.empty() ? RunConfig{} : load_run_config(path);
}

std::uint64_t require_seed(const std::optional<std::uint64_t>& flag, const RunConfig& rc) {
  if (flag) return *flag;
  if (rc.seed) return *rc.seed;
  throw UsageError("a seed is required: pass --seed or set \"seed\" in the config");
}

fs::path require_path(const std::string& flag, const std::optional<fs::path>& from_config, const char* what) {
  if (!flag.empty()) return flag;
  if (from_config) return *from_config;
  throw UsageError(std::string("missing ") + what);
}

std::string record_id(const phantom::ManifestEntry& e) {
  return e.session == 1 ? e.subject_id : e.subject_id + "_ses" + std::to_string(e.session);
}

train::Sample make_sample(const fs::path& data, const phantom::ManifestEntry& e, const net::NetworkConfig& cfg) {
  const auto rec = phantom::load_record(data, e);
  return {e.subject_id, std::string(condition_name(e.condition)),
          normalize_channels(select_channels(rec.input, cfg.input_channels)), normalize_channels(rec.target)};
}

struct MeanSd {
  double mean = 0.0, sd = 0.0;
};

MeanSd mean_sd(const std::vector<double>& v) {
  MeanSd r;
  if (v.empty()) return r;
  for (double x : v) r.mean += x;
  r.mean /= static_cast<double>(v.size());
  if (v.size() < 2) return r;
  double ss = 0.0;
  for (double x : v) ss += (x - r.mean) * (x - r.mean);
  r.sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
  return r;
}

// ---------------------------------------------------------------------------
// generate

struct GenerateOpts {
  std::string config, out;
  std::optional<std::uint64_t> seed;
};

int cmd_generate(const GenerateOpts& o, std::ostream& out) {
  const RunConfig rc = config_or_default(o.config);
  const auto seed = require_seed(o.seed, rc);
  const auto dir = require_path(o.out, rc.io.out, "--out");
  const auto entries = phantom::build_cohort(rc.cohort, rc.phantom, seed, dir);
  std::set<std::string> subjects;
  std::size_t abnormal = 0;
  for (const auto& e : entries) {
    subjects.insert(e.subject_id);
    for (bool f : e.abnormal_territories) abnormal += f;
  }
  out << "subjects " << subjects.size() << "\nrecords " << entries.size() << "\nabnormal territories " << abnormal
      << "\nmanifest " << (dir / phantom::kManifestName).string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// train

struct TrainOpts {
  std::string data, config, out, channels, loss;
  std::optional<int> fold;
  bool all_folds = false;
  bool no_attention = false;
  std::optional<std::uint64_t> seed;
};

std::string summary_header() {
  return "fold,cohort,n,nrmse_mean,nrmse_sd,psnr_db_mean,psnr_db_sd,ssim_mean,ssim_sd";
}

int cmd_train(const TrainOpts& o, std::ostream& out) {
  RunConfig rc = config_or_default(o.config);
  const auto seed = require_seed(o.seed, rc);
  const auto data = require_path(o.data, rc.io.data, "--data");
  const auto run_dir = require_path(o.out, rc.io.out, "--out");
  if (!o.channels.empty()) rc.network.input_channels = net::subset_roles(net::parse_subset(o.channels));
  if (o.no_attention) rc.network.attention_enabled = false;
  if (!o.loss.empty()) rc.training.loss.kind = objective::parse_loss_kind(o.loss);
  rc.network.validate();
  rc.network.validate_dims(rc.phantom.dims);

  const auto manifest = phantom::read_manifest(data);
  std::vector<std::string> ids;
  std::map<std::string, Cohort> cohort_of;
  for (const auto& e : manifest)
    if (e.split == "development" && cohort_of.emplace(e.subject_id, e.cohort).second) ids.push_back(e.subject_id);
  const auto plan = train::kfold_split(ids, rc.k_folds, seed);

  std::vector<int> folds;
  if (o.all_folds) {
    for (int f = 0; f < rc.k_folds; ++f) folds.push_back(f);
  } else {
    const int f = o.fold.value_or(0);
    if (f < 0 || f >= rc.k_folds)
      throw UsageError("--fold must lie in 0.." + std::to_string(rc.k_folds - 1));
    folds.push_back(f);
  }

  std::map<std::string, std::vector<train::Sample>> by_subject;
  std::map<std::string, std::vector<const phantom::ManifestEntry*>> entries_of;
  for (const auto& e : manifest) {
    if (e.split != "development") continue;
    by_subject[e.subject_id].push_back(make_sample(data, e, rc.network));
    entries_of[e.subject_id].push_back(&e);
  }
  const auto gather = [&](const std::vector<std::string>& subjects) {
    std::vector<train::Sample> s;
    for (const auto& id : subjects) s.insert(s.end(), by_subject[id].begin(), by_subject[id].end());
    return s;
  };

  std::string summary = summary_header() + "\n";
  for (int f : folds) {
    const auto& fold = plan.folds[static_cast<std::size_t>(f)];
    const fs::path dir = run_dir / ("fold" + std::to_string(f));
    fs::create_directories(dir);
    const auto result =
        train::train(gather(fold.train), gather(fold.validation), rc.network, rc.training, seed + static_cast<std::uint64_t>(f));

    net::save_checkpoint(result.params, dir / "model.nprm");
    ojson side;
    side["network"] = network_to_json(rc.network);
    side["fold"] = f;
    side["k_folds"] = rc.k_folds;
    side["seed"] = seed;
    side["train_subjects"] = fold.train;
    side["validation_subjects"] = fold.validation;
    side["test_subjects"] = fold.test;
    write_text(dir / "model.nprm.config.json", side.dump(2) + "\n");
    result.history.write_csv(dir / "history.csv");

    std::string quality = objective::quality_csv_header() + "\n";
    std::map<Cohort, std::array<std::vector<double>, 3>> metrics;
    for (const auto& id : fold.test) {
      const auto& samples = by_subject[id];
      for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto pred = net::forward(samples[i].input, result.params, rc.network);
        const auto q = objective::quality_report(samples[i].target, pred, rc.training.loss);
        quality += objective::quality_csv_row(record_id(*entries_of[id][i]), samples[i].condition, q) + "\n";
        auto& m = metrics[cohort_of[id]];
        m[0].push_back(q.nrmse);
        m[1].push_back(q.psnr_db);
        m[2].push_back(q.ssim);
      }
    }
    write_text(dir / "test_quality.csv", quality);
    for (const auto& [cohort, m] : metrics) {
      summary += std::to_string(f) + "," + std::string(cohort_name(cohort)) + "," + std::to_string(m[0].size());
      for (const auto& v : m) {
        const auto s = mean_sd(v);
        summary += "," + fmt(s.mean) + "," + fmt(s.sd);
      }
      summary += "\n";
    }
    out << "fold " << f << ": " << result.history.stop_reason << " at epoch " << result.history.stopped_epoch
        << ", best epoch " << result.history.best_epoch << "\n";
  }
  write_text(run_dir / "fold_summary.csv", summary);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// evaluate

struct EvaluateOpts {
  std::string model, data, split, report, channels;
};

struct Sidecar {
  net::NetworkConfig network;
  std::set<std::string> test_subjects;
};

Sidecar read_sidecar(const fs::path& model) {
  const fs::path path = model.string() + ".config.json";
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text(path));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  Sidecar s;
  try {
    s.network = network_from_json(j.at("network"));
    for (const auto& id : j.at("test_subjects")) s.test_subjects.insert(id.get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return s;
}

int cmd_evaluate(const EvaluateOpts& o, std::ostream& out) {
  const fs::path data = o.data, report = o.report;
  const auto side = read_sidecar(o.model);
  if (!o.channels.empty() && net::subset_roles(net::parse_subset(o.channels)) != side.network.input_channels)
    throw ShapeError("channel subset '" + o.channels + "' does not match the checkpoint's input channels");
  const auto params = net::load_checkpoint(o.model);
  net::check_layout(params, side.network);

  fs::create_directories(report / "synthetic");
  fs::create_directories(report / "error_maps");
  std::string quality = objective::quality_csv_header() + "\n";
  std::size_t n = 0;
  const objective::LossConfig loss;
  for (const auto& e : phantom::read_manifest(data)) {
    const bool take = o.split == "test" ? (e.split == "development" && side.test_subjects.count(e.subject_id))
                                        : e.split == "generalization";
    if (!take) continue;
    const auto s = make_sample(data, e, side.network);
    side.network.validate_dims(s.input.dims());
    const auto pred = net::forward(s.input, params, side.network);
    quality += objective::quality_csv_row(record_id(e), s.condition, objective::quality_report(s.target, pred, loss)) + "\n";

    const std::string stem = phantom::record_stem(e);
    write_volume(denormalize_cbf(pred), report / "synthetic" / (stem + ".nvl"));
    write_volume(objective::error_map(s.target, pred, loss.dynamic_range), report / "error_maps" / (stem + ".nvl"));
    ++n;
  }
  if (n == 0) throw ValidationError("no records in split '" + o.split + "'");
  write_text(report / "quality.csv", quality);
  out << "evaluated " << n << " records\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// report

struct ReportOpts {
  std::string source, data, report, split = "generalization";
  std::vector<int> k;
};

struct RegionalPair {
  const phantom::ManifestEntry* entry;
  clinic::RegionalCBF truth, pred;
};

int cmd_report(const ReportOpts& o, std::ostream& out) {
  const fs::path data = o.data, report = o.report;
  const auto source = clinic::parse_source(o.source);
  const auto manifest = phantom::read_manifest(data);

  std::vector<RegionalPair> pairs;
  for (const auto& e : manifest) {
    if (e.split != o.split) continue;
    const auto rec = phantom::load_record(data, e);
    RegionalPair p{&e, clinic::regional_cbf(rec.target, rec.territories), {}};
    switch (source) {
      case clinic::Source::TruePET: p.pred = p.truth; break;
      case clinic::Source::SD_CBF: p.pred = clinic::regional_cbf(rec.input, rec.territories, 6); break;
      case clinic::Source::MD_CBF: p.pred = clinic::regional_cbf(rec.input, rec.territories, 7); break;
      case clinic::Source::SyntheticPET: {
        const fs::path path = report / "synthetic" / (phantom::record_stem(e) + ".nvl");
        if (!fs::exists(path)) continue;
        p.pred = clinic::regional_cbf(read_volume(path, {ChannelRole::PET_CBF}), rec.territories);
        break;
      }
    }
    for (auto* r : {&p.truth, &p.pred}) {
      r->subject_id = e.subject_id;
      r->cohort = e.cohort;
      r->condition = e.condition;
    }
    p.truth.source = clinic::Source::TruePET;
    p.pred.source = source;
    pairs.push_back(std::move(p));
  }
  if (pairs.empty()) throw ValidationError("no records with '" + o.source + "' values in split '" + o.split + "'");

  std::vector<clinic::RegionalCBF> truths, preds;
  for (const auto& p : pairs) truths.push_back(p.truth), preds.push_back(p.pred);
  bool has_hc = false;
  for (const auto& p : pairs) has_hc = has_hc || p.entry->cohort == Cohort::HC;
  if (!has_hc) throw ValidationError("report needs HC records to fit thresholds");
  const auto hc_true = clinic::fit_hc_stats(truths);
  const auto hc_pred = clinic::fit_hc_stats(preds);

  const std::string src(clinic::source_name(source));
  const std::string pair_name = src + "-true";
  const auto file = [&](const std::string& name) { return report / (src + "_" + name); };
  const std::array<Condition, 2> conditions{Condition::Pre, Condition::Post};
  const std::array<Cohort, 2> cohorts{Cohort::HC, Cohort::PT};

  // Agreement.
  std::string agreement = "cohort,condition,pair,n,bias,sd_diff,loa_low,loa_high\n";
  std::string bias_summary = "cohort,timepoint,mean,sd,n\n";
  for (Cohort c : cohorts) {
    std::string ba = clinic::bland_altman_csv_header() + "\n";
    for (Condition t : conditions) {
      std::vector<double> a, b;
      for (const auto& p : pairs)
        if (p.entry->cohort == c && p.entry->condition == t) {
          a.insert(a.end(), p.pred.means.begin(), p.pred.means.end());
          b.insert(b.end(), p.truth.means.begin(), p.truth.means.end());
        }
      if (a.size() < 2) continue;
      const std::string cn(cohort_name(c)), tn(condition_name(t));
      ba += clinic::bland_altman_csv_rows(a, b, cn, tn, pair_name);
      const auto r = clinic::bland_altman(a, b);
      agreement += cn + "," + tn + "," + pair_name + "," + std::to_string(r.n) + "," + fmt(r.bias) + "," +
                   fmt(r.sd_diff) + "," + fmt(r.loa_low) + "," + fmt(r.loa_high) + "\n";
      bias_summary += cn + "," + tn + "," + fmt(r.bias) + "," + fmt(r.sd_diff) + "," + std::to_string(r.n) + "\n";
    }
    write_text(file("bland_altman_" + std::string(cohort_name(c)) + ".csv"), ba);
  }
  // Pooled over cohorts, agreement summary only.
  for (Condition t : conditions) {
    std::vector<double> a, b;
    for (const auto& p : pairs)
      if (p.entry->condition == t) {
        a.insert(a.end(), p.pred.means.begin(), p.pred.means.end());
        b.insert(b.end(), p.truth.means.begin(), p.truth.means.end());
      }
    if (a.size() < 2) continue;
    const auto r = clinic::bland_altman(a, b);
    agreement += "all," + std::string(condition_name(t)) + "," + pair_name + "," + std::to_string(r.n) + "," +
                 fmt(r.bias) + "," + fmt(r.sd_diff) + "," + fmt(r.loa_low) + "," + fmt(r.loa_high) + "\n";
  }
  write_text(file("agreement.csv"), agreement);
  write_text(file("bias_summary.csv"), bias_summary);

  // Joint scatter and correlation.
  std::string scatter = "subject_id,session,cohort,condition,territory,true_cbf,pred_cbf\n";
  std::string pearson = "condition,r,n\n";
  for (Condition t : conditions) {
    std::vector<double> a, b;
    for (const auto& p : pairs) {
      if (p.entry->condition != t) continue;
      for (int k = 0; k < clinic::kTerritories; ++k) {
        const auto ki = static_cast<std::size_t>(k);
        scatter += p.entry->subject_id + "," + std::to_string(p.entry->session) + "," +
                   std::string(cohort_name(p.entry->cohort)) + "," + std::string(condition_name(t)) + "," +
                   std::to_string(k + 1) + "," + fmt(p.truth.means[ki]) + "," + fmt(p.pred.means[ki]) + "\n";
        a.push_back(p.truth.means[ki]);
        b.push_back(p.pred.means[ki]);
      }
    }
    if (a.size() >= 2)
      pearson += std::string(condition_name(t)) + "," + fmt(clinic::pearson_r(a, b)) + "," + std::to_string(a.size()) + "\n";
  }
  write_text(file("scatter.csv"), scatter);
  write_text(file("pearson.csv"), pearson);

  // ROC per k and condition; score = -CBF.
  bool undefined = false;
  std::string auc = "k,condition,auc,positives,negatives\n";
  for (int k : o.k) {
    for (Condition t : conditions) {
      std::vector<double> scores;
      std::vector<bool> labels;
      std::size_t pos = 0;
      for (const auto& p : pairs) {
        if (p.entry->condition != t) continue;
        const auto truth = clinic::abnormality_labels(p.truth, hc_true, k);
        for (int i = 0; i < clinic::kTerritories; ++i) {
          scores.push_back(-p.pred.means[static_cast<std::size_t>(i)]);
          labels.push_back(truth[static_cast<std::size_t>(i)]);
          pos += truth[static_cast<std::size_t>(i)];
        }
      }
      const std::string tn(condition_name(t));
      const std::string counts = std::to_string(pos) + "," + std::to_string(labels.size() - pos);
      if (pos == 0 || pos == labels.size()) {
        undefined = true;
        auc += std::to_string(k) + "," + tn + ",undefined," + counts + "\n";
        continue;
      }
      const auto roc = clinic::roc_auc(scores, labels);
      write_text(file("roc_k" + std::to_string(k) + "_" + tn + ".csv"), clinic::roc_csv(roc));
      auc += std::to_string(k) + "," + tn + "," + fmt(roc.auc) + "," + counts + "\n";
    }
  }
  write_text(file("auc.csv"), auc);

  // Radar metrics at k = 3: the source's own HC statistics set its threshold.
  ojson radar;
  for (Condition t : conditions) {
    std::vector<bool> predicted, truth;
    for (const auto& p : pairs) {
      if (p.entry->condition != t) continue;
      const auto a = clinic::abnormality_labels(p.pred, hc_pred, 3.0);
      const auto b = clinic::abnormality_labels(p.truth, hc_true, 3.0);
      predicted.insert(predicted.end(), a.begin(), a.end());
      truth.insert(truth.end(), b.begin(), b.end());
    }
    if (truth.empty()) continue;
    const auto m = clinic::classification_metrics(predicted, truth);
    ojson j;
    const auto put = [&](const char* key, const std::optional<double>& v) {
      j[key] = v ? ojson(*v) : ojson(nullptr);
    };
    put("accuracy", m.accuracy);
    put("sensitivity", m.sensitivity);
    put("specificity", m.specificity);
    put("ppv", m.ppv);
    put("npv", m.npv);
    j["tp"] = m.tp;
    j["fp"] = m.fp;
    j["tn"] = m.tn;
    j["fn"] = m.fn;
    radar[std::string(condition_name(t))] = j;
  }
  write_text(file("radar_k3.json"), radar.dump(2) + "\n");

  out << "report for " << src << ": " << pairs.size() << " records\n";
  if (undefined) {
    out << "AUC undefined for at least one k: single-class labels\n";
    return kExitData;
  }
  return kExitOk;
}

int exit_code_for(const Error& e) {
  switch (e.kind()) {
    case ErrorKind::Config: return kExitUsage;
    case ErrorKind::Numeric: return kExitNumeric;
    default: return kExitData;
  }
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multi-contrast MRI to PET CBF synthesis toolkit", "petsynth"};
  app.require_subcommand(1);

  GenerateOpts gen;
  auto* g = app.add_subcommand("generate", "Generate a synthetic phantom cohort");
  g->add_option("--config", gen.config, "RunConfig JSON");
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_option("--seed", gen.seed, "Cohort seed");

  TrainOpts tr;
  auto* t = app.add_subcommand("train", "Cross-validated training");
  t->add_option("--data", tr.data, "Cohort directory")->required();
  t->add_option("--config", tr.config, "RunConfig JSON");
  t->add_option("--out", tr.out, "Run directory")->required();
  auto* fold = t->add_option("--fold", tr.fold, "Fold index");
  auto* all = t->add_flag("--all-folds", tr.all_folds, "Train every fold");
  fold->excludes(all);
  t->add_option("--channels", tr.channels, "Input channel subset")->check(CLI::IsMember({"all", "asl", "structural"}));
  t->add_flag("--no-attention", tr.no_attention, "Disable attention gates");
  t->add_option("--loss", tr.loss, "Loss function")->check(CLI::IsMember({"mse", "mae", "ssim", "custom"}));
  t->add_option("--seed", tr.seed, "Split, init and shuffle seed");

  EvaluateOpts ev;
  auto* e = app.add_subcommand("evaluate", "Run a checkpoint over a split");
  e->add_option("--model", ev.model, "NPRM checkpoint")->required();
  e->add_option("--data", ev.data, "Cohort directory")->required();
  e->add_option("--split", ev.split, "Records to evaluate")->required()->check(CLI::IsMember({"test", "generalization"}));
  e->add_option("--report", ev.report, "Report directory")->required();
  e->add_option("--channels", ev.channels, "Expected channel subset")->check(CLI::IsMember({"all", "asl", "structural"}));

  ReportOpts rp;
  auto* r = app.add_subcommand("report", "Regional CBF agreement and abnormality analyses");
  r->add_option("--pred-source", rp.source, "CBF source")->required()->check(
      CLI::IsMember({"synthetic", "sd", "md", "true"}));
  r->add_option("--data", rp.data, "Cohort directory")->required();
  r->add_option("--report", rp.report, "Report directory")->required();
  r->add_option("--k", rp.k, "Threshold multipliers")->delimiter(',')->check(CLI::IsMember({2, 3, 4}))->default_str("2,3,4");
  r->add_option("--split", rp.split, "Manifest split")->check(CLI::IsMember({"development", "generalization"}));

  std::vector<std::string> rev(args.rbegin(), args.rend());
  if (!rev.empty()) rev.pop_back();
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& ex) {
    err << "error: " << ex.what() << "\n";
    const auto* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    err << sub->help();
    return kExitUsage;
  }
  if (rp.k.empty()) rp.k = {2, 3, 4};

  try {
    if (g->parsed()) return cmd_generate(gen, out);
    if (t->parsed()) return cmd_train(tr, out);
    if (e->parsed()) return cmd_evaluate(ev, out);
    return cmd_report(rp, out);
  } catch (const UsageError& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitUsage;
  } catch (const Error& ex) {
    err << "error: " << ex.what() << "\n";
    return exit_code_for(ex);
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitData;
  }
}

}  // namespace petsynth::app
