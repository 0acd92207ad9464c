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

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "commands.hpp"
#include "petsynth/volgrid.hpp"

using namespace petsynth;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result cli(std::vector<std::string> args) {
  args.insert(args.begin(), "petsynth");
  std::ostringstream out, err;
  const int code = app::run(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "petsynth_cli_test" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

fs::path write_config(const fs::path& dir, const std::string& text, const std::string& name = "run.json") {
  std::ofstream(dir / name) << text;
  return dir / name;
}

// Rows of a CSV keyed by the value of one column.
std::map<std::string, std::map<std::string, std::string>> csv_by(const fs::path& p, const std::string& key) {
  std::ifstream is(p);
  std::string line;
  std::getline(is, line);
  std::vector<std::string> names;
  std::stringstream hs(line);
  for (std::string c; std::getline(hs, c, ',');) names.push_back(c);
  std::map<std::string, std::map<std::string, std::string>> out;
  while (std::getline(is, line)) {
    std::stringstream ls(line);
    std::map<std::string, std::string> row;
    std::size_t i = 0;
    for (std::string c; std::getline(ls, c, ',') && i < names.size(); ++i) row[names[i]] = c;
    out[row[key]] = row;
  }
  return out;
}

const char* kSmall = R"({
  "seed": 3,
  "phantom": {"dims": [16, 16, 8], "hc": 4, "pt": 4, "generalization_hc": 3, "generalization_pt": 3},
  "training": {"lr": 1e-3, "max_epochs": 2, "early_stop_patience": 0, "k_folds": 4}
})";

}  // namespace

TEST_CASE("generate") {
  const auto dir = scratch("generate");
  const auto cfg = write_config(dir, kSmall);
  const auto a = cli({"generate", "--config", cfg.string(), "--out", (dir / "a").string()});
  REQUIRE(a.code == 0);
  CHECK(fs::exists(dir / "a" / "manifest.jsonl"));
  CHECK(a.out.find("subjects 14") != std::string::npos);
  CHECK(cli({"generate", "--config", cfg.string(), "--out", (dir / "b").string()}).code == 0);
  CHECK(slurp(dir / "a" / "manifest.jsonl") == slurp(dir / "b" / "manifest.jsonl"));
  CHECK(slurp(dir / "a" / "subjects" / "PT002_ses1_post_input.nvl") ==
        slurp(dir / "b" / "subjects" / "PT002_ses1_post_input.nvl"));

  const auto missing = cli({"generate", "--config", cfg.string()});
  CHECK(missing.code == app::kExitUsage);
  CHECK(missing.err.find("--out") != std::string::npos);

  CHECK(cli({"generate", "--out", (dir / "c").string()}).code == app::kExitUsage);  // no seed anywhere
  CHECK(cli({"generate", "--out", (dir / "c").string(), "--seed", "4"}).code == 0);
  const auto typo = write_config(dir, R"({"seed": 1, "phantom": {"hcc": 3}})", "typo.json");
  CHECK(cli({"generate", "--config", typo.string(), "--out", (dir / "d").string()}).code == app::kExitUsage);
  CHECK(cli({"generate", "--config", (dir / "absent.json").string(), "--out", (dir / "e").string()}).code ==
        app::kExitData);
  CHECK(cli({"bogus"}).code == app::kExitUsage);
}

TEST_CASE("train, evaluate and report") {
  const auto dir = scratch("pipeline");
  const auto cfg = write_config(dir, kSmall);
  const auto data = (dir / "data").string(), run = (dir / "run").string(), rep = (dir / "report").string();
  REQUIRE(cli({"generate", "--config", cfg.string(), "--out", data}).code == 0);

  const auto t = cli({"train", "--data", data, "--config", cfg.string(), "--out", run, "--fold", "0"});
  REQUIRE(t.code == 0);
  CHECK(fs::exists(dir / "run" / "fold0" / "model.nprm"));
  CHECK(fs::exists(dir / "run" / "fold0" / "model.nprm.config.json"));
  CHECK(slurp(dir / "run" / "fold0" / "history.csv").starts_with("epoch,train_loss,val_loss\n"));
  CHECK(slurp(dir / "run" / "fold_summary.csv")
            .starts_with("fold,cohort,n,nrmse_mean,nrmse_sd,psnr_db_mean,psnr_db_sd,ssim_mean,ssim_sd\n"));
  CHECK(cli({"train", "--data", data, "--config", cfg.string(), "--out", run, "--fold", "9"}).code == app::kExitUsage);
  CHECK(cli({"train", "--data", (dir / "nowhere").string(), "--config", cfg.string(), "--out", run}).code ==
        app::kExitData);

  const auto model = (dir / "run" / "fold0" / "model.nprm").string();
  CHECK(cli({"evaluate", "--model", model, "--data", data, "--split", "generalization", "--report", rep,
             "--channels", "asl"})
            .code == app::kExitData);
  REQUIRE(cli({"evaluate", "--model", model, "--data", data, "--split", "generalization", "--report", rep}).code == 0);
  CHECK(fs::exists(dir / "report" / "quality.csv"));
  CHECK(fs::exists(dir / "report" / "synthetic" / "GPT001_ses1_pre.nvl"));
  const auto err = read_volume(dir / "report" / "error_maps" / "GPT001_ses1_pre.nvl");
  for (float v : err.data()) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }

  CHECK(cli({"report", "--pred-source", "true", "--data", data, "--report", rep, "--k", "7"}).code == app::kExitUsage);
  const auto self = cli({"report", "--pred-source", "true", "--data", data, "--report", rep, "--k", "2"});
  REQUIRE(self.code == 0);
  for (const auto& [key, row] : csv_by(dir / "report" / "true_agreement.csv", "cohort")) {
    CHECK(std::stod(row.at("bias")) == 0.0);
    CHECK(std::stod(row.at("sd_diff")) == 0.0);
  }
  for (const auto& [cond, row] : csv_by(dir / "report" / "true_pearson.csv", "condition"))
    CHECK(std::stod(row.at("r")) == doctest::Approx(1.0).epsilon(1e-12));
  for (const auto& [k, row] : csv_by(dir / "report" / "true_auc.csv", "condition")) CHECK(row.at("auc") == "1");
  CHECK(cli({"report", "--pred-source", "synthetic", "--data", data, "--report", rep, "--k", "2,3"}).code !=
        app::kExitUsage);
}

TEST_CASE("custom loss without the perceptual term equals mae") {
  const auto dir = scratch("loss_equivalence");
  const auto cfg = write_config(dir, R"({
  "seed": 8,
  "phantom": {"dims": [16, 16, 8], "hc": 3, "pt": 3},
  "training": {"lr": 1e-3, "max_epochs": 3, "early_stop_patience": 0, "k_folds": 3,
               "lambda_r": 1.0, "lambda_p": 0.0}
})");
  const auto data = (dir / "data").string();
  REQUIRE(cli({"generate", "--config", cfg.string(), "--out", data}).code == 0);
  for (const char* loss : {"custom", "mae"})
    REQUIRE(cli({"train", "--data", data, "--config", cfg.string(), "--out", (dir / loss).string(), "--loss", loss})
                .code == 0);
  CHECK(slurp(dir / "custom" / "fold0" / "history.csv") == slurp(dir / "mae" / "fold0" / "history.csv"));
  CHECK(slurp(dir / "custom" / "fold0" / "model.nprm") == slurp(dir / "mae" / "fold0" / "model.nprm"));
}

TEST_CASE("divergent training exits with the numeric code") {
  const auto dir = scratch("numeric");
  const auto cfg = write_config(dir, R"({
  "seed": 2,
  "phantom": {"dims": [16, 16, 8], "hc": 3, "pt": 3},
  "training": {"lr": 1e30, "max_epochs": 5, "early_stop_patience": 0, "k_folds": 3}
})");
  const auto data = (dir / "data").string();
  REQUIRE(cli({"generate", "--config", cfg.string(), "--out", data}).code == 0);
  CHECK(cli({"train", "--data", data, "--config", cfg.string(), "--out", (dir / "run").string()}).code ==
        app::kExitNumeric);
}

TEST_CASE("structural-only inputs do worse on patients") {
  const auto dir = scratch("channels");
  const auto cfg = write_config(dir, R"({
  "seed": 21,
  "phantom": {"hc": 3, "pt": 6},
  "training": {"lr": 1e-3, "max_epochs": 30, "early_stop_patience": 0, "k_folds": 3}
})");
  const auto data = (dir / "data").string();
  REQUIRE(cli({"generate", "--config", cfg.string(), "--out", data}).code == 0);
  for (const char* ch : {"all", "structural"})
    REQUIRE(cli({"train", "--data", data, "--config", cfg.string(), "--out", (dir / ch).string(), "--channels", ch})
                .code == 0);
  const auto all = csv_by(dir / "all" / "fold_summary.csv", "cohort");
  const auto structural = csv_by(dir / "structural" / "fold_summary.csv", "cohort");
  REQUIRE(all.count("PT"));
  REQUIRE(structural.count("PT"));
  CHECK(std::stod(structural.at("PT").at("nrmse_mean")) > std::stod(all.at("PT").at("nrmse_mean")));
  CHECK(std::stod(structural.at("PT").at("ssim_mean")) < std::stod(all.at("PT").at("ssim_mean")));
}
