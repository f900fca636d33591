// Copyright 2026 The spkloss Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Drives the spkloss binary end to end through the shell.

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include <gtest/gtest.h>

#include "spkloss/report.hpp"

namespace {

namespace fs = std::filesystem;

int run(const std::string& args) {
  const std::string cmd = std::string(SPKLOSS_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("spkloss_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string write_config(const std::string& name, const std::string& text) {
    const auto p = dir_ / name;
    std::ofstream(p) << text;
    return p.string();
  }

  std::string small_config(const std::string& extra_train = "") {
    return write_config("small.json", R"({
      "data": {"train_speakers": 8, "test_speakers": 5, "utterances_per_speaker": 6,
               "min_frames": 10, "max_frames": 20, "features": 6},
      "model": {"hidden": 8, "embedding": 8},
      "objective": {"name": "prototypical"},
      "train": {"epochs": 2, "N": 4, "M": 2, "crop_frames": 8)" + extra_train + R"(},
      "eval": {"crop_frames": 10, "num_crops": 3, "trials_per_class": 20}
    })");
  }

  fs::path dir_;
};

TEST_F(Cli, HelpAndUsageErrors) {
  EXPECT_EQ(run("--help"), 0);
  EXPECT_EQ(run(""), 2);
  EXPECT_EQ(run("frobnicate"), 2);
  EXPECT_EQ(run("generate"), 2);  // --out is required
  EXPECT_EQ(run("evaluate --checkpoint " + (dir_ / "missing.ckpt").string()), 2);
}

TEST_F(Cli, InvalidConfigExitsTwo) {
  const auto bad = write_config("bad.json", R"({"train": {"epoch": 3}})");
  EXPECT_EQ(run("generate --config " + bad + " --out " + (dir_ / "c").string()), 2);
  const auto broken = write_config("broken.json", "{ nope");
  EXPECT_EQ(run("train --config " + broken + " --out " + (dir_ / "t").string()), 2);
  EXPECT_EQ(run("train --config " + small_config() + " --objective arcface --out " + (dir_ / "t").string()), 2);
}

TEST_F(Cli, GenerateDefaultCorpusIsReproducible) {
  const auto a = dir_ / "a", b = dir_ / "b";
  ASSERT_EQ(run("generate --out " + a.string()), 0);
  ASSERT_EQ(run("generate --out " + b.string()), 0);
  std::set<std::string> train, test;
  std::istringstream manifest(slurp(a / "manifest.txt"));
  std::size_t lines = 0;
  for (std::string line; std::getline(manifest, line);) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string split, speaker;
    ls >> split >> speaker;
    (split == "train" ? train : test).insert(speaker);
    ++lines;
  }
  EXPECT_EQ(train.size(), 50u);
  EXPECT_EQ(test.size(), 20u);
  EXPECT_EQ(lines, 70u * 40u);
  for (const auto& s : test) EXPECT_FALSE(train.count(s));
  EXPECT_EQ(slurp(a / "manifest.txt"), slurp(b / "manifest.txt"));
  EXPECT_EQ(slurp(a / "trials.txt"), slurp(b / "trials.txt"));
  EXPECT_EQ(slurp(a / "test" / "spk60_utt3.bin"), slurp(b / "test" / "spk60_utt3.bin"));
}

TEST_F(Cli, TrainEvaluateAndReport) {
  const auto cfg = small_config(R"(, "repeats": 3, "seed": 4)");
  const auto corpus = dir_ / "corpus", out = dir_ / "out";
  ASSERT_EQ(run("generate --config " + cfg + " --out " + corpus.string()), 0);
  ASSERT_EQ(run("train --config " + cfg + " --corpus " + corpus.string() + " --out " + out.string()), 0);
  for (int seed : {4, 5, 6}) {
    EXPECT_TRUE(fs::exists(out / ("prototypical_seed" + std::to_string(seed) + ".ckpt")));
    EXPECT_TRUE(fs::exists(out / ("prototypical_seed" + std::to_string(seed) + ".tsv")));
  }
  std::ifstream csv(out / "results.csv");
  const auto runs = spkloss::read_runs_csv(csv);
  ASSERT_EQ(runs.size(), 3u);
  for (const auto& r : runs) EXPECT_TRUE(r.ok);

  const auto eval_out = dir_ / "eval";
  ASSERT_EQ(run("evaluate --config " + cfg + " --corpus " + corpus.string() + " --checkpoint " +
                (out / "prototypical_seed4.ckpt").string() + " --out " + eval_out.string()),
            0);
  const std::string report = slurp(eval_out / "report.txt");
  EXPECT_NE(report.find("\neer "), std::string::npos) << report;
  // The evaluate path and the train path score the same checkpoint identically.
  EXPECT_NE(report.find("eer " + spkloss::format_g17(runs[0].eer) + "\n"), std::string::npos) << report;

  const auto rep = dir_ / "report";
  ASSERT_EQ(run("report --results " + out.string() + " --out " + rep.string()), 0);
  const std::string table = slurp(rep / "table.txt");
  EXPECT_NE(table.find("Prototypical"), std::string::npos) << table;
  EXPECT_NE(table.find("M=2 N=4"), std::string::npos) << table;
  EXPECT_TRUE(fs::exists(rep / "summary.csv"));
}

TEST_F(Cli, RerunIsByteIdenticalApartFromTiming) {
  const auto cfg = small_config();
  const auto a = dir_ / "a", b = dir_ / "b";
  ASSERT_EQ(run("train --config " + cfg + " --out " + a.string()), 0);
  ASSERT_EQ(run("train --config " + cfg + " --out " + b.string()), 0);
  EXPECT_EQ(slurp(a / "prototypical_seed1.ckpt"), slurp(b / "prototypical_seed1.ckpt"));
  EXPECT_EQ(slurp(a / "results.csv"), slurp(b / "results.csv"));
  ASSERT_EQ(run("train --config " + cfg + " --seed-override 9 --out " + a.string()), 0);
  EXPECT_TRUE(fs::exists(a / "prototypical_seed9.ckpt"));
}

TEST_F(Cli, DivergentTrainingExitsOne) {
  const auto cfg = small_config(R"(, "learning_rate": 1e305, "epochs": 4)");
  const auto out = dir_ / "out";
  EXPECT_EQ(run("train --config " + cfg + " --out " + out.string()), 1);
  std::ifstream csv(out / "results.csv");
  const auto runs = spkloss::read_runs_csv(csv);
  ASSERT_EQ(runs.size(), 1u);
  EXPECT_FALSE(runs[0].ok);
}

TEST_F(Cli, SweepWritesResultsAndTable) {
  const auto cfg = write_config("sweep.json", R"({
    "data": {"train_speakers": 8, "test_speakers": 5, "utterances_per_speaker": 6,
             "min_frames": 10, "max_frames": 20, "features": 6},
    "model": {"hidden": 8, "embedding": 8},
    "train": {"epochs": 1, "N": 4, "batch_size": 6, "crop_frames": 8, "repeats": 2},
    "eval": {"crop_frames": 10, "num_crops": 2, "trials_per_class": 20},
    "sweep": {"grid": [{"objective": "am_softmax", "margin": [0.1, 0.2]},
                       {"objective": "ge2e", "M": [2, 3]}]}
  })");
  const auto out = dir_ / "sweep";
  ASSERT_EQ(run("sweep --config " + cfg + " --jobs 3 --out " + out.string()), 0);
  std::ifstream csv(out / "results.csv");
  EXPECT_EQ(spkloss::read_runs_csv(csv).size(), 8u);
  const std::string table = slurp(out / "table.txt");
  EXPECT_LT(table.find("AM-Softmax"), table.find("GE2E")) << table;
  ASSERT_EQ(run("sweep --config " + cfg + " --objective ge2e --out " + (dir_ / "ge2e").string()), 0);
  std::ifstream filtered(dir_ / "ge2e" / "results.csv");
  EXPECT_EQ(spkloss::read_runs_csv(filtered).size(), 4u);
}

TEST_F(Cli, ReportWithoutResultsFails) {
  fs::create_directories(dir_ / "empty");
  EXPECT_NE(run("report --results " + (dir_ / "empty").string()), 0);
  EXPECT_NE(run("report --results " + (dir_ / "nowhere").string()), 0);
}

}  // namespace
