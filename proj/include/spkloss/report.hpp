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

#ifndef SPKLOSS_REPORT_HPP_
#define SPKLOSS_REPORT_HPP_

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "spkloss/trainer.hpp"

namespace spkloss {

/// Hyperparameters that identify a results-table row.
struct RunKey {
  Objective objective = Objective::kSoftmax;
  double margin = 0.0;
  double scale = 0.0;
  bool curriculum = false;
  std::size_t speakers = 0;   // N (classification: batch size)
  std::size_t per_speaker = 0;  // M

  static RunKey of(const TrainRunConfig& c) {
    const auto [n, m] = c.batch_shape();
    return {c.objective, c.margin, c.scale, c.curriculum.has_value(), n, m};
  }

  auto tie() const {
    return std::make_tuple(static_cast<int>(objective), margin, scale, curriculum, per_speaker,
                           speakers);
  }
  friend bool operator<(const RunKey& a, const RunKey& b) { return a.tie() < b.tie(); }
  friend bool operator==(const RunKey& a, const RunKey& b) { return a.tie() == b.tie(); }
};

/// Human-readable hyperparameter column.
inline std::string describe(const RunKey& k) {
  char buf[128];
  switch (k.objective) {
    case Objective::kSoftmax:
      std::snprintf(buf, sizeof buf, "B=%zu", k.speakers);
      break;
    case Objective::kAmSoftmax:
    case Objective::kAamSoftmax:
      std::snprintf(buf, sizeof buf, "m=%g s=%g%s", k.margin, k.scale,
                    k.curriculum ? " curriculum" : "");
      break;
    case Objective::kTriplet:
      std::snprintf(buf, sizeof buf, "m=%g N=%zu%s", k.margin, k.speakers,
                    k.curriculum ? " curriculum" : "");
      break;
    default:
      std::snprintf(buf, sizeof buf, "M=%zu N=%zu", k.per_speaker, k.speakers);
      break;
  }
  return buf;
}

/// One finished (or failed) training + evaluation.
struct RunRecord {
  RunKey key;
  std::uint64_t seed = 0;
  double eer = 0.0;
  bool ok = true;
  std::string error;
};

inline std::string format_g17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline constexpr const char* kRunCsvHeader = "objective,margin,scale,curriculum,N,M,seed,eer,status";

/// Per-run CSV; numbers use 17 significant digits so they read back exactly.
/// The status column is "ok" or the error message with commas replaced.
inline void write_runs_csv(std::ostream& os, const std::vector<RunRecord>& runs, bool header = true) {
  if (header) os << kRunCsvHeader << '\n';
  for (const auto& r : runs) {
    std::string status = r.ok ? "ok" : "failed: " + r.error;
    std::replace(status.begin(), status.end(), ',', ';');
    std::replace(status.begin(), status.end(), '\n', ' ');
    os << objective_name(r.key.objective) << ',' << format_g17(r.key.margin) << ','
       << format_g17(r.key.scale) << ',' << (r.key.curriculum ? 1 : 0) << ',' << r.key.speakers
       << ',' << r.key.per_speaker << ',' << r.seed << ',' << format_g17(r.eer) << ',' << status
       << '\n';
  }
}

namespace detail {

inline std::vector<std::string> split_csv(const std::string& line, std::size_t max_fields) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (out.size() + 1 < max_fields) {
    const std::size_t comma = line.find(',', start);
    if (comma == std::string::npos) break;
    out.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
  out.push_back(line.substr(start));
  return out;
}

inline double parse_double(const std::string& s, const std::string& line) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    throw DomainError("malformed number '" + s + "' in: " + line);
  }
  if (used != s.size()) throw DomainError("malformed number '" + s + "' in: " + line);
  return v;
}

inline std::uint64_t parse_uint(const std::string& s, const std::string& line) {
  if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos)
    throw DomainError("malformed integer '" + s + "' in: " + line);
  return std::stoull(s);
}

}  // namespace detail

inline std::vector<RunRecord> read_runs_csv(std::istream& is) {
  std::vector<RunRecord> runs;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line == kRunCsvHeader) continue;
    const auto f = detail::split_csv(line, 9);
    if (f.size() != 9) throw DomainError("malformed results row: " + line);
    RunRecord r;
    const auto obj = parse_objective(f[0]);
    if (!obj) throw DomainError("unknown objective '" + f[0] + "' in: " + line);
    r.key.objective = *obj;
    r.key.margin = detail::parse_double(f[1], line);
    r.key.scale = detail::parse_double(f[2], line);
    r.key.curriculum = detail::parse_uint(f[3], line) != 0;
    r.key.speakers = detail::parse_uint(f[4], line);
    r.key.per_speaker = detail::parse_uint(f[5], line);
    r.seed = detail::parse_uint(f[6], line);
    r.eer = detail::parse_double(f[7], line);
    r.ok = f[8] == "ok";
    if (!r.ok) r.error = f[8].rfind("failed: ", 0) == 0 ? f[8].substr(8) : f[8];
    runs.push_back(std::move(r));
  }
  return runs;
}

/// Aggregated row: EERs are fractions in [0, 1].
struct ReportRow {
  RunKey key;
  double mean_eer = 0.0;
  double std_eer = 0.0;
  std::size_t repeats = 0;
  std::size_t failures = 0;
};

/// Groups runs by key; mean and population std over successful runs.
/// Rows come out in canonical objective order, then by hyperparameters.
inline std::vector<ReportRow> aggregate(const std::vector<RunRecord>& runs) {
  std::map<RunKey, std::pair<std::vector<double>, std::size_t>> groups;
  for (const auto& r : runs) {
    auto& g = groups[r.key];
    if (r.ok) g.first.push_back(r.eer);
    else ++g.second;
  }
  std::vector<ReportRow> rows;
  for (const auto& [key, g] : groups) {
    ReportRow row;
    row.key = key;
    row.repeats = g.first.size() + g.second;
    row.failures = g.second;
    std::tie(row.mean_eer, row.std_eer) = mean_and_std(g.first);
    rows.push_back(row);
  }
  return rows;
}

inline std::vector<RunRecord> runs_from_sweep(const std::vector<SweepRow>& sweep) {
  std::vector<RunRecord> out;
  for (const auto& row : sweep)
    for (const auto& run : row.runs)
      out.push_back({RunKey::of(row.config), run.seed, run.ok ? run.eer : 0.0, run.ok, run.error});
  return out;
}

/// "2.20±0.16": percentages with two decimals.
inline std::string format_mean_std(double mean_fraction, double std_fraction) {
  if (std::isnan(mean_fraction)) return "failed";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f±%.2f", 100.0 * mean_fraction, 100.0 * std_fraction);
  return buf;
}

/// Text table: classification block, then metric-learning block.
inline void render_table(std::ostream& os, const std::vector<ReportRow>& rows) {
  std::size_t obj_w = 9, hp_w = 15;
  for (const auto& r : rows) {
    obj_w = std::max(obj_w, objective_label(r.key.objective).size());
    hp_w = std::max(hp_w, describe(r.key).size());
  }
  // Pads by display width; "±" is two bytes of UTF-8.
  auto padded = [](const std::string& s, std::size_t width) {
    const auto shown = static_cast<std::size_t>(
        std::count_if(s.begin(), s.end(), [](char ch) { return (static_cast<unsigned char>(ch) & 0xC0) != 0x80; }));
    return s + std::string(width > shown ? width - shown : 0, ' ');
  };
  auto line = [&](const std::string& a, const std::string& b, const std::string& c,
                  const std::string& d) {
    os << padded(a, obj_w) << "  " << padded(b, hp_w) << "  " << padded(c, 14) << "  " << d << '\n';
  };
  line("Objective", "Hyperparameters", "EER (%)", "Runs");
  const std::string rule(obj_w + hp_w + 26, '-');
  int block = -1;
  for (const auto& r : rows) {
    const int b = is_classification(r.key.objective) ? 0 : 1;
    if (b != block) {
      os << rule << '\n';
      block = b;
    }
    std::string runs = std::to_string(r.repeats);
    if (r.failures) runs += " (" + std::to_string(r.failures) + " failed)";
    line(std::string(objective_label(r.key.objective)), describe(r.key),
         format_mean_std(r.mean_eer, r.std_eer), runs);
  }
}

inline constexpr const char* kSummaryCsvHeader =
    "objective,margin,scale,curriculum,N,M,mean_eer,std_eer,repeats,failures";

inline void write_summary_csv(std::ostream& os, const std::vector<ReportRow>& rows) {
  os << kSummaryCsvHeader << '\n';
  for (const auto& r : rows)
    os << objective_name(r.key.objective) << ',' << format_g17(r.key.margin) << ','
       << format_g17(r.key.scale) << ',' << (r.key.curriculum ? 1 : 0) << ',' << r.key.speakers
       << ',' << r.key.per_speaker << ',' << format_g17(r.mean_eer) << ','
       << format_g17(r.std_eer) << ',' << r.repeats << ',' << r.failures << '\n';
}

inline std::vector<ReportRow> read_summary_csv(std::istream& is) {
  std::vector<ReportRow> rows;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line == kSummaryCsvHeader) continue;
    const auto f = detail::split_csv(line, 10);
    if (f.size() != 10) throw DomainError("malformed summary row: " + line);
    ReportRow r;
    const auto obj = parse_objective(f[0]);
    if (!obj) throw DomainError("unknown objective '" + f[0] + "' in: " + line);
    r.key = {*obj,
             detail::parse_double(f[1], line),
             detail::parse_double(f[2], line),
             detail::parse_uint(f[3], line) != 0,
             detail::parse_uint(f[4], line),
             detail::parse_uint(f[5], line)};
    r.mean_eer = detail::parse_double(f[6], line);
    r.std_eer = detail::parse_double(f[7], line);
    r.repeats = detail::parse_uint(f[8], line);
    r.failures = detail::parse_uint(f[9], line);
    rows.push_back(r);
  }
  return rows;
}

/// Every *.csv under `dir` holding per-run records (summary files skipped).
inline std::vector<RunRecord> collect_runs(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir))
    throw DomainError("results directory not found: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".csv") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<RunRecord> runs;
  for (const auto& p : files) {
    std::ifstream in(p);
    std::string first;
    std::getline(in, first);
    if (first != kRunCsvHeader) continue;
    in.seekg(0);
    auto part = read_runs_csv(in);
    runs.insert(runs.end(), part.begin(), part.end());
  }
  return runs;
}

}  // namespace spkloss

#endif  // SPKLOSS_REPORT_HPP_
