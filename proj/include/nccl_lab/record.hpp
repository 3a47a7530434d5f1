// SPDX-License-Identifier: Apache-2.0
//
// Run artifacts and cross-run comparison tables.
//
//   <dir>/metrics.json           deterministic metrics, stable key order
//   <dir>/record.json            metrics plus config echo, wall time and loss curve
//   <dir>/config.ini             canonical config that reproduces the run
//   <dir>/losses.csv             one row per epoch
//   <dir>/reliability_bins.csv   task,bin_lo,bin_hi,count,acc,conf
//   <dir>/prototypes.csv         class,v0..v{d-1}
//   <dir>/model.bin|.json        final parameters
#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "nccl_lab/config.hpp"
#include "nccl_lab/error.hpp"
#include "nccl_lab/experiment.hpp"

namespace nccl_lab {

using ordered_json = nlohmann::ordered_json;

inline std::string method_label(const ExperimentConfig& cfg) {
  std::string s = cfg.method.plasticity.mode == PlasticityMode::DR ? "TA-NCCL" : "FC-NCCL";
  if (cfg.method.mix.enabled) s += cfg.method.mix.interp == InterpMode::Slerp ? "+SAMix(slerp)" : "+SAMix(linear)";
  return s + " buffer=" + std::to_string(cfg.buffer_capacity);
}

// The part of the config that fixes the data, for checking comparability.
inline std::string dataset_signature(const ExperimentConfig& cfg) {
  std::string out;
  std::istringstream in(serialize_config(cfg, false));
  std::string line, section;
  while (std::getline(in, line)) {
    if (!line.empty() && line.front() == '[') section = line;
    if ((section == "[dataset]" || section == "[stream]") && !line.empty() && line.front() != '[')
      out += line + ";";
  }
  return out;
}

namespace detail {

inline ordered_json optional_number(const std::optional<double>& v) {
  return v ? ordered_json(*v) : ordered_json(nullptr);
}

}  // namespace detail

inline ordered_json metrics_json(const RunRecord& r) {
  ordered_json j;
  j["run_id"] = config_hash_hex(r.config) + "/" + std::to_string(r.config.seed);
  j["config_hash"] = config_hash_hex(r.config);
  j["seed"] = r.config.seed;
  j["label"] = method_label(r.config);
  j["dataset"] = dataset_signature(r.config);
  j["accuracy"] = {{"class_il", r.class_il}, {"task_il", r.task_il}};
  j["aa_class_il"] = r.aa_class_il;
  j["aa_task_il"] = r.aa_task_il;
  j["f_class_il"] = detail::optional_number(r.f_class_il);
  j["f_task_il"] = detail::optional_number(r.f_task_il);
  ordered_json per_task = ordered_json::array();
  for (std::size_t k = 0; k < r.calibration.size(); ++k) {
    const auto& c = r.calibration[k];
    per_task.push_back({{"task", k + 1},
                        {"ece", c.ece},
                        {"oe", c.oe},
                        {"ece_task_il_masked", c.ece_task_il_masked},
                        {"oe_task_il_masked", c.oe_task_il_masked},
                        {"ece_task_il_unmasked", c.ece_task_il_unmasked},
                        {"oe_task_il_unmasked", c.oe_task_il_unmasked}});
  }
  j["calibration"] = {{"bins", r.config.calib_bins}, {"scenario", "class-il"}, {"per_task", per_task},
                      {"aece", r.aece}, {"aoe", r.aoe}, {"aece_task_il", r.aece_task_il},
                      {"aoe_task_il", r.aoe_task_il}};
  j["aece"] = r.aece;
  j["aoe"] = r.aoe;
  j["nc"] = {{"nc1", r.nc.nc1}, {"nc2", r.nc.nc2}, {"nc3", r.nc.nc3}, {"nc4_agreement", r.nc.nc4_agreement},
             {"classes", r.nc.classes}, {"warnings", r.nc.warnings}};
  j["fnc2_clamped"] = r.fnc2_clamped;
  j["invariants"] = {{"prototypes_unchanged", r.invariants.prototypes_unchanged},
                     {"teacher_isolated", r.invariants.teacher_isolated},
                     {"buffer_classes_seen", r.invariants.buffer_classes_seen}};
  return j;
}

inline ordered_json record_json(const RunRecord& r) {
  ordered_json j;
  j["config"] = serialize_config(r.config);
  j["metrics"] = metrics_json(r);
  j["wall_seconds"] = r.wall_seconds;
  ordered_json losses = ordered_json::array();
  for (const auto& e : r.losses)
    losses.push_back({{"task", e.task + 1}, {"epoch", e.epoch}, {"lr", e.lr}, {"total", e.total},
                      {"plasticity", e.plasticity}, {"distill", e.distill}, {"normal_dr", e.normal_dr},
                      {"clamped", e.clamped}});
  j["losses"] = losses;
  return j;
}

inline void write_reliability_csv(const std::vector<std::vector<BinStats>>& per_task, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path);
  os << "task,bin_lo,bin_hi,count,acc,conf\n" << std::setprecision(17);
  for (std::size_t k = 0; k < per_task.size(); ++k)
    for (const auto& b : per_task[k])
      os << k + 1 << ',' << b.lo << ',' << b.hi << ',' << b.count << ',' << b.acc << ',' << b.conf << '\n';
}

inline void write_losses_csv(const std::vector<EpochLoss>& losses, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path);
  os << "task,epoch,lr,total,plasticity,distill,normal_dr,clamped\n" << std::setprecision(17);
  for (const auto& e : losses)
    os << e.task + 1 << ',' << e.epoch << ',' << e.lr << ',' << e.total << ',' << e.plasticity << ',' << e.distill
       << ',' << e.normal_dr << ',' << e.clamped << '\n';
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path);
  os << text;
}

// runs/<hash>/<seed>
inline std::filesystem::path run_directory(const std::filesystem::path& root, const ExperimentConfig& cfg) {
  return root / config_hash_hex(cfg) / std::to_string(cfg.seed);
}

inline void write_run(const RunRecord& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_text((dir / "metrics.json").string(), metrics_json(r).dump(2) + "\n");
  write_text((dir / "record.json").string(), record_json(r).dump(2) + "\n");
  write_text((dir / "config.ini").string(), serialize_config(r.config));
  write_losses_csv(r.losses, (dir / "losses.csv").string());
  std::vector<std::vector<BinStats>> bins;
  for (const auto& c : r.calibration) bins.push_back(c.bins);
  write_reliability_csv(bins, (dir / "reliability_bins.csv").string());
  write_prototypes_csv(r.prototypes, (dir / "prototypes.csv").string());
  save_checkpoint(r.params, (dir / "model").string());
}

// ---------------------------------------------------------------- compare

struct MetricSpec {
  const char* key;
  bool higher_is_better;
};

inline constexpr MetricSpec kCompareMetrics[] = {
    {"aa_class_il", true}, {"aa_task_il", true}, {"f_class_il", false},
    {"f_task_il", false},  {"aece", false},      {"aoe", false},
};

struct RunGroup {
  std::string source;
  std::string label;
  std::string dataset;
  std::set<std::uint64_t> seeds;
  std::map<std::string, std::vector<double>> values;
};

// `dir` is either one seed directory (holding metrics.json) or a hash
// directory whose children are seed directories.
inline RunGroup load_group(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> files;
  if (std::filesystem::exists(dir / "metrics.json")) {
    files.push_back(dir / "metrics.json");
  } else if (std::filesystem::is_directory(dir)) {
    for (const auto& e : std::filesystem::directory_iterator(dir))
      if (std::filesystem::exists(e.path() / "metrics.json")) files.push_back(e.path() / "metrics.json");
  }
  if (files.empty()) throw Error("compare: no metrics.json under " + dir.string());
  std::sort(files.begin(), files.end());
  RunGroup g;
  g.source = dir.string();
  for (const auto& f : files) {
    std::ifstream is(f);
    const auto j = nlohmann::json::parse(is);
    if (g.label.empty()) {
      g.label = j.at("label").get<std::string>();
      g.dataset = j.at("dataset").get<std::string>();
    } else if (j.at("dataset").get<std::string>() != g.dataset) {
      throw Error("compare: mismatched datasets inside " + dir.string());
    }
    g.seeds.insert(j.at("seed").get<std::uint64_t>());
    for (const auto& m : kCompareMetrics)
      if (!j.at(m.key).is_null()) g.values[m.key].push_back(j.at(m.key).get<double>());
  }
  return g;
}

struct CompareRow {
  std::string group;
  std::string label;
  std::string metric;
  std::size_t n = 0;
  double mean = 0.0;
  double std = 0.0;
  double delta = 0.0;
  std::string marker;
};

inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {std::nan(""), std::nan("")};
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, v.size() > 1 ? std::sqrt(s / static_cast<double>(v.size() - 1)) : 0.0};
}

// Means over seeds per group, deltas against the first group. The marker is
// "▲" for an improvement, "▼" for a regression and "=" for no change.
inline std::vector<CompareRow> compare_groups(const std::vector<RunGroup>& groups) {
  if (groups.size() < 2) throw Error("compare: need at least 2 run groups");
  for (const auto& g : groups) {
    if (g.dataset != groups.front().dataset)
      throw Error("compare: mismatched datasets between " + groups.front().source + " and " + g.source);
    if (g.seeds != groups.front().seeds)
      throw Error("compare: seed sets differ between " + groups.front().source + " and " + g.source);
  }
  std::vector<CompareRow> rows;
  for (const auto& m : kCompareMetrics) {
    const auto it0 = groups.front().values.find(m.key);
    if (it0 == groups.front().values.end()) continue;
    const double base = mean_std(it0->second).first;
    for (const auto& g : groups) {
      const auto it = g.values.find(m.key);
      if (it == g.values.end()) continue;
      const auto [mean, sd] = mean_std(it->second);
      CompareRow r{g.source, g.label, m.key, it->second.size(), mean, sd, mean - base, ""};
      if (&g != &groups.front()) {
        const double signed_gain = m.higher_is_better ? r.delta : -r.delta;
        r.marker = signed_gain > 0 ? "▲" : signed_gain < 0 ? "▼" : "=";
      }
      rows.push_back(std::move(r));
    }
  }
  return rows;
}

inline std::string csv_quote(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

inline void write_compare_csv(const std::vector<CompareRow>& rows, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path);
  os << "group,label,metric,n,mean,std,delta,marker\n" << std::setprecision(17);
  for (const auto& r : rows)
    os << csv_quote(r.group) << ',' << csv_quote(r.label) << ',' << r.metric << ',' << r.n << ',' << r.mean << ','
       << r.std << ',' << r.delta << ',' << r.marker << '\n';
}

}  // namespace nccl_lab
