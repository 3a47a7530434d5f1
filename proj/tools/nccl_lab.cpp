// SPDX-License-Identifier: Apache-2.0
//
// nccl_lab run --config P [--seed N] [--seeds N] [--matrix key=v1,v2]... [--out DIR]
// nccl_lab compare --runs DIR... --out table.csv
// nccl_lab show-config --config P
//
// NCCL_LAB_THREADS caps how many runs execute concurrently.
#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <iostream>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "nccl_lab/config.hpp"
#include "nccl_lab/experiment.hpp"
#include "nccl_lab/record.hpp"

namespace {

using nccl_lab::ExperimentConfig;

struct MatrixAxis {
  std::string key;
  std::vector<std::string> values;
};

MatrixAxis parse_axis(const std::string& spec) {
  const auto eq = spec.find('=');
  if (eq == std::string::npos || eq == 0) throw nccl_lab::ConfigError("--matrix expects key=v1,v2, got '" + spec + "'");
  MatrixAxis axis{spec.substr(0, eq), {}};
  std::string rest = spec.substr(eq + 1);
  std::size_t start = 0;
  while (start <= rest.size()) {
    const auto comma = rest.find(',', start);
    axis.values.push_back(rest.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return axis;
}

// Cartesian product of the axes applied on top of `base`.
std::vector<ExperimentConfig> expand_matrix(const ExperimentConfig& base, const std::vector<MatrixAxis>& axes) {
  std::vector<ExperimentConfig> out{base};
  for (const auto& axis : axes) {
    std::vector<ExperimentConfig> next;
    for (const auto& cfg : out)
      for (const auto& v : axis.values) {
        ExperimentConfig c = cfg;
        nccl_lab::set_config_value(c, axis.key, v);
        next.push_back(c);
      }
    out = std::move(next);
  }
  for (const auto& c : out) nccl_lab::validate_config(c);
  return out;
}

unsigned thread_cap() {
  if (const char* env = std::getenv("NCCL_LAB_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return static_cast<unsigned>(n);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

int run_command(const std::string& config_path, const std::vector<std::string>& matrix, bool seed_given,
                std::uint64_t seed, int seeds, const std::string& out_root) {
  ExperimentConfig base = nccl_lab::parse_config(config_path);
  if (seed_given) base.seed = seed;
  std::vector<MatrixAxis> axes;
  for (const auto& m : matrix) axes.push_back(parse_axis(m));
  std::vector<ExperimentConfig> jobs;
  for (const auto& cfg : expand_matrix(base, axes))
    for (int s = 0; s < seeds; ++s) {
      ExperimentConfig c = cfg;
      c.seed = base.seed + static_cast<std::uint64_t>(s);
      jobs.push_back(c);
    }

  std::atomic<std::size_t> next{0};
  std::atomic<bool> ok{true};
  std::mutex io;
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      const auto& cfg = jobs[i];
      const auto dir = nccl_lab::run_directory(out_root, cfg);
      try {
        const auto rec = nccl_lab::run_experiment(cfg);
        nccl_lab::write_run(rec, dir);
        std::lock_guard lock(io);
        std::printf("%s  %-34s AA=%.2f F=%.2f AECE=%.4f AOE=%.4f invariants=%s\n", dir.string().c_str(),
                    nccl_lab::method_label(cfg).c_str(), rec.aa_class_il, rec.f_class_il.value_or(0.0), rec.aece,
                    rec.aoe, rec.invariants.all() ? "ok" : "FAILED");
        if (!rec.invariants.all()) ok = false;
      } catch (const std::exception& e) {
        std::lock_guard lock(io);
        std::fprintf(stderr, "error: %s: %s\n", dir.string().c_str(), e.what());
        ok = false;
      }
    }
  };
  const unsigned n = std::min<std::size_t>(thread_cap(), jobs.size());
  std::vector<std::thread> pool;
  for (unsigned t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  return ok ? 0 : 1;
}

int compare_command(const std::vector<std::string>& dirs, const std::string& out) {
  std::vector<nccl_lab::RunGroup> groups;
  for (const auto& d : dirs) groups.push_back(nccl_lab::load_group(d));
  const auto rows = nccl_lab::compare_groups(groups);
  nccl_lab::write_compare_csv(rows, out);
  for (const auto& r : rows)
    std::printf("%-12s %-40s %8.4f ± %-8.4f delta %+8.4f %s\n", r.metric.c_str(), r.label.c_str(), r.mean, r.std,
                r.delta, r.marker.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Continual-learning lab for sphere-adaptive mixup"};
  app.require_subcommand(1);

  std::string config_path, out_root = "runs";
  std::uint64_t seed = 0;
  int seeds = 1;
  std::vector<std::string> matrix;
  auto* run = app.add_subcommand("run", "Train and evaluate one or more runs");
  run->add_option("--config", config_path, "Config file")->required()->check(CLI::ExistingFile);
  auto* seed_opt = run->add_option("--seed", seed, "Seed (overrides train.seed)");
  run->add_option("--seeds", seeds, "Number of consecutive seeds starting at the seed")->check(CLI::PositiveNumber);
  run->add_option("--matrix", matrix, "Sweep axis key=v1,v2 (repeatable)");
  run->add_option("--out", out_root, "Output root; runs go to <out>/<hash>/<seed>");

  std::vector<std::string> run_dirs;
  std::string table = "table.csv";
  auto* cmp = app.add_subcommand("compare", "Compare run groups");
  cmp->add_option("--runs", run_dirs, "Run directories, one group each")->required()->expected(2, -1);
  cmp->add_option("--out", table, "Output CSV");

  std::string show_path;
  auto* show = app.add_subcommand("show-config", "Print the canonical form and hash of a config");
  show->add_option("--config", show_path, "Config file")->required()->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);
  try {
    if (*run) return run_command(config_path, matrix, seed_opt->count() > 0, seed, seeds, out_root);
    if (*cmp) return compare_command(run_dirs, table);
    if (*show) {
      const auto cfg = nccl_lab::parse_config(show_path);
      std::printf("# hash %s\n%s", nccl_lab::config_hash_hex(cfg).c_str(), nccl_lab::serialize_config(cfg).c_str());
      return 0;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
