// SPDX-License-Identifier: Apache-2.0
//
// Full continual run: build the stream and prototypes, train task by task,
// refresh the buffer, snapshot the teacher and evaluate with a fresh probe.
#pragma once

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "nccl_lab/continual.hpp"
#include "nccl_lab/eval.hpp"
#include "nccl_lab/geometry.hpp"
#include "nccl_lab/model.hpp"
#include "nccl_lab/random.hpp"

namespace nccl_lab {

enum class Scenario { ClassIL, TaskIL };

struct ExperimentConfig {
  // [dataset]
  std::string dataset_kind = "blobs";
  BlobConfig blobs;
  // [stream]
  std::size_t tasks = 5;
  std::size_t classes_per_task = 2;
  Scenario scenario = Scenario::ClassIL;
  // [buffer]
  std::size_t buffer_capacity = 200;
  std::size_t aux_probe_samples = 200;  // probe-only reservoir when buffer_capacity = 0
  // [method] [mix] [loss] [augment] [train]
  MethodConfig method;
  // [model]
  ModelConfig model;
  // [probe]
  ProbeConfig probe;
  // [calib]
  std::size_t calib_bins = 15;
  std::uint64_t seed = 0;
};

struct TaskCalibration {
  double ece = 0.0;
  double oe = 0.0;
  double ece_task_il_masked = 0.0;
  double oe_task_il_masked = 0.0;
  double ece_task_il_unmasked = 0.0;
  double oe_task_il_unmasked = 0.0;
  std::vector<BinStats> bins;  // Class-IL reliability bins
};

struct InvariantReport {
  bool prototypes_unchanged = true;
  bool teacher_isolated = true;
  bool buffer_classes_seen = true;

  bool all() const { return prototypes_unchanged && teacher_isolated && buffer_classes_seen; }
};

struct RunRecord {
  ExperimentConfig config;
  AccuracyMatrix class_il;
  AccuracyMatrix task_il;
  double aa_class_il = 0.0;
  double aa_task_il = 0.0;
  std::optional<double> f_class_il;
  std::optional<double> f_task_il;
  std::vector<TaskCalibration> calibration;  // after the final task
  double aece = 0.0;
  double aoe = 0.0;
  double aece_task_il = 0.0;
  double aoe_task_il = 0.0;
  NcReport nc;
  std::vector<EpochLoss> losses;
  std::size_t fnc2_clamped = 0;
  InvariantReport invariants;
  double wall_seconds = 0.0;
  PrototypeSet prototypes;
  ModelParams params;
};

struct RunHooks {
  StepHook on_step;
  // Called after each task with the buffer contents and the new teacher.
  std::function<void(std::size_t task, const ReplayBuffer&, const ModelParams& teacher)> on_task_end;
};

inline TaskStream build_task_stream(const ExperimentConfig& cfg) {
  if (cfg.dataset_kind != "blobs") throw Error("unknown dataset kind '" + cfg.dataset_kind + "'");
  Rng rng = make_stream(cfg.seed, kStreamData);
  BlobConfig b = cfg.blobs;
  b.num_classes = cfg.tasks * cfg.classes_per_task;
  return split_tasks(make_blobs(b, rng), cfg.tasks, cfg.classes_per_task);
}

inline RunRecord run_experiment(const TaskStream& stream, const ExperimentConfig& cfg, const RunHooks& hooks = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t K = cfg.tasks * cfg.classes_per_task;
  if (stream.num_tasks() != cfg.tasks) throw Error("run_experiment: stream has the wrong number of tasks");

  RunRecord rec;
  rec.config = cfg;
  rec.prototypes = build_etf(K, cfg.model.out_dim, make_stream(cfg.seed, kStreamEtf)());
  const PrototypeSet& P = rec.prototypes;
  const PrototypeSet reference = P;

  ModelConfig mcfg = cfg.model;
  mcfg.input_dim = cfg.blobs.input_dim;
  mcfg.num_classes = K;
  Rng init_rng = make_stream(cfg.seed, kStreamInit);
  ModelParams params = init_model(mcfg, init_rng);
  MethodConfig method = cfg.method;
  method.use_predictor = cfg.model.use_predictor;

  TrainStreams train_rng{make_stream(cfg.seed, kStreamBatch), make_stream(cfg.seed, kStreamMix)};
  Rng buffer_rng = make_stream(cfg.seed, kStreamBuffer);
  Rng probe_rng = make_stream(cfg.seed, kStreamProbe);
  ReplayBuffer buffer(cfg.buffer_capacity);
  ReplayBuffer aux(cfg.buffer_capacity == 0 ? cfg.aux_probe_samples : 0);
  std::optional<ModelParams> teacher;

  for (std::size_t t = 0; t < cfg.tasks; ++t) {
    TaskContext ctx{t, &stream.train[t], &buffer.items(), &P, stream.classes_before(t), stream.classes_before(t + 1)};
    const std::optional<ModelParams> teacher_before = teacher;
    auto log = train_task(params, teacher ? &*teacher : nullptr, ctx, method, train_rng, hooks.on_step);
    for (const auto& row : log) rec.fnc2_clamped += row.clamped;
    rec.losses.insert(rec.losses.end(), log.begin(), log.end());
    if (teacher && !teacher->bitwise_equal(*teacher_before)) rec.invariants.teacher_isolated = false;

    for (const auto& s : stream.train[t]) buffer.offer(s, buffer_rng);
    for (const auto& s : stream.train[t]) aux.offer(s, buffer_rng);
    const std::set<int> seen(ctx.seen_classes.begin(), ctx.seen_classes.end());
    for (const auto& s : buffer.items())
      if (!seen.count(s.label)) rec.invariants.buffer_classes_seen = false;
    teacher = snapshot(params);
    if (hooks.on_task_end) hooks.on_task_end(t, buffer, *teacher);

    Dataset probe_data = stream.train[t];
    const Dataset& extra = cfg.buffer_capacity > 0 ? buffer.items() : aux.items();
    probe_data.insert(probe_data.end(), extra.begin(), extra.end());
    params.cls = train_probe(params, probe_data, K, cfg.probe, probe_rng);

    std::vector<double> row_c, row_t;
    const bool last = t + 1 == cfg.tasks;
    std::vector<std::vector<Prediction>> cal_c, cal_tm;
    for (std::size_t k = 0; k <= t; ++k) {
      ad::Tape tape;
      const ad::Tensor logits = forward_classifier(tape, params, encode(params, stream.test[k]));
      std::vector<int> labels;
      for (const auto& s : stream.test[k]) labels.push_back(s.label);
      const TaskEval ev = evaluate_task(logits, labels, stream.classes[k]);
      row_c.push_back(ev.class_il_acc);
      row_t.push_back(ev.task_il_acc);
      if (last) {
        TaskCalibration c;
        c.ece = ece(ev.class_il, cfg.calib_bins);
        c.oe = oe(ev.class_il, cfg.calib_bins);
        c.ece_task_il_masked = ece(ev.task_il_masked, cfg.calib_bins);
        c.oe_task_il_masked = oe(ev.task_il_masked, cfg.calib_bins);
        c.ece_task_il_unmasked = ece(ev.task_il_unmasked, cfg.calib_bins);
        c.oe_task_il_unmasked = oe(ev.task_il_unmasked, cfg.calib_bins);
        c.bins = reliability_bins(ev.class_il, cfg.calib_bins);
        rec.calibration.push_back(std::move(c));
        cal_c.push_back(ev.class_il);
        cal_tm.push_back(ev.task_il_masked);
      }
    }
    rec.class_il.push_back(std::move(row_c));
    rec.task_il.push_back(std::move(row_t));
    if (last) {
      const auto sc = aece_aoe(cal_c, cfg.calib_bins);
      const auto st = aece_aoe(cal_tm, cfg.calib_bins);
      rec.aece = sc.aece;
      rec.aoe = sc.aoe;
      rec.aece_task_il = st.aece;
      rec.aoe_task_il = st.aoe;
    }
  }

  rec.aa_class_il = average_accuracy(rec.class_il);
  rec.aa_task_il = average_accuracy(rec.task_il);
  if (cfg.tasks >= 2) {
    rec.f_class_il = average_forgetting(rec.class_il);
    rec.f_task_il = average_forgetting(rec.task_il);
  }

  Dataset all_test;
  for (const auto& d : stream.test) all_test.insert(all_test.end(), d.begin(), d.end());
  {
    ad::Tape tape;
    const ad::Tensor z = forward_features(tape, snapshot(params), stack_inputs(all_test));
    std::vector<int> labels;
    for (const auto& s : all_test) labels.push_back(s.label);
    rec.nc = nc_diagnostics(z, labels, P);
  }

  rec.invariants.prototypes_unchanged = P == reference;
  rec.params = params;
  rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rec;
}

inline RunRecord run_experiment(const ExperimentConfig& cfg, const RunHooks& hooks = {}) {
  return run_experiment(build_task_stream(cfg), cfg, hooks);
}

}  // namespace nccl_lab
