// SPDX-License-Identifier: Apache-2.0
//
// Task stream, reservoir replay buffer, view generation and the per-task
// training loop.
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "nccl_lab/autodiff.hpp"
#include "nccl_lab/data.hpp"
#include "nccl_lab/error.hpp"
#include "nccl_lab/eval.hpp"
#include "nccl_lab/geometry.hpp"
#include "nccl_lab/losses.hpp"
#include "nccl_lab/model.hpp"
#include "nccl_lab/random.hpp"
#include "nccl_lab/samix.hpp"

namespace nccl_lab {

// ---------------------------------------------------------------- data

struct BlobConfig {
  std::size_t num_classes = 10;
  std::size_t input_dim = 16;
  std::size_t train_per_class = 200;
  std::size_t test_per_class = 100;
  double center_scale = 1.0;  // expected norm of a class center
  double spread = 0.3;        // per-coordinate standard deviation around the center

  bool operator==(const BlobConfig&) const = default;
};

struct BlobData {
  Dataset train;
  Dataset test;
  std::vector<std::vector<double>> centers;
};

// Gaussian blobs around random centers.
inline BlobData make_blobs(const BlobConfig& cfg, Rng& rng) {
  if (cfg.num_classes == 0 || cfg.input_dim == 0) throw Error("make_blobs: empty class or input dimension");
  std::normal_distribution<double> normal(0.0, 1.0);
  BlobData out;
  const double c_sd = cfg.center_scale / std::sqrt(static_cast<double>(cfg.input_dim));
  for (std::size_t k = 0; k < cfg.num_classes; ++k) {
    std::vector<double> c(cfg.input_dim);
    for (auto& v : c) v = c_sd * normal(rng);
    out.centers.push_back(std::move(c));
  }
  auto draw = [&](std::size_t per_class, Dataset& into) {
    for (std::size_t k = 0; k < cfg.num_classes; ++k)
      for (std::size_t i = 0; i < per_class; ++i) {
        Sample s{out.centers[k], static_cast<int>(k)};
        for (auto& v : s.x) v += cfg.spread * normal(rng);
        into.push_back(std::move(s));
      }
  };
  draw(cfg.train_per_class, out.train);
  draw(cfg.test_per_class, out.test);
  return out;
}

// Task t owns classes [t*c, (t+1)*c).
struct TaskStream {
  std::vector<Dataset> train;
  std::vector<Dataset> test;
  std::vector<std::vector<int>> classes;

  std::size_t num_tasks() const { return classes.size(); }

  // Classes of tasks [0, t), i.e. the past for task t.
  std::vector<int> classes_before(std::size_t t) const {
    std::vector<int> out;
    for (std::size_t i = 0; i < t && i < classes.size(); ++i) out.insert(out.end(), classes[i].begin(), classes[i].end());
    return out;
  }
};

inline TaskStream split_tasks(const BlobData& data, std::size_t num_tasks, std::size_t classes_per_task) {
  if (num_tasks == 0 || classes_per_task == 0) throw Error("split_tasks: need at least one task and one class per task");
  TaskStream s;
  s.train.resize(num_tasks);
  s.test.resize(num_tasks);
  s.classes.resize(num_tasks);
  for (std::size_t t = 0; t < num_tasks; ++t)
    for (std::size_t c = 0; c < classes_per_task; ++c) s.classes[t].push_back(static_cast<int>(t * classes_per_task + c));
  auto task_of = [&](int label) {
    const auto t = static_cast<std::size_t>(label) / classes_per_task;
    if (t >= num_tasks) throw Error("split_tasks: label " + std::to_string(label) + " beyond the last task");
    return t;
  };
  for (const auto& x : data.train) s.train[task_of(x.label)].push_back(x);
  for (const auto& x : data.test) s.test[task_of(x.label)].push_back(x);
  return s;
}

// ---------------------------------------------------------------- replay buffer

class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity = 0) : capacity_(capacity) {}

  // Algorithm R: keep the first `capacity` items, then replace slot u for
  // u ~ U{0..seen} when u < capacity.
  void offer(const Sample& item, Rng& rng) {
    if (items_.size() < capacity_) {
      items_.push_back(item);
    } else if (capacity_ > 0) {
      std::uniform_int_distribution<std::size_t> pick(0, seen_);
      const std::size_t u = pick(rng);
      if (u < capacity_) items_[u] = item;
    }
    ++seen_;
  }

  std::size_t capacity() const { return capacity_; }
  std::size_t seen() const { return seen_; }
  std::size_t size() const { return items_.size(); }
  const Dataset& items() const { return items_; }

 private:
  std::size_t capacity_;
  std::size_t seen_ = 0;
  Dataset items_;
};

// ---------------------------------------------------------------- views and batches

struct AugmentConfig {
  double noise_sigma = 0.1;
  double mask_rate = 0.1;

  bool operator==(const AugmentConfig&) const = default;
};

// Gaussian noise plus a random coordinate dropout mask, independently per view.
inline std::pair<std::vector<double>, std::vector<double>> make_views(const Sample& s, const AugmentConfig& cfg,
                                                                      Rng& rng) {
  std::normal_distribution<double> noise(0.0, 1.0);
  std::bernoulli_distribution drop(std::clamp(cfg.mask_rate, 0.0, 1.0));
  auto view = [&] {
    std::vector<double> v = s.x;
    for (auto& x : v) {
      if (cfg.noise_sigma > 0.0) x += cfg.noise_sigma * noise(rng);
      if (cfg.mask_rate > 0.0 && drop(rng)) x = 0.0;
    }
    return v;
  };
  auto a = view();
  auto b = view();
  return {std::move(a), std::move(b)};
}

// N i.i.d. picks from D_t and the buffer, each expanded to two views.
inline Batch draw_batch(const Dataset& current, const Dataset& buffer, std::size_t n, const AugmentConfig& aug,
                        Rng& rng) {
  if (n < 2) throw Error("draw_batch: batch size must be >= 2");
  const std::size_t total = current.size() + buffer.size();
  if (total == 0) throw Error("draw_batch: D_t and the buffer are both empty");
  std::uniform_int_distribution<std::size_t> pick(0, total - 1);
  const std::size_t dim = current.empty() ? buffer.front().x.size() : current.front().x.size();
  std::vector<double> xs;
  xs.reserve(2 * n * dim);
  Batch b;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t k = pick(rng);
    const bool from_buffer = k >= current.size();
    const Sample& s = from_buffer ? buffer[k - current.size()] : current[k];
    auto [v1, v2] = make_views(s, aug, rng);
    xs.insert(xs.end(), v1.begin(), v1.end());
    xs.insert(xs.end(), v2.begin(), v2.end());
    for (int r = 0; r < 2; ++r) {
      b.labels.push_back(s.label);
      b.origins.push_back(from_buffer ? Origin::Buffer : Origin::Current);
    }
  }
  b.inputs = ad::Tensor::matrix(2 * n, dim, std::move(xs));
  return b;
}

// ---------------------------------------------------------------- training

struct TrainConfig {
  int epochs_first = 60;
  int epochs_rest = 30;
  std::size_t batch_size = 32;
  LrSchedule schedule{0.1, 5};
  SgdConfig sgd{};

  bool operator==(const TrainConfig&) const = default;
};

struct MethodConfig {
  PlasticityConfig plasticity;
  Fnc2Config fnc2;
  DistillConfig distill;  // epochs_total is set per task
  MixConfig mix;
  AugmentConfig augment;
  TrainConfig train;
  bool use_predictor = true;
};

// What one optimization step fed to each loss; lets tests check routing.
struct StepTrace {
  std::size_t task = 0;
  int epoch = 0;
  std::size_t batch = 0;
  const Batch* views = nullptr;
  const MixedBatch* mixed = nullptr;        // null when mixing is off
  const ad::Tensor* distill_inputs = nullptr;  // rows given to the teacher and to HSD; null for t = 1
  double loss = 0.0;
};

using StepHook = std::function<void(const StepTrace&)>;

struct EpochLoss {
  std::size_t task = 0;
  int epoch = 0;
  double lr = 0.0;
  double total = 0.0;
  double plasticity = 0.0;
  double distill = 0.0;
  double normal_dr = 0.0;  // DR on the normal views, whatever the mode
  std::size_t clamped = 0;
};

struct TaskContext {
  std::size_t task = 0;  // zero-based
  const Dataset* current = nullptr;
  const Dataset* buffer = nullptr;
  const PrototypeSet* prototypes = nullptr;
  std::vector<int> past_classes;  // C_1..C_{t-1}
  std::vector<int> seen_classes;  // C_1..C_t
};

struct TrainStreams {
  Rng batch;
  Rng mix;
};

// One pass of Algorithm 1's inner loop over the epochs of task `ctx.task`.
inline std::vector<EpochLoss> train_task(ModelParams& params, const ModelParams* teacher, const TaskContext& ctx,
                                         const MethodConfig& cfg, TrainStreams& rng, const StepHook& hook = {}) {
  const PrototypeSet& P = *ctx.prototypes;
  const int epochs = ctx.task == 0 ? cfg.train.epochs_first : cfg.train.epochs_rest;
  if (epochs <= 0) throw Error("train_task: epoch count must be positive");
  const bool distill = ctx.task > 0;
  if (distill && !teacher) throw Error("train_task: task " + std::to_string(ctx.task + 1) + " needs a teacher");
  DistillConfig dcfg = cfg.distill;
  dcfg.epochs_total = epochs;

  const ad::Tensor past_protos =
      ctx.past_classes.empty() ? ad::Tensor::zeros({0, P.dim()}) : P.gather(ctx.past_classes);
  const ad::Tensor seen_protos = P.gather(ctx.seen_classes);
  const std::size_t pool = ctx.current->size() + ctx.buffer->size();
  const std::size_t batches = (pool + cfg.train.batch_size - 1) / cfg.train.batch_size;

  OptimizerState opt{cfg.train.sgd, {}};
  std::vector<EpochLoss> log;
  for (int e = 0; e < epochs; ++e) {
    EpochLoss row{ctx.task, e, lr_at(cfg.train.schedule, e, epochs), 0, 0, 0, 0, 0};
    for (std::size_t b = 0; b < batches; ++b) {
      const Batch views = draw_batch(*ctx.current, *ctx.buffer, cfg.train.batch_size, cfg.augment, rng.batch);
      ad::Tape tape;
      const ModelParams bound = bind(tape, params);
      const ad::Tensor z = forward_features(tape, bound, views.inputs);
      const ad::Tensor targets = P.gather(views.labels);

      MixedBatch mixed;
      MixedTerms mixed_terms;
      if (cfg.mix.enabled) {
        mixed = mix_batch(views, P, cfg.mix, rng.mix);
        mixed_terms = {forward_features(tape, bound, mixed.inputs), mixed.prototypes};
      }
      LossStats stats;
      ad::Tensor loss = plasticity_loss(tape, z, views.labels, targets, past_protos,
                                        cfg.mix.enabled ? &mixed_terms : nullptr, cfg.plasticity, cfg.fnc2, &stats);
      const double plas = loss.item();
      double dist = 0.0;
      if (distill) {
        // Teacher parameters are untracked, so this forward records nothing.
        const ad::Tensor z_past = forward_features(tape, *teacher, views.inputs);
        const ad::Tensor z_cur = cfg.use_predictor ? forward_predictor(tape, bound, z) : z;
        const ad::Tensor ird = ird_loss(tape, z_cur, z_past, dcfg.kappa_current, dcfg.kappa_past);
        const ad::Tensor sprd = sprd_loss(tape, z_cur, z_past, seen_protos, dcfg.zeta_current, dcfg.zeta_past);
        const ad::Tensor hsd = hsd_loss(tape, ird, sprd, e, dcfg);
        dist = hsd.item();
        loss = tape.add(loss, hsd);
      }
      if (!std::isfinite(loss.item()))
        throw NumericError("train_task: non-finite loss at task " + std::to_string(ctx.task + 1) + ", epoch " +
                           std::to_string(e) + ", batch " + std::to_string(b));
      if (hook) hook({ctx.task, e, b, &views, cfg.mix.enabled ? &mixed : nullptr, distill ? &views.inputs : nullptr,
                      loss.item()});

      double dr_normal = 0.0;
      for (std::size_t i = 0; i < z.rows(); ++i) {
        const double c = detail::dot(z.row(i), targets.row(i));
        dr_normal += 0.5 * (c - 1.0) * (c - 1.0) / static_cast<double>(z.rows());
      }
      row.total += loss.item() / static_cast<double>(batches);
      row.plasticity += plas / static_cast<double>(batches);
      row.distill += dist / static_cast<double>(batches);
      row.normal_dr += dr_normal / static_cast<double>(batches);
      row.clamped += stats.clamped;

      const auto grads = tape.backward(loss);
      sgd_step(params, bound, grads, opt, row.lr);
    }
    log.push_back(row);
  }
  return log;
}

}  // namespace nccl_lab
