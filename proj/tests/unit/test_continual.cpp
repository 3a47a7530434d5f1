// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "nccl_lab/experiment.hpp"
#include "tiny.hpp"

using namespace nccl_lab;
using testing_support::tiny_config;

namespace {

Dataset numbered(std::size_t n, std::size_t dim = 2) {
  Dataset d;
  for (std::size_t i = 0; i < n; ++i) d.push_back({std::vector<double>(dim, static_cast<double>(i)), static_cast<int>(i)});
  return d;
}

}  // namespace

// ---------------------------------------------------------------- reservoir

TEST(Reservoir, LargeCapacityKeepsEverything) {
  ReplayBuffer b(50);
  Rng rng(1);
  const auto s = numbered(30);
  for (const auto& x : s) b.offer(x, rng);
  EXPECT_EQ(b.items(), s);
  EXPECT_EQ(b.seen(), 30u);
}

TEST(Reservoir, ZeroCapacityStaysEmpty) {
  ReplayBuffer b(0);
  Rng rng(1);
  for (const auto& x : numbered(100)) b.offer(x, rng);
  EXPECT_EQ(b.size(), 0u);
  EXPECT_EQ(b.seen(), 100u);
}

TEST(Reservoir, SizeNeverExceedsCapacity) {
  ReplayBuffer b(7);
  Rng rng(2);
  for (const auto& x : numbered(300)) {
    b.offer(x, rng);
    EXPECT_LE(b.size(), 7u);
  }
  EXPECT_EQ(b.size(), 7u);
}

TEST(Reservoir, CapacityOneRetainsEachItemUniformly) {
  const std::size_t n = 10, trials = 20000;
  std::vector<std::size_t> hits(n, 0);
  Rng rng(3);
  const auto s = numbered(n);
  for (std::size_t t = 0; t < trials; ++t) {
    ReplayBuffer b(1);
    for (const auto& x : s) b.offer(x, rng);
    ++hits[static_cast<std::size_t>(b.items()[0].label)];
  }
  const double p = 1.0 / n, sigma = std::sqrt(p * (1 - p) / trials);
  for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(static_cast<double>(hits[i]) / trials, p, 3 * sigma) << i;
}

// ---------------------------------------------------------------- views

TEST(Views, NoAugmentationCopiesTheSample) {
  const Sample s{{0.1, -0.2, 0.3}, 1};
  Rng rng(4);
  const auto [a, b] = make_views(s, AugmentConfig{0.0, 0.0}, rng);
  EXPECT_EQ(a, s.x);
  EXPECT_EQ(b, s.x);
}

TEST(Views, SeededAndDistinct) {
  const Sample s{{0.1, -0.2, 0.3, 0.4}, 1};
  Rng r1(5), r2(5);
  const auto v1 = make_views(s, AugmentConfig{}, r1);
  const auto v2 = make_views(s, AugmentConfig{}, r2);
  EXPECT_EQ(v1, v2);
  EXPECT_NE(v1.first, v1.second);
}

TEST(Views, SmallNoiseKeepsViewsCloseToTheSource) {
  BlobConfig bc;
  bc.num_classes = 4;
  Rng data_rng(6), rng(7);
  const auto blobs = make_blobs(bc, data_rng);
  std::size_t close = 0, total = 0;
  for (const auto& s : blobs.train) {
    const auto [a, b] = make_views(s, AugmentConfig{0.1, 0.0}, rng);
    for (const auto* v : {&a, &b}) {
      double d = 0, na = 0, nb = 0;
      for (std::size_t i = 0; i < s.x.size(); ++i) {
        d += s.x[i] * (*v)[i];
        na += s.x[i] * s.x[i];
        nb += (*v)[i] * (*v)[i];
      }
      close += d / std::sqrt(na * nb) > 0.9;
      ++total;
    }
  }
  EXPECT_GT(static_cast<double>(close) / total, 0.95);
}

TEST(Batches, AlwaysTwoViewsPerSource) {
  const auto cur = numbered(20, 3), buf = numbered(5, 3);
  Rng rng(8);
  for (std::size_t n : {2, 5, 32}) {
    const Batch b = draw_batch(cur, buf, n, AugmentConfig{}, rng);
    ASSERT_EQ(b.size(), 2 * n);
    ASSERT_EQ(b.inputs.rows(), 2 * n);
    for (std::size_t i = 0; i < n; ++i) {
      EXPECT_EQ(b.labels[2 * i], b.labels[2 * i + 1]);
      EXPECT_EQ(b.origins[2 * i], b.origins[2 * i + 1]);
    }
  }
}

TEST(Batches, EmptyBufferDrawsOnlyCurrent) {
  const auto cur = numbered(10);
  Rng rng(9);
  const Batch b = draw_batch(cur, {}, 16, AugmentConfig{}, rng);
  for (auto o : b.origins) EXPECT_EQ(o, Origin::Current);
}

TEST(Batches, EqualSizedBufferIsHalfTheDraws) {
  const auto cur = numbered(50), buf = numbered(50);
  Rng rng(10);
  std::size_t from_buffer = 0, total = 0;
  for (int i = 0; i < 500; ++i) {
    const Batch b = draw_batch(cur, buf, 16, AugmentConfig{}, rng);
    for (std::size_t k = 0; k < b.size(); k += 2) {
      from_buffer += b.origins[k] == Origin::Buffer;
      ++total;
    }
  }
  const double sigma = std::sqrt(0.25 / total);
  EXPECT_NEAR(static_cast<double>(from_buffer) / total, 0.5, 4 * sigma);
}

TEST(Batches, Errors) {
  Rng rng(11);
  EXPECT_THROW(draw_batch({}, {}, 4, AugmentConfig{}, rng), Error);
  EXPECT_THROW(draw_batch(numbered(3), {}, 1, AugmentConfig{}, rng), Error);
}

// ---------------------------------------------------------------- stream

TEST(Stream, TasksHaveDisjointClassesCoveringAll) {
  const auto cfg = tiny_config();
  const auto s = build_task_stream(cfg);
  std::set<int> all;
  for (std::size_t t = 0; t < s.num_tasks(); ++t) {
    for (int c : s.classes[t]) EXPECT_TRUE(all.insert(c).second);
    for (const auto& x : s.train[t])
      EXPECT_NE(std::find(s.classes[t].begin(), s.classes[t].end(), x.label), s.classes[t].end());
    EXPECT_EQ(s.train[t].size(), 2 * cfg.blobs.train_per_class);
    EXPECT_EQ(s.test[t].size(), 2 * cfg.blobs.test_per_class);
  }
  EXPECT_EQ(all.size(), 6u);
}

// ---------------------------------------------------------------- training

TEST(TrainTask, FirstTaskHasNoDistillationAndLaterTasksUseNormalViewsOnly) {
  auto cfg = tiny_config();
  std::size_t first = 0, later = 0;
  RunHooks hooks;
  hooks.on_step = [&](const StepTrace& s) {
    ASSERT_NE(s.mixed, nullptr);
    if (s.task == 0) {
      EXPECT_EQ(s.distill_inputs, nullptr);
      ++first;
    } else {
      ASSERT_NE(s.distill_inputs, nullptr);
      // Distillation sees exactly the 2N normal views, never the mixed inputs.
      EXPECT_TRUE(s.distill_inputs->bitwise_equal(s.views->inputs));
      EXPECT_EQ(s.distill_inputs->rows(), 2 * cfg.method.train.batch_size);
      ++later;
    }
  };
  run_experiment(cfg, hooks);
  EXPECT_GT(first, 0u);
  EXPECT_GT(later, 0u);
}

TEST(TrainTask, TeacherIsTheEndOfPreviousTask) {
  auto cfg = tiny_config();
  std::vector<ModelParams> teachers;
  RunHooks hooks;
  hooks.on_task_end = [&](std::size_t, const ReplayBuffer&, const ModelParams& teacher) { teachers.push_back(teacher); };
  const auto rec = run_experiment(cfg, hooks);
  ASSERT_EQ(teachers.size(), 3u);
  EXPECT_TRUE(rec.invariants.teacher_isolated);
  // Without the probe head, the final parameters are the last teacher.
  ModelParams last = rec.params;
  last.cls = teachers.back().cls;
  EXPECT_TRUE(last.bitwise_equal(teachers.back()));
  EXPECT_FALSE(teachers[0].bitwise_equal(teachers[1]));
}

TEST(TrainTask, TrainTaskNeverWritesTheTeacher) {
  auto cfg = tiny_config();
  const auto stream = build_task_stream(cfg);
  const auto P = build_etf(6, 6, 1);
  Rng init(1);
  ModelConfig mc = cfg.model;
  mc.input_dim = 8;
  mc.num_classes = 6;
  ModelParams params = init_model(mc, init);
  const ModelParams teacher = snapshot(params);
  const ModelParams copy = teacher;
  const Dataset buffer;
  TaskContext ctx{1, &stream.train[1], &buffer, &P, stream.classes_before(1), stream.classes_before(2)};
  TrainStreams rng{Rng(2), Rng(3)};
  train_task(params, &teacher, ctx, cfg.method, rng);
  EXPECT_TRUE(teacher.bitwise_equal(copy));
  EXPECT_FALSE(params.bitwise_equal(copy));
}

TEST(TrainTask, SamixOffEqualsZeroWeightedSamixBitwise) {
  for (auto mode : {PlasticityMode::DR, PlasticityMode::FNC2}) {
    auto off = tiny_config();
    off.method.plasticity.mode = mode;
    off.method.mix.enabled = false;
    auto zero = off;
    zero.method.mix.enabled = true;
    zero.method.plasticity.upsilon = 0.0;
    zero.method.plasticity.iota = 0.0;
    const auto a = run_experiment(off), b = run_experiment(zero);
    EXPECT_TRUE(a.params.bitwise_equal(b.params));
    EXPECT_EQ(a.class_il, b.class_il);
  }
}

TEST(TrainTask, DrLossDecreasesOnSeparableBlobs) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    BlobConfig bc;
    bc.num_classes = 3;
    bc.input_dim = 8;
    bc.train_per_class = 60;
    bc.center_scale = 3.0;
    bc.spread = 0.2;
    Rng data(seed);
    const auto blobs = make_blobs(bc, data);
    const auto P = build_etf(3, 4, seed);
    ModelConfig mc;
    mc.input_dim = 8;
    mc.hidden_dim = 32;
    mc.feature_dim = 16;
    mc.proj_hidden_dim = 16;
    mc.out_dim = 4;
    mc.num_classes = 3;
    Rng init(seed + 10);
    ModelParams params = init_model(mc, init);
    MethodConfig m;
    m.train.epochs_first = 15;
    m.train.batch_size = 16;
    m.plasticity.upsilon = 5.0;
    const Dataset buffer;
    TaskContext ctx{0, &blobs.train, &buffer, &P, {}, {0, 1, 2}};
    TrainStreams rng{Rng(seed + 20), Rng(seed + 30)};
    const auto log = train_task(params, nullptr, ctx, m, rng);
    EXPECT_LT(log.back().normal_dr, log.front().normal_dr) << "seed " << seed;
  }
}

TEST(TrainTask, NonFiniteInputsAbort) {
  auto cfg = tiny_config();
  auto stream = build_task_stream(cfg);
  stream.train[0][3].x[0] = std::nan("");
  EXPECT_THROW(run_experiment(stream, cfg), NumericError);
}

// ---------------------------------------------------------------- run_experiment

TEST(Experiment, AccuracyMatrixIsLowerTriangular) {
  const auto rec = run_experiment(tiny_config());
  ASSERT_EQ(rec.class_il.size(), 3u);
  for (std::size_t t = 0; t < 3; ++t) {
    ASSERT_EQ(rec.class_il[t].size(), t + 1);
    ASSERT_EQ(rec.task_il[t].size(), t + 1);
    for (std::size_t k = 0; k <= t; ++k) {
      EXPECT_GE(rec.class_il[t][k], 0.0);
      EXPECT_LE(rec.class_il[t][k], 100.0);
      EXPECT_GE(rec.task_il[t][k], rec.class_il[t][k]);
    }
  }
  EXPECT_EQ(rec.calibration.size(), 3u);
  EXPECT_TRUE(rec.invariants.all());
}

TEST(Experiment, MemoryFreeNeverTouchesBuffer) {
  auto cfg = tiny_config();
  cfg.buffer_capacity = 0;
  cfg.aux_probe_samples = 10;
  RunHooks hooks;
  hooks.on_step = [](const StepTrace& s) {
    for (auto o : s.views->origins) ASSERT_EQ(o, Origin::Current);
  };
  hooks.on_task_end = [](std::size_t, const ReplayBuffer& b, const ModelParams&) { EXPECT_EQ(b.size(), 0u); };
  const auto rec = run_experiment(cfg, hooks);
  EXPECT_TRUE(rec.invariants.all());
}

TEST(Experiment, BufferHoldsOnlySeenClasses) {
  auto cfg = tiny_config();
  RunHooks hooks;
  hooks.on_task_end = [](std::size_t t, const ReplayBuffer& b, const ModelParams&) {
    EXPECT_EQ(b.size(), 20u);
    for (const auto& s : b.items()) EXPECT_LT(s.label, static_cast<int>(2 * (t + 1)));
  };
  run_experiment(cfg, hooks);
}

TEST(Experiment, SameSeedSameRecord) {
  const auto a = run_experiment(tiny_config()), b = run_experiment(tiny_config());
  EXPECT_TRUE(a.params.bitwise_equal(b.params));
  EXPECT_EQ(a.class_il, b.class_il);
  EXPECT_EQ(a.aece, b.aece);
  EXPECT_EQ(a.losses.size(), b.losses.size());
  auto c = tiny_config();
  c.seed = 4;
  EXPECT_FALSE(run_experiment(c).params.bitwise_equal(a.params));
}

TEST(Experiment, PrototypesAreFrozen) {
  const auto cfg = tiny_config();
  const auto rec = run_experiment(cfg);
  EXPECT_EQ(rec.prototypes, build_etf(6, 6, make_stream(cfg.seed, kStreamEtf)()));
  EXPECT_TRUE(rec.invariants.prototypes_unchanged);
}

TEST(Experiment, Fnc2ModeRuns) {
  auto cfg = tiny_config();
  cfg.method.plasticity.mode = PlasticityMode::FNC2;
  cfg.method.fnc2.gamma = 2.0;
  const auto rec = run_experiment(cfg);
  EXPECT_TRUE(std::isfinite(rec.aa_class_il));
  EXPECT_TRUE(rec.invariants.all());
}
