// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <string>

#include "nccl_lab/config.hpp"

using namespace nccl_lab;

namespace {

const std::string kMinimal = R"(# smallest valid config
[dataset]
kind = blobs
[method]
plasticity = dr
)";

void expect_config_error(const std::string& text, const std::string& fragment) {
  try {
    parse_config_text(text, "test.ini");
    FAIL() << "expected ConfigError containing '" << fragment << "'";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find(fragment), std::string::npos) << e.what();
  }
}

}  // namespace

TEST(Config, DefaultsMatchTheSelectedHyperparameters) {
  const auto c = parse_config_text(kMinimal);
  EXPECT_EQ(c.method.mix.alpha, 25.0);
  EXPECT_EQ(c.calib_bins, 15u);
  EXPECT_EQ(c.method.plasticity.upsilon, 5.0);
  EXPECT_EQ(c.method.plasticity.iota, 5.0);
  EXPECT_EQ(c.method.train.sgd.momentum, 0.9);
  EXPECT_EQ(c.method.train.sgd.weight_decay, 1e-4);
  EXPECT_EQ(c.tasks, 5u);
  EXPECT_EQ(c.blobs.input_dim, 16u);
  EXPECT_EQ(c.blobs.train_per_class, 200u);
}

TEST(Config, ReadsEveryKindOfValue) {
  const auto c = parse_config_text(kMinimal + R"(
[mix]
alpha = 2.5   # trailing comment
interp = linear
enabled = false
[stream]
scenario = task-il
[train]
seed = 12345678901
)");
  EXPECT_EQ(c.method.mix.alpha, 2.5);
  EXPECT_EQ(c.method.mix.interp, InterpMode::Linear);
  EXPECT_FALSE(c.method.mix.enabled);
  EXPECT_EQ(c.scenario, Scenario::TaskIL);
  EXPECT_EQ(c.seed, 12345678901ULL);
}

TEST(Config, RejectsNonPositiveTau) { expect_config_error(kMinimal + "[loss]\ntau = 0\n", "loss.tau"); }

TEST(Config, ErrorsNameLineAndKey) {
  expect_config_error(kMinimal + "[mix]\nbogus = 1\n", "test.ini:7: unknown key 'mix.bogus'");
  expect_config_error(kMinimal + "[nosuch]\n", "unknown section [nosuch]");
  expect_config_error(kMinimal + "[mix]\nalpha = 1\nalpha = 2\n", "duplicate key 'mix.alpha'");
  expect_config_error(kMinimal + "[mix]\nalpha = fast\n", "mix.alpha");
  expect_config_error(kMinimal + "[mix]\nenabled = maybe\n", "mix.enabled");
  expect_config_error(kMinimal + "[mix]\ninterp = cubic\n", "mix.interp");
  expect_config_error("alpha = 1\n", "before any section");
  expect_config_error("[dataset]\nkind = blobs\n", "missing required key 'method.plasticity'");
  expect_config_error("[method]\nplasticity = dr\n", "missing required key 'dataset.kind'");
  expect_config_error(kMinimal + "[mix\n", "unterminated section");
  expect_config_error(kMinimal + "[mix]\nalpha\n", "expected key = value");
}

TEST(Config, CrossFieldChecks) {
  expect_config_error(kMinimal + "[loss]\ngamma = -1\n", "loss.gamma");
  expect_config_error(kMinimal + "[mix]\nalpha = 0\n", "mix.alpha");
  expect_config_error(kMinimal + "[model]\nd = 8\n", "model.d");
  expect_config_error(kMinimal + "[stream]\ntasks = 3\n", "dataset.classes");
  expect_config_error(kMinimal + "[loss]\ne0 = 31\n", "loss.e0");
  expect_config_error(kMinimal + "[train]\nbatch_size = 1\n", "train.batch_size");
  expect_config_error(kMinimal + "[model]\nproj_hidden_dim = 16\n", "model.predictor_init");
  expect_config_error(kMinimal + "[stream]\ntasks = 1\n[dataset]\nclasses = 2\n", "mix.interp");
  expect_config_error(kMinimal + "[train]\nmomentum = 1\n", "train.momentum");
  expect_config_error(kMinimal + "[augment]\nmask_rate = 2\n", "augment.mask_rate");
  // Two classes are fine once the antipodal slerp is out of the picture.
  EXPECT_NO_THROW(parse_config_text(kMinimal + "[stream]\ntasks = 1\n[dataset]\nclasses = 2\n[mix]\ninterp = linear\n"));
}

TEST(Config, SerializationRoundTrips) {
  auto c = parse_config_text(kMinimal + "[loss]\ntau = 0.123456789012345678\n[train]\nseed = 9\n");
  c.method.distill.zeta_past = 1.0 / 3.0;
  const std::string text = serialize_config(c);
  const auto back = parse_config_text(text);
  EXPECT_EQ(serialize_config(back), text);
  EXPECT_EQ(back.method.fnc2.tau, c.method.fnc2.tau);
  EXPECT_EQ(back.method.distill.zeta_past, c.method.distill.zeta_past);
  EXPECT_EQ(back.seed, 9u);
}

TEST(Config, HashIgnoresSeedButNotOtherFields) {
  auto a = parse_config_text(kMinimal);
  auto b = a;
  b.seed = 77;
  EXPECT_EQ(config_hash(a), config_hash(b));
  b.method.mix.alpha = 24.0;
  EXPECT_NE(config_hash(a), config_hash(b));
  EXPECT_EQ(config_hash_hex(a).size(), 16u);
  // Canonical text pins the hash across platforms.
  EXPECT_EQ(config_hash_hex(a), "cc513b721eadd716");
}

TEST(Config, SetValueUsesTheSameGrammar) {
  auto c = parse_config_text(kMinimal);
  set_config_value(c, "mix.interp", "linear");
  set_config_value(c, "buffer.capacity", "0");
  EXPECT_EQ(c.method.mix.interp, InterpMode::Linear);
  EXPECT_EQ(c.buffer_capacity, 0u);
  EXPECT_THROW(set_config_value(c, "mix.nothing", "1"), ConfigError);
  EXPECT_THROW(set_config_value(c, "buffer.capacity", "-3"), ConfigError);
}

TEST(Config, MissingFileFails) { EXPECT_THROW(parse_config("/nonexistent/x.ini"), ConfigError); }
