// SPDX-License-Identifier: Apache-2.0
//
// Experiment configuration files.
//
//   # comment
//   [section]
//   key = value
//
// Every key belongs to exactly one section and may appear once. Unknown
// sections or keys are rejected. dataset.kind and method.plasticity are
// required; everything else falls back to the desk-scale defaults.
#pragma once

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include "nccl_lab/error.hpp"
#include "nccl_lab/experiment.hpp"

namespace nccl_lab {

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size())
    throw ConfigError(key + ": cannot parse '" + text + "' as a number");
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true") return true;
  if (text == "false") return false;
  throw ConfigError(key + ": expected true or false, got '" + text + "'");
}

struct Field {
  std::string name;  // section.key
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

template <class Get>
Field make_double(std::string name, Get ref) {
  return {name, [name, ref](ExperimentConfig& c, const std::string& v) { ref(c) = parse_number<double>(name, v); },
          [ref](const ExperimentConfig& c) { return format_double(ref(c)); }};
}

template <class T, class Get>
Field make_int(std::string name, Get ref) {
  return {name, [name, ref](ExperimentConfig& c, const std::string& v) { ref(c) = parse_number<T>(name, v); },
          [ref](const ExperimentConfig& c) { return std::to_string(ref(c)); }};
}

template <class Get>
Field make_bool(std::string name, Get ref) {
  return {name, [name, ref](ExperimentConfig& c, const std::string& v) { ref(c) = parse_bool(name, v); },
          [ref](const ExperimentConfig& c) { return std::string(ref(c) ? "true" : "false"); }};
}

template <class E, class Get>
Field make_enum(std::string name, std::vector<std::pair<std::string, E>> choices, Get ref) {
  return {name,
          [name, ref, choices](ExperimentConfig& c, const std::string& v) {
            for (const auto& [text, e] : choices)
              if (text == v) {
                ref(c) = e;
                return;
              }
            std::string allowed;
            for (const auto& ch : choices) allowed += (allowed.empty() ? "" : ", ") + ch.first;
            throw ConfigError(name + ": expected one of " + allowed + ", got '" + v + "'");
          },
          [ref, choices](const ExperimentConfig& c) {
            for (const auto& [text, e] : choices)
              if (e == ref(c)) return text;
            return std::string("?");
          }};
}

#define NCCL_REF(expr) [](auto& c) -> auto& { return c.expr; }

inline const std::vector<Field>& config_fields() {
  static const std::vector<Field> fields = [] {
    std::vector<Field> f;
    f.push_back({"dataset.kind", [](ExperimentConfig& c, const std::string& v) { c.dataset_kind = v; },
                 [](const ExperimentConfig& c) { return c.dataset_kind; }});
    f.push_back(make_int<std::size_t>("dataset.classes", NCCL_REF(blobs.num_classes)));
    f.push_back(make_int<std::size_t>("dataset.input_dim", NCCL_REF(blobs.input_dim)));
    f.push_back(make_int<std::size_t>("dataset.train_per_class", NCCL_REF(blobs.train_per_class)));
    f.push_back(make_int<std::size_t>("dataset.test_per_class", NCCL_REF(blobs.test_per_class)));
    f.push_back(make_double("dataset.center_scale", NCCL_REF(blobs.center_scale)));
    f.push_back(make_double("dataset.spread", NCCL_REF(blobs.spread)));

    f.push_back(make_int<std::size_t>("stream.tasks", NCCL_REF(tasks)));
    f.push_back(make_int<std::size_t>("stream.classes_per_task", NCCL_REF(classes_per_task)));
    f.push_back(make_enum<Scenario>("stream.scenario", {{"class-il", Scenario::ClassIL}, {"task-il", Scenario::TaskIL}},
                                    NCCL_REF(scenario)));

    f.push_back(make_int<std::size_t>("buffer.capacity", NCCL_REF(buffer_capacity)));
    f.push_back(make_int<std::size_t>("buffer.aux_probe_samples", NCCL_REF(aux_probe_samples)));

    f.push_back(make_enum<PlasticityMode>("method.plasticity",
                                          {{"dr", PlasticityMode::DR}, {"fnc2", PlasticityMode::FNC2}},
                                          NCCL_REF(method.plasticity.mode)));
    f.push_back(make_double("method.upsilon", NCCL_REF(method.plasticity.upsilon)));
    f.push_back(make_double("method.iota", NCCL_REF(method.plasticity.iota)));

    f.push_back(make_bool("mix.enabled", NCCL_REF(method.mix.enabled)));
    f.push_back(make_double("mix.alpha", NCCL_REF(method.mix.alpha)));
    f.push_back(make_enum<InterpMode>("mix.interp", {{"slerp", InterpMode::Slerp}, {"linear", InterpMode::Linear}},
                                      NCCL_REF(method.mix.interp)));
    f.push_back(make_bool("mix.current_only", NCCL_REF(method.mix.current_only)));

    f.push_back(make_double("loss.tau", NCCL_REF(method.fnc2.tau)));
    f.push_back(make_double("loss.gamma", NCCL_REF(method.fnc2.gamma)));
    f.push_back(make_double("loss.kappa_past", NCCL_REF(method.distill.kappa_past)));
    f.push_back(make_double("loss.kappa_current", NCCL_REF(method.distill.kappa_current)));
    f.push_back(make_double("loss.zeta_past", NCCL_REF(method.distill.zeta_past)));
    f.push_back(make_double("loss.zeta_current", NCCL_REF(method.distill.zeta_current)));
    f.push_back(make_int<int>("loss.e0", NCCL_REF(method.distill.e0)));

    f.push_back(make_int<std::size_t>("model.hidden_dim", NCCL_REF(model.hidden_dim)));
    f.push_back(make_int<std::size_t>("model.feature_dim", NCCL_REF(model.feature_dim)));
    f.push_back(make_int<std::size_t>("model.proj_hidden_dim", NCCL_REF(model.proj_hidden_dim)));
    f.push_back(make_int<std::size_t>("model.d", NCCL_REF(model.out_dim)));
    f.push_back(make_enum<PredictorInit>("model.predictor_init",
                                         {{"identity", PredictorInit::Identity}, {"random", PredictorInit::Random}},
                                         NCCL_REF(model.predictor_init)));
    f.push_back(make_bool("model.use_predictor", NCCL_REF(model.use_predictor)));

    f.push_back(make_int<int>("train.epochs_first", NCCL_REF(method.train.epochs_first)));
    f.push_back(make_int<int>("train.epochs_rest", NCCL_REF(method.train.epochs_rest)));
    f.push_back(make_int<std::size_t>("train.batch_size", NCCL_REF(method.train.batch_size)));
    f.push_back(make_double("train.lr", NCCL_REF(method.train.schedule.base_lr)));
    f.push_back(make_int<int>("train.warmup_epochs", NCCL_REF(method.train.schedule.warmup_epochs)));
    f.push_back(make_double("train.momentum", NCCL_REF(method.train.sgd.momentum)));
    f.push_back(make_double("train.weight_decay", NCCL_REF(method.train.sgd.weight_decay)));
    f.push_back(make_int<std::uint64_t>("train.seed", NCCL_REF(seed)));

    f.push_back(make_double("augment.noise_sigma", NCCL_REF(method.augment.noise_sigma)));
    f.push_back(make_double("augment.mask_rate", NCCL_REF(method.augment.mask_rate)));

    f.push_back(make_int<int>("probe.epochs", NCCL_REF(probe.epochs)));
    f.push_back(make_double("probe.lr", NCCL_REF(probe.lr)));
    f.push_back(make_int<std::size_t>("probe.batch_size", NCCL_REF(probe.batch_size)));
    f.push_back(make_bool("probe.balanced", NCCL_REF(probe.balanced)));

    f.push_back(make_int<std::size_t>("calib.bins", NCCL_REF(calib_bins)));
    return f;
  }();
  return fields;
}

#undef NCCL_REF

inline const Field* find_field(const std::string& name) {
  for (const auto& f : config_fields())
    if (f.name == name) return &f;
  return nullptr;
}

}  // namespace detail

// Cross-field checks; each failure names the offending key.
inline void validate_config(const ExperimentConfig& c) {
  auto fail = [](const std::string& key, const std::string& why) { throw ConfigError(key + ": " + why); };
  if (c.dataset_kind != "blobs") fail("dataset.kind", "unknown kind '" + c.dataset_kind + "' (supported: blobs)");
  if (c.tasks < 1) fail("stream.tasks", "must be >= 1");
  if (c.classes_per_task < 1) fail("stream.classes_per_task", "must be >= 1");
  const std::size_t K = c.tasks * c.classes_per_task;
  if (c.blobs.num_classes != K)
    fail("dataset.classes", "must equal stream.tasks x stream.classes_per_task = " + std::to_string(K));
  if (K < 2) fail("dataset.classes", "need at least 2 classes for an ETF");
  if (c.blobs.input_dim < 1) fail("dataset.input_dim", "must be >= 1");
  if (c.blobs.train_per_class < 1) fail("dataset.train_per_class", "must be >= 1");
  if (c.blobs.test_per_class < 1) fail("dataset.test_per_class", "must be >= 1");
  if (!(c.blobs.spread >= 0.0)) fail("dataset.spread", "must be >= 0");
  if (!(c.blobs.center_scale > 0.0)) fail("dataset.center_scale", "must be > 0");
  if (c.model.out_dim < K) fail("model.d", "must be >= the class count " + std::to_string(K));
  if (c.model.hidden_dim < 1) fail("model.hidden_dim", "must be >= 1");
  if (c.model.feature_dim < 1) fail("model.feature_dim", "must be >= 1");
  if (c.model.proj_hidden_dim < 1) fail("model.proj_hidden_dim", "must be >= 1");
  if (c.model.predictor_init == PredictorInit::Identity && c.model.proj_hidden_dim < 2 * c.model.out_dim)
    fail("model.predictor_init", "identity needs model.proj_hidden_dim >= 2 x model.d");
  const auto& m = c.method;
  if (!(m.plasticity.upsilon >= 0.0)) fail("method.upsilon", "must be >= 0");
  if (!(m.plasticity.iota >= 0.0)) fail("method.iota", "must be >= 0");
  if (!(m.mix.alpha > 0.0)) fail("mix.alpha", "must be > 0");
  if (m.mix.enabled && m.mix.interp == InterpMode::Slerp && K == 2)
    fail("mix.interp", "slerp between the two antipodal prototypes of a 2-class ETF is undefined");
  if (!(m.fnc2.tau > 0.0)) fail("loss.tau", "must be > 0");
  if (!(m.fnc2.gamma >= 0.0)) fail("loss.gamma", "must be >= 0");
  if (!(m.distill.kappa_past > 0.0)) fail("loss.kappa_past", "must be > 0");
  if (!(m.distill.kappa_current > 0.0)) fail("loss.kappa_current", "must be > 0");
  if (!(m.distill.zeta_past > 0.0)) fail("loss.zeta_past", "must be > 0");
  if (!(m.distill.zeta_current > 0.0)) fail("loss.zeta_current", "must be > 0");
  if (m.distill.e0 < 0) fail("loss.e0", "must be >= 0");
  if (c.tasks > 1 && m.distill.e0 > m.train.epochs_rest) fail("loss.e0", "must not exceed train.epochs_rest");
  if (m.train.epochs_first < 1) fail("train.epochs_first", "must be >= 1");
  if (m.train.epochs_rest < 1) fail("train.epochs_rest", "must be >= 1");
  if (m.train.batch_size < 2) fail("train.batch_size", "must be >= 2");
  if (!(m.train.schedule.base_lr > 0.0)) fail("train.lr", "must be > 0");
  if (m.train.schedule.warmup_epochs < 0) fail("train.warmup_epochs", "must be >= 0");
  if (!(m.train.sgd.momentum >= 0.0 && m.train.sgd.momentum < 1.0)) fail("train.momentum", "must be in [0, 1)");
  if (!(m.train.sgd.weight_decay >= 0.0)) fail("train.weight_decay", "must be >= 0");
  if (!(m.augment.noise_sigma >= 0.0)) fail("augment.noise_sigma", "must be >= 0");
  if (!(m.augment.mask_rate >= 0.0 && m.augment.mask_rate <= 1.0)) fail("augment.mask_rate", "must be in [0, 1]");
  if (c.probe.epochs < 1) fail("probe.epochs", "must be >= 1");
  if (!(c.probe.lr > 0.0)) fail("probe.lr", "must be > 0");
  if (c.probe.batch_size < 1) fail("probe.batch_size", "must be >= 1");
  if (c.calib_bins < 1) fail("calib.bins", "must be >= 1");
}

inline ExperimentConfig parse_config_text(const std::string& text, const std::string& origin = "<config>") {
  ExperimentConfig cfg;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  auto where = [&] { return origin + ":" + std::to_string(lineno) + ": "; };
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    const std::string body = detail::trim(hash == std::string::npos ? line : line.substr(0, hash));
    if (body.empty()) continue;
    if (body.front() == '[') {
      if (body.back() != ']') throw ConfigError(where() + "unterminated section header");
      section = detail::trim(body.substr(1, body.size() - 2));
      bool known = false;
      for (const auto& f : detail::config_fields()) known |= f.name.rfind(section + ".", 0) == 0;
      if (!known) throw ConfigError(where() + "unknown section [" + section + "]");
      continue;
    }
    const auto eq = body.find('=');
    if (eq == std::string::npos) throw ConfigError(where() + "expected key = value");
    const std::string key = detail::trim(body.substr(0, eq));
    const std::string value = detail::trim(body.substr(eq + 1));
    if (section.empty()) throw ConfigError(where() + "key '" + key + "' appears before any section");
    const std::string name = section + "." + key;
    const detail::Field* field = detail::find_field(name);
    if (!field) throw ConfigError(where() + "unknown key '" + name + "'");
    if (!seen.insert(name).second) throw ConfigError(where() + "duplicate key '" + name + "'");
    try {
      field->set(cfg, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where() + e.what());
    }
  }
  for (const char* required : {"dataset.kind", "method.plasticity"})
    if (!seen.count(required)) throw ConfigError(origin + ": missing required key '" + required + "'");
  validate_config(cfg);
  return cfg;
}

inline ExperimentConfig parse_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config_text(ss.str(), path);
}

// Every key in a fixed order; doubles at 17 significant digits.
inline std::string serialize_config(const ExperimentConfig& cfg, bool include_seed = true) {
  std::string out, section;
  for (const auto& f : detail::config_fields()) {
    if (!include_seed && f.name == "train.seed") continue;
    const auto dot = f.name.find('.');
    const std::string s = f.name.substr(0, dot);
    if (s != section) {
      out += (out.empty() ? "[" : "\n[") + s + "]\n";
      section = s;
    }
    out += f.name.substr(dot + 1) + " = " + f.get(cfg) + "\n";
  }
  return out;
}

inline void set_config_value(ExperimentConfig& cfg, const std::string& name, const std::string& value) {
  const detail::Field* field = detail::find_field(name);
  if (!field) throw ConfigError("unknown key '" + name + "'");
  field->set(cfg, value);
}

// FNV-1a 64 over the canonical text without the seed.
inline std::uint64_t config_hash(const ExperimentConfig& cfg) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : serialize_config(cfg, false)) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string config_hash_hex(const ExperimentConfig& cfg) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(config_hash(cfg)));
  return buf;
}

}  // namespace nccl_lab
