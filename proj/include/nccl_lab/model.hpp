// SPDX-License-Identifier: Apache-2.0
//
// Encoder f, projector g, predictor h and probe classifier s as small dense
// networks, with SGD and the per-task learning-rate schedule.
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <functional>
#include <numbers>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "nccl_lab/autodiff.hpp"
#include "nccl_lab/error.hpp"
#include "nccl_lab/random.hpp"

namespace nccl_lab {

enum class PredictorInit { Identity, Random };

struct ModelConfig {
  std::size_t input_dim = 16;
  std::size_t hidden_dim = 64;
  std::size_t feature_dim = 32;
  std::size_t proj_hidden_dim = 64;
  std::size_t out_dim = 16;
  std::size_t num_classes = 10;
  PredictorInit predictor_init = PredictorInit::Identity;
  // Apply h to the current-model side of the distillation losses.
  bool use_predictor = true;

  bool operator==(const ModelConfig&) const = default;
};

// y = x W + b with W stored [in x out].
struct Linear {
  ad::Tensor weight;
  ad::Tensor bias;

  ad::Tensor forward(ad::Tape& tape, const ad::Tensor& x) const {
    if (x.rank() != 2 || x.cols() != weight.rows())
      throw ShapeError("Linear: input " + ad::shape_str(x.shape()) + " vs weight " + ad::shape_str(weight.shape()));
    return tape.add_row(tape.matmul(x, weight), bias);
  }
};

struct ModelParams {
  Linear enc1, enc2;    // f: input -> hidden -> feature, ReLU after each
  Linear proj1, proj2;  // g: feature -> proj_hidden -> d, then l2-normalized
  Linear pred1, pred2;  // h: d -> proj_hidden -> d, then l2-normalized
  Linear cls;           // s: feature -> K

  template <class F>
  void for_each_param(F&& f) {
    visit(*this, f);
  }
  template <class F>
  void for_each_param(F&& f) const {
    visit(*this, f);
  }

  // Parameters trained by the representation loss (everything but s).
  template <class F>
  void for_each_representation_param(F&& f) {
    visit_representation(*this, f);
  }
  template <class F>
  void for_each_representation_param(F&& f) const {
    visit_representation(*this, f);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each_param([&](const std::string&, const ad::Tensor& t) { n += t.numel(); });
    return n;
  }

  bool bitwise_equal(const ModelParams& other) const {
    std::vector<const ad::Tensor*> mine, theirs;
    for_each_param([&](const std::string&, const ad::Tensor& t) { mine.push_back(&t); });
    other.for_each_param([&](const std::string&, const ad::Tensor& t) { theirs.push_back(&t); });
    for (std::size_t i = 0; i < mine.size(); ++i)
      if (!mine[i]->bitwise_equal(*theirs[i])) return false;
    return true;
  }

 private:
  template <class Self, class F>
  static void visit(Self& self, F& f) {
    const std::pair<const char*, decltype(&self.enc1)> layers[] = {
        {"encoder.0", &self.enc1},   {"encoder.1", &self.enc2},   {"projector.0", &self.proj1},
        {"projector.1", &self.proj2}, {"predictor.0", &self.pred1}, {"predictor.1", &self.pred2},
        {"classifier", &self.cls},
    };
    for (const auto& [name, layer] : layers) {
      f(std::string(name) + ".weight", layer->weight);
      f(std::string(name) + ".bias", layer->bias);
    }
  }

  template <class Self, class F>
  static void visit_representation(Self& self, F& f) {
    auto filter = [&](const std::string& name, auto& t) {
      if (name.rfind("classifier.", 0) != 0) f(name, t);
    };
    visit(self, filter);
  }
};

namespace detail {

inline Linear init_linear(std::size_t in, std::size_t out, Rng& rng) {
  std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(in)));
  std::vector<double> w(in * out);
  for (auto& v : w) v = normal(rng);
  return {ad::Tensor::matrix(in, out, std::move(w)), ad::Tensor::vector(std::vector<double>(out, 0.0))};
}

}  // namespace detail

// He-normal weights, zero biases. The identity predictor uses
// W1 = [I, -I], W2 = [I; -I] so that relu(z) - relu(-z) = z.
inline ModelParams init_model(const ModelConfig& cfg, Rng& rng) {
  if (cfg.input_dim == 0 || cfg.hidden_dim == 0 || cfg.feature_dim == 0 || cfg.proj_hidden_dim == 0 ||
      cfg.out_dim == 0 || cfg.num_classes == 0)
    throw Error("init_model: every layer width must be positive");
  ModelParams p;
  p.enc1 = detail::init_linear(cfg.input_dim, cfg.hidden_dim, rng);
  p.enc2 = detail::init_linear(cfg.hidden_dim, cfg.feature_dim, rng);
  p.proj1 = detail::init_linear(cfg.feature_dim, cfg.proj_hidden_dim, rng);
  p.proj2 = detail::init_linear(cfg.proj_hidden_dim, cfg.out_dim, rng);
  p.pred1 = detail::init_linear(cfg.out_dim, cfg.proj_hidden_dim, rng);
  p.pred2 = detail::init_linear(cfg.proj_hidden_dim, cfg.out_dim, rng);
  p.cls = detail::init_linear(cfg.feature_dim, cfg.num_classes, rng);
  if (cfg.predictor_init == PredictorInit::Identity) {
    const std::size_t d = cfg.out_dim, h = cfg.proj_hidden_dim;
    if (h < 2 * d)
      throw Error("init_model: identity predictor needs proj_hidden_dim >= 2 * out_dim, got " + std::to_string(h));
    std::vector<double> w1(d * h, 0.0), w2(h * d, 0.0);
    for (std::size_t i = 0; i < d; ++i) {
      w1[i * h + i] = 1.0;
      w1[i * h + d + i] = -1.0;
      w2[i * d + i] = 1.0;
      w2[(d + i) * d + i] = -1.0;
    }
    p.pred1 = {ad::Tensor::matrix(d, h, std::move(w1)), ad::Tensor::vector(std::vector<double>(h, 0.0))};
    p.pred2 = {ad::Tensor::matrix(h, d, std::move(w2)), ad::Tensor::vector(std::vector<double>(d, 0.0))};
  }
  return p;
}

// Registers every parameter of `p` as a leaf of `tape`.
inline ModelParams bind(ad::Tape& tape, const ModelParams& p) {
  ModelParams out = p;
  out.for_each_param([&](const std::string&, ad::Tensor& t) { t = tape.leaf(t); });
  return out;
}

// Deep copy with no tape attachment. Used as the frozen teacher.
inline ModelParams snapshot(const ModelParams& p) {
  ModelParams out = p;
  out.for_each_param([](const std::string&, ad::Tensor& t) { t = t.detached(); });
  return out;
}

// f(x)
inline ad::Tensor forward_encoder(ad::Tape& tape, const ModelParams& p, const ad::Tensor& x) {
  return tape.relu(p.enc2.forward(tape, tape.relu(p.enc1.forward(tape, x))));
}

// g(f(x)) on the unit sphere.
inline ad::Tensor forward_features(ad::Tape& tape, const ModelParams& p, const ad::Tensor& x) {
  const ad::Tensor f = forward_encoder(tape, p, x);
  return tape.l2_normalize(p.proj2.forward(tape, tape.relu(p.proj1.forward(tape, f))));
}

// h(z) on the unit sphere.
inline ad::Tensor forward_predictor(ad::Tape& tape, const ModelParams& p, const ad::Tensor& z) {
  return tape.l2_normalize(p.pred2.forward(tape, tape.relu(p.pred1.forward(tape, z))));
}

inline ad::Tensor forward_classifier(ad::Tape& tape, const ModelParams& p, const ad::Tensor& features) {
  return p.cls.forward(tape, features);
}

struct SgdConfig {
  double momentum = 0.9;
  double weight_decay = 1e-4;
};

// Momentum buffers keyed by parameter traversal order.
struct OptimizerState {
  SgdConfig cfg;
  std::vector<std::vector<double>> velocity;
};

// v <- mu v + (g + wd w);  w <- w - lr v
inline void sgd_update(const std::string& name, ad::Tensor& w, const ad::Tensor& g, std::vector<double>& v,
                       const SgdConfig& cfg, double lr) {
  if (g.numel() != w.numel()) throw ShapeError("sgd_step: gradient shape differs for " + name);
  if (v.empty()) v.assign(w.numel(), 0.0);
  const auto gv = g.values();
  for (double x : gv)
    if (!std::isfinite(x)) throw NumericError("sgd_step: non-finite gradient for " + name);
  auto wv = w.mutable_values();
  for (std::size_t i = 0; i < wv.size(); ++i) {
    v[i] = cfg.momentum * v[i] + (gv[i] + cfg.weight_decay * wv[i]);
    wv[i] -= lr * v[i];
  }
}

// Steps every representation parameter of `params` using gradients taken
// with respect to the matching leaves in `bound`.
inline void sgd_step(ModelParams& params, const ModelParams& bound, const ad::Gradients& grads, OptimizerState& opt,
                     double lr) {
  std::vector<ad::Tensor> g;
  bound.for_each_representation_param([&](const std::string&, const ad::Tensor& t) { g.push_back(grads.of(t)); });
  if (opt.velocity.size() < g.size()) opt.velocity.resize(g.size());
  std::size_t i = 0;
  params.for_each_representation_param([&](const std::string& name, ad::Tensor& w) {
    sgd_update(name, w, g[i], opt.velocity[i], opt.cfg, lr);
    ++i;
  });
}

struct LrSchedule {
  double base_lr = 0.1;
  int warmup_epochs = 5;
};

// Linear ramp base*(e+1)/W for e < W, then cosine from base to 0 over the rest.
inline double lr_at(const LrSchedule& s, int epoch, int epoch_count) {
  if (epoch < 0 || epoch >= epoch_count)
    throw Error("lr_at: epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(epoch_count) + ")");
  const int w = std::min(s.warmup_epochs, epoch_count - 1);
  if (epoch < w) return s.base_lr * static_cast<double>(epoch + 1) / static_cast<double>(w);
  const double progress = static_cast<double>(epoch - w) / static_cast<double>(epoch_count - w);
  return s.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// Writes <base>.bin (raw f64, traversal order) and <base>.json (names and shapes).
inline void save_checkpoint(const ModelParams& p, const std::string& base) {
  std::ofstream bin(base + ".bin", std::ios::binary);
  if (!bin) throw Error("cannot write " + base + ".bin");
  nlohmann::ordered_json meta = nlohmann::ordered_json::array();
  p.for_each_param([&](const std::string& name, const ad::Tensor& t) {
    bin.write(reinterpret_cast<const char*>(t.values().data()),
              static_cast<std::streamsize>(t.numel() * sizeof(double)));
    meta.push_back({{"name", name}, {"shape", t.shape()}});
  });
  std::ofstream js(base + ".json");
  if (!js) throw Error("cannot write " + base + ".json");
  js << meta.dump(2) << '\n';
}

inline ModelParams load_checkpoint(const std::string& base) {
  std::ifstream js(base + ".json");
  if (!js) throw Error("cannot read " + base + ".json");
  const auto meta = nlohmann::json::parse(js);
  std::ifstream bin(base + ".bin", std::ios::binary);
  if (!bin) throw Error("cannot read " + base + ".bin");
  ModelParams p;
  std::size_t i = 0;
  p.for_each_param([&](const std::string& name, ad::Tensor& t) {
    if (i >= meta.size() || meta[i]["name"] != name) throw Error(base + ".json: expected parameter " + name);
    const ad::Shape shape = meta[i]["shape"].get<ad::Shape>();
    std::vector<double> values(ad::shape_numel(shape));
    bin.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)));
    if (!bin) throw Error(base + ".bin: truncated at " + name);
    t = ad::Tensor(shape, std::move(values));
    ++i;
  });
  return p;
}

}  // namespace nccl_lab
