// SPDX-License-Identifier: Apache-2.0
//
// Sphere-adaptive mixup: inputs are mixed linearly, their fixed prototypes are
// mixed along the great circle so every mixed target stays on the sphere.
#pragma once

#include <algorithm>
#include <numeric>
#include <random>
#include <vector>

#include "nccl_lab/data.hpp"
#include "nccl_lab/error.hpp"
#include "nccl_lab/geometry.hpp"
#include "nccl_lab/random.hpp"

namespace nccl_lab {

struct MixConfig {
  double alpha = 25.0;
  bool enabled = true;
  InterpMode interp = InterpMode::Slerp;
  // Mix only views that came from the current task's data.
  bool current_only = false;

  bool operator==(const MixConfig&) const = default;
};

struct MixedBatch {
  ad::Tensor inputs;      // [n x input_dim]
  ad::Tensor prototypes;  // [n x d]
  double lambda = 1.0;
  std::vector<std::size_t> source;   // index into the view batch
  std::vector<std::size_t> partner;  // index into the view batch

  std::size_t size() const { return source.size(); }
};

// Beta(alpha, alpha) via the Gamma ratio g1 / (g1 + g2).
inline double sample_lambda(double alpha, Rng& rng) {
  if (!(alpha > 0.0)) throw Error("sample_lambda: alpha must be positive");
  std::gamma_distribution<double> gamma(alpha, 1.0);
  const double g1 = gamma(rng);
  const double g2 = gamma(rng);
  return g1 / (g1 + g2);
}

inline std::vector<double> mix_prototype(const PrototypeSet& P, int y_a, int y_b, double lambda, InterpMode mode) {
  auto pa = P[static_cast<std::size_t>(y_a)];
  auto pb = P[static_cast<std::size_t>(y_b)];
  if (y_a == y_b) return {pa.begin(), pa.end()};
  return mode == InterpMode::Slerp ? slerp(pa, pb, lambda) : lerp(pa, pb, lambda);
}

// One lambda for the whole batch; partners come from a seeded shuffle.
inline MixedBatch mix_batch(const Batch& views, const PrototypeSet& P, const MixConfig& cfg, double lambda, Rng& rng) {
  if (!cfg.enabled) throw Error("mix_batch: mixing is disabled");
  for (int y : views.labels)
    if (y < 0 || static_cast<std::size_t>(y) >= P.num_classes())
      throw Error("mix_batch: label " + std::to_string(y) + " has no prototype");

  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < views.size(); ++i)
    if (!cfg.current_only || views.origins[i] == Origin::Current) pool.push_back(i);
  std::vector<std::size_t> partner = pool;
  std::shuffle(partner.begin(), partner.end(), rng);

  const std::size_t in_dim = views.inputs.cols();
  const std::size_t d = P.dim();
  std::vector<double> xs(pool.size() * in_dim);
  std::vector<double> ps(pool.size() * d);
  for (std::size_t r = 0; r < pool.size(); ++r) {
    const auto xi = views.inputs.row(pool[r]);
    const auto xj = views.inputs.row(partner[r]);
    for (std::size_t c = 0; c < in_dim; ++c) xs[r * in_dim + c] = lambda * xi[c] + (1.0 - lambda) * xj[c];
    const auto p = mix_prototype(P, views.labels[pool[r]], views.labels[partner[r]], lambda, cfg.interp);
    std::copy(p.begin(), p.end(), ps.begin() + static_cast<std::ptrdiff_t>(r * d));
  }

  MixedBatch out;
  out.inputs = ad::Tensor::matrix(pool.size(), in_dim, std::move(xs));
  out.prototypes = ad::Tensor::matrix(pool.size(), d, std::move(ps));
  out.lambda = lambda;
  out.source = std::move(pool);
  out.partner = std::move(partner);
  return out;
}

inline MixedBatch mix_batch(const Batch& views, const PrototypeSet& P, const MixConfig& cfg, Rng& rng) {
  const double lambda = sample_lambda(cfg.alpha, rng);
  return mix_batch(views, P, cfg, lambda, rng);
}

}  // namespace nccl_lab
