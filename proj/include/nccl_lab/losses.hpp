// SPDX-License-Identifier: Apache-2.0
//
// Training objectives over unit features. Every loss is built from tape ops so
// that gradients come from the same graph that produced the value.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "nccl_lab/autodiff.hpp"
#include "nccl_lab/error.hpp"

namespace nccl_lab {

using ad::Tape;
using ad::Tensor;

enum class PlasticityMode { DR, FNC2 };

struct Fnc2Config {
  double tau = 0.5;
  double gamma = 0.0;

  bool operator==(const Fnc2Config&) const = default;
};

struct DistillConfig {
  double kappa_past = 0.01;
  double kappa_current = 0.2;
  double zeta_past = 0.1;
  double zeta_current = 0.2;
  int e0 = 10;
  int epochs_total = 30;

  bool operator==(const DistillConfig&) const = default;
};

struct PlasticityConfig {
  PlasticityMode mode = PlasticityMode::DR;
  double upsilon = 5.0;
  double iota = 5.0;

  bool operator==(const PlasticityConfig&) const = default;
};

// Incidents where an FNC2 ratio reached 1 and its log argument was clamped.
struct LossStats {
  std::size_t clamped = 0;
};

// log(1 - 1e-12): upper bound applied to log c_ij and log r_i.
inline const double kFnc2LogCap = std::log1p(-1e-12);

namespace detail {

inline void require_unit_rows(const Tensor& z, const char* who) {
  for (std::size_t i = 0; i < z.rows(); ++i) {
    double ss = 0.0;
    for (double v : z.row(i)) ss += v * v;
    if (std::abs(std::sqrt(ss) - 1.0) > 1e-6)
      throw Error(std::string(who) + ": feature row " + std::to_string(i) + " is not unit-norm");
  }
}

inline Tensor offdiag_mask(std::size_t n) {
  Tensor m = Tensor::filled({n, n}, 1.0);
  auto v = m.mutable_values();
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 0.0;
  return m;
}

// Row softmax of (A B^T)/temperature over entries where mask != 0, in plain arithmetic.
inline Tensor softmax_similarity(const Tensor& a, const Tensor& b, double temperature, bool exclude_diagonal) {
  const std::size_t n = a.rows(), m = b.rows(), d = a.cols();
  std::vector<double> out(n * m, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < m; ++j) {
      if (exclude_diagonal && i == j) continue;
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) s += a.at(i, k) * b.at(j, k);
      out[i * m + j] = s / temperature;
      mx = std::max(mx, out[i * m + j]);
    }
    double total = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      if (exclude_diagonal && i == j) continue;
      out[i * m + j] = std::exp(out[i * m + j] - mx);
      total += out[i * m + j];
    }
    for (std::size_t j = 0; j < m; ++j) {
      if (exclude_diagonal && i == j)
        out[i * m + j] = 0.0;
      else
        out[i * m + j] /= total;
    }
  }
  return Tensor::matrix(n, m, std::move(out));
}

// Per-row log-softmax of the similarity logits (A B^T)/temperature on the tape.
inline Tensor log_softmax_similarity(Tape& tape, const Tensor& a, const Tensor& b, double temperature,
                                     bool exclude_diagonal) {
  const Tensor logits = tape.scale(tape.matmul(a, tape.transpose(b)), 1.0 / temperature);
  const std::size_t m = logits.cols();
  Tensor lse;
  if (exclude_diagonal) {
    const Tensor mask = offdiag_mask(logits.rows());
    lse = tape.logsumexp_rows(logits, &mask);
  } else {
    lse = tape.logsumexp_rows(logits);
  }
  return tape.sub(logits, tape.broadcast_cols(lse, m));
}

}  // namespace detail

// (1/n) sum_i 1/2 (<z_i, t_i> - 1)^2. Targets may be off the sphere (linear mixing).
inline Tensor dr_loss(Tape& tape, const Tensor& z, const Tensor& targets) {
  if (z.rank() != 2 || z.shape() != targets.shape())
    throw ShapeError("dr_loss: features " + ad::shape_str(z.shape()) + " vs targets " +
                     ad::shape_str(targets.shape()));
  detail::require_unit_rows(z, "dr_loss");
  const Tensor gap = tape.add_scalar(tape.row_inner(z, targets), -1.0);
  const double n = static_cast<double>(z.rows());
  return tape.scale(tape.sum(tape.mul(gap, gap)), 0.5 / n);
}

// d/dz of 1/2 (<z,p> - 1)^2, i.e. -(1 - <z,p>) p.
inline std::vector<double> dr_grad_analytic(std::span<const double> z, std::span<const double> p) {
  double c = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) c += z[i] * p[i];
  std::vector<double> g(p.begin(), p.end());
  for (auto& v : g) v *= -(1.0 - c);
  return g;
}

// Focal neural-collapse contrastive loss.
//   label_prototypes: row i is p_{y_i}
//   past_prototypes:  prototypes of classes from earlier tasks, possibly [0 x d]
inline Tensor fnc2_loss(Tape& tape, const Tensor& z, std::span<const int> labels, const Tensor& label_prototypes,
                        const Tensor& past_prototypes, const Fnc2Config& cfg, LossStats* stats = nullptr) {
  if (!(cfg.tau > 0.0) || cfg.gamma < 0.0) throw Error("fnc2_loss: tau must be > 0 and gamma >= 0");
  const std::size_t n = z.rows();
  if (labels.size() != n || label_prototypes.shape() != z.shape() ||
      (past_prototypes.rank() == 2 && past_prototypes.cols() != z.cols() && past_prototypes.rows() != 0))
    throw ShapeError("fnc2_loss: inconsistent feature, label and prototype counts");
  detail::require_unit_rows(z, "fnc2_loss");

  const double inv_tau = 1.0 / cfg.tau;
  const Tensor sim = tape.scale(tape.matmul(z, tape.transpose(z)), inv_tau);
  const Tensor proto_sim = tape.scale(tape.row_inner(z, label_prototypes), inv_tau);

  const std::size_t past = past_prototypes.rank() == 2 ? past_prototypes.rows() : 0;
  Tensor log_a;
  {
    Tensor mask = Tensor::filled({n, n + past}, 1.0);
    auto mv = mask.mutable_values();
    for (std::size_t i = 0; i < n; ++i) mv[i * (n + past) + i] = 0.0;
    if (past > 0) {
      const Tensor past_sim = tape.scale(tape.matmul(z, tape.transpose(past_prototypes)), inv_tau);
      log_a = tape.logsumexp_rows(tape.concat_cols(sim, past_sim), &mask);
    } else {
      log_a = tape.logsumexp_rows(sim, &mask);
    }
  }
  const Tensor log_c = tape.sub(sim, tape.broadcast_cols(log_a, n));
  const Tensor log_r = tape.sub(proto_sim, log_a);

  // Row weights 1 / (|P(i)| + 1) on positive pairs and on the prototype term.
  Tensor pos_w = Tensor::zeros({n, n});
  Tensor row_w = Tensor::zeros({n, 1});
  {
    auto pw = pos_w.mutable_values();
    auto rw = row_w.mutable_values();
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t count = 0;
      for (std::size_t j = 0; j < n; ++j) count += (j != i && labels[j] == labels[i]);
      const double w = 1.0 / static_cast<double>(count + 1);
      rw[i] = w;
      for (std::size_t j = 0; j < n; ++j)
        if (j != i && labels[j] == labels[i]) pw[i * n + j] = w;
    }
  }
  if (stats) {
    for (std::size_t i = 0; i < n; ++i) {
      stats->clamped += log_r[i] > kFnc2LogCap;
      for (std::size_t j = 0; j < n; ++j) stats->clamped += pos_w[i * n + j] != 0.0 && log_c[i * n + j] > kFnc2LogCap;
    }
  }

  auto focal_log = [&](const Tensor& log_ratio) {
    const Tensor clamped = tape.clamp_max(log_ratio, kFnc2LogCap);
    const Tensor one_minus = tape.add_scalar(tape.neg(tape.exp(clamped)), 1.0);
    return tape.mul(tape.pow(one_minus, cfg.gamma), clamped);
  };
  const Tensor pair_terms = tape.sum(tape.mul(focal_log(log_c), pos_w));
  const Tensor proto_terms = tape.sum(tape.mul(focal_log(log_r), row_w));
  return tape.neg(tape.add(pair_terms, proto_terms));
}

// -log r for one mixed feature z (a [1 x d] row, taken as given rather than
// renormalized), with A summed over `others` and `past_prototypes`.
inline Tensor fnc2_single_sample_loss(Tape& tape, const Tensor& z, const Tensor& p, const Tensor& others,
                                      const Tensor& past_prototypes, double tau) {
  if (z.rank() != 2 || z.rows() != 1 || p.shape() != z.shape())
    throw ShapeError("fnc2_single_sample_loss: z and p must be [1 x d]");
  const bool has_others = others.rank() == 2 && others.rows() > 0;
  const bool has_past = past_prototypes.rank() == 2 && past_prototypes.rows() > 0;
  if (!has_others && !has_past) throw Error("fnc2_single_sample_loss: A has no terms");
  const double inv_tau = 1.0 / tau;
  Tensor logits;
  if (has_others) logits = tape.scale(tape.matmul(z, tape.transpose(others)), inv_tau);
  if (has_past) {
    const Tensor past_logits = tape.scale(tape.matmul(z, tape.transpose(past_prototypes)), inv_tau);
    logits = has_others ? tape.concat_cols(logits, past_logits) : past_logits;
  }
  const Tensor pull = tape.scale(tape.inner(z, p), inv_tau);
  return tape.sub(tape.sum(tape.logsumexp_rows(logits)), pull);
}

struct Fnc2Gradient {
  std::vector<double> pull;
  std::vector<double> push;
};

// Closed-form split of d(-log r)/dz at gamma = 0:
//   pull = -p/tau
//   push = sum_k z_k/tau F(z_k) + sum_l p_l/tau F(p_l),  F(a) = exp(<z,a>/tau) / A
inline Fnc2Gradient fnc2_grad_decomposition(std::span<const double> z, std::span<const double> p,
                                            const Tensor& others, const Tensor& past_prototypes, double tau) {
  const std::size_t d = z.size();
  if (p.size() != d) throw ShapeError("fnc2_grad_decomposition: z and p differ in length");
  std::vector<std::span<const double>> terms;
  for (const Tensor* set : {&others, &past_prototypes})
    if (set->rank() == 2)
      for (std::size_t r = 0; r < set->rows(); ++r) {
        if (set->cols() != d) throw ShapeError("fnc2_grad_decomposition: row width differs from d");
        terms.push_back(set->row(r));
      }
  if (terms.empty()) throw Error("fnc2_grad_decomposition: A has no terms");

  std::vector<double> logits(terms.size());
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < terms.size(); ++k) {
    double s = 0.0;
    for (std::size_t i = 0; i < d; ++i) s += z[i] * terms[k][i];
    logits[k] = s / tau;
    mx = std::max(mx, logits[k]);
  }
  double total = 0.0;
  for (auto& v : logits) total += (v = std::exp(v - mx));

  Fnc2Gradient g{std::vector<double>(d), std::vector<double>(d, 0.0)};
  for (std::size_t i = 0; i < d; ++i) g.pull[i] = -p[i] / tau;
  for (std::size_t k = 0; k < terms.size(); ++k) {
    const double f = logits[k] / total;
    for (std::size_t i = 0; i < d; ++i) g.push[i] += terms[k][i] / tau * f;
  }
  return g;
}

// Per-anchor SupCon terms as an [n x 1] column. An anchor without positives
// gets a zero weight row, so its entry is exactly 0.
inline Tensor supcon_anchor_losses(Tape& tape, const Tensor& z, std::span<const int> labels, double tau) {
  if (!(tau > 0.0)) throw Error("supcon_loss: tau must be positive");
  const std::size_t n = z.rows();
  if (labels.size() != n) throw ShapeError("supcon_loss: label count differs from feature count");
  if (n < 2) throw Error("supcon_loss: need at least 2 views");
  detail::require_unit_rows(z, "supcon_loss");
  const Tensor log_prob = detail::log_softmax_similarity(tape, z, z, tau, true);
  Tensor w = Tensor::zeros({n, n});
  auto wv = w.mutable_values();
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t count = 0;
    for (std::size_t j = 0; j < n; ++j) count += (j != i && labels[j] == labels[i]);
    for (std::size_t j = 0; j < n; ++j)
      if (j != i && labels[j] == labels[i]) wv[i * n + j] = 1.0 / static_cast<double>(count);
  }
  return tape.neg(tape.row_sum(tape.mul(log_prob, w)));
}

inline Tensor supcon_loss(Tape& tape, const Tensor& z, std::span<const int> labels, double tau) {
  return tape.sum(supcon_anchor_losses(tape, z, labels, tau));
}

namespace detail {

inline Tensor relation_cross_entropy(Tape& tape, const Tensor& teacher_probs, const Tensor& student_log_probs) {
  return tape.neg(tape.sum(tape.mul(student_log_probs, teacher_probs)));
}

}  // namespace detail

// sum_i -o_past(i) . log o_cur(i), with o(i) a softmax over j != i.
// z_past is read as a constant.
inline Tensor ird_loss(Tape& tape, const Tensor& z_current, const Tensor& z_past, double kappa_current,
                       double kappa_past) {
  if (!(kappa_current > 0.0) || !(kappa_past > 0.0)) throw Error("ird_loss: temperatures must be positive");
  if (z_current.rank() != 2 || z_current.shape() != z_past.shape())
    throw ShapeError("ird_loss: current " + ad::shape_str(z_current.shape()) + " vs past " +
                     ad::shape_str(z_past.shape()));
  if (z_current.rows() < 2) throw Error("ird_loss: need at least 2 views, got " + std::to_string(z_current.rows()));
  const Tensor teacher = detail::softmax_similarity(z_past, z_past, kappa_past, true);
  return detail::relation_cross_entropy(tape, teacher,
                                        detail::log_softmax_similarity(tape, z_current, z_current, kappa_current, true));
}

// sum_i -q_past(i) . log q_cur(i), with q(i) a softmax over the prototypes P_{1:t}.
inline Tensor sprd_loss(Tape& tape, const Tensor& z_current, const Tensor& z_past, const Tensor& prototypes,
                        double zeta_current, double zeta_past) {
  if (!(zeta_current > 0.0) || !(zeta_past > 0.0)) throw Error("sprd_loss: temperatures must be positive");
  if (prototypes.rank() != 2 || prototypes.rows() == 0) throw Error("sprd_loss: empty prototype set");
  if (z_current.rank() != 2 || z_current.shape() != z_past.shape() || prototypes.cols() != z_current.cols())
    throw ShapeError("sprd_loss: current " + ad::shape_str(z_current.shape()) + ", past " +
                     ad::shape_str(z_past.shape()) + ", prototypes " + ad::shape_str(prototypes.shape()));
  const Tensor teacher = detail::softmax_similarity(z_past, prototypes, zeta_past, false);
  return detail::relation_cross_entropy(tape, teacher,
                                        detail::log_softmax_similarity(tape, z_current, prototypes, zeta_current, false));
}

// xi = max(0, (e - e0) / E).
inline double hsd_blend_weight(int epoch, const DistillConfig& cfg) {
  if (epoch < 0) throw Error("hsd_loss: negative epoch");
  if (cfg.epochs_total <= 0) throw Error("hsd_loss: epochs_total must be positive");
  return std::max(0.0, static_cast<double>(epoch - cfg.e0) / static_cast<double>(cfg.epochs_total));
}

inline Tensor hsd_loss(Tape& tape, const Tensor& ird, const Tensor& sprd, int epoch, const DistillConfig& cfg) {
  const double xi = hsd_blend_weight(epoch, cfg);
  if (xi == 0.0) return ird;
  return tape.add(tape.scale(ird, 1.0 - xi), tape.scale(sprd, xi));
}

// Mixed features and their interpolated prototypes.
struct MixedTerms {
  Tensor z;
  Tensor targets;
};

// DR mode:   DR(z) + upsilon DR(z_mix)
// FNC2 mode: FNC2(z) + iota DR(z_mix)
// Without mixed terms only the normal-sample loss is returned.
inline Tensor plasticity_loss(Tape& tape, const Tensor& z, std::span<const int> labels, const Tensor& label_prototypes,
                              const Tensor& past_prototypes, const MixedTerms* mixed, const PlasticityConfig& cfg,
                              const Fnc2Config& fnc2, LossStats* stats = nullptr) {
  if (cfg.upsilon < 0.0 || cfg.iota < 0.0) throw Error("plasticity_loss: upsilon and iota must be >= 0");
  if (mixed && (mixed->z.rank() != 2 || mixed->z.shape() != mixed->targets.shape() ||
                mixed->z.cols() != z.cols()))
    throw ShapeError("plasticity_loss: mixed features " + ad::shape_str(mixed->z.shape()) + " vs mixed targets " +
                     ad::shape_str(mixed->targets.shape()));
  Tensor normal;
  double weight = 0.0;
  if (cfg.mode == PlasticityMode::DR) {
    normal = dr_loss(tape, z, label_prototypes);
    weight = cfg.upsilon;
  } else {
    normal = fnc2_loss(tape, z, labels, label_prototypes, past_prototypes, fnc2, stats);
    weight = cfg.iota;
  }
  if (!mixed) return normal;
  return tape.add(normal, tape.scale(dr_loss(tape, mixed->z, mixed->targets), weight));
}

}  // namespace nccl_lab
