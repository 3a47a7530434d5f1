// SPDX-License-Identifier: Apache-2.0
//
// Linear probe, accuracy matrix, forgetting, calibration and neural-collapse
// diagnostics.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <iostream>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "nccl_lab/autodiff.hpp"
#include "nccl_lab/data.hpp"
#include "nccl_lab/error.hpp"
#include "nccl_lab/geometry.hpp"
#include "nccl_lab/model.hpp"
#include "nccl_lab/random.hpp"

namespace nccl_lab {

// ---------------------------------------------------------------- calibration

struct Prediction {
  double score = 0.0;  // winning softmax probability
  bool correct = false;
};

struct BinStats {
  double lo = 0.0;
  double hi = 0.0;
  std::size_t count = 0;
  double acc = 0.0;
  double conf = 0.0;
};

// M equal bins over [0, 1]; a score of exactly 1 lands in the last bin.
inline std::vector<BinStats> reliability_bins(std::span<const Prediction> preds, std::size_t num_bins) {
  if (num_bins < 1) throw Error("calibration: bin count must be >= 1");
  std::vector<BinStats> bins(num_bins);
  std::vector<double> acc_sum(num_bins, 0.0), conf_sum(num_bins, 0.0);
  for (std::size_t m = 0; m < num_bins; ++m) {
    bins[m].lo = static_cast<double>(m) / static_cast<double>(num_bins);
    bins[m].hi = static_cast<double>(m + 1) / static_cast<double>(num_bins);
  }
  for (const auto& p : preds) {
    if (!(p.score >= 0.0 && p.score <= 1.0))
      throw Error("calibration: score " + std::to_string(p.score) + " outside [0, 1]");
    const auto m = std::min(static_cast<std::size_t>(p.score * static_cast<double>(num_bins)), num_bins - 1);
    ++bins[m].count;
    acc_sum[m] += p.correct ? 1.0 : 0.0;
    conf_sum[m] += p.score;
  }
  for (std::size_t m = 0; m < num_bins; ++m)
    if (bins[m].count > 0) {
      bins[m].acc = acc_sum[m] / static_cast<double>(bins[m].count);
      bins[m].conf = conf_sum[m] / static_cast<double>(bins[m].count);
    }
  return bins;
}

// sum_m |B_m|/n |acc - conf|
inline double ece(std::span<const Prediction> preds, std::size_t num_bins) {
  const auto bins = reliability_bins(preds, num_bins);
  if (preds.empty()) return 0.0;
  double out = 0.0;
  for (const auto& b : bins)
    out += static_cast<double>(b.count) / static_cast<double>(preds.size()) * std::abs(b.acc - b.conf);
  return out;
}

// sum_m |B_m|/n conf max(conf - acc, 0)
inline double oe(std::span<const Prediction> preds, std::size_t num_bins) {
  const auto bins = reliability_bins(preds, num_bins);
  if (preds.empty()) return 0.0;
  double out = 0.0;
  for (const auto& b : bins)
    out += static_cast<double>(b.count) / static_cast<double>(preds.size()) * b.conf * std::max(b.conf - b.acc, 0.0);
  return out;
}

struct CalibrationSummary {
  std::vector<double> ece;  // per task
  std::vector<double> oe;   // per task
  double aece = 0.0;
  double aoe = 0.0;
};

inline CalibrationSummary aece_aoe(const std::vector<std::vector<Prediction>>& per_task, std::size_t num_bins) {
  if (per_task.empty()) throw Error("aece_aoe: no tasks");
  CalibrationSummary s;
  for (const auto& preds : per_task) {
    s.ece.push_back(ece(preds, num_bins));
    s.oe.push_back(oe(preds, num_bins));
  }
  const double t = static_cast<double>(per_task.size());
  s.aece = std::accumulate(s.ece.begin(), s.ece.end(), 0.0) / t;
  s.aoe = std::accumulate(s.oe.begin(), s.oe.end(), 0.0) / t;
  return s;
}

// ---------------------------------------------------------------- accuracy

// Row t holds A_{t,0..t} in percent.
using AccuracyMatrix = std::vector<std::vector<double>>;

inline double average_accuracy(const AccuracyMatrix& a) {
  if (a.empty() || a.back().size() != a.size()) throw Error("average_accuracy: final row incomplete");
  return std::accumulate(a.back().begin(), a.back().end(), 0.0) / static_cast<double>(a.size());
}

// (1/(T-1)) sum_{i<T} [max_{t<T} A_{t,i} - A_{T,i}]
inline double average_forgetting(const AccuracyMatrix& a) {
  const std::size_t T = a.size();
  if (T < 2) throw Error("average_forgetting: need at least 2 tasks");
  for (std::size_t t = 0; t < T; ++t)
    if (a[t].size() != t + 1) throw Error("average_forgetting: row " + std::to_string(t + 1) + " has wrong length");
  double total = 0.0;
  for (std::size_t i = 0; i + 1 < T; ++i) {
    double best = a[i][i];
    for (std::size_t t = i; t + 1 < T; ++t) best = std::max(best, a[t][i]);
    total += best - a[T - 1][i];
  }
  return total / static_cast<double>(T - 1);
}

// ---------------------------------------------------------------- probe

struct ProbeConfig {
  int epochs = 100;
  double lr = 0.1;
  std::size_t batch_size = 64;
  double momentum = 0.9;
  // Weight each sample by 1 / (count of its class) in the loss.
  bool balanced = true;

  bool operator==(const ProbeConfig&) const = default;
};

// Step decay x0.2 at 60%, 75% and 90% of the epochs.
inline double probe_lr_at(const ProbeConfig& cfg, int epoch) {
  double lr = cfg.lr;
  for (double frac : {0.6, 0.75, 0.9})
    if (epoch >= static_cast<int>(frac * cfg.epochs)) lr *= 0.2;
  return lr;
}

inline ad::Tensor stack_inputs(const Dataset& data) {
  if (data.empty()) throw Error("stack_inputs: empty dataset");
  const std::size_t dim = data.front().x.size();
  std::vector<double> xs;
  xs.reserve(data.size() * dim);
  for (const auto& s : data) {
    if (s.x.size() != dim) throw ShapeError("stack_inputs: ragged sample dimensions");
    xs.insert(xs.end(), s.x.begin(), s.x.end());
  }
  return ad::Tensor::matrix(data.size(), dim, std::move(xs));
}

// Frozen-encoder features f(x), computed without recording gradients.
inline ad::Tensor encode(const ModelParams& params, const Dataset& data) {
  ad::Tape tape;
  return forward_encoder(tape, snapshot(params), stack_inputs(data));
}

// Softmax cross-entropy on fixed features; momentum SGD, no weight decay.
inline Linear train_probe_on_features(const ad::Tensor& features, std::span<const int> labels,
                                      std::size_t num_classes, const ProbeConfig& cfg, Rng& rng) {
  const std::size_t n = features.rows();
  if (n == 0) throw Error("train_probe: empty probe data");
  if (labels.size() != n) throw ShapeError("train_probe: label count differs from feature count");
  const std::size_t f = features.cols();
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(f)));
  std::vector<double> w0(f * num_classes);
  for (auto& v : w0) v = normal(rng);
  Linear cls{ad::Tensor::matrix(f, num_classes, std::move(w0)),
             ad::Tensor::vector(std::vector<double>(num_classes, 0.0))};

  std::vector<double> weight(n, 1.0);
  if (cfg.balanced) {
    std::vector<std::size_t> counts(num_classes, 0);
    for (int y : labels) ++counts.at(static_cast<std::size_t>(y));
    for (std::size_t i = 0; i < n; ++i) weight[i] = 1.0 / static_cast<double>(counts[static_cast<std::size_t>(labels[i])]);
  }

  SgdConfig sgd{cfg.momentum, 0.0};
  std::vector<double> vw, vb;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (int e = 0; e < cfg.epochs; ++e) {
    const double lr = probe_lr_at(cfg, e);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t m = std::min(cfg.batch_size, n - start);
      std::vector<double> xs(m * f), onehot(m * num_classes, 0.0);
      double wsum = 0.0;
      for (std::size_t r = 0; r < m; ++r) {
        const std::size_t i = order[start + r];
        std::copy_n(features.row(i).begin(), f, xs.begin() + static_cast<std::ptrdiff_t>(r * f));
        onehot[r * num_classes + static_cast<std::size_t>(labels[i])] = weight[i];
        wsum += weight[i];
      }
      for (auto& v : onehot) v /= wsum;
      ad::Tape tape;
      const Linear bound{tape.leaf(cls.weight), tape.leaf(cls.bias)};
      const ad::Tensor logits = bound.forward(tape, ad::Tensor::matrix(m, f, std::move(xs)));
      const ad::Tensor log_prob = tape.sub(logits, tape.broadcast_cols(tape.logsumexp_rows(logits), num_classes));
      const ad::Tensor loss = tape.neg(tape.sum(tape.mul(log_prob, ad::Tensor::matrix(m, num_classes, onehot))));
      const auto grads = tape.backward(loss);
      sgd_update("classifier.weight", cls.weight, grads.of(bound.weight), vw, sgd, lr);
      sgd_update("classifier.bias", cls.bias, grads.of(bound.bias), vb, sgd, lr);
    }
  }
  return cls;
}

inline Linear train_probe(const ModelParams& params, const Dataset& probe_data, std::size_t num_classes,
                          const ProbeConfig& cfg, Rng& rng) {
  if (probe_data.empty()) throw Error("train_probe: empty probe data");
  std::vector<int> labels;
  for (const auto& s : probe_data) labels.push_back(s.label);
  return train_probe_on_features(encode(params, probe_data), labels, num_classes, cfg, rng);
}

// Argmax restricted to `allowed` (all classes when empty); ties go to the lowest index.
inline std::size_t restricted_argmax(std::span<const double> logits, std::span<const int> allowed) {
  std::size_t best = allowed.empty() ? 0 : static_cast<std::size_t>(allowed.front());
  auto consider = [&](std::size_t k) {
    if (logits[k] > logits[best] || (logits[k] == logits[best] && k < best)) best = k;
  };
  if (allowed.empty())
    for (std::size_t k = 0; k < logits.size(); ++k) consider(k);
  else
    for (int k : allowed) consider(static_cast<std::size_t>(k));
  return best;
}

// Max of the softmax over `allowed` (all classes when empty).
inline double softmax_max(std::span<const double> logits, std::span<const int> allowed) {
  std::vector<double> sel;
  if (allowed.empty())
    sel.assign(logits.begin(), logits.end());
  else
    for (int k : allowed) sel.push_back(logits[static_cast<std::size_t>(k)]);
  const double mx = *std::max_element(sel.begin(), sel.end());
  double total = 0.0;
  for (double v : sel) total += std::exp(v - mx);
  return 1.0 / total;
}

struct TaskEval {
  double class_il_acc = 0.0;  // percent
  double task_il_acc = 0.0;   // percent
  std::vector<Prediction> class_il;         // winner over all K, full softmax score
  std::vector<Prediction> task_il_masked;   // winner within the task, softmax over the task's classes
  std::vector<Prediction> task_il_unmasked; // winner within the task, full softmax score
};

inline TaskEval evaluate_task(const ad::Tensor& logits, std::span<const int> labels, std::span<const int> task_classes) {
  TaskEval out;
  const std::size_t n = logits.rows();
  if (n == 0) throw Error("evaluate_task: empty test set");
  std::size_t hit_c = 0, hit_t = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = logits.row(i);
    const auto y = static_cast<std::size_t>(labels[i]);
    const std::size_t pc = restricted_argmax(row, {});
    const std::size_t pt = restricted_argmax(row, task_classes);
    hit_c += pc == y;
    hit_t += pt == y;
    const double full = softmax_max(row, {});
    out.class_il.push_back({full, pc == y});
    out.task_il_masked.push_back({softmax_max(row, task_classes), pt == y});
    std::vector<double> probs(row.begin(), row.end());
    const double mx = *std::max_element(probs.begin(), probs.end());
    double total = 0.0;
    for (double v : probs) total += std::exp(v - mx);
    out.task_il_unmasked.push_back({std::exp(row[pt] - mx) / total, pt == y});
  }
  out.class_il_acc = 100.0 * static_cast<double>(hit_c) / static_cast<double>(n);
  out.task_il_acc = 100.0 * static_cast<double>(hit_t) / static_cast<double>(n);
  return out;
}

// ---------------------------------------------------------------- neural collapse

struct NcReport {
  double nc1 = 0.0;  // mean within-class variance trace
  double nc2 = 0.0;  // max |cos(mu_i, mu_j) + 1/(K-1)| over centered class means
  double nc3 = 0.0;  // mean cos(mu_k, p_k)
  double nc4_agreement = 0.0;  // fraction where argmax <z,p_k> = argmin ||z - mu_k||
  std::vector<int> classes;    // classes that were evaluated
  std::vector<std::string> warnings;
};

inline NcReport nc_diagnostics(const ad::Tensor& features, std::span<const int> labels, const PrototypeSet& P) {
  const std::size_t n = features.rows(), d = features.cols();
  if (labels.size() != n) throw ShapeError("nc_diagnostics: label count differs from feature count");
  if (d != P.dim()) throw ShapeError("nc_diagnostics: feature width differs from prototype dimension");
  NcReport r;
  std::vector<std::vector<std::size_t>> members(P.num_classes());
  for (std::size_t i = 0; i < n; ++i) members.at(static_cast<std::size_t>(labels[i])).push_back(i);

  std::vector<std::vector<double>> mu;
  for (std::size_t k = 0; k < members.size(); ++k) {
    if (members[k].empty()) continue;
    if (members[k].size() < 2) {
      r.warnings.push_back("class " + std::to_string(k) + " has fewer than 2 samples; skipped");
      continue;
    }
    r.classes.push_back(static_cast<int>(k));
    std::vector<double> m(d, 0.0);
    for (std::size_t i : members[k])
      for (std::size_t c = 0; c < d; ++c) m[c] += features.at(i, c) / static_cast<double>(members[k].size());
    mu.push_back(std::move(m));
  }
  for (const auto& w : r.warnings) std::cerr << "warning: nc_diagnostics: " << w << '\n';
  const std::size_t K = r.classes.size();
  if (K == 0) return r;

  for (std::size_t a = 0; a < K; ++a) {
    double var = 0.0;
    const auto& idx = members[static_cast<std::size_t>(r.classes[a])];
    for (std::size_t i : idx)
      for (std::size_t c = 0; c < d; ++c) var += (features.at(i, c) - mu[a][c]) * (features.at(i, c) - mu[a][c]);
    r.nc1 += var / static_cast<double>(idx.size()) / static_cast<double>(K);
  }

  std::vector<double> global(d, 0.0);
  for (const auto& m : mu)
    for (std::size_t c = 0; c < d; ++c) global[c] += m[c] / static_cast<double>(K);
  std::vector<std::vector<double>> centered(K, std::vector<double>(d));
  for (std::size_t a = 0; a < K; ++a) {
    for (std::size_t c = 0; c < d; ++c) centered[a][c] = mu[a][c] - global[c];
    const double nrm = detail::norm(centered[a]);
    if (nrm > 0.0)
      for (auto& v : centered[a]) v /= nrm;
  }
  if (K >= 2) {
    const double target = -1.0 / static_cast<double>(K - 1);
    for (std::size_t a = 0; a < K; ++a)
      for (std::size_t b = a + 1; b < K; ++b)
        r.nc2 = std::max(r.nc2, std::abs(detail::dot(centered[a], centered[b]) - target));
  }
  for (std::size_t a = 0; a < K; ++a)
    r.nc3 += detail::dot(centered[a], P[static_cast<std::size_t>(r.classes[a])]) / static_cast<double>(K);

  std::size_t agree = 0, total = 0;
  for (std::size_t a = 0; a < K; ++a)
    for (std::size_t i : members[static_cast<std::size_t>(r.classes[a])]) {
      const auto z = features.row(i);
      std::size_t by_proto = 0, by_mean = 0;
      double best_dot = -std::numeric_limits<double>::infinity(), best_dist = std::numeric_limits<double>::infinity();
      for (std::size_t b = 0; b < K; ++b) {
        const double s = detail::dot(z, P[static_cast<std::size_t>(r.classes[b])]);
        double dist = 0.0;
        for (std::size_t c = 0; c < d; ++c) dist += (z[c] - mu[b][c]) * (z[c] - mu[b][c]);
        if (s > best_dot) best_dot = s, by_proto = b;
        if (dist < best_dist) best_dist = dist, by_mean = b;
      }
      agree += by_proto == by_mean;
      ++total;
    }
  r.nc4_agreement = static_cast<double>(agree) / static_cast<double>(total);
  return r;
}

}  // namespace nccl_lab
