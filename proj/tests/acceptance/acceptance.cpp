// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fail.
#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/normal.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "../unit/oracles.hpp"
#include "nccl_lab/nccl_lab.hpp"

using namespace nccl_lab;
using ad::Tape;
using ad::Tensor;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

std::string fmt(const char* f, double a = 0, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

Tensor to_tensor(const oracle::Mat& m) { return Tensor::matrix(m.size(), m.front().size(), oracle::flatten(m)); }

oracle::Mat unit_rows_of(const oracle::Vec& flat, std::size_t rows, std::size_t cols) {
  oracle::Mat m(rows);
  for (std::size_t r = 0; r < rows; ++r) m[r] = oracle::unit(oracle::Vec(flat.begin() + r * cols, flat.begin() + (r + 1) * cols));
  return m;
}

// Tape gradient of loss(l2_normalize(X)) against central differences of the
// scalar oracle evaluated on the normalized rows.
double oracle_fd_error(const std::function<Tensor(Tape&, const Tensor&)>& tape_loss,
                       const std::function<double(const oracle::Mat&)>& reference, const oracle::Mat& x) {
  const std::size_t rows = x.size(), cols = x.front().size();
  Tape t;
  const Tensor leaf = t.leaf(to_tensor(x));
  const Tensor g = t.backward(tape_loss(t, t.l2_normalize(leaf))).of(leaf);
  const auto numeric = oracle::fd_gradient([&](const oracle::Vec& v) { return reference(unit_rows_of(v, rows, cols)); },
                                           oracle::flatten(x), 1e-5);
  double worst = 0.0;
  for (std::size_t i = 0; i < numeric.size(); ++i)
    worst = std::max(worst, std::abs(g[i] - numeric[i]) / std::max(1.0, std::abs(g[i])));
  return worst;
}

// ---------------------------------------------------------------- criteria

Outcome etf_geometry() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst_norm = 0.0, worst_cos = 0.0;
  for (std::size_t K = 2; K <= 16; ++K) {
    const auto P = build_etf(K, K, 1000 + K);
    for (std::size_t i = 0; i < K; ++i) {
      worst_norm = std::max(worst_norm, std::abs(std::sqrt(oracle::dot({P[i].begin(), P[i].end()}, {P[i].begin(), P[i].end()})) - 1.0));
      for (std::size_t j = i + 1; j < K; ++j)
        worst_cos = std::max(worst_cos, std::abs(oracle::dot({P[i].begin(), P[i].end()}, {P[j].begin(), P[j].end()}) +
                                                 1.0 / (K - 1.0)));
    }
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {worst_norm <= 1e-9 && worst_cos <= 1e-9 && secs < 1.0,
          fmt("K=2..16, d=K: max |norm-1| %.2e, max |cos+1/(K-1)| %.2e (tol 1e-9), %.3fs (< 1s)", worst_norm, worst_cos,
              secs)};
}

Outcome slerp_vs_lerp() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(42);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> dim(2, 16);
  double worst_slerp = 0.0, worst_lerp = 0.0;
  std::size_t strict_fail = 0, strict_checked = 0;
  for (int i = 0; i < 10000; ++i) {
    const std::size_t d = dim(rng);
    const auto a = oracle::random_unit_rows(1, d, rng)[0], b = oracle::random_unit_rows(1, d, rng)[0];
    const double lam = u(rng);
    const auto s = slerp(a, b, lam);
    worst_slerp = std::max(worst_slerp, std::abs(std::sqrt(oracle::dot(s, s)) - 1.0));
    const auto l = lerp(a, b, lam);
    const double c = oracle::dot(a, b);
    const double expected = lam * lam + (1 - lam) * (1 - lam) + 2 * lam * (1 - lam) * c;
    worst_lerp = std::max(worst_lerp, std::abs(oracle::dot(l, l) - expected));
    if (lam > 0.0 && lam < 1.0 && c < 1.0) {
      ++strict_checked;
      strict_fail += !(std::sqrt(oracle::dot(l, l)) < 1.0);
    }
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {worst_slerp <= 1e-9 && worst_lerp <= 1e-12 && strict_fail == 0 && secs < 5.0,
          fmt("1e4 pairs: max |slerp norm-1| %.2e (1e-9), max |lerp norm^2 - Eq| %.2e (1e-12), ", worst_slerp,
              worst_lerp) +
              fmt("lerp norm >= 1 in %.0f of %.0f interior cases, %.3fs (< 5s)", static_cast<double>(strict_fail),
                  static_cast<double>(strict_checked), secs)};
}

Outcome gradient_oracle() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(7);
  const std::size_t n = 8, d = 8;
  std::uniform_int_distribution<int> lab(0, 7);
  std::vector<std::pair<std::string, double>> worst;
  auto record = [&](const std::string& name, double e) {
    for (auto& [k, v] : worst)
      if (k == name) {
        v = std::max(v, e);
        return;
      }
    worst.emplace_back(name, e);
  };

  for (int trial = 0; trial < 5; ++trial) {
    const auto P = build_etf(8, d, rng());
    oracle::Mat protos;
    for (std::size_t k = 0; k < 8; ++k) protos.emplace_back(P[k].begin(), P[k].end());
    std::vector<int> y(n);
    for (auto& v : y) v = 3 + lab(rng) % 5;  // classes 3..7 current, 0..2 past
    oracle::Mat label_protos;
    for (int v : y) label_protos.push_back(protos[static_cast<std::size_t>(v)]);
    const oracle::Mat past(protos.begin(), protos.begin() + 3);
    const auto x = oracle::random_unit_rows(n, d, rng);
    const auto targets = oracle::random_unit_rows(n, d, rng);
    const auto teacher = oracle::random_unit_rows(n, d, rng);

    record("dr", oracle_fd_error([&](Tape& t, const Tensor& z) { return dr_loss(t, z, to_tensor(targets)); },
                                 [&](const oracle::Mat& z) { return oracle::dr(z, targets); }, x));
    for (double gamma : {0.0, 2.0})
      record(gamma == 0.0 ? "fnc2(g=0)" : "fnc2(g=2)",
             oracle_fd_error(
                 [&](Tape& t, const Tensor& z) {
                   return fnc2_loss(t, z, y, to_tensor(label_protos), to_tensor(past), Fnc2Config{0.5, gamma});
                 },
                 [&](const oracle::Mat& z) { return oracle::fnc2(z, y, label_protos, past, 0.5, gamma); }, x));
    record("supcon", oracle_fd_error([&](Tape& t, const Tensor& z) { return supcon_loss(t, z, y, 0.5); },
                                     [&](const oracle::Mat& z) { return oracle::supcon(z, y, 0.5); }, x));
    record("ird", oracle_fd_error([&](Tape& t, const Tensor& z) { return ird_loss(t, z, to_tensor(teacher), 0.2, 0.01); },
                                  [&](const oracle::Mat& z) { return oracle::ird(z, teacher, 0.2, 0.01); }, x));
    record("sprd",
           oracle_fd_error([&](Tape& t, const Tensor& z) { return sprd_loss(t, z, to_tensor(teacher), to_tensor(protos), 0.2, 0.1); },
                           [&](const oracle::Mat& z) { return oracle::sprd(z, teacher, protos, 0.2, 0.1); }, x));
  }

  // Full stack: model parameters -> normal and mixed features -> plasticity + HSD
  // against a frozen teacher, in both plasticity modes.
  ModelConfig mc;
  mc.input_dim = 6;
  mc.hidden_dim = 10;
  mc.feature_dim = 8;
  mc.proj_hidden_dim = 16;
  mc.out_dim = d;
  mc.num_classes = 8;
  mc.predictor_init = PredictorInit::Random;
  Rng init(3);
  const ModelParams params = init_model(mc, init);
  const ModelParams teacher = snapshot(init_model(mc, init));
  const auto P = build_etf(8, d, 5);
  std::normal_distribution<double> g(0, 1);
  std::vector<double> xs(n * 6);
  for (auto& v : xs) v = g(rng);
  Batch views;
  views.inputs = Tensor::matrix(n, 6, xs);
  for (std::size_t i = 0; i < n; ++i) {
    views.labels.push_back(3 + static_cast<int>(i / 2) % 5);
    views.origins.push_back(Origin::Current);
  }
  Rng mix_rng(9);
  const MixedBatch mixed = mix_batch(views, P, MixConfig{}, 0.62, mix_rng);
  const std::vector<int> past_classes{0, 1, 2}, seen{0, 1, 2, 3, 4, 5, 6, 7};
  DistillConfig dc;
  dc.e0 = 2;
  dc.epochs_total = 10;
  for (auto mode : {PlasticityMode::DR, PlasticityMode::FNC2}) {
    PlasticityConfig pc;
    pc.mode = mode;
    double err = 0.0;
    params.for_each_representation_param([&](const std::string& name, const Tensor& w) {
      auto f = [&](Tape& t, const Tensor& leaf) {
        ModelParams q = params;
        q.for_each_param([&](const std::string& nm, Tensor& v) {
          if (nm == name) v = leaf;
        });
        const Tensor z = forward_features(t, q, views.inputs);
        const MixedTerms m{forward_features(t, q, mixed.inputs), mixed.prototypes};
        const Tensor plas = plasticity_loss(t, z, views.labels, P.gather(views.labels), P.gather(past_classes), &m, pc,
                                            Fnc2Config{0.5, 2.0});
        const Tensor zp = forward_features(t, teacher, views.inputs);
        const Tensor zc = forward_predictor(t, q, z);
        const Tensor hsd = hsd_loss(t, ird_loss(t, zc, zp, 0.2, 0.01), sprd_loss(t, zc, zp, P.gather(seen), 0.2, 0.1), 7, dc);
        return t.add(plas, hsd);
      };
      err = std::max(err, ad::grad_check(f, w, 1e-5));
    });
    record(mode == PlasticityMode::DR ? "stack(DR)" : "stack(FNC2)", err);
  }

  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  bool ok = secs < 30.0;
  std::string detail;
  for (const auto& [k, v] : worst) {
    ok = ok && v < 1e-4;
    detail += k + " " + fmt("%.1e", v) + ", ";
  }
  return {ok, "2N=8, d=8, h=1e-5 rel err (< 1e-4): " + detail + fmt("%.2fs (< 30s)", secs)};
}

Outcome analytic_claims() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> lab(0, 5);
  // (a) anchors without positives contribute exactly 0, including a batch of
  // mixed samples that each carry a distinct label
  std::size_t empty_anchors = 0, nonzero = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const Tensor z = to_tensor(oracle::random_unit_rows(8, 8, rng));
    std::vector<int> y(8);
    if (trial % 4 == 0)
      for (int i = 0; i < 8; ++i) y[static_cast<std::size_t>(i)] = 100 + i;
    else
      for (auto& v : y) v = lab(rng);
    Tape t;
    const Tensor terms = supcon_anchor_losses(t, z, y, 0.5);
    for (std::size_t i = 0; i < 8; ++i) {
      if (std::count(y.begin(), y.end(), y[i]) > 1) continue;
      ++empty_anchors;
      nonzero += terms[i] != 0.0;
    }
  }
  // (b) pull + push = autodiff gradient of the single-sample loss at gamma = 0
  double worst_b = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const auto zt = oracle::random_unit_rows(1, 8, rng)[0], pt = oracle::random_unit_rows(1, 8, rng)[0];
    const Tensor others = to_tensor(oracle::random_unit_rows(7, 8, rng));
    const Tensor past = to_tensor(oracle::random_unit_rows(1 + trial % 4, 8, rng));
    const auto parts = fnc2_grad_decomposition(zt, pt, others, past, 0.5);
    Tape t;
    const Tensor leaf = t.leaf(Tensor::matrix(1, 8, zt));
    const auto g = t.backward(fnc2_single_sample_loss(t, leaf, Tensor::matrix(1, 8, pt), others, past, 0.5)).of(leaf);
    for (std::size_t i = 0; i < 8; ++i) worst_b = std::max(worst_b, std::abs(parts.pull[i] + parts.push[i] - g[i]));
  }
  // (c) analytic DR gradient = autodiff of 1/2 (<z,p> - 1)^2
  double worst_c = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const auto zv = oracle::random_unit_rows(1, 8, rng)[0], pv = oracle::random_unit_rows(1, 8, rng)[0];
    Tape t;
    const Tensor leaf = t.leaf(Tensor::matrix(1, 8, zv));
    const auto g = t.backward(dr_loss(t, leaf, Tensor::matrix(1, 8, pv))).of(leaf);
    const auto a = dr_grad_analytic(zv, pv);
    for (std::size_t i = 0; i < 8; ++i) worst_c = std::max(worst_c, std::abs(a[i] - g[i]));
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {nonzero == 0 && empty_anchors > 0 && worst_b <= 1e-8 && worst_c <= 1e-10 && secs < 5.0,
          fmt("(a) %.0f of %.0f positive-free anchors nonzero; (b) max |pull+push-grad| %.2e (1e-8); ",
              static_cast<double>(nonzero), static_cast<double>(empty_anchors), worst_b) +
              fmt("(c) max |analytic-autodiff| %.2e (1e-10); %.3fs (< 5s)", worst_c, secs)};
}

Outcome calibration_metrics() {
  const std::vector<Prediction> fixture = {{0.3, false}, {0.4, true}, {0.8, true}, {0.9, false}};
  const double e = ece(fixture, 2), o = oe(fixture, 2);
  const bool fixture_ok = std::abs(e - 0.25) <= 1e-12 && std::abs(o - 0.14875) <= 1e-12;

  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> u(0, 1);
  std::size_t violations = 0;
  double worst_mean = 0.0;
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t M = 1 + trial % 20;
    std::vector<std::vector<Prediction>> tasks(1 + trial % 5);
    std::vector<double> eces, oes;
    for (auto& task : tasks) {
      const double skew = u(rng);
      task.resize(1 + static_cast<std::size_t>(u(rng) * 60));
      for (auto& p : task) p = {u(rng), u(rng) < skew};
      eces.push_back(ece(task, M));
      oes.push_back(oe(task, M));
      violations += !(0.0 <= oes.back() && oes.back() <= eces.back() && eces.back() <= 1.0);
    }
    const auto s = aece_aoe(tasks, M);
    double me = 0.0, mo = 0.0;
    for (std::size_t k = 0; k < tasks.size(); ++k) {
      me += eces[k] / static_cast<double>(tasks.size());
      mo += oes[k] / static_cast<double>(tasks.size());
    }
    worst_mean = std::max({worst_mean, std::abs(s.aece - me), std::abs(s.aoe - mo)});
  }
  return {fixture_ok && violations == 0 && worst_mean <= 1e-12,
          fmt("fixture ECE %.12f (0.25), OE %.12f (0.148750), tol 1e-12; ", e, o) +
              fmt("OE <= ECE violated in %.0f random sets; max |AECE/AOE - task mean| %.1e",
                  static_cast<double>(violations), worst_mean)};
}

Outcome reservoir() {
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t capacity = 10, stream = 1000, trials = 20000;
  std::vector<double> counts(stream, 0.0);
  Rng rng(make_stream(17, kStreamBuffer));
  Dataset items(stream);
  for (std::size_t i = 0; i < stream; ++i) items[i] = {{}, static_cast<int>(i)};
  for (std::size_t t = 0; t < trials; ++t) {
    ReplayBuffer b(capacity);
    for (const auto& s : items) b.offer(s, rng);
    for (const auto& s : b.items()) counts[static_cast<std::size_t>(s.label)] += 1.0;
  }
  const double p = static_cast<double>(capacity) / stream;
  const double expected = p * trials;
  const double sigma = std::sqrt(trials * p * (1 - p));
  // Each item's frequency is tested at the 3-sigma level after a Bonferroni
  // correction over the 1000 items; decile blocks of the stream at plain 3 sigma.
  const double per_item_alpha = 2.0 * (1.0 - boost::math::cdf(boost::math::normal(), 3.0));
  const double z_crit = boost::math::quantile(boost::math::normal(), 1.0 - per_item_alpha / (2.0 * stream));
  double max_z = 0.0, chi2 = 0.0, max_block_z = 0.0;
  for (double c : counts) {
    max_z = std::max(max_z, std::abs(c - expected) / sigma);
    chi2 += (c - expected) * (c - expected) / expected;
  }
  const std::size_t block = stream / 10;
  for (std::size_t b = 0; b < 10; ++b) {
    double s = 0.0;
    for (std::size_t i = b * block; i < (b + 1) * block; ++i) s += counts[i];
    const double freq = s / (block * static_cast<double>(trials));
    max_block_z = std::max(max_block_z, std::abs(freq - p) / (std::sqrt(p * (1 - p) / trials) / std::sqrt(block)));
  }
  const double pvalue = 1.0 - boost::math::cdf(boost::math::chi_squared(static_cast<double>(stream - 1)), chi2);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {max_z <= z_crit && max_block_z <= 3.0 && pvalue > 0.001 && secs < 20.0,
          fmt("cap 10, stream 1000, 20000 trials: max item |z| %.2f (<= %.2f, 3-sigma family-wise), ", max_z, z_crit) +
              fmt("max decile |z| %.2f (<= 3), chi-square p %.4f (> 0.001), %.2fs (< 20s)", max_block_z, pvalue, secs)};
}

Outcome hsd_schedule() {
  std::mt19937_64 rng(19);
  std::size_t mismatches = 0, checked = 0;
  for (int E : {10, 30, 100}) {
    for (int e0 = 0; e0 <= E; e0 += std::max(1, E / 10)) {
      DistillConfig cfg;
      cfg.e0 = e0;
      cfg.epochs_total = E;
      const Tensor cur = to_tensor(oracle::random_unit_rows(8, 8, rng));
      const Tensor past = to_tensor(oracle::random_unit_rows(8, 8, rng));
      const Tensor protos = to_tensor(oracle::random_unit_rows(6, 8, rng));
      for (int e = 0; e <= e0; ++e) {
        Tape t;
        const Tensor ird = ird_loss(t, cur, past, 0.2, 0.01);
        Tape fresh;
        const Tensor ird_again = ird_loss(fresh, cur, past, 0.2, 0.01);
        const Tensor h = hsd_loss(t, ird, sprd_loss(t, cur, past, protos, 0.2, 0.1), e, cfg);
        ++checked;
        mismatches += !h.bitwise_equal(ird_again);
      }
    }
  }
  DistillConfig mid;
  mid.e0 = 10;
  mid.epochs_total = 100;
  const double xi = hsd_blend_weight(60, mid);
  return {mismatches == 0 && xi == 0.5,
          fmt("e <= e0: %.0f of %.0f HSD values differ bitwise from IRD; xi(e0=10, E=100, e=60) = %.17g (exactly 0.5)",
              static_cast<double>(mismatches), static_cast<double>(checked), xi)};
}

struct TrendResult {
  Outcome outcome;
  std::vector<RunRecord> slerp_runs;
};

ExperimentConfig desk_config() {
  return parse_config(std::string(NCCL_LAB_SOURCE_DIR) + "/configs/ta_nccl_samix.ini");
}

TrendResult end_to_end_trend() {
  const auto t0 = std::chrono::steady_clock::now();
  const ExperimentConfig base = desk_config();
  struct Arm {
    const char* name;
    bool mix;
    InterpMode interp;
    double aa = 0, aece = 0, aoe = 0;
  };
  std::vector<Arm> arms = {{"no-mix", false, InterpMode::Slerp}, {"slerp", true, InterpMode::Slerp},
                           {"linear", true, InterpMode::Linear}};
  TrendResult out;
  const int seeds = 5;
  for (auto& arm : arms)
    for (int s = 0; s < seeds; ++s) {
      ExperimentConfig c = base;
      c.method.mix.enabled = arm.mix;
      c.method.mix.interp = arm.interp;
      c.seed = static_cast<std::uint64_t>(s);
      const auto rec = run_experiment(c);
      arm.aa += rec.aa_class_il / seeds;
      arm.aece += rec.aece / seeds;
      arm.aoe += rec.aoe / seeds;
      if (arm.mix && arm.interp == InterpMode::Slerp) out.slerp_runs.push_back(rec);
    }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const Arm &none = arms[0], &sl = arms[1], &li = arms[2];
  const bool ok = sl.aa >= none.aa && sl.aa >= li.aa && sl.aece <= li.aece && sl.aoe <= li.aoe && secs < 300.0;
  out.outcome = {ok, fmt("5 seeds, mean AA: slerp %.2f vs no-mix %.2f vs linear %.2f; ", sl.aa, none.aa, li.aa) +
                         fmt("AECE slerp %.4f vs linear %.4f; AOE slerp %.4f vs linear %.4f; ", sl.aece, li.aece, sl.aoe,
                             li.aoe) +
                         fmt("%.1fs (< 300s)", secs)};
  return out;
}

Outcome determinism(const RunRecord* first) {
  ExperimentConfig c = desk_config();
  c.seed = 0;
  const RunRecord a = first ? *first : run_experiment(c);
  const RunRecord b = run_experiment(a.config);
  const std::string ja = metrics_json(a).dump(2), jb = metrics_json(b).dump(2);
  return {ja == jb, fmt("metrics.json for seed 0 rerun: %.0f bytes, ", static_cast<double>(ja.size())) +
                        (ja == jb ? "bitwise identical" : "DIFFERS")};
}

}  // namespace

int main() {
  int failures = 0;
  auto report = [&](const char* name, const Outcome& o) {
    std::printf("%s  %-22s %s\n", o.pass ? "PASS" : "FAIL", name, o.detail.c_str());
    std::fflush(stdout);
    failures += !o.pass;
  };
  auto guarded = [&](const char* name, const std::function<Outcome()>& f) {
    try {
      report(name, f());
    } catch (const std::exception& e) {
      report(name, {false, std::string("threw: ") + e.what()});
    }
  };
  guarded("etf-geometry", etf_geometry);
  guarded("slerp-vs-lerp", slerp_vs_lerp);
  guarded("gradient-oracle", gradient_oracle);
  guarded("analytic-claims", analytic_claims);
  guarded("calibration-metrics", calibration_metrics);
  guarded("reservoir", reservoir);
  guarded("hsd-schedule", hsd_schedule);
  std::vector<RunRecord> slerp_runs;
  guarded("end-to-end-trend", [&] {
    auto r = end_to_end_trend();
    slerp_runs = std::move(r.slerp_runs);
    return r.outcome;
  });
  guarded("determinism", [&] { return determinism(slerp_runs.empty() ? nullptr : &slerp_runs.front()); });
  std::printf("%d of 9 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
