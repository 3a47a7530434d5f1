// SPDX-License-Identifier: Apache-2.0
//
// Fixed simplex-ETF class prototypes and interpolation on the unit sphere.
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "nccl_lab/autodiff.hpp"
#include "nccl_lab/error.hpp"

namespace nccl_lab {

namespace detail {

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

}  // namespace detail

// K unit vectors in R^d; row k is the prototype of global class k.
class PrototypeSet {
 public:
  PrototypeSet() = default;
  PrototypeSet(std::size_t num_classes, std::size_t dim, std::vector<double> rows)
      : k_(num_classes), d_(dim), rows_(std::move(rows)) {
    if (rows_.size() != k_ * d_) throw ShapeError("PrototypeSet: expected K*d values");
  }

  std::size_t num_classes() const { return k_; }
  std::size_t dim() const { return d_; }
  std::span<const double> operator[](std::size_t k) const {
    if (k >= k_) throw Error("PrototypeSet: class " + std::to_string(k) + " has no prototype");
    return std::span<const double>(rows_).subspan(k * d_, d_);
  }
  std::span<const double> data() const { return rows_; }

  // Rows p_{c} for each class c in `classes`, as a [n x d] tensor.
  ad::Tensor gather(std::span<const int> classes) const {
    std::vector<double> out;
    out.reserve(classes.size() * d_);
    for (int c : classes) {
      auto p = (*this)[static_cast<std::size_t>(c)];
      out.insert(out.end(), p.begin(), p.end());
    }
    return ad::Tensor::matrix(classes.size(), d_, std::move(out));
  }

  bool operator==(const PrototypeSet&) const = default;

 private:
  std::size_t k_ = 0;
  std::size_t d_ = 0;
  std::vector<double> rows_;
};

// Q = sqrt(K/(K-1)) U (I - 11^T/K) with U an orthonormal d x K basis obtained by
// Gram-Schmidt on a seeded Gaussian draw.
inline PrototypeSet build_etf(std::size_t num_classes, std::size_t dim, std::uint64_t seed) {
  if (num_classes < 2) throw GeometryError("build_etf: need at least 2 classes, got " + std::to_string(num_classes));
  if (num_classes > dim)
    throw GeometryError("build_etf: K=" + std::to_string(num_classes) + " exceeds dimension d=" + std::to_string(dim));
  const std::size_t K = num_classes, d = dim;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  // basis[k] is column k of U.
  std::vector<std::vector<double>> basis(K, std::vector<double>(d));
  for (auto& col : basis)
    for (auto& v : col) v = normal(rng);
  for (std::size_t k = 0; k < K; ++k) {
    auto& u = basis[k];
    // Two passes of modified Gram-Schmidt keep U^T U = I to machine precision.
    for (int pass = 0; pass < 2; ++pass)
      for (std::size_t j = 0; j < k; ++j) {
        const double c = detail::dot(u, basis[j]);
        for (std::size_t i = 0; i < d; ++i) u[i] -= c * basis[j][i];
      }
    const double n = detail::norm(u);
    if (!(n > 1e-12)) throw GeometryError("build_etf: degenerate random basis");
    for (auto& v : u) v /= n;
  }

  std::vector<double> mean(d, 0.0);
  for (const auto& col : basis)
    for (std::size_t i = 0; i < d; ++i) mean[i] += col[i] / static_cast<double>(K);
  const double scale = std::sqrt(static_cast<double>(K) / static_cast<double>(K - 1));
  std::vector<double> rows(K * d);
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t i = 0; i < d; ++i) rows[k * d + i] = scale * (basis[k][i] - mean[i]);
    // Renormalize away the last ulp of drift so ||p_k|| = 1 holds tightly.
    std::span<double> p(rows.data() + k * d, d);
    const double n = detail::norm(p);
    for (auto& v : p) v /= n;
  }
  return PrototypeSet(K, d, std::move(rows));
}

enum class InterpMode { Slerp, Linear };

struct MixAngles {
  double omega = 0.0;
  double gamma_a = 1.0;
  double gamma_b = 0.0;
};

inline constexpr double kCoincidentAngle = 1e-7;

namespace detail {

inline void require_unit(std::span<const double> p, const char* who) {
  if (std::abs(norm(p) - 1.0) > 1e-6) throw GeometryError(std::string(who) + ": input is not unit-norm");
}

// Angle between unit vectors; the half-chord form stays accurate near 0 and pi.
inline double angle_between(std::span<const double> a, std::span<const double> b) {
  double diff = 0.0, sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    sum += (a[i] + b[i]) * (a[i] + b[i]);
  }
  return 2.0 * std::atan2(std::sqrt(diff), std::sqrt(sum));
}

}  // namespace detail

inline MixAngles slerp_angles(std::span<const double> p_a, std::span<const double> p_b, double lambda) {
  MixAngles m;
  m.omega = detail::angle_between(p_a, p_b);
  if (m.omega < kCoincidentAngle) return m;
  if (std::numbers::pi - m.omega < kCoincidentAngle) throw GeometryError("slerp: antipodal prototypes");
  const double s = std::sin(m.omega);
  m.gamma_a = std::sin(lambda * m.omega) / s;
  m.gamma_b = std::sin((1.0 - lambda) * m.omega) / s;
  return m;
}

// gamma_a p_a + gamma_b p_b along the great circle; lambda = 1 gives p_a.
inline std::vector<double> slerp(std::span<const double> p_a, std::span<const double> p_b, double lambda) {
  if (p_a.size() != p_b.size()) throw ShapeError("slerp: dimension mismatch");
  detail::require_unit(p_a, "slerp");
  detail::require_unit(p_b, "slerp");
  const MixAngles m = slerp_angles(p_a, p_b, lambda);
  if (m.omega < kCoincidentAngle) return {p_a.begin(), p_a.end()};
  std::vector<double> out(p_a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = m.gamma_a * p_a[i] + m.gamma_b * p_b[i];
  return out;
}

// lambda p_a + (1 - lambda) p_b, deliberately left unnormalized.
inline std::vector<double> lerp(std::span<const double> p_a, std::span<const double> p_b, double lambda) {
  if (p_a.size() != p_b.size()) throw ShapeError("lerp: dimension mismatch");
  std::vector<double> out(p_a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = lambda * p_a[i] + (1.0 - lambda) * p_b[i];
  return out;
}

inline double lerp_norm_sq(double lambda, double cos_omega) {
  return lambda * lambda + (1.0 - lambda) * (1.0 - lambda) + 2.0 * lambda * (1.0 - lambda) * cos_omega;
}

// K x K Gram matrix, row-major.
inline std::vector<double> pairwise_cosine_matrix(const PrototypeSet& P) {
  const std::size_t K = P.num_classes();
  std::vector<double> g(K * K);
  for (std::size_t i = 0; i < K; ++i)
    for (std::size_t j = i; j < K; ++j) g[i * K + j] = g[j * K + i] = detail::dot(P[i], P[j]);
  return g;
}

// One row per prototype: class,v0,...,v{d-1}.
inline void write_prototypes_csv(const PrototypeSet& P, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path);
  os << "class";
  for (std::size_t i = 0; i < P.dim(); ++i) os << ",v" << i;
  os << '\n' << std::setprecision(17);
  for (std::size_t k = 0; k < P.num_classes(); ++k) {
    os << k;
    for (double v : P[k]) os << ',' << v;
    os << '\n';
  }
}

inline PrototypeSet read_prototypes_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot read " + path);
  std::string line;
  std::getline(is, line);
  std::size_t d = 0;
  for (char c : line) d += c == ',';
  std::vector<double> rows;
  std::size_t k = 0;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::getline(ss, cell, ',');
    if (std::stoul(cell) != k) throw Error(path + ": prototype rows out of order at row " + std::to_string(k + 1));
    std::size_t n = 0;
    while (std::getline(ss, cell, ',')) {
      rows.push_back(std::stod(cell));
      ++n;
    }
    if (n != d) throw Error(path + ": row " + std::to_string(k + 1) + " has " + std::to_string(n) + " values");
    ++k;
  }
  return PrototypeSet(k, d, std::move(rows));
}

}  // namespace nccl_lab
