// SPDX-License-Identifier: Apache-2.0
//
// Minimal reverse-mode differentiation over dense row-major f64 arrays.
//
// A Tensor is a plain value. It becomes part of a computation graph only when
// it is registered on a Tape (Tape::leaf) or produced by a Tape op from at least
// one tracked input. Ops whose inputs are all untracked are evaluated eagerly
// and recorded nowhere, which is how frozen networks run without a graph.
#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "nccl_lab/error.hpp"

namespace nccl_lab::ad {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

struct NodeId {
  std::uint64_t tape = 0;
  std::size_t index = 0;
};

class Tape;

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), values_(std::move(values)) {
    if (shape_numel(shape_) != values_.size())
      throw ShapeError("tensor: shape " + shape_str(shape_) + " holds " + std::to_string(shape_numel(shape_)) +
                       " values, got " + std::to_string(values_.size()));
  }

  static Tensor zeros(Shape shape) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0));
  }
  static Tensor filled(Shape shape, double v) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v));
  }
  static Tensor scalar(double v) { return Tensor({}, {v}); }
  static Tensor vector(std::vector<double> v) {
    const auto n = v.size();
    return Tensor({n}, std::move(v));
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
    return Tensor({rows, cols}, std::move(v));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return values_.size(); }
  std::size_t rows() const {
    require_rank2("rows");
    return shape_[0];
  }
  std::size_t cols() const {
    require_rank2("cols");
    return shape_[1];
  }

  std::span<const double> values() const { return values_; }
  // Mutable access severs the tensor from any tape it was recorded on.
  std::span<double> mutable_values() {
    node_.reset();
    return values_;
  }
  double operator[](std::size_t i) const { return values_[i]; }
  double at(std::size_t r, std::size_t c) const { return values_[r * cols() + c]; }
  std::span<const double> row(std::size_t r) const {
    const auto c = cols();
    return std::span<const double>(values_).subspan(r * c, c);
  }
  double item() const {
    if (values_.size() != 1) throw ShapeError("item: tensor " + shape_str(shape_) + " is not a scalar");
    return values_[0];
  }

  const std::optional<NodeId>& node() const { return node_; }
  Tensor detached() const {
    Tensor t = *this;
    t.node_.reset();
    return t;
  }

  bool bitwise_equal(const Tensor& other) const {
    return shape_ == other.shape_ &&
           std::equal(values_.begin(), values_.end(), other.values_.begin(), other.values_.end(),
                      [](double a, double b) { return std::memcmp(&a, &b, sizeof(double)) == 0; });
  }

 private:
  friend class Tape;

  void require_rank2(const char* what) const {
    if (shape_.size() != 2) throw ShapeError(std::string(what) + ": expected rank-2 tensor, got " + shape_str(shape_));
  }

  Shape shape_;
  std::vector<double> values_;
  std::optional<NodeId> node_;
};

enum class Op : std::uint8_t {
  Leaf,
  Constant,
  MatMul,
  Transpose,
  Add,
  Sub,
  Mul,
  MulScalarTensor,
  Scale,
  AddScalar,
  Relu,
  Exp,
  Log,
  Pow,
  Sum,
  RowSum,
  Inner,
  L2Normalize,
  AddRow,
  BroadcastCols,
  LogSumExpRows,
  ClampMax,
  ConcatRows,
  ConcatCols,
};

inline std::string_view op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Constant: return "constant";
    case Op::MatMul: return "matmul";
    case Op::Transpose: return "transpose";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::MulScalarTensor: return "mul";
    case Op::Scale: return "scale";
    case Op::AddScalar: return "add_scalar";
    case Op::Relu: return "relu";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Pow: return "pow";
    case Op::Sum: return "sum";
    case Op::RowSum: return "row_sum";
    case Op::Inner: return "inner";
    case Op::L2Normalize: return "l2_normalize";
    case Op::AddRow: return "add_row";
    case Op::BroadcastCols: return "broadcast_cols";
    case Op::LogSumExpRows: return "logsumexp_rows";
    case Op::ClampMax: return "clamp_max";
    case Op::ConcatRows: return "concat_rows";
    case Op::ConcatCols: return "concat_cols";
  }
  return "?";
}

class Gradients {
 public:
  // Gradient of the loss with respect to `t`; zeros when `t` is off the loss path.
  Tensor of(const Tensor& t) const {
    if (!t.node() || t.node()->tape != tape_ || t.node()->index >= grads_.size() || grads_[t.node()->index].empty())
      return Tensor::zeros(t.shape());
    return Tensor(t.shape(), grads_[t.node()->index]);
  }

 private:
  friend class Tape;
  std::uint64_t tape_ = 0;
  std::vector<std::vector<double>> grads_;
};

class Tape {
 public:
  Tape() : id_(next_id()) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  std::size_t size() const { return nodes_.size(); }

  // Registers a differentiable input.
  Tensor leaf(const Tensor& value) {
    Tensor out = value.detached();
    Node n;
    n.op = Op::Leaf;
    n.shape = out.shape_;
    n.value = out.values_;
    n.requires_grad = true;
    out.node_ = NodeId{id_, push(std::move(n))};
    return out;
  }

  Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape_[1] != b.shape_[0])
      throw shape_error(Op::MatMul, a, b);
    const std::size_t m = a.shape_[0], k = a.shape_[1], n = b.shape_[1];
    std::vector<double> out(m * n, 0.0);
    const double* pa = a.values_.data();
    const double* pb = b.values_.data();
    for (std::size_t i = 0; i < m; ++i) {
      double* orow = out.data() + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = pa[i * k + p];
        const double* brow = pb + p * n;
        for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
      }
    }
    return emit(Op::MatMul, {&a, &b}, {m, n}, std::move(out));
  }

  Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw shape_error(Op::Transpose, a);
    const std::size_t m = a.shape_[0], n = a.shape_[1];
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.values_[i * n + j];
    return emit(Op::Transpose, {&a}, {n, m}, std::move(out));
  }

  Tensor add(const Tensor& a, const Tensor& b) { return binary(Op::Add, a, b, [](double x, double y) { return x + y; }); }
  Tensor sub(const Tensor& a, const Tensor& b) { return binary(Op::Sub, a, b, [](double x, double y) { return x - y; }); }

  // Elementwise product. A one-element operand acts as a scalar factor.
  Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape_ != b.shape_ && (a.numel() == 1 || b.numel() == 1)) {
      const Tensor& s = a.numel() == 1 ? a : b;
      const Tensor& t = a.numel() == 1 ? b : a;
      std::vector<double> out(t.values_);
      const double sv = s.values_[0];
      for (auto& v : out) v *= sv;
      return emit(Op::MulScalarTensor, {&s, &t}, t.shape_, std::move(out));
    }
    return binary(Op::Mul, a, b, [](double x, double y) { return x * y; });
  }

  Tensor scale(const Tensor& a, double s) {
    std::vector<double> out(a.values_);
    for (auto& v : out) v *= s;
    return emit(Op::Scale, {&a}, a.shape_, std::move(out), {}, s);
  }

  Tensor add_scalar(const Tensor& a, double s) {
    std::vector<double> out(a.values_);
    for (auto& v : out) v += s;
    return emit(Op::AddScalar, {&a}, a.shape_, std::move(out), {}, s);
  }

  Tensor relu(const Tensor& a) {
    std::vector<double> out(a.values_);
    for (auto& v : out) v = v > 0.0 ? v : 0.0;
    return emit(Op::Relu, {&a}, a.shape_, std::move(out));
  }

  Tensor exp(const Tensor& a) {
    std::vector<double> out(a.values_);
    for (auto& v : out) v = std::exp(v);
    return emit(Op::Exp, {&a}, a.shape_, std::move(out));
  }

  Tensor log(const Tensor& a) {
    std::vector<double> out(a.values_);
    for (auto& v : out) {
      if (!(v > 0.0)) throw NumericError("log: non-positive input " + std::to_string(v));
      v = std::log(v);
    }
    return emit(Op::Log, {&a}, a.shape_, std::move(out));
  }

  Tensor pow(const Tensor& a, double p) {
    std::vector<double> out(a.values_);
    for (auto& v : out) {
      if (v < 0.0) throw NumericError("pow: negative base " + std::to_string(v));
      v = p == 0.0 ? 1.0 : std::pow(v, p);
    }
    return emit(Op::Pow, {&a}, a.shape_, std::move(out), {}, p);
  }

  Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.values_) s += v;
    return emit(Op::Sum, {&a}, {}, {s});
  }

  // [m x n] -> [m x 1]
  Tensor row_sum(const Tensor& a) {
    if (a.rank() != 2) throw shape_error(Op::RowSum, a);
    const std::size_t m = a.shape_[0], n = a.shape_[1];
    std::vector<double> out(m, 0.0);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out[i] += a.values_[i * n + j];
    return emit(Op::RowSum, {&a}, {m, 1}, std::move(out));
  }

  Tensor inner(const Tensor& a, const Tensor& b) {
    if (a.shape_ != b.shape_) throw shape_error(Op::Inner, a, b);
    double s = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) s += a.values_[i] * b.values_[i];
    return emit(Op::Inner, {&a, &b}, {}, {s});
  }

  // Rank 1: the vector; rank 2: each row.
  Tensor l2_normalize(const Tensor& a) {
    if (a.rank() != 1 && a.rank() != 2) throw shape_error(Op::L2Normalize, a);
    const std::size_t n = a.shape_.back();
    const std::size_t m = a.numel() / std::max<std::size_t>(n, 1);
    std::vector<double> out(a.values_);
    std::vector<double> norms(m);
    for (std::size_t i = 0; i < m; ++i) {
      double ss = 0.0;
      for (std::size_t j = 0; j < n; ++j) ss += out[i * n + j] * out[i * n + j];
      const double norm = std::sqrt(ss);
      if (!(norm > 0.0)) throw NumericError("l2_normalize: zero-norm input at row " + std::to_string(i));
      norms[i] = norm;
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= norm;
    }
    return emit(Op::L2Normalize, {&a}, a.shape_, std::move(out), std::move(norms));
  }

  // [m x n] + [1 x n] (or [n]) added to every row.
  Tensor add_row(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.numel() != a.shape_[1] || (b.rank() == 2 && b.shape_[0] != 1) || b.rank() > 2)
      throw shape_error(Op::AddRow, a, b);
    const std::size_t m = a.shape_[0], n = a.shape_[1];
    std::vector<double> out(a.values_);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += b.values_[j];
    return emit(Op::AddRow, {&a, &b}, a.shape_, std::move(out));
  }

  // [m x 1] -> [m x n], each row filled with its single value.
  Tensor broadcast_cols(const Tensor& v, std::size_t n) {
    if (v.rank() != 2 || v.shape_[1] != 1) throw shape_error(Op::BroadcastCols, v);
    const std::size_t m = v.shape_[0];
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i) std::fill_n(out.begin() + static_cast<std::ptrdiff_t>(i * n), n, v.values_[i]);
    return emit(Op::BroadcastCols, {&v}, {m, n}, std::move(out));
  }

  // Row-wise log(sum_j mask_ij * exp(a_ij)). The mask is a constant 0/1 array;
  // every row must keep at least one entry.
  Tensor logsumexp_rows(const Tensor& a, const Tensor* mask = nullptr) {
    if (a.rank() != 2) throw shape_error(Op::LogSumExpRows, a);
    if (mask && mask->shape_ != a.shape_) throw shape_error(Op::LogSumExpRows, a, *mask);
    const std::size_t m = a.shape_[0], n = a.shape_[1];
    std::vector<double> out(m);
    std::vector<double> weights(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < n; ++j)
        if (!mask || mask->values_[i * n + j] != 0.0) mx = std::max(mx, a.values_[i * n + j]);
      if (!std::isfinite(mx)) throw NumericError("logsumexp_rows: row " + std::to_string(i) + " has no admissible entry");
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (mask && mask->values_[i * n + j] == 0.0) continue;
        const double e = std::exp(a.values_[i * n + j] - mx);
        weights[i * n + j] = e;
        s += e;
      }
      for (std::size_t j = 0; j < n; ++j) weights[i * n + j] /= s;
      out[i] = mx + std::log(s);
    }
    return emit(Op::LogSumExpRows, {&a}, {m, 1}, std::move(out), std::move(weights));
  }

  Tensor clamp_max(const Tensor& a, double c) {
    std::vector<double> out(a.values_);
    for (auto& v : out) v = std::min(v, c);
    return emit(Op::ClampMax, {&a}, a.shape_, std::move(out), {}, c);
  }

  Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    const std::size_t n = parts.front().rank() == 2 ? parts.front().shape_[1] : 0;
    std::size_t m = 0;
    std::vector<const Tensor*> ins;
    for (const auto& p : parts) {
      if (p.rank() != 2 || p.shape_[1] != n) throw shape_error(Op::ConcatRows, parts.front(), p);
      m += p.shape_[0];
      ins.push_back(&p);
    }
    std::vector<double> out;
    out.reserve(m * n);
    for (const auto& p : parts) out.insert(out.end(), p.values_.begin(), p.values_.end());
    return emit(Op::ConcatRows, ins, {m, n}, std::move(out));
  }

  Tensor concat_cols(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape_[0] != b.shape_[0]) throw shape_error(Op::ConcatCols, a, b);
    const std::size_t m = a.shape_[0], na = a.shape_[1], nb = b.shape_[1];
    std::vector<double> out(m * (na + nb));
    for (std::size_t i = 0; i < m; ++i) {
      std::copy_n(a.values_.begin() + static_cast<std::ptrdiff_t>(i * na), na,
                  out.begin() + static_cast<std::ptrdiff_t>(i * (na + nb)));
      std::copy_n(b.values_.begin() + static_cast<std::ptrdiff_t>(i * nb), nb,
                  out.begin() + static_cast<std::ptrdiff_t>(i * (na + nb) + na));
    }
    return emit(Op::ConcatCols, {&a, &b}, {m, na + nb}, std::move(out));
  }

  // Convenience compositions.
  Tensor neg(const Tensor& a) { return scale(a, -1.0); }
  Tensor row_inner(const Tensor& a, const Tensor& b) { return row_sum(mul(a, b)); }

  Gradients backward(const Tensor& loss) const {
    if (loss.numel() != 1)
      throw ShapeError("backward: loss must be a scalar, got " + shape_str(loss.shape_));
    Gradients g;
    g.tape_ = id_;
    g.grads_.resize(nodes_.size());
    if (!loss.node_ || loss.node_->tape != id_) return g;
    g.grads_[loss.node_->index] = {1.0};
    for (std::size_t idx = loss.node_->index + 1; idx-- > 0;) {
      const Node& n = nodes_[idx];
      if (g.grads_[idx].empty() || !n.requires_grad) continue;
      backprop(n, g.grads_[idx], g.grads_);
    }
    return g;
  }

 private:
  struct Node {
    Op op = Op::Constant;
    std::vector<std::size_t> inputs;
    Shape shape;
    std::vector<double> value;
    std::vector<double> aux;
    double param = 0.0;
    bool requires_grad = false;
  };

  static std::uint64_t next_id() {
    static std::atomic<std::uint64_t> counter{1};
    return counter.fetch_add(1);
  }

  static ShapeError shape_error(Op op, const Tensor& a) {
    return ShapeError(std::string(op_name(op)) + ": incompatible shape " + shape_str(a.shape_));
  }
  static ShapeError shape_error(Op op, const Tensor& a, const Tensor& b) {
    return ShapeError(std::string(op_name(op)) + ": incompatible shapes " + shape_str(a.shape_) + " and " +
                      shape_str(b.shape_));
  }

  template <class F>
  Tensor binary(Op op, const Tensor& a, const Tensor& b, F f) {
    if (a.shape_ != b.shape_) throw shape_error(op, a, b);
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a.values_[i], b.values_[i]);
    return emit(op, {&a, &b}, a.shape_, std::move(out));
  }

  std::size_t push(Node n) {
    nodes_.push_back(std::move(n));
    return nodes_.size() - 1;
  }

  bool tracked(const Tensor& t) const {
    if (!t.node_) return false;
    if (t.node_->tape != id_) throw Error("tensor recorded on a different tape");
    return nodes_[t.node_->index].requires_grad;
  }

  std::size_t input_index(const Tensor& t) {
    if (t.node_ && t.node_->tape == id_) return t.node_->index;
    Node n;
    n.op = Op::Constant;
    n.shape = t.shape_;
    n.value = t.values_;
    return push(std::move(n));
  }

  Tensor emit(Op op, std::vector<const Tensor*> inputs, Shape shape, std::vector<double> out,
              std::vector<double> aux = {}, double param = 0.0) {
    for (std::size_t i = 0; i < out.size(); ++i)
      if (!std::isfinite(out[i]))
        throw NumericError(std::string(op_name(op)) + ": non-finite output at index " + std::to_string(i));
    bool any = false;
    for (const Tensor* t : inputs) any = tracked(*t) || any;
    Tensor result(std::move(shape), std::move(out));
    if (!any) return result;
    Node n;
    n.op = op;
    n.shape = result.shape_;
    n.value = result.values_;
    n.aux = std::move(aux);
    n.param = param;
    n.requires_grad = true;
    for (const Tensor* t : inputs) n.inputs.push_back(input_index(*t));
    result.node_ = NodeId{id_, push(std::move(n))};
    return result;
  }

  static std::vector<double>& acc(std::vector<std::vector<double>>& grads, std::size_t idx, std::size_t n) {
    auto& g = grads[idx];
    if (g.empty()) g.assign(n, 0.0);
    return g;
  }

  void backprop(const Node& n, const std::vector<double>& gy, std::vector<std::vector<double>>& grads) const {
    auto wants = [&](std::size_t k) { return nodes_[n.inputs[k]].requires_grad; };
    auto input = [&](std::size_t k) -> const Node& { return nodes_[n.inputs[k]]; };
    switch (n.op) {
      case Op::Leaf:
      case Op::Constant:
        return;
      case Op::MatMul: {
        const Node& a = input(0);
        const Node& b = input(1);
        const std::size_t m = a.shape[0], k = a.shape[1], nn = b.shape[1];
        if (wants(0)) {
          auto& ga = acc(grads, n.inputs[0], m * k);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              double s = 0.0;
              for (std::size_t j = 0; j < nn; ++j) s += gy[i * nn + j] * b.value[p * nn + j];
              ga[i * k + p] += s;
            }
        }
        if (wants(1)) {
          auto& gb = acc(grads, n.inputs[1], k * nn);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              const double av = a.value[i * k + p];
              for (std::size_t j = 0; j < nn; ++j) gb[p * nn + j] += av * gy[i * nn + j];
            }
        }
        return;
      }
      case Op::Transpose: {
        const std::size_t m = input(0).shape[0], nn = input(0).shape[1];
        auto& ga = acc(grads, n.inputs[0], m * nn);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < nn; ++j) ga[i * nn + j] += gy[j * m + i];
        return;
      }
      case Op::Add:
      case Op::Sub: {
        const double sb = n.op == Op::Add ? 1.0 : -1.0;
        if (wants(0)) {
          auto& ga = acc(grads, n.inputs[0], gy.size());
          for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
        }
        if (wants(1)) {
          auto& gb = acc(grads, n.inputs[1], gy.size());
          for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += sb * gy[i];
        }
        return;
      }
      case Op::Mul: {
        if (wants(0)) {
          auto& ga = acc(grads, n.inputs[0], gy.size());
          for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * input(1).value[i];
        }
        if (wants(1)) {
          auto& gb = acc(grads, n.inputs[1], gy.size());
          for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i] * input(0).value[i];
        }
        return;
      }
      case Op::MulScalarTensor: {
        const double sv = input(0).value[0];
        if (wants(0)) {
          double s = 0.0;
          for (std::size_t i = 0; i < gy.size(); ++i) s += gy[i] * input(1).value[i];
          acc(grads, n.inputs[0], 1)[0] += s;
        }
        if (wants(1)) {
          auto& gt = acc(grads, n.inputs[1], gy.size());
          for (std::size_t i = 0; i < gy.size(); ++i) gt[i] += gy[i] * sv;
        }
        return;
      }
      case Op::Scale: {
        auto& ga = acc(grads, n.inputs[0], gy.size());
        for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * n.param;
        return;
      }
      case Op::AddScalar: {
        auto& ga = acc(grads, n.inputs[0], gy.size());
        for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
        return;
      }
      case Op::Relu: {
        auto& ga = acc(grads, n.inputs[0], gy.size());
        for (std::size_t i = 0; i < gy.size(); ++i)
          if (n.value[i] > 0.0) ga[i] += gy[i];
        return;
      }
      case Op::Exp: {
        auto& ga = acc(grads, n.inputs[0], gy.size());
        for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * n.value[i];
        return;
      }
      case Op::Log: {
        auto& ga = acc(grads, n.inputs[0], gy.size());
        for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] / input(0).value[i];
        return;
      }
      case Op::Pow: {
        if (n.param == 0.0) return;
        auto& ga = acc(grads, n.inputs[0], gy.size());
        for (std::size_t i = 0; i < gy.size(); ++i)
          ga[i] += gy[i] * n.param * std::pow(input(0).value[i], n.param - 1.0);
        return;
      }
      case Op::Sum: {
        auto& ga = acc(grads, n.inputs[0], input(0).value.size());
        for (auto& v : ga) v += gy[0];
        return;
      }
      case Op::RowSum: {
        const std::size_t m = input(0).shape[0], nn = input(0).shape[1];
        auto& ga = acc(grads, n.inputs[0], m * nn);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < nn; ++j) ga[i * nn + j] += gy[i];
        return;
      }
      case Op::Inner: {
        const std::size_t sz = input(0).value.size();
        if (wants(0)) {
          auto& ga = acc(grads, n.inputs[0], sz);
          for (std::size_t i = 0; i < sz; ++i) ga[i] += gy[0] * input(1).value[i];
        }
        if (wants(1)) {
          auto& gb = acc(grads, n.inputs[1], sz);
          for (std::size_t i = 0; i < sz; ++i) gb[i] += gy[0] * input(0).value[i];
        }
        return;
      }
      case Op::L2Normalize: {
        const std::size_t nn = n.shape.back();
        const std::size_t m = n.aux.size();
        auto& ga = acc(grads, n.inputs[0], m * nn);
        for (std::size_t i = 0; i < m; ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < nn; ++j) dot += n.value[i * nn + j] * gy[i * nn + j];
          for (std::size_t j = 0; j < nn; ++j)
            ga[i * nn + j] += (gy[i * nn + j] - n.value[i * nn + j] * dot) / n.aux[i];
        }
        return;
      }
      case Op::AddRow: {
        const std::size_t m = n.shape[0], nn = n.shape[1];
        if (wants(0)) {
          auto& ga = acc(grads, n.inputs[0], m * nn);
          for (std::size_t i = 0; i < m * nn; ++i) ga[i] += gy[i];
        }
        if (wants(1)) {
          auto& gb = acc(grads, n.inputs[1], nn);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < nn; ++j) gb[j] += gy[i * nn + j];
        }
        return;
      }
      case Op::BroadcastCols: {
        const std::size_t m = n.shape[0], nn = n.shape[1];
        auto& ga = acc(grads, n.inputs[0], m);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < nn; ++j) ga[i] += gy[i * nn + j];
        return;
      }
      case Op::LogSumExpRows: {
        const std::size_t m = input(0).shape[0], nn = input(0).shape[1];
        auto& ga = acc(grads, n.inputs[0], m * nn);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < nn; ++j) ga[i * nn + j] += gy[i] * n.aux[i * nn + j];
        return;
      }
      case Op::ClampMax: {
        auto& ga = acc(grads, n.inputs[0], gy.size());
        for (std::size_t i = 0; i < gy.size(); ++i)
          if (input(0).value[i] <= n.param) ga[i] += gy[i];
        return;
      }
      case Op::ConcatRows: {
        std::size_t offset = 0;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          const std::size_t sz = input(k).value.size();
          if (wants(k)) {
            auto& gk = acc(grads, n.inputs[k], sz);
            for (std::size_t i = 0; i < sz; ++i) gk[i] += gy[offset + i];
          }
          offset += sz;
        }
        return;
      }
      case Op::ConcatCols: {
        const std::size_t m = n.shape[0], na = input(0).shape[1], nb = input(1).shape[1];
        if (wants(0)) {
          auto& ga = acc(grads, n.inputs[0], m * na);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < na; ++j) ga[i * na + j] += gy[i * (na + nb) + j];
        }
        if (wants(1)) {
          auto& gb = acc(grads, n.inputs[1], m * nb);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < nb; ++j) gb[i * nb + j] += gy[i * (na + nb) + na + j];
        }
        return;
      }
    }
  }

  std::uint64_t id_;
  std::vector<Node> nodes_;
};

using ScalarFn = std::function<Tensor(Tape&, const Tensor&)>;

// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
inline double grad_check(const ScalarFn& f, const Tensor& x, double h = 1e-5) {
  Tape tape;
  const Tensor leaf = tape.leaf(x);
  const Tensor y = f(tape, leaf);
  if (!std::isfinite(y.item())) throw NumericError("grad_check: f(x) is not finite");
  const Tensor analytic = tape.backward(y).of(leaf);

  auto eval = [&](const Tensor& at) {
    Tape t;
    const double v = f(t, t.leaf(at)).item();
    if (!std::isfinite(v)) throw NumericError("grad_check: f(x +/- h) is not finite");
    return v;
  };

  double worst = 0.0;
  Tensor probe = x.detached();
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double orig = x[i];
    probe.mutable_values()[i] = orig + h;
    const double fp = eval(probe);
    probe.mutable_values()[i] = orig - h;
    const double fm = eval(probe);
    probe.mutable_values()[i] = orig;
    const double numeric = (fp - fm) / (2.0 * h);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i])));
  }
  return worst;
}

}  // namespace nccl_lab::ad
