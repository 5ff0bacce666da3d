// Copyright 2026 The cg3d Authors
// SPDX-License-Identifier: Apache-2.0

// Dense row-major float64 tensors with a reverse-mode gradient tape.
//
// A Tensor is an immutable value. Tensors produced by operations whose inputs
// live on a Tape are themselves recorded on that tape; operations on detached
// tensors compute values only. Calling Tape::backward on a scalar root yields
// gradients for every node recorded before it.
//
//   Tape tape;
//   Tensor x = tape.leaf(Tensor::scalar(3.0));
//   Tensor y = mul(x, x);
//   Gradients g = tape.backward(y);
//   g.of(x).item();  // 6.0

#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace cg3d {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t num_elements(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

class Tape;

inline constexpr std::size_t kNoNode = std::numeric_limits<std::size_t>::max();

class Tensor {
 public:
  Tensor() : Tensor(Shape{}, std::vector<double>{0.0}) {}

  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)),
        data_(std::make_shared<const std::vector<double>>(std::move(data))) {
    for (std::size_t d : shape_) {
      if (d == 0) throw ShapeError("tensor dims must be positive, got " + to_string(shape_));
    }
    if (data_->size() != num_elements(shape_)) {
      throw ShapeError("data length " + std::to_string(data_->size()) +
                       " does not match shape " + to_string(shape_));
    }
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, {v}); }
  static Tensor full(Shape shape, double v) {
    std::size_t n = num_elements(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v));
  }
  static Tensor zeros(Shape shape) { return full(std::move(shape), 0.0); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_->size(); }
  bool is_scalar() const { return size() == 1; }

  std::span<const double> data() const { return *data_; }
  const std::vector<double>& values() const { return *data_; }
  double operator[](std::size_t i) const { return (*data_)[i]; }

  double item() const {
    if (!is_scalar()) throw ShapeError("item() on non-scalar tensor " + to_string(shape_));
    return (*data_)[0];
  }

  Tape* tape() const { return tape_; }
  std::size_t node() const { return node_; }
  bool on_tape() const { return tape_ != nullptr; }

  // Same values, no tape attachment.
  Tensor detach() const {
    Tensor t = *this;
    t.tape_ = nullptr;
    t.node_ = kNoNode;
    return t;
  }

 private:
  friend class Tape;
  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
  Tape* tape_ = nullptr;
  std::size_t node_ = kNoNode;
};

// Local backward rule. `parent_grads[k]` is the accumulation buffer for the
// k-th input, or an empty span when that input is a constant.
using BackwardFn =
    std::function<void(std::span<const double> grad_out, std::span<std::span<double>> parent_grads)>;

class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(std::vector<std::vector<double>> by_node) : by_node_(std::move(by_node)) {}

  // Gradient of the root with respect to `t`; zeros when `t` was not reached.
  Tensor of(const Tensor& t) const {
    if (t.node() < by_node_.size() && !by_node_[t.node()].empty()) {
      return Tensor(t.shape(), by_node_[t.node()]);
    }
    return Tensor::zeros(t.shape());
  }

  const std::vector<double>& raw(std::size_t node) const { return by_node_.at(node); }

 private:
  std::vector<std::vector<double>> by_node_;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t size() const { return nodes_.size(); }

  Tensor leaf(const Tensor& value) {
    Tensor t = value.detach();
    t.tape_ = this;
    t.node_ = nodes_.size();
    nodes_.push_back(Node{value.size(), {}, nullptr});
    return t;
  }

  // Appends an op node. Inputs that are not on this tape are constants.
  Tensor record(Shape shape, std::vector<double> value, std::span<const Tensor* const> inputs,
                BackwardFn backward) {
    Tensor t(std::move(shape), std::move(value));
    Node node{t.size(), {}, std::move(backward)};
    node.parents.reserve(inputs.size());
    for (const Tensor* in : inputs) {
      if (in->tape_ != nullptr && in->tape_ != this) {
        throw std::logic_error("operands recorded on different tapes");
      }
      node.parents.push_back(in->tape_ == this ? in->node_ : kNoNode);
    }
    t.tape_ = this;
    t.node_ = nodes_.size();
    nodes_.push_back(std::move(node));
    return t;
  }

  Gradients backward(const Tensor& root) const {
    if (root.tape_ != this) throw std::invalid_argument("backward root is not on this tape");
    if (!root.is_scalar()) {
      throw ShapeError("backward root must be scalar, got " + to_string(root.shape()));
    }
    return propagate(root.node_, {1.0});
  }

  // Vector-Jacobian product: gradients of <seed, output> for a tensor output.
  Gradients backward(const Tensor& output, std::span<const double> seed) const {
    if (output.tape_ != this) throw std::invalid_argument("backward output is not on this tape");
    if (seed.size() != output.size()) throw ShapeError("seed size does not match output");
    return propagate(output.node_, {seed.begin(), seed.end()});
  }

 private:
  struct Node {
    std::size_t size;
    std::vector<std::size_t> parents;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;

  Gradients propagate(std::size_t root, std::vector<double> seed) const {
    std::vector<std::vector<double>> grads(nodes_.size());
    grads[root] = std::move(seed);
    std::vector<std::span<double>> parent_spans;
    for (std::size_t i = root + 1; i-- > 0;) {
      const Node& n = nodes_[i];
      if (grads[i].empty() || !n.backward) continue;
      parent_spans.assign(n.parents.size(), std::span<double>{});
      for (std::size_t k = 0; k < n.parents.size(); ++k) {
        std::size_t p = n.parents[k];
        if (p == kNoNode) continue;
        if (grads[p].empty()) grads[p].assign(nodes_[p].size, 0.0);
        parent_spans[k] = grads[p];
      }
      n.backward(grads[i], parent_spans);
    }
    return Gradients(std::move(grads));
  }
};

namespace detail {

inline void require_finite(std::span<const double> v, const char* op) {
  for (double x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string("non-finite value produced by ") + op);
  }
}

inline Tape* common_tape(std::initializer_list<const Tensor*> inputs) {
  Tape* tape = nullptr;
  for (const Tensor* t : inputs) {
    if (!t->on_tape()) continue;
    if (tape != nullptr && tape != t->tape()) {
      throw std::logic_error("operands recorded on different tapes");
    }
    tape = t->tape();
  }
  return tape;
}

// Builds the result tensor, recording it when any input is on a tape.
inline Tensor make_result(const char* op, Shape shape, std::vector<double> value,
                          std::initializer_list<const Tensor*> inputs, BackwardFn backward) {
  require_finite(value, op);
  Tape* tape = common_tape(inputs);
  if (tape == nullptr) return Tensor(std::move(shape), std::move(value));
  std::vector<const Tensor*> in(inputs);
  return tape->record(std::move(shape), std::move(value), in, std::move(backward));
}

inline double stable_softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

inline double softplus(double x) { return detail::stable_softplus(x); }
inline double sigmoid(double x) { return detail::stable_sigmoid(x); }

enum class Unary { exp, log, softplus, sigmoid, relu, neg };
enum class Binary { add, sub, mul, div };
enum class Reduce { sum, mean, max };

inline const char* name(Unary k) {
  switch (k) {
    case Unary::exp: return "exp";
    case Unary::log: return "log";
    case Unary::softplus: return "softplus";
    case Unary::sigmoid: return "sigmoid";
    case Unary::relu: return "relu";
    case Unary::neg: return "neg";
  }
  return "?";
}

inline Tensor unary(Unary kind, const Tensor& a) {
  const std::size_t n = a.size();
  std::vector<double> out(n);
  std::span<const double> x = a.data();
  switch (kind) {
    case Unary::exp:
      for (std::size_t i = 0; i < n; ++i) out[i] = std::exp(x[i]);
      break;
    case Unary::log:
      for (std::size_t i = 0; i < n; ++i) {
        if (!(x[i] > 0.0)) throw DomainError("log of non-positive value " + std::to_string(x[i]));
        out[i] = std::log(x[i]);
      }
      break;
    case Unary::softplus:
      for (std::size_t i = 0; i < n; ++i) out[i] = detail::stable_softplus(x[i]);
      break;
    case Unary::sigmoid:
      for (std::size_t i = 0; i < n; ++i) out[i] = detail::stable_sigmoid(x[i]);
      break;
    case Unary::relu:
      for (std::size_t i = 0; i < n; ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
      break;
    case Unary::neg:
      for (std::size_t i = 0; i < n; ++i) out[i] = -x[i];
      break;
  }
  if (!a.on_tape()) return detail::make_result(name(kind), a.shape(), std::move(out), {&a}, {});

  BackwardFn bw = [kind, a = a.detach()](std::span<const double> g, std::span<std::span<double>> pg) {
    std::span<double> ga = pg[0];
    if (ga.empty()) return;
    std::span<const double> x = a.data();
    const std::size_t n = g.size();
    switch (kind) {
      case Unary::exp:
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * std::exp(x[i]);
        break;
      case Unary::log:
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] / x[i];
        break;
      case Unary::softplus:
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * detail::stable_sigmoid(x[i]);
        break;
      case Unary::sigmoid:
        for (std::size_t i = 0; i < n; ++i) {
          const double y = detail::stable_sigmoid(x[i]);
          ga[i] += g[i] * y * (1.0 - y);
        }
        break;
      case Unary::relu:
        for (std::size_t i = 0; i < n; ++i) ga[i] += x[i] > 0.0 ? g[i] : 0.0;
        break;
      case Unary::neg:
        for (std::size_t i = 0; i < n; ++i) ga[i] -= g[i];
        break;
    }
  };
  return detail::make_result(name(kind), a.shape(), std::move(out), {&a}, std::move(bw));
}

inline Tensor exp(const Tensor& a) { return unary(Unary::exp, a); }
inline Tensor log(const Tensor& a) { return unary(Unary::log, a); }
inline Tensor softplus(const Tensor& a) { return unary(Unary::softplus, a); }
inline Tensor sigmoid(const Tensor& a) { return unary(Unary::sigmoid, a); }
inline Tensor relu(const Tensor& a) { return unary(Unary::relu, a); }
inline Tensor neg(const Tensor& a) { return unary(Unary::neg, a); }

// Equal shapes, or either side a single element broadcast against the other.
inline Tensor binary(Binary kind, const Tensor& a, const Tensor& b) {
  const bool same = a.shape() == b.shape();
  const bool a_scalar = a.is_scalar() && !same;
  const bool b_scalar = b.is_scalar() && !same;
  if (!same && !a_scalar && !b_scalar) {
    throw ShapeError("shape mismatch: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  const Shape& shape = a_scalar ? b.shape() : a.shape();
  const std::size_t n = num_elements(shape);
  std::span<const double> x = a.data();
  std::span<const double> y = b.data();
  auto xa = [&](std::size_t i) { return a_scalar ? x[0] : x[i]; };
  auto yb = [&](std::size_t i) { return b_scalar ? y[0] : y[i]; };
  std::vector<double> out(n);
  const char* op = "add";
  switch (kind) {
    case Binary::add:
      for (std::size_t i = 0; i < n; ++i) out[i] = xa(i) + yb(i);
      break;
    case Binary::sub:
      op = "sub";
      for (std::size_t i = 0; i < n; ++i) out[i] = xa(i) - yb(i);
      break;
    case Binary::mul:
      op = "mul";
      for (std::size_t i = 0; i < n; ++i) out[i] = xa(i) * yb(i);
      break;
    case Binary::div:
      op = "div";
      for (std::size_t i = 0; i < n; ++i) {
        if (yb(i) == 0.0) throw DomainError("division by zero");
        out[i] = xa(i) / yb(i);
      }
      break;
  }
  if (!a.on_tape() && !b.on_tape()) return detail::make_result(op, shape, std::move(out), {&a, &b}, {});

  BackwardFn bw = [kind, a = a.detach(), b = b.detach(), a_scalar, b_scalar](std::span<const double> g,
                                                     std::span<std::span<double>> pg) {
    const std::size_t n = g.size();
    std::span<const double> x = a.data();
    std::span<const double> y = b.data();
    auto xa = [&](std::size_t i) { return a_scalar ? x[0] : x[i]; };
    auto yb = [&](std::size_t i) { return b_scalar ? y[0] : y[i]; };
    std::span<double> ga = pg[0];
    std::span<double> gb = pg[1];
    for (std::size_t i = 0; i < n; ++i) {
      double da = 0.0, db = 0.0;
      switch (kind) {
        case Binary::add: da = g[i]; db = g[i]; break;
        case Binary::sub: da = g[i]; db = -g[i]; break;
        case Binary::mul: da = g[i] * yb(i); db = g[i] * xa(i); break;
        case Binary::div: da = g[i] / yb(i); db = -g[i] * xa(i) / (yb(i) * yb(i)); break;
      }
      if (!ga.empty()) ga[a_scalar ? 0 : i] += da;
      if (!gb.empty()) gb[b_scalar ? 0 : i] += db;
    }
  };
  return detail::make_result(op, shape, std::move(out), {&a, &b}, std::move(bw));
}

inline Tensor add(const Tensor& a, const Tensor& b) { return binary(Binary::add, a, b); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return binary(Binary::sub, a, b); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return binary(Binary::mul, a, b); }
inline Tensor div(const Tensor& a, const Tensor& b) { return binary(Binary::div, a, b); }

inline Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v *= c;
  BackwardFn bw;
  if (a.on_tape()) {
    bw = [c](std::span<const double> g, std::span<std::span<double>> pg) {
      for (std::size_t i = 0; i < g.size(); ++i) pg[0][i] += c * g[i];
    };
  }
  return detail::make_result("scale", a.shape(), std::move(out), {&a}, std::move(bw));
}

inline Tensor add_scalar(const Tensor& a, double c) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v += c;
  BackwardFn bw;
  if (a.on_tape()) {
    bw = [](std::span<const double> g, std::span<std::span<double>> pg) {
      for (std::size_t i = 0; i < g.size(); ++i) pg[0][i] += g[i];
    };
  }
  return detail::make_result("add_scalar", a.shape(), std::move(out), {&a}, std::move(bw));
}

inline Tensor square(const Tensor& a) { return mul(a, a); }

namespace detail {
using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMajor>;
using MutMap = Eigen::Map<RowMajor>;
}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
    throw ShapeError("matmul dim mismatch: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  const auto m = static_cast<Eigen::Index>(a.shape()[0]);
  const auto k = static_cast<Eigen::Index>(a.shape()[1]);
  const auto n = static_cast<Eigen::Index>(b.shape()[1]);
  std::vector<double> out(static_cast<std::size_t>(m * n));
  detail::MutMap(out.data(), m, n).noalias() =
      detail::ConstMap(a.data().data(), m, k) * detail::ConstMap(b.data().data(), k, n);
  BackwardFn bw;
  if (a.on_tape() || b.on_tape()) {
    bw = [a = a.detach(), b = b.detach(), m, k, n](std::span<const double> g,
                                                   std::span<std::span<double>> pg) {
      detail::ConstMap G(g.data(), m, n);
      if (!pg[0].empty()) {
        detail::MutMap(pg[0].data(), m, k).noalias() +=
            G * detail::ConstMap(b.data().data(), k, n).transpose();
      }
      if (!pg[1].empty()) {
        detail::MutMap(pg[1].data(), k, n).noalias() +=
            detail::ConstMap(a.data().data(), m, k).transpose() * G;
      }
    };
  }
  return detail::make_result("matmul", Shape{a.shape()[0], b.shape()[1]}, std::move(out), {&a, &b},
                             std::move(bw));
}

// a[m x n] + bias[n] broadcast over rows.
inline Tensor add_bias(const Tensor& a, const Tensor& bias) {
  if (a.rank() != 2 || bias.size() != a.shape()[1]) {
    throw ShapeError("add_bias mismatch: " + to_string(a.shape()) + " + " + to_string(bias.shape()));
  }
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  std::vector<double> out(a.data().begin(), a.data().end());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bias[j];
  BackwardFn bw;
  if (a.on_tape() || bias.on_tape()) {
    bw = [m, n](std::span<const double> g, std::span<std::span<double>> pg) {
      if (!pg[0].empty())
        for (std::size_t i = 0; i < m * n; ++i) pg[0][i] += g[i];
      if (!pg[1].empty())
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) pg[1][j] += g[i * n + j];
    };
  }
  return detail::make_result("add_bias", a.shape(), std::move(out), {&a, &bias}, std::move(bw));
}

// Full reduction, or along one axis (that axis removed from the shape).
inline Tensor reduce(const Tensor& a, Reduce kind, std::optional<std::size_t> axis = std::nullopt) {
  std::size_t outer = 1, len = a.size(), inner = 1;
  Shape out_shape{};
  if (axis) {
    if (*axis >= a.rank()) {
      throw std::out_of_range("reduce axis " + std::to_string(*axis) + " out of range for rank " +
                              std::to_string(a.rank()));
    }
    len = a.shape()[*axis];
    for (std::size_t d = 0; d < *axis; ++d) outer *= a.shape()[d];
    for (std::size_t d = *axis + 1; d < a.rank(); ++d) inner *= a.shape()[d];
    for (std::size_t d = 0; d < a.rank(); ++d)
      if (d != *axis) out_shape.push_back(a.shape()[d]);
  }
  std::span<const double> x = a.data();
  std::vector<double> out(outer * inner);
  std::vector<std::size_t> argmax;
  if (kind == Reduce::max) argmax.resize(outer * inner);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double acc = kind == Reduce::max ? x[base] : 0.0;
      std::size_t best = 0;
      for (std::size_t l = 0; l < len; ++l) {
        double v = x[base + l * inner];
        if (kind == Reduce::max) {
          if (v > acc) {  // strict: first maximum wins ties
            acc = v;
            best = l;
          }
        } else {
          acc += v;
        }
      }
      if (kind == Reduce::mean) acc /= static_cast<double>(len);
      out[o * inner + in] = acc;
      if (kind == Reduce::max) argmax[o * inner + in] = best;
    }
  }
  BackwardFn bw;
  if (a.on_tape()) {
    bw = [kind, outer, len, inner, argmax = std::move(argmax)](std::span<const double> g,
                                                              std::span<std::span<double>> pg) {
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * len * inner + in;
          const double gi = g[o * inner + in];
          if (kind == Reduce::max) {
            pg[0][base + argmax[o * inner + in] * inner] += gi;
            continue;
          }
          const double s = kind == Reduce::mean ? gi / static_cast<double>(len) : gi;
          for (std::size_t l = 0; l < len; ++l) pg[0][base + l * inner] += s;
        }
      }
    };
  }
  return detail::make_result("reduce", std::move(out_shape), std::move(out), {&a}, std::move(bw));
}

inline Tensor sum(const Tensor& a) { return reduce(a, Reduce::sum); }
inline Tensor mean(const Tensor& a) { return reduce(a, Reduce::mean); }
inline Tensor max(const Tensor& a) { return reduce(a, Reduce::max); }

inline Tensor dot(const Tensor& a, const Tensor& b) { return sum(mul(a, b)); }

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (num_elements(shape) != a.size()) {
    throw ShapeError("cannot reshape " + to_string(a.shape()) + " to " + to_string(shape));
  }
  BackwardFn bw;
  if (a.on_tape()) {
    bw = [](std::span<const double> g, std::span<std::span<double>> pg) {
      for (std::size_t i = 0; i < g.size(); ++i) pg[0][i] += g[i];
    };
  }
  return detail::make_result("reshape", std::move(shape), a.values(), {&a}, std::move(bw));
}

// Channels [first, first + count) of the last axis.
inline Tensor take_channels(const Tensor& a, std::size_t first, std::size_t count) {
  if (a.rank() == 0 || count == 0 || first + count > a.shape().back()) {
    throw ShapeError("take_channels out of range for " + to_string(a.shape()));
  }
  const std::size_t c = a.shape().back();
  const std::size_t rows = a.size() / c;
  Shape shape = a.shape();
  shape.back() = count;
  std::vector<double> out(rows * count);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t k = 0; k < count; ++k) out[r * count + k] = a[r * c + first + k];
  BackwardFn bw;
  if (a.on_tape()) {
    bw = [rows, c, first, count](std::span<const double> g, std::span<std::span<double>> pg) {
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t k = 0; k < count; ++k) pg[0][r * c + first + k] += g[r * count + k];
    };
  }
  return detail::make_result("take_channels", std::move(shape), std::move(out), {&a}, std::move(bw));
}

// Block-average an [H, W, C] image by `factor` along both spatial axes.
inline Tensor avg_pool2d(const Tensor& a, std::size_t factor) {
  if (a.rank() != 3 || factor == 0 || a.shape()[0] % factor || a.shape()[1] % factor) {
    throw ShapeError("avg_pool2d needs [H,W,C] divisible by factor, got " + to_string(a.shape()));
  }
  const std::size_t h = a.shape()[0], w = a.shape()[1], c = a.shape()[2];
  const std::size_t oh = h / factor, ow = w / factor;
  const double inv = 1.0 / static_cast<double>(factor * factor);
  std::vector<double> out(oh * ow * c, 0.0);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t k = 0; k < c; ++k)
        out[((y / factor) * ow + x / factor) * c + k] += a[(y * w + x) * c + k];
  for (double& v : out) v *= inv;
  BackwardFn bw;
  if (a.on_tape()) {
    bw = [h, w, c, ow, factor, inv](std::span<const double> g, std::span<std::span<double>> pg) {
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
          for (std::size_t k = 0; k < c; ++k)
            pg[0][(y * w + x) * c + k] += inv * g[((y / factor) * ow + x / factor) * c + k];
    };
  }
  return detail::make_result("avg_pool2d", Shape{oh, ow, c}, std::move(out), {&a}, std::move(bw));
}

struct BinaryProbabilities {
  Tensor p_yes;
  Tensor p_no;
};

// (log p_yes, log p_no) without forming the probabilities, exact in the
// tails where p_no underflows.
inline std::pair<double, double> log_softmax2(double z_yes, double z_no) {
  const double m = std::max(z_yes, z_no);
  const double lse = m + std::log1p(std::exp(-std::abs(z_yes - z_no)));
  return {z_yes - lse, z_no - lse};
}

// Two-way softmax over scalar logits, shifted by the max so large logits do
// not overflow.
inline BinaryProbabilities softmax2(const Tensor& z_yes, const Tensor& z_no) {
  const double zy = z_yes.item();
  const double zn = z_no.item();
  if (!std::isfinite(zy) || !std::isfinite(zn)) throw NumericError("softmax2 of non-finite logit");
  const double m = std::max(zy, zn);
  const double ey = std::exp(zy - m);
  const double en = std::exp(zn - m);
  const double py = ey / (ey + en);
  const double pn = en / (ey + en);
  BackwardFn bw_yes, bw_no;
  if (z_yes.on_tape() || z_no.on_tape()) {
    const double d = py * pn;
    bw_yes = [d](std::span<const double> g, std::span<std::span<double>> pg) {
      if (!pg[0].empty()) pg[0][0] += g[0] * d;
      if (!pg[1].empty()) pg[1][0] -= g[0] * d;
    };
    bw_no = [d](std::span<const double> g, std::span<std::span<double>> pg) {
      if (!pg[0].empty()) pg[0][0] -= g[0] * d;
      if (!pg[1].empty()) pg[1][0] += g[0] * d;
    };
  }
  return {detail::make_result("softmax2", Shape{}, {py}, {&z_yes, &z_no}, std::move(bw_yes)),
          detail::make_result("softmax2", Shape{}, {pn}, {&z_yes, &z_no}, std::move(bw_no))};
}

using ScalarFunction = std::function<Tensor(std::span<const Tensor>)>;

struct GradCheckOptions {
  double h = 1e-5;
  // Check at most this many coordinates per leaf, drawn uniformly; 0 = all.
  std::size_t max_coords_per_leaf = 0;
  std::uint64_t seed = 0;
};

// Worst relative error between tape gradients and central differences,
// with denominator max(|analytic|, |numeric|, 1e-12).
inline double grad_check(const ScalarFunction& f, std::span<const Tensor> point,
                         const GradCheckOptions& opts = {}) {
  Tape tape;
  std::vector<Tensor> leaves;
  leaves.reserve(point.size());
  for (const Tensor& p : point) leaves.push_back(tape.leaf(p));
  Tensor root = f(leaves);
  if (!root.on_tape()) root = tape.record(Shape{}, {root.item()}, {}, {});
  Gradients grads = tape.backward(root);

  std::mt19937_64 rng(opts.seed);
  double worst = 0.0;
  std::vector<Tensor> probe(point.begin(), point.end());
  for (std::size_t li = 0; li < point.size(); ++li) {
    Tensor analytic = grads.of(leaves[li]);
    std::vector<std::size_t> coords(point[li].size());
    for (std::size_t j = 0; j < coords.size(); ++j) coords[j] = j;
    if (opts.max_coords_per_leaf != 0 && opts.max_coords_per_leaf < coords.size()) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opts.max_coords_per_leaf);
    }
    for (std::size_t j : coords) {
      std::vector<double> v = point[li].values();
      const double x0 = v[j];
      v[j] = x0 + opts.h;
      probe[li] = Tensor(point[li].shape(), v);
      const double fp = f(probe).item();
      v[j] = x0 - opts.h;
      probe[li] = Tensor(point[li].shape(), v);
      const double fm = f(probe).item();
      probe[li] = point[li];
      const double numeric = (fp - fm) / (2.0 * opts.h);
      const double a = analytic[j];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-12});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace cg3d
