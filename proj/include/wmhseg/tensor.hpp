#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "wmhseg/errors.hpp"

namespace wmhseg::nets {

/// 4-D extent. Feature maps are NHWC; parameters reuse the four slots for
/// their own layouts (documented at each layer).
struct Dims {
  int n = 0, h = 0, w = 0, c = 0;

  std::size_t count() const {
    return static_cast<std::size_t>(n) * static_cast<std::size_t>(h) * static_cast<std::size_t>(w) *
           static_cast<std::size_t>(c);
  }
  std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(h) + "," + std::to_string(w) + "," + std::to_string(c) + ")";
  }
  bool operator==(const Dims&) const = default;
};

template <typename Real>
class Tensor {
public:
  Tensor() = default;
  explicit Tensor(Dims dims, Real fill = Real(0)) : dims_(dims), data_(dims.count(), fill) {}
  Tensor(Dims dims, std::vector<Real> values) : dims_(dims), data_(std::move(values)) {
    if (data_.size() != dims_.count()) throw ShapeError("tensor data does not match dims " + dims_.str());
  }

  const Dims& dims() const { return dims_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  Real* data() { return data_.data(); }
  const Real* data() const { return data_.data(); }
  std::span<Real> values() { return data_; }
  std::span<const Real> values() const { return data_; }
  std::vector<Real>& storage() { return data_; }
  const std::vector<Real>& storage() const { return data_; }

  Real& operator[](std::size_t i) { return data_[i]; }
  Real operator[](std::size_t i) const { return data_[i]; }

  std::size_t offset(int n, int y, int x, int ch) const {
    return ((static_cast<std::size_t>(n) * dims_.h + y) * dims_.w + x) * dims_.c + ch;
  }
  Real& operator()(int n, int y, int x, int ch) { return data_[offset(n, y, x, ch)]; }
  Real operator()(int n, int y, int x, int ch) const { return data_[offset(n, y, x, ch)]; }

  void fill(Real v) { std::fill(data_.begin(), data_.end(), v); }
  void reshape(Dims dims) {
    if (dims.count() != data_.size()) throw ShapeError("reshape " + dims_.str() + " -> " + dims.str());
    dims_ = dims;
  }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(dims_, std::vector<Other>(data_.begin(), data_.end()));
  }

private:
  Dims dims_;
  std::vector<Real> data_;
};

// ---- reverse-mode graph ------------------------------------------------

template <typename Real>
struct Node {
  Tensor<Real> value;
  Tensor<Real> grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  Tensor<Real>& grad_buffer() {
    if (grad.size() != value.size()) grad = Tensor<Real>(value.dims());
    return grad;
  }
  bool has_grad() const { return grad.size() == value.size() && !grad.empty(); }
  const Dims& dims() const { return value.dims(); }
};

template <typename Real>
using Var = std::shared_ptr<Node<Real>>;

/// Graph recording is on by default; a live guard turns it off for the
/// current thread (inference).
class NoGradGuard {
public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
  static bool grad_enabled();

private:
  bool previous_;
};

template <typename Real>
Var<Real> constant(Tensor<Real> value) {
  auto node = std::make_shared<Node<Real>>();
  node->value = std::move(value);
  return node;
}

template <typename Real>
Var<Real> parameter(Tensor<Real> value) {
  auto node = constant(std::move(value));
  node->requires_grad = true;
  return node;
}

/// Wraps an op result; the backward closure and inputs are kept only when
/// recording is on and some input needs a gradient.
template <typename Real>
Var<Real> make_result(Tensor<Real> value, std::vector<Var<Real>> inputs, std::function<void(Node<Real>&)> backward) {
  auto node = std::make_shared<Node<Real>>();
  node->value = std::move(value);
  if (!NoGradGuard::grad_enabled()) return node;
  bool needs = false;
  for (const auto& in : inputs)
    if (in && in->requires_grad) needs = true;
  if (!needs) return node;
  node->requires_grad = true;
  node->inputs = std::move(inputs);
  node->backward = std::move(backward);
  return node;
}

/// Seeds d(root)/d(root) = 1 (root must hold one element) and propagates to
/// every reachable node that requires a gradient. Parameter gradients
/// accumulate; zero them between steps.
template <typename Real>
void backward(const Var<Real>& root);

}  // namespace wmhseg::nets
