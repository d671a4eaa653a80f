#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "wmhseg/datamodel.hpp"
#include "wmhseg/errors.hpp"
#include "wmhseg/gaussian.hpp"
#include "wmhseg/model_kind.hpp"

namespace wmhseg::objective {

using data::Mask2D;

struct ConfusionCounts {
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;
  std::uint64_t tn = 0;

  std::uint64_t total() const { return tp + fp + fn + tn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp, fp += o.fp, fn += o.fn, tn += o.tn;
    return *this;
  }
  bool operator==(const ConfusionCounts&) const = default;
};

struct LossBreakdown {
  double ce = 0.0;
  double kl = 0.0;
  double beta = 0.0;
  double total = 0.0;
};

/// Binary cross-entropy of one logit against a {0,1} target, in the
/// overflow-free form max(x,0) - x*y + log(1 + exp(-|x|)).
template <typename Real>
inline Real bce_term(Real logit, Real target) {
  return std::max(logit, Real(0)) - logit * target + std::log1p(std::exp(-std::abs(logit)));
}

template <typename Real>
inline Real sigmoid(Real x) {
  if (x >= Real(0)) return Real(1) / (Real(1) + std::exp(-x));
  const Real e = std::exp(x);
  return e / (Real(1) + e);
}

/// Mean per-pixel binary cross-entropy from logits.
template <typename Real>
Real cross_entropy(std::span<const Real> logits, std::span<const Real> targets) {
  if (logits.size() != targets.size()) throw ShapeError("cross_entropy: logits and targets differ in size");
  if (logits.empty()) throw ShapeError("cross_entropy: empty input");
  Real sum = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) sum += bce_term(logits[i], targets[i]);
  return sum / static_cast<Real>(logits.size());
}

double cross_entropy(std::span<const float> logits, const Mask2D& mask);

/// KL(q || p) for diagonal Gaussians given by mean/log-variance spans.
template <typename Real>
Real kl_divergence(std::span<const Real> mean_q, std::span<const Real> log_var_q, std::span<const Real> mean_p,
                   std::span<const Real> log_var_p) {
  const auto n = mean_q.size();
  if (log_var_q.size() != n || mean_p.size() != n || log_var_p.size() != n)
    throw ShapeError("kl_divergence: dimension mismatch");
  Real sum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const Real diff = mean_p[i] - mean_q[i];
    sum += Real(0.5) * (std::exp(log_var_q[i] - log_var_p[i]) + diff * diff / std::exp(log_var_p[i]) - Real(1) +
                        log_var_p[i] - log_var_q[i]);
  }
  return sum;
}

double kl_divergence(const DiagGaussian& posterior, const DiagGaussian& prior);

/// Deterministic kinds: total = ce with kl recorded as 0.
/// Probabilistic kinds: total = ce + beta * kl.
LossBreakdown total_loss(double ce, double kl, double beta, ModelKind kind);

/// pixel = 1 iff sigmoid(logit) >= threshold.
Mask2D binarize(std::span<const float> logits, std::uint32_t height, std::uint32_t width, double threshold = 0.5);

ConfusionCounts confusion(const Mask2D& pred, const Mask2D& truth);

/// 2tp / (2tp + fp + fn); 1.0 when both masks are empty.
double dsc(const ConfusionCounts& counts);

struct Summary {
  double mean = 0.0;
  double std = 0.0;  // population
  std::size_t n = 0;
};

Summary summarize(std::span<const double> values);

}  // namespace wmhseg::objective
