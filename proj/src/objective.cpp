#include "wmhseg/objective.hpp"

#include <algorithm>

namespace wmhseg::objective {

double cross_entropy(std::span<const float> logits, const Mask2D& mask) {
  if (logits.size() != mask.size()) throw ShapeError("cross_entropy: logits and mask differ in size");
  std::vector<double> x(logits.begin(), logits.end());
  std::vector<double> y(mask.values.begin(), mask.values.end());
  return cross_entropy<double>(x, y);
}

double kl_divergence(const DiagGaussian& posterior, const DiagGaussian& prior) {
  return kl_divergence<double>(posterior.mean, posterior.log_var, prior.mean, prior.log_var);
}

LossBreakdown total_loss(double ce, double kl, double beta, ModelKind kind) {
  LossBreakdown out;
  out.ce = ce;
  out.beta = beta;
  if (is_probabilistic(kind)) {
    out.kl = kl;
    out.total = ce + beta * kl;
  } else {
    out.kl = 0.0;
    out.total = ce;
  }
  return out;
}

Mask2D binarize(std::span<const float> logits, std::uint32_t height, std::uint32_t width, double threshold) {
  if (logits.size() != static_cast<std::size_t>(height) * width) throw ShapeError("binarize: size mismatch");
  if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("binarize: threshold must lie in (0, 1)");
  Mask2D out(height, width, 0);
  for (std::size_t i = 0; i < logits.size(); ++i)
    out.values[i] = sigmoid<double>(logits[i]) >= threshold ? 1 : 0;
  return out;
}

ConfusionCounts confusion(const Mask2D& pred, const Mask2D& truth) {
  if (pred.height != truth.height || pred.width != truth.width || pred.size() != truth.size())
    throw ShapeError("confusion: mask shapes differ");
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const auto p = pred.values[i];
    const auto t = truth.values[i];
    if (p > 1 || t > 1) throw ShapeError("confusion: masks must be binary");
    if (p && t) ++c.tp;
    else if (p) ++c.fp;
    else if (t) ++c.fn;
    else ++c.tn;
  }
  return c;
}

double dsc(const ConfusionCounts& c) {
  const std::uint64_t denom = 2 * c.tp + c.fp + c.fn;
  if (denom == 0) return 1.0;
  return static_cast<double>(2 * c.tp) / static_cast<double>(denom);
}

Summary summarize(std::span<const double> values) {
  Summary s;
  s.n = values.size();
  if (values.empty()) return s;
  double sum = 0.0;
  for (double v : values) sum += v;
  s.mean = sum / static_cast<double>(values.size());
  double sq = 0.0;
  for (double v : values) sq += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(sq / static_cast<double>(values.size()));
  return s;
}

}  // namespace wmhseg::objective
