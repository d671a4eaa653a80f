#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <string>

#include "wmhseg/model.hpp"
#include "wmhseg/rng.hpp"

namespace wmhseg::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class ScratchDir {
public:
  explicit ScratchDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() / ("wmhseg_" + tag + "_" + std::to_string(std::random_device{}()));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~ScratchDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  ScratchDir(const ScratchDir&) = delete;
  ScratchDir& operator=(const ScratchDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& leaf) const { return path_ / leaf; }

private:
  std::filesystem::path path_;
};

/// 8x8 input, two levels, latent 2, one transformer layer.
inline nets::ModelConfig tiny_config(ModelKind kind) {
  auto c = nets::ModelConfig::make(kind, nets::ScalePreset::Desk);
  c.preset = nets::ScalePreset::Custom;
  c.input_size = 8;
  c.unet_filters = {2, 4};
  c.trans_filters = {2, 4};
  c.backbone_units = {1};
  c.transformer_layers = 1;
  c.hidden_dim = 8;
  c.heads = 2;
  c.mlp_dim = 16;
  c.latent_dim = is_probabilistic(kind) ? 2 : 0;
  return c;
}

template <typename Real>
nets::Tensor<Real> random_tensor(nets::Dims dims, Rng& rng, double scale = 1.0) {
  nets::Tensor<Real> t(dims);
  for (auto& v : t.storage()) v = static_cast<Real>(scale * rng.normal());
  return t;
}

template <typename Real>
nets::Tensor<Real> random_binary(nets::Dims dims, Rng& rng, double p = 0.3) {
  nets::Tensor<Real> t(dims);
  for (auto& v : t.storage()) v = rng.uniform() < p ? Real(1) : Real(0);
  return t;
}

struct GradCheckResult {
  double worst = 0.0;
  std::string worst_name;
};

/// Central differences on every scalar of every parameter; per tensor the
/// error is ||num - ana|| / max(||num||, ||ana||).
template <typename LossFn>
GradCheckResult gradient_check(nets::ParameterSet<double>& params, LossFn loss, double h = 1e-5) {
  params.zero_grad();
  nets::backward(loss());
  GradCheckResult result;
  for (auto& [name, p] : params.entries()) {
    double diff = 0, na = 0, nn = 0;
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double ana = p->has_grad() ? p->grad[i] : 0.0;
      const double orig = p->value[i];
      double lp, lm;
      {
        nets::NoGradGuard guard;
        p->value[i] = orig + h;
        lp = loss()->value[0];
        p->value[i] = orig - h;
        lm = loss()->value[0];
        p->value[i] = orig;
      }
      const double num = (lp - lm) / (2 * h);
      diff += (num - ana) * (num - ana);
      na += ana * ana;
      nn += num * num;
    }
    const double denom = std::max(std::sqrt(na), std::sqrt(nn));
    const double rel = denom < 1e-10 ? 0.0 : std::sqrt(diff) / denom;
    if (rel > result.worst) {
      result.worst = rel;
      result.worst_name = name;
    }
  }
  return result;
}

/// Adds N(0, sigma^2) noise to every parameter so the check runs away from
/// the initial point, where attention is near uniform and some ReLUs are dead.
inline void perturb_parameters(nets::ParameterSet<double>& params, std::uint64_t seed, double sigma = 0.2) {
  Rng rng(seed);
  for (auto& [name, p] : params.entries())
    for (auto& v : p->value.storage()) v += sigma * rng.normal();
}

}  // namespace wmhseg::testing
