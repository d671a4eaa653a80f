#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <vector>

#include "wmhseg/datamodel.hpp"
#include "wmhseg/gaussian.hpp"
#include "wmhseg/layers.hpp"
#include "wmhseg/model_config.hpp"

namespace wmhseg::nets {

enum class Phase { Train, Infer };

/// Reparameterized: mean + exp(0.5 log_var) * eps, differentiable through
/// the distribution. Random: the same draw with the gradient path cut.
/// Mean: the mean itself.
enum class SampleMode { Reparameterized, Mean, Random };

/// Draws one latent vector; eps comes from Rng(seed).
std::vector<double> sample_latent(const DiagGaussian& dist, SampleMode mode, std::uint64_t seed);

/// Captured internals of one forward pass of a transformer kind.
template <typename Real>
struct ModelTrace {
  Dims tokens;  // (B, grid, grid, hidden) after patch embedding
  std::vector<AttentionTrace<Real>> attention;  // one per transformer block
};

template <typename Real>
struct ProbOutput {
  std::vector<Var<Real>> logits;  // one map per sample, each (B,H,W,1)
  GaussianVars<Real> prior;
  std::optional<GaussianVars<Real>> posterior;  // train phase only
};

template <typename Real>
struct LossGraph {
  Var<Real> total;
  Var<Real> ce;
  Var<Real> kl;  // null for deterministic kinds
};

template <typename Real>
class Model {
public:
  /// Validates `config` and initializes every parameter from `seed`.
  Model(const ModelConfig& config, std::uint64_t seed);
  ~Model();
  Model(Model&&) noexcept;
  Model& operator=(Model&&) noexcept;

  const ModelConfig& config() const { return config_; }
  ParameterSet<Real>& parameters() { return params_; }
  const ParameterSet<Real>& parameters() const { return params_; }
  std::size_t parameter_count() const { return params_.scalar_count(); }
  const Combiner<Real>* combiner() const { return combiner_.get(); }

  /// Final decoder feature map (B,H,W,feature_channels) for images (B,H,W,1).
  Var<Real> features(const Tensor<Real>& images, ModelTrace<Real>* trace = nullptr) const;

  /// Logits (B,H,W,1); deterministic kinds only.
  Var<Real> forward_deterministic(const Tensor<Real>& images) const;

  GaussianVars<Real> prior(const Tensor<Real>& images) const;
  /// `masks` (B,H,W,1) in {0,1} is concatenated to the image as a channel.
  GaussianVars<Real> posterior(const Tensor<Real>& images, const Tensor<Real>& masks) const;

  Var<Real> combine(const Var<Real>& features, const Var<Real>& z) const;

  /// Train: masks required, one logits map from a posterior sample.
  /// Infer: masks forbidden, `n_samples` maps from prior samples; sample i
  /// uses eps drawn from mix_seed(seed, i).
  ProbOutput<Real> forward_probabilistic(const Tensor<Real>& images, const Tensor<Real>* masks, Phase phase,
                                         int n_samples, SampleMode mode, std::uint64_t seed) const;

  /// Mean pixel BCE, plus beta * KL(posterior || prior) for probabilistic kinds.
  LossGraph<Real> loss(const Tensor<Real>& images, const Tensor<Real>& masks, double beta, std::uint64_t seed) const;

  /// Inference logits without graph recording; probabilistic kinds use the
  /// prior mean.
  Tensor<Real> predict(const Tensor<Real>& images) const;

  std::vector<data::ParamBlob> export_params() const;
  /// Names, order and shapes must match this model exactly.
  void import_params(const std::vector<data::ParamBlob>& blobs);

  static std::vector<DiagGaussian> to_distributions(const GaussianVars<Real>& vars);

private:
  struct Trunk;

  void check_images(const Tensor<Real>& images) const;
  Var<Real> latent_sample(const GaussianVars<Real>& dist, SampleMode mode, std::uint64_t seed) const;

  ModelConfig config_;
  ParameterSet<Real> params_;
  std::unique_ptr<Trunk> trunk_;
  Conv2d<Real> head_;
  std::optional<LatentEncoder<Real>> prior_net_;
  std::optional<LatentEncoder<Real>> posterior_net_;
  std::unique_ptr<Combiner<Real>> combiner_;
};

/// Stacks slices (all height x width) into a (B,H,W,1) tensor.
template <typename Real>
Tensor<Real> stack_images(const std::vector<const data::Slice2D*>& slices);
template <typename Real>
Tensor<Real> stack_masks(const std::vector<const data::Mask2D*>& masks);

}  // namespace wmhseg::nets
