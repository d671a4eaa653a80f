#pragma once

// Building blocks shared by the four architectures. Every layer registers
// its parameters in a ParameterSet under a dotted name at construction, so
// parameter order (and therefore initialization) is a pure function of the
// architecture.

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "wmhseg/ops.hpp"
#include "wmhseg/rng.hpp"

namespace wmhseg::nets {

template <typename Real>
class ParameterSet {
public:
  using Entry = std::pair<std::string, Var<Real>>;

  /// Throws std::invalid_argument on a duplicate name.
  Var<Real> add(const std::string& name, Tensor<Real> init);
  Var<Real> find(const std::string& name) const;  // null when absent

  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  std::size_t scalar_count() const;
  void zero_grad();

private:
  std::vector<Entry> entries_;
};

enum class InitScheme { HeUniform, TruncNormal };

/// Seeded parameter initializer. Conv weights draw U(-b, b) with
/// b = sqrt(6 / fan_in); transformer weights draw N(0, 0.02^2) truncated at
/// two standard deviations.
class Initializer {
public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  template <typename Real>
  Tensor<Real> weights(Dims dims, InitScheme scheme, int fan_in);

private:
  Rng rng_;
};

template <typename Real>
struct Conv2d {
  Var<Real> weight, bias;
  int stride = 1, pad = 0;

  Conv2d() = default;
  Conv2d(ParameterSet<Real>& ps, Initializer& init, const std::string& name, int in_ch, int out_ch, int kernel,
         int stride = 1, InitScheme scheme = InitScheme::HeUniform);
  Var<Real> operator()(const Var<Real>& x) const { return ops::conv2d(x, weight, bias, stride, pad); }
};

template <typename Real>
struct ConvTranspose2d {
  Var<Real> weight, bias;
  int stride = 2;

  ConvTranspose2d() = default;
  ConvTranspose2d(ParameterSet<Real>& ps, Initializer& init, const std::string& name, int in_ch, int out_ch,
                  int kernel = 2, int stride = 2);
  Var<Real> operator()(const Var<Real>& x) const { return ops::conv_transpose2d(x, weight, bias, stride); }
};

template <typename Real>
struct GroupNorm {
  Var<Real> gamma, beta;
  int groups = 1;

  GroupNorm() = default;
  /// Uses gcd(channels, 8) groups.
  GroupNorm(ParameterSet<Real>& ps, const std::string& name, int channels);
  Var<Real> operator()(const Var<Real>& x) const { return ops::group_norm(x, gamma, beta, groups); }
};

template <typename Real>
struct LayerNorm {
  Var<Real> gamma, beta;

  LayerNorm() = default;
  LayerNorm(ParameterSet<Real>& ps, const std::string& name, int channels);
  Var<Real> operator()(const Var<Real>& x) const { return ops::layer_norm(x, gamma, beta); }
};

/// `count` 3x3 same-padding convolutions, each followed by ReLU.
template <typename Real>
struct ConvStack {
  std::vector<Conv2d<Real>> convs;

  ConvStack() = default;
  ConvStack(ParameterSet<Real>& ps, Initializer& init, const std::string& name, int in_ch, int out_ch, int count);
  Var<Real> operator()(Var<Real> x) const;
};

/// Pre-activation residual unit: GN-ReLU-conv3x3(stride)-GN-ReLU-conv3x3,
/// with a strided 1x1 projection of the pre-activated input when the shape
/// changes.
template <typename Real>
struct PreActUnit {
  GroupNorm<Real> norm1, norm2;
  Conv2d<Real> conv1, conv2;
  Conv2d<Real> shortcut;
  bool project = false;

  PreActUnit() = default;
  PreActUnit(ParameterSet<Real>& ps, Initializer& init, const std::string& name, int in_ch, int out_ch, int stride);
  Var<Real> operator()(const Var<Real>& x) const;
};

/// Softmax weights of one attention call, [batch][head][query][key].
template <typename Real>
struct AttentionTrace {
  int heads = 0;
  int tokens = 0;
  std::vector<Real> weights;
};

/// Pre-norm transformer encoder block over the H*W tokens of a feature map.
template <typename Real>
struct TransformerBlock {
  LayerNorm<Real> norm1, norm2;
  Conv2d<Real> query, key, value, proj, fc1, fc2;
  int heads = 1;

  TransformerBlock() = default;
  TransformerBlock(ParameterSet<Real>& ps, Initializer& init, const std::string& name, int hidden, int heads,
                   int mlp);
  Var<Real> operator()(const Var<Real>& x, AttentionTrace<Real>* trace = nullptr) const;
};

/// Mean and clamped log-variance, each (B,1,1,latent).
template <typename Real>
struct GaussianVars {
  Var<Real> mean;
  Var<Real> log_var;
};

/// Prior/posterior network: conv stacks with 2x2 pooling, global average
/// pooling, then a 1x1 conv to 2 * latent channels.
template <typename Real>
struct LatentEncoder {
  std::vector<ConvStack<Real>> levels;
  Conv2d<Real> head;
  int latent = 0;

  LatentEncoder() = default;
  LatentEncoder(ParameterSet<Real>& ps, Initializer& init, const std::string& name, int in_ch,
                const std::vector<int>& filters, int convs_per_level, int latent);
  GaussianVars<Real> operator()(const Var<Real>& x) const;
};

/// Fuses a decoder feature map with a latent sample into 1-channel logits.
template <typename Real>
class Combiner {
public:
  virtual ~Combiner() = default;
  /// features (B,H,W,C), z (B,1,1,L) -> logits (B,H,W,1).
  virtual Var<Real> operator()(const Var<Real>& features, const Var<Real>& z) const = 0;
  /// Number of stride-2 transposed convolutions applied to z.
  virtual int deconv_stages() const { return 0; }
};

template <typename Real>
struct FusionHead {
  Conv2d<Real> fc1, fc2, out;

  FusionHead() = default;
  FusionHead(ParameterSet<Real>& ps, Initializer& init, const std::string& name, int in_ch, int feature_ch);
  Var<Real> operator()(const Var<Real>& x) const;
};

/// Broadcasts z over every pixel before the 1x1 fusion convs.
template <typename Real>
class TileCombiner final : public Combiner<Real> {
public:
  TileCombiner(ParameterSet<Real>& ps, Initializer& init, int feature_ch, int latent);
  Var<Real> operator()(const Var<Real>& features, const Var<Real>& z) const override;

private:
  FusionHead<Real> head_;
};

/// Grows z from 1x1 to the feature size with log2(H) stride-2 transposed
/// convolutions (latent channels throughout, ReLU between stages).
template <typename Real>
class DeconvCombiner final : public Combiner<Real> {
public:
  DeconvCombiner(ParameterSet<Real>& ps, Initializer& init, int feature_ch, int latent, int size);
  Var<Real> operator()(const Var<Real>& features, const Var<Real>& z) const override;
  int deconv_stages() const override { return static_cast<int>(stages_.size()); }

private:
  std::vector<ConvTranspose2d<Real>> stages_;
  FusionHead<Real> head_;
};

}  // namespace wmhseg::nets
