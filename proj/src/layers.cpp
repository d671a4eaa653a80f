#include "wmhseg/layers.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

#include "wmhseg/gaussian.hpp"

namespace wmhseg::nets {

// ---- ParameterSet ---------------------------------------------------------

template <typename Real>
Var<Real> ParameterSet<Real>::add(const std::string& name, Tensor<Real> init) {
  if (find(name)) throw std::invalid_argument("duplicate parameter name " + name);
  auto p = parameter(std::move(init));
  entries_.emplace_back(name, p);
  return p;
}

template <typename Real>
Var<Real> ParameterSet<Real>::find(const std::string& name) const {
  for (const auto& [n, v] : entries_)
    if (n == name) return v;
  return nullptr;
}

template <typename Real>
std::size_t ParameterSet<Real>::scalar_count() const {
  std::size_t total = 0;
  for (const auto& e : entries_) total += e.second->value.size();
  return total;
}

template <typename Real>
void ParameterSet<Real>::zero_grad() {
  for (auto& e : entries_) e.second->grad = Tensor<Real>();
}

// ---- Initializer ----------------------------------------------------------

template <typename Real>
Tensor<Real> Initializer::weights(Dims dims, InitScheme scheme, int fan_in) {
  Tensor<Real> t(dims);
  if (scheme == InitScheme::HeUniform) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (auto& v : t.storage()) v = static_cast<Real>(rng_.uniform(-bound, bound));
  } else {
    constexpr double sigma = 0.02;
    for (auto& v : t.storage()) {
      double draw = rng_.normal();
      while (std::abs(draw) > 2.0) draw = rng_.normal();
      v = static_cast<Real>(sigma * draw);
    }
  }
  return t;
}

namespace {

template <typename Real>
Var<Real> zeros(ParameterSet<Real>& ps, const std::string& name, int channels) {
  return ps.add(name, Tensor<Real>(Dims{1, 1, 1, channels}));
}

template <typename Real>
Var<Real> ones(ParameterSet<Real>& ps, const std::string& name, int channels) {
  return ps.add(name, Tensor<Real>(Dims{1, 1, 1, channels}, Real(1)));
}

}  // namespace

// ---- primitive layers -------------------------------------------------------

template <typename Real>
Conv2d<Real>::Conv2d(ParameterSet<Real>& ps, Initializer& init, const std::string& name, int in_ch, int out_ch,
                     int kernel, int stride_, InitScheme scheme)
    : stride(stride_), pad(kernel / 2) {
  weight = ps.add(name + ".weight",
                  init.weights<Real>(Dims{kernel, kernel, in_ch, out_ch}, scheme, in_ch * kernel * kernel));
  bias = zeros(ps, name + ".bias", out_ch);
}

template <typename Real>
ConvTranspose2d<Real>::ConvTranspose2d(ParameterSet<Real>& ps, Initializer& init, const std::string& name, int in_ch,
                                       int out_ch, int kernel, int stride_)
    : stride(stride_) {
  const int taps = std::max(1, (kernel / stride_) * (kernel / stride_));
  weight = ps.add(name + ".weight",
                  init.weights<Real>(Dims{in_ch, kernel, kernel, out_ch}, InitScheme::HeUniform, in_ch * taps));
  bias = zeros(ps, name + ".bias", out_ch);
}

template <typename Real>
GroupNorm<Real>::GroupNorm(ParameterSet<Real>& ps, const std::string& name, int channels)
    : groups(std::gcd(channels, 8)) {
  gamma = ones(ps, name + ".gamma", channels);
  beta = zeros(ps, name + ".beta", channels);
}

template <typename Real>
LayerNorm<Real>::LayerNorm(ParameterSet<Real>& ps, const std::string& name, int channels) {
  gamma = ones(ps, name + ".gamma", channels);
  beta = zeros(ps, name + ".beta", channels);
}

// ---- composite blocks -------------------------------------------------------

template <typename Real>
ConvStack<Real>::ConvStack(ParameterSet<Real>& ps, Initializer& init, const std::string& name, int in_ch, int out_ch,
                           int count) {
  for (int i = 0; i < count; ++i)
    convs.emplace_back(ps, init, name + ".conv" + std::to_string(i), i == 0 ? in_ch : out_ch, out_ch, 3);
}

template <typename Real>
Var<Real> ConvStack<Real>::operator()(Var<Real> x) const {
  for (const auto& c : convs) x = ops::relu(c(x));
  return x;
}

template <typename Real>
PreActUnit<Real>::PreActUnit(ParameterSet<Real>& ps, Initializer& init, const std::string& name, int in_ch,
                             int out_ch, int stride)
    : norm1(ps, name + ".norm1", in_ch),
      norm2(ps, name + ".norm2", out_ch),
      conv1(ps, init, name + ".conv1", in_ch, out_ch, 3, stride),
      conv2(ps, init, name + ".conv2", out_ch, out_ch, 3),
      project(stride != 1 || in_ch != out_ch) {
  if (project) shortcut = Conv2d<Real>(ps, init, name + ".shortcut", in_ch, out_ch, 1, stride);
}

template <typename Real>
Var<Real> PreActUnit<Real>::operator()(const Var<Real>& x) const {
  const auto pre = ops::relu(norm1(x));
  const auto residual = project ? shortcut(pre) : x;
  const auto h = conv2(ops::relu(norm2(conv1(pre))));
  return ops::add(h, residual);
}

template <typename Real>
TransformerBlock<Real>::TransformerBlock(ParameterSet<Real>& ps, Initializer& init, const std::string& name,
                                         int hidden, int heads_, int mlp)
    : norm1(ps, name + ".attn_norm", hidden),
      norm2(ps, name + ".mlp_norm", hidden),
      query(ps, init, name + ".attn.query", hidden, hidden, 1, 1, InitScheme::TruncNormal),
      key(ps, init, name + ".attn.key", hidden, hidden, 1, 1, InitScheme::TruncNormal),
      value(ps, init, name + ".attn.value", hidden, hidden, 1, 1, InitScheme::TruncNormal),
      proj(ps, init, name + ".attn.out", hidden, hidden, 1, 1, InitScheme::TruncNormal),
      fc1(ps, init, name + ".mlp.fc1", hidden, mlp, 1, 1, InitScheme::TruncNormal),
      fc2(ps, init, name + ".mlp.fc2", mlp, hidden, 1, 1, InitScheme::TruncNormal),
      heads(heads_) {}

template <typename Real>
Var<Real> TransformerBlock<Real>::operator()(const Var<Real>& x, AttentionTrace<Real>* trace) const {
  const auto h = norm1(x);
  std::vector<Real>* weights = nullptr;
  if (trace) {
    trace->heads = heads;
    trace->tokens = x->dims().h * x->dims().w;
    weights = &trace->weights;
  }
  const auto attended = proj(ops::multi_head_attention(query(h), key(h), value(h), heads, weights));
  const auto x1 = ops::add(x, attended);
  const auto m = fc2(ops::gelu(fc1(norm2(x1))));
  return ops::add(x1, m);
}

template <typename Real>
LatentEncoder<Real>::LatentEncoder(ParameterSet<Real>& ps, Initializer& init, const std::string& name, int in_ch,
                                   const std::vector<int>& filters, int convs_per_level, int latent_)
    : latent(latent_) {
  int ch = in_ch;
  for (std::size_t i = 0; i < filters.size(); ++i) {
    levels.emplace_back(ps, init, name + ".level" + std::to_string(i), ch, filters[i], convs_per_level);
    ch = filters[i];
  }
  head = Conv2d<Real>(ps, init, name + ".head", ch, 2 * latent, 1);
}

template <typename Real>
GaussianVars<Real> LatentEncoder<Real>::operator()(const Var<Real>& x) const {
  Var<Real> h = x;
  for (std::size_t i = 0; i < levels.size(); ++i) {
    if (i > 0) h = ops::max_pool2x2(h);
    h = levels[i](h);
  }
  const auto params = head(ops::global_avg_pool(h));
  GaussianVars<Real> out;
  out.mean = ops::slice_channels(params, 0, latent);
  out.log_var = ops::clamp(ops::slice_channels(params, latent, latent), Real(kLogVarMin), Real(kLogVarMax));
  return out;
}

// ---- combiners ----------------------------------------------------------------

template <typename Real>
FusionHead<Real>::FusionHead(ParameterSet<Real>& ps, Initializer& init, const std::string& name, int in_ch,
                             int feature_ch)
    : fc1(ps, init, name + ".fc1", in_ch, feature_ch, 1),
      fc2(ps, init, name + ".fc2", feature_ch, feature_ch, 1),
      out(ps, init, name + ".out", feature_ch, 1, 1) {}

template <typename Real>
Var<Real> FusionHead<Real>::operator()(const Var<Real>& x) const {
  return out(ops::relu(fc2(ops::relu(fc1(x)))));
}

template <typename Real>
TileCombiner<Real>::TileCombiner(ParameterSet<Real>& ps, Initializer& init, int feature_ch, int latent)
    : head_(ps, init, "combiner", feature_ch + latent, feature_ch) {}

template <typename Real>
Var<Real> TileCombiner<Real>::operator()(const Var<Real>& features, const Var<Real>& z) const {
  const Dims fd = features->dims();
  if (z->dims().n != fd.n) throw ShapeError("combiner: latent batch does not match features");
  return head_(ops::concat_channels(features, ops::tile_spatial(z, fd.h, fd.w)));
}

template <typename Real>
DeconvCombiner<Real>::DeconvCombiner(ParameterSet<Real>& ps, Initializer& init, int feature_ch, int latent, int size) {
  if (size < 1 || (size & (size - 1)) != 0)
    throw ConfigError("deconv combiner needs a power-of-two feature size, got " + std::to_string(size));
  int stages = 0;
  while ((1 << stages) < size) ++stages;
  for (int i = 0; i < stages; ++i)
    stages_.emplace_back(ps, init, "combiner.deconv" + std::to_string(i), latent, latent, 2, 2);
  head_ = FusionHead<Real>(ps, init, "combiner", feature_ch + latent, feature_ch);
}

template <typename Real>
Var<Real> DeconvCombiner<Real>::operator()(const Var<Real>& features, const Var<Real>& z) const {
  const Dims fd = features->dims();
  if (z->dims().n != fd.n) throw ShapeError("combiner: latent batch does not match features");
  Var<Real> grown = z;
  for (std::size_t i = 0; i < stages_.size(); ++i) {
    grown = stages_[i](grown);
    if (i + 1 < stages_.size()) grown = ops::relu(grown);
  }
  if (grown->dims().h != fd.h || grown->dims().w != fd.w)
    throw ShapeError("deconv combiner grew z to " + grown->dims().str() + " but features are " + fd.str());
  return head_(ops::concat_channels(features, grown));
}

// ---- instantiation ------------------------------------------------------------

#define WMHSEG_INSTANTIATE_LAYERS(R)                                                   \
  template class ParameterSet<R>;                                                      \
  template Tensor<R> Initializer::weights<R>(Dims, InitScheme, int);                   \
  template struct Conv2d<R>;                                                           \
  template struct ConvTranspose2d<R>;                                                  \
  template struct GroupNorm<R>;                                                        \
  template struct LayerNorm<R>;                                                        \
  template struct ConvStack<R>;                                                        \
  template struct PreActUnit<R>;                                                       \
  template struct TransformerBlock<R>;                                                 \
  template struct LatentEncoder<R>;                                                    \
  template struct FusionHead<R>;                                                       \
  template class TileCombiner<R>;                                                      \
  template class DeconvCombiner<R>;

WMHSEG_INSTANTIATE_LAYERS(float)
WMHSEG_INSTANTIATE_LAYERS(double)

#undef WMHSEG_INSTANTIATE_LAYERS

}  // namespace wmhseg::nets
