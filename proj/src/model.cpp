#include "wmhseg/model.hpp"

#include <cmath>

#include "wmhseg/errors.hpp"

namespace wmhseg::nets {

std::vector<double> sample_latent(const DiagGaussian& dist, SampleMode mode, std::uint64_t seed) {
  if (mode == SampleMode::Mean) return dist.mean;
  if (dist.log_var.size() != dist.mean.size()) throw ShapeError("sample_latent: mean/log_var size mismatch");
  Rng rng(seed);
  std::vector<double> z(dist.dim());
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = dist.mean[i] + std::exp(0.5 * dist.log_var[i]) * rng.normal();
  return z;
}

template <typename Real>
struct Model<Real>::Trunk {
  bool transformer = false;
  std::vector<int> filters;

  // convolutional path
  std::vector<ConvStack<Real>> encoder;
  std::vector<ConvTranspose2d<Real>> up;

  // transformer path
  Conv2d<Real> root;
  GroupNorm<Real> root_norm;
  std::vector<std::vector<PreActUnit<Real>>> stages;
  GroupNorm<Real> final_norm;
  Conv2d<Real> embed;
  Var<Real> position;
  std::vector<TransformerBlock<Real>> blocks;
  LayerNorm<Real> encoder_norm;
  Conv2d<Real> conv_more;

  std::vector<ConvStack<Real>> decoder;  // indexed by level; the deepest level has none

  Trunk(const ModelConfig& c, ParameterSet<Real>& ps, Initializer& init) : transformer(is_transformer(c.kind)) {
    filters = c.level_filters();
    const int levels = static_cast<int>(filters.size());
    if (!transformer) {
      for (int i = 0; i < levels; ++i)
        encoder.emplace_back(ps, init, "encoder.level" + std::to_string(i), i == 0 ? 1 : filters[i - 1], filters[i],
                             c.convs_per_level);
      up.resize(levels - 1);
      decoder.resize(levels - 1);
      for (int i = levels - 2; i >= 0; --i) {
        up[i] = ConvTranspose2d<Real>(ps, init, "decoder.up" + std::to_string(i), filters[i + 1], filters[i]);
        decoder[i] = ConvStack<Real>(ps, init, "decoder.level" + std::to_string(i), 2 * filters[i], filters[i],
                                     c.convs_per_level);
      }
      return;
    }

    root = Conv2d<Real>(ps, init, "backbone.root", 1, filters[0], 3);
    root_norm = GroupNorm<Real>(ps, "backbone.root_norm", filters[0]);
    for (int i = 1; i < levels; ++i) {
      std::vector<PreActUnit<Real>> units;
      for (int u = 0; u < c.backbone_units[i - 1]; ++u)
        units.emplace_back(ps, init, "backbone.stage" + std::to_string(i) + ".unit" + std::to_string(u),
                           u == 0 ? filters[i - 1] : filters[i], filters[i], u == 0 ? 2 : 1);
      stages.push_back(std::move(units));
    }
    final_norm = GroupNorm<Real>(ps, "backbone.final_norm", filters.back());
    embed = Conv2d<Real>(ps, init, "embed.patch", filters.back(), c.hidden_dim, 1, 1, InitScheme::TruncNormal);
    const int grid = c.patch_grid();
    position = ps.add("embed.position",
                      init.weights<Real>(Dims{1, grid, grid, c.hidden_dim}, InitScheme::TruncNormal, 1));
    for (int l = 0; l < c.transformer_layers; ++l)
      blocks.emplace_back(ps, init, "encoder.block" + std::to_string(l), c.hidden_dim, c.heads, c.mlp_dim);
    encoder_norm = LayerNorm<Real>(ps, "encoder.norm", c.hidden_dim);
    conv_more = Conv2d<Real>(ps, init, "decoder.conv_more", c.hidden_dim, filters.back(), 3);
    decoder.resize(levels - 1);
    for (int i = levels - 2; i >= 0; --i)
      decoder[i] = ConvStack<Real>(ps, init, "decoder.level" + std::to_string(i), filters[i + 1] + filters[i],
                                   filters[i], 2);
  }

  Var<Real> forward(const Var<Real>& x, ModelTrace<Real>* trace) const {
    const int levels = static_cast<int>(filters.size());
    std::vector<Var<Real>> skips;
    Var<Real> h;
    if (!transformer) {
      h = encoder[0](x);
      for (int i = 1; i < levels; ++i) {
        skips.push_back(h);
        h = encoder[i](ops::max_pool2x2(h));
      }
      for (int i = levels - 2; i >= 0; --i) h = decoder[i](ops::concat_channels(skips[i], up[i](h)));
      return h;
    }

    h = ops::relu(root_norm(root(x)));
    skips.push_back(h);
    for (std::size_t s = 0; s < stages.size(); ++s) {
      for (const auto& unit : stages[s]) h = unit(h);
      if (s + 1 < stages.size()) skips.push_back(h);
    }
    h = ops::add(embed(ops::relu(final_norm(h))), position);
    if (trace) {
      trace->tokens = h->dims();
      trace->attention.assign(blocks.size(), {});
    }
    for (std::size_t l = 0; l < blocks.size(); ++l) h = blocks[l](h, trace ? &trace->attention[l] : nullptr);
    h = ops::relu(conv_more(encoder_norm(h)));
    for (int i = levels - 2; i >= 0; --i)
      h = decoder[i](ops::concat_channels(ops::upsample_nearest2x(h), skips[i]));
    return h;
  }
};

template <typename Real>
Model<Real>::Model(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Initializer init(seed);
  trunk_ = std::make_unique<Trunk>(config_, params_, init);
  const int fc = config_.feature_channels();
  if (!is_probabilistic(config_.kind)) {
    head_ = Conv2d<Real>(params_, init, "head", fc, 1, 1);
    return;
  }
  const auto& enc_filters = config_.level_filters();
  prior_net_.emplace(params_, init, "prior", 1, enc_filters, config_.convs_per_level, config_.latent_dim);
  posterior_net_.emplace(params_, init, "posterior", 2, enc_filters, config_.convs_per_level, config_.latent_dim);
  if (config_.combiner == CombinerKind::Tile)
    combiner_ = std::make_unique<TileCombiner<Real>>(params_, init, fc, config_.latent_dim);
  else
    combiner_ = std::make_unique<DeconvCombiner<Real>>(params_, init, fc, config_.latent_dim, config_.input_size);
}

template <typename Real>
Model<Real>::~Model() = default;
template <typename Real>
Model<Real>::Model(Model&&) noexcept = default;
template <typename Real>
Model<Real>& Model<Real>::operator=(Model&&) noexcept = default;

template <typename Real>
void Model<Real>::check_images(const Tensor<Real>& images) const {
  const Dims d = images.dims();
  if (d.n < 1 || d.h != config_.input_size || d.w != config_.input_size || d.c != 1)
    throw ShapeError("model expects (B," + std::to_string(config_.input_size) + "," +
                     std::to_string(config_.input_size) + ",1) images, got " + d.str());
}

template <typename Real>
Var<Real> Model<Real>::features(const Tensor<Real>& images, ModelTrace<Real>* trace) const {
  check_images(images);
  return trunk_->forward(constant(images), trace);
}

template <typename Real>
Var<Real> Model<Real>::forward_deterministic(const Tensor<Real>& images) const {
  if (is_probabilistic(config_.kind))
    throw ConfigError("forward_deterministic called on probabilistic kind " + std::string(to_string(config_.kind)));
  return head_(features(images));
}

template <typename Real>
GaussianVars<Real> Model<Real>::prior(const Tensor<Real>& images) const {
  if (!prior_net_) throw ConfigError("prior net requested on deterministic kind " + std::string(to_string(config_.kind)));
  check_images(images);
  return (*prior_net_)(constant(images));
}

template <typename Real>
GaussianVars<Real> Model<Real>::posterior(const Tensor<Real>& images, const Tensor<Real>& masks) const {
  if (!posterior_net_)
    throw ConfigError("posterior net requested on deterministic kind " + std::string(to_string(config_.kind)));
  check_images(images);
  if (masks.dims() != images.dims())
    throw ShapeError("posterior: masks " + masks.dims().str() + " do not match images " + images.dims().str());
  return (*posterior_net_)(ops::concat_channels(constant(images), constant(masks)));
}

template <typename Real>
Var<Real> Model<Real>::combine(const Var<Real>& feats, const Var<Real>& z) const {
  if (!combiner_) throw ConfigError("combine called on deterministic kind");
  if (z->dims().c != config_.latent_dim || z->dims().h != 1 || z->dims().w != 1)
    throw ShapeError("combine: z must be (B,1,1," + std::to_string(config_.latent_dim) + "), got " + z->dims().str());
  return (*combiner_)(feats, z);
}

template <typename Real>
Var<Real> Model<Real>::latent_sample(const GaussianVars<Real>& dist, SampleMode mode, std::uint64_t seed) const {
  if (mode == SampleMode::Mean) return dist.mean;
  Tensor<Real> eps(dist.mean->dims());
  Rng rng(seed);
  for (auto& v : eps.storage()) v = static_cast<Real>(rng.normal());
  if (mode == SampleMode::Random) {
    Tensor<Real> z(dist.mean->dims());
    for (std::size_t i = 0; i < z.size(); ++i)
      z[i] = dist.mean->value[i] + std::exp(Real(0.5) * dist.log_var->value[i]) * eps[i];
    return constant(std::move(z));
  }
  const auto stdev = ops::exp(ops::scale(dist.log_var, Real(0.5)));
  return ops::add(dist.mean, ops::mul(stdev, constant(std::move(eps))));
}

template <typename Real>
ProbOutput<Real> Model<Real>::forward_probabilistic(const Tensor<Real>& images, const Tensor<Real>* masks,
                                                    Phase phase, int n_samples, SampleMode mode,
                                                    std::uint64_t seed) const {
  if (!is_probabilistic(config_.kind))
    throw ConfigError("forward_probabilistic called on deterministic kind " + std::string(to_string(config_.kind)));
  if (phase == Phase::Train && !masks) throw ConfigError("train phase requires masks");
  if (phase == Phase::Infer && masks) throw ConfigError("infer phase must not receive masks");
  if (n_samples < 1) throw ConfigError("n_samples must be >= 1");
  if (phase == Phase::Train && n_samples != 1) throw ConfigError("train phase draws exactly one sample");

  ProbOutput<Real> out;
  const auto feats = features(images);
  out.prior = prior(images);
  if (phase == Phase::Train) {
    out.posterior = posterior(images, *masks);
    out.logits.push_back(combine(feats, latent_sample(*out.posterior, mode, seed)));
    return out;
  }
  for (int i = 0; i < n_samples; ++i)
    out.logits.push_back(combine(feats, latent_sample(out.prior, mode, mix_seed(seed, static_cast<std::uint64_t>(i)))));
  return out;
}

template <typename Real>
LossGraph<Real> Model<Real>::loss(const Tensor<Real>& images, const Tensor<Real>& masks, double beta,
                                  std::uint64_t seed) const {
  LossGraph<Real> g;
  if (!is_probabilistic(config_.kind)) {
    g.ce = ops::bce_with_logits(forward_deterministic(images), masks);
    g.total = g.ce;
    return g;
  }
  const auto out = forward_probabilistic(images, &masks, Phase::Train, 1, SampleMode::Reparameterized, seed);
  g.ce = ops::bce_with_logits(out.logits.front(), masks);
  g.kl = ops::kl_diag_gaussian(out.posterior->mean, out.posterior->log_var, out.prior.mean, out.prior.log_var);
  g.total = ops::add(g.ce, ops::scale(g.kl, static_cast<Real>(beta)));
  return g;
}

template <typename Real>
Tensor<Real> Model<Real>::predict(const Tensor<Real>& images) const {
  NoGradGuard guard;
  if (!is_probabilistic(config_.kind)) return forward_deterministic(images)->value;
  const auto out = forward_probabilistic(images, nullptr, Phase::Infer, 1, SampleMode::Mean, 0);
  return out.logits.front()->value;
}

template <typename Real>
std::vector<data::ParamBlob> Model<Real>::export_params() const {
  std::vector<data::ParamBlob> out;
  out.reserve(params_.size());
  for (const auto& [name, var] : params_.entries()) {
    const Dims d = var->dims();
    data::ParamBlob blob;
    blob.name = name;
    blob.dims = {static_cast<std::uint32_t>(d.n), static_cast<std::uint32_t>(d.h), static_cast<std::uint32_t>(d.w),
                 static_cast<std::uint32_t>(d.c)};
    blob.data.assign(var->value.storage().begin(), var->value.storage().end());
    out.push_back(std::move(blob));
  }
  return out;
}

template <typename Real>
void Model<Real>::import_params(const std::vector<data::ParamBlob>& blobs) {
  const auto& entries = params_.entries();
  if (blobs.size() != entries.size())
    throw FormatError(FormatErrorKind::SizeMismatch, "checkpoint holds " + std::to_string(blobs.size()) +
                                                         " parameters, model expects " +
                                                         std::to_string(entries.size()));
  for (std::size_t i = 0; i < blobs.size(); ++i) {
    const auto& [name, var] = entries[i];
    const auto& blob = blobs[i];
    const Dims d = var->dims();
    const std::vector<std::uint32_t> want{static_cast<std::uint32_t>(d.n), static_cast<std::uint32_t>(d.h),
                                          static_cast<std::uint32_t>(d.w), static_cast<std::uint32_t>(d.c)};
    if (blob.name != name || blob.dims != want || blob.data.size() != var->value.size())
      throw FormatError(FormatErrorKind::SizeMismatch,
                        "checkpoint parameter '" + blob.name + "' does not match model parameter '" + name + "'");
  }
  for (std::size_t i = 0; i < blobs.size(); ++i) {
    auto& storage = entries[i].second->value.storage();
    for (std::size_t j = 0; j < storage.size(); ++j) storage[j] = static_cast<Real>(blobs[i].data[j]);
  }
}

template <typename Real>
std::vector<DiagGaussian> Model<Real>::to_distributions(const GaussianVars<Real>& vars) {
  const Dims d = vars.mean->dims();
  std::vector<DiagGaussian> out(d.n);
  for (int b = 0; b < d.n; ++b) {
    for (int l = 0; l < d.c; ++l) {
      out[b].mean.push_back(static_cast<double>(vars.mean->value(b, 0, 0, l)));
      out[b].log_var.push_back(static_cast<double>(vars.log_var->value(b, 0, 0, l)));
    }
  }
  return out;
}

template <typename Real>
Tensor<Real> stack_images(const std::vector<const data::Slice2D*>& slices) {
  if (slices.empty()) throw ShapeError("stack_images: empty batch");
  const auto h = slices.front()->height, w = slices.front()->width;
  Tensor<Real> t(Dims{static_cast<int>(slices.size()), static_cast<int>(h), static_cast<int>(w), 1});
  for (std::size_t b = 0; b < slices.size(); ++b) {
    if (slices[b]->height != h || slices[b]->width != w) throw ShapeError("stack_images: slices differ in size");
    std::copy(slices[b]->pixels.begin(), slices[b]->pixels.end(), t.data() + b * h * w);
  }
  return t;
}

template <typename Real>
Tensor<Real> stack_masks(const std::vector<const data::Mask2D*>& masks) {
  if (masks.empty()) throw ShapeError("stack_masks: empty batch");
  const auto h = masks.front()->height, w = masks.front()->width;
  Tensor<Real> t(Dims{static_cast<int>(masks.size()), static_cast<int>(h), static_cast<int>(w), 1});
  for (std::size_t b = 0; b < masks.size(); ++b) {
    if (masks[b]->height != h || masks[b]->width != w) throw ShapeError("stack_masks: masks differ in size");
    for (std::size_t i = 0; i < masks[b]->values.size(); ++i)
      t[b * h * w + i] = masks[b]->values[i] ? Real(1) : Real(0);
  }
  return t;
}

template class Model<float>;
template class Model<double>;
template Tensor<float> stack_images<float>(const std::vector<const data::Slice2D*>&);
template Tensor<double> stack_images<double>(const std::vector<const data::Slice2D*>&);
template Tensor<float> stack_masks<float>(const std::vector<const data::Mask2D*>&);
template Tensor<double> stack_masks<double>(const std::vector<const data::Mask2D*>&);

}  // namespace wmhseg::nets
