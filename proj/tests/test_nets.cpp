#include <doctest.h>

#include <cmath>
#include <functional>
#include <set>

#include "support.hpp"
#include "wmhseg/errors.hpp"
#include "wmhseg/model.hpp"
#include "wmhseg/objective.hpp"
#include "wmhseg/ops.hpp"

using namespace wmhseg;
using namespace wmhseg::nets;
using wmhseg::testing::gradient_check;
using wmhseg::testing::random_binary;
using wmhseg::testing::random_tensor;
using wmhseg::testing::tiny_config;

namespace {

/// Checks an op's gradients by reducing its output through BCE against a
/// fixed random target.
double op_gradcheck(const std::vector<Dims>& input_dims, const std::function<Var<double>(std::vector<Var<double>>&)>& op,
                    std::uint64_t seed = 1) {
  Rng rng(seed);
  ParameterSet<double> params;
  std::vector<Var<double>> inputs;
  for (std::size_t i = 0; i < input_dims.size(); ++i)
    inputs.push_back(params.add("in" + std::to_string(i), random_tensor<double>(input_dims[i], rng)));
  Tensor<double> target;
  auto loss = [&]() {
    auto out = op(inputs);
    if (target.empty()) target = random_binary<double>(out->dims(), rng, 0.5);
    return ops::bce_with_logits(out, target);
  };
  loss();
  return gradient_check(params, loss).worst;
}

}  // namespace

TEST_CASE("convolution matches a direct loop") {
  Rng rng(2);
  const auto x = random_tensor<double>({1, 5, 4, 2}, rng);
  const auto w = random_tensor<double>({3, 3, 2, 3}, rng);
  const auto b = random_tensor<double>({1, 1, 1, 3}, rng);
  const auto y = ops::conv2d(constant(x), constant(w), constant(b), 1, 1)->value;
  REQUIRE(y.dims() == Dims{1, 5, 4, 3});
  for (int oy = 0; oy < 5; ++oy)
    for (int ox = 0; ox < 4; ++ox)
      for (int co = 0; co < 3; ++co) {
        double ref = b[co];
        for (int ky = 0; ky < 3; ++ky)
          for (int kx = 0; kx < 3; ++kx)
            for (int ci = 0; ci < 2; ++ci) {
              const int iy = oy + ky - 1, ix = ox + kx - 1;
              if (iy < 0 || ix < 0 || iy >= 5 || ix >= 4) continue;
              ref += x(0, iy, ix, ci) * w(ky, kx, ci, co);
            }
        CHECK(y(0, oy, ox, co) == doctest::Approx(ref).epsilon(1e-12));
      }
}

TEST_CASE("transposed convolution scatters each input pixel into a 2x2 block") {
  Tensor<double> x({1, 1, 2, 1}, std::vector<double>{1.0, 2.0});
  Tensor<double> w({1, 2, 2, 1}, std::vector<double>{1.0, 2.0, 3.0, 4.0});
  Tensor<double> b({1, 1, 1, 1}, std::vector<double>{0.5});
  const auto y = ops::conv_transpose2d(constant(x), constant(w), constant(b), 2)->value;
  REQUIRE(y.dims() == Dims{1, 2, 4, 1});
  const std::vector<double> expected{1.5, 2.5, 2.5, 4.5, 3.5, 4.5, 6.5, 8.5};
  for (std::size_t i = 0; i < expected.size(); ++i) CHECK(y[i] == doctest::Approx(expected[i]));
}

TEST_CASE("op gradients match central differences") {
  const double tol = 1e-6;
  CHECK(op_gradcheck({{2, 5, 5, 3}, {3, 3, 3, 4}, {1, 1, 1, 4}},
                     [](auto& in) { return ops::conv2d(in[0], in[1], in[2], 1, 1); }) < tol);
  CHECK(op_gradcheck({{1, 6, 6, 2}, {3, 3, 2, 3}, {1, 1, 1, 3}},
                     [](auto& in) { return ops::conv2d(in[0], in[1], in[2], 2, 1); }) < tol);
  CHECK(op_gradcheck({{2, 3, 3, 3}, {1, 1, 3, 2}, {1, 1, 1, 2}},
                     [](auto& in) { return ops::conv2d(in[0], in[1], in[2], 1, 0); }) < tol);
  CHECK(op_gradcheck({{2, 3, 2, 3}, {3, 2, 2, 2}, {1, 1, 1, 2}},
                     [](auto& in) { return ops::conv_transpose2d(in[0], in[1], in[2], 2); }) < tol);
  CHECK(op_gradcheck({{2, 4, 4, 3}}, [](auto& in) { return ops::relu(in[0]); }) < tol);
  CHECK(op_gradcheck({{2, 4, 4, 3}}, [](auto& in) { return ops::gelu(in[0]); }) < tol);
  CHECK(op_gradcheck({{2, 4, 6, 3}}, [](auto& in) { return ops::max_pool2x2(in[0]); }) < tol);
  CHECK(op_gradcheck({{2, 3, 3, 2}}, [](auto& in) { return ops::upsample_nearest2x(in[0]); }) < tol);
  CHECK(op_gradcheck({{2, 3, 3, 2}, {2, 3, 3, 2}}, [](auto& in) { return ops::add(in[0], in[1]); }) < tol);
  CHECK(op_gradcheck({{2, 3, 3, 2}, {1, 3, 3, 2}}, [](auto& in) { return ops::add(in[0], in[1]); }) < tol);
  CHECK(op_gradcheck({{2, 3, 3, 2}, {2, 3, 3, 2}}, [](auto& in) { return ops::mul(in[0], in[1]); }) < tol);
  CHECK(op_gradcheck({{2, 3, 3, 2}}, [](auto& in) { return ops::exp(ops::scale(in[0], 0.5)); }) < tol);
  CHECK(op_gradcheck({{2, 3, 3, 2}}, [](auto& in) { return ops::clamp(in[0], -0.5, 0.5); }) < tol);
  CHECK(op_gradcheck({{2, 3, 3, 2}, {2, 3, 3, 3}}, [](auto& in) { return ops::concat_channels(in[0], in[1]); }) <
        tol);
  CHECK(op_gradcheck({{2, 3, 3, 5}}, [](auto& in) { return ops::slice_channels(in[0], 1, 3); }) < tol);
  CHECK(op_gradcheck({{2, 3, 3, 4}}, [](auto& in) { return ops::global_avg_pool(in[0]); }) < tol);
  CHECK(op_gradcheck({{2, 1, 1, 3}}, [](auto& in) { return ops::tile_spatial(in[0], 3, 2); }) < tol);
  CHECK(op_gradcheck({{2, 3, 3, 4}, {1, 1, 1, 4}, {1, 1, 1, 4}},
                     [](auto& in) { return ops::group_norm(in[0], in[1], in[2], 2); }) < tol);
  CHECK(op_gradcheck({{2, 3, 3, 4}, {1, 1, 1, 4}, {1, 1, 1, 4}},
                     [](auto& in) { return ops::layer_norm(in[0], in[1], in[2]); }) < tol);
  CHECK(op_gradcheck({{2, 2, 3, 4}, {2, 2, 3, 4}, {2, 2, 3, 4}},
                     [](auto& in) { return ops::multi_head_attention(in[0], in[1], in[2], 2); }) < tol);
}

TEST_CASE("KL op agrees with the closed form and its gradients") {
  Rng rng(8);
  ParameterSet<double> params;
  auto mq = params.add("mq", random_tensor<double>({3, 1, 1, 4}, rng));
  auto lq = params.add("lq", random_tensor<double>({3, 1, 1, 4}, rng));
  auto mp = params.add("mp", random_tensor<double>({3, 1, 1, 4}, rng));
  auto lp = params.add("lp", random_tensor<double>({3, 1, 1, 4}, rng));
  auto kl = [&] { return ops::kl_diag_gaussian(mq, lq, mp, lp); };
  double expected = 0;
  for (int b = 0; b < 3; ++b) {
    auto slice = [&](const Var<double>& v) { return std::span<const double>(v->value.data() + 4 * b, 4); };
    expected += objective::kl_divergence<double>(slice(mq), slice(lq), slice(mp), slice(lp));
  }
  CHECK(kl()->value[0] == doctest::Approx(expected / 3).epsilon(1e-12));
  CHECK(gradient_check(params, kl).worst < 1e-6);
}

TEST_CASE("attention weights are row-stochastic") {
  Rng rng(3);
  const auto q = constant(random_tensor<double>({1, 2, 2, 4}, rng));
  const auto k = constant(random_tensor<double>({1, 2, 2, 4}, rng));
  const auto v = constant(random_tensor<double>({1, 2, 2, 4}, rng));
  std::vector<double> weights;
  ops::multi_head_attention(q, k, v, 2, &weights);
  REQUIRE(weights.size() == 2 * 4 * 4);
  for (std::size_t row = 0; row < 8; ++row) {
    double sum = 0;
    for (std::size_t j = 0; j < 4; ++j) sum += weights[row * 4 + j];
    CHECK(sum == doctest::Approx(1.0));
  }
}

TEST_CASE("no graph is recorded under NoGradGuard") {
  auto p = parameter(Tensor<double>({1, 1, 1, 2}, 1.0));
  {
    NoGradGuard guard;
    CHECK_FALSE(NoGradGuard::grad_enabled());
    CHECK(ops::relu(p)->inputs.empty());
  }
  CHECK(NoGradGuard::grad_enabled());
  CHECK(ops::relu(p)->inputs.size() == 1);
}

TEST_CASE("model config presets, validation and text form") {
  const auto paper = ModelConfig::make(ModelKind::UNet, ScalePreset::Paper);
  CHECK(paper.input_size == 128);
  CHECK(paper.unet_filters == std::vector<int>{64, 128, 256, 512, 1024});
  const auto prob = ModelConfig::make(ModelKind::ProbUNet, ScalePreset::Paper);
  CHECK(prob.unet_filters == std::vector<int>{32, 64, 128, 256, 512});
  CHECK(prob.latent_dim == 6);
  CHECK(prob.combiner == CombinerKind::Tile);
  const auto pt = ModelConfig::make(ModelKind::ProbTransUNet, ScalePreset::Paper);
  CHECK(pt.combiner == CombinerKind::Deconv);
  CHECK(pt.hidden_dim == 768);
  CHECK(pt.heads == 12);
  CHECK(pt.mlp_dim == 3072);
  CHECK(pt.transformer_layers == 12);
  CHECK(pt.patch_grid() == 16);

  for (auto kind : kAllModelKinds)
    for (auto preset : {ScalePreset::Paper, ScalePreset::Desk}) {
      const auto c = ModelConfig::make(kind, preset);
      CHECK_NOTHROW(c.validate());
      CHECK(ModelConfig::parse(c.to_text()) == c);
      CHECK(c.hash().size() == 16);
    }

  auto c = ModelConfig::make(ModelKind::TransUNet, ScalePreset::Desk);
  const auto h = c.hash();
  c.set("heads", "8");
  CHECK(c.hash() != h);
  c.hidden_dim = 60;
  CHECK_THROWS_AS(c.validate(), ConfigError);

  auto u = ModelConfig::make(ModelKind::UNet, ScalePreset::Desk);
  u.input_size = 24;
  CHECK_THROWS_AS(u.validate(), ConfigError);
  u = ModelConfig::make(ModelKind::UNet, ScalePreset::Desk);
  u.latent_dim = 3;
  CHECK_THROWS_AS(u.validate(), ConfigError);
  u = ModelConfig::make(ModelKind::ProbUNet, ScalePreset::Desk);
  u.latent_dim = 0;
  CHECK_THROWS_AS(u.validate(), ConfigError);
  CHECK_THROWS_AS(u.set("nonsense", "1"), ConfigError);
  CHECK_THROWS_AS(parse_scale_preset("huge"), ConfigError);

  CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
}

TEST_CASE("every kind maps (B,H,W,1) to logits of the same shape") {
  for (auto kind : kAllModelKinds) {
    CAPTURE(to_string(kind));
    const auto cfg = ModelConfig::make(kind, ScalePreset::Desk);
    Model<float> model(cfg, 4);
    Rng rng(5);
    const auto x = random_tensor<float>({3, 32, 32, 1}, rng);
    const auto y = model.predict(x);
    CHECK(y.dims() == Dims{3, 32, 32, 1});
    for (float v : y.values()) CHECK(std::isfinite(v));
    CHECK_THROWS_AS(model.predict(Tensor<float>({1, 16, 16, 1})), ShapeError);
    if (is_probabilistic(kind)) {
      CHECK_THROWS_AS(model.forward_deterministic(x), ConfigError);
      const auto masks = random_binary<float>({3, 32, 32, 1}, rng);
      CHECK_THROWS_AS(model.forward_probabilistic(x, nullptr, Phase::Train, 1, SampleMode::Reparameterized, 0),
                      ConfigError);
      CHECK_THROWS_AS(model.forward_probabilistic(x, &masks, Phase::Infer, 2, SampleMode::Random, 0), ConfigError);
      const auto out = model.forward_probabilistic(x, nullptr, Phase::Infer, 3, SampleMode::Random, 0);
      CHECK(out.logits.size() == 3);
      CHECK_FALSE(out.posterior.has_value());
      CHECK(out.prior.mean->dims() == Dims{3, 1, 1, 6});
      const auto train = model.forward_probabilistic(x, &masks, Phase::Train, 1, SampleMode::Reparameterized, 0);
      CHECK(train.posterior.has_value());
      const auto prior = model.prior(x);
      for (float v : prior.log_var->value.values()) {
        CHECK(v >= -10.0f);
        CHECK(v <= 10.0f);
      }
      CHECK_THROWS_AS(model.combine(model.features(x), constant(Tensor<float>({3, 1, 1, 5}))), ShapeError);
    } else {
      CHECK_THROWS_AS(model.prior(x), ConfigError);
    }
  }
}

TEST_CASE("parameter names follow the architecture") {
  Model<float> unet(ModelConfig::make(ModelKind::UNet, ScalePreset::Desk), 0);
  CHECK(unet.parameters().find("encoder.level0.conv0.weight"));
  CHECK(unet.parameters().find("decoder.up0.weight"));
  CHECK(unet.parameters().find("head.weight"));
  CHECK_FALSE(unet.parameters().find("prior.head.weight"));
  CHECK(unet.parameters().find("encoder.level0.conv0.weight")->value.dims() == Dims{3, 3, 1, 16});

  Model<float> pt(ModelConfig::make(ModelKind::ProbTransUNet, ScalePreset::Desk), 0);
  for (const char* name : {"backbone.root.weight", "embed.patch.weight", "embed.position", "encoder.block0.attn.query.weight",
                           "encoder.block11.mlp.fc2.bias", "encoder.norm.gamma", "decoder.conv_more.weight",
                           "prior.head.weight", "posterior.level0.conv0.weight", "combiner.deconv0.weight",
                           "combiner.out.weight"})
    CHECK_MESSAGE(pt.parameters().find(name), name);
  CHECK(pt.parameters().find("posterior.level0.conv0.weight")->value.dims().n == 3);
  CHECK(pt.parameters().find("posterior.level0.conv0.weight")->value.dims().h == 3);
  CHECK(pt.parameters().find("posterior.level0.conv0.weight")->value.dims().w == 2);
}

TEST_CASE("latent combiners") {
  for (int size : {32, 64}) {
    auto cfg = ModelConfig::make(ModelKind::ProbUNet, ScalePreset::Desk);
    cfg.input_size = size;
    cfg.combiner = CombinerKind::Deconv;
    Model<float> m(cfg, 1);
    CHECK(m.combiner()->deconv_stages() == static_cast<int>(std::log2(size)));
    cfg.combiner = CombinerKind::Tile;
    Model<float> t(cfg, 1);
    CHECK(t.combiner()->deconv_stages() == 0);
  }
}

TEST_CASE("sampling modes") {
  DiagGaussian d{{1.0, -2.0}, {0.0, std::log(4.0)}};
  CHECK(sample_latent(d, SampleMode::Mean, 3) == d.mean);
  const auto a = sample_latent(d, SampleMode::Random, 3);
  CHECK(a == sample_latent(d, SampleMode::Random, 3));
  CHECK(a != sample_latent(d, SampleMode::Random, 4));
  CHECK(a == sample_latent(d, SampleMode::Reparameterized, 3));
  // z = mean + sigma * eps with eps from Rng(3)
  Rng rng(3);
  const double e0 = rng.normal(), e1 = rng.normal();
  CHECK(a[0] == doctest::Approx(1.0 + e0));
  CHECK(a[1] == doctest::Approx(-2.0 + 2.0 * e1));
  Rng moments(11);
  double sum = 0, sq = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double z = sample_latent(d, SampleMode::Random, moments.next_u64())[1];
    sum += z;
    sq += z * z;
  }
  CHECK(sum / n == doctest::Approx(-2.0).epsilon(0.03));
  CHECK(sq / n - (sum / n) * (sum / n) == doctest::Approx(4.0).epsilon(0.05));
}

TEST_CASE("inference is deterministic and mean mode ignores the seed") {
  const auto cfg = ModelConfig::make(ModelKind::ProbUNet, ScalePreset::Desk);
  Model<float> m(cfg, 2);
  Rng rng(6);
  const auto x = random_tensor<float>({2, 32, 32, 1}, rng);
  NoGradGuard guard;
  const auto a = m.forward_probabilistic(x, nullptr, Phase::Infer, 1, SampleMode::Mean, 1);
  const auto b = m.forward_probabilistic(x, nullptr, Phase::Infer, 1, SampleMode::Mean, 99);
  CHECK(a.logits[0]->value.storage() == b.logits[0]->value.storage());
  CHECK(m.predict(x).storage() == a.logits[0]->value.storage());
  Model<float> again(cfg, 2);
  CHECK(again.predict(x).storage() == m.predict(x).storage());
}

TEST_CASE("parameter export and import") {
  const auto cfg = ModelConfig::make(ModelKind::TransUNet, ScalePreset::Desk);
  Model<float> a(cfg, 1), b(cfg, 2);
  Rng rng(7);
  const auto x = random_tensor<float>({1, 32, 32, 1}, rng);
  CHECK(a.predict(x).storage() != b.predict(x).storage());
  b.import_params(a.export_params());
  CHECK(a.predict(x).storage() == b.predict(x).storage());

  auto blobs = a.export_params();
  blobs.pop_back();
  CHECK_THROWS_AS(b.import_params(blobs), FormatError);
  blobs = a.export_params();
  blobs[0].dims[3] += 1;
  CHECK_THROWS_AS(b.import_params(blobs), FormatError);
  Model<float> other(ModelConfig::make(ModelKind::UNet, ScalePreset::Desk), 1);
  CHECK_THROWS_AS(other.import_params(a.export_params()), FormatError);
}

TEST_CASE("tiny models pass a whole-model gradient check") {
  for (auto kind : kAllModelKinds) {
    CAPTURE(to_string(kind));
    Model<double> m(tiny_config(kind), 3);
    wmhseg::testing::perturb_parameters(m.parameters(), 5);
    Rng rng(1);
    const auto x = random_tensor<double>({2, 8, 8, 1}, rng);
    const auto y = random_binary<double>({2, 8, 8, 1}, rng);
    const auto res = gradient_check(m.parameters(), [&] { return m.loss(x, y, 1.0, 11).total; });
    CAPTURE(res.worst_name);
    CHECK(res.worst < 1e-4);
  }
}
