#include <doctest.h>

#include <cmath>
#include <vector>

#include "wmhseg/errors.hpp"
#include "wmhseg/objective.hpp"
#include "wmhseg/rng.hpp"

using namespace wmhseg;
using namespace wmhseg::objective;
using data::Mask2D;

TEST_CASE("confusion counts every pixel once") {
  Mask2D pred(2, 3), truth(2, 3);
  pred.values = {1, 1, 0, 0, 1, 0};
  truth.values = {1, 0, 1, 0, 1, 0};
  const auto c = confusion(pred, truth);
  CHECK(c.tp == 2);
  CHECK(c.fp == 1);
  CHECK(c.fn == 1);
  CHECK(c.tn == 2);
  CHECK(c.total() == 6);
  CHECK(dsc(c) == doctest::Approx(4.0 / 6.0));
  CHECK_THROWS_AS(confusion(pred, Mask2D(3, 2)), ShapeError);
}

TEST_CASE("dsc edge cases") {
  CHECK(dsc(ConfusionCounts{0, 0, 0, 10}) == 1.0);
  CHECK(dsc(ConfusionCounts{0, 3, 0, 7}) == 0.0);
  CHECK(dsc(ConfusionCounts{0, 0, 4, 6}) == 0.0);
  CHECK(dsc(ConfusionCounts{5, 0, 0, 5}) == 1.0);
}

TEST_CASE("binarize thresholds the sigmoid inclusively") {
  const std::vector<float> logits{-1.0f, 0.0f, 1.0f, 3.0f};
  CHECK(binarize(logits, 2, 2).values == std::vector<std::uint8_t>{0, 1, 1, 1});
  CHECK(binarize(logits, 2, 2, 0.9).values == std::vector<std::uint8_t>{0, 0, 0, 1});
  CHECK_THROWS_AS(binarize(logits, 3, 2), ShapeError);
}

TEST_CASE("cross entropy matches the naive formula and stays finite") {
  const std::vector<double> logits{-2.0, 0.5, 3.0};
  const std::vector<double> targets{0.0, 1.0, 1.0};
  double expected = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    const double p = 1.0 / (1.0 + std::exp(-logits[i]));
    expected -= targets[i] * std::log(p) + (1 - targets[i]) * std::log(1 - p);
  }
  CHECK(cross_entropy<double>(logits, targets) == doctest::Approx(expected / 3).epsilon(1e-12));
  const std::vector<double> extreme{800.0, -800.0};
  const std::vector<double> wrong{0.0, 1.0};
  CHECK(cross_entropy<double>(extreme, wrong) == doctest::Approx(800.0));
  CHECK_THROWS_AS(cross_entropy<double>(logits, wrong), ShapeError);
}

TEST_CASE("KL divergence closed form") {
  DiagGaussian q{{0.0}, {0.0}}, p{{0.0}, {0.0}};
  CHECK(kl_divergence(q, p) == 0.0);
  // KL(N(1, 1) || N(0, 1)) = 0.5
  q.mean = {1.0};
  CHECK(kl_divergence(q, p) == doctest::Approx(0.5));
  // KL(N(0, e) || N(0, 1)) = 0.5 (e - 1 - 1)
  q = {{0.0}, {1.0}};
  CHECK(kl_divergence(q, p) == doctest::Approx(0.5 * (std::exp(1.0) - 2.0)));
  Rng rng(4);
  for (int t = 0; t < 20; ++t) {
    DiagGaussian a{{}, {}}, b{{}, {}};
    for (int d = 0; d < 4; ++d) {
      a.mean.push_back(rng.normal());
      a.log_var.push_back(rng.normal());
      b.mean.push_back(rng.normal());
      b.log_var.push_back(rng.normal());
    }
    CHECK(kl_divergence(a, b) >= 0.0);
  }
  CHECK_THROWS_AS(kl_divergence(DiagGaussian{{0.0}, {0.0}}, DiagGaussian{{0.0, 1.0}, {0.0, 0.0}}), ShapeError);
}

TEST_CASE("total loss by kind") {
  const auto det = total_loss(0.3, 5.0, 2.0, ModelKind::UNet);
  CHECK(det.total == 0.3);
  CHECK(det.kl == 0.0);
  const auto prob = total_loss(0.3, 5.0, 2.0, ModelKind::ProbTransUNet);
  CHECK(prob.total == doctest::Approx(10.3));
  CHECK(prob.beta == 2.0);
}

TEST_CASE("summary uses population standard deviation") {
  const std::vector<double> v{1.0, 2.0, 3.0, 4.0};
  const auto s = summarize(v);
  CHECK(s.mean == 2.5);
  CHECK(s.std == doctest::Approx(std::sqrt(1.25)));
  CHECK(s.n == 4);
  const std::vector<double> one{0.7};
  CHECK(summarize(one).std == 0.0);
}
