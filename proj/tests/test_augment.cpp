#include <doctest.h>

#include <cmath>
#include <numeric>

#include "support.hpp"
#include "wmhseg/augment.hpp"
#include "wmhseg/errors.hpp"

using namespace wmhseg;
using namespace wmhseg::augment;
using wmhseg::testing::ScratchDir;

namespace {

Slice2D ramp(std::uint32_t h, std::uint32_t w) {
  Slice2D s(h, w);
  for (std::uint32_t r = 0; r < h; ++r)
    for (std::uint32_t c = 0; c < w; ++c) s.at(r, c) = static_cast<float>(r * w + c);
  return s;
}

}  // namespace

TEST_CASE("zscore gives zero mean and unit population std") {
  const auto z = zscore_normalize(ramp(6, 5));
  double mean = 0, sq = 0;
  for (float v : z.pixels) mean += v;
  mean /= z.size();
  for (float v : z.pixels) sq += (v - mean) * (v - mean);
  CHECK(mean == doctest::Approx(0.0).epsilon(1e-6));
  CHECK(std::sqrt(sq / z.size()) == doctest::Approx(1.0).epsilon(1e-6));

  const auto flat = zscore_normalize(Slice2D(4, 4, 3.0f));
  for (float v : flat.pixels) CHECK(v == 0.0f);
}

TEST_CASE("hflip mirrors columns and is an involution") {
  const auto s = ramp(3, 4);
  Mask2D m(3, 4);
  m.at(1, 0) = 1;
  const auto [fs, fm] = hflip(s, m);
  CHECK(fs.at(0, 0) == s.at(0, 3));
  CHECK(fm.at(1, 3) == 1);
  CHECK(fm.count_ones() == 1);
  const auto [bs, bm] = hflip(fs, fm);
  CHECK(bit_equal(bs, s));
  CHECK(bm == m);
  CHECK_THROWS_AS(hflip(s, Mask2D(4, 3)), ShapeError);
}

TEST_CASE("rotation by 90 degrees turns counter-clockwise") {
  Slice2D s(5, 5);
  Mask2D m(5, 5);
  s.at(0, 4) = 1.0f;  // top right
  m.at(0, 4) = 1;
  const auto [rs, rm] = rotate(s, m, 90.0);
  CHECK(rs.at(0, 0) == doctest::Approx(1.0f));  // moves to top left
  CHECK(rm.at(0, 0) == 1);
  CHECK(rm.count_ones() == 1);
  const auto [zs, zm] = rotate(s, m, 0.0);
  CHECK(bit_equal(zs, s));
  CHECK(rotation_tag(10.0) == "rot+10");
  CHECK(rotation_tag(-7.5) == "rot-7.5");
}

TEST_CASE("small rotations keep most of a centred blob") {
  Slice2D s(32, 32);
  Mask2D m(32, 32);
  for (std::uint32_t r = 12; r < 20; ++r)
    for (std::uint32_t c = 12; c < 20; ++c) m.at(r, c) = 1, s.at(r, c) = 1.0f;
  for (double a : {-10.0, 10.0}) {
    const auto [rs, rm] = rotate(s, m, a);
    CHECK(std::abs(static_cast<double>(rm.count_ones()) - 64.0) <= 8.0);
    CHECK(rs.at(16, 16) == doctest::Approx(1.0f));
  }
}

TEST_CASE("rescale_and_pad centres content and keeps aspect") {
  const auto s = ramp(4, 8);
  const auto out = rescale_and_pad(s, 16);
  CHECK(out.height == 16);
  CHECK(out.width == 16);
  // 8 wide -> 16 wide, 4 high -> 8 high, 4 rows of padding above
  CHECK(out.at(0, 5) == 0.0f);
  CHECK(out.at(3, 5) == 0.0f);
  CHECK(out.at(4, 0) == doctest::Approx(0.0f));
  CHECK(out.at(11, 15) == doctest::Approx(31.0f));
  CHECK(out.at(12, 8) == 0.0f);

  Mask2D m(4, 8);
  m.at(0, 0) = 1;
  const auto mo = rescale_and_pad(m, 16);
  CHECK(mo.count_ones() == 4);
  CHECK(mo.at(4, 0) == 1);
  CHECK(mo.at(5, 1) == 1);
  CHECK_THROWS_AS(rescale_and_pad(Slice2D(), 16), ShapeError);
}

TEST_CASE("policy validation") {
  AugmentPolicy p;
  CHECK(p.variants_per_slice() == 4);
  CHECK_NOTHROW(p.validate());
  p.target_size = 100;
  CHECK_THROWS_AS(p.validate(), ConfigError);
  p = AugmentPolicy::preprocessing_only(64);
  CHECK(p.variants_per_slice() == 1);
  p.rotation_degrees = {270.0};
  CHECK_THROWS_AS(p.validate(), ConfigError);
}

TEST_CASE("synthetic samples are seeded and lesions lie inside the image") {
  SynthConfig cfg;
  cfg.image_size = 32;
  Rng a(5), b(5), c(6);
  const auto s1 = synth_sample(cfg, a);
  const auto s2 = synth_sample(cfg, b);
  const auto s3 = synth_sample(cfg, c);
  CHECK(bit_equal(s1.image, s2.image));
  CHECK(s1.mask == s2.mask);
  CHECK_FALSE(bit_equal(s1.image, s3.image));
  CHECK(s1.mask.count_ones() > 0);
  CHECK(s1.rater2.size() == 0);
  for (std::size_t i = 0; i < s1.mask.size(); ++i)
    if (s1.mask.values[i]) CHECK(s1.image.pixels[i] >= cfg.lesion_intensity_min);
}

TEST_CASE("second rater differs only near the first mask boundary") {
  SynthConfig cfg;
  cfg.image_size = 64;
  cfg.ambiguity_jitter = 2;
  std::size_t differing = 0;
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    Rng rng(seed);
    const auto s = synth_sample(cfg, rng);
    REQUIRE(s.rater2.size() == s.mask.size());
    for (std::uint32_t r = 0; r < 64; ++r)
      for (std::uint32_t c = 0; c < 64; ++c) {
        if (s.mask.at(r, c) == s.rater2.at(r, c)) continue;
        ++differing;
        // some pixel of the opposite label lies within the jitter radius
        bool near = false;
        for (int dr = -2; dr <= 2 && !near; ++dr)
          for (int dc = -2; dc <= 2 && !near; ++dc) {
            const int rr = static_cast<int>(r) + dr, cc = static_cast<int>(c) + dc;
            if (rr < 0 || cc < 0 || rr >= 64 || cc >= 64) continue;
            if (std::hypot(dr, dc) > 2.0) continue;
            near = s.mask.at(rr, cc) != s.mask.at(r, c);
          }
        CHECK(near);
      }
  }
  CHECK(differing > 0);
}

TEST_CASE("synth_generate writes a loadable manifest and is reproducible") {
  ScratchDir dir("synth");
  SynthConfig cfg;
  cfg.n_patients = 2;
  cfg.slices_per_patient = 3;
  cfg.image_size = 32;
  cfg.ambiguity_jitter = 1;
  cfg.seed = 9;
  const auto r1 = synth_generate(cfg, dir / "a");
  const auto r2 = synth_generate(cfg, dir / "b");
  CHECK(r1.manifest.size() == 6);
  REQUIRE(r1.multi_rater.has_value());
  CHECK(r1.multi_rater->size() == 12);
  const auto loaded = data::load_manifest(r1.manifest_path);
  CHECK(loaded.size() == 6);
  CHECK(loaded.records[4].meta.patient_id == "P001");
  for (std::size_t i = 0; i < 6; ++i)
    CHECK(data::read_file_bytes(r1.manifest.records[i].image_path) ==
          data::read_file_bytes(r2.manifest.records[i].image_path));

  cfg.n_patients = 0;
  CHECK_THROWS_AS(synth_generate(cfg, dir / "c"), ConfigError);
}

TEST_CASE("augment_dataset emits every variant, preprocessed") {
  ScratchDir dir("augment");
  SynthConfig cfg;
  cfg.n_patients = 1;
  cfg.slices_per_patient = 2;
  cfg.image_size = 48;
  const auto raw = synth_generate(cfg, dir / "raw");
  const auto out = augment_dataset(raw.manifest, AugmentPolicy{true, {-10.0, 10.0}, 32, true}, 0, dir / "aug");
  REQUIRE(out.size() == 8);
  CHECK(out.records[1].id == "p000_s000__hflip");
  CHECK(out.records[2].meta.augmentation_tag == "rot-10");
  const auto img = data::read_slice(out.records[0].image_path);
  CHECK(img.height == 32);
  CHECK(img.meta == out.records[0].meta);
  CHECK(data::load_manifest(dir / "aug" / "manifest.tsv").size() == 8);

  const auto plain = augment_dataset(raw.manifest, AugmentPolicy{}, 0, dir / "eval", false);
  CHECK(plain.size() == 2);
  const auto again = augment_dataset(raw.manifest, AugmentPolicy{}, 77, dir / "eval2", false);
  CHECK(data::read_file_bytes(plain.records[1].image_path) == data::read_file_bytes(again.records[1].image_path));
}
