#include <doctest.h>

#include <cstring>
#include <fstream>
#include <set>

#include "support.hpp"
#include "wmhseg/datamodel.hpp"
#include "wmhseg/errors.hpp"

using namespace wmhseg;
using namespace wmhseg::data;
using wmhseg::testing::ScratchDir;

namespace {

Slice2D sample_slice(std::uint32_t h, std::uint32_t w) {
  Slice2D s(h, w);
  for (std::size_t i = 0; i < s.size(); ++i) s.pixels[i] = static_cast<float>(i) * 0.25f - 3.0f;
  s.meta = {DatasetName::ADNI, "p07", "v1", 42, "rot+10"};
  return s;
}

Mask2D sample_mask(std::uint32_t h, std::uint32_t w) {
  Mask2D m(h, w);
  for (std::size_t i = 0; i < m.size(); ++i) m.values[i] = i % 3 == 0;
  return m;
}

}  // namespace

TEST_CASE("dataset names round-trip and map to roles") {
  for (auto n : {DatasetName::ADNI, DatasetName::Singapore, DatasetName::GE3T, DatasetName::Utrecht, DatasetName::SYNTH})
    CHECK(parse_dataset_name(to_string(n)) == n);
  CHECK_FALSE(parse_dataset_name("Amsterdam").has_value());
  CHECK(role_of(DatasetName::ADNI) == DatasetRole::Training);
  CHECK(role_of(DatasetName::SYNTH) == DatasetRole::Training);
  CHECK(role_of(DatasetName::GE3T) == DatasetRole::CrossDatasetEvaluation);
}

TEST_CASE("slice encoding is lossless including negative zero") {
  auto s = sample_slice(5, 7);
  s.pixels[3] = -0.0f;
  const auto back = decode_slice(encode_slice(s));
  CHECK(bit_equal(s, back));
  CHECK(std::signbit(back.pixels[3]));
}

TEST_CASE("mask encoding is lossless") {
  const auto m = sample_mask(9, 4);
  CHECK(decode_mask(encode_mask(m)) == m);
  CHECK(m.count_ones() == 12);
}

TEST_CASE("corrupt slice bytes raise typed format errors") {
  auto bytes = encode_slice(sample_slice(4, 4));
  SUBCASE("magic") {
    bytes[0] = 'X';
    try {
      decode_slice(bytes);
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(e.kind() == FormatErrorKind::BadMagic);
    }
  }
  SUBCASE("truncated") {
    bytes.resize(bytes.size() / 2);
    CHECK_THROWS_AS(decode_slice(bytes), FormatError);
  }
  SUBCASE("mask bytes are not an image") {
    CHECK_THROWS_AS(decode_slice(encode_mask(sample_mask(4, 4))), FormatError);
  }
}

TEST_CASE("invalid rasters are rejected on encode") {
  Slice2D empty;
  CHECK_THROWS_AS(encode_slice(empty), ShapeError);
  Mask2D bad(2, 2);
  bad.values[1] = 2;
  CHECK_THROWS_AS(encode_mask(bad), ShapeError);
}

TEST_CASE("manifest save and load preserve records and resolve paths") {
  ScratchDir dir("manifest");
  DatasetManifest m;
  for (int i = 0; i < 3; ++i) {
    ManifestRecord r;
    r.id = "s" + std::to_string(i);
    r.image_path = dir / (r.id + ".img");
    r.mask_path = dir / (r.id + ".msk");
    r.meta = {DatasetName::SYNTH, "p" + std::to_string(i / 2), "v0", static_cast<std::uint32_t>(i), "orig"};
    write_slice(sample_slice(6, 6), r.image_path);
    write_mask(sample_mask(6, 6), r.mask_path);
    m.records.push_back(r);
  }
  save_manifest(m, dir / "manifest.tsv");
  const auto loaded = load_manifest(dir / "manifest.tsv");
  REQUIRE(loaded.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(loaded.records[i].id == m.records[i].id);
    CHECK(loaded.records[i].meta == m.records[i].meta);
    CHECK(std::filesystem::equivalent(loaded.records[i].image_path, m.records[i].image_path));
  }
  CHECK(loaded.role() == DatasetRole::Training);
  CHECK(summarize(loaded).find("3 records") == 0);
}

TEST_CASE("manifest errors carry kind and record id") {
  ScratchDir dir("manifest_err");
  write_slice(sample_slice(4, 4), dir / "a.img");
  write_mask(sample_mask(4, 4), dir / "a.msk");
  write_mask(sample_mask(5, 5), dir / "b.msk");
  auto expect = [&](const std::string& body, ManifestErrorKind kind, const std::string& id) {
    write_text_file(dir / "m.tsv", body);
    try {
      load_manifest(dir / "m.tsv");
      FAIL("expected ManifestError");
    } catch (const ManifestError& e) {
      CHECK(e.kind() == kind);
      CHECK(e.record_id() == id);
    }
  };
  expect("a\ta.img\ta.msk\tSYNTH\tp\tv\t0\torig\na\ta.img\ta.msk\tSYNTH\tp\tv\t1\torig\n", ManifestErrorKind::DuplicateId,
         "a");
  expect("a\ta.img\ta.msk\tMars\tp\tv\t0\torig\n", ManifestErrorKind::UnknownDataset, "a");
  expect("a\tmissing.img\ta.msk\tSYNTH\tp\tv\t0\torig\n", ManifestErrorKind::MissingFile, "a");
  expect("a\ta.img\tb.msk\tSYNTH\tp\tv\t0\torig\n", ManifestErrorKind::DimensionMismatch, "a");
  expect("a\ta.img\n", ManifestErrorKind::Malformed, "a");
  CHECK_THROWS_AS(load_manifest(dir / "nope.tsv"), IoError);
}

TEST_CASE("kfold_split partitions indices") {
  for (std::size_t n : {10u, 11u, 840u}) {
    const auto folds = kfold_split(n, 5, 3);
    REQUIRE(folds.size() == 5);
    std::multiset<std::size_t> tests;
    for (std::size_t f = 0; f < folds.size(); ++f) {
      const auto& fold = folds[f];
      CHECK(fold.train_ids.size() + fold.test_ids.size() == n);
      CHECK(std::is_sorted(fold.test_ids.begin(), fold.test_ids.end()));
      CHECK(fold.test_ids.size() == n / 5 + (f < n % 5 ? 1 : 0));
      std::set<std::size_t> all(fold.train_ids.begin(), fold.train_ids.end());
      for (auto t : fold.test_ids) CHECK(all.insert(t).second);
      CHECK(all.size() == n);
      tests.insert(fold.test_ids.begin(), fold.test_ids.end());
    }
    CHECK(tests.size() == n);
    CHECK(std::set<std::size_t>(tests.begin(), tests.end()).size() == n);
  }
  CHECK(kfold_split(20, 4, 9)[2].test_ids == kfold_split(20, 4, 9)[2].test_ids);
  CHECK(kfold_split(20, 4, 9)[0].test_ids != kfold_split(20, 4, 10)[0].test_ids);
  CHECK_THROWS_AS(kfold_split(10, 1, 0), ConfigError);
  CHECK_THROWS_AS(kfold_split(3, 5, 0), ConfigError);
}

TEST_CASE("checkpoint round-trips and rejects corruption") {
  Checkpoint c;
  c.params.push_back({"encoder.level0.conv0.weight", {3, 3, 1, 2}, std::vector<float>(18, 0.5f)});
  c.params.push_back({"head.bias", {1}, {-1.25f}});
  c.epoch = 17;
  c.val_dsc = 0.8125f;
  c.model_config_hash = "0123456789abcdef";
  c.train_dataset = "ADNI";
  c.model_config = "kind=UNet\n";
  const auto bytes = encode_checkpoint(c);
  CHECK(decode_checkpoint(bytes) == c);

  ScratchDir dir("ckpt");
  save_checkpoint(c, dir / "best.ckpt");
  CHECK(load_checkpoint(dir / "best.ckpt") == c);

  auto bad = bytes;
  bad[0] = 'Z';
  CHECK_THROWS_AS(decode_checkpoint(bad), FormatError);
  auto cut = bytes;
  cut.resize(cut.size() - 3);
  CHECK_THROWS_AS(decode_checkpoint(cut), FormatError);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), IoError);

  Checkpoint mismatched = c;
  mismatched.params[1].data.push_back(2.0f);
  CHECK_THROWS_AS(encode_checkpoint(mismatched), ShapeError);
}
