#pragma once

// Persistent domain types and their on-disk formats.
//
// Slice/mask file ("WMHS"), little-endian:
//   "WMHS" | u8 version (=1) | u8 dtype (0 = f32 image, 1 = u8 mask)
//   | u32 height | u32 width | payload (height*width elements, row-major)
//   | u32 meta_length | meta_length bytes of UTF-8 metadata
// The metadata block is "key=value\n" lines for dataset, patient, volume,
// slice and aug, in that order. Masks may carry an empty block.
//
// Manifest: one record per line, 8 tab-separated fields
//   id, image_path, mask_path, dataset, patient, volume, slice_index, aug_tag
// Relative paths resolve against the manifest's directory. Blank lines and
// lines starting with '#' are ignored.
//
// Checkpoint ("WMHC"), little-endian:
//   "WMHC" | u8 version (=1) | u32 record_count
//   | record_count x (u32 name_length | name | u32 rank | rank x u32 dims | f32 payload)
//   | metadata record: u32 epoch | f32 val_dsc | str config_hash | str train_dataset
//                      | str model_config
// where str is u32 length followed by UTF-8 bytes.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace wmhseg::data {

enum class DatasetName { ADNI, Singapore, GE3T, Utrecht, SYNTH };
enum class DatasetRole { Training, CrossDatasetEvaluation };

std::string_view to_string(DatasetName name);
std::optional<DatasetName> parse_dataset_name(std::string_view text);
std::string_view to_string(DatasetRole role);

/// ADNI and SYNTH train; the three challenge sites are evaluation-only.
DatasetRole role_of(DatasetName name);

struct SliceMeta {
  DatasetName dataset = DatasetName::SYNTH;
  std::string patient_id;
  std::string volume_id;
  std::uint32_t slice_index = 0;
  std::string augmentation_tag = "orig";

  bool operator==(const SliceMeta&) const = default;
};

struct Slice2D {
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::vector<float> pixels;  // row-major
  SliceMeta meta;

  Slice2D() = default;
  Slice2D(std::uint32_t h, std::uint32_t w, float fill = 0.0f)
      : height(h), width(w), pixels(static_cast<std::size_t>(h) * w, fill) {}

  float& at(std::uint32_t r, std::uint32_t c) { return pixels[static_cast<std::size_t>(r) * width + c]; }
  float at(std::uint32_t r, std::uint32_t c) const { return pixels[static_cast<std::size_t>(r) * width + c]; }
  std::size_t size() const { return pixels.size(); }
};

/// Bitwise equality of payload (distinguishes -0.0/0.0 and NaN payloads) plus metadata.
bool bit_equal(const Slice2D& a, const Slice2D& b);

struct Mask2D {
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::vector<std::uint8_t> values;  // row-major, each 0 or 1

  Mask2D() = default;
  Mask2D(std::uint32_t h, std::uint32_t w, std::uint8_t fill = 0)
      : height(h), width(w), values(static_cast<std::size_t>(h) * w, fill) {}

  std::uint8_t& at(std::uint32_t r, std::uint32_t c) { return values[static_cast<std::size_t>(r) * width + c]; }
  std::uint8_t at(std::uint32_t r, std::uint32_t c) const { return values[static_cast<std::size_t>(r) * width + c]; }
  std::size_t size() const { return values.size(); }
  std::size_t count_ones() const;

  bool operator==(const Mask2D&) const = default;
};

// ---- slice / mask files ------------------------------------------------

std::vector<std::uint8_t> encode_slice(const Slice2D& slice);
Slice2D decode_slice(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> encode_mask(const Mask2D& mask, const SliceMeta* meta = nullptr);
Mask2D decode_mask(const std::vector<std::uint8_t>& bytes);

void write_slice(const Slice2D& slice, const std::filesystem::path& path);
Slice2D read_slice(const std::filesystem::path& path);
void write_mask(const Mask2D& mask, const std::filesystem::path& path, const SliceMeta* meta = nullptr);
Mask2D read_mask(const std::filesystem::path& path);

// ---- manifest -----------------------------------------------------------

struct ManifestRecord {
  std::string id;
  std::filesystem::path image_path;  // absolute after load
  std::filesystem::path mask_path;
  SliceMeta meta;

  bool operator==(const ManifestRecord&) const = default;
};

enum class ManifestErrorKind { Malformed, DuplicateId, MissingFile, UnknownDataset, DimensionMismatch };

class ManifestError : public std::runtime_error {
public:
  ManifestError(ManifestErrorKind kind, std::string record_id, const std::string& what)
      : std::runtime_error(what), kind_(kind), record_id_(std::move(record_id)) {}
  ManifestErrorKind kind() const noexcept { return kind_; }
  const std::string& record_id() const noexcept { return record_id_; }

private:
  ManifestErrorKind kind_;
  std::string record_id_;
};

struct DatasetManifest {
  std::vector<ManifestRecord> records;

  std::size_t size() const { return records.size(); }
  bool empty() const { return records.empty(); }
  std::map<DatasetName, std::size_t> counts() const;
  /// Role shared by all records; nullopt if empty or mixed.
  std::optional<DatasetRole> role() const;
};

struct LoadOptions {
  bool validate_files = true;  // parse every referenced image and mask
  bool warn_empty = true;
};

DatasetManifest load_manifest(const std::filesystem::path& path, const LoadOptions& options = {});
/// Paths are written relative to the manifest's directory when possible.
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);
std::string summarize(const DatasetManifest& manifest);

// ---- k-fold -----------------------------------------------------------

struct Fold {
  std::vector<std::size_t> train_ids;  // ascending
  std::vector<std::size_t> test_ids;   // ascending
};

/// Shuffles 0..n-1 once with the seed, then cuts contiguous chunks; the
/// first n % k folds get one extra item.
std::vector<Fold> kfold_split(std::size_t n, std::size_t k, std::uint64_t seed);

// ---- checkpoint ---------------------------------------------------------

struct ParamBlob {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> data;

  bool operator==(const ParamBlob&) const = default;
};

struct Checkpoint {
  std::vector<ParamBlob> params;
  std::uint32_t epoch = 0;
  float val_dsc = 0.0f;
  std::string model_config_hash;
  std::string train_dataset;
  std::string model_config;  // canonical ModelConfig text

  bool operator==(const Checkpoint&) const = default;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& checkpoint);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);
void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// ---- raw file helpers -----------------------------------------------

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
/// Writes via a sibling temporary file and rename.
void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
void write_text_file(const std::filesystem::path& path, std::string_view text);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace wmhseg::data
