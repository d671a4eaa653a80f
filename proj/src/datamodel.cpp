#include "wmhseg/datamodel.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

#include "wmhseg/errors.hpp"
#include "wmhseg/rng.hpp"

namespace wmhseg::data {

namespace fs = std::filesystem;

namespace {

constexpr char kSliceMagic[4] = {'W', 'M', 'H', 'S'};
constexpr char kCheckpointMagic[4] = {'W', 'M', 'H', 'C'};
constexpr std::uint8_t kFormatVersion = 1;
constexpr std::uint8_t kDtypeImage = 0;
constexpr std::uint8_t kDtypeMask = 1;

class ByteWriter {
public:
  void raw(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes_.insert(bytes_.end(), p, p + n);
  }
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
public:
  explicit ByteReader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  std::size_t remaining() const { return bytes_.size() - pos_; }
  void need(std::size_t n, const char* what) const {
    if (remaining() < n)
      throw FormatError(FormatErrorKind::Truncated,
                        std::string("truncated file: expected ") + std::to_string(n) + " more bytes for " + what +
                            ", found " + std::to_string(remaining()));
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return bytes_[pos_++];
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
  std::string str(const char* what) {
    const auto n = u32(what);
    need(n, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  const std::uint8_t* take(std::size_t n, const char* what) {
    need(n, what);
    const auto* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }

private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

void check_token(std::string_view value, const char* field) {
  if (value.find_first_of("\t\n\r") != std::string_view::npos)
    throw ConfigError(std::string(field) + " must not contain tabs or newlines");
}

std::string encode_meta(const SliceMeta& meta) {
  check_token(meta.patient_id, "patient_id");
  check_token(meta.volume_id, "volume_id");
  check_token(meta.augmentation_tag, "augmentation_tag");
  std::ostringstream out;
  out << "dataset=" << to_string(meta.dataset) << '\n'
      << "patient=" << meta.patient_id << '\n'
      << "volume=" << meta.volume_id << '\n'
      << "slice=" << meta.slice_index << '\n'
      << "aug=" << meta.augmentation_tag << '\n';
  return out.str();
}

std::uint32_t parse_u32(std::string_view text, const char* what) {
  if (text.empty() || text.size() > 10 || !std::all_of(text.begin(), text.end(), [](char c) { return c >= '0' && c <= '9'; }))
    throw std::invalid_argument(std::string("bad ") + what + ": '" + std::string(text) + "'");
  const auto v = std::stoull(std::string(text));
  if (v > 0xffffffffULL) throw std::invalid_argument(std::string(what) + " out of range");
  return static_cast<std::uint32_t>(v);
}

SliceMeta decode_meta(const std::string& text) {
  static constexpr const char* kKeys[] = {"dataset", "patient", "volume", "slice", "aug"};
  SliceMeta meta;
  std::istringstream in(text);
  std::string line;
  int index = 0;
  while (std::getline(in, line)) {
    if (index >= 5) throw FormatError(FormatErrorKind::BadMetadata, "unexpected metadata line: " + line);
    const auto eq = line.find('=');
    if (eq == std::string::npos || line.substr(0, eq) != kKeys[index])
      throw FormatError(FormatErrorKind::BadMetadata,
                        std::string("metadata line ") + std::to_string(index + 1) + " should start with '" +
                            kKeys[index] + "='");
    const std::string value = line.substr(eq + 1);
    switch (index) {
      case 0: {
        auto name = parse_dataset_name(value);
        if (!name) throw FormatError(FormatErrorKind::BadMetadata, "unknown dataset in metadata: " + value);
        meta.dataset = *name;
        break;
      }
      case 1: meta.patient_id = value; break;
      case 2: meta.volume_id = value; break;
      case 3:
        try {
          meta.slice_index = parse_u32(value, "slice index");
        } catch (const std::invalid_argument& e) {
          throw FormatError(FormatErrorKind::BadMetadata, e.what());
        }
        break;
      case 4: meta.augmentation_tag = value; break;
    }
    ++index;
  }
  if (index != 5) throw FormatError(FormatErrorKind::BadMetadata, "metadata block incomplete");
  return meta;
}

struct RasterHeader {
  std::uint8_t dtype;
  std::uint32_t height;
  std::uint32_t width;
};

RasterHeader read_raster_header(ByteReader& in) {
  const auto* magic = in.take(4, "magic");
  if (std::memcmp(magic, kSliceMagic, 4) != 0)
    throw FormatError(FormatErrorKind::BadMagic, "bad magic: expected 'WMHS'");
  const auto version = in.u8("version");
  if (version != kFormatVersion)
    throw FormatError(FormatErrorKind::UnsupportedVersion, "unsupported slice format version " + std::to_string(version));
  RasterHeader h{};
  h.dtype = in.u8("dtype");
  h.height = in.u32("height");
  h.width = in.u32("width");
  if (h.height == 0 || h.width == 0)
    throw FormatError(FormatErrorKind::SizeMismatch, "zero-sized raster in header");
  return h;
}

void expect_end(const ByteReader& in) {
  if (in.remaining() != 0)
    throw FormatError(FormatErrorKind::SizeMismatch,
                      std::to_string(in.remaining()) + " trailing bytes after metadata; payload does not match header dimensions");
}

fs::path resolve(const fs::path& base, const std::string& field) {
  fs::path p(field);
  if (p.is_absolute()) return p.lexically_normal();
  return (base / p).lexically_normal();
}

std::string portable_relative(const fs::path& target, const fs::path& base) {
  if (base.empty()) return target.generic_string();
  const auto rel = target.lexically_relative(base);
  if (rel.empty()) return target.generic_string();
  return rel.generic_string();
}

}  // namespace

// ---------------------------------------------------------------------------

std::string_view to_string(DatasetName name) {
  switch (name) {
    case DatasetName::ADNI: return "ADNI";
    case DatasetName::Singapore: return "Singapore";
    case DatasetName::GE3T: return "GE3T";
    case DatasetName::Utrecht: return "Utrecht";
    case DatasetName::SYNTH: return "SYNTH";
  }
  return "?";
}

std::optional<DatasetName> parse_dataset_name(std::string_view text) {
  for (auto name : {DatasetName::ADNI, DatasetName::Singapore, DatasetName::GE3T, DatasetName::Utrecht, DatasetName::SYNTH})
    if (text == to_string(name)) return name;
  return std::nullopt;
}

std::string_view to_string(DatasetRole role) {
  return role == DatasetRole::Training ? "training" : "cross-dataset-evaluation";
}

DatasetRole role_of(DatasetName name) {
  switch (name) {
    case DatasetName::ADNI:
    case DatasetName::SYNTH: return DatasetRole::Training;
    default: return DatasetRole::CrossDatasetEvaluation;
  }
}

bool bit_equal(const Slice2D& a, const Slice2D& b) {
  return a.height == b.height && a.width == b.width && a.meta == b.meta && a.pixels.size() == b.pixels.size() &&
         std::memcmp(a.pixels.data(), b.pixels.data(), a.pixels.size() * sizeof(float)) == 0;
}

std::size_t Mask2D::count_ones() const {
  return static_cast<std::size_t>(std::count(values.begin(), values.end(), std::uint8_t{1}));
}

// ---- slice / mask -------------------------------------------------------

std::vector<std::uint8_t> encode_slice(const Slice2D& slice) {
  if (slice.height == 0 || slice.width == 0) throw ShapeError("slice has zero area");
  if (slice.pixels.size() != static_cast<std::size_t>(slice.height) * slice.width)
    throw ShapeError("slice pixel count does not match height x width");
  ByteWriter out;
  out.raw(kSliceMagic, 4);
  out.u8(kFormatVersion);
  out.u8(kDtypeImage);
  out.u32(slice.height);
  out.u32(slice.width);
  for (float v : slice.pixels) out.f32(v);
  out.str(encode_meta(slice.meta));
  return out.take();
}

Slice2D decode_slice(const std::vector<std::uint8_t>& bytes) {
  ByteReader in(bytes);
  const auto header = read_raster_header(in);
  if (header.dtype != kDtypeImage)
    throw FormatError(FormatErrorKind::SizeMismatch, "expected f32 image payload (dtype 0), found dtype " +
                                                         std::to_string(header.dtype));
  Slice2D slice(header.height, header.width);
  in.need(slice.pixels.size() * 4, "f32 payload");
  for (auto& v : slice.pixels) v = in.f32("f32 payload");
  slice.meta = decode_meta(in.str("metadata block"));
  expect_end(in);
  return slice;
}

std::vector<std::uint8_t> encode_mask(const Mask2D& mask, const SliceMeta* meta) {
  if (mask.height == 0 || mask.width == 0) throw ShapeError("mask has zero area");
  if (mask.values.size() != static_cast<std::size_t>(mask.height) * mask.width)
    throw ShapeError("mask value count does not match height x width");
  ByteWriter out;
  out.raw(kSliceMagic, 4);
  out.u8(kFormatVersion);
  out.u8(kDtypeMask);
  out.u32(mask.height);
  out.u32(mask.width);
  for (auto v : mask.values) {
    if (v > 1) throw ShapeError("mask values must be 0 or 1");
    out.u8(v);
  }
  out.str(meta ? encode_meta(*meta) : std::string());
  return out.take();
}

Mask2D decode_mask(const std::vector<std::uint8_t>& bytes) {
  ByteReader in(bytes);
  const auto header = read_raster_header(in);
  if (header.dtype != kDtypeMask)
    throw FormatError(FormatErrorKind::SizeMismatch, "expected u8 mask payload (dtype 1), found dtype " +
                                                         std::to_string(header.dtype));
  Mask2D mask(header.height, header.width);
  const auto* payload = in.take(mask.values.size(), "u8 payload");
  std::copy(payload, payload + mask.values.size(), mask.values.begin());
  if (std::any_of(mask.values.begin(), mask.values.end(), [](std::uint8_t v) { return v > 1; }))
    throw FormatError(FormatErrorKind::BadMetadata, "mask payload contains values other than 0/1");
  const auto meta = in.str("metadata block");
  if (!meta.empty()) decode_meta(meta);
  expect_end(in);
  return mask;
}

void write_slice(const Slice2D& slice, const fs::path& path) { write_file_bytes(path, encode_slice(slice)); }
Slice2D read_slice(const fs::path& path) { return decode_slice(read_file_bytes(path)); }
void write_mask(const Mask2D& mask, const fs::path& path, const SliceMeta* meta) {
  write_file_bytes(path, encode_mask(mask, meta));
}
Mask2D read_mask(const fs::path& path) { return decode_mask(read_file_bytes(path)); }

// ---- manifest -------------------------------------------------------------

std::map<DatasetName, std::size_t> DatasetManifest::counts() const {
  std::map<DatasetName, std::size_t> out;
  for (const auto& r : records) ++out[r.meta.dataset];
  return out;
}

std::optional<DatasetRole> DatasetManifest::role() const {
  if (records.empty()) return std::nullopt;
  const auto first = role_of(records.front().meta.dataset);
  for (const auto& r : records)
    if (role_of(r.meta.dataset) != first) return std::nullopt;
  return first;
}

DatasetManifest load_manifest(const fs::path& path, const LoadOptions& options) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  const fs::path base = path.parent_path();

  DatasetManifest manifest;
  std::set<std::string> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;

    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
      const auto tab = line.find('\t', start);
      fields.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    const std::string where = path.string() + ":" + std::to_string(line_no);
    if (fields.size() != 8)
      throw ManifestError(ManifestErrorKind::Malformed, fields.empty() ? "" : fields[0],
                          where + ": expected 8 tab-separated fields, found " + std::to_string(fields.size()));

    ManifestRecord rec;
    rec.id = fields[0];
    if (rec.id.empty()) throw ManifestError(ManifestErrorKind::Malformed, "", where + ": empty id");
    if (!seen.insert(rec.id).second)
      throw ManifestError(ManifestErrorKind::DuplicateId, rec.id, where + ": duplicate id '" + rec.id + "'");
    rec.image_path = resolve(base, fields[1]);
    rec.mask_path = resolve(base, fields[2]);
    const auto dataset = parse_dataset_name(fields[3]);
    if (!dataset)
      throw ManifestError(ManifestErrorKind::UnknownDataset, rec.id,
                          where + ": unknown dataset_name '" + fields[3] + "' for id '" + rec.id + "'");
    rec.meta.dataset = *dataset;
    rec.meta.patient_id = fields[4];
    rec.meta.volume_id = fields[5];
    try {
      rec.meta.slice_index = parse_u32(fields[6], "slice_index");
    } catch (const std::invalid_argument& e) {
      throw ManifestError(ManifestErrorKind::Malformed, rec.id, where + ": " + e.what());
    }
    rec.meta.augmentation_tag = fields[7];
    manifest.records.push_back(std::move(rec));
  }

  if (options.validate_files) {
    for (const auto& rec : manifest.records) {
      for (const auto* file : {&rec.image_path, &rec.mask_path}) {
        if (!fs::exists(*file))
          throw ManifestError(ManifestErrorKind::MissingFile, rec.id,
                              "record '" + rec.id + "': missing file " + file->string());
      }
      Slice2D image;
      Mask2D mask;
      try {
        image = read_slice(rec.image_path);
        mask = read_mask(rec.mask_path);
      } catch (const FormatError& e) {
        throw ManifestError(ManifestErrorKind::Malformed, rec.id, "record '" + rec.id + "': " + e.what());
      }
      if (image.height != mask.height || image.width != mask.width)
        throw ManifestError(ManifestErrorKind::DimensionMismatch, rec.id,
                            "record '" + rec.id + "': image and mask dimensions differ");
    }
  }

  if (manifest.empty() && options.warn_empty) std::cerr << "warning: manifest " << path.string() << " is empty\n";
  return manifest;
}

void save_manifest(const DatasetManifest& manifest, const fs::path& path) {
  const fs::path base = path.parent_path();
  std::ostringstream out;
  for (const auto& r : manifest.records) {
    check_token(r.id, "id");
    check_token(r.meta.patient_id, "patient_id");
    check_token(r.meta.volume_id, "volume_id");
    check_token(r.meta.augmentation_tag, "augmentation_tag");
    out << r.id << '\t' << portable_relative(r.image_path, base) << '\t' << portable_relative(r.mask_path, base) << '\t'
        << to_string(r.meta.dataset) << '\t' << r.meta.patient_id << '\t' << r.meta.volume_id << '\t'
        << r.meta.slice_index << '\t' << r.meta.augmentation_tag << '\n';
  }
  write_text_file(path, out.str());
}

std::string summarize(const DatasetManifest& manifest) {
  std::ostringstream out;
  out << manifest.size() << " records";
  for (const auto& [name, count] : manifest.counts())
    out << "; " << to_string(name) << "=" << count << " (" << to_string(role_of(name)) << ")";
  return out.str();
}

// ---- k-fold ---------------------------------------------------------------

std::vector<Fold> kfold_split(std::size_t n, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("k-fold requires k >= 2, got " + std::to_string(k));
  if (k > n) throw ConfigError("k-fold requires k <= n, got k=" + std::to_string(k) + ", n=" + std::to_string(n));

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(order.begin(), order.end());

  std::vector<Fold> folds(k);
  const std::size_t base = n / k;
  const std::size_t extra = n % k;
  std::size_t offset = 0;
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t size = base + (f < extra ? 1 : 0);
    auto& fold = folds[f];
    fold.test_ids.assign(order.begin() + static_cast<std::ptrdiff_t>(offset),
                         order.begin() + static_cast<std::ptrdiff_t>(offset + size));
    std::sort(fold.test_ids.begin(), fold.test_ids.end());
    offset += size;

    std::vector<bool> in_test(n, false);
    for (auto id : fold.test_ids) in_test[id] = true;
    fold.train_ids.reserve(n - size);
    for (std::size_t i = 0; i < n; ++i)
      if (!in_test[i]) fold.train_ids.push_back(i);
  }
  return folds;
}

// ---- checkpoint -------------------------------------------------------

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  ByteWriter out;
  out.raw(kCheckpointMagic, 4);
  out.u8(kFormatVersion);
  out.u32(static_cast<std::uint32_t>(ckpt.params.size()));
  for (const auto& p : ckpt.params) {
    std::size_t count = 1;
    for (auto d : p.dims) count *= d;
    if (count != p.data.size())
      throw ShapeError("parameter '" + p.name + "' payload does not match its dims");
    out.str(p.name);
    out.u32(static_cast<std::uint32_t>(p.dims.size()));
    for (auto d : p.dims) out.u32(d);
    for (float v : p.data) out.f32(v);
  }
  out.u32(ckpt.epoch);
  out.f32(ckpt.val_dsc);
  out.str(ckpt.model_config_hash);
  out.str(ckpt.train_dataset);
  out.str(ckpt.model_config);
  return out.take();
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  ByteReader in(bytes);
  const auto* magic = in.take(4, "magic");
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw FormatError(FormatErrorKind::BadMagic, "bad magic: expected 'WMHC'");
  const auto version = in.u8("version");
  if (version != kFormatVersion)
    throw FormatError(FormatErrorKind::UnsupportedVersion, "unsupported checkpoint version " + std::to_string(version));
  Checkpoint ckpt;
  const auto count = in.u32("record count");
  for (std::uint32_t i = 0; i < count; ++i) {
    ParamBlob p;
    p.name = in.str("parameter name");
    const auto rank = in.u32("rank");
    if (rank > 8) throw FormatError(FormatErrorKind::SizeMismatch, "implausible rank for '" + p.name + "'");
    std::size_t elements = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      p.dims.push_back(in.u32("dims"));
      elements *= p.dims.back();
    }
    in.need(elements * 4, "parameter payload");
    p.data.resize(elements);
    for (auto& v : p.data) v = in.f32("parameter payload");
    ckpt.params.push_back(std::move(p));
  }
  ckpt.epoch = in.u32("epoch");
  ckpt.val_dsc = in.f32("val_dsc");
  ckpt.model_config_hash = in.str("config hash");
  ckpt.train_dataset = in.str("train dataset");
  ckpt.model_config = in.str("model config");
  expect_end(in);
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const fs::path& path) { write_file_bytes(path, encode_checkpoint(ckpt)); }
Checkpoint load_checkpoint(const fs::path& path) { return decode_checkpoint(read_file_bytes(path)); }

// ---- raw files --------------------------------------------------------------

std::vector<std::uint8_t> read_file_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

void write_file_bytes(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + path.string());
  }
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

void write_text_file(const fs::path& path, std::string_view text) {
  write_file_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

std::string read_text_file(const fs::path& path) {
  const auto bytes = read_file_bytes(path);
  return std::string(bytes.begin(), bytes.end());
}

}  // namespace wmhseg::data
