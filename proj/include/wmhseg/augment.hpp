#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "wmhseg/datamodel.hpp"
#include "wmhseg/rng.hpp"

namespace wmhseg::augment {

using data::DatasetManifest;
using data::Mask2D;
using data::Slice2D;

struct AugmentPolicy {
  bool do_hflip = true;
  std::vector<double> rotation_degrees{-10.0, 10.0};
  std::uint32_t target_size = 128;
  bool zscore = true;

  /// No geometric variants; preprocessing only.
  static AugmentPolicy preprocessing_only(std::uint32_t target_size = 128);
  /// Throws ConfigError on a bad target size or angle.
  void validate() const;
  std::size_t variants_per_slice() const { return 1 + (do_hflip ? 1 : 0) + rotation_degrees.size(); }
};

/// Population z-score; slices with std < 1e-8 map to all zeros.
Slice2D zscore_normalize(const Slice2D& slice);

/// Aspect-preserving bilinear rescale so the larger side equals `target`,
/// centred with zero padding (floor of the slack above/left).
Slice2D rescale_and_pad(const Slice2D& slice, std::uint32_t target);
/// Nearest-neighbour counterpart for masks, same geometry.
Mask2D rescale_and_pad(const Mask2D& mask, std::uint32_t target);

std::pair<Slice2D, Mask2D> hflip(const Slice2D& slice, const Mask2D& mask);

/// Rotation about the raster centre; positive angles turn counter-clockwise
/// as displayed (row 0 at the top). Bilinear for the image, nearest for the
/// mask, zero outside the source.
std::pair<Slice2D, Mask2D> rotate(const Slice2D& slice, const Mask2D& mask, double degrees);

/// "hflip", "rot+10", "rot-7.5", ...
std::string rotation_tag(double degrees);

/// Writes the original plus every policy variant of each record under
/// out_dir and returns (and saves as out_dir/manifest.tsv) the new manifest.
/// Per variant: geometric op, then z-score, then rescale/pad. With
/// `geometric` false only the originals are emitted (evaluation sets).
/// Output does not depend on `seed`; the same inputs always give
/// byte-identical files.
DatasetManifest augment_dataset(const DatasetManifest& manifest, const AugmentPolicy& policy, std::uint64_t seed,
                                const std::filesystem::path& out_dir, bool geometric = true);

// ---- synthetic WMH-like data -------------------------------------------

struct SynthConfig {
  std::uint32_t n_patients = 4;
  std::uint32_t slices_per_patient = 8;
  std::uint32_t lesion_count_min = 1;
  std::uint32_t lesion_count_max = 4;
  double lesion_radius_min = 1.0;
  double lesion_radius_max = 4.0;
  std::uint32_t ambiguity_jitter = 0;  // pixels
  std::uint32_t image_size = 128;
  data::DatasetName dataset = data::DatasetName::SYNTH;
  double background_min = 0.2;
  double background_max = 0.6;
  double lesion_intensity_min = 0.8;
  double lesion_intensity_max = 1.0;
  double noise_std = 0.01;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SynthResult {
  DatasetManifest manifest;  // rater-1 masks; saved as manifest.tsv
  std::optional<DatasetManifest> multi_rater;  // both raters per image; manifest_multirater.tsv
  std::filesystem::path manifest_path;
};

SynthResult synth_generate(const SynthConfig& config, const std::filesystem::path& out_dir);

/// One synthetic slice with its exact lesion mask and, when jitter > 0,
/// a second rater mask whose disagreement lies within `jitter` pixels of the
/// first mask's boundary.
struct SynthSample {
  Slice2D image;
  Mask2D mask;
  Mask2D rater2;
};
SynthSample synth_sample(const SynthConfig& config, Rng& rng);

}  // namespace wmhseg::augment
