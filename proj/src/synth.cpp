#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>

#include "wmhseg/augment.hpp"
#include "wmhseg/errors.hpp"

namespace wmhseg::augment {

namespace fs = std::filesystem;

namespace {

struct Lesion {
  double cy, cx, radius, intensity;
  int jitter;  // signed growth (+) or shrink (-) of rater 2, in pixels
};

// Distance from (r, c) to the nearest pixel whose mask value equals `want`,
// searched within `radius`; +inf if none.
double nearest_with_value(const Mask2D& mask, int r, int c, std::uint8_t want, int radius) {
  double best = std::numeric_limits<double>::infinity();
  for (int dr = -radius; dr <= radius; ++dr) {
    const int rr = r + dr;
    if (rr < 0 || rr >= static_cast<int>(mask.height)) continue;
    for (int dc = -radius; dc <= radius; ++dc) {
      const int cc = c + dc;
      if (cc < 0 || cc >= static_cast<int>(mask.width)) continue;
      if (mask.at(static_cast<std::uint32_t>(rr), static_cast<std::uint32_t>(cc)) != want) continue;
      best = std::min(best, std::hypot(static_cast<double>(dr), static_cast<double>(dc)));
    }
  }
  return best;
}

}  // namespace

void SynthConfig::validate() const {
  if (n_patients == 0) throw ConfigError("n_patients must be >= 1");
  if (slices_per_patient == 0) throw ConfigError("slices_per_patient must be >= 1");
  if (lesion_count_min > lesion_count_max) throw ConfigError("lesion_count_range min > max");
  if (!(lesion_radius_min >= 1.0) || lesion_radius_min > lesion_radius_max)
    throw ConfigError("lesion radii must satisfy 1 <= min <= max");
  if (image_size < 16) throw ConfigError("image_size must be >= 16");
  if (!(background_min <= background_max) || !(lesion_intensity_min <= lesion_intensity_max))
    throw ConfigError("intensity ranges must satisfy min <= max");
  if (noise_std < 0.0) throw ConfigError("noise_std must be >= 0");
}

SynthSample synth_sample(const SynthConfig& cfg, Rng& rng) {
  const std::uint32_t size = cfg.image_size;
  const double s = size;

  // Brain ellipse with a smooth low-frequency intensity field.
  const double cy = s / 2.0 - 0.5 + rng.uniform(-0.03, 0.03) * s;
  const double cx = s / 2.0 - 0.5 + rng.uniform(-0.03, 0.03) * s;
  const double ay = rng.uniform(0.38, 0.45) * s;
  const double ax = rng.uniform(0.33, 0.42) * s;
  const double base = rng.uniform(cfg.background_min + 0.25 * (cfg.background_max - cfg.background_min),
                                  cfg.background_max - 0.25 * (cfg.background_max - cfg.background_min));
  const double amp = 0.2 * (cfg.background_max - cfg.background_min);
  const double f1 = rng.uniform(0.5, 1.5), f2 = rng.uniform(0.5, 1.5);
  const double p1 = rng.uniform(0.0, 2.0 * std::numbers::pi), p2 = rng.uniform(0.0, 2.0 * std::numbers::pi);

  SynthSample out{Slice2D(size, size, 0.0f), Mask2D(size, size, 0), Mask2D()};
  for (std::uint32_t r = 0; r < size; ++r)
    for (std::uint32_t c = 0; c < size; ++c) {
      const double ny = (r - cy) / ay, nx = (c - cx) / ax;
      if (ny * ny + nx * nx > 1.0) continue;
      double v = base + amp * std::cos(2.0 * std::numbers::pi * f1 * r / s + p1) *
                            std::cos(2.0 * std::numbers::pi * f2 * c / s + p2);
      v += cfg.noise_std * rng.normal();
      out.image.at(r, c) = static_cast<float>(std::clamp(v, cfg.background_min, cfg.background_max));
    }

  // Small bright lesions, fully inside the inner part of the ellipse.
  const auto count = static_cast<std::uint32_t>(rng.uniform_int(cfg.lesion_count_min, cfg.lesion_count_max));
  std::vector<Lesion> lesions;
  const int max_jitter = static_cast<int>(cfg.ambiguity_jitter);
  for (std::uint32_t i = 0; i < count; ++i) {
    Lesion l{};
    const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double rho = std::sqrt(rng.uniform()) * 0.6;
    l.cy = cy + rho * ay * std::sin(angle);
    l.cx = cx + rho * ax * std::cos(angle);
    l.radius = rng.uniform(cfg.lesion_radius_min, cfg.lesion_radius_max);
    l.intensity = rng.uniform(cfg.lesion_intensity_min, cfg.lesion_intensity_max);
    if (max_jitter > 0) {
      const int magnitude = static_cast<int>(rng.uniform_int(1, max_jitter));
      l.jitter = rng.uniform() < 0.5 ? -magnitude : magnitude;
    }
    lesions.push_back(l);
  }
  for (const auto& l : lesions) {
    const int r0 = std::max(0, static_cast<int>(std::floor(l.cy - l.radius)));
    const int r1 = std::min(static_cast<int>(size) - 1, static_cast<int>(std::ceil(l.cy + l.radius)));
    const int c0 = std::max(0, static_cast<int>(std::floor(l.cx - l.radius)));
    const int c1 = std::min(static_cast<int>(size) - 1, static_cast<int>(std::ceil(l.cx + l.radius)));
    for (int r = r0; r <= r1; ++r)
      for (int c = c0; c <= c1; ++c) {
        const double d = std::hypot(r - l.cy, c - l.cx);
        if (d > l.radius) continue;
        const auto ur = static_cast<std::uint32_t>(r), uc = static_cast<std::uint32_t>(c);
        out.mask.at(ur, uc) = 1;
        const double v = l.intensity + 0.5 * cfg.noise_std * rng.normal();
        out.image.at(ur, uc) = static_cast<float>(std::clamp(v, cfg.lesion_intensity_min, cfg.lesion_intensity_max));
      }
  }

  // Second rater: each pixel follows the jitter of its nearest lesion centre,
  // growing (+) or eroding (-) the first mask by at most |jitter| pixels.
  if (max_jitter > 0) {
    out.rater2 = out.mask;
    if (!lesions.empty()) {
      for (std::uint32_t r = 0; r < size; ++r)
        for (std::uint32_t c = 0; c < size; ++c) {
          const Lesion* nearest = &lesions.front();
          double best = std::numeric_limits<double>::infinity();
          for (const auto& l : lesions) {
            const double d = std::hypot(r - l.cy, c - l.cx);
            if (d < best) best = d, nearest = &l;
          }
          const int delta = nearest->jitter;
          const std::uint8_t here = out.mask.at(r, c);
          if (delta > 0 && here == 0) {
            if (nearest_with_value(out.mask, static_cast<int>(r), static_cast<int>(c), 1, delta) <= delta)
              out.rater2.at(r, c) = 1;
          } else if (delta < 0 && here == 1) {
            if (nearest_with_value(out.mask, static_cast<int>(r), static_cast<int>(c), 0, -delta) <= -delta)
              out.rater2.at(r, c) = 0;
          }
        }
    }
  }
  return out;
}

SynthResult synth_generate(const SynthConfig& cfg, const fs::path& out_dir) {
  cfg.validate();
  std::error_code ec;
  fs::create_directories(out_dir / "images", ec);
  fs::create_directories(out_dir / "masks", ec);
  if (cfg.ambiguity_jitter > 0) fs::create_directories(out_dir / "masks_rater2", ec);
  if (ec || !fs::is_directory(out_dir)) throw IoError("cannot create output directory " + out_dir.string());

  SynthResult result;
  data::DatasetManifest multi;
  for (std::uint32_t p = 0; p < cfg.n_patients; ++p) {
    for (std::uint32_t k = 0; k < cfg.slices_per_patient; ++k) {
      Rng rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(p) * cfg.slices_per_patient + k));
      SynthSample sample = synth_sample(cfg, rng);

      char id[32], patient[16], volume[24];
      std::snprintf(id, sizeof id, "p%03u_s%03u", p, k);
      std::snprintf(patient, sizeof patient, "P%03u", p);
      std::snprintf(volume, sizeof volume, "P%03u_V0", p);

      data::ManifestRecord rec;
      rec.id = id;
      rec.meta = {cfg.dataset, patient, volume, k, "orig"};
      rec.image_path = out_dir / "images" / (rec.id + ".wmhs");
      rec.mask_path = out_dir / "masks" / (rec.id + ".wmhs");
      sample.image.meta = rec.meta;
      data::write_slice(sample.image, rec.image_path);
      data::write_mask(sample.mask, rec.mask_path, &rec.meta);
      result.manifest.records.push_back(rec);

      if (cfg.ambiguity_jitter > 0) {
        data::ManifestRecord second = rec;
        second.id = rec.id + "_r2";
        second.meta.augmentation_tag = "rater2";
        second.mask_path = out_dir / "masks_rater2" / (rec.id + ".wmhs");
        data::write_mask(sample.rater2, second.mask_path, &second.meta);
        multi.records.push_back(rec);
        multi.records.push_back(std::move(second));
      }
    }
  }
  result.manifest_path = out_dir / "manifest.tsv";
  data::save_manifest(result.manifest, result.manifest_path);
  if (cfg.ambiguity_jitter > 0) {
    data::save_manifest(multi, out_dir / "manifest_multirater.tsv");
    result.multi_rater = std::move(multi);
  }
  return result;
}

}  // namespace wmhseg::augment
