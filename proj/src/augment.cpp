#include "wmhseg/augment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "wmhseg/errors.hpp"

namespace wmhseg::augment {

namespace fs = std::filesystem;

namespace {

void require_same_shape(const Slice2D& slice, const Mask2D& mask) {
  if (slice.height != mask.height || slice.width != mask.width)
    throw ShapeError("slice is " + std::to_string(slice.height) + "x" + std::to_string(slice.width) + " but mask is " +
                     std::to_string(mask.height) + "x" + std::to_string(mask.width));
}

// Bilinear read with zero outside the raster.
double bilinear_zero(const Slice2D& s, double y, double x) {
  const double fy = std::floor(y);
  const double fx = std::floor(x);
  const double ty = y - fy;
  const double tx = x - fx;
  const auto y0 = static_cast<long>(fy);
  const auto x0 = static_cast<long>(fx);
  auto px = [&](long r, long c) -> double {
    if (r < 0 || c < 0 || r >= static_cast<long>(s.height) || c >= static_cast<long>(s.width)) return 0.0;
    return s.at(static_cast<std::uint32_t>(r), static_cast<std::uint32_t>(c));
  };
  double v = px(y0, x0) * (1.0 - ty) * (1.0 - tx);
  if (tx != 0.0) v += px(y0, x0 + 1) * (1.0 - ty) * tx;
  if (ty != 0.0) v += px(y0 + 1, x0) * ty * (1.0 - tx);
  if (ty != 0.0 && tx != 0.0) v += px(y0 + 1, x0 + 1) * ty * tx;
  return v;
}

// Bilinear read with edge clamping (resampling, not rotation).
double bilinear_clamp(const Slice2D& s, double y, double x) {
  y = std::clamp(y, 0.0, static_cast<double>(s.height - 1));
  x = std::clamp(x, 0.0, static_cast<double>(s.width - 1));
  const auto y0 = static_cast<std::uint32_t>(std::floor(y));
  const auto x0 = static_cast<std::uint32_t>(std::floor(x));
  const double ty = y - y0;
  const double tx = x - x0;
  const auto y1 = std::min(y0 + 1, s.height - 1);
  const auto x1 = std::min(x0 + 1, s.width - 1);
  double v = s.at(y0, x0) * (1.0 - ty) * (1.0 - tx);
  if (tx != 0.0) v += s.at(y0, x1) * (1.0 - ty) * tx;
  if (ty != 0.0) v += s.at(y1, x0) * ty * (1.0 - tx);
  if (ty != 0.0 && tx != 0.0) v += s.at(y1, x1) * ty * tx;
  return v;
}

struct PadGeometry {
  std::uint32_t content_h, content_w, top, left;
};

PadGeometry pad_geometry(std::uint32_t h, std::uint32_t w, std::uint32_t target) {
  if (h == 0 || w == 0) throw ShapeError("cannot rescale a zero-area raster");
  if (target == 0) throw ConfigError("rescale target must be positive");
  const double scale = static_cast<double>(target) / std::max(h, w);
  PadGeometry g{};
  g.content_h = std::clamp<std::uint32_t>(static_cast<std::uint32_t>(std::lround(h * scale)), 1, target);
  g.content_w = std::clamp<std::uint32_t>(static_cast<std::uint32_t>(std::lround(w * scale)), 1, target);
  g.top = (target - g.content_h) / 2;
  g.left = (target - g.content_w) / 2;
  return g;
}

}  // namespace

AugmentPolicy AugmentPolicy::preprocessing_only(std::uint32_t target_size) {
  AugmentPolicy p;
  p.do_hflip = false;
  p.rotation_degrees.clear();
  p.target_size = target_size;
  return p;
}

void AugmentPolicy::validate() const {
  if (target_size < 16 || (target_size & (target_size - 1)) != 0)
    throw ConfigError("target_size must be a power of two >= 16, got " + std::to_string(target_size));
  for (double a : rotation_degrees)
    if (!(a >= -180.0 && a <= 180.0)) throw ConfigError("rotation angle out of [-180, 180]: " + std::to_string(a));
}

Slice2D zscore_normalize(const Slice2D& slice) {
  Slice2D out = slice;
  if (slice.pixels.empty()) return out;
  double sum = 0.0;
  for (float v : slice.pixels) sum += v;
  const double mean = sum / static_cast<double>(slice.pixels.size());
  double sq = 0.0;
  for (float v : slice.pixels) sq += (v - mean) * (v - mean);
  const double stddev = std::sqrt(sq / static_cast<double>(slice.pixels.size()));
  if (stddev < 1e-8) {
    std::fill(out.pixels.begin(), out.pixels.end(), 0.0f);
    return out;
  }
  for (std::size_t i = 0; i < out.pixels.size(); ++i)
    out.pixels[i] = static_cast<float>((slice.pixels[i] - mean) / stddev);
  return out;
}

Slice2D rescale_and_pad(const Slice2D& slice, std::uint32_t target) {
  const auto g = pad_geometry(slice.height, slice.width, target);
  Slice2D out(target, target, 0.0f);
  out.meta = slice.meta;
  const double ry = static_cast<double>(slice.height) / g.content_h;
  const double rx = static_cast<double>(slice.width) / g.content_w;
  for (std::uint32_t r = 0; r < g.content_h; ++r) {
    const double sy = (r + 0.5) * ry - 0.5;
    for (std::uint32_t c = 0; c < g.content_w; ++c) {
      const double sx = (c + 0.5) * rx - 0.5;
      out.at(g.top + r, g.left + c) = static_cast<float>(bilinear_clamp(slice, sy, sx));
    }
  }
  return out;
}

Mask2D rescale_and_pad(const Mask2D& mask, std::uint32_t target) {
  const auto g = pad_geometry(mask.height, mask.width, target);
  Mask2D out(target, target, 0);
  const double ry = static_cast<double>(mask.height) / g.content_h;
  const double rx = static_cast<double>(mask.width) / g.content_w;
  for (std::uint32_t r = 0; r < g.content_h; ++r) {
    const auto sy = std::min<std::uint32_t>(static_cast<std::uint32_t>((r + 0.5) * ry), mask.height - 1);
    for (std::uint32_t c = 0; c < g.content_w; ++c) {
      const auto sx = std::min<std::uint32_t>(static_cast<std::uint32_t>((c + 0.5) * rx), mask.width - 1);
      out.at(g.top + r, g.left + c) = mask.at(sy, sx);
    }
  }
  return out;
}

std::pair<Slice2D, Mask2D> hflip(const Slice2D& slice, const Mask2D& mask) {
  require_same_shape(slice, mask);
  Slice2D s = slice;
  Mask2D m = mask;
  for (std::uint32_t r = 0; r < slice.height; ++r)
    for (std::uint32_t c = 0; c < slice.width; ++c) {
      s.at(r, c) = slice.at(r, slice.width - 1 - c);
      m.at(r, c) = mask.at(r, slice.width - 1 - c);
    }
  return {std::move(s), std::move(m)};
}

std::pair<Slice2D, Mask2D> rotate(const Slice2D& slice, const Mask2D& mask, double degrees) {
  require_same_shape(slice, mask);
  if (degrees == 0.0) return {slice, mask};
  const double theta = degrees * std::numbers::pi / 180.0;
  const double cos_t = std::cos(theta);
  const double sin_t = std::sin(theta);
  const double cy = (slice.height - 1) / 2.0;
  const double cx = (slice.width - 1) / 2.0;

  Slice2D s(slice.height, slice.width, 0.0f);
  s.meta = slice.meta;
  Mask2D m(mask.height, mask.width, 0);
  for (std::uint32_t r = 0; r < slice.height; ++r) {
    const double dy = r - cy;
    for (std::uint32_t c = 0; c < slice.width; ++c) {
      const double dx = c - cx;
      // Inverse map of a counter-clockwise (as displayed) rotation.
      const double sx = cx + dx * cos_t - dy * sin_t;
      const double sy = cy + dx * sin_t + dy * cos_t;
      s.at(r, c) = static_cast<float>(bilinear_zero(slice, sy, sx));
      const long ny = std::lround(sy);
      const long nx = std::lround(sx);
      if (ny >= 0 && nx >= 0 && ny < static_cast<long>(mask.height) && nx < static_cast<long>(mask.width))
        m.at(r, c) = mask.at(static_cast<std::uint32_t>(ny), static_cast<std::uint32_t>(nx));
    }
  }
  return {std::move(s), std::move(m)};
}

std::string rotation_tag(double degrees) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "rot%+g", degrees);
  return buf;
}

DatasetManifest augment_dataset(const DatasetManifest& manifest, const AugmentPolicy& policy, std::uint64_t /*seed*/,
                                const fs::path& out_dir, bool geometric) {
  policy.validate();
  DatasetManifest out;
  const fs::path image_dir = out_dir / "images";
  const fs::path mask_dir = out_dir / "masks";
  std::error_code ec;
  fs::create_directories(image_dir, ec);
  fs::create_directories(mask_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

  for (const auto& rec : manifest.records) {
    const Slice2D image = data::read_slice(rec.image_path);
    const Mask2D mask = data::read_mask(rec.mask_path);
    require_same_shape(image, mask);

    std::vector<std::pair<std::string, std::pair<Slice2D, Mask2D>>> variants;
    variants.push_back({"orig", {image, mask}});
    if (geometric) {
      if (policy.do_hflip) variants.push_back({"hflip", hflip(image, mask)});
      for (double angle : policy.rotation_degrees) variants.push_back({rotation_tag(angle), rotate(image, mask, angle)});
    }

    for (auto& [tag, pair] : variants) {
      Slice2D s = policy.zscore ? zscore_normalize(pair.first) : pair.first;
      s = rescale_and_pad(s, policy.target_size);
      const Mask2D m = rescale_and_pad(pair.second, policy.target_size);

      data::ManifestRecord r = rec;
      r.id = tag == "orig" ? rec.id : rec.id + "__" + tag;
      r.meta.augmentation_tag = tag == "orig" ? rec.meta.augmentation_tag : tag;
      s.meta = r.meta;
      r.image_path = image_dir / (r.id + ".wmhs");
      r.mask_path = mask_dir / (r.id + ".wmhs");
      data::write_slice(s, r.image_path);
      data::write_mask(m, r.mask_path, &r.meta);
      out.records.push_back(std::move(r));
    }
  }
  data::save_manifest(out, out_dir / "manifest.tsv");
  return out;
}

}  // namespace wmhseg::augment
