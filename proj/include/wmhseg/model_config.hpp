#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "wmhseg/model_kind.hpp"

namespace wmhseg::nets {

enum class ScalePreset { Paper, Desk, Custom };
enum class CombinerKind { Tile, Deconv };

std::string_view to_string(ScalePreset preset);
std::string_view to_string(CombinerKind combiner);
ScalePreset parse_scale_preset(std::string_view text);
CombinerKind parse_combiner(std::string_view text);

/// Architecture description for one model. `trans_filters` are the TransUNet
/// decoder widths; the residual backbone stages use the same widths, with
/// `backbone_units[i]` pre-activation units in stage i + 1.
struct ModelConfig {
  ModelKind kind = ModelKind::UNet;
  ScalePreset preset = ScalePreset::Desk;
  int input_size = 32;
  std::vector<int> unet_filters;
  std::vector<int> trans_filters;
  std::vector<int> backbone_units;
  int transformer_layers = 12;
  int hidden_dim = 64;
  int heads = 4;
  int mlp_dim = 128;
  int latent_dim = 0;
  int convs_per_level = 2;
  CombinerKind combiner = CombinerKind::Tile;

  /// Preset defaults for `kind`; probabilistic kinds get latent_dim 6,
  /// ProbUNet the tile combiner and ProbTransUNet the deconv combiner.
  static ModelConfig make(ModelKind kind, ScalePreset preset);

  /// Throws ConfigError naming the first violated constraint.
  void validate() const;

  /// Filter list that drives the encoder/decoder of this kind.
  const std::vector<int>& level_filters() const;
  /// Side of the token grid after patch embedding (transformer kinds).
  int patch_grid() const;
  /// Channels of the final decoder feature map.
  int feature_channels() const { return level_filters().front(); }

  /// One "key=value" line per field in fixed order; round-trips through parse().
  std::string to_text() const;
  static ModelConfig parse(std::string_view text);
  /// Sets one field from its text form (keys as in to_text()).
  void set(std::string_view key, std::string_view value);

  /// 16 hex digits of FNV-1a-64 over to_text().
  std::string hash() const;

  bool operator==(const ModelConfig&) const = default;
};

std::uint64_t fnv1a64(std::string_view bytes);

}  // namespace wmhseg::nets
