#pragma once

#include <optional>
#include <string>
#include <string_view>

namespace wmhseg {

enum class ModelKind { UNet, ProbUNet, TransUNet, ProbTransUNet };

inline constexpr ModelKind kAllModelKinds[] = {ModelKind::UNet, ModelKind::ProbUNet,
                                               ModelKind::TransUNet, ModelKind::ProbTransUNet};

constexpr bool is_probabilistic(ModelKind kind) {
  return kind == ModelKind::ProbUNet || kind == ModelKind::ProbTransUNet;
}

constexpr bool is_transformer(ModelKind kind) {
  return kind == ModelKind::TransUNet || kind == ModelKind::ProbTransUNet;
}

/// Identifier form: "UNet", "ProbUNet", ...
std::string_view to_string(ModelKind kind);
/// Human-readable form used in report tables.
std::string_view display_name(ModelKind kind);
/// Accepts identifier form and the CLI spelling ("prob-transunet", case-insensitive).
std::optional<ModelKind> parse_model_kind(std::string_view text);

}  // namespace wmhseg
