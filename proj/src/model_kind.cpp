#include "wmhseg/model_kind.hpp"

#include <algorithm>
#include <cctype>

namespace wmhseg {

std::string_view to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::UNet: return "UNet";
    case ModelKind::ProbUNet: return "ProbUNet";
    case ModelKind::TransUNet: return "TransUNet";
    case ModelKind::ProbTransUNet: return "ProbTransUNet";
  }
  return "?";
}

std::string_view display_name(ModelKind kind) {
  switch (kind) {
    case ModelKind::UNet: return "UNet";
    case ModelKind::ProbUNet: return "Probabilistic UNet";
    case ModelKind::TransUNet: return "TransUNet";
    case ModelKind::ProbTransUNet: return "Probabilistic TransUNet";
  }
  return "?";
}

std::optional<ModelKind> parse_model_kind(std::string_view text) {
  std::string key;
  for (char ch : text) {
    if (ch == '-' || ch == '_' || ch == ' ') continue;
    key.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
  }
  if (key == "unet") return ModelKind::UNet;
  if (key == "probunet" || key == "probabilisticunet") return ModelKind::ProbUNet;
  if (key == "transunet") return ModelKind::TransUNet;
  if (key == "probtransunet" || key == "probabilistictransunet") return ModelKind::ProbTransUNet;
  return std::nullopt;
}

}  // namespace wmhseg
