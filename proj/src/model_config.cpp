#include "wmhseg/model_config.hpp"

#include <cctype>
#include <charconv>
#include <cstdio>
#include <sstream>

#include "wmhseg/errors.hpp"

namespace wmhseg::nets {

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& ch : out) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  return out;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

int parse_int(std::string_view key, std::string_view text) {
  text = trim(text);
  int value = 0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || ptr != text.data() + text.size())
    throw ConfigError("model." + std::string(key) + ": expected an integer, got '" + std::string(text) + "'");
  return value;
}

std::vector<int> parse_int_list(std::string_view key, std::string_view text) {
  std::vector<int> out;
  text = trim(text);
  if (text.empty()) return out;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t comma = text.find(',', start);
    const std::string_view item = text.substr(start, comma == std::string_view::npos ? text.size() - start : comma - start);
    out.push_back(parse_int(key, item));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

std::string join(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(v[i]);
  }
  return out;
}

bool is_power_of_two(int v) { return v > 0 && (v & (v - 1)) == 0; }

void check_increasing(const std::vector<int>& filters, const char* name) {
  if (filters.empty()) throw ConfigError(std::string("model.") + name + " must not be empty");
  for (std::size_t i = 0; i < filters.size(); ++i) {
    if (filters[i] < 1) throw ConfigError(std::string("model.") + name + " entries must be positive");
    if (i > 0 && filters[i] <= filters[i - 1])
      throw ConfigError(std::string("model.") + name + " must be strictly increasing");
  }
}

}  // namespace

std::string_view to_string(ScalePreset preset) {
  switch (preset) {
    case ScalePreset::Paper: return "paper";
    case ScalePreset::Desk: return "desk";
    case ScalePreset::Custom: return "custom";
  }
  return "custom";
}

std::string_view to_string(CombinerKind combiner) {
  return combiner == CombinerKind::Tile ? "tile" : "deconv";
}

ScalePreset parse_scale_preset(std::string_view text) {
  const auto t = lower(trim(text));
  if (t == "paper") return ScalePreset::Paper;
  if (t == "desk") return ScalePreset::Desk;
  if (t == "custom") return ScalePreset::Custom;
  throw ConfigError("unknown scale preset '" + std::string(text) + "' (expected paper or desk)");
}

CombinerKind parse_combiner(std::string_view text) {
  const auto t = lower(trim(text));
  if (t == "tile") return CombinerKind::Tile;
  if (t == "deconv") return CombinerKind::Deconv;
  throw ConfigError("unknown combiner '" + std::string(text) + "' (expected tile or deconv)");
}

ModelConfig ModelConfig::make(ModelKind kind, ScalePreset preset) {
  ModelConfig c;
  c.kind = kind;
  c.preset = preset;
  if (preset == ScalePreset::Paper) {
    c.input_size = 128;
    c.unet_filters = kind == ModelKind::ProbUNet ? std::vector<int>{32, 64, 128, 256, 512}
                                                 : std::vector<int>{64, 128, 256, 512, 1024};
    c.trans_filters = {16, 32, 64, 128};
    c.backbone_units = {3, 4, 6};
    c.transformer_layers = 12;
    c.hidden_dim = 768;
    c.heads = 12;
    c.mlp_dim = 3072;
  } else {
    c.input_size = 32;
    c.unet_filters = kind == ModelKind::ProbUNet ? std::vector<int>{8, 16, 32, 64, 128}
                                                 : std::vector<int>{16, 32, 64, 128, 256};
    c.trans_filters = {16, 32, 64, 128};
    c.backbone_units = {1, 1, 1};
    c.transformer_layers = 12;
    c.hidden_dim = 64;
    c.heads = 4;
    c.mlp_dim = 128;
  }
  c.latent_dim = is_probabilistic(kind) ? 6 : 0;
  c.combiner = kind == ModelKind::ProbTransUNet ? CombinerKind::Deconv : CombinerKind::Tile;
  return c;
}

const std::vector<int>& ModelConfig::level_filters() const {
  return is_transformer(kind) ? trans_filters : unet_filters;
}

int ModelConfig::patch_grid() const {
  const int levels = static_cast<int>(trans_filters.size());
  return input_size >> (levels - 1);
}

void ModelConfig::validate() const {
  if (is_probabilistic(kind)) {
    if (latent_dim < 1) throw ConfigError("model.latent_dim must be >= 1 for " + std::string(wmhseg::to_string(kind)));
  } else if (latent_dim != 0) {
    throw ConfigError("model.latent_dim is only used by probabilistic kinds; set it to 0 for " +
                      std::string(wmhseg::to_string(kind)));
  }
  if (convs_per_level < 1) throw ConfigError("model.convs_per_level must be >= 1");
  if (input_size < 2) throw ConfigError("model.input_size must be >= 2");

  const auto& filters = level_filters();
  check_increasing(filters, is_transformer(kind) ? "trans_filters" : "unet_filters");
  if (filters.size() < 2) throw ConfigError("model: at least two resolution levels are required");
  const int reduction = 1 << (filters.size() - 1);
  if (input_size % reduction != 0)
    throw ConfigError("model.input_size " + std::to_string(input_size) + " is not divisible by " +
                      std::to_string(reduction) + " (one halving per level)");

  if (is_transformer(kind)) {
    if (transformer_layers < 1) throw ConfigError("model.transformer_layers must be >= 1");
    if (hidden_dim < 1 || heads < 1 || mlp_dim < 1) throw ConfigError("model: transformer sizes must be positive");
    if (hidden_dim % heads != 0)
      throw ConfigError("model.hidden_dim " + std::to_string(hidden_dim) + " is not divisible by heads " +
                        std::to_string(heads));
    if (backbone_units.size() != filters.size() - 1)
      throw ConfigError("model.backbone_units needs " + std::to_string(filters.size() - 1) + " entries");
    for (int u : backbone_units)
      if (u < 1) throw ConfigError("model.backbone_units entries must be >= 1");
  }
  if (is_probabilistic(kind) && combiner == CombinerKind::Deconv && !is_power_of_two(input_size))
    throw ConfigError("model.combiner=deconv needs a power-of-two input_size, got " + std::to_string(input_size));
}

std::string ModelConfig::to_text() const {
  std::ostringstream os;
  os << "kind=" << wmhseg::to_string(kind) << '\n'
     << "preset=" << to_string(preset) << '\n'
     << "input_size=" << input_size << '\n'
     << "unet_filters=" << join(unet_filters) << '\n'
     << "trans_filters=" << join(trans_filters) << '\n'
     << "backbone_units=" << join(backbone_units) << '\n'
     << "transformer_layers=" << transformer_layers << '\n'
     << "hidden_dim=" << hidden_dim << '\n'
     << "heads=" << heads << '\n'
     << "mlp_dim=" << mlp_dim << '\n'
     << "latent_dim=" << latent_dim << '\n'
     << "convs_per_level=" << convs_per_level << '\n'
     << "combiner=" << to_string(combiner) << '\n';
  return os.str();
}

void ModelConfig::set(std::string_view key, std::string_view value) {
  key = trim(key);
  if (key == "kind") {
    const auto k = parse_model_kind(trim(value));
    if (!k) throw ConfigError("model.kind: unknown model '" + std::string(value) + "'");
    kind = *k;
  } else if (key == "preset") {
    preset = parse_scale_preset(value);
  } else if (key == "input_size") {
    input_size = parse_int(key, value);
  } else if (key == "unet_filters") {
    unet_filters = parse_int_list(key, value);
  } else if (key == "trans_filters") {
    trans_filters = parse_int_list(key, value);
  } else if (key == "backbone_units") {
    backbone_units = parse_int_list(key, value);
  } else if (key == "transformer_layers") {
    transformer_layers = parse_int(key, value);
  } else if (key == "hidden_dim") {
    hidden_dim = parse_int(key, value);
  } else if (key == "heads") {
    heads = parse_int(key, value);
  } else if (key == "mlp_dim") {
    mlp_dim = parse_int(key, value);
  } else if (key == "latent_dim") {
    latent_dim = parse_int(key, value);
  } else if (key == "convs_per_level") {
    convs_per_level = parse_int(key, value);
  } else if (key == "combiner") {
    combiner = parse_combiner(value);
  } else {
    throw ConfigError("model: unknown key '" + std::string(key) + "'");
  }
}

ModelConfig ModelConfig::parse(std::string_view text) {
  ModelConfig c;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    const std::string_view line = trim(text.substr(start, end - start));
    start = end + 1;
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ConfigError("model config line without '=': " + std::string(line));
    c.set(line.substr(0, eq), line.substr(eq + 1));
  }
  return c;
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string ModelConfig::hash() const {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(to_text())));
  return buf;
}

}  // namespace wmhseg::nets
