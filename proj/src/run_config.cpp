#include "wmhseg/run_config.hpp"

#include <cctype>
#include <charconv>
#include <cstdio>
#include <sstream>

#include "wmhseg/errors.hpp"

namespace wmhseg::cli {

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& ch : out) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  return out;
}

std::string where(std::string_view section, std::string_view key) {
  return std::string(section) + "." + std::string(key);
}

template <typename T>
T parse_number(std::string_view section, std::string_view key, std::string_view text) {
  text = trim(text);
  T value{};
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || ptr != text.data() + text.size())
    throw ConfigError(where(section, key) + ": cannot parse '" + std::string(text) + "'");
  return value;
}

bool parse_bool(std::string_view section, std::string_view key, std::string_view text) {
  const auto t = lower(trim(text));
  if (t == "true" || t == "1" || t == "yes" || t == "on") return true;
  if (t == "false" || t == "0" || t == "no" || t == "off") return false;
  throw ConfigError(where(section, key) + ": expected true or false, got '" + std::string(text) + "'");
}

std::vector<std::filesystem::path> parse_paths(std::string_view text) {
  std::vector<std::filesystem::path> out;
  std::size_t start = 0;
  text = trim(text);
  while (start < text.size()) {
    std::size_t comma = text.find(',', start);
    if (comma == std::string_view::npos) comma = text.size();
    const auto item = trim(text.substr(start, comma - start));
    if (!item.empty()) out.emplace_back(std::string(item));
    start = comma + 1;
  }
  return out;
}

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string_view to_string(Experiment experiment) {
  switch (experiment) {
    case Experiment::Single: return "single";
    case Experiment::KFold: return "kfold";
    case Experiment::CrossDataset: return "crossdataset";
  }
  return "single";
}

Experiment parse_experiment(std::string_view text) {
  const auto t = lower(trim(text));
  if (t == "single") return Experiment::Single;
  if (t == "kfold") return Experiment::KFold;
  if (t == "crossdataset") return Experiment::CrossDataset;
  throw ConfigError("run.experiment: unknown value '" + std::string(text) + "'");
}

RunConfig RunConfig::defaults(ModelKind kind, nets::ScalePreset preset) {
  RunConfig c;
  c.model = nets::ModelConfig::make(kind, preset);
  c.hyper = preset == nets::ScalePreset::Paper ? trainer::HyperParams{} : trainer::HyperParams::desk();
  return c;
}

void RunConfig::set(std::string_view section, std::string_view key, std::string_view value) {
  section = trim(section);
  key = trim(key);
  value = trim(value);
  if (section == "model") {
    model.set(key, value);
  } else if (section == "train") {
    if (key == "epochs") hyper.epochs = parse_number<int>(section, key, value);
    else if (key == "learning_rate") hyper.learning_rate = parse_number<double>(section, key, value);
    else if (key == "adam_beta1") hyper.adam_beta1 = parse_number<double>(section, key, value);
    else if (key == "adam_beta2") hyper.adam_beta2 = parse_number<double>(section, key, value);
    else if (key == "adam_epsilon") hyper.adam_epsilon = parse_number<double>(section, key, value);
    else if (key == "batch_size") hyper.batch_size = parse_number<int>(section, key, value);
    else if (key == "beta_kl") hyper.beta_kl = parse_number<double>(section, key, value);
    else if (key == "threshold") hyper.threshold = parse_number<double>(section, key, value);
    else if (key == "seed") hyper.seed = parse_number<std::uint64_t>(section, key, value);
    else if (key == "grad_clip") hyper.grad_clip = parse_number<double>(section, key, value);
    else throw ConfigError("unknown key " + where(section, key));
  } else if (section == "data") {
    if (key == "manifest") data.manifest = std::string(value);
    else if (key == "val_manifest") data.val_manifest = std::string(value);
    else if (key == "eval") data.eval_manifests = parse_paths(value);
    else if (key == "checkpoint") data.checkpoint = std::string(value);
    else if (key == "synth_patients") data.synth_patients = parse_number<std::uint32_t>(section, key, value);
    else if (key == "synth_slices") data.synth_slices = parse_number<std::uint32_t>(section, key, value);
    else if (key == "synth_jitter") data.synth_jitter = parse_number<std::uint32_t>(section, key, value);
    else throw ConfigError("unknown key " + where(section, key));
  } else if (section == "run") {
    if (key == "output_dir") output_dir = std::string(value);
    else if (key == "experiment") experiment = parse_experiment(value);
    else if (key == "report_format") report_format = harness::parse_report_format(value);
    else if (key == "k") k = parse_number<std::size_t>(section, key, value);
    else if (key == "patient_level") patient_level = parse_bool(section, key, value);
    else throw ConfigError("unknown key " + where(section, key));
  } else {
    throw ConfigError("unknown section [" + std::string(section) + "]");
  }
}

std::string RunConfig::to_ini() const {
  std::ostringstream os;
  os << "[model]\n" << model.to_text() << '\n';
  os << "[train]\n"
     << "epochs=" << hyper.epochs << '\n'
     << "learning_rate=" << num(hyper.learning_rate) << '\n'
     << "adam_beta1=" << num(hyper.adam_beta1) << '\n'
     << "adam_beta2=" << num(hyper.adam_beta2) << '\n'
     << "adam_epsilon=" << num(hyper.adam_epsilon) << '\n'
     << "batch_size=" << hyper.batch_size << '\n'
     << "beta_kl=" << num(hyper.beta_kl) << '\n'
     << "threshold=" << num(hyper.threshold) << '\n'
     << "seed=" << hyper.seed << '\n'
     << "grad_clip=" << num(hyper.grad_clip) << "\n\n";
  os << "[data]\n"
     << "manifest=" << data.manifest.generic_string() << '\n'
     << "val_manifest=" << data.val_manifest.generic_string() << '\n'
     << "eval=";
  for (std::size_t i = 0; i < data.eval_manifests.size(); ++i)
    os << (i ? "," : "") << data.eval_manifests[i].generic_string();
  os << '\n'
     << "checkpoint=" << data.checkpoint.generic_string() << '\n'
     << "synth_patients=" << data.synth_patients << '\n'
     << "synth_slices=" << data.synth_slices << '\n'
     << "synth_jitter=" << data.synth_jitter << "\n\n";
  os << "[run]\n"
     << "output_dir=" << output_dir.generic_string() << '\n'
     << "experiment=" << to_string(experiment) << '\n'
     << "report_format=" << harness::to_string(report_format) << '\n'
     << "k=" << k << '\n'
     << "patient_level=" << (patient_level ? "true" : "false") << '\n';
  return os.str();
}

void RunConfig::validate() const {
  model.validate();
  hyper.validate();
  if (k < 2) throw ConfigError("run.k must be >= 2");
  if (output_dir.empty()) throw ConfigError("run.output_dir must not be empty");
  auto must_exist = [](const std::filesystem::path& p, const char* what) {
    if (!p.empty() && !std::filesystem::exists(p)) throw IoError(std::string(what) + " not found: " + p.string());
  };
  must_exist(data.manifest, "data.manifest");
  must_exist(data.val_manifest, "data.val_manifest");
  must_exist(data.checkpoint, "data.checkpoint");
  for (const auto& p : data.eval_manifests) must_exist(p, "data.eval manifest");
}

std::vector<IniEntry> parse_ini(std::string_view text) {
  std::vector<IniEntry> out;
  std::string section;
  int line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    const auto line = trim(text.substr(start, end - start));
    ++line_no;
    start = end + 1;
    if (line.empty() || line.front() == '#' || line.front() == ';') {
      if (end == text.size()) break;
      continue;
    }
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("config line " + std::to_string(line_no) + ": unterminated section");
      section = std::string(trim(line.substr(1, line.size() - 2)));
    } else {
      const auto eq = line.find('=');
      if (eq == std::string_view::npos)
        throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
      if (section.empty())
        throw ConfigError("config line " + std::to_string(line_no) + ": key outside of a [section]");
      out.push_back({section, std::string(trim(line.substr(0, eq))), std::string(trim(line.substr(eq + 1))), line_no});
    }
    if (end == text.size()) break;
  }
  return out;
}

RunConfig resolve_config(const std::vector<IniEntry>& file_entries, const std::vector<IniEntry>& overrides) {
  ModelKind kind = ModelKind::UNet;
  nets::ScalePreset preset = nets::ScalePreset::Desk;
  for (const auto* layer : {&file_entries, &overrides})
    for (const auto& e : *layer) {
      if (e.section != "model") continue;
      if (e.key == "kind") {
        const auto k = parse_model_kind(e.value);
        if (!k) throw ConfigError("model.kind: unknown model '" + e.value + "'");
        kind = *k;
      } else if (e.key == "preset") {
        preset = nets::parse_scale_preset(e.value);
      }
    }
  // Custom is a label for hand-edited configs; its defaults are the desk values.
  RunConfig config = RunConfig::defaults(kind, preset == nets::ScalePreset::Paper ? preset : nets::ScalePreset::Desk);
  config.model.preset = preset;
  for (const auto* layer : {&file_entries, &overrides})
    for (const auto& e : *layer) {
      try {
        config.set(e.section, e.key, e.value);
      } catch (const ConfigError& err) {
        if (e.line > 0) throw ConfigError("config line " + std::to_string(e.line) + ": " + err.what());
        throw;
      }
    }
  return config;
}

}  // namespace wmhseg::cli
