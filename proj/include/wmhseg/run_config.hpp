#pragma once

// Run configuration: an INI-style file with [model], [train], [data] and
// [run] sections. Unknown sections and keys are rejected. Effective configs
// are written back in the same format and reproduce the run when re-read.

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "wmhseg/harness.hpp"
#include "wmhseg/model_config.hpp"
#include "wmhseg/trainer.hpp"

namespace wmhseg::cli {

enum class Experiment { Single, KFold, CrossDataset };

std::string_view to_string(Experiment experiment);
Experiment parse_experiment(std::string_view text);

struct DataSection {
  std::filesystem::path manifest;      // training manifest; empty means generate synthetic data
  std::filesystem::path val_manifest;  // empty means hold out one fold of the training manifest
  std::vector<std::filesystem::path> eval_manifests;
  std::filesystem::path checkpoint;
  std::uint32_t synth_patients = 5;
  std::uint32_t synth_slices = 8;
  std::uint32_t synth_jitter = 0;
};

struct RunConfig {
  nets::ModelConfig model;
  trainer::HyperParams hyper;
  DataSection data;
  std::filesystem::path output_dir = "wmhseg_out";
  Experiment experiment = Experiment::Single;
  harness::ReportFormat report_format = harness::ReportFormat::Text;
  std::size_t k = 5;
  bool patient_level = false;

  /// Defaults for a model kind at a scale preset (desk also shortens training).
  static RunConfig defaults(ModelKind kind, nets::ScalePreset preset);

  /// Applies "section.key" = value.
  void set(std::string_view section, std::string_view key, std::string_view value);
  std::string to_ini() const;

  /// Model and hyperparameter checks plus existence of referenced inputs.
  void validate() const;
};

struct IniEntry {
  std::string section;
  std::string key;
  std::string value;
  int line = 0;
};

/// Parses "[section]" headers, "key = value" lines, and '#'/';' comments.
std::vector<IniEntry> parse_ini(std::string_view text);

/// Layers `file_entries` then `overrides` over the defaults selected by the
/// effective model kind and preset (override > file > UNet/desk).
RunConfig resolve_config(const std::vector<IniEntry>& file_entries, const std::vector<IniEntry>& overrides);

}  // namespace wmhseg::cli
