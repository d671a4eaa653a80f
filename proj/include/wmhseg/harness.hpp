#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "wmhseg/datamodel.hpp"
#include "wmhseg/model_config.hpp"
#include "wmhseg/trainer.hpp"

namespace wmhseg::harness {

enum class Aggregation { PerFold, PerSlice };

std::string_view to_string(Aggregation aggregation);

struct ScoreRow {
  ModelKind kind = ModelKind::UNet;
  std::string dataset;
  double mean = 0.0;
  double std = 0.0;
  std::size_t n = 0;

  bool operator==(const ScoreRow&) const = default;
};

struct ScoreTable {
  std::string title;
  Aggregation aggregation = Aggregation::PerSlice;
  std::vector<ScoreRow> rows;

  const ScoreRow* find(ModelKind kind, const std::string& dataset) const;
  /// Model kinds and dataset names in first-appearance order.
  std::vector<ModelKind> kinds() const;
  std::vector<std::string> datasets() const;

  /// "# title=..." and "# aggregation=..." then kind, dataset, mean, std, n per line.
  std::string to_tsv() const;
  static ScoreTable parse_tsv(const std::string& text);
  /// Row-wise concatenation; title and aggregation come from the first table.
  static ScoreTable merge(const std::vector<ScoreTable>& tables);

  bool operator==(const ScoreTable&) const = default;
};

inline constexpr const char* kAverageRow = "Average";

struct SliceScore {
  std::string slice_id;
  ModelKind kind = ModelKind::UNet;
  double dsc = 0.0;
};

/// slice_id, model_kind, dsc per line.
std::string slice_scores_tsv(const std::vector<SliceScore>& scores);

// ---- k-fold -----------------------------------------------------------------

struct KFoldOptions {
  std::size_t k = 5;
  std::uint64_t seed = 0;
  bool patient_level = false;
  std::filesystem::path out_dir;  // fold checkpoints and train reports; empty keeps checkpoints in memory only
  std::ostream* log = nullptr;
};

/// Folds over manifest records. Slice-level folding shuffles record indices;
/// patient-level folding shuffles patients and keeps each patient's slices
/// together.
std::vector<data::Fold> make_folds(const data::DatasetManifest& manifest, std::size_t k, std::uint64_t seed,
                                   bool patient_level);

/// Throws std::logic_error if a fold's train and test ids intersect or the
/// test ids of all folds do not cover `n` records exactly once.
void check_fold_isolation(const std::vector<data::Fold>& folds, std::size_t n);

struct KFoldResult {
  ScoreTable per_fold;   // one row, mean/std across fold means, n = k
  ScoreTable per_slice;  // one row, mean/std across all test slices
  std::vector<double> fold_scores;
  std::vector<SliceScore> slice_scores;
  std::vector<trainer::TrainReport> reports;
};

/// Trains one model per fold (test split doubles as the validation split),
/// restores the fold's best checkpoint and scores the test split. Fold f
/// trains with seed ^ f.
KFoldResult run_kfold(const nets::ModelConfig& config, const data::DatasetManifest& manifest,
                      const trainer::HyperParams& hp, const KFoldOptions& options);

// ---- cross-dataset ------------------------------------------------------------

struct CrossResult {
  ScoreTable table;  // one row per dataset plus the Average row
  std::vector<SliceScore> slice_scores;
};

/// Scores a trained checkpoint on manifests from other datasets. The Average
/// row's mean and std are the unweighted means of the per-dataset values.
CrossResult run_crossdataset(const data::Checkpoint& checkpoint, const std::vector<data::DatasetManifest>& manifests,
                             double threshold = 0.5, int batch_size = 8);

/// Appends the Average row for `kind` over its per-dataset rows.
void append_average(ScoreTable& table, ModelKind kind);

// ---- gains --------------------------------------------------------------------

struct GainRow {
  std::string dataset;
  double delta = 0.0;
};

struct GainTable {
  ModelKind prob_kind = ModelKind::ProbUNet;
  ModelKind det_kind = ModelKind::UNet;
  std::vector<GainRow> rows;  // per dataset, then the Average of the deltas
};

/// Per-dataset (prob mean - det mean) over the datasets both tables hold for
/// the two kinds, plus their unweighted mean. Average rows in the inputs are
/// ignored. Throws std::invalid_argument if the dataset sets differ.
GainTable dsc_gain(const ScoreTable& prob_table, ModelKind prob_kind, const ScoreTable& det_table,
                   ModelKind det_kind);

/// Signed three-decimal form: "+0.044", "-0.007", "+0.000".
std::string format_signed(double value, int decimals = 3);

// ---- rendering ------------------------------------------------------------------

enum class ReportFormat { Text, Csv, Markdown };

std::string_view to_string(ReportFormat format);
ReportFormat parse_report_format(std::string_view text);

/// Model rows by dataset columns with "mean (std)" cells; the best mean in
/// each column is marked when the table has two or more rows.
std::string render_scores(const ScoreTable& table, ReportFormat format);
std::string render_gains(const std::vector<GainTable>& gains, ReportFormat format);
std::string render_report(const std::vector<ScoreTable>& tables, ReportFormat format);

}  // namespace wmhseg::harness
