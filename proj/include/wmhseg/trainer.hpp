#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "wmhseg/datamodel.hpp"
#include "wmhseg/model.hpp"

namespace wmhseg::trainer {

using nets::Model;

struct HyperParams {
  int epochs = 500;
  double learning_rate = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  int batch_size = 8;
  double beta_kl = 1.0;
  double threshold = 0.5;
  std::uint64_t seed = 0;
  double grad_clip = 0.0;  // global-norm clip; 0 disables

  /// Laptop-scale defaults: few epochs, otherwise the full-scale constants.
  static HyperParams desk();
  void validate() const;
  bool operator==(const HyperParams&) const = default;
};

/// Images and masks held in memory, in manifest order.
struct SliceSet {
  std::vector<std::string> ids;
  std::vector<data::Slice2D> images;
  std::vector<data::Mask2D> masks;

  std::size_t size() const { return ids.size(); }
  bool empty() const { return ids.empty(); }
  SliceSet subset(const std::vector<std::size_t>& indices) const;
};

SliceSet load_slices(const data::DatasetManifest& manifest);

struct EpochRecord {
  int epoch = 0;  // 1-based
  double ce = 0.0;
  double kl = 0.0;
  double total = 0.0;
  double val_dsc = 0.0;
  double seconds = 0.0;
  bool saved = false;
};

struct TrainReport {
  std::string model_kind;
  std::vector<EpochRecord> records;
  int best_epoch = 0;
  double best_val_dsc = -1.0;
  std::filesystem::path checkpoint_path;
  std::size_t skipped_steps = 0;
  std::uint64_t batches = 0;  // minibatches processed, skipped steps included

  /// val_dsc of every epoch that wrote a checkpoint, in order.
  std::vector<double> saved_val_dscs() const;

  /// '#'-prefixed header lines then one tab-separated line per epoch:
  /// epoch, ce, kl, total, val_dsc, seconds, saved.
  std::string to_tsv() const;
  static TrainReport parse_tsv(const std::string& text);
};

/// Adam with bias correction over every parameter of a set.
class Adam {
public:
  Adam(nets::ParameterSet<float>& params, const HyperParams& hp);

  /// Applies one update from the accumulated gradients. Returns false, leaving
  /// parameters and state untouched, when any gradient is non-finite.
  bool step();
  std::uint64_t steps() const { return steps_; }

private:
  nets::ParameterSet<float>& params_;
  double lr_, beta1_, beta2_, eps_, clip_;
  std::vector<std::vector<double>> m_, v_;
  std::uint64_t steps_ = 0;
};

/// Per-slice DSC of binarized inference logits, in set order.
std::vector<double> per_slice_dsc(const Model<float>& model, const SliceSet& set, double threshold, int batch_size);

/// Mean per-slice DSC; throws std::invalid_argument on an empty set.
double validate(const Model<float>& model, const SliceSet& set, double threshold, int batch_size);

struct TrainOptions {
  std::optional<std::filesystem::path> checkpoint_path;  // write on every strict val improvement
  data::Checkpoint* best_checkpoint = nullptr;  // refreshed in memory on every save
  std::string train_dataset = "SYNTH";
  std::ostream* log = nullptr;  // one progress line per epoch
  std::optional<double> stop_at_val_dsc;  // end after the first epoch validating at or above this
};

/// Minibatch Adam on the total loss, validating after every epoch.
/// Throws NumericalError naming epoch and batch on a non-finite loss.
TrainReport train(Model<float>& model, const SliceSet& train_set, const SliceSet& val_set, const HyperParams& hp,
                  const TrainOptions& options = {});
TrainReport train(Model<float>& model, const data::DatasetManifest& train_manifest,
                  const data::DatasetManifest& val_manifest, const HyperParams& hp, const TrainOptions& options = {});

data::Checkpoint make_checkpoint(const Model<float>& model, std::uint32_t epoch, double val_dsc,
                                 const std::string& train_dataset);
/// Loads parameters after checking the stored config hash against the model's.
void restore_checkpoint(Model<float>& model, const data::Checkpoint& checkpoint);
/// Builds a fresh model from the config text stored in the checkpoint.
Model<float> model_from_checkpoint(const data::Checkpoint& checkpoint);

struct TimingRow {
  std::string model_kind;
  double mean_seconds = 0.0;
  double median_seconds = 0.0;
  std::size_t epochs = 0;
};

TimingRow time_epochs(const TrainReport& report);
/// Columns: model, mean and median seconds per epoch, epoch count.
std::string render_timing(const std::vector<TimingRow>& rows);

}  // namespace wmhseg::trainer
