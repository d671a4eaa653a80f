#include "wmhseg/harness.hpp"

#include <algorithm>
#include <map>
#include <ostream>
#include <set>
#include <stdexcept>

#include "wmhseg/errors.hpp"
#include "wmhseg/objective.hpp"

namespace wmhseg::harness {

std::vector<data::Fold> make_folds(const data::DatasetManifest& manifest, std::size_t k, std::uint64_t seed,
                                   bool patient_level) {
  const std::size_t n = manifest.size();
  if (!patient_level) return data::kfold_split(n, k, seed);

  std::vector<std::string> patients;
  std::map<std::string, std::size_t> patient_index;
  std::vector<std::size_t> record_patient(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& pid = manifest.records[i].meta.patient_id;
    auto [it, inserted] = patient_index.try_emplace(pid, patients.size());
    if (inserted) patients.push_back(pid);
    record_patient[i] = it->second;
  }
  if (k > patients.size())
    throw ConfigError("patient-level folding needs k <= number of patients (" + std::to_string(patients.size()) + ")");
  const auto patient_folds = data::kfold_split(patients.size(), k, seed);
  std::vector<data::Fold> folds(k);
  for (std::size_t f = 0; f < k; ++f) {
    const std::set<std::size_t> test_patients(patient_folds[f].test_ids.begin(), patient_folds[f].test_ids.end());
    for (std::size_t i = 0; i < n; ++i)
      (test_patients.count(record_patient[i]) ? folds[f].test_ids : folds[f].train_ids).push_back(i);
  }
  return folds;
}

void check_fold_isolation(const std::vector<data::Fold>& folds, std::size_t n) {
  std::vector<int> covered(n, 0);
  for (std::size_t f = 0; f < folds.size(); ++f) {
    const std::set<std::size_t> train(folds[f].train_ids.begin(), folds[f].train_ids.end());
    for (auto id : folds[f].test_ids) {
      if (id >= n) throw std::logic_error("fold " + std::to_string(f) + ": test id out of range");
      if (train.count(id)) throw std::logic_error("fold " + std::to_string(f) + ": record " + std::to_string(id) +
                                                  " is in both train and test");
      ++covered[id];
    }
    if (train.size() + folds[f].test_ids.size() != n)
      throw std::logic_error("fold " + std::to_string(f) + ": train and test do not partition the records");
  }
  for (std::size_t i = 0; i < n; ++i)
    if (covered[i] != 1)
      throw std::logic_error("record " + std::to_string(i) + " is tested " + std::to_string(covered[i]) + " times");
}

namespace {

std::string dataset_of(const data::DatasetManifest& manifest) {
  if (manifest.empty()) throw std::invalid_argument("empty manifest");
  const auto name = manifest.records.front().meta.dataset;
  for (const auto& r : manifest.records)
    if (r.meta.dataset != name) throw ConfigError("manifest mixes datasets; split it per dataset");
  return std::string(data::to_string(name));
}

template <typename Fn>
auto with_fold_context(std::size_t fold, Fn&& fn) -> decltype(fn()) {
  const std::string prefix = "fold " + std::to_string(fold) + ": ";
  try {
    return fn();
  } catch (const NumericalError& e) {
    throw NumericalError(prefix + e.what());
  } catch (const FormatError& e) {
    throw FormatError(e.kind(), prefix + e.what());
  } catch (const IoError& e) {
    throw IoError(prefix + e.what());
  } catch (const ConfigError& e) {
    throw ConfigError(prefix + e.what());
  } catch (const ShapeError& e) {
    throw ShapeError(prefix + e.what());
  }
}

}  // namespace

KFoldResult run_kfold(const nets::ModelConfig& config, const data::DatasetManifest& manifest,
                      const trainer::HyperParams& hp, const KFoldOptions& options) {
  config.validate();
  hp.validate();
  const std::string dataset = dataset_of(manifest);
  if (const auto role = manifest.role(); role && *role != data::DatasetRole::Training)
    throw ConfigError("k-fold needs a training-role manifest; " + dataset + " is reserved for cross-dataset evaluation");

  const auto folds = make_folds(manifest, options.k, options.seed, options.patient_level);
  check_fold_isolation(folds, manifest.size());
  const auto all = trainer::load_slices(manifest);

  KFoldResult result;
  std::vector<double> slice_values;
  for (std::size_t f = 0; f < folds.size(); ++f) {
    with_fold_context(f, [&] {
      const auto train_set = all.subset(folds[f].train_ids);
      const auto test_set = all.subset(folds[f].test_ids);
      const std::uint64_t fold_seed = options.seed ^ static_cast<std::uint64_t>(f);
      trainer::HyperParams fold_hp = hp;
      fold_hp.seed = fold_seed;

      nets::Model<float> model(config, fold_seed);
      data::Checkpoint best;
      trainer::TrainOptions topts;
      topts.best_checkpoint = &best;
      topts.train_dataset = dataset;
      topts.log = options.log;
      const auto fold_dir = options.out_dir.empty() ? std::filesystem::path()
                                                    : options.out_dir / ("fold" + std::to_string(f));
      if (!fold_dir.empty()) topts.checkpoint_path = fold_dir / "best.ckpt";

      auto report = trainer::train(model, train_set, test_set, fold_hp, topts);
      if (!fold_dir.empty()) data::write_text_file(fold_dir / "train_report.tsv", report.to_tsv());

      trainer::restore_checkpoint(model, best);
      const auto scores = trainer::per_slice_dsc(model, test_set, hp.threshold, hp.batch_size);
      result.fold_scores.push_back(objective::summarize(scores).mean);
      for (std::size_t i = 0; i < scores.size(); ++i) {
        result.slice_scores.push_back({test_set.ids[i], config.kind, scores[i]});
        slice_values.push_back(scores[i]);
      }
      if (options.log)
        *options.log << "fold " << f << ": test DSC " << result.fold_scores.back() << " (best epoch "
                     << report.best_epoch << ")\n";
      result.reports.push_back(std::move(report));
    });
  }

  const auto fold_summary = objective::summarize(result.fold_scores);
  const auto slice_summary = objective::summarize(slice_values);
  result.per_fold.title = "K-fold cross validation (" + std::to_string(options.k) + " folds, per-fold aggregation)";
  result.per_fold.aggregation = Aggregation::PerFold;
  result.per_fold.rows.push_back({config.kind, dataset, fold_summary.mean, fold_summary.std, fold_summary.n});
  result.per_slice.title = "K-fold cross validation (" + std::to_string(options.k) + " folds, per-slice aggregation)";
  result.per_slice.aggregation = Aggregation::PerSlice;
  result.per_slice.rows.push_back({config.kind, dataset, slice_summary.mean, slice_summary.std, slice_summary.n});
  return result;
}

void append_average(ScoreTable& table, ModelKind kind) {
  double mean_sum = 0.0, std_sum = 0.0;
  std::size_t count = 0, n = 0;
  for (const auto& r : table.rows) {
    if (r.kind != kind || r.dataset == kAverageRow) continue;
    mean_sum += r.mean;
    std_sum += r.std;
    n += r.n;
    ++count;
  }
  if (count == 0) throw std::invalid_argument("append_average: no rows for this model kind");
  table.rows.push_back({kind, kAverageRow, mean_sum / static_cast<double>(count), std_sum / static_cast<double>(count), n});
}

CrossResult run_crossdataset(const data::Checkpoint& checkpoint, const std::vector<data::DatasetManifest>& manifests,
                             double threshold, int batch_size) {
  if (manifests.empty()) throw std::invalid_argument("cross-dataset evaluation needs at least one manifest");
  const auto model = trainer::model_from_checkpoint(checkpoint);
  const ModelKind kind = model.config().kind;

  CrossResult result;
  result.table.title = "Cross dataset robustness (trained on " + checkpoint.train_dataset + ")";
  result.table.aggregation = Aggregation::PerSlice;
  std::set<std::string> seen;
  for (const auto& manifest : manifests) {
    const std::string dataset = dataset_of(manifest);
    if (dataset == checkpoint.train_dataset)
      throw ConfigError("evaluation dataset " + dataset + " is the training dataset; cross-dataset sets must be disjoint");
    if (!seen.insert(dataset).second) throw ConfigError("dataset " + dataset + " given twice");
    const auto set = trainer::load_slices(manifest);
    const auto scores = trainer::per_slice_dsc(model, set, threshold, batch_size);
    const auto s = objective::summarize(scores);
    result.table.rows.push_back({kind, dataset, s.mean, s.std, s.n});
    for (std::size_t i = 0; i < scores.size(); ++i) result.slice_scores.push_back({set.ids[i], kind, scores[i]});
  }
  append_average(result.table, kind);
  return result;
}

GainTable dsc_gain(const ScoreTable& prob_table, ModelKind prob_kind, const ScoreTable& det_table,
                   ModelKind det_kind) {
  auto collect = [](const ScoreTable& t, ModelKind kind) {
    std::vector<const ScoreRow*> rows;
    for (const auto& r : t.rows)
      if (r.kind == kind && r.dataset != kAverageRow) rows.push_back(&r);
    return rows;
  };
  const auto prob_rows = collect(prob_table, prob_kind);
  const auto det_rows = collect(det_table, det_kind);
  if (prob_rows.empty()) throw std::invalid_argument("dsc_gain: no rows for " + std::string(to_string(prob_kind)));
  if (prob_rows.size() != det_rows.size())
    throw std::invalid_argument("dsc_gain: tables hold different dataset rows");

  GainTable gain;
  gain.prob_kind = prob_kind;
  gain.det_kind = det_kind;
  double sum = 0.0;
  for (const auto* p : prob_rows) {
    const auto* d = det_table.find(det_kind, p->dataset);
    if (!d) throw std::invalid_argument("dsc_gain: dataset " + p->dataset + " missing for " +
                                        std::string(to_string(det_kind)));
    const double delta = p->mean - d->mean;
    gain.rows.push_back({p->dataset, delta});
    sum += delta;
  }
  gain.rows.push_back({kAverageRow, sum / static_cast<double>(prob_rows.size())});
  return gain;
}

}  // namespace wmhseg::harness
