#include "wmhseg/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <iostream>
#include <map>
#include <sstream>

#include "wmhseg/augment.hpp"
#include "wmhseg/errors.hpp"
#include "wmhseg/harness.hpp"
#include "wmhseg/run_config.hpp"
#include "wmhseg/trainer.hpp"

#ifndef WMHSEG_VERSION
#define WMHSEG_VERSION "unknown"
#endif

namespace wmhseg::cli {

namespace fs = std::filesystem;

namespace {

std::string version_string() {
  std::ostringstream os;
  os << "wmhseg " << WMHSEG_VERSION << " (C++" << (__cplusplus / 100 % 100);
#if defined(__clang__)
  os << ", clang " << __clang_major__ << "." << __clang_minor__;
#elif defined(__GNUC__)
  os << ", gcc " << __GNUC__ << "." << __GNUC_MINOR__;
#endif
#ifdef NDEBUG
  os << ", optimized";
#else
  os << ", debug";
#endif
  os << ")";
  return os.str();
}

void emit_error(const std::string& category, int code, const std::string& message) {
  nlohmann::json record{{"error", category}, {"exit_code", code}, {"message", message}};
  std::cerr << record.dump() << std::endl;
}

std::string extension(harness::ReportFormat format) {
  switch (format) {
    case harness::ReportFormat::Text: return ".txt";
    case harness::ReportFormat::Csv: return ".csv";
    case harness::ReportFormat::Markdown: return ".md";
  }
  return ".txt";
}

/// Flags shared by train, kfold and crosseval; each maps onto a config key.
struct CommonFlags {
  std::string config_path;
  std::map<std::string, std::string> values;  // "section.key" -> value
  std::vector<std::string> sets;              // raw --set section.key=value
  bool quiet = false;

  void add_to(CLI::App& cmd) {
    cmd.add_option("-c,--config", config_path, "Run configuration file ([model]/[train]/[data]/[run])")
        ->check(CLI::ExistingFile);
    bind(cmd, "--model", "model.kind", "Model kind: unet, prob-unet, transunet, prob-transunet");
    bind(cmd, "--preset", "model.preset", "Scale preset: paper or desk");
    bind(cmd, "--combiner", "model.combiner", "Latent combiner for probabilistic kinds: tile or deconv");
    bind(cmd, "--seed", "train.seed", "Seed for initialization, shuffling and folds");
    bind(cmd, "--epochs", "train.epochs", "Training epochs");
    bind(cmd, "--lr", "train.learning_rate", "Adam learning rate");
    bind(cmd, "--batch-size", "train.batch_size", "Minibatch size");
    bind(cmd, "--beta-kl", "train.beta_kl", "Weight of the KL term");
    bind(cmd, "--grad-clip", "train.grad_clip", "Global gradient-norm clip (0 disables)");
    bind(cmd, "--manifest", "data.manifest", "Training manifest (synthetic data is generated when omitted)");
    bind(cmd, "--val", "data.val_manifest", "Validation manifest for train");
    bind(cmd, "--eval", "data.eval", "Comma-separated evaluation manifests");
    bind(cmd, "--checkpoint", "data.checkpoint", "Checkpoint to evaluate");
    bind(cmd, "--k", "run.k", "Number of folds");
    bind(cmd, "--format", "run.report_format", "Report format: text, csv or markdown");
    bind(cmd, "-o,--out", "run.output_dir", "Output directory");
    cmd.add_flag_callback("--patient-level", [this] { values["run.patient_level"] = "true"; },
                          "Fold by patient instead of by slice");
    cmd.add_option("--set", sets, "Override any config key: section.key=value (repeatable)");
    cmd.add_flag("-q,--quiet", quiet, "Suppress progress output");
  }

  void bind(CLI::App& cmd, const std::string& flag, const std::string& key, const std::string& help) {
    cmd.add_option_function<std::string>(flag, [this, key](const std::string& v) { values[key] = v; }, help);
  }

  RunConfig resolve(Experiment experiment) const {
    std::vector<IniEntry> file_entries;
    if (!config_path.empty()) file_entries = parse_ini(data::read_text_file(config_path));
    std::vector<IniEntry> overrides;
    auto push = [&](const std::string& dotted, const std::string& value) {
      const auto dot = dotted.find('.');
      if (dot == std::string::npos) throw ConfigError("override '" + dotted + "' must be section.key");
      overrides.push_back({dotted.substr(0, dot), dotted.substr(dot + 1), value, 0});
    };
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects section.key=value, got '" + s + "'");
      push(s.substr(0, eq), s.substr(eq + 1));
    }
    for (const auto& [k, v] : values) push(k, v);
    auto config = resolve_config(file_entries, overrides);
    config.experiment = experiment;
    config.validate();
    return config;
  }
};

std::ostream& progress(bool quiet) {
  static std::ostringstream sink;
  sink.str("");
  return quiet ? static_cast<std::ostream&>(sink) : std::cout;
}

void prepare_output(const RunConfig& config) {
  std::error_code ec;
  fs::create_directories(config.output_dir, ec);
  if (ec) throw IoError("cannot create output directory " + config.output_dir.string() + ": " + ec.message());
  data::write_text_file(config.output_dir / "effective_config.ini", config.to_ini());
}

/// Training manifest from the config, or a freshly generated synthetic set
/// under output_dir/data (preprocessed to the model's input size).
data::DatasetManifest training_manifest(const RunConfig& config, std::ostream& log) {
  if (!config.data.manifest.empty()) return data::load_manifest(config.data.manifest);
  augment::SynthConfig synth;
  synth.n_patients = config.data.synth_patients;
  synth.slices_per_patient = config.data.synth_slices;
  synth.ambiguity_jitter = config.data.synth_jitter;
  synth.image_size = static_cast<std::uint32_t>(config.model.input_size);
  synth.seed = config.hyper.seed;
  const auto generated = augment::synth_generate(synth, config.output_dir / "data" / "raw");
  const auto prepared =
      augment::augment_dataset(generated.manifest, augment::AugmentPolicy::preprocessing_only(synth.image_size),
                               config.hyper.seed, config.output_dir / "data" / "prepared", false);
  log << "generated " << prepared.size() << " synthetic slices under " << (config.output_dir / "data").string()
      << '\n';
  return prepared;
}

std::string dataset_name(const data::DatasetManifest& manifest) {
  return manifest.empty() ? "SYNTH" : std::string(data::to_string(manifest.records.front().meta.dataset));
}

// ---- subcommands ----------------------------------------------------------------

struct SynthFlags {
  std::uint32_t patients = 4, slices = 8, jitter = 0, size = 128;
  std::uint64_t seed = 0;
  std::string dataset = "SYNTH";
  double radius_min = 1.0, radius_max = 4.0;
  std::string out;
};

int cmd_synth(const SynthFlags& f) {
  augment::SynthConfig c;
  c.n_patients = f.patients;
  c.slices_per_patient = f.slices;
  c.ambiguity_jitter = f.jitter;
  c.image_size = f.size;
  c.seed = f.seed;
  c.lesion_radius_min = f.radius_min;
  c.lesion_radius_max = f.radius_max;
  const auto name = data::parse_dataset_name(f.dataset);
  if (!name) throw ConfigError("unknown dataset '" + f.dataset + "'");
  c.dataset = *name;
  c.validate();
  const auto result = augment::synth_generate(c, f.out);
  std::cout << result.manifest_path.string() << '\n' << data::summarize(result.manifest);
  return kExitOk;
}

int cmd_train(const CommonFlags& flags) {
  const auto config = flags.resolve(Experiment::Single);
  prepare_output(config);
  auto& log = progress(flags.quiet);
  const auto manifest = training_manifest(config, log);
  trainer::SliceSet train_set, val_set;
  if (!config.data.val_manifest.empty()) {
    train_set = trainer::load_slices(manifest);
    val_set = trainer::load_slices(data::load_manifest(config.data.val_manifest));
  } else {
    const auto all = trainer::load_slices(manifest);
    const auto folds = harness::make_folds(manifest, config.k, config.hyper.seed, config.patient_level);
    train_set = all.subset(folds.front().train_ids);
    val_set = all.subset(folds.front().test_ids);
    log << "no validation manifest; holding out " << val_set.size() << " of " << all.size() << " slices\n";
  }
  nets::Model<float> model(config.model, config.hyper.seed);
  log << to_string(config.model.kind) << ": " << model.parameter_count() << " parameters\n";
  trainer::TrainOptions opts;
  opts.checkpoint_path = config.output_dir / "best.ckpt";
  opts.train_dataset = dataset_name(manifest);
  opts.log = &log;
  const auto report = trainer::train(model, train_set, val_set, config.hyper, opts);
  data::write_text_file(config.output_dir / "train_report.tsv", report.to_tsv());
  data::write_text_file(config.output_dir / "timing.txt", trainer::render_timing({trainer::time_epochs(report)}));
  log << "best val DSC " << report.best_val_dsc << " at epoch " << report.best_epoch << "; checkpoint "
      << opts.checkpoint_path->string() << '\n';
  return kExitOk;
}

int cmd_kfold(const CommonFlags& flags) {
  const auto config = flags.resolve(Experiment::KFold);
  prepare_output(config);
  auto& log = progress(flags.quiet);
  const auto manifest = training_manifest(config, log);
  harness::KFoldOptions opts;
  opts.k = config.k;
  opts.seed = config.hyper.seed;
  opts.patient_level = config.patient_level;
  opts.out_dir = config.output_dir;
  opts.log = &log;
  const auto result = harness::run_kfold(config.model, manifest, config.hyper, opts);
  const auto& out = config.output_dir;
  data::write_text_file(out / ("kfold_report" + extension(config.report_format)),
                        harness::render_report({result.per_fold, result.per_slice}, config.report_format));
  data::write_text_file(out / "kfold_scores_per_fold.tsv", result.per_fold.to_tsv());
  data::write_text_file(out / "kfold_scores_per_slice.tsv", result.per_slice.to_tsv());
  data::write_text_file(out / "slice_scores.tsv", harness::slice_scores_tsv(result.slice_scores));
  std::vector<trainer::TimingRow> timing;
  for (const auto& r : result.reports) timing.push_back(trainer::time_epochs(r));
  data::write_text_file(out / "timing.txt", trainer::render_timing(timing));
  log << harness::render_report({result.per_fold}, harness::ReportFormat::Text);
  return kExitOk;
}

int cmd_crosseval(const CommonFlags& flags) {
  const auto config = flags.resolve(Experiment::CrossDataset);
  if (config.data.checkpoint.empty()) throw ConfigError("crosseval needs --checkpoint");
  if (config.data.eval_manifests.empty()) throw ConfigError("crosseval needs --eval with at least one manifest");
  prepare_output(config);
  auto& log = progress(flags.quiet);
  const auto checkpoint = data::load_checkpoint(config.data.checkpoint);
  std::vector<data::DatasetManifest> manifests;
  for (const auto& p : config.data.eval_manifests) manifests.push_back(data::load_manifest(p));
  const auto result = harness::run_crossdataset(checkpoint, manifests, config.hyper.threshold, config.hyper.batch_size);
  const auto& out = config.output_dir;
  data::write_text_file(out / ("crosseval_report" + extension(config.report_format)),
                        harness::render_scores(result.table, config.report_format));
  data::write_text_file(out / "crosseval_scores.tsv", result.table.to_tsv());
  data::write_text_file(out / "slice_scores.tsv", harness::slice_scores_tsv(result.slice_scores));
  log << harness::render_scores(result.table, harness::ReportFormat::Text);
  return kExitOk;
}

struct ReportFlags {
  std::vector<std::string> scores;
  std::vector<std::string> train_reports;
  std::string format = "text";
  std::string out;
};

int cmd_report(const ReportFlags& f) {
  const auto format = harness::parse_report_format(f.format);
  if (f.scores.empty() && f.train_reports.empty()) throw ConfigError("report needs --scores or --train-reports");
  // Tables sharing a title are stacked into one multi-model table.
  std::vector<std::string> order;
  std::map<std::string, std::vector<harness::ScoreTable>> groups;
  for (const auto& path : f.scores) {
    auto table = harness::ScoreTable::parse_tsv(data::read_text_file(path));
    if (!groups.count(table.title)) order.push_back(table.title);
    groups[table.title].push_back(std::move(table));
  }
  std::string doc;
  for (const auto& title : order) {
    const auto merged = harness::ScoreTable::merge(groups[title]);
    if (!doc.empty()) doc += '\n';
    doc += harness::render_scores(merged, format);
    std::vector<harness::GainTable> gains;
    const std::pair<ModelKind, ModelKind> pairs[] = {{ModelKind::ProbUNet, ModelKind::UNet},
                                                     {ModelKind::ProbTransUNet, ModelKind::TransUNet}};
    const auto kinds = merged.kinds();
    auto has = [&](ModelKind k) { return std::find(kinds.begin(), kinds.end(), k) != kinds.end(); };
    for (const auto& [prob, det] : pairs)
      if (has(prob) && has(det)) gains.push_back(harness::dsc_gain(merged, prob, merged, det));
    if (!gains.empty()) doc += '\n' + harness::render_gains(gains, format);
  }
  if (!f.train_reports.empty()) {
    std::vector<trainer::TimingRow> rows;
    for (const auto& path : f.train_reports)
      rows.push_back(trainer::time_epochs(trainer::TrainReport::parse_tsv(data::read_text_file(path))));
    if (!doc.empty()) doc += '\n';
    doc += "Training time per epoch (seconds)\n" + trainer::render_timing(rows);
  }
  if (f.out.empty()) {
    std::cout << doc;
  } else {
    fs::create_directories(f.out);
    data::write_text_file(fs::path(f.out) / ("report" + extension(format)), doc);
  }
  return kExitOk;
}

}  // namespace

int run(int argc, char** argv) {
  CLI::App app{"White-matter hyperintensity segmentation: synthetic data, training, k-fold and cross-dataset evaluation"};
  app.set_version_flag("--version", version_string());
  app.require_subcommand(1);

  SynthFlags synth_flags;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic WMH-like dataset with manifest");
  synth->add_option("--patients", synth_flags.patients, "Number of synthetic patients")->check(CLI::Range(1u, 1000000u));
  synth->add_option("--slices", synth_flags.slices, "Slices per patient")->check(CLI::Range(1u, 1000000u));
  synth->add_option("--jitter", synth_flags.jitter, "Second-rater boundary jitter in pixels (0 = single rater)");
  synth->add_option("--size", synth_flags.size, "Image side in pixels");
  synth->add_option("--seed", synth_flags.seed, "Generator seed");
  synth->add_option("--dataset", synth_flags.dataset, "Dataset label: SYNTH, ADNI, Singapore, GE3T, Utrecht");
  synth->add_option("--radius-min", synth_flags.radius_min, "Smallest lesion radius");
  synth->add_option("--radius-max", synth_flags.radius_max, "Largest lesion radius");
  synth->add_option("-o,--out", synth_flags.out, "Output directory")->required();

  CommonFlags train_flags, kfold_flags, cross_flags;
  auto* train = app.add_subcommand("train", "Train one model and keep the best-validation checkpoint");
  train_flags.add_to(*train);
  auto* kfold = app.add_subcommand("kfold", "K-fold cross validation of one model kind");
  kfold_flags.add_to(*kfold);
  auto* cross = app.add_subcommand("crosseval", "Score a checkpoint on datasets it was not trained on");
  cross_flags.add_to(*cross);

  ReportFlags report_flags;
  auto* report = app.add_subcommand("report", "Combine score tables and train reports into one document");
  report->add_option("--scores", report_flags.scores, "Score table files (*.tsv)")->delimiter(',');
  report->add_option("--train-reports", report_flags.train_reports, "Train report files for the timing table")
      ->delimiter(',');
  report->add_option("--format", report_flags.format, "text, csv or markdown");
  report->add_option("-o,--out", report_flags.out, "Output directory (stdout when omitted)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    emit_error("usage", kExitConfig, e.what());
    return kExitConfig;
  }

  try {
    if (synth->parsed()) return cmd_synth(synth_flags);
    if (train->parsed()) return cmd_train(train_flags);
    if (kfold->parsed()) return cmd_kfold(kfold_flags);
    if (cross->parsed()) return cmd_crosseval(cross_flags);
    if (report->parsed()) return cmd_report(report_flags);
  } catch (const ConfigError& e) {
    emit_error("config", kExitConfig, e.what());
    return kExitConfig;
  } catch (const ShapeError& e) {
    emit_error("shape", kExitConfig, e.what());
    return kExitConfig;
  } catch (const FormatError& e) {
    emit_error("format", kExitIo, e.what());
    return kExitIo;
  } catch (const IoError& e) {
    emit_error("io", kExitIo, e.what());
    return kExitIo;
  } catch (const data::ManifestError& e) {
    emit_error("manifest", kExitIo, e.what());
    return kExitIo;
  } catch (const NumericalError& e) {
    emit_error("numerical", kExitNumerical, e.what());
    return kExitNumerical;
  } catch (const std::invalid_argument& e) {
    emit_error("config", kExitConfig, e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    emit_error("internal", kExitInternal, e.what());
    return kExitInternal;
  }
  return kExitInternal;
}

}  // namespace wmhseg::cli
