#include "wmhseg/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <sstream>

#include "wmhseg/errors.hpp"
#include "wmhseg/objective.hpp"

namespace wmhseg::trainer {

HyperParams HyperParams::desk() {
  HyperParams hp;
  hp.epochs = 3;
  return hp;
}

void HyperParams::validate() const {
  if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("train.learning_rate must be > 0");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0))
    throw ConfigError("train: Adam betas must lie in [0, 1)");
  if (!(adam_epsilon > 0.0)) throw ConfigError("train.adam_epsilon must be > 0");
  if (!(beta_kl >= 0.0)) throw ConfigError("train.beta_kl must be >= 0");
  if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("train.threshold must lie in (0, 1)");
  if (!(grad_clip >= 0.0)) throw ConfigError("train.grad_clip must be >= 0");
}

// ---- data -------------------------------------------------------------------

SliceSet SliceSet::subset(const std::vector<std::size_t>& indices) const {
  SliceSet out;
  for (auto i : indices) {
    out.ids.push_back(ids.at(i));
    out.images.push_back(images.at(i));
    out.masks.push_back(masks.at(i));
  }
  return out;
}

SliceSet load_slices(const data::DatasetManifest& manifest) {
  SliceSet set;
  for (const auto& r : manifest.records) {
    auto image = data::read_slice(r.image_path);
    auto mask = data::read_mask(r.mask_path);
    if (image.height != mask.height || image.width != mask.width)
      throw ShapeError("record " + r.id + ": image and mask sizes differ");
    set.ids.push_back(r.id);
    set.images.push_back(std::move(image));
    set.masks.push_back(std::move(mask));
  }
  return set;
}

namespace {

nets::Tensor<float> batch_images(const SliceSet& set, const std::vector<std::size_t>& idx) {
  std::vector<const data::Slice2D*> ptrs;
  for (auto i : idx) ptrs.push_back(&set.images[i]);
  return nets::stack_images<float>(ptrs);
}

nets::Tensor<float> batch_masks(const SliceSet& set, const std::vector<std::size_t>& idx) {
  std::vector<const data::Mask2D*> ptrs;
  for (auto i : idx) ptrs.push_back(&set.masks[i]);
  return nets::stack_masks<float>(ptrs);
}

void check_sizes(const Model<float>& model, const SliceSet& set, const char* what) {
  const auto size = static_cast<std::uint32_t>(model.config().input_size);
  for (std::size_t i = 0; i < set.size(); ++i)
    if (set.images[i].height != size || set.images[i].width != size)
      throw ShapeError(std::string(what) + " slice " + set.ids[i] + " is " + std::to_string(set.images[i].height) +
                       "x" + std::to_string(set.images[i].width) + " but the model expects " + std::to_string(size) +
                       "x" + std::to_string(size));
}

std::string fmt(double v, const char* spec = "%.6f") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

}  // namespace

// ---- report -----------------------------------------------------------------

std::vector<double> TrainReport::saved_val_dscs() const {
  std::vector<double> out;
  for (const auto& r : records)
    if (r.saved) out.push_back(r.val_dsc);
  return out;
}

std::string TrainReport::to_tsv() const {
  std::ostringstream os;
  os << "# model_kind=" << model_kind << '\n'
     << "# best_epoch=" << best_epoch << '\n'
     << "# best_val_dsc=" << fmt(best_val_dsc, "%.9g") << '\n'
     << "# checkpoint=" << checkpoint_path.generic_string() << '\n'
     << "# skipped_steps=" << skipped_steps << '\n'
     << "# epoch\tce\tkl\ttotal\tval_dsc\tseconds\tsaved\n";
  for (const auto& r : records)
    os << r.epoch << '\t' << fmt(r.ce, "%.9g") << '\t' << fmt(r.kl, "%.9g") << '\t' << fmt(r.total, "%.9g") << '\t'
       << fmt(r.val_dsc, "%.9g") << '\t' << fmt(r.seconds, "%.4f") << '\t' << (r.saved ? 1 : 0) << '\n';
  return os.str();
}

TrainReport TrainReport::parse_tsv(const std::string& text) {
  TrainReport rep;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      const std::string key = line.substr(2, eq - 2), value = line.substr(eq + 1);
      if (key == "model_kind") rep.model_kind = value;
      else if (key == "best_epoch") rep.best_epoch = std::stoi(value);
      else if (key == "best_val_dsc") rep.best_val_dsc = std::stod(value);
      else if (key == "checkpoint") rep.checkpoint_path = value;
      else if (key == "skipped_steps") rep.skipped_steps = std::stoull(value);
      continue;
    }
    std::istringstream ls(line);
    EpochRecord r;
    int saved = 0;
    if (!(ls >> r.epoch >> r.ce >> r.kl >> r.total >> r.val_dsc >> r.seconds >> saved))
      throw FormatError(FormatErrorKind::BadMetadata, "train report: malformed line '" + line + "'");
    r.saved = saved != 0;
    rep.records.push_back(r);
  }
  return rep;
}

// ---- optimizer --------------------------------------------------------------

Adam::Adam(nets::ParameterSet<float>& params, const HyperParams& hp)
    : params_(params),
      lr_(hp.learning_rate),
      beta1_(hp.adam_beta1),
      beta2_(hp.adam_beta2),
      eps_(hp.adam_epsilon),
      clip_(hp.grad_clip) {
  for (const auto& e : params_.entries()) {
    m_.emplace_back(e.second->value.size(), 0.0);
    v_.emplace_back(e.second->value.size(), 0.0);
  }
}

bool Adam::step() {
  const auto& entries = params_.entries();
  double sq = 0.0;
  for (const auto& e : entries) {
    if (!e.second->has_grad()) continue;
    for (float g : e.second->grad.storage()) {
      if (!std::isfinite(g)) return false;
      sq += static_cast<double>(g) * g;
    }
  }
  const double norm = std::sqrt(sq);
  const double factor = clip_ > 0.0 && norm > clip_ ? clip_ / norm : 1.0;

  ++steps_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
  for (std::size_t p = 0; p < entries.size(); ++p) {
    auto& node = *entries[p].second;
    const bool has = node.has_grad();
    auto& m = m_[p];
    auto& v = v_[p];
    auto& w = node.value.storage();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double g = has ? factor * node.grad[i] : 0.0;
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      w[i] = static_cast<float>(w[i] - lr_ * mhat / (std::sqrt(vhat) + eps_));
    }
  }
  return true;
}

// ---- validation -------------------------------------------------------------

std::vector<double> per_slice_dsc(const Model<float>& model, const SliceSet& set, double threshold, int batch_size) {
  check_sizes(model, set, "evaluation");
  std::vector<double> out;
  out.reserve(set.size());
  const std::size_t bs = static_cast<std::size_t>(std::max(1, batch_size));
  const auto h = static_cast<std::uint32_t>(model.config().input_size);
  const std::size_t pixels = static_cast<std::size_t>(h) * h;
  for (std::size_t start = 0; start < set.size(); start += bs) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(set.size(), start + bs); ++i) idx.push_back(i);
    const auto logits = model.predict(batch_images(set, idx));
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const auto pred = objective::binarize(std::span<const float>(logits.data() + b * pixels, pixels), h, h, threshold);
      out.push_back(objective::dsc(objective::confusion(pred, set.masks[idx[b]])));
    }
  }
  return out;
}

double validate(const Model<float>& model, const SliceSet& set, double threshold, int batch_size) {
  if (set.empty()) throw std::invalid_argument("validate: empty validation set");
  const auto scores = per_slice_dsc(model, set, threshold, batch_size);
  return objective::summarize(scores).mean;
}

// ---- checkpoints ------------------------------------------------------------

data::Checkpoint make_checkpoint(const Model<float>& model, std::uint32_t epoch, double val_dsc,
                                 const std::string& train_dataset) {
  data::Checkpoint ck;
  ck.params = model.export_params();
  ck.epoch = epoch;
  ck.val_dsc = static_cast<float>(val_dsc);
  ck.model_config_hash = model.config().hash();
  ck.train_dataset = train_dataset;
  ck.model_config = model.config().to_text();
  return ck;
}

void restore_checkpoint(Model<float>& model, const data::Checkpoint& checkpoint) {
  const auto expected = model.config().hash();
  if (checkpoint.model_config_hash != expected)
    throw ConfigError("checkpoint config hash " + checkpoint.model_config_hash + " does not match model config hash " +
                      expected);
  model.import_params(checkpoint.params);
}

Model<float> model_from_checkpoint(const data::Checkpoint& checkpoint) {
  const auto config = nets::ModelConfig::parse(checkpoint.model_config);
  if (config.hash() != checkpoint.model_config_hash)
    throw ConfigError("checkpoint config text hashes to " + config.hash() + " but records " +
                      checkpoint.model_config_hash);
  Model<float> model(config, 0);
  model.import_params(checkpoint.params);
  return model;
}

// ---- training loop ----------------------------------------------------------

TrainReport train(Model<float>& model, const SliceSet& train_set, const SliceSet& val_set, const HyperParams& hp,
                  const TrainOptions& options) {
  hp.validate();
  if (train_set.empty()) throw std::invalid_argument("train: empty training set");
  if (val_set.empty()) throw std::invalid_argument("train: empty validation set");
  check_sizes(model, train_set, "training");
  check_sizes(model, val_set, "validation");

  TrainReport report;
  report.model_kind = std::string(to_string(model.config().kind));
  if (options.checkpoint_path) report.checkpoint_path = *options.checkpoint_path;

  Adam adam(model.parameters(), hp);
  Rng order_rng(mix_seed(hp.seed, 0x5348u));
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t bs = static_cast<std::size_t>(hp.batch_size);
  std::uint64_t global_batch = 0;

  for (int epoch = 1; epoch <= hp.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    order_rng.shuffle(order.begin(), order.end());
    double ce_sum = 0.0, kl_sum = 0.0, total_sum = 0.0;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += bs, ++batch_index, ++global_batch) {
      const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + bs)));
      model.parameters().zero_grad();
      const auto loss = model.loss(batch_images(train_set, idx), batch_masks(train_set, idx), hp.beta_kl,
                                   mix_seed(hp.seed, global_batch));
      const double total = loss.total->value[0];
      if (!std::isfinite(total))
        throw NumericalError("non-finite loss at epoch " + std::to_string(epoch) + " batch " +
                             std::to_string(batch_index) + " (" + report.model_kind + ")");
      nets::backward(loss.total);
      if (!adam.step()) {
        ++report.skipped_steps;
        if (options.log)
          *options.log << "warning: non-finite gradient at epoch " << epoch << " batch " << batch_index
                       << "; step skipped\n";
      }
      const double n = static_cast<double>(idx.size());
      ce_sum += loss.ce->value[0] * n;
      kl_sum += (loss.kl ? loss.kl->value[0] : 0.0) * n;
      total_sum += total * n;
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    EpochRecord rec;
    rec.epoch = epoch;
    const double count = static_cast<double>(train_set.size());
    rec.ce = ce_sum / count;
    rec.kl = kl_sum / count;
    rec.total = total_sum / count;
    rec.seconds = seconds;
    rec.val_dsc = validate(model, val_set, hp.threshold, hp.batch_size);
    if (rec.val_dsc > report.best_val_dsc) {
      report.best_val_dsc = rec.val_dsc;
      report.best_epoch = epoch;
      rec.saved = true;
      if (options.checkpoint_path || options.best_checkpoint) {
        auto ck = make_checkpoint(model, static_cast<std::uint32_t>(epoch), rec.val_dsc, options.train_dataset);
        if (options.checkpoint_path) data::save_checkpoint(ck, *options.checkpoint_path);
        if (options.best_checkpoint) *options.best_checkpoint = std::move(ck);
      }
    }
    report.records.push_back(rec);
    report.batches = global_batch;
    if (options.log)
      *options.log << report.model_kind << " epoch " << epoch << "/" << hp.epochs << " ce=" << fmt(rec.ce)
                   << " kl=" << fmt(rec.kl) << " total=" << fmt(rec.total) << " val_dsc=" << fmt(rec.val_dsc, "%.4f")
                   << (rec.saved ? " [saved]" : "") << '\n';
    if (options.stop_at_val_dsc && rec.val_dsc >= *options.stop_at_val_dsc) break;
  }
  return report;
}

TrainReport train(Model<float>& model, const data::DatasetManifest& train_manifest,
                  const data::DatasetManifest& val_manifest, const HyperParams& hp, const TrainOptions& options) {
  if (train_manifest.empty()) throw std::invalid_argument("train: empty training manifest");
  if (val_manifest.empty()) throw std::invalid_argument("train: empty validation manifest");
  return train(model, load_slices(train_manifest), load_slices(val_manifest), hp, options);
}

// ---- timing -------------------------------------------------------------------

TimingRow time_epochs(const TrainReport& report) {
  TimingRow row;
  row.model_kind = report.model_kind;
  row.epochs = report.records.size();
  if (report.records.empty()) return row;
  std::vector<double> secs;
  for (const auto& r : report.records) secs.push_back(r.seconds);
  row.mean_seconds = std::accumulate(secs.begin(), secs.end(), 0.0) / static_cast<double>(secs.size());
  std::sort(secs.begin(), secs.end());
  const std::size_t mid = secs.size() / 2;
  row.median_seconds = secs.size() % 2 ? secs[mid] : 0.5 * (secs[mid - 1] + secs[mid]);
  return row;
}

std::string render_timing(const std::vector<TimingRow>& rows) {
  std::size_t width = 5;
  std::vector<std::string> names;
  for (const auto& r : rows) {
    const auto kind = parse_model_kind(r.model_kind);
    names.emplace_back(kind ? std::string(display_name(*kind)) : r.model_kind);
    width = std::max(width, names.back().size());
  }
  std::ostringstream os;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-*s  %12s  %12s  %6s\n", static_cast<int>(width), "Model", "mean (s)", "median (s)",
                "epochs");
  os << buf;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%-*s  %12.3f  %12.3f  %6zu\n", static_cast<int>(width), names[i].c_str(),
                  rows[i].mean_seconds, rows[i].median_seconds, rows[i].epochs);
    os << buf;
  }
  return os.str();
}

}  // namespace wmhseg::trainer
