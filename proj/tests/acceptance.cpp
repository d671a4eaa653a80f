// Acceptance suite: one PASS/FAIL line per criterion; exits nonzero if any
// criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <sys/wait.h>

#include "support.hpp"
#include "wmhseg/augment.hpp"
#include "wmhseg/datamodel.hpp"
#include "wmhseg/harness.hpp"
#include "wmhseg/objective.hpp"
#include "wmhseg/trainer.hpp"

using namespace wmhseg;
using namespace wmhseg::nets;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

int g_failures = 0;

void criterion(const std::string& id, const std::string& title, double budget_seconds,
               const std::function<Outcome()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome out;
  try {
    out = body();
  } catch (const std::exception& e) {
    out = {false, std::string("exception: ") + e.what()};
  }
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (budget_seconds > 0 && seconds > budget_seconds) {
    out.pass = false;
    out.detail += "; over time budget " + std::to_string(static_cast<int>(budget_seconds)) + " s";
  }
  if (!out.pass) ++g_failures;
  char time_buf[32];
  std::snprintf(time_buf, sizeof time_buf, "%.1fs", seconds);
  std::cout << (out.pass ? "PASS " : "FAIL ") << id << " " << title << " [" << time_buf << "] " << out.detail
            << std::endl;
}

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

// ---- C2 ----------------------------------------------------------------------

Outcome dsc_oracle() {
  Rng rng(2024);
  int mismatches = 0, both_empty = 0;
  for (int t = 0; t < 1000; ++t) {
    const auto h = static_cast<std::uint32_t>(rng.uniform_int(8, 128));
    const auto w = static_cast<std::uint32_t>(rng.uniform_int(8, 128));
    // every 50th pair is empty on both sides; otherwise densities from 0 to 0.5
    const double pa = t % 50 == 0 ? 0.0 : rng.uniform(0.0, 0.5);
    const double pb = t % 50 == 0 ? 0.0 : rng.uniform(0.0, 0.5);
    data::Mask2D a(h, w), b(h, w);
    std::set<std::size_t> set_a, set_b;
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (rng.uniform() < pa) a.values[i] = 1, set_a.insert(i);
      if (rng.uniform() < pb) b.values[i] = 1, set_b.insert(i);
    }
    std::size_t inter = 0;
    for (auto i : set_a) inter += set_b.count(i);
    double oracle;
    if (set_a.empty() && set_b.empty()) {
      oracle = 1.0;
      ++both_empty;
    } else {
      oracle = 2.0 * static_cast<double>(inter) / static_cast<double>(set_a.size() + set_b.size());
    }
    if (objective::dsc(objective::confusion(a, b)) != oracle) ++mismatches;
  }
  return {mismatches == 0 && both_empty > 0,
          "1000 pairs, " + std::to_string(mismatches) + " mismatches, " + std::to_string(both_empty) + " both-empty"};
}

// ---- C3 ----------------------------------------------------------------------

double log_density(const std::vector<double>& z, const DiagGaussian& g) {
  double s = 0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double var = std::exp(g.log_var[i]);
    const double d = z[i] - g.mean[i];
    s += -0.5 * (std::log(2.0 * std::numbers::pi) + g.log_var[i] + d * d / var);
  }
  return s;
}

Outcome kl_monte_carlo() {
  Rng rng(77);
  double worst = 0.0, worst_z = 0.0, worst_identical = 0.0;
  for (int t = 0; t < 100; ++t) {
    DiagGaussian q, p;
    for (int d = 0; d < 6; ++d) {
      q.mean.push_back(0.5 * rng.normal());
      q.log_var.push_back(rng.uniform(-0.5, 0.5));
      p.mean.push_back(0.5 * rng.normal());
      p.log_var.push_back(rng.uniform(-0.5, 0.5));
    }
    const double analytic = objective::kl_divergence(q, p);
    double acc = 0, acc_sq = 0;
    std::vector<double> z(6);
    const int n = 100000;
    for (int s = 0; s < n; ++s) {
      for (int d = 0; d < 6; ++d) z[d] = q.mean[d] + std::exp(0.5 * q.log_var[d]) * rng.normal();
      const double r = log_density(z, q) - log_density(z, p);
      acc += r;
      acc_sq += r * r;
    }
    const double estimate = acc / n;
    const double std_err = std::sqrt((acc_sq / n - estimate * estimate) / n);
    const double err = std::abs(estimate - analytic);
    worst = std::max(worst, err);
    worst_z = std::max(worst_z, err / std_err);
    worst_identical = std::max(worst_identical, std::abs(objective::kl_divergence(q, q)));
  }
  return {worst < 0.05 && worst_identical <= 1e-7,
          "max |MC - analytic| = " + fmt("%.4f", worst) + " (tol 0.05, worst " + fmt("%.1f", worst_z) +
              " std errors), identical pairs max " + fmt("%.1e", worst_identical) + " (tol 1e-7)"};
}

// ---- C4 ----------------------------------------------------------------------

Outcome gradient_check() {
  bool pass = true;
  std::string detail;
  for (auto kind : kAllModelKinds) {
    Model<double> m(testing::tiny_config(kind), 3);
    testing::perturb_parameters(m.parameters(), 5);
    Rng rng(1);
    const auto x = testing::random_tensor<double>({2, 8, 8, 1}, rng);
    const auto y = testing::random_binary<double>({2, 8, 8, 1}, rng);
    const auto res = testing::gradient_check(m.parameters(), [&] { return m.loss(x, y, 1.0, 11).total; }, 1e-5);
    pass = pass && res.worst < 1e-3;
    detail += std::string(to_string(kind)) + " " + fmt("%.1e", res.worst) + "; ";
  }
  return {pass, detail + "tol 1e-3 per parameter tensor"};
}

// ---- C5 ----------------------------------------------------------------------

Outcome shape_contracts() {
  int checked = 0, bad = 0;
  std::string stages;
  for (int size : {32, 64, 128}) {
    for (auto kind : kAllModelKinds) {
      std::vector<CombinerKind> combiners{CombinerKind::Tile};
      if (is_probabilistic(kind)) combiners.push_back(CombinerKind::Deconv);
      for (auto comb : combiners) {
        auto cfg = ModelConfig::make(kind, ScalePreset::Desk);
        cfg.input_size = size;
        cfg.combiner = comb;
        Model<float> m(cfg, 1);
        Tensor<float> x({1, size, size, 1}, 0.5f);
        const Dims want{1, size, size, 1};
        NoGradGuard guard;
        if (is_probabilistic(kind)) {
          const auto out = m.forward_probabilistic(x, nullptr, Phase::Infer, 1, SampleMode::Random, 3);
          bad += out.logits[0]->dims() != want;
          const int expected_stages = comb == CombinerKind::Deconv ? static_cast<int>(std::log2(size)) : 0;
          bad += m.combiner()->deconv_stages() != expected_stages;
          if (comb == CombinerKind::Deconv && kind == ModelKind::ProbTransUNet)
            stages += std::to_string(size) + ":" + std::to_string(m.combiner()->deconv_stages()) + " ";
        } else {
          bad += m.predict(x).dims() != want;
        }
        ++checked;
      }
    }
  }
  return {bad == 0, std::to_string(checked) + " configurations, " + std::to_string(bad) +
                        " violations; deconv stages by size " + stages};
}

// ---- C6, C7, C11 ---------------------------------------------------------------

trainer::SliceSet overfit_set(std::uint32_t jitter) {
  augment::SynthConfig sc;
  sc.image_size = 32;
  sc.ambiguity_jitter = jitter;
  sc.seed = 5;
  trainer::SliceSet set;
  for (std::uint64_t i = 0; i < 8; ++i) {
    Rng rng(mix_seed(sc.seed, i));
    auto s = augment::synth_sample(sc, rng);
    const auto image = augment::zscore_normalize(s.image);
    set.ids.push_back("s" + std::to_string(i));
    set.images.push_back(image);
    set.masks.push_back(s.mask);
    if (jitter) {
      set.ids.push_back("s" + std::to_string(i) + "_r2");
      set.images.push_back(image);
      set.masks.push_back(s.rater2);
    }
  }
  return set;
}

struct OverfitRun {
  ModelKind kind;
  trainer::TrainReport report;
  data::Checkpoint best;
};

std::vector<OverfitRun> g_overfit;

Outcome overfit() {
  const auto set = overfit_set(0);
  bool pass = true;
  std::string detail;
  for (auto kind : kAllModelKinds) {
    Model<float> m(ModelConfig::make(kind, ScalePreset::Desk), 7);
    trainer::HyperParams hp;
    hp.epochs = 500;
    hp.batch_size = 8;  // one optimizer step per epoch
    hp.seed = 7;
    OverfitRun run{kind, {}, {}};
    trainer::TrainOptions opts;
    opts.best_checkpoint = &run.best;
    opts.stop_at_val_dsc = 0.9;
    run.report = trainer::train(m, set, set, hp, opts);
    const bool ok = run.report.best_val_dsc >= 0.9 && run.report.batches <= 500;
    pass = pass && ok;
    detail += std::string(to_string(kind)) + " " + fmt("%.3f", run.report.best_val_dsc) + " after " +
              std::to_string(run.report.batches) + " steps; ";
    g_overfit.push_back(std::move(run));
  }
  return {pass, detail + "need >= 0.9 within 500"};
}

Outcome probabilistic_behaviour() {
  const auto set = overfit_set(2);
  bool pass = true;
  std::string detail;
  for (auto kind : {ModelKind::ProbUNet, ModelKind::ProbTransUNet}) {
    Model<float> m(ModelConfig::make(kind, ScalePreset::Desk), 7);
    trainer::HyperParams hp;
    hp.epochs = 300;
    hp.batch_size = static_cast<int>(set.size());
    hp.seed = 7;
    trainer::train(m, set, set, hp);
    const auto x = stack_images<float>({&set.images[0]});
    NoGradGuard guard;
    const auto sampled = m.forward_probabilistic(x, nullptr, Phase::Infer, 5, SampleMode::Random, 123);
    std::set<std::vector<std::uint8_t>> distinct;
    for (const auto& l : sampled.logits) distinct.insert(objective::binarize(l->value.values(), 32, 32).values);
    const auto mean_a = m.forward_probabilistic(x, nullptr, Phase::Infer, 1, SampleMode::Mean, 1);
    const auto mean_b = m.forward_probabilistic(x, nullptr, Phase::Infer, 1, SampleMode::Mean, 2);
    const bool identical = mean_a.logits[0]->value.storage() == mean_b.logits[0]->value.storage() &&
                           m.predict(x).storage() == mean_a.logits[0]->value.storage();
    pass = pass && distinct.size() >= 2 && identical;
    detail += std::string(to_string(kind)) + " " + std::to_string(distinct.size()) + "/5 distinct, mean mode " +
              (identical ? "identical" : "DIFFERS") + "; ";
  }
  return {pass, detail + "need >= 2 distinct"};
}

Outcome checkpoint_discipline(const std::vector<trainer::TrainReport>& extra_reports) {
  bool pass = !g_overfit.empty();
  double worst = 0.0;
  std::size_t sequences = 0;
  auto increasing = [](const std::vector<double>& v) {
    for (std::size_t i = 1; i < v.size(); ++i)
      if (!(v[i] > v[i - 1])) return false;
    return !v.empty();
  };
  const auto set = overfit_set(0);
  for (const auto& run : g_overfit) {
    pass = pass && increasing(run.report.saved_val_dscs());
    ++sequences;
    const auto restored = trainer::model_from_checkpoint(data::decode_checkpoint(data::encode_checkpoint(run.best)));
    const double dsc = trainer::validate(restored, set, 0.5, 8);
    worst = std::max(worst, std::abs(dsc - run.report.best_val_dsc));
  }
  for (const auto& r : extra_reports) {
    pass = pass && increasing(r.saved_val_dscs());
    ++sequences;
  }
  pass = pass && worst <= 1e-6;
  return {pass, std::to_string(sequences) + " saved-DSC sequences strictly increasing; restore error " +
                    fmt("%.1e", worst) + " (tol 1e-6)"};
}

// ---- C8 ----------------------------------------------------------------------

Outcome kfold_protocol() {
  data::DatasetManifest m;
  for (int i = 0; i < 840; ++i) {
    data::ManifestRecord r;
    r.id = "r" + std::to_string(i);
    r.meta.patient_id = "P" + std::to_string(i / 8);
    m.records.push_back(r);
  }
  const auto folds = harness::make_folds(m, 5, 0, false);
  bool pass = folds.size() == 5;
  std::vector<int> covered(840, 0);
  for (const auto& f : folds) {
    pass = pass && f.train_ids.size() == 672 && f.test_ids.size() == 168;
    std::set<std::size_t> train(f.train_ids.begin(), f.train_ids.end());
    for (auto t : f.test_ids) {
      pass = pass && !train.count(t);
      ++covered[t];
    }
  }
  for (int c : covered) pass = pass && c == 1;
  harness::check_fold_isolation(folds, 840);
  return {pass, "5 folds of 672 train / 168 test, disjoint, each record tested once"};
}

// ---- C9 ----------------------------------------------------------------------

Outcome table_arithmetic() {
  const std::vector<std::string> sites{"Singapore", "GE3T", "Utrecht"};
  auto table = [&](ModelKind kind, std::vector<double> means) {
    harness::ScoreTable t;
    for (std::size_t i = 0; i < sites.size(); ++i) t.rows.push_back({kind, sites[i], means[i], 0.0, 0});
    return t;
  };
  const auto unet = table(ModelKind::UNet, {0.552, 0.626, 0.578});
  const auto prob_unet = table(ModelKind::ProbUNet, {0.553, 0.670, 0.581});
  const auto trans = table(ModelKind::TransUNet, {0.569, 0.663, 0.599});
  const auto prob_trans = table(ModelKind::ProbTransUNet, {0.562, 0.680, 0.574});

  const auto g_unet = harness::dsc_gain(prob_unet, ModelKind::ProbUNet, unet, ModelKind::UNet);
  const auto g_trans = harness::dsc_gain(prob_trans, ModelKind::ProbTransUNet, trans, ModelKind::TransUNet);
  const std::vector<std::string> reference_unet{"+0.001", "+0.044", "+0.003", "+0.016"};
  const std::vector<std::string> reference_trans{"-0.007", "+0.017", "-0.005", "+0.001"};

  bool pass = true;
  std::string got_unet, got_trans, inconsistent;
  for (std::size_t i = 0; i < 4; ++i) {
    const auto u = harness::format_signed(g_unet.rows[i].delta);
    const auto t = harness::format_signed(g_trans.rows[i].delta);
    got_unet += u + " ";
    got_trans += t + " ";
    pass = pass && u == reference_unet[i];
    if (i < 2) pass = pass && t == reference_trans[i];
    else if (t != reference_trans[i])
      inconsistent += g_trans.rows[i].dataset + " reference " + reference_trans[i] + " vs " + t + "; ";
  }
  std::string detail = "UNet " + got_unet + "| TransUNet " + got_trans;
  if (!inconsistent.empty())
    detail += "| reference cells not derivable from the cross-dataset means: " + inconsistent;
  return {pass, detail};
}

// ---- C10 ---------------------------------------------------------------------

std::vector<trainer::TrainReport> g_kfold_reports;

int run_cli(const std::string& args) {
  const std::string cmd = std::string(WMHSEG_CLI_PATH) + " " + args + " > /dev/null";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome determinism() {
  testing::ScratchDir dir("determinism");
  const auto out = dir / "run";
  const std::vector<std::string> compared{"effective_config.ini",     "kfold_report.txt",
                                          "kfold_scores_per_fold.tsv", "kfold_scores_per_slice.tsv",
                                          "slice_scores.tsv",          "data/prepared/manifest.tsv"};
  std::vector<std::string> first;
  std::vector<std::vector<std::uint8_t>> first_ckpts;
  for (int pass = 0; pass < 2; ++pass) {
    fs::remove_all(out);
    const int rc = run_cli("kfold --preset desk --seed 7 -q --out " + out.string());
    if (rc != 0) return {false, "kfold exited with " + std::to_string(rc)};
    std::vector<std::string> files;
    std::vector<std::vector<std::uint8_t>> ckpts;
    for (const auto& f : compared) files.push_back(data::read_text_file(out / f));
    for (int f = 0; f < 5; ++f) ckpts.push_back(data::read_file_bytes(out / ("fold" + std::to_string(f)) / "best.ckpt"));
    if (pass == 0) {
      first = files;
      first_ckpts = ckpts;
      for (int f = 0; f < 5; ++f)
        g_kfold_reports.push_back(trainer::TrainReport::parse_tsv(
            data::read_text_file(out / ("fold" + std::to_string(f)) / "train_report.tsv")));
    } else {
      std::string differing;
      for (std::size_t i = 0; i < compared.size(); ++i)
        if (files[i] != first[i]) differing += compared[i] + " ";
      for (int f = 0; f < 5; ++f)
        if (ckpts[f] != first_ckpts[f]) differing += "fold" + std::to_string(f) + "/best.ckpt ";
      if (!differing.empty()) return {false, "differs: " + differing};
    }
  }
  return {true, std::to_string(compared.size()) + " report files and 5 fold checkpoints byte-identical across two runs"};
}

}  // namespace

int main() {
  std::cout << "wmhseg acceptance suite" << std::endl;
  criterion("C1", "full-scale configurations (reference only)", 0, [] {
    std::string detail;
    for (auto kind : kAllModelKinds) {
      const auto c = ModelConfig::make(kind, ScalePreset::Paper);
      c.validate();
      Model<float> m(c, 0);
      detail += std::string(to_string(kind)) + " " + std::to_string(m.parameter_count()) + " params; ";
    }
    return Outcome{true, detail + "full-scale DSC results need restricted data and GPU-scale training, not rerun"};
  });
  criterion("C2", "DSC oracle equivalence", 5, dsc_oracle);
  criterion("C3", "KL analytic vs Monte Carlo", 30, kl_monte_carlo);
  criterion("C4", "whole-model gradient check (f64, h=1e-5)", 300, gradient_check);
  criterion("C5", "shape contracts and deconv stage count", 60, shape_contracts);
  criterion("C6", "overfit 8 synthetic slices", 600, overfit);
  criterion("C7", "prior sampling diversity and mean-mode determinism", 0, probabilistic_behaviour);
  criterion("C8", "k-fold 840 / 5 protocol", 5, kfold_protocol);
  criterion("C9", "DSC gain arithmetic", 5, table_arithmetic);
  criterion("C10", "CLI k-fold determinism", 900, determinism);
  criterion("C11", "checkpoint discipline", 0, [] { return checkpoint_discipline(g_kfold_reports); });
  std::cout << (g_failures == 0 ? "all criteria passed" : std::to_string(g_failures) + " criteria failed")
            << std::endl;
  return g_failures == 0 ? 0 : 1;
}
