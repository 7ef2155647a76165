// Acceptance suite: one pass/fail line per criterion, exit 3 on any failure.
// Criteria ranging from analytic-gradient agreement through a full
// desk-scale training run with localization thresholds.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <vector>

#include "stav/train.hpp"
#include "stav/unimodal.hpp"
#include "support.hpp"

using namespace stav;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

int failures = 0;

void report(int number, const std::string& name, bool pass, const std::string& detail) {
  std::printf("[%s] criterion %d: %s — %s\n", pass ? "PASS" : "FAIL", number, name.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!pass) ++failures;
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

// --- criterion 1: gradient suite --------------------------------------------

void criterion_gradients() {
  const auto t0 = Clock::now();
  GradcheckReport r = gradcheck(1);
  const double secs = seconds_since(t0);
  report(1, "gradient suite", r.pass() && secs < 60.0,
         "max rel err " + fmt(r.max_rel) + " at " + r.worst + " over " + std::to_string(r.groups.size()) +
             " groups, " + fmt(secs) + " s");
}

// --- criterion 2: Proposition 1 property test --------------------------------

void criterion_proposition1() {
  const auto t0 = Clock::now();
  Rng rng(20240604);
  int counterexamples = 0, log_concave_seen = 0;
  const int total = 100000;
  for (int trial = 0; trial < total; ++trial) {
    const int len = 3 + static_cast<int>(rng.below(10));  // lengths 3..12
    std::vector<double> s(static_cast<std::size_t>(len));
    const int kind = static_cast<int>(rng.below(4));
    for (double& v : s) {
      switch (kind) {
        case 0: v = rng.uniform(); break;
        case 1: v = rng.uniform() < 0.3 ? 0.0 : rng.uniform(0.0, 5.0); break;
        case 2: v = std::exp(rng.uniform(-3.0, 3.0)); break;
        default: v = static_cast<double>(rng.below(4)); break;
      }
    }
    if (is_log_concave(s)) {
      ++log_concave_seen;
      if (!is_unimodal(s, 0.0)) ++counterexamples;
    }
  }
  const double secs = seconds_since(t0);
  report(2, "log-concave implies unimodal", counterexamples == 0 && secs < 10.0,
         std::to_string(total) + " sequences, " + std::to_string(log_concave_seen) + " log-concave, " +
             std::to_string(counterexamples) + " counterexamples, " + fmt(secs) + " s");
}

// --- criterion 3: loss oracles ----------------------------------------------

void criterion_loss_oracles() {
  Rng rng(77);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int h = 2 + static_cast<int>(rng.below(6));
    const int w = 2 + static_cast<int>(rng.below(6));
    std::vector<Tensor> masks;
    std::vector<std::vector<double>> raw;
    const int count = 1 + static_cast<int>(rng.below(3));
    for (int i = 0; i < count; ++i) {
      masks.push_back(Tensor::random_uniform({1, h, w}, rng, 0.0, 1.0));
      raw.push_back(masks.back().values());
    }
    Tape tape;
    const double tv = tv_loss(tape, masks).value();
    const double tv_ref = testsupport::tv_brute(raw, h, w);
    const double contrast = contrast_loss(tape, masks).value();
    const double contrast_ref = testsupport::contrast_brute(raw);

    const int n = 3 + static_cast<int>(rng.below(6));
    Tensor attn = Tensor::random_uniform({n, n}, rng, 0.0, 1.0);
    std::vector<std::vector<double>> rows;
    for (int t = 0; t < n; ++t) rows.emplace_back(attn.data() + t * n, attn.data() + (t + 1) * n);
    const double uni = unimodal_loss(tape, attn).value();
    const double uni_ref = testsupport::unimodal_brute(rows);

    for (auto [got, ref] : {std::pair{tv, tv_ref}, {contrast, contrast_ref}, {uni, uni_ref}})
      worst = std::max(worst, std::fabs(got - ref) / std::max({std::fabs(ref), std::fabs(got), 1e-30}));
  }
  report(3, "loss brute-force oracles", worst < 1e-10, "1000 instances, worst relative deviation " + fmt(worst));
}

// --- criterion 4: Eq. 3 invariants -------------------------------------------

void criterion_attention_invariants() {
  Rng rng(31415);
  double worst_row_sum = 0.0, worst_shift = 0.0;

  // Attention matrices from full forward passes of small random models.
  ModelConfig mc;
  mc.feature_channels = 2;
  mc.frame_size = 5;
  mc.mask_c1 = 3;
  mc.mask_c2 = 2;
  mc.hidden_channels = 4;
  mc.energy_channels = 2;
  mc.n_frames = 4;
  mc.classes = 2;
  for (int run = 0; run < 250; ++run) {
    AttentionModel model(mc, rng);
    std::vector<Tensor> features;
    for (int i = 0; i < mc.n_frames; ++i)
      features.push_back(Tensor::random_uniform({mc.feature_channels, 5, 5}, rng, -2.0, 2.0));
    Tape tape;
    tape.set_recording(false);
    ForwardResult fwd = model.forward(tape, features, true, false);
    for (int t = 0; t < mc.n_frames; ++t) {
      double sum = 0.0;
      for (int i = 0; i < mc.n_frames; ++i) sum += fwd.attention.at({t, i});
      worst_row_sum = std::max(worst_row_sum, std::fabs(sum - 1.0));
    }
  }

  // Shift invariance on random energy vectors.
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 2 + static_cast<int>(rng.below(9));
    Tensor e = Tensor::random_uniform({n}, rng, -20.0, 20.0);
    const double c = rng.uniform(-9.0, 9.0);
    Tensor shifted(e.shape());
    for (int i = 0; i < n; ++i) shifted.data()[i] = e.data()[i] + c;
    Tape tape;
    Tensor w1 = attention_weights(tape, e);
    Tensor w2 = attention_weights(tape, shifted);
    for (int i = 0; i < n; ++i) worst_shift = std::max(worst_shift, std::fabs(w1.data()[i] - w2.data()[i]));
  }
  report(4, "attention weight invariants", worst_row_sum < 1e-10 && worst_shift < 1e-12,
         "1000 rows: worst row-sum deviation " + fmt(worst_row_sum) + ", 1000 shifts: worst entry deviation " +
             fmt(worst_shift));
}

// --- criterion 5: mAP oracle equivalence -------------------------------------

void criterion_map_oracle() {
  Rng rng(47);
  int cases = 0, mismatches = 0;
  for (int trial = 0; trial < 400; ++trial) {
    std::vector<TemporalGroundTruth> gts;
    const int n_gt = 1 + static_cast<int>(rng.below(2));
    for (int g = 0; g < n_gt; ++g) {
      const int s = 1 + static_cast<int>(rng.below(6));
      gts.push_back({"v", 0, {s, s + static_cast<int>(rng.below(4))}});
    }
    std::vector<TemporalDetection> dets;
    const int n_det = static_cast<int>(rng.below(4));
    for (int d = 0; d < n_det; ++d) {
      const int s = 1 + static_cast<int>(rng.below(8));
      dets.push_back({"v", 0, {s, s + static_cast<int>(rng.below(4))}, rng.uniform()});
    }
    for (double alpha : {0.1, 0.3, 0.5}) {
      const double got = map_at_iou(dets, gts, alpha);
      const double ref = testsupport::ap_oracle_single_class(dets, gts, alpha);
      if (std::fabs(got - ref) > 1e-12) ++mismatches;
      ++cases;
    }
  }
  report(5, "mAP oracle equivalence", mismatches == 0 && cases >= 500,
         std::to_string(cases) + " instances, " + std::to_string(mismatches) + " mismatches");
}

// --- criterion 6: desk-scale end-to-end --------------------------------------

void criterion_end_to_end() {
  const auto t0 = Clock::now();
  SynthConfig synth;  // defaults: n=8, 56x56, 4 classes, 50/20 per class
  Dataset data = generate_dataset(synth);

  TrainConfig cfg;  // default lambdas 1e-5 / 1e-4 / 1.0
  cfg.lr = 0.2;
  cfg.seed = 1;
  Trainer trainer(cfg);

  double best_acc = 0.0, final_sp = 0.0, final_tp = 0.0;
  int epochs_run = 0;
  bool ok = false;
  while (epochs_run < 50) {
    const int chunk = 5;
    trainer.run_epochs(data.train, chunk);
    epochs_run += chunk;
    EvalReport r = evaluate(trainer.model(), data.test);
    best_acc = std::max(best_acc, r.accuracy);
    final_sp = r.spatial_at(0.3);
    final_tp = r.temporal_at(0.3);
    std::printf("  [c6] epoch %d: accuracy %.3f spatial mAP@0.3 %.3f temporal mAP@0.3 %.3f (%.0f s)\n", epochs_run,
                r.accuracy, final_sp, final_tp, seconds_since(t0));
    std::fflush(stdout);
    if (r.accuracy >= 0.80 && final_sp >= 0.5 && final_tp >= 0.5) {
      ok = true;
      break;
    }
  }
  const double secs = seconds_since(t0);
  report(6, "desk-scale end-to-end",
         ok && secs < 1800.0,
         "epochs " + std::to_string(epochs_run) + ", best accuracy " + fmt(best_acc) + ", spatial mAP@0.3 " +
             fmt(final_sp) + ", temporal mAP@0.3 " + fmt(final_tp) + ", " + fmt(secs) + " s");
}

// --- criterion 7: ablation direction ----------------------------------------

void criterion_ablation() {
  SynthConfig synth;
  synth.frame_h = synth.frame_w = 40;
  synth.sprite_size = 9;
  synth.train_per_class = 10;
  synth.test_per_class = 2;
  synth.seed = 5;
  Dataset data = generate_dataset(synth);

  auto mean_unimodal_after_training = [&](double lambda_unimodal, std::uint64_t seed) {
    TrainConfig cfg;
    cfg.frame_size = 40;
    cfg.mask_c1 = 16;
    cfg.mask_c2 = 8;
    cfg.hidden_channels = 8;
    cfg.lambda_unimodal = lambda_unimodal;
    cfg.lr = 0.2;
    cfg.seed = seed;
    Trainer trainer(cfg);
    trainer.run_epochs(data.train, 8);
    double total = 0.0;
    for (const auto& v : data.train) {
      Tape tape;
      tape.set_recording(false);
      ForwardResult fwd = trainer.model().forward(tape, v.frames, false, false);
      total += unimodal_loss(tape, fwd.attention).value();
    }
    return total / static_cast<double>(data.train.size());
  };

  double with_reg = 0.0, without_reg = 0.0;
  for (std::uint64_t seed : {11ull, 22ull, 33ull}) {
    with_reg += mean_unimodal_after_training(1.0, seed);
    without_reg += mean_unimodal_after_training(0.0, seed);
  }
  with_reg /= 3.0;
  without_reg /= 3.0;
  report(7, "unimodal ablation direction", with_reg < without_reg,
         "mean final unimodal loss: with regularizer " + fmt(with_reg) + ", without " + fmt(without_reg));
}

// --- criterion 8: determinism ------------------------------------------------

void criterion_determinism() {
  SynthConfig synth;
  synth.frame_h = synth.frame_w = 24;
  synth.sprite_size = 7;
  synth.n_frames = 4;
  synth.t_a = 2;
  synth.t_b = 3;
  synth.train_per_class = 3;
  synth.test_per_class = 1;
  Dataset data = generate_dataset(synth);

  const fs::path dir = fs::temp_directory_path() / "stav_acceptance";
  fs::create_directories(dir);
  auto run = [&](const fs::path& ckpt) {
    TrainConfig cfg;
    cfg.n_frames = 4;
    cfg.frame_size = 24;
    cfg.mask_c1 = 6;
    cfg.mask_c2 = 4;
    cfg.hidden_channels = 4;
    cfg.feature_channels = 4;
    cfg.energy_channels = 4;
    cfg.seed = 99;
    Trainer trainer(cfg);
    trainer.run_epochs(data.train, 3);
    trainer.save(ckpt.string());
    return trainer.metrics_csv();
  };
  const std::string m1 = run(dir / "a.ckpt");
  const std::string m2 = run(dir / "b.ckpt");
  auto bytes = [](const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
  };
  const bool same_metrics = m1 == m2;
  const bool same_ckpt = bytes(dir / "a.ckpt") == bytes(dir / "b.ckpt");
  fs::remove_all(dir);
  report(8, "byte-identical determinism", same_metrics && same_ckpt,
         std::string("metrics ") + (same_metrics ? "identical" : "differ") + ", checkpoints " +
             (same_ckpt ? "identical" : "differ"));
}

// --- criterion 9: worked-example regression ----------------------------------

void criterion_worked_examples() {
  double worst = 0.0;
  auto check = [&](double got, double expect) { worst = std::max(worst, std::fabs(got - expect)); };

  check(box_iou(BBox{0, 0, 2, 2}, BBox{1, 1, 3, 3}), 1.0 / 7.0);
  check(interval_iou(Segment{2, 4}, Segment{3, 5}), 0.5);
  Tape tape;
  check(contrast_loss(tape, {Tensor({1, 1, 2}, {0.8, 0.2})}).value(), -0.3);
  check(tv_loss(tape, {Tensor({1, 2, 2}, {0, 1, 0, 1})}).value(), 2.0);
  check(logconcave_penalty(std::vector<double>{0.3, 0.1, 0.3}), 0.08);
  check(cross_entropy(tape, Tensor::zeros({4}), 0).value(), std::log(4.0));
  Tensor soft = softmax(tape, Tensor({2}, {0.0, std::log(3.0)}));
  check(soft.data()[0], 0.25);
  check(soft.data()[1], 0.75);

  report(9, "worked-example regression", worst < 1e-9, "worst absolute deviation " + fmt(worst));
}

}  // namespace

int main() {
  std::printf("acceptance suite\n");
  criterion_gradients();
  criterion_proposition1();
  criterion_loss_oracles();
  criterion_attention_invariants();
  criterion_map_oracle();
  criterion_worked_examples();  // cheap ones first
  criterion_determinism();
  criterion_ablation();
  criterion_end_to_end();
  if (failures == 0) {
    std::printf("acceptance: all 9 criteria passed\n");
    return 0;
  }
  std::printf("acceptance: %d criterion(s) failed\n", failures);
  return 3;
}
