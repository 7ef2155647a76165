#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "stav/train.hpp"
#include "stav/unimodal.hpp"

// Command-line surface: gen-data, train, eval, gradcheck, heatmap,
// check-sequence. Exit codes: 0 success, 1 usage error, 2 numeric failure,
// 3 acceptance check failed.

namespace fs = std::filesystem;
using namespace stav;

namespace {

std::vector<LabeledVideo> load_split(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw usage_error("not a directory: " + dir.string());
  std::vector<fs::path> paths;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.path().extension() == ".stav") paths.push_back(entry.path());
  std::sort(paths.begin(), paths.end());
  if (paths.empty()) throw usage_error("no .stav files in " + dir.string());
  std::vector<LabeledVideo> videos;
  videos.reserve(paths.size());
  for (const auto& p : paths) videos.push_back(read_stav(p.string(), p.stem().string()));
  return videos;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw usage_error("cannot open " + path.string());
  f << text;
}

void add_train_flags(CLI::App* cmd, TrainConfig& cfg) {
  cmd->add_option("--lambda_tv", cfg.lambda_tv, "TV regularizer weight");
  cmd->add_option("--lambda_contrast", cfg.lambda_contrast, "contrast regularizer weight");
  cmd->add_option("--lambda_unimodal", cfg.lambda_unimodal, "unimodality regularizer weight");
  cmd->add_option("--n_frames", cfg.n_frames, "frames per video");
  cmd->add_option("--frame_size", cfg.frame_size, "frame height/width");
  cmd->add_option("--hidden_channels", cfg.hidden_channels, "ConvLSTM state width");
  cmd->add_option("--feature_channels", cfg.feature_channels, "extractor output channels");
  cmd->add_option("--mask_c1", cfg.mask_c1, "mask network first width");
  cmd->add_option("--mask_c2", cfg.mask_c2, "mask network second width");
  cmd->add_option("--energy_channels", cfg.energy_channels, "energy network width");
  cmd->add_option("--classes", cfg.classes, "number of classes");
  cmd->add_option("--lr", cfg.lr, "learning rate");
  cmd->add_option("--momentum", cfg.momentum, "SGD momentum");
  cmd->add_option("--grad_clip", cfg.grad_clip, "global gradient-norm clip (0 disables)");
  cmd->add_option("--weight_decay", cfg.weight_decay, "constant L2 weight decay");
  cmd->add_option("--mask_warmup_epochs", cfg.mask_warmup_epochs, "epochs before the mask network starts learning");
  cmd->add_option("--mask_lr_scale", cfg.mask_lr_scale, "mask-network learning-rate multiplier after warmup");
  cmd->add_option("--epochs", cfg.epochs, "training epochs");
  cmd->add_option("--batch_size", cfg.batch_size, "videos per optimizer step");
  cmd->add_option("--seed", cfg.seed, "master seed");
  cmd->add_flag("--eq4_prefactor,!--no-eq4_prefactor", cfg.eq4_prefactor, "apply the 1/n aggregation prefactor");
  cmd->set_config("--config", "", "key = value config file; command-line flags override");
}

void print_eval_report(const EvalReport& r) {
  std::cout << "accuracy " << r.correct << "/" << r.total << " = " << r.accuracy << "\n";
  std::cout << "alpha,spatial_map,temporal_map\n";
  for (std::size_t i = 0; i < r.spatial_map.size(); ++i)
    std::cout << r.spatial_map[i].first << "," << r.spatial_map[i].second << "," << r.temporal_map[i].second << "\n";
}

int run(int argc, char** argv) {
  CLI::App app{"spatio-temporal attention for video action recognition"};
  app.require_subcommand(1);

  // gen-data ----------------------------------------------------------------
  auto* gen = app.add_subcommand("gen-data", "generate a labeled synthetic video dataset");
  SynthConfig synth;
  std::string gen_out;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--n_frames", synth.n_frames, "frames per video");
  gen->add_option("--frame_size", synth.frame_h, "frame height/width");
  gen->add_option("--classes", synth.n_classes, "number of motion classes (<=4)");
  gen->add_option("--sprite_size", synth.sprite_size, "sprite side in pixels");
  gen->add_option("--t_a", synth.t_a, "action window start (1-based)");
  gen->add_option("--t_b", synth.t_b, "action window end (inclusive)");
  gen->add_option("--noise_sigma", synth.noise_sigma, "background noise level");
  gen->add_option("--step", synth.step, "translation step per frame");
  gen->add_option("--train_per_class", synth.train_per_class, "training videos per class");
  gen->add_option("--test_per_class", synth.test_per_class, "test videos per class");
  gen->add_option("--seed", synth.seed, "dataset seed");
  gen->callback([&]() {
    synth.frame_w = synth.frame_h;
    Dataset data = generate_dataset(synth);
    fs::create_directories(fs::path(gen_out) / "train");
    fs::create_directories(fs::path(gen_out) / "test");
    for (const auto& v : data.train) write_stav((fs::path(gen_out) / "train" / (v.id + ".stav")).string(), v);
    for (const auto& v : data.test) write_stav((fs::path(gen_out) / "test" / (v.id + ".stav")).string(), v);
    write_spatial_gt_csv((fs::path(gen_out) / "gt_spatial_train.csv").string(), spatial_ground_truth(data.train));
    write_temporal_gt_csv((fs::path(gen_out) / "gt_temporal_train.csv").string(), temporal_ground_truth(data.train));
    write_spatial_gt_csv((fs::path(gen_out) / "gt_spatial_test.csv").string(), spatial_ground_truth(data.test));
    write_temporal_gt_csv((fs::path(gen_out) / "gt_temporal_test.csv").string(), temporal_ground_truth(data.test));
    std::cout << "wrote " << data.train.size() << " train / " << data.test.size() << " test videos to " << gen_out
              << "\n";
  });

  // train ---------------------------------------------------------------
  auto* tr = app.add_subcommand("train", "train on a generated dataset");
  TrainConfig tcfg;
  std::string tr_data, tr_out, tr_metrics;
  tr->add_option("--data", tr_data, "dataset directory (from gen-data)")->required();
  tr->add_option("--out", tr_out, "checkpoint output path")->required();
  tr->add_option("--metrics", tr_metrics, "metrics CSV output path");
  add_train_flags(tr, tcfg);
  tr->callback([&]() {
    auto train_videos = load_split(fs::path(tr_data) / "train");
    Trainer trainer(tcfg);
    try {
      trainer.run_epochs(train_videos, tcfg.epochs, tr_out + ".diverged");
    } catch (const numeric_error&) {
      if (!tr_metrics.empty()) write_text(tr_metrics, trainer.metrics_csv());
      throw;
    }
    trainer.save(tr_out);
    if (!tr_metrics.empty()) write_text(tr_metrics, trainer.metrics_csv());
    std::cout << "trained " << trainer.step_count() << " steps; checkpoint " << tr_out << "\n";
  });

  // eval ----------------------------------------------------------------
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint: accuracy and localization mAP");
  std::string ev_data, ev_ckpt, ev_out, ev_split = "test";
  bool ev_masks = false, ev_weights = false;
  ev->add_option("--data", ev_data, "dataset directory")->required();
  ev->add_option("--checkpoint", ev_ckpt, "checkpoint path")->required();
  ev->add_option("--out_dir", ev_out, "directory for report CSVs and dumps");
  ev->add_option("--split", ev_split, "train or test")->check(CLI::IsMember({"train", "test"}));
  ev->add_flag("--dump_masks", ev_masks, "write per-frame mask PGMs");
  ev->add_flag("--dump_weights", ev_weights, "write per-video attention CSVs");
  ev->callback([&]() {
    Trainer trainer = Trainer::load(ev_ckpt);
    auto videos = load_split(fs::path(ev_data) / ev_split);
    EvalReport report = evaluate(trainer.model(), videos);
    print_eval_report(report);
    if (!ev_out.empty()) {
      fs::create_directories(ev_out);
      write_map_csv((fs::path(ev_out) / "spatial_map.csv").string(), report.spatial_map);
      write_map_csv((fs::path(ev_out) / "temporal_map.csv").string(), report.temporal_map);
      write_spatial_det_csv((fs::path(ev_out) / "detections_spatial.csv").string(), report.spatial_dets);
      write_temporal_det_csv((fs::path(ev_out) / "detections_temporal.csv").string(), report.temporal_dets);
      if (ev_masks || ev_weights) {
        for (const auto& v : videos) {
          Tape tape;
          tape.set_recording(false);
          ForwardResult fwd = trainer.model().forward(tape, v.frames, false, false);
          if (ev_weights) write_attention_csv((fs::path(ev_out) / (v.id + "_weights.csv")).string(), fwd.attention);
          if (ev_masks)
            for (std::size_t t = 0; t < fwd.masks.size(); ++t)
              write_mask_pgm(ev_out, v.id, static_cast<int>(t) + 1, fwd.masks[t]);
        }
      }
    }
  });

  // gradcheck -------------------------------------------------------------
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every toy-model parameter");
  std::uint64_t gc_seed = 1;
  gc->add_option("--seed", gc_seed, "seed for the toy model");
  gc->callback([&]() {
    GradcheckReport report = gradcheck(gc_seed);
    for (const auto& g : report.groups) std::cout << "group " << g.name << " max_rel " << g.max_rel << "\n";
    std::cout << "overall max_rel " << report.max_rel << " at " << report.worst << " (tolerance " << report.tolerance
              << ")\n";
    if (!report.pass()) {
      std::cout << "FAIL\n";
      std::exit(3);
    }
    std::cout << "PASS\n";
  });

  // heatmap -----------------------------------------------------------------
  auto* hm = app.add_subcommand("heatmap", "write mask/overlay PGMs and the temporal strip for one video");
  std::string hm_ckpt, hm_video, hm_out;
  hm->add_option("--checkpoint", hm_ckpt, "checkpoint path")->required();
  hm->add_option("--video", hm_video, "a .stav video file")->required();
  hm->add_option("--out_dir", hm_out, "output directory")->required();
  hm->callback([&]() {
    Trainer trainer = Trainer::load(hm_ckpt);
    fs::create_directories(hm_out);
    LabeledVideo video = read_stav(hm_video, fs::path(hm_video).stem().string());
    emit_heatmaps(trainer.model(), video, hm_out);
    std::cout << "wrote heatmaps for " << video.id << " to " << hm_out << "\n";
  });

  // check-sequence ------------------------------------------------------
  auto* cs = app.add_subcommand("check-sequence", "read reals from stdin, report unimodality and log-concavity");
  cs->callback([&]() {
    std::vector<double> seq;
    double v;
    while (std::cin >> v) seq.push_back(v);
    if (!std::cin.eof()) throw usage_error("check-sequence: non-numeric input");
    if (seq.empty()) throw usage_error("check-sequence: empty input");
    std::cout << "n = " << seq.size() << "\n";
    std::cout << "unimodal = " << (is_unimodal(seq) ? "yes" : "no") << "\n";
    const bool has_negative = std::any_of(seq.begin(), seq.end(), [](double x) { return x < 0.0; });
    if (has_negative) {
      std::cout << "log_concave = n/a (negative entries)\n";
      std::cout << "penalty = n/a (negative entries)\n";
    } else {
      std::cout << "log_concave = " << (is_log_concave(seq) ? "yes" : "no") << "\n";
      std::cout << "penalty = " << detail::fmt_double(logconcave_penalty(seq)) << "\n";
    }
  });

  CLI11_PARSE(app, argc, argv);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const usage_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const dim_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const numeric_error& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
