#pragma once

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "stav/loss.hpp"
#include "stav/localization.hpp"
#include "stav/model.hpp"
#include "stav/pgm.hpp"
#include "stav/synthetic.hpp"

// Training loop, SGD with momentum, checkpoints, evaluation, the gradient
// checker and heatmap export. Everything is single-threaded and seeded, so a
// (config, seed, dataset) triple determines every emitted byte.

namespace stav {

struct TrainConfig {
  double lambda_tv = 1e-5;
  double lambda_contrast = 1e-4;
  double lambda_unimodal = 1.0;
  int n_frames = 8;
  int frame_size = 56;
  int hidden_channels = 16;
  int feature_channels = 8;
  int mask_c1 = 64;
  int mask_c2 = 32;
  int energy_channels = 8;
  int classes = 4;
  double lr = 0.05;
  double momentum = 0.9;
  double grad_clip = 2.0;     // global-norm clip; 0 disables
  double weight_decay = 0.0;  // constant L2 coefficient
  int mask_warmup_epochs = 2;  // epochs with the mask network held at init
  double mask_lr_scale = 0.1;  // mask-network learning-rate multiplier after warmup
  int epochs = 30;
  int batch_size = 4;
  std::uint64_t seed = 1;
  bool eq4_prefactor = true;

  ModelConfig model_config() const {
    ModelConfig m;
    m.in_channels = 1;
    m.frame_size = frame_size;
    m.feature_channels = feature_channels;
    m.mask_c1 = mask_c1;
    m.mask_c2 = mask_c2;
    m.hidden_channels = hidden_channels;
    m.energy_channels = energy_channels;
    m.n_frames = n_frames;
    m.classes = classes;
    m.eq4_prefactor = eq4_prefactor;
    return m;
  }

  LossWeights loss_weights() const { return {lambda_tv, lambda_contrast, lambda_unimodal}; }

  void validate() const {
    if (lambda_tv < 0 || lambda_contrast < 0 || lambda_unimodal < 0) throw usage_error("TrainConfig: lambda weights must be >= 0");
    if (n_frames < 1 || frame_size < 8 || hidden_channels < 1 || feature_channels < 1 || mask_c1 < 1 || mask_c2 < 1 ||
        energy_channels < 1 || classes < 2)
      throw usage_error("TrainConfig: non-positive size field");
    if (lr <= 0 || momentum < 0 || momentum >= 1) throw usage_error("TrainConfig: need lr > 0 and momentum in [0,1)");
    if (grad_clip < 0) throw usage_error("TrainConfig: grad_clip must be >= 0");
    if (weight_decay < 0) throw usage_error("TrainConfig: weight_decay must be >= 0");
    if (mask_warmup_epochs < 0) throw usage_error("TrainConfig: mask_warmup_epochs must be >= 0");
    if (mask_lr_scale < 0) throw usage_error("TrainConfig: mask_lr_scale must be >= 0");
    if (epochs < 0 || batch_size < 1) throw usage_error("TrainConfig: bad epochs/batch_size");
  }
};

namespace detail {

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail

// Line-oriented "key = value" serialization; the same text format is
// accepted by the --config CLI option. Round-trips exactly.
inline std::string serialize_config(const TrainConfig& c) {
  std::ostringstream os;
  os << "lambda_tv = " << detail::fmt_double(c.lambda_tv) << "\n";
  os << "lambda_contrast = " << detail::fmt_double(c.lambda_contrast) << "\n";
  os << "lambda_unimodal = " << detail::fmt_double(c.lambda_unimodal) << "\n";
  os << "n_frames = " << c.n_frames << "\n";
  os << "frame_size = " << c.frame_size << "\n";
  os << "hidden_channels = " << c.hidden_channels << "\n";
  os << "feature_channels = " << c.feature_channels << "\n";
  os << "mask_c1 = " << c.mask_c1 << "\n";
  os << "mask_c2 = " << c.mask_c2 << "\n";
  os << "energy_channels = " << c.energy_channels << "\n";
  os << "classes = " << c.classes << "\n";
  os << "lr = " << detail::fmt_double(c.lr) << "\n";
  os << "momentum = " << detail::fmt_double(c.momentum) << "\n";
  os << "grad_clip = " << detail::fmt_double(c.grad_clip) << "\n";
  os << "weight_decay = " << detail::fmt_double(c.weight_decay) << "\n";
  os << "mask_warmup_epochs = " << c.mask_warmup_epochs << "\n";
  os << "mask_lr_scale = " << detail::fmt_double(c.mask_lr_scale) << "\n";
  os << "epochs = " << c.epochs << "\n";
  os << "batch_size = " << c.batch_size << "\n";
  os << "seed = " << c.seed << "\n";
  os << "eq4_prefactor = " << (c.eq4_prefactor ? "true" : "false") << "\n";
  return os.str();
}

inline void apply_config_line(TrainConfig& c, const std::string& key, const std::string& value) {
  auto as_bool = [&]() {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw usage_error("config: bad boolean for " + key + ": " + value);
  };
  try {
    if (key == "lambda_tv") c.lambda_tv = std::stod(value);
    else if (key == "lambda_contrast") c.lambda_contrast = std::stod(value);
    else if (key == "lambda_unimodal") c.lambda_unimodal = std::stod(value);
    else if (key == "n_frames") c.n_frames = std::stoi(value);
    else if (key == "frame_size") c.frame_size = std::stoi(value);
    else if (key == "hidden_channels") c.hidden_channels = std::stoi(value);
    else if (key == "feature_channels") c.feature_channels = std::stoi(value);
    else if (key == "mask_c1") c.mask_c1 = std::stoi(value);
    else if (key == "mask_c2") c.mask_c2 = std::stoi(value);
    else if (key == "energy_channels") c.energy_channels = std::stoi(value);
    else if (key == "classes") c.classes = std::stoi(value);
    else if (key == "lr") c.lr = std::stod(value);
    else if (key == "momentum") c.momentum = std::stod(value);
    else if (key == "grad_clip") c.grad_clip = std::stod(value);
    else if (key == "weight_decay") c.weight_decay = std::stod(value);
    else if (key == "mask_warmup_epochs") c.mask_warmup_epochs = std::stoi(value);
    else if (key == "mask_lr_scale") c.mask_lr_scale = std::stod(value);
    else if (key == "epochs") c.epochs = std::stoi(value);
    else if (key == "batch_size") c.batch_size = std::stoi(value);
    else if (key == "seed") c.seed = std::stoull(value);
    else if (key == "eq4_prefactor") c.eq4_prefactor = as_bool();
    else throw usage_error("config: unknown key '" + key + "'");
  } catch (const std::invalid_argument&) {
    throw usage_error("config: bad value for " + key + ": " + value);
  }
}

inline TrainConfig parse_config(const std::string& text, TrainConfig base = {}) {
  std::istringstream ss(text);
  std::string line;
  auto trim = [](std::string s) {
    const auto a = s.find_first_not_of(" \t\r");
    const auto b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
  };
  while (std::getline(ss, line)) {
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw usage_error("config: expected 'key = value', got: " + line);
    apply_config_line(base, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return base;
}

// ---------------------------------------------------------------------------
// SGD with momentum: v <- mu*v + g ; p <- p - lr*v.

struct Sgd {
  double lr = 0.05;
  double momentum = 0.9;
  double clip = 0.0;          // global gradient-norm cap, 0 = off
  double weight_decay = 0.0;  // L2 added to the (clipped) gradient
  std::vector<std::vector<double>> velocity;

  void init(const ParamList& params) {
    velocity.clear();
    for (const auto& [name, t] : params.items) velocity.emplace_back(static_cast<std::size_t>(t->size()), 0.0);
  }

  // grad_scale folds the 1/batch averaging into the update. Decay applies
  // to conv/affine weights only, not biases or batch-norm parameters.
  void step(ParamList& params, double grad_scale = 1.0) {
    if (velocity.size() != params.items.size()) throw usage_error("Sgd: step before init");
    double clip_scale = 1.0;
    if (clip > 0.0) {
      double sq = 0.0;
      for (const auto& [name, t] : params.items) {
        const double* g = t->grad();
        for (std::int64_t i = 0; i < t->size(); ++i) sq += g[i] * grad_scale * (g[i] * grad_scale);
      }
      const double norm = std::sqrt(sq);
      if (norm > clip) clip_scale = clip / norm;
    }
    for (std::size_t p = 0; p < params.items.size(); ++p) {
      auto& [name, t] = params.items[p];
      // The mask network is regularized by its own TV and contrast terms;
      // L2 on top would drag the mask toward its all-off resting state.
      const double wd = name.find(".mask.") != std::string::npos ? 0.0 : weight_decay;
      const double* g = t->grad();
      double* v = velocity[p].data();
      double* x = t->data();
      for (std::int64_t i = 0; i < t->size(); ++i) {
        const double gi = g[i] * grad_scale * clip_scale + wd * x[i];
        if (!std::isfinite(gi)) throw numeric_error("NaN gradient in parameter " + name);
        v[i] = momentum * v[i] + gi;
        x[i] -= lr * v[i];
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Metrics CSV.

inline const char* kMetricsHeader = "step,ce,tv,contrast,unimodal,total\n";

inline std::string metrics_row(std::uint64_t step, const LossBreakdown& b) {
  std::ostringstream os;
  os << step << "," << detail::fmt_double(b.ce) << "," << detail::fmt_double(b.tv) << ","
     << detail::fmt_double(b.contrast) << "," << detail::fmt_double(b.unimodal) << "," << detail::fmt_double(b.total)
     << "\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Trainer: owns the model, optimizer, shuffling RNG and the step counter.

class Trainer {
 public:
  // The model is heap-allocated so parameter pointers stay valid when the
  // Trainer itself is moved.
  explicit Trainer(const TrainConfig& cfg) : cfg_(cfg), order_rng_(Rng::mix(cfg.seed, 0x7261696e)) {
    cfg_.validate();
    Rng init_rng(Rng::mix(cfg.seed, 0x696e6974));
    model_ = std::make_unique<VideoModel>(cfg.model_config(), init_rng);
    model_->register_params(params_);
    model_->register_state(state_);
    opt_.lr = cfg.lr;
    opt_.momentum = cfg.momentum;
    opt_.clip = cfg.grad_clip;
    opt_.weight_decay = cfg.weight_decay;
    opt_.init(params_);
    metrics_ = kMetricsHeader;
    snapshot();
  }

  const TrainConfig& config() const { return cfg_; }
  VideoModel& model() { return *model_; }
  ParamList& params() { return params_; }
  StateList& state() { return state_; }
  std::uint64_t step_count() const { return step_; }
  const std::string& metrics_csv() const { return metrics_; }

  // Runs whole epochs; chunked calls compose exactly like one longer run.
  // Throws numeric_error on divergence after writing diverged_path (when
  // given) with the last state that produced a finite loss.
  void run_epochs(const std::vector<LabeledVideo>& train_set, int epochs, const std::string& diverged_path = "") {
    if (train_set.empty()) throw usage_error("train: empty dataset");
    const LossWeights lw = cfg_.loss_weights();
    for (int e = 0; e < epochs; ++e) {
      const bool mask_frozen = epochs_run_ < cfg_.mask_warmup_epochs;
      std::vector<std::size_t> order(train_set.size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      order_rng_.shuffle(order);
      for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg_.batch_size)) {
        const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg_.batch_size));
        params_.zero_grad();
        LossBreakdown mean{};
        const double inv = 1.0 / static_cast<double>(end - start);
        try {
          for (std::size_t i = start; i < end; ++i) {
            const LabeledVideo& v = train_set[order[i]];
            Tape tape;
            ForwardResult fwd = model_->forward(tape, v.frames, /*training=*/true);
            LossBreakdown b = total_loss(tape, fwd.logits, v.label, fwd.masks, fwd.attention, lw);
            tape.backward(b.node);
            mean.ce += b.ce;
            mean.tv += b.tv;
            mean.contrast += b.contrast;
            mean.unimodal += b.unimodal;
            mean.total += b.total;
          }
          mean.ce *= inv;
          mean.tv *= inv;
          mean.contrast *= inv;
          mean.unimodal *= inv;
          mean.total *= inv;
          if (!std::isfinite(mean.total)) throw numeric_error("train: loss diverged at step " + std::to_string(step_ + 1));
          // The spatial gradients into a fresh mask network are dominated by
          // a global scale pressure that can slam every mask to one pole
          // before classification finds its footing; holding the mask at its
          // init during warmup and slowing it afterwards keeps the salience
          // pattern in charge while the task still shapes it.
          const double mask_gain = mask_frozen ? 0.0 : cfg_.mask_lr_scale;
          if (mask_gain != 1.0)
            for (auto& [name, t] : params_.items)
              if (name.find(".mask.") != std::string::npos) {
                double* g = t->grad();
                for (std::int64_t gi = 0; gi < t->size(); ++gi) g[gi] *= mask_gain;
              }
          snapshot();
          opt_.step(params_, inv);
        } catch (const numeric_error&) {
          // The snapshot predates whatever state produced the non-finite
          // value: dump it as the last finite checkpoint.
          if (!diverged_path.empty()) save_snapshot_checkpoint(diverged_path);
          throw;
        }
        ++step_;
        metrics_ += metrics_row(step_, mean);
      }
      ++epochs_run_;
    }
  }

  void save(const std::string& path) const {
    write_checkpoint(path, cfg_, params_, state_, opt_, step_, epochs_run_, order_rng_.state());
  }

  static Trainer load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw usage_error("checkpoint: cannot open " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "STCK", 4) != 0) throw usage_error("checkpoint: bad magic in " + path);
    std::uint16_t version = 0;
    f.read(reinterpret_cast<char*>(&version), sizeof version);
    if (version != 1) throw usage_error("checkpoint: unsupported version " + std::to_string(version));
    const std::string config_text = read_block(f);
    Trainer t(parse_config(config_text));
    f.read(reinterpret_cast<char*>(&t.step_), sizeof t.step_);
    f.read(reinterpret_cast<char*>(&t.epochs_run_), sizeof t.epochs_run_);
    std::uint64_t rng_state = 0;
    f.read(reinterpret_cast<char*>(&rng_state), sizeof rng_state);
    t.order_rng_.set_state(rng_state);
    read_named_doubles(f, path, "parameter", [&](const std::string& name, std::vector<double>& buf) {
      for (auto& [pname, tensor] : t.params_.items)
        if (pname == name) {
          if (static_cast<std::int64_t>(buf.size()) != tensor->size())
            throw usage_error("checkpoint: size mismatch for " + name);
          std::copy(buf.begin(), buf.end(), tensor->data());
          return true;
        }
      return false;
    });
    read_named_doubles(f, path, "state", [&](const std::string& name, std::vector<double>& buf) {
      for (auto& [sname, vec] : t.state_.items)
        if (sname == name) {
          if (buf.size() != vec->size()) throw usage_error("checkpoint: size mismatch for " + name);
          *vec = buf;
          return true;
        }
      return false;
    });
    std::size_t vi = 0;
    read_named_doubles(f, path, "velocity", [&](const std::string& name, std::vector<double>& buf) {
      if (vi >= t.opt_.velocity.size() || t.params_.items[vi].first != name) return false;
      if (buf.size() != t.opt_.velocity[vi].size()) throw usage_error("checkpoint: size mismatch for velocity " + name);
      t.opt_.velocity[vi++] = buf;
      return true;
    });
    if (!f) throw usage_error("checkpoint: truncated file " + path);
    t.snapshot();
    return t;
  }

 private:
  void snapshot() {
    snap_params_.clear();
    for (const auto& [name, tensor] : params_.items) snap_params_.push_back(tensor->values());
    snap_state_.clear();
    for (const auto& [name, vec] : state_.items) snap_state_.push_back(*vec);
    snap_velocity_ = opt_.velocity;
    snap_step_ = step_;
    snap_epochs_ = epochs_run_;
    snap_rng_ = order_rng_.state();
  }

  void save_snapshot_checkpoint(const std::string& path) const {
    // Materialize the snapshot into a scratch trainer and serialize it.
    Trainer scratch(cfg_);
    for (std::size_t p = 0; p < scratch.params_.items.size(); ++p)
      std::copy(snap_params_[p].begin(), snap_params_[p].end(), scratch.params_.items[p].second->data());
    for (std::size_t s = 0; s < scratch.state_.items.size(); ++s) *scratch.state_.items[s].second = snap_state_[s];
    scratch.opt_.velocity = snap_velocity_;
    scratch.step_ = snap_step_;
    scratch.epochs_run_ = snap_epochs_;
    scratch.order_rng_.set_state(snap_rng_);
    scratch.save(path);
  }

  static void write_block(std::ofstream& f, const std::string& s) {
    const std::uint32_t n = static_cast<std::uint32_t>(s.size());
    f.write(reinterpret_cast<const char*>(&n), sizeof n);
    f.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  static std::string read_block(std::ifstream& f) {
    std::uint32_t n = 0;
    f.read(reinterpret_cast<char*>(&n), sizeof n);
    std::string s(n, '\0');
    f.read(s.data(), n);
    return s;
  }
  static void write_named_doubles(std::ofstream& f, const std::string& name, const double* data, std::size_t count) {
    write_block(f, name);
    const std::uint32_t n = static_cast<std::uint32_t>(count);
    f.write(reinterpret_cast<const char*>(&n), sizeof n);
    f.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(count * sizeof(double)));
  }
  template <typename Sink>
  static void read_named_doubles(std::ifstream& f, const std::string& path, const char* what, Sink sink) {
    std::uint32_t count = 0;
    f.read(reinterpret_cast<char*>(&count), sizeof count);
    for (std::uint32_t i = 0; i < count; ++i) {
      const std::string name = read_block(f);
      std::uint32_t n = 0;
      f.read(reinterpret_cast<char*>(&n), sizeof n);
      std::vector<double> buf(n);
      f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * sizeof(double)));
      if (!f) throw usage_error("checkpoint: truncated " + std::string(what) + " section in " + path);
      if (!sink(name, buf)) throw usage_error("checkpoint: unexpected " + std::string(what) + " '" + name + "' in " + path);
    }
  }

  static void write_checkpoint(const std::string& path, const TrainConfig& cfg, const ParamList& params,
                               const StateList& state, const Sgd& opt, std::uint64_t step, std::uint64_t epochs_done,
                               std::uint64_t rng_state) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw usage_error("checkpoint: cannot open " + path);
    f.write("STCK", 4);
    const std::uint16_t version = 1;
    f.write(reinterpret_cast<const char*>(&version), sizeof version);
    write_block(f, serialize_config(cfg));
    f.write(reinterpret_cast<const char*>(&step), sizeof step);
    f.write(reinterpret_cast<const char*>(&epochs_done), sizeof epochs_done);
    f.write(reinterpret_cast<const char*>(&rng_state), sizeof rng_state);
    auto write_count = [&](std::size_t n) {
      const std::uint32_t v = static_cast<std::uint32_t>(n);
      f.write(reinterpret_cast<const char*>(&v), sizeof v);
    };
    write_count(params.items.size());
    for (const auto& [name, t] : params.items)
      write_named_doubles(f, name, t->data(), static_cast<std::size_t>(t->size()));
    write_count(state.items.size());
    for (const auto& [name, vec] : state.items) write_named_doubles(f, name, vec->data(), vec->size());
    write_count(opt.velocity.size());
    for (std::size_t p = 0; p < opt.velocity.size(); ++p)
      write_named_doubles(f, params.items[p].first, opt.velocity[p].data(), opt.velocity[p].size());
    if (!f) throw usage_error("checkpoint: write failed for " + path);
  }

  TrainConfig cfg_;
  std::unique_ptr<VideoModel> model_;
  ParamList params_;
  StateList state_;
  Sgd opt_;
  Rng order_rng_;
  std::uint64_t step_ = 0;
  std::uint64_t epochs_run_ = 0;
  std::string metrics_;

  std::vector<std::vector<double>> snap_params_, snap_state_, snap_velocity_;
  std::uint64_t snap_step_ = 0, snap_epochs_ = 0, snap_rng_ = 0;
};

// ---------------------------------------------------------------------------
// Evaluation: top-1 accuracy plus weakly-supervised localization mAP.
// Detections take the predicted class; scores come from the attention
// artifacts only (mean mask value in the box, mean raw frame weight).

struct EvalReport {
  int correct = 0;
  int total = 0;
  double accuracy = 0.0;
  std::vector<std::pair<double, double>> spatial_map;   // alpha -> mAP
  std::vector<std::pair<double, double>> temporal_map;  // alpha -> mAP
  std::vector<SpatialDetection> spatial_dets;
  std::vector<TemporalDetection> temporal_dets;

  double spatial_at(double alpha) const { return lookup(spatial_map, alpha); }
  double temporal_at(double alpha) const { return lookup(temporal_map, alpha); }

 private:
  static double lookup(const std::vector<std::pair<double, double>>& rows, double alpha) {
    for (const auto& [a, v] : rows)
      if (std::fabs(a - alpha) < 1e-9) return v;
    throw usage_error("EvalReport: alpha not in grid");
  }
};

inline EvalReport evaluate(VideoModel& model, const std::vector<LabeledVideo>& videos, double mask_threshold = 0.5) {
  if (videos.empty()) throw usage_error("evaluate: empty dataset");
  EvalReport r;
  for (const auto& v : videos) {
    if (static_cast<int>(v.frames.size()) != model.config().n_frames)
      throw usage_error("evaluate: video " + v.id + " has " + std::to_string(v.frames.size()) +
                        " frames, model expects " + std::to_string(model.config().n_frames));
    Tape tape;
    tape.set_recording(false);
    ForwardResult fwd = model.forward(tape, v.frames, /*training=*/false, /*update_running=*/false);
    const int pred = predict_class(fwd.logits);
    r.correct += pred == v.label ? 1 : 0;
    ++r.total;

    const int fh = v.frames[0].dim(1), fw = v.frames[0].dim(2);
    for (std::size_t t = 0; t < fwd.masks.size(); ++t) {
      Tensor up = upsample_mask(fwd.masks[t], fh, fw);
      if (auto box = mask_to_bbox(up, mask_threshold)) {
        double mean_in_box = 0.0;
        for (int y = box->y_min; y < box->y_max; ++y)
          for (int x = box->x_min; x < box->x_max; ++x) mean_in_box += up.data()[y * fw + x];
        mean_in_box /= static_cast<double>(box->area());
        r.spatial_dets.push_back({v.id, static_cast<int>(t) + 1, pred, *box, mean_in_box});
      }
    }
    for (const auto& [segment, score] : temporal_segments(frame_importance(fwd.attention), mask_threshold))
      r.temporal_dets.push_back({v.id, pred, segment, score});
  }
  r.accuracy = static_cast<double>(r.correct) / static_cast<double>(r.total);

  const auto spatial_gt = spatial_ground_truth(videos);
  const auto temporal_gt = temporal_ground_truth(videos);
  for (double alpha : map_alpha_grid()) {
    r.spatial_map.push_back({alpha, spatial_gt.empty() ? 0.0 : map_at_iou(r.spatial_dets, spatial_gt, alpha)});
    r.temporal_map.push_back({alpha, map_at_iou(r.temporal_dets, temporal_gt, alpha)});
  }
  return r;
}

// ---------------------------------------------------------------------------
// Gradient checker: central finite differences of the full objective over
// every parameter of a toy attention model (and the input features), against
// the gradients from one backward pass.

struct GradcheckReport {
  struct Group {
    std::string name;
    double max_rel = 0.0;
  };
  std::vector<Group> groups;
  double max_rel = 0.0;
  std::string worst;
  double tolerance = 1e-3;
  bool pass() const { return max_rel < tolerance; }
};

// Toy dims: 4-channel 7x7 features, 4 frames, 3 classes, hidden width 8.
// perturb_analytic deliberately biases the analytic gradients (negative
// control for the checker itself).
//
// The contrast term binarizes at M = 0.5 and its gradient holds B constant,
// so finite differences only agree at points where no mask entry sits near
// the threshold. The checker biases the final mask layer away from 0.5 and
// reseeds until the margin holds.
inline GradcheckReport gradcheck(std::uint64_t seed, double perturb_analytic = 0.0) {
  ModelConfig mc;
  mc.feature_channels = 4;
  mc.frame_size = 7;
  mc.mask_c1 = 6;
  mc.mask_c2 = 5;
  mc.hidden_channels = 8;
  mc.energy_channels = 4;
  mc.n_frames = 4;
  mc.classes = 3;

  AttentionModel model;
  std::vector<Tensor> features;
  int label = 0;
  ParamList params;
  for (int attempt = 0; attempt < 64; ++attempt) {
    Rng rng(Rng::mix(seed, 0x67726164 + static_cast<std::uint64_t>(attempt)));
    model = AttentionModel(mc, rng);
    // Push masks away from the binarization threshold and spread the
    // energies so the unimodal hinge arguments leave their boundary.
    for (double& w : model.mask_net.l3.weight.values()) w *= 0.5;
    model.mask_net.l3.bias.data()[0] = 1.0;
    for (Linear* fc : {&model.energy.fc_h, &model.energy.fc_x}) {
      for (double& w : fc->weight.values()) w *= 6.0;
      for (double& b : fc->bias.values()) b = rng.uniform(-0.5, 0.5);
    }
    features.clear();
    for (int i = 0; i < mc.n_frames; ++i)
      features.push_back(Tensor::random_uniform({mc.feature_channels, 7, 7}, rng, -1.0, 1.0));
    label = static_cast<int>(rng.below(static_cast<std::uint64_t>(mc.classes)));

    Tape probe;
    probe.set_recording(false);
    ForwardResult fwd = model.forward(probe, features, /*training=*/true, /*update_running=*/false);
    double mask_margin = 1.0;
    for (const auto& m : fwd.masks)
      for (std::int64_t i = 0; i < m.size(); ++i) mask_margin = std::min(mask_margin, std::fabs(m.data()[i] - 0.5));
    double hinge_margin = 1.0;
    const Tensor& w = fwd.attention;
    for (int t = 0; t < mc.n_frames; ++t)
      for (int i = 1; i + 1 < mc.n_frames; ++i)
        hinge_margin = std::min(hinge_margin, std::fabs(w.at({t, i - 1}) * w.at({t, i + 1}) - w.at({t, i}) * w.at({t, i})));
    double tv_margin = 1.0;  // |.| kinks: no two neighboring mask pixels may coincide
    for (const auto& m : fwd.masks) {
      const int mh = m.dim(1), mw = m.dim(2);
      for (int y = 0; y < mh; ++y)
        for (int x = 0; x < mw; ++x) {
          if (y + 1 < mh) tv_margin = std::min(tv_margin, std::fabs(m.data()[(y + 1) * mw + x] - m.data()[y * mw + x]));
          if (x + 1 < mw) tv_margin = std::min(tv_margin, std::fabs(m.data()[y * mw + x + 1] - m.data()[y * mw + x]));
        }
    }
    if (mask_margin > 0.02 && hinge_margin > 2e-3 && tv_margin > 1e-4) break;
  }
  params = ParamList();
  model.register_params("attn", params);
  if (params.total_size() > 50000) throw usage_error("gradcheck: toy model exceeds parameter budget");
  const LossWeights lw{};

  auto forward_loss = [&](Tape& tape) {
    ForwardResult fwd = model.forward(tape, features, /*training=*/true, /*update_running=*/false);
    return total_loss(tape, fwd.logits, label, fwd.masks, fwd.attention, lw).node;
  };

  std::vector<std::pair<std::string, Tensor*>> checked;
  for (auto& [name, t] : params.items) checked.push_back({name, t});
  for (std::size_t i = 0; i < features.size(); ++i) checked.push_back({"features[" + std::to_string(i) + "]", &features[i]});

  for (auto& [name, t] : checked) {
    t->enable_grad();
    t->zero_grad();
  }
  {
    Tape tape;
    Tensor loss = forward_loss(tape);
    tape.backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  for (auto& [name, t] : checked) {
    analytic.emplace_back(t->grad(), t->grad() + t->size());
    if (perturb_analytic != 0.0)
      for (double& g : analytic.back()) g += perturb_analytic;
  }

  auto eval = [&]() {
    Tape tape;
    tape.set_recording(false);
    return forward_loss(tape).value();
  };

  GradcheckReport report;
  const double h = 1e-4;
  for (std::size_t p = 0; p < checked.size(); ++p) {
    Tensor* t = checked[p].second;
    GradcheckReport::Group group{checked[p].first, 0.0};
    for (std::int64_t i = 0; i < t->size(); ++i) {
      double* x = t->data() + i;
      const double orig = *x;
      *x = orig + h;
      const double fp = eval();
      *x = orig - h;
      const double fm = eval();
      *x = orig;
      const double fd = (fp - fm) / (2.0 * h);
      const double a = analytic[p][static_cast<std::size_t>(i)];
      const double rel = std::fabs(a - fd) / std::max({std::fabs(a), std::fabs(fd), 1e-6});
      if (rel > group.max_rel) group.max_rel = rel;
      if (rel > report.max_rel) {
        report.max_rel = rel;
        report.worst = group.name + "[" + std::to_string(i) + "]";
      }
    }
    report.groups.push_back(group);
  }
  return report;
}

// ---------------------------------------------------------------------------
// Heatmap export: per-frame mask PGMs at mask resolution, per-frame overlay
// PGMs at frame resolution, and one strip whose block brightness is the
// max-normalized frame importance.

inline void emit_heatmaps(VideoModel& model, const LabeledVideo& video, const std::string& out_dir) {
  Tape tape;
  tape.set_recording(false);
  ForwardResult fwd = model.forward(tape, video.frames, /*training=*/false, /*update_running=*/false);
  const int fh = video.frames[0].dim(1), fw = video.frames[0].dim(2);
  for (std::size_t t = 0; t < fwd.masks.size(); ++t) {
    write_mask_pgm(out_dir, video.id, static_cast<int>(t) + 1, fwd.masks[t]);
    Tensor up = upsample_mask(fwd.masks[t], fh, fw);
    std::vector<double> overlay(static_cast<std::size_t>(fh) * fw);
    for (std::size_t i = 0; i < overlay.size(); ++i)
      overlay[i] = 0.5 * video.frames[t].data()[i] + 0.5 * up.data()[i];
    write_pgm(out_dir + "/" + video.id + "_" + std::to_string(t + 1) + "_overlay.pgm", fw, fh, overlay);
  }
  const std::vector<double> importance = frame_importance(fwd.attention);
  double max_imp = 0.0;
  for (double v : importance) max_imp = std::max(max_imp, v);
  const int block = 16;
  const int n = static_cast<int>(importance.size());
  std::vector<double> strip(static_cast<std::size_t>(block) * block * n);
  for (int i = 0; i < n; ++i) {
    const double bright = max_imp > 0.0 ? importance[static_cast<std::size_t>(i)] / max_imp : 0.0;
    for (int y = 0; y < block; ++y)
      for (int x = 0; x < block; ++x) strip[static_cast<std::size_t>(y) * block * n + i * block + x] = bright;
  }
  write_pgm(out_dir + "/" + video.id + "_strip.pgm", block * n, block, strip);
}

}  // namespace stav
