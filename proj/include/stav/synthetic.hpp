#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "stav/error.hpp"
#include "stav/localization.hpp"
#include "stav/rng.hpp"
#include "stav/tensor.hpp"

// Deterministic labeled video generator: a bright square sprite performs one
// of four motion patterns over a static noisy background during a known
// action window, giving exact spatial and temporal ground truth. Per-video
// seeds derive from (dataset seed, video index) via splitmix64, so datasets
// reproduce bit-for-bit.

namespace stav {

// Mirrored translation pairs: right/left and down/up sweep the same pixels
// in opposite order, so the time-averaged features are class-ambiguous and
// classification genuinely requires the temporal order of the frames.
enum class Motion : int { translate_right = 0, translate_left = 1, translate_down = 2, translate_up = 3 };

inline const char* motion_name(int class_id) {
  switch (class_id) {
    case 0: return "translate-right";
    case 1: return "translate-left";
    case 2: return "translate-down";
    case 3: return "translate-up";
    default: return "unknown";
  }
}

struct SynthConfig {
  int n_frames = 8;
  int frame_h = 56, frame_w = 56;
  int n_classes = 4;       // motion patterns, at most 4
  int sprite_size = 20;
  int t_a = 2, t_b = 7;    // 1-based inclusive action window
  double noise_sigma = 0.15;
  int step = 4;            // translation pixels per in-window frame
  int train_per_class = 50;
  int test_per_class = 20;
  std::uint64_t seed = 1;

  void validate() const {
    if (n_classes < 1 || n_classes > 4) throw usage_error("SynthConfig: n_classes must be 1..4");
    if (sprite_size < 1 || sprite_size >= std::min(frame_h, frame_w))
      throw usage_error("SynthConfig: sprite must fit in the frame");
    if (!(1 <= t_a && t_a <= t_b && t_b <= n_frames)) throw usage_error("SynthConfig: need 1 <= t_a <= t_b <= n_frames");
    if (n_frames < 1 || frame_h < 8 || frame_w < 8) throw usage_error("SynthConfig: degenerate dimensions");
    if (noise_sigma < 0.0 || noise_sigma > 1.0) throw usage_error("SynthConfig: noise_sigma must lie in [0,1]");
  }
};

struct LabeledVideo {
  std::string id;
  int label = 0;
  std::vector<Tensor> frames;                 // n tensors [1,H,W], values in [0,1]
  std::vector<std::optional<BBox>> gt_boxes;  // per frame; set exactly inside the window
  Segment gt_segment;                         // 1-based inclusive
};

namespace detail {

struct SpritePose {
  int x, y, side;
};

// Pose for in-window frame offset tau (0-based), before clamping.
inline SpritePose sprite_pose(const SynthConfig& cfg, int cls, int x0, int y0, int tau) {
  SpritePose p{x0, y0, cfg.sprite_size};
  switch (static_cast<Motion>(cls)) {
    case Motion::translate_right: p.x = x0 + cfg.step * tau; break;
    case Motion::translate_left: p.x = x0 - cfg.step * tau; break;
    case Motion::translate_down: p.y = y0 + cfg.step * tau; break;
    case Motion::translate_up: p.y = y0 - cfg.step * tau; break;
  }
  return p;
}

inline SpritePose clamp_pose(const SynthConfig& cfg, SpritePose p) {
  p.side = std::min({p.side, cfg.frame_w, cfg.frame_h});
  p.x = std::max(0, std::min(p.x, cfg.frame_w - p.side));
  p.y = std::max(0, std::min(p.y, cfg.frame_h - p.side));
  return p;
}

}  // namespace detail

inline LabeledVideo generate_video(const SynthConfig& cfg, int cls, std::uint64_t video_seed, const std::string& id) {
  cfg.validate();
  if (cls < 0 || cls >= cfg.n_classes) throw usage_error("generate_video: class id out of range");
  Rng rng(video_seed);
  LabeledVideo v;
  v.id = id;
  v.label = cls;
  // The config window fixes the action length; its placement is drawn per
  // video. A dataset-constant window would let temporal attention degenerate
  // into a positional bias, making temporal localization a constant.
  const int len = cfg.t_b - cfg.t_a + 1;
  const int start = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.n_frames - len + 1)));
  v.gt_segment = {start, start + len - 1};

  // The background noise field is shared across the dataset (a function of
  // the dataset seed, not the video seed): a per-video noise field would be
  // a unique fingerprint the classifier can memorize instead of the motion.
  const int h = cfg.frame_h, w = cfg.frame_w;
  Rng bg_rng(Rng::mix(cfg.seed, 0xb9));
  std::vector<double> background(static_cast<std::size_t>(h) * w);
  for (double& px : background) px = cfg.noise_sigma * bg_rng.uniform();

  // One common margin for every class keeps the start-position distribution
  // class-independent, so position alone carries no label information.
  const int margin = cfg.step * (len - 1);
  const int x_room = std::max(1, w - cfg.sprite_size - 2 * margin);
  const int y_room = std::max(1, h - cfg.sprite_size - 2 * margin);
  const int x0 = margin + static_cast<int>(rng.below(static_cast<std::uint64_t>(x_room)));
  const int y0 = margin + static_cast<int>(rng.below(static_cast<std::uint64_t>(y_room)));

  v.frames.reserve(static_cast<std::size_t>(cfg.n_frames));
  v.gt_boxes.resize(static_cast<std::size_t>(cfg.n_frames));
  for (int t = 1; t <= cfg.n_frames; ++t) {
    Tensor frame({1, h, w}, std::vector<double>(background));
    if (t >= v.gt_segment.t_start && t <= v.gt_segment.t_end) {
      const auto pose = detail::clamp_pose(cfg, detail::sprite_pose(cfg, cls, x0, y0, t - v.gt_segment.t_start));
      double* p = frame.data();
      for (int y = pose.y; y < pose.y + pose.side; ++y)
        for (int x = pose.x; x < pose.x + pose.side; ++x) p[y * w + x] = 1.0;
      v.gt_boxes[static_cast<std::size_t>(t - 1)] = BBox{pose.x, pose.y, pose.x + pose.side, pose.y + pose.side};
    }
    // Quantize to f32 so the container round-trip is lossless.
    for (double& px : frame.values()) px = static_cast<double>(static_cast<float>(px));
    v.frames.push_back(std::move(frame));
  }
  return v;
}

struct Dataset {
  std::vector<LabeledVideo> train, test;
};

// Disjoint deterministic splits with a uniform class histogram. Video ids
// number train then test, per class in order.
inline Dataset generate_dataset(const SynthConfig& cfg) {
  cfg.validate();
  if (cfg.train_per_class + cfg.test_per_class < 2) throw usage_error("generate_dataset: need at least 2 videos per class");
  Dataset d;
  int index = 0;
  auto make = [&](int cls) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "vid%04d", index);
    LabeledVideo v = generate_video(cfg, cls, Rng::mix(cfg.seed, static_cast<std::uint64_t>(index)), buf);
    ++index;
    return v;
  };
  for (int cls = 0; cls < cfg.n_classes; ++cls)
    for (int i = 0; i < cfg.train_per_class; ++i) d.train.push_back(make(cls));
  for (int cls = 0; cls < cfg.n_classes; ++cls)
    for (int i = 0; i < cfg.test_per_class; ++i) d.test.push_back(make(cls));
  return d;
}

inline std::vector<SpatialGroundTruth> spatial_ground_truth(const std::vector<LabeledVideo>& videos) {
  std::vector<SpatialGroundTruth> out;
  for (const auto& v : videos)
    for (std::size_t t = 0; t < v.gt_boxes.size(); ++t)
      if (v.gt_boxes[t]) out.push_back({v.id, static_cast<int>(t) + 1, v.label, *v.gt_boxes[t]});
  return out;
}

inline std::vector<TemporalGroundTruth> temporal_ground_truth(const std::vector<LabeledVideo>& videos) {
  std::vector<TemporalGroundTruth> out;
  out.reserve(videos.size());
  for (const auto& v : videos) out.push_back({v.id, v.label, v.gt_segment});
  return out;
}

// ---------------------------------------------------------------------------
// Container format (.stav), little-endian:
//   magic "STAV", u16 version,
//   i32 n, H, W, label, t_a, t_b,
//   n frames of H*W f32 values in [0,1],
//   n boxes of 4 x i32 (x_min, y_min, x_max, y_max), all -1 when absent.

namespace detail {

template <typename T>
void put(std::ofstream& f, T v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
T get(std::ifstream& f) {
  T v{};
  f.read(reinterpret_cast<char*>(&v), sizeof(T));
  return v;
}

}  // namespace detail

constexpr std::uint16_t kStavVersion = 1;

inline void write_stav(const std::string& path, const LabeledVideo& v) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw usage_error("write_stav: cannot open " + path);
  f.write("STAV", 4);
  detail::put<std::uint16_t>(f, kStavVersion);
  const int n = static_cast<int>(v.frames.size());
  const int h = v.frames.empty() ? 0 : v.frames[0].dim(1);
  const int w = v.frames.empty() ? 0 : v.frames[0].dim(2);
  detail::put<std::int32_t>(f, n);
  detail::put<std::int32_t>(f, h);
  detail::put<std::int32_t>(f, w);
  detail::put<std::int32_t>(f, v.label);
  detail::put<std::int32_t>(f, v.gt_segment.t_start);
  detail::put<std::int32_t>(f, v.gt_segment.t_end);
  for (const auto& frame : v.frames)
    for (std::int64_t i = 0; i < frame.size(); ++i) detail::put<float>(f, static_cast<float>(frame.data()[i]));
  for (int t = 0; t < n; ++t) {
    const auto& box = v.gt_boxes[static_cast<std::size_t>(t)];
    detail::put<std::int32_t>(f, box ? box->x_min : -1);
    detail::put<std::int32_t>(f, box ? box->y_min : -1);
    detail::put<std::int32_t>(f, box ? box->x_max : -1);
    detail::put<std::int32_t>(f, box ? box->y_max : -1);
  }
  if (!f) throw usage_error("write_stav: write failed for " + path);
}

inline LabeledVideo read_stav(const std::string& path, const std::string& id) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw usage_error("read_stav: cannot open " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, "STAV", 4) != 0) throw usage_error("read_stav: bad magic in " + path);
  const auto version = detail::get<std::uint16_t>(f);
  if (version != kStavVersion) throw usage_error("read_stav: unsupported version " + std::to_string(version));
  LabeledVideo v;
  v.id = id;
  const int n = detail::get<std::int32_t>(f);
  const int h = detail::get<std::int32_t>(f);
  const int w = detail::get<std::int32_t>(f);
  v.label = detail::get<std::int32_t>(f);
  v.gt_segment.t_start = detail::get<std::int32_t>(f);
  v.gt_segment.t_end = detail::get<std::int32_t>(f);
  if (n < 1 || h < 1 || w < 1) throw usage_error("read_stav: corrupt header in " + path);
  for (int t = 0; t < n; ++t) {
    Tensor frame({1, h, w});
    for (std::int64_t i = 0; i < frame.size(); ++i) frame.data()[i] = static_cast<double>(detail::get<float>(f));
    v.frames.push_back(std::move(frame));
  }
  v.gt_boxes.resize(static_cast<std::size_t>(n));
  for (int t = 0; t < n; ++t) {
    const int a = detail::get<std::int32_t>(f);
    const int b = detail::get<std::int32_t>(f);
    const int c = detail::get<std::int32_t>(f);
    const int d = detail::get<std::int32_t>(f);
    if (a >= 0) v.gt_boxes[static_cast<std::size_t>(t)] = BBox{a, b, c, d};
  }
  if (!f) throw usage_error("read_stav: truncated file " + path);
  return v;
}

}  // namespace stav
