#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "stav/error.hpp"
#include "stav/tensor.hpp"

// Weakly-supervised localization and scoring: boxes from thresholded masks,
// temporal segments from normalized frame weights, IoU measures and
// detection mAP with greedy score-ordered matching.

namespace stav {

// Half-open pixel box [x_min,x_max) x [y_min,y_max).
struct BBox {
  int x_min = 0, y_min = 0, x_max = 0, y_max = 0;
  std::int64_t area() const { return static_cast<std::int64_t>(x_max - x_min) * (y_max - y_min); }
  bool operator==(const BBox& o) const = default;
};

// Inclusive 1-based frame range.
struct Segment {
  int t_start = 1, t_end = 1;
  int length() const { return t_end - t_start + 1; }
  bool operator==(const Segment& o) const = default;
};

inline double box_iou(const BBox& a, const BBox& b) {
  const int ix = std::max(0, std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min));
  const int iy = std::max(0, std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min));
  const std::int64_t inter = static_cast<std::int64_t>(ix) * iy;
  const std::int64_t uni = a.area() + b.area() - inter;
  return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

inline double interval_iou(const Segment& a, const Segment& b) {
  const int inter = std::max(0, std::min(a.t_end, b.t_end) - std::max(a.t_start, b.t_start) + 1);
  const int uni = a.length() + b.length() - inter;
  return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

// Bilinear upsampling (align-corners false). Masks live at feature
// resolution; ground truth boxes at pixel resolution.
inline Tensor upsample_mask(const Tensor& mask, int target_h, int target_w) {
  if (mask.rank() != 3 || mask.dim(0) != 1) throw usage_error("upsample_mask: mask must be [1,H,W]");
  const int h = mask.dim(1), w = mask.dim(2);
  if (target_h < h || target_w < w)
    throw usage_error("upsample_mask: target " + std::to_string(target_h) + "x" + std::to_string(target_w) +
                      " smaller than source " + std::to_string(h) + "x" + std::to_string(w));
  Tensor out({1, target_h, target_w});
  const double* src = mask.data();
  double* dst = out.data();
  const double sy = static_cast<double>(h) / target_h;
  const double sx = static_cast<double>(w) / target_w;
  for (int y = 0; y < target_h; ++y) {
    double fy = (y + 0.5) * sy - 0.5;
    fy = std::min(std::max(fy, 0.0), static_cast<double>(h - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, h - 1);
    const double wy = fy - y0;
    for (int x = 0; x < target_w; ++x) {
      double fx = (x + 0.5) * sx - 0.5;
      fx = std::min(std::max(fx, 0.0), static_cast<double>(w - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, w - 1);
      const double wx = fx - x0;
      const double top = src[y0 * w + x0] * (1.0 - wx) + src[y0 * w + x1] * wx;
      const double bot = src[y1 * w + x0] * (1.0 - wx) + src[y1 * w + x1] * wx;
      dst[y * target_w + x] = top * (1.0 - wy) + bot * wy;
    }
  }
  return out;
}

// Tightest box containing every pixel with mask > threshold; empty when no
// pixel qualifies.
inline std::optional<BBox> mask_to_bbox(const Tensor& mask, double threshold = 0.5) {
  if (mask.rank() != 3 || mask.dim(0) != 1) throw usage_error("mask_to_bbox: mask must be [1,H,W]");
  if (!(threshold > 0.0 && threshold < 1.0)) throw usage_error("mask_to_bbox: threshold must lie in (0,1)");
  const int h = mask.dim(1), w = mask.dim(2);
  const double* p = mask.data();
  int x_lo = w, x_hi = -1, y_lo = h, y_hi = -1;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (p[y * w + x] > threshold) {
        x_lo = std::min(x_lo, x);
        x_hi = std::max(x_hi, x);
        y_lo = std::min(y_lo, y);
        y_hi = std::max(y_hi, y);
      }
  if (x_hi < 0) return std::nullopt;
  return BBox{x_lo, y_lo, x_hi + 1, y_hi + 1};
}

// Maximal runs of frames whose max-normalized weight exceeds the threshold.
// Scores are means of the raw weights over each run; segments are 1-based.
inline std::vector<std::pair<Segment, double>> temporal_segments(const std::vector<double>& frame_weights,
                                                                 double threshold = 0.5) {
  if (frame_weights.empty()) throw usage_error("temporal_segments: empty weight vector");
  double max_w = 0.0;
  for (double v : frame_weights) {
    if (v < 0.0) throw usage_error("temporal_segments: negative weight");
    max_w = std::max(max_w, v);
  }
  if (max_w == 0.0) throw usage_error("temporal_segments: all-zero weights");
  std::vector<std::pair<Segment, double>> segments;
  const int n = static_cast<int>(frame_weights.size());
  int run_start = -1;
  double run_sum = 0.0;
  for (int i = 0; i <= n; ++i) {
    const bool active = i < n && frame_weights[static_cast<std::size_t>(i)] / max_w > threshold;
    if (active) {
      if (run_start < 0) {
        run_start = i;
        run_sum = 0.0;
      }
      run_sum += frame_weights[static_cast<std::size_t>(i)];
    } else if (run_start >= 0) {
      segments.push_back({Segment{run_start + 1, i}, run_sum / (i - run_start)});
      run_start = -1;
    }
  }
  return segments;
}

// Column mean of the attention matrix: importance of frame i averaged over
// the recurrence steps t.
inline std::vector<double> frame_importance(const Tensor& attention) {
  if (attention.rank() != 2) throw usage_error("frame_importance: expected [T,n] matrix");
  const int t_n = attention.dim(0), n = attention.dim(1);
  std::vector<double> imp(static_cast<std::size_t>(n), 0.0);
  for (int t = 0; t < t_n; ++t)
    for (int i = 0; i < n; ++i) imp[static_cast<std::size_t>(i)] += attention.at({t, i});
  for (double& v : imp) v /= t_n;
  return imp;
}

// ---------------------------------------------------------------------------
// Detection mAP.

struct SpatialDetection {
  std::string video_id;
  int frame = 1;  // 1-based
  int class_id = 0;
  BBox box;
  double score = 0.0;
};
struct SpatialGroundTruth {
  std::string video_id;
  int frame = 1;
  int class_id = 0;
  BBox box;
};
struct TemporalDetection {
  std::string video_id;
  int class_id = 0;
  Segment segment;
  double score = 0.0;
};
struct TemporalGroundTruth {
  std::string video_id;
  int class_id = 0;
  Segment segment;
};

namespace detail {

// Greedy matching in descending score order: each detection takes the
// unmatched same-locality ground truth of highest IoU >= alpha (ties broken
// by ground-truth index), then AP integrates the precision envelope over
// recall. Returns mean AP over classes that have ground truth.
template <typename Det, typename Gt, typename IouFn, typename LocFn>
double map_generic(const std::vector<Det>& dets, const std::vector<Gt>& gts, double alpha, IouFn iou, LocFn same_place) {
  if (gts.empty()) throw usage_error("map_at_iou: empty ground-truth set");
  if (!(alpha > 0.0 && alpha < 1.0)) throw usage_error("map_at_iou: alpha must lie in (0,1)");
  std::set<int> classes;
  for (const auto& g : gts) classes.insert(g.class_id);
  double ap_sum = 0.0;
  for (int cls : classes) {
    std::vector<std::size_t> det_idx, gt_idx;
    for (std::size_t i = 0; i < dets.size(); ++i)
      if (dets[i].class_id == cls) det_idx.push_back(i);
    for (std::size_t i = 0; i < gts.size(); ++i)
      if (gts[i].class_id == cls) gt_idx.push_back(i);
    std::stable_sort(det_idx.begin(), det_idx.end(),
                     [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
    std::vector<char> taken(gt_idx.size(), 0);
    std::vector<char> is_tp(det_idx.size(), 0);
    for (std::size_t d = 0; d < det_idx.size(); ++d) {
      const Det& det = dets[det_idx[d]];
      double best_iou = 0.0;
      std::size_t best_g = gt_idx.size();
      for (std::size_t g = 0; g < gt_idx.size(); ++g) {
        if (taken[g] || !same_place(det, gts[gt_idx[g]])) continue;
        const double v = iou(det, gts[gt_idx[g]]);
        if (v >= alpha && v > best_iou) {
          best_iou = v;
          best_g = g;
        }
      }
      if (best_g < gt_idx.size()) {
        taken[best_g] = 1;
        is_tp[d] = 1;
      }
    }
    // All-points interpolated AP.
    const double n_gt = static_cast<double>(gt_idx.size());
    std::vector<double> precision, recall;
    int tp = 0;
    for (std::size_t d = 0; d < det_idx.size(); ++d) {
      tp += is_tp[d];
      precision.push_back(static_cast<double>(tp) / static_cast<double>(d + 1));
      recall.push_back(static_cast<double>(tp) / n_gt);
    }
    for (std::size_t d = precision.size(); d-- > 1;) precision[d - 1] = std::max(precision[d - 1], precision[d]);
    double ap = 0.0, prev_recall = 0.0;
    for (std::size_t d = 0; d < precision.size(); ++d) {
      ap += (recall[d] - prev_recall) * precision[d];
      prev_recall = recall[d];
    }
    ap_sum += ap;
  }
  return ap_sum / static_cast<double>(classes.size());
}

}  // namespace detail

inline double map_at_iou(const std::vector<SpatialDetection>& dets, const std::vector<SpatialGroundTruth>& gts, double alpha) {
  return detail::map_generic(
      dets, gts, alpha, [](const SpatialDetection& d, const SpatialGroundTruth& g) { return box_iou(d.box, g.box); },
      [](const SpatialDetection& d, const SpatialGroundTruth& g) { return d.video_id == g.video_id && d.frame == g.frame; });
}

inline double map_at_iou(const std::vector<TemporalDetection>& dets, const std::vector<TemporalGroundTruth>& gts, double alpha) {
  return detail::map_generic(
      dets, gts, alpha,
      [](const TemporalDetection& d, const TemporalGroundTruth& g) { return interval_iou(d.segment, g.segment); },
      [](const TemporalDetection& d, const TemporalGroundTruth& g) { return d.video_id == g.video_id; });
}

// Threshold grid matching the reported localization tables.
inline const std::vector<double>& map_alpha_grid() {
  static const std::vector<double> grid{0.05, 0.1, 0.2, 0.3, 0.4, 0.5};
  return grid;
}

// ---------------------------------------------------------------------------
// CSV formats. Ground truth: video_id,frame,class,x_min,y_min,x_max,y_max
// (spatial) and video_id,class,t_start,t_end (temporal). Detections carry a
// trailing score. Results: alpha,map.

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream ss(line);
  while (std::getline(ss, cur, ',')) out.push_back(cur);
  return out;
}

inline std::string fmt17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail

inline void write_spatial_gt_csv(const std::string& path, const std::vector<SpatialGroundTruth>& gts) {
  std::ofstream f(path);
  if (!f) throw usage_error("cannot open " + path);
  f << "video_id,frame,class,x_min,y_min,x_max,y_max\n";
  for (const auto& g : gts)
    f << g.video_id << "," << g.frame << "," << g.class_id << "," << g.box.x_min << "," << g.box.y_min << ","
      << g.box.x_max << "," << g.box.y_max << "\n";
}

inline void write_temporal_gt_csv(const std::string& path, const std::vector<TemporalGroundTruth>& gts) {
  std::ofstream f(path);
  if (!f) throw usage_error("cannot open " + path);
  f << "video_id,class,t_start,t_end\n";
  for (const auto& g : gts) f << g.video_id << "," << g.class_id << "," << g.segment.t_start << "," << g.segment.t_end << "\n";
}

inline void write_spatial_det_csv(const std::string& path, const std::vector<SpatialDetection>& dets) {
  std::ofstream f(path);
  if (!f) throw usage_error("cannot open " + path);
  f << "video_id,frame,class,x_min,y_min,x_max,y_max,score\n";
  for (const auto& d : dets)
    f << d.video_id << "," << d.frame << "," << d.class_id << "," << d.box.x_min << "," << d.box.y_min << ","
      << d.box.x_max << "," << d.box.y_max << "," << detail::fmt17(d.score) << "\n";
}

inline void write_temporal_det_csv(const std::string& path, const std::vector<TemporalDetection>& dets) {
  std::ofstream f(path);
  if (!f) throw usage_error("cannot open " + path);
  f << "video_id,class,t_start,t_end,score\n";
  for (const auto& d : dets)
    f << d.video_id << "," << d.class_id << "," << d.segment.t_start << "," << d.segment.t_end << ","
      << detail::fmt17(d.score) << "\n";
}

inline std::vector<SpatialGroundTruth> read_spatial_gt_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw usage_error("cannot open " + path);
  std::vector<SpatialGroundTruth> out;
  std::string line;
  bool first = true;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    if (first && line.rfind("video_id", 0) == 0) {
      first = false;
      continue;
    }
    first = false;
    auto cols = detail::split_csv_line(line);
    if (cols.size() != 7) throw usage_error("malformed spatial gt row: " + line);
    out.push_back({cols[0], std::stoi(cols[1]), std::stoi(cols[2]),
                   BBox{std::stoi(cols[3]), std::stoi(cols[4]), std::stoi(cols[5]), std::stoi(cols[6])}});
  }
  return out;
}

inline std::vector<TemporalGroundTruth> read_temporal_gt_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw usage_error("cannot open " + path);
  std::vector<TemporalGroundTruth> out;
  std::string line;
  bool first = true;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    if (first && line.rfind("video_id", 0) == 0) {
      first = false;
      continue;
    }
    first = false;
    auto cols = detail::split_csv_line(line);
    if (cols.size() != 4) throw usage_error("malformed temporal gt row: " + line);
    out.push_back({cols[0], std::stoi(cols[1]), Segment{std::stoi(cols[2]), std::stoi(cols[3])}});
  }
  return out;
}

inline std::vector<SpatialDetection> read_spatial_det_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw usage_error("cannot open " + path);
  std::vector<SpatialDetection> out;
  std::string line;
  bool first = true;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    if (first && line.rfind("video_id", 0) == 0) {
      first = false;
      continue;
    }
    first = false;
    auto cols = detail::split_csv_line(line);
    if (cols.size() != 8) throw usage_error("malformed spatial detection row: " + line);
    out.push_back({cols[0], std::stoi(cols[1]), std::stoi(cols[2]),
                   BBox{std::stoi(cols[3]), std::stoi(cols[4]), std::stoi(cols[5]), std::stoi(cols[6])},
                   std::stod(cols[7])});
  }
  return out;
}

inline std::vector<TemporalDetection> read_temporal_det_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw usage_error("cannot open " + path);
  std::vector<TemporalDetection> out;
  std::string line;
  bool first = true;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    if (first && line.rfind("video_id", 0) == 0) {
      first = false;
      continue;
    }
    first = false;
    auto cols = detail::split_csv_line(line);
    if (cols.size() != 5) throw usage_error("malformed temporal detection row: " + line);
    out.push_back({cols[0], std::stoi(cols[1]), Segment{std::stoi(cols[2]), std::stoi(cols[3])}, std::stod(cols[4])});
  }
  return out;
}

inline void write_map_csv(const std::string& path, const std::vector<std::pair<double, double>>& rows) {
  std::ofstream f(path);
  if (!f) throw usage_error("cannot open " + path);
  f << "alpha,map\n";
  for (const auto& [alpha, value] : rows) f << detail::fmt17(alpha) << "," << detail::fmt17(value) << "\n";
}

}  // namespace stav
