#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "stav/localization.hpp"
#include "stav/tensor.hpp"

// Shared test utilities: a central finite-difference gradient oracle that
// only ever evaluates forward passes, and independent brute-force
// re-implementations of the loss terms on plain arrays.

namespace testsupport {

inline double rel_err(double a, double b) {
  const double denom = std::max({std::fabs(a), std::fabs(b), 1e-6});
  return std::fabs(a - b) / denom;
}

// Central difference d f / d x for a scalar forward f re-run per probe.
template <typename EvalFn>
double fd_derivative(double* x, EvalFn eval, double h = 1e-3) {
  const double orig = *x;
  *x = orig + h;
  const double fp = eval();
  *x = orig - h;
  const double fm = eval();
  *x = orig;
  return (fp - fm) / (2.0 * h);
}

struct FdCheck {
  double max_rel = 0.0;
  std::string worst;
};

// Compares analytic gradients (one backward pass) against finite
// differences over every element of every listed tensor. build must run the
// same forward graph on the given tape each call.
template <typename BuildFn>
FdCheck fd_check(const std::vector<std::pair<std::string, stav::Tensor*>>& tensors, BuildFn build, double h = 1e-3) {
  for (const auto& [name, t] : tensors) {
    t->enable_grad();
    t->zero_grad();
  }
  {
    stav::Tape tape;
    stav::Tensor loss = build(tape);
    tape.backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  for (const auto& [name, t] : tensors) analytic.emplace_back(t->grad(), t->grad() + t->size());

  auto eval = [&]() {
    stav::Tape tape;
    tape.set_recording(false);
    return build(tape).value();
  };
  FdCheck r;
  for (std::size_t p = 0; p < tensors.size(); ++p) {
    stav::Tensor* t = tensors[p].second;
    for (std::int64_t i = 0; i < t->size(); ++i) {
      const double fd = fd_derivative(t->data() + i, eval, h);
      const double re = rel_err(analytic[p][static_cast<std::size_t>(i)], fd);
      if (re > r.max_rel) {
        r.max_rel = re;
        r.worst = tensors[p].first + "[" + std::to_string(i) + "]";
      }
    }
  }
  return r;
}

// --- Brute-force loss oracles, transliterated from the defining sums on
// plain row-major arrays (independent of the tensor/autodiff code paths).

inline double tv_brute(const std::vector<std::vector<double>>& masks, int h, int w) {
  double total = 0.0;
  for (const auto& m : masks) {
    for (int j = 0; j < h; ++j)
      for (int k = 0; k < w; ++k) {
        if (j + 1 < h) total += std::fabs(m[static_cast<std::size_t>((j + 1) * w + k)] - m[static_cast<std::size_t>(j * w + k)]);
        if (k + 1 < w) total += std::fabs(m[static_cast<std::size_t>(j * w + k + 1)] - m[static_cast<std::size_t>(j * w + k)]);
      }
  }
  return total;
}

inline double contrast_brute(const std::vector<std::vector<double>>& masks) {
  double total = 0.0;
  for (const auto& m : masks) {
    std::vector<double> b(m.size());
    for (std::size_t i = 0; i < m.size(); ++i) b[i] = m[i] > 0.5 ? 1.0 : 0.0;
    for (std::size_t i = 0; i < m.size(); ++i) total += -0.5 * m[i] * b[i] + 0.5 * m[i] * (1.0 - b[i]);
  }
  return total;
}

inline double unimodal_brute(const std::vector<std::vector<double>>& rows) {
  double total = 0.0;
  for (const auto& w : rows) {
    const int n = static_cast<int>(w.size());
    for (int i = 2; i <= n - 1; ++i) {  // 1-based interior indices of the defining sum
      const double arg = w[static_cast<std::size_t>(i - 2)] * w[static_cast<std::size_t>(i)] -
                         w[static_cast<std::size_t>(i - 1)] * w[static_cast<std::size_t>(i - 1)];
      total += std::max(0.0, arg);
    }
  }
  return total;
}

// Independent single-class AP oracle: the same matching protocol (greedy by
// descending score, best unmatched IoU >= alpha, ties by ground-truth index)
// written over an explicit per-recall-level precision table instead of the
// envelope recursion the library uses.
inline double ap_oracle_single_class(std::vector<stav::TemporalDetection> dets,
                                     const std::vector<stav::TemporalGroundTruth>& gts, double alpha) {
  std::stable_sort(dets.begin(), dets.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
  std::vector<bool> used(gts.size(), false);
  std::vector<int> tp_flags;
  for (const auto& d : dets) {
    int best = -1;
    double best_iou = 0.0;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (used[g] || gts[g].video_id != d.video_id) continue;
      const double v = stav::interval_iou(d.segment, gts[g].segment);
      if (v >= alpha && v > best_iou) {
        best_iou = v;
        best = static_cast<int>(g);
      }
    }
    if (best >= 0) {
      used[static_cast<std::size_t>(best)] = true;
      tp_flags.push_back(1);
    } else {
      tp_flags.push_back(0);
    }
  }
  const double n_gt = static_cast<double>(gts.size());
  std::vector<double> prec, rec;
  int tp = 0;
  for (std::size_t i = 0; i < tp_flags.size(); ++i) {
    tp += tp_flags[i];
    prec.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
    rec.push_back(static_cast<double>(tp) / n_gt);
  }
  double ap = 0.0;
  const int total_tp = tp;
  for (int j = 1; j <= total_tp; ++j) {
    const double r_level = static_cast<double>(j) / n_gt;
    double best_p = 0.0;
    for (std::size_t i = 0; i < prec.size(); ++i)
      if (rec[i] >= r_level - 1e-12) best_p = std::max(best_p, prec[i]);
    ap += best_p / n_gt;
  }
  return ap;
}

}  // namespace testsupport
