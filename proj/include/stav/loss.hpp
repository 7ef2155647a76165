#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "stav/tensor.hpp"

// Composite training objective: cross entropy plus total-variation,
// contrast and unimodality regularizers, each a fused differentiable op.

namespace stav {

struct LossWeights {
  double tv = 1e-5;
  double contrast = 1e-4;
  double unimodal = 1.0;
};

struct LossBreakdown {
  double ce = 0.0, tv = 0.0, contrast = 0.0, unimodal = 0.0, total = 0.0;
  Tensor node;  // scalar total, backward entry point
};

// -log softmax(logits)[label], stable via log-sum-exp.
inline Tensor cross_entropy(Tape& tape, const Tensor& logits, int label) {
  if (logits.rank() != 1) throw dim_error("cross_entropy: logits must be rank-1");
  const int k = logits.dim(0);
  if (label < 0 || label >= k)
    throw usage_error("cross_entropy: label " + std::to_string(label) + " out of range for K=" + std::to_string(k));
  const double* pl = logits.data();
  double m = pl[0];
  for (int i = 1; i < k; ++i) m = std::max(m, pl[i]);
  double sum_exp = 0.0;
  for (int i = 0; i < k; ++i) sum_exp += std::exp(pl[i] - m);
  const double lse = m + std::log(sum_exp);
  Tensor out = Tensor::scalar(lse - pl[label]);
  if (detail::want_grad(tape, {&logits})) {
    detail::track_output(tape, out);
    tape.record([logits, out, label, m, lse]() {
      double* gl = const_cast<Tensor&>(logits).grad();
      if (!gl) return;
      const double g = out.grad()[0];
      const double* pl2 = logits.data();
      for (int i = 0; i < logits.dim(0); ++i) {
        const double soft = std::exp(pl2[i] - lse);
        gl[i] += g * (soft - (i == label ? 1.0 : 0.0));
      }
    });
  }
  return out;
}

// Sum over masks of absolute differences between vertical and horizontal
// neighbors; out-of-range neighbor pairs at the border are dropped.
// Subgradient 0 where neighbors are exactly equal.
inline Tensor tv_loss(Tape& tape, const std::vector<Tensor>& masks) {
  double total = 0.0;
  bool track = false;
  for (const auto& m : masks) {
    if (m.rank() != 3 || m.dim(0) != 1) throw dim_error("tv_loss: masks must be [1,H,W]");
    detail::check_same_shape("tv_loss", masks[0], m);
    track = track || m.requires_grad();
    const int h = m.dim(1), w = m.dim(2);
    const double* p = m.data();
    for (int y = 0; y + 1 < h; ++y)
      for (int x = 0; x < w; ++x) total += std::fabs(p[(y + 1) * w + x] - p[y * w + x]);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x + 1 < w; ++x) total += std::fabs(p[y * w + x + 1] - p[y * w + x]);
  }
  Tensor out = Tensor::scalar(total);
  if (tape.recording() && track) {
    detail::track_output(tape, out);
    tape.record([masks, out]() {
      const double g = out.grad()[0];
      for (const auto& m : masks) {
        double* gm = const_cast<Tensor&>(m).grad();
        if (!gm) continue;
        const int h = m.dim(1), w = m.dim(2);
        const double* p = m.data();
        auto sgn = [](double d) { return d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0); };
        for (int y = 0; y + 1 < h; ++y)
          for (int x = 0; x < w; ++x) {
            const double s = sgn(p[(y + 1) * w + x] - p[y * w + x]);
            gm[(y + 1) * w + x] += g * s;
            gm[y * w + x] -= g * s;
          }
        for (int y = 0; y < h; ++y)
          for (int x = 0; x + 1 < w; ++x) {
            const double s = sgn(p[y * w + x + 1] - p[y * w + x]);
            gm[y * w + x + 1] += g * s;
            gm[y * w + x] -= g * s;
          }
      }
    });
  }
  return out;
}

// B = 1{M > 0.5}, strict. Exposed for tests and evaluation.
inline std::vector<double> binarize_mask(const Tensor& m, double threshold = 0.5) {
  std::vector<double> b(static_cast<std::size_t>(m.size()));
  for (std::int64_t i = 0; i < m.size(); ++i) b[static_cast<std::size_t>(i)] = m.data()[i] > threshold ? 1.0 : 0.0;
  return b;
}

// sum_i sum_px [-1/2 M*B + 1/2 M*(1-B)] with B = 1{M > 0.5} held constant:
// entries above the threshold are pulled toward 1, the rest toward 0.
inline Tensor contrast_loss(Tape& tape, const std::vector<Tensor>& masks) {
  double total = 0.0;
  bool track = false;
  for (const auto& m : masks) {
    if (m.rank() != 3 || m.dim(0) != 1) throw dim_error("contrast_loss: masks must be [1,H,W]");
    track = track || m.requires_grad();
    const double* p = m.data();
    for (std::int64_t i = 0; i < m.size(); ++i) total += p[i] > 0.5 ? -0.5 * p[i] : 0.5 * p[i];
  }
  Tensor out = Tensor::scalar(total);
  if (tape.recording() && track) {
    detail::track_output(tape, out);
    tape.record([masks, out]() {
      const double g = out.grad()[0];
      for (const auto& m : masks) {
        double* gm = const_cast<Tensor&>(m).grad();
        if (!gm) continue;
        const double* p = m.data();
        for (std::int64_t i = 0; i < m.size(); ++i) gm[i] += g * (p[i] > 0.5 ? -0.5 : 0.5);
      }
    });
  }
  return out;
}

// sum_t sum_{interior i} max{0, w[t,i-1]*w[t,i+1] - w[t,i]^2} over the rows
// of an attention matrix; gradient flows only through active terms.
inline Tensor unimodal_loss(Tape& tape, const Tensor& w) {
  if (w.rank() != 2) throw dim_error("unimodal_loss: expected [T,n] matrix");
  const int t_n = w.dim(0), n = w.dim(1);
  double total = 0.0;
  const double* p = w.data();
  for (int t = 0; t < t_n; ++t)
    for (int i = 1; i + 1 < n; ++i) {
      const double excess = p[t * n + i - 1] * p[t * n + i + 1] - p[t * n + i] * p[t * n + i];
      if (excess > 0.0) total += excess;
    }
  Tensor out = Tensor::scalar(total);
  if (detail::want_grad(tape, {&w}) && n >= 3) {
    detail::track_output(tape, out);
    tape.record([w, out, t_n, n]() {
      double* gw = const_cast<Tensor&>(w).grad();
      if (!gw) return;
      const double g = out.grad()[0];
      const double* p2 = w.data();
      for (int t = 0; t < t_n; ++t)
        for (int i = 1; i + 1 < n; ++i) {
          const double excess = p2[t * n + i - 1] * p2[t * n + i + 1] - p2[t * n + i] * p2[t * n + i];
          if (excess > 0.0) {
            gw[t * n + i - 1] += g * p2[t * n + i + 1];
            gw[t * n + i + 1] += g * p2[t * n + i - 1];
            gw[t * n + i] -= g * 2.0 * p2[t * n + i];
          }
        }
    });
  }
  return out;
}

// Weighted total; one backward() from .node yields all gradients.
inline LossBreakdown total_loss(Tape& tape, const Tensor& logits, int label, const std::vector<Tensor>& masks,
                                const Tensor& attention, const LossWeights& lambda) {
  LossBreakdown b;
  Tensor ce = cross_entropy(tape, logits, label);
  Tensor tv = tv_loss(tape, masks);
  Tensor contrast = contrast_loss(tape, masks);
  Tensor unimodal = unimodal_loss(tape, attention);
  b.ce = ce.value();
  b.tv = tv.value();
  b.contrast = contrast.value();
  b.unimodal = unimodal.value();
  Tensor total = add(tape, ce, scale(tape, tv, lambda.tv));
  total = add(tape, total, scale(tape, contrast, lambda.contrast));
  total = add(tape, total, scale(tape, unimodal, lambda.unimodal));
  b.total = total.value();
  b.node = total;
  return b;
}

}  // namespace stav
