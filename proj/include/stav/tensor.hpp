#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "stav/error.hpp"
#include "stav/rng.hpp"

// Dense N-dimensional double tensor with tape-based reverse-mode autodiff.
// Tensors are values: buffers are shared, never mutated by ops. A Tape
// records one backward closure per executed op, in execution order, and
// replays them in exact reverse order. Gradients accumulate (+=) into the
// grad buffers of every tensor whose requires_grad flag is set.

namespace stav {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    validate_shape();
    data_ = std::make_shared<std::vector<double>>(static_cast<std::size_t>(shape_numel(shape_)), 0.0);
  }

  Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)) {
    validate_shape();
    if (static_cast<std::int64_t>(values.size()) != shape_numel(shape_))
      throw dim_error("tensor: " + std::to_string(values.size()) + " values for shape " + shape_str(shape_));
    data_ = std::make_shared<std::vector<double>>(std::move(values));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, double v) {
    Tensor t(std::move(shape));
    std::fill(t.data_->begin(), t.data_->end(), v);
    return t;
  }

  static Tensor ones(Shape shape) { return full(std::move(shape), 1.0); }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  static Tensor random_uniform(Shape shape, Rng& rng, double lo, double hi) {
    Tensor t(std::move(shape));
    for (double& x : *t.data_) x = rng.uniform(lo, hi);
    return t;
  }

  static Tensor random_gaussian(Shape shape, Rng& rng, double mean = 0.0, double stddev = 1.0) {
    Tensor t(std::move(shape));
    for (double& x : *t.data_) x = mean + stddev * rng.gaussian();
    return t;
  }

  bool defined() const { return static_cast<bool>(data_); }
  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::int64_t size() const { return data_ ? static_cast<std::int64_t>(data_->size()) : 0; }

  double* data() { return data_->data(); }
  const double* data() const { return data_->data(); }
  std::vector<double>& values() { return *data_; }
  const std::vector<double>& values() const { return *data_; }

  // Scalar fetch; the tensor must hold exactly one element.
  double value() const {
    if (size() != 1) throw usage_error("value(): tensor has " + std::to_string(size()) + " elements");
    return (*data_)[0];
  }

  double at(std::initializer_list<int> idx) const {
    return (*data_)[static_cast<std::size_t>(linear_index(idx))];
  }

  bool requires_grad() const { return static_cast<bool>(grad_); }

  // Allocates a zeroed same-shape grad accumulator (idempotent).
  void enable_grad() {
    if (!grad_) grad_ = std::make_shared<std::vector<double>>(data_->size(), 0.0);
  }

  double* grad() { return grad_ ? grad_->data() : nullptr; }
  const double* grad() const { return grad_ ? grad_->data() : nullptr; }
  const std::shared_ptr<std::vector<double>>& grad_ptr() const { return grad_; }

  void zero_grad() {
    if (grad_) std::fill(grad_->begin(), grad_->end(), 0.0);
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  std::int64_t linear_index(std::initializer_list<int> idx) const {
    if (static_cast<int>(idx.size()) != rank()) throw dim_error("index rank mismatch");
    std::int64_t lin = 0;
    int d = 0;
    for (int i : idx) {
      if (i < 0 || i >= shape_[static_cast<std::size_t>(d)]) throw dim_error("index out of range on axis " + std::to_string(d));
      lin = lin * shape_[static_cast<std::size_t>(d)] + i;
      ++d;
    }
    return lin;
  }

 private:
  void validate_shape() const {
    if (shape_.empty()) throw dim_error("tensor rank must be >= 1");
    for (std::size_t i = 0; i < shape_.size(); ++i)
      if (shape_[i] <= 0) throw dim_error("non-positive extent on axis " + std::to_string(i));
  }

  Shape shape_;
  std::shared_ptr<std::vector<double>> data_;
  std::shared_ptr<std::vector<double>> grad_;
};

// Records backward closures in execution order. Intermediate (op output)
// grad buffers are registered here so each backward() pass starts them from
// zero; leaf gradients are left alone and therefore accumulate across
// repeated backward() calls.
class Tape {
 public:
  void record(std::function<void()> step) { steps_.push_back(std::move(step)); }

  void register_intermediate(const Tensor& t) { intermediates_.push_back(t.grad_ptr()); }

  bool recording() const { return recording_; }
  void set_recording(bool on) { recording_ = on; }
  std::size_t recorded() const { return steps_.size(); }

  // Seeds d(root)/d(root) = 1 and replays all closures in reverse execution
  // order. root must be scalar-shaped. An untracked root contributes nothing.
  void backward(const Tensor& root) {
    if (root.size() != 1) throw usage_error("backward: root must be a scalar tensor, got shape " + shape_str(root.shape()));
    for (auto& g : intermediates_)
      if (g) std::fill(g->begin(), g->end(), 0.0);
    if (root.grad_ptr()) (*root.grad_ptr())[0] += 1.0;
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
  }

 private:
  std::vector<std::function<void()>> steps_;
  std::vector<std::shared_ptr<std::vector<double>>> intermediates_;
  bool recording_ = true;
};

namespace detail {

inline bool want_grad(const Tape& tape, std::initializer_list<const Tensor*> inputs) {
  if (!tape.recording()) return false;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

inline void track_output(Tape& tape, Tensor& out) {
  out.enable_grad();
  tape.register_intermediate(out);
}

inline void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b))
    throw dim_error(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops (binary ops require identical shapes; no broadcasting).

namespace detail {

template <typename Fwd, typename Bwd>
Tensor binary_op(const char* name, Tape& tape, const Tensor& a, const Tensor& b, Fwd fwd, Bwd bwd) {
  check_same_shape(name, a, b);
  Tensor out(a.shape());
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  const std::int64_t n = a.size();
  for (std::int64_t i = 0; i < n; ++i) po[i] = fwd(pa[i], pb[i]);
  if (want_grad(tape, {&a, &b})) {
    track_output(tape, out);
    tape.record([a, b, out, bwd]() {
      const double* g = out.grad();
      double* ga = const_cast<Tensor&>(a).grad();
      double* gb = const_cast<Tensor&>(b).grad();
      const std::int64_t m = a.size();
      for (std::int64_t i = 0; i < m; ++i) bwd(g[i], a.data()[i], b.data()[i], ga ? ga + i : nullptr, gb ? gb + i : nullptr);
    });
  }
  return out;
}

}  // namespace detail

inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "add", tape, a, b, [](double x, double y) { return x + y; },
      [](double g, double, double, double* ga, double* gb) {
        if (ga) *ga += g;
        if (gb) *gb += g;
      });
}

inline Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "sub", tape, a, b, [](double x, double y) { return x - y; },
      [](double g, double, double, double* ga, double* gb) {
        if (ga) *ga += g;
        if (gb) *gb -= g;
      });
}

inline Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "mul", tape, a, b, [](double x, double y) { return x * y; },
      [](double g, double x, double y, double* ga, double* gb) {
        if (ga) *ga += g * y;
        if (gb) *gb += g * x;
      });
}

namespace detail {

template <typename Fwd, typename Bwd>
Tensor unary_op(Tape& tape, const Tensor& a, Fwd fwd, Bwd bwd_from_in_out) {
  Tensor out(a.shape());
  const double* pa = a.data();
  double* po = out.data();
  const std::int64_t n = a.size();
  for (std::int64_t i = 0; i < n; ++i) po[i] = fwd(pa[i]);
  if (want_grad(tape, {&a})) {
    track_output(tape, out);
    tape.record([a, out, bwd_from_in_out]() {
      const double* g = out.grad();
      double* ga = const_cast<Tensor&>(a).grad();
      if (!ga) return;
      const std::int64_t m = a.size();
      for (std::int64_t i = 0; i < m; ++i) ga[i] += g[i] * bwd_from_in_out(a.data()[i], out.data()[i]);
    });
  }
  return out;
}

}  // namespace detail

inline Tensor sigmoid(Tape& tape, const Tensor& a) {
  return detail::unary_op(
      tape, a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double, double y) { return y * (1.0 - y); });
}

inline Tensor tanh_op(Tape& tape, const Tensor& a) {
  return detail::unary_op(
      tape, a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

// Subgradient 0 at the kink for relu/abs.
inline Tensor relu(Tape& tape, const Tensor& a) {
  return detail::unary_op(
      tape, a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

// max{0, x}; identical to relu, kept as its own name for call-site clarity.
inline Tensor max0(Tape& tape, const Tensor& a) { return relu(tape, a); }

inline Tensor abs_op(Tape& tape, const Tensor& a) {
  return detail::unary_op(
      tape, a, [](double x) { return std::fabs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

inline Tensor scale(Tape& tape, const Tensor& a, double c) {
  return detail::unary_op(
      tape, a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

inline Tensor add_const(Tape& tape, const Tensor& a, double c) {
  return detail::unary_op(
      tape, a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

// ---------------------------------------------------------------------------
// softmax over a length-n vector, computed with max subtraction.

inline Tensor softmax(Tape& tape, const Tensor& v) {
  if (v.rank() != 1) throw dim_error("softmax: expected rank-1 tensor, got " + shape_str(v.shape()));
  const std::int64_t n = v.size();
  const double* pv = v.data();
  for (std::int64_t i = 0; i < n; ++i)
    if (!std::isfinite(pv[i])) throw numeric_error("softmax: non-finite input at index " + std::to_string(i));
  double m = pv[0];
  for (std::int64_t i = 1; i < n; ++i) m = std::max(m, pv[i]);
  Tensor out(v.shape());
  double* po = out.data();
  double denom = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    po[i] = std::exp(pv[i] - m);
    denom += po[i];
  }
  for (std::int64_t i = 0; i < n; ++i) po[i] /= denom;
  if (detail::want_grad(tape, {&v})) {
    detail::track_output(tape, out);
    tape.record([v, out]() {
      double* gv = const_cast<Tensor&>(v).grad();
      if (!gv) return;
      const double* g = out.grad();
      const double* w = out.data();
      const std::int64_t k = v.size();
      double dot = 0.0;
      for (std::int64_t i = 0; i < k; ++i) dot += g[i] * w[i];
      for (std::int64_t i = 0; i < k; ++i) gv[i] += w[i] * (g[i] - dot);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions over an axis set. The result keeps the remaining axes (a full
// reduction yields shape [1]).

enum class Reduce { sum, mean };

inline Tensor reduce(Tape& tape, Reduce op, const Tensor& t, const std::vector<int>& axes) {
  const int r = t.rank();
  std::vector<char> reduced(static_cast<std::size_t>(r), 0);
  for (int a : axes) {
    if (a < 0 || a >= r) throw dim_error("reduce: axis " + std::to_string(a) + " out of range for rank " + std::to_string(r));
    if (reduced[static_cast<std::size_t>(a)]) throw dim_error("reduce: duplicate axis " + std::to_string(a));
    reduced[static_cast<std::size_t>(a)] = 1;
  }
  Shape out_shape;
  std::int64_t count = 1;
  for (int d = 0; d < r; ++d) {
    if (reduced[static_cast<std::size_t>(d)])
      count *= t.dim(d);
    else
      out_shape.push_back(t.dim(d));
  }
  if (out_shape.empty()) out_shape = {1};
  const double inv = (op == Reduce::mean) ? 1.0 / static_cast<double>(count) : 1.0;

  // out_stride[d] is the step in the output for axis d (0 when reduced).
  std::vector<std::int64_t> out_stride(static_cast<std::size_t>(r), 0);
  std::int64_t acc = 1;
  for (int d = r - 1; d >= 0; --d) {
    if (!reduced[static_cast<std::size_t>(d)]) {
      out_stride[static_cast<std::size_t>(d)] = acc;
      acc *= t.dim(d);
    }
  }

  const Shape in_shape = t.shape();
  auto for_each = [in_shape, out_stride, r](auto&& visit) {
    std::vector<int> idx(static_cast<std::size_t>(r), 0);
    std::int64_t n = shape_numel(in_shape);
    std::int64_t out_lin = 0;
    for (std::int64_t lin = 0; lin < n; ++lin) {
      visit(lin, out_lin);
      for (int d = r - 1; d >= 0; --d) {
        auto ud = static_cast<std::size_t>(d);
        if (++idx[ud] < in_shape[ud]) {
          out_lin += out_stride[ud];
          break;
        }
        idx[ud] = 0;
        out_lin -= out_stride[ud] * (in_shape[ud] - 1);
      }
    }
  };

  Tensor out(out_shape);
  {
    const double* pt = t.data();
    double* po = out.data();
    for_each([&](std::int64_t lin, std::int64_t out_lin) { po[out_lin] += pt[lin]; });
    if (op == Reduce::mean)
      for (auto& x : out.values()) x *= inv;
  }
  if (detail::want_grad(tape, {&t})) {
    detail::track_output(tape, out);
    tape.record([t, out, for_each, inv]() {
      double* gt = const_cast<Tensor&>(t).grad();
      if (!gt) return;
      const double* g = out.grad();
      for_each([&](std::int64_t lin, std::int64_t out_lin) { gt[lin] += g[out_lin] * inv; });
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// conv2d: single-image 2-D cross-correlation, NCHW without the batch axis.
// input [C_in,H,W], kernel [C_out,C_in,k,k]. Output extent uses the usual
// floor convention H' = floor((H + 2*padding - k)/stride) + 1.

namespace detail {

struct ConvDims {
  int c_in, h, w, c_out, k, stride, pad, h_out, w_out;
};

inline ConvDims conv_dims(const Tensor& input, const Tensor& kernel, int stride, int padding) {
  if (input.rank() != 3) throw dim_error("conv2d: input must be [C,H,W], got " + shape_str(input.shape()));
  if (kernel.rank() != 4) throw dim_error("conv2d: kernel must be [C_out,C_in,k,k], got " + shape_str(kernel.shape()));
  if (kernel.dim(2) != kernel.dim(3)) throw dim_error("conv2d: kernel must be square (axes 2,3)");
  if (kernel.dim(2) % 2 == 0) throw dim_error("conv2d: kernel size must be odd, got " + std::to_string(kernel.dim(2)));
  if (kernel.dim(1) != input.dim(0))
    throw dim_error("conv2d: input channel axis 0 (" + std::to_string(input.dim(0)) + ") != kernel channel axis 1 (" +
                    std::to_string(kernel.dim(1)) + ")");
  if (stride < 1) throw dim_error("conv2d: stride must be >= 1");
  if (padding < 0) throw dim_error("conv2d: padding must be >= 0");
  ConvDims d;
  d.c_in = input.dim(0);
  d.h = input.dim(1);
  d.w = input.dim(2);
  d.c_out = kernel.dim(0);
  d.k = kernel.dim(2);
  d.stride = stride;
  d.pad = padding;
  d.h_out = (d.h + 2 * padding - d.k) / stride + 1;
  d.w_out = (d.w + 2 * padding - d.k) / stride + 1;
  if (d.h_out < 1 || d.w_out < 1)
    throw dim_error("conv2d: empty output for input " + shape_str(input.shape()) + " kernel " + shape_str(kernel.shape()));
  return d;
}

// Valid output range [lo, hi) for one kernel offset: in-bounds input rows.
inline void conv_span(int koff, int pad, int in_extent, int out_extent, int stride, int& lo, int& hi) {
  int shift = koff - pad;  // in = out*stride + shift
  lo = 0;
  if (shift < 0) lo = (-shift + stride - 1) / stride;
  hi = out_extent;
  int max_excl = in_extent - shift;  // need out*stride < max_excl
  if (max_excl <= 0)
    hi = 0;
  else
    hi = std::min(hi, (max_excl - 1) / stride + 1);
  if (hi < lo) hi = lo;
}

}  // namespace detail

inline Tensor conv2d(Tape& tape, const Tensor& input, const Tensor& kernel, int stride, int padding) {
  const auto d = detail::conv_dims(input, kernel, stride, padding);
  Tensor out({d.c_out, d.h_out, d.w_out});
  {
    const double* in = input.data();
    const double* ker = kernel.data();
    double* o = out.data();
    for (int co = 0; co < d.c_out; ++co)
      for (int ci = 0; ci < d.c_in; ++ci)
        for (int ky = 0; ky < d.k; ++ky) {
          int oy_lo, oy_hi;
          detail::conv_span(ky, d.pad, d.h, d.h_out, d.stride, oy_lo, oy_hi);
          for (int kx = 0; kx < d.k; ++kx) {
            int ox_lo, ox_hi;
            detail::conv_span(kx, d.pad, d.w, d.w_out, d.stride, ox_lo, ox_hi);
            const double wv = ker[((static_cast<std::int64_t>(co) * d.c_in + ci) * d.k + ky) * d.k + kx];
            const int xshift = kx - d.pad;
            for (int oy = oy_lo; oy < oy_hi; ++oy) {
              const int iy = oy * d.stride - d.pad + ky;
              const double* in_row = in + (static_cast<std::int64_t>(ci) * d.h + iy) * d.w;
              double* o_row = o + (static_cast<std::int64_t>(co) * d.h_out + oy) * d.w_out;
              if (d.stride == 1) {
                const double* ir = in_row + xshift;
                for (int ox = ox_lo; ox < ox_hi; ++ox) o_row[ox] += wv * ir[ox];
              } else {
                for (int ox = ox_lo; ox < ox_hi; ++ox) o_row[ox] += wv * in_row[ox * d.stride + xshift];
              }
            }
          }
        }
  }
  if (detail::want_grad(tape, {&input, &kernel})) {
    detail::track_output(tape, out);
    tape.record([input, kernel, out, d]() {
      const double* g = out.grad();
      const double* in = input.data();
      const double* ker = kernel.data();
      double* gin = const_cast<Tensor&>(input).grad();
      double* gker = const_cast<Tensor&>(kernel).grad();
      for (int co = 0; co < d.c_out; ++co)
        for (int ci = 0; ci < d.c_in; ++ci)
          for (int ky = 0; ky < d.k; ++ky) {
            int oy_lo, oy_hi;
            detail::conv_span(ky, d.pad, d.h, d.h_out, d.stride, oy_lo, oy_hi);
            for (int kx = 0; kx < d.k; ++kx) {
              int ox_lo, ox_hi;
              detail::conv_span(kx, d.pad, d.w, d.w_out, d.stride, ox_lo, ox_hi);
              const std::int64_t kidx = ((static_cast<std::int64_t>(co) * d.c_in + ci) * d.k + ky) * d.k + kx;
              const int xshift = kx - d.pad;
              double acc = 0.0;
              const double wv = ker[kidx];
              for (int oy = oy_lo; oy < oy_hi; ++oy) {
                const int iy = oy * d.stride - d.pad + ky;
                const double* in_row = in + (static_cast<std::int64_t>(ci) * d.h + iy) * d.w;
                double* gin_row = gin ? gin + (static_cast<std::int64_t>(ci) * d.h + iy) * d.w : nullptr;
                const double* g_row = g + (static_cast<std::int64_t>(co) * d.h_out + oy) * d.w_out;
                if (gker) {
                  if (d.stride == 1) {
                    const double* ir = in_row + xshift;
                    for (int ox = ox_lo; ox < ox_hi; ++ox) acc += g_row[ox] * ir[ox];
                  } else {
                    for (int ox = ox_lo; ox < ox_hi; ++ox) acc += g_row[ox] * in_row[ox * d.stride + xshift];
                  }
                }
                if (gin) {
                  if (d.stride == 1) {
                    double* gr = gin_row + xshift;
                    for (int ox = ox_lo; ox < ox_hi; ++ox) gr[ox] += wv * g_row[ox];
                  } else {
                    for (int ox = ox_lo; ox < ox_hi; ++ox) gin_row[ox * d.stride + xshift] += wv * g_row[ox];
                  }
                }
              }
              if (gker) gker[kidx] += acc;
            }
          }
    });
  }
  return out;
}

// out[c,h,w] = x[c,h,w] + b[c]
inline Tensor add_channel_bias(Tape& tape, const Tensor& x, const Tensor& b) {
  if (x.rank() != 3) throw dim_error("add_channel_bias: x must be [C,H,W]");
  if (b.rank() != 1 || b.dim(0) != x.dim(0))
    throw dim_error("add_channel_bias: bias " + shape_str(b.shape()) + " vs channels " + std::to_string(x.dim(0)));
  Tensor out(x.shape());
  const int c = x.dim(0);
  const std::int64_t hw = static_cast<std::int64_t>(x.dim(1)) * x.dim(2);
  {
    const double* px = x.data();
    const double* pb = b.data();
    double* po = out.data();
    for (int ci = 0; ci < c; ++ci)
      for (std::int64_t i = 0; i < hw; ++i) po[ci * hw + i] = px[ci * hw + i] + pb[ci];
  }
  if (detail::want_grad(tape, {&x, &b})) {
    detail::track_output(tape, out);
    tape.record([x, b, out, c, hw]() {
      const double* g = out.grad();
      double* gx = const_cast<Tensor&>(x).grad();
      double* gb = const_cast<Tensor&>(b).grad();
      if (gx)
        for (std::int64_t i = 0; i < c * hw; ++i) gx[i] += g[i];
      if (gb)
        for (int ci = 0; ci < c; ++ci) {
          double s = 0.0;
          for (std::int64_t i = 0; i < hw; ++i) s += g[ci * hw + i];
          gb[ci] += s;
        }
    });
  }
  return out;
}

// out[c,h,w] = x[c,h,w] * m[0,h,w] — single-channel mask replicated over
// channels. Used for attended features.
inline Tensor mul_channel_broadcast(Tape& tape, const Tensor& x, const Tensor& m) {
  if (x.rank() != 3 || m.rank() != 3 || m.dim(0) != 1)
    throw dim_error("mul_channel_broadcast: expected x [C,H,W], m [1,H,W]");
  if (x.dim(1) != m.dim(1) || x.dim(2) != m.dim(2))
    throw dim_error("mul_channel_broadcast: spatial mismatch " + shape_str(x.shape()) + " vs " + shape_str(m.shape()));
  Tensor out(x.shape());
  const int c = x.dim(0);
  const std::int64_t hw = static_cast<std::int64_t>(x.dim(1)) * x.dim(2);
  {
    const double* px = x.data();
    const double* pm = m.data();
    double* po = out.data();
    for (int ci = 0; ci < c; ++ci)
      for (std::int64_t i = 0; i < hw; ++i) po[ci * hw + i] = px[ci * hw + i] * pm[i];
  }
  if (detail::want_grad(tape, {&x, &m})) {
    detail::track_output(tape, out);
    tape.record([x, m, out, c, hw]() {
      const double* g = out.grad();
      double* gx = const_cast<Tensor&>(x).grad();
      double* gm = const_cast<Tensor&>(m).grad();
      const double* px = x.data();
      const double* pm = m.data();
      if (gx)
        for (int ci = 0; ci < c; ++ci)
          for (std::int64_t i = 0; i < hw; ++i) gx[ci * hw + i] += g[ci * hw + i] * pm[i];
      if (gm)
        for (std::int64_t i = 0; i < hw; ++i) {
          double s = 0.0;
          for (int ci = 0; ci < c; ++ci) s += g[ci * hw + i] * px[ci * hw + i];
          gm[i] += s;
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batch normalization over the spatial extent of a [C,H,W] tensor.
// Train mode normalizes by per-channel batch statistics (biased variance)
// and optionally updates the running stats; eval mode uses the running stats.

constexpr double kBnEps = 1e-5;
constexpr double kBnMomentum = 0.1;

struct BnStats {
  std::vector<double> mean, var;
  explicit BnStats(int channels = 0) : mean(static_cast<std::size_t>(channels), 0.0), var(static_cast<std::size_t>(channels), 1.0) {}
};

inline Tensor batchnorm2d(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta, BnStats& stats,
                          bool training, bool update_running = true) {
  if (x.rank() != 3) throw dim_error("batchnorm2d: x must be [C,H,W]");
  const int c = x.dim(0);
  if (gamma.rank() != 1 || gamma.dim(0) != c || beta.rank() != 1 || beta.dim(0) != c ||
      static_cast<int>(stats.mean.size()) != c)
    throw dim_error("batchnorm2d: channel count mismatch (C=" + std::to_string(c) + ")");
  const std::int64_t hw = static_cast<std::int64_t>(x.dim(1)) * x.dim(2);
  const double* px = x.data();

  std::vector<double> mu(static_cast<std::size_t>(c)), inv_std(static_cast<std::size_t>(c));
  if (training) {
    for (int ci = 0; ci < c; ++ci) {
      double m = 0.0;
      for (std::int64_t i = 0; i < hw; ++i) m += px[ci * hw + i];
      m /= static_cast<double>(hw);
      double v = 0.0;
      for (std::int64_t i = 0; i < hw; ++i) {
        const double dxx = px[ci * hw + i] - m;
        v += dxx * dxx;
      }
      v /= static_cast<double>(hw);
      mu[static_cast<std::size_t>(ci)] = m;
      inv_std[static_cast<std::size_t>(ci)] = 1.0 / std::sqrt(v + kBnEps);
      if (update_running) {
        stats.mean[static_cast<std::size_t>(ci)] = (1.0 - kBnMomentum) * stats.mean[static_cast<std::size_t>(ci)] + kBnMomentum * m;
        stats.var[static_cast<std::size_t>(ci)] = (1.0 - kBnMomentum) * stats.var[static_cast<std::size_t>(ci)] + kBnMomentum * v;
      }
    }
  } else {
    for (int ci = 0; ci < c; ++ci) {
      mu[static_cast<std::size_t>(ci)] = stats.mean[static_cast<std::size_t>(ci)];
      inv_std[static_cast<std::size_t>(ci)] = 1.0 / std::sqrt(stats.var[static_cast<std::size_t>(ci)] + kBnEps);
    }
  }

  Tensor out(x.shape());
  auto xhat = std::make_shared<std::vector<double>>(static_cast<std::size_t>(c * hw));
  {
    const double* pg = gamma.data();
    const double* pb = beta.data();
    double* po = out.data();
    for (int ci = 0; ci < c; ++ci)
      for (std::int64_t i = 0; i < hw; ++i) {
        const double xh = (px[ci * hw + i] - mu[static_cast<std::size_t>(ci)]) * inv_std[static_cast<std::size_t>(ci)];
        (*xhat)[static_cast<std::size_t>(ci * hw + i)] = xh;
        po[ci * hw + i] = pg[ci] * xh + pb[ci];
      }
  }
  if (detail::want_grad(tape, {&x, &gamma, &beta})) {
    detail::track_output(tape, out);
    tape.record([x, gamma, beta, out, xhat, inv_std, c, hw, training]() {
      const double* g = out.grad();
      double* gx = const_cast<Tensor&>(x).grad();
      double* gg = const_cast<Tensor&>(gamma).grad();
      double* gb = const_cast<Tensor&>(beta).grad();
      const double* pg = gamma.data();
      for (int ci = 0; ci < c; ++ci) {
        double sum_g = 0.0, sum_gx = 0.0;
        for (std::int64_t i = 0; i < hw; ++i) {
          sum_g += g[ci * hw + i];
          sum_gx += g[ci * hw + i] * (*xhat)[static_cast<std::size_t>(ci * hw + i)];
        }
        if (gb) gb[ci] += sum_g;
        if (gg) gg[ci] += sum_gx;
        if (gx) {
          const double a = pg[ci] * inv_std[static_cast<std::size_t>(ci)];
          if (training) {
            const double mean_g = sum_g / static_cast<double>(hw);
            const double mean_gx = sum_gx / static_cast<double>(hw);
            for (std::int64_t i = 0; i < hw; ++i)
              gx[ci * hw + i] += a * (g[ci * hw + i] - mean_g - (*xhat)[static_cast<std::size_t>(ci * hw + i)] * mean_gx);
          } else {
            for (std::int64_t i = 0; i < hw; ++i) gx[ci * hw + i] += a * g[ci * hw + i];
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Affine map y = W x + b with W [out,in], x [in], b [out].

inline Tensor linear(Tape& tape, const Tensor& weight, const Tensor& x, const Tensor& bias) {
  if (weight.rank() != 2 || x.rank() != 1 || bias.rank() != 1)
    throw dim_error("linear: expected W [out,in], x [in], b [out]");
  const int out_n = weight.dim(0), in_n = weight.dim(1);
  if (x.dim(0) != in_n || bias.dim(0) != out_n)
    throw dim_error("linear: W " + shape_str(weight.shape()) + " x " + shape_str(x.shape()) + " b " + shape_str(bias.shape()));
  Tensor out({out_n});
  {
    const double* pw = weight.data();
    const double* px = x.data();
    const double* pb = bias.data();
    double* po = out.data();
    for (int o = 0; o < out_n; ++o) {
      double s = pb[o];
      const double* row = pw + static_cast<std::int64_t>(o) * in_n;
      for (int i = 0; i < in_n; ++i) s += row[i] * px[i];
      po[o] = s;
    }
  }
  if (detail::want_grad(tape, {&weight, &x, &bias})) {
    detail::track_output(tape, out);
    tape.record([weight, x, bias, out, out_n, in_n]() {
      const double* g = out.grad();
      double* gw = const_cast<Tensor&>(weight).grad();
      double* gx = const_cast<Tensor&>(x).grad();
      double* gb = const_cast<Tensor&>(bias).grad();
      const double* pw = weight.data();
      const double* px = x.data();
      for (int o = 0; o < out_n; ++o) {
        if (gb) gb[o] += g[o];
        const double* row = pw + static_cast<std::int64_t>(o) * in_n;
        double* grow = gw ? gw + static_cast<std::int64_t>(o) * in_n : nullptr;
        for (int i = 0; i < in_n; ++i) {
          if (grow) grow[i] += g[o] * px[i];
          if (gx) gx[i] += g[o] * row[i];
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Structural ops.

// Concatenates rank-1 tensors into one vector.
inline Tensor concat1d(Tape& tape, const std::vector<Tensor>& parts) {
  if (parts.empty()) throw dim_error("concat1d: empty input list");
  int total = 0;
  bool track = false;
  for (const auto& p : parts) {
    if (p.rank() != 1) throw dim_error("concat1d: all parts must be rank-1");
    total += p.dim(0);
    track = track || p.requires_grad();
  }
  Tensor out({total});
  {
    double* po = out.data();
    for (const auto& p : parts) {
      std::copy(p.data(), p.data() + p.size(), po);
      po += p.size();
    }
  }
  if (tape.recording() && track) {
    detail::track_output(tape, out);
    tape.record([parts, out]() {
      const double* g = out.grad();
      std::int64_t off = 0;
      for (const auto& p : parts) {
        double* gp = const_cast<Tensor&>(p).grad();
        if (gp)
          for (std::int64_t i = 0; i < p.size(); ++i) gp[i] += g[off + i];
        off += p.size();
      }
    });
  }
  return out;
}

// Stacks m equal-length vectors into an [m,n] matrix.
inline Tensor stack_rows(Tape& tape, const std::vector<Tensor>& rows) {
  if (rows.empty()) throw dim_error("stack_rows: empty input list");
  const int n = rows[0].dim(0);
  bool track = false;
  for (const auto& r : rows) {
    if (r.rank() != 1 || r.dim(0) != n) throw dim_error("stack_rows: rows must be rank-1 of equal length");
    track = track || r.requires_grad();
  }
  Tensor out({static_cast<int>(rows.size()), n});
  for (std::size_t t = 0; t < rows.size(); ++t)
    std::copy(rows[t].data(), rows[t].data() + n, out.data() + static_cast<std::int64_t>(t) * n);
  if (tape.recording() && track) {
    detail::track_output(tape, out);
    tape.record([rows, out, n]() {
      const double* g = out.grad();
      for (std::size_t t = 0; t < rows.size(); ++t) {
        double* gr = const_cast<Tensor&>(rows[t]).grad();
        if (gr)
          for (int i = 0; i < n; ++i) gr[i] += g[static_cast<std::int64_t>(t) * n + i];
      }
    });
  }
  return out;
}

// Concatenates two [C,H,W] tensors along the channel axis.
inline Tensor concat_channels(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2))
    throw dim_error("concat_channels: spatial mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out({a.dim(0) + b.dim(0), a.dim(1), a.dim(2)});
  std::copy(a.data(), a.data() + a.size(), out.data());
  std::copy(b.data(), b.data() + b.size(), out.data() + a.size());
  if (detail::want_grad(tape, {&a, &b})) {
    detail::track_output(tape, out);
    tape.record([a, b, out]() {
      const double* g = out.grad();
      double* ga = const_cast<Tensor&>(a).grad();
      double* gb = const_cast<Tensor&>(b).grad();
      if (ga)
        for (std::int64_t i = 0; i < a.size(); ++i) ga[i] += g[i];
      if (gb)
        for (std::int64_t i = 0; i < b.size(); ++i) gb[i] += g[a.size() + i];
    });
  }
  return out;
}

// out = prefactor * sum_i w[i] * frames[i]; all frames share one shape.
inline Tensor weighted_sum(Tape& tape, const Tensor& w, const std::vector<Tensor>& frames, double prefactor = 1.0) {
  if (frames.empty()) throw dim_error("weighted_sum: empty frame list");
  if (w.rank() != 1 || w.dim(0) != static_cast<int>(frames.size()))
    throw dim_error("weighted_sum: weight length " + std::to_string(w.size()) + " != frame count " +
                    std::to_string(frames.size()));
  for (const auto& f : frames) detail::check_same_shape("weighted_sum", frames[0], f);
  Tensor out(frames[0].shape());
  const std::int64_t n = out.size();
  {
    double* po = out.data();
    for (std::size_t i = 0; i < frames.size(); ++i) {
      const double c = prefactor * w.data()[i];
      const double* pf = frames[i].data();
      for (std::int64_t j = 0; j < n; ++j) po[j] += c * pf[j];
    }
  }
  bool track = w.requires_grad();
  for (const auto& f : frames) track = track || f.requires_grad();
  if (tape.recording() && track) {
    detail::track_output(tape, out);
    tape.record([w, frames, out, prefactor, n]() {
      const double* g = out.grad();
      double* gw = const_cast<Tensor&>(w).grad();
      for (std::size_t i = 0; i < frames.size(); ++i) {
        double* gf = const_cast<Tensor&>(frames[i]).grad();
        const double* pf = frames[i].data();
        if (gw) {
          double s = 0.0;
          for (std::int64_t j = 0; j < n; ++j) s += g[j] * pf[j];
          gw[i] += prefactor * s;
        }
        if (gf) {
          const double c = prefactor * w.data()[i];
          for (std::int64_t j = 0; j < n; ++j) gf[j] += c * g[j];
        }
      }
    });
  }
  return out;
}

// Arithmetic mean of a list of same-shape tensors.
inline Tensor average(Tape& tape, const std::vector<Tensor>& parts) {
  if (parts.empty()) throw dim_error("average: empty input list");
  for (const auto& p : parts) detail::check_same_shape("average", parts[0], p);
  Tensor out(parts[0].shape());
  const std::int64_t n = out.size();
  const double inv = 1.0 / static_cast<double>(parts.size());
  {
    double* po = out.data();
    for (const auto& p : parts) {
      const double* pp = p.data();
      for (std::int64_t j = 0; j < n; ++j) po[j] += pp[j];
    }
    for (std::int64_t j = 0; j < n; ++j) po[j] *= inv;
  }
  bool track = false;
  for (const auto& p : parts) track = track || p.requires_grad();
  if (tape.recording() && track) {
    detail::track_output(tape, out);
    tape.record([parts, out, inv, n]() {
      const double* g = out.grad();
      for (const auto& p : parts) {
        double* gp = const_cast<Tensor&>(p).grad();
        if (gp)
          for (std::int64_t j = 0; j < n; ++j) gp[j] += inv * g[j];
      }
    });
  }
  return out;
}

}  // namespace stav
