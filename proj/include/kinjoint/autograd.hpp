#pragma once

// Reverse-mode differentiation. Ops are free functions that compute the
// forward value and, when a tape is active and some input requires grad,
// record a backward closure. backward() replays the tape in reverse.
//
// Layout conventions: images and feature maps are NCHW; matmul operates on
// 2-d tensors. A tape is single-threaded; independent tapes may run in
// parallel threads (the active tape is thread-local).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "kinjoint/tensor.hpp"

namespace kinjoint {

// Floor applied to probabilities inside cross-entropy; bounds the loss and
// keeps early training free of infinities.
inline constexpr double kLogFloor = 1e-12;

class GradTape {
 public:
  using BackwardFn = std::function<void()>;

  void record(std::shared_ptr<TensorNode> output,
              std::vector<std::shared_ptr<TensorNode>> inputs, BackwardFn fn) {
    entries_.push_back({std::move(output), std::move(inputs), std::move(fn)});
  }

  void clear() { entries_.clear(); }
  std::size_t size() const { return entries_.size(); }

  struct Entry {
    std::shared_ptr<TensorNode> output;
    std::vector<std::shared_ptr<TensorNode>> inputs;
    BackwardFn fn;
  };
  const std::vector<Entry>& entries() const { return entries_; }

 private:
  std::vector<Entry> entries_;
};

inline GradTape*& active_tape() {
  thread_local GradTape* tape = nullptr;
  return tape;
}

// RAII: makes `tape` the active tape on this thread for the scope's lifetime.
class TapeScope {
 public:
  explicit TapeScope(GradTape& tape) : prev_(active_tape()) {
    active_tape() = &tape;
  }
  ~TapeScope() { active_tape() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  GradTape* prev_;
};

class NoGradScope {
 public:
  NoGradScope() : prev_(active_tape()) { active_tape() = nullptr; }
  ~NoGradScope() { active_tape() = prev_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  GradTape* prev_;
};

namespace detail {

inline bool any_requires_grad(std::initializer_list<const Tensor*> ts) {
  for (const Tensor* t : ts)
    if (t->requires_grad()) return true;
  return false;
}

// Records op on the active tape and marks the output differentiable.
inline void record_op(Tensor& out, std::vector<std::shared_ptr<TensorNode>> in,
                      GradTape::BackwardFn fn) {
  GradTape* tape = active_tape();
  if (!tape) return;
  out.set_requires_grad(true);
  tape->record(out.node(), std::move(in), std::move(fn));
}

[[noreturn]] inline void op_shape_error(const std::string& op,
                                        const std::string& detail) {
  throw std::runtime_error(op + ": " + detail);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise and broadcasting ops
// ---------------------------------------------------------------------------

// add supports equal shapes, a scalar rhs, or a rhs matching the last axis of
// lhs (row-vector bias broadcast).
inline Tensor add(const Tensor& a, const Tensor& b) {
  enum class Mode { Equal, Scalar, LastAxis } mode;
  if (a.shape() == b.shape())
    mode = Mode::Equal;
  else if (b.numel() == 1)
    mode = Mode::Scalar;
  else if (b.dim() == 1 && b.shape()[0] == a.shape().back())
    mode = Mode::LastAxis;
  else
    detail::op_shape_error("add", "incompatible shapes " + shape_str(a.shape()) +
                                      " and " + shape_str(b.shape()));

  Tensor out(a.shape());
  const std::int64_t n = a.numel();
  const std::int64_t last = a.shape().back();
  for (std::int64_t i = 0; i < n; ++i) {
    double bv = mode == Mode::Equal  ? b[i]
                : mode == Mode::Scalar ? b[0]
                                       : b[i % last];
    out[i] = a[i] + bv;
  }

  if (detail::any_requires_grad({&a, &b})) {
    auto an = a.node(), bn = b.node(), on = out.node();
    detail::record_op(out, {an, bn}, [an, bn, on, mode, n, last]() {
      const std::vector<double>& g = on->grad;
      if (an->requires_grad) {
        ensure_grad(an);
        for (std::int64_t i = 0; i < n; ++i) an->grad[i] += g[i];
      }
      if (bn->requires_grad) {
        ensure_grad(bn);
        for (std::int64_t i = 0; i < n; ++i) {
          std::int64_t j = mode == Mode::Equal ? i
                           : mode == Mode::Scalar ? 0
                                                  : i % last;
          bn->grad[j] += g[i];
        }
      }
    });
  }
  return out;
}

// mul supports equal shapes or a scalar rhs.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  const bool scalar_rhs = b.numel() == 1 && a.shape() != b.shape();
  if (!scalar_rhs && a.shape() != b.shape())
    detail::op_shape_error("mul", "incompatible shapes " + shape_str(a.shape()) +
                                      " and " + shape_str(b.shape()));
  Tensor out(a.shape());
  const std::int64_t n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) out[i] = a[i] * (scalar_rhs ? b[0] : b[i]);

  if (detail::any_requires_grad({&a, &b})) {
    auto an = a.node(), bn = b.node(), on = out.node();
    detail::record_op(out, {an, bn}, [an, bn, on, scalar_rhs, n]() {
      const std::vector<double>& g = on->grad;
      if (an->requires_grad) {
        ensure_grad(an);
        for (std::int64_t i = 0; i < n; ++i)
          an->grad[i] += g[i] * (scalar_rhs ? bn->data[0] : bn->data[i]);
      }
      if (bn->requires_grad) {
        ensure_grad(bn);
        for (std::int64_t i = 0; i < n; ++i)
          bn->grad[scalar_rhs ? 0 : i] += g[i] * an->data[i];
      }
    });
  }
  return out;
}

namespace detail {

template <typename Fwd, typename Dfn>
Tensor unary_op(const Tensor& x, Fwd f, Dfn dfn) {
  Tensor out(x.shape());
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) out[i] = f(x[i]);
  if (x.requires_grad()) {
    auto xn = x.node(), on = out.node();
    record_op(out, {xn}, [xn, on, dfn, n]() {
      ensure_grad(xn);
      for (std::int64_t i = 0; i < n; ++i)
        xn->grad[i] += on->grad[i] * dfn(xn->data[i], on->data[i]);
    });
  }
  return out;
}

}  // namespace detail

inline Tensor relu(const Tensor& x) {
  return detail::unary_op(
      x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary_op(
      x,
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

inline Tensor log(const Tensor& x) {
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i)
    if (!(x[i] > 0.0))
      throw std::runtime_error("log: nonpositive input " + std::to_string(x[i]) +
                               " at index " + std::to_string(i));
  return detail::unary_op(
      x, [](double v) { return std::log(v); },
      [](double v, double) { return 1.0 / v; });
}

inline Tensor exp(const Tensor& x) {
  return detail::unary_op(
      x, [](double v) { return std::exp(v); },
      [](double, double y) { return y; });
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.dim() != 2 || b.dim() != 2 || a.shape()[1] != b.shape()[0])
    detail::op_shape_error("matmul", "expected [m,k]x[k,n], got " +
                                         shape_str(a.shape()) + " and " +
                                         shape_str(b.shape()));
  const int m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  Tensor out({m, n});
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  for (int i = 0; i < m; ++i)
    for (int l = 0; l < k; ++l) {
      const double av = pa[i * k + l];
      if (av == 0.0) continue;
      const double* brow = pb + l * n;
      double* orow = po + i * n;
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }

  if (detail::any_requires_grad({&a, &b})) {
    auto an = a.node(), bn = b.node(), on = out.node();
    detail::record_op(out, {an, bn}, [an, bn, on, m, k, n]() {
      const double* g = on->grad.data();
      if (an->requires_grad) {
        ensure_grad(an);
        // gA = g . B^T
        for (int i = 0; i < m; ++i)
          for (int l = 0; l < k; ++l) {
            double acc = 0.0;
            const double* grow = g + i * n;
            const double* brow = bn->data.data() + l * n;
            for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
            an->grad[i * k + l] += acc;
          }
      }
      if (bn->requires_grad) {
        ensure_grad(bn);
        // gB = A^T . g
        for (int i = 0; i < m; ++i) {
          const double* arow = an->data.data() + i * k;
          const double* grow = g + i * n;
          for (int l = 0; l < k; ++l) {
            const double av = arow[l];
            if (av == 0.0) continue;
            double* brow = bn->grad.data() + l * n;
            for (int j = 0; j < n; ++j) brow[j] += av * grow[j];
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// convolution / pooling / resampling (NCHW)
// ---------------------------------------------------------------------------

namespace detail {

struct ConvDims {
  int n, c, h, w;        // input
  int f, kh, kw;         // kernel
  int stride, pad;
  int ho, wo;            // output
};

inline ConvDims conv_dims(const char* op, const Tensor& x, const Tensor& kernel,
                          int stride, int pad) {
  if (x.dim() != 4 || kernel.dim() != 4)
    op_shape_error(op, "expected 4-d input and kernel, got " +
                           shape_str(x.shape()) + " and " +
                           shape_str(kernel.shape()));
  ConvDims d{};
  d.n = x.shape()[0];
  d.c = x.shape()[1];
  d.h = x.shape()[2];
  d.w = x.shape()[3];
  d.f = kernel.shape()[0];
  d.kh = kernel.shape()[2];
  d.kw = kernel.shape()[3];
  d.stride = stride;
  d.pad = pad;
  if (kernel.shape()[1] != d.c)
    op_shape_error(op, "kernel channels " + std::to_string(kernel.shape()[1]) +
                           " do not match input channels " +
                           std::to_string(d.c) + " (input " +
                           shape_str(x.shape()) + ", kernel " +
                           shape_str(kernel.shape()) + ")");
  if (stride < 1) op_shape_error(op, "stride must be >= 1");
  if (pad < 0) op_shape_error(op, "padding must be >= 0");
  d.ho = (d.h + 2 * pad - d.kh) / stride + 1;
  d.wo = (d.w + 2 * pad - d.kw) / stride + 1;
  if (d.h + 2 * pad < d.kh || d.w + 2 * pad < d.kw)
    op_shape_error(op, "kernel " + shape_str(kernel.shape()) +
                           " larger than padded input " + shape_str(x.shape()));
  return d;
}

// Range of output positions o with 0 <= o*stride + k - pad < limit.
inline void conv_range(int k, int pad, int stride, int limit, int out_limit,
                       int& lo, int& hi) {
  int a = pad - k;  // need o*stride >= a
  lo = a <= 0 ? 0 : (a + stride - 1) / stride;
  int b = limit - 1 + pad - k;  // need o*stride <= b
  hi = b < 0 ? 0 : std::min(out_limit, b / stride + 1);
  if (hi < lo) hi = lo;
}

}  // namespace detail

// conv2d with optional per-filter bias. x: [N,C,H,W], kernel: [F,C,KH,KW],
// bias: [F] or undefined.
inline Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias,
                     int stride = 1, int pad = 0) {
  const detail::ConvDims d = detail::conv_dims("conv2d", x, kernel, stride, pad);
  const bool has_bias = bias.defined();
  if (has_bias && (bias.dim() != 1 || bias.shape()[0] != d.f))
    detail::op_shape_error("conv2d", "bias shape " + shape_str(bias.shape()) +
                                         " does not match filter count " +
                                         std::to_string(d.f));

  Tensor out({d.n, d.f, d.ho, d.wo});
  const double* px = x.data();
  const double* pk = kernel.data();
  double* po = out.data();

  for (int n = 0; n < d.n; ++n)
    for (int f = 0; f < d.f; ++f) {
      double* oplane = po + (static_cast<std::int64_t>(n) * d.f + f) * d.ho * d.wo;
      if (has_bias) {
        const double bv = bias[f];
        for (int i = 0; i < d.ho * d.wo; ++i) oplane[i] = bv;
      }
      for (int c = 0; c < d.c; ++c) {
        const double* xplane =
            px + (static_cast<std::int64_t>(n) * d.c + c) * d.h * d.w;
        const double* kbase =
            pk + (static_cast<std::int64_t>(f) * d.c + c) * d.kh * d.kw;
        for (int kh = 0; kh < d.kh; ++kh) {
          int oh_lo, oh_hi;
          detail::conv_range(kh, d.pad, d.stride, d.h, d.ho, oh_lo, oh_hi);
          for (int kw = 0; kw < d.kw; ++kw) {
            const double kv = kbase[kh * d.kw + kw];
            if (kv == 0.0) continue;
            int ow_lo, ow_hi;
            detail::conv_range(kw, d.pad, d.stride, d.w, d.wo, ow_lo, ow_hi);
            for (int oh = oh_lo; oh < oh_hi; ++oh) {
              const double* xrow =
                  xplane + (oh * d.stride + kh - d.pad) * d.w + kw - d.pad;
              double* orow = oplane + oh * d.wo;
              for (int ow = ow_lo; ow < ow_hi; ++ow)
                orow[ow] += kv * xrow[ow * d.stride];
            }
          }
        }
      }
    }

  const bool rq = has_bias ? detail::any_requires_grad({&x, &kernel, &bias})
                           : detail::any_requires_grad({&x, &kernel});
  if (rq) {
    auto xn = x.node(), kn = kernel.node(), on = out.node();
    auto bn = has_bias ? bias.node() : nullptr;
    std::vector<std::shared_ptr<TensorNode>> ins{xn, kn};
    if (bn) ins.push_back(bn);
    detail::record_op(out, std::move(ins), [xn, kn, bn, on, d]() {
      const double* g = on->grad.data();
      const bool gx = xn->requires_grad;
      const bool gk = kn->requires_grad;
      const bool gb = bn && bn->requires_grad;
      if (gx) ensure_grad(xn);
      if (gk) ensure_grad(kn);
      if (gb) ensure_grad(bn);
      for (int n = 0; n < d.n; ++n)
        for (int f = 0; f < d.f; ++f) {
          const double* gplane =
              g + (static_cast<std::int64_t>(n) * d.f + f) * d.ho * d.wo;
          if (gb) {
            double acc = 0.0;
            for (int i = 0; i < d.ho * d.wo; ++i) acc += gplane[i];
            bn->grad[f] += acc;
          }
          if (!gx && !gk) continue;
          for (int c = 0; c < d.c; ++c) {
            const double* xplane =
                xn->data.data() +
                (static_cast<std::int64_t>(n) * d.c + c) * d.h * d.w;
            double* gxplane =
                gx ? xn->grad.data() +
                         (static_cast<std::int64_t>(n) * d.c + c) * d.h * d.w
                   : nullptr;
            const std::int64_t koff =
                (static_cast<std::int64_t>(f) * d.c + c) * d.kh * d.kw;
            for (int kh = 0; kh < d.kh; ++kh) {
              int oh_lo, oh_hi;
              detail::conv_range(kh, d.pad, d.stride, d.h, d.ho, oh_lo, oh_hi);
              for (int kw = 0; kw < d.kw; ++kw) {
                int ow_lo, ow_hi;
                detail::conv_range(kw, d.pad, d.stride, d.w, d.wo, ow_lo, ow_hi);
                const double kv = kn->data[koff + kh * d.kw + kw];
                double kacc = 0.0;
                for (int oh = oh_lo; oh < oh_hi; ++oh) {
                  const int ih = oh * d.stride + kh - d.pad;
                  const double* grow = gplane + oh * d.wo;
                  const double* xrow = xplane + ih * d.w + kw - d.pad;
                  double* gxrow = gx ? gxplane + ih * d.w + kw - d.pad : nullptr;
                  for (int ow = ow_lo; ow < ow_hi; ++ow) {
                    const double gv = grow[ow];
                    if (gk) kacc += gv * xrow[ow * d.stride];
                    if (gx) gxrow[ow * d.stride] += gv * kv;
                  }
                }
                if (gk) kn->grad[koff + kh * d.kw + kw] += kacc;
              }
            }
          }
        }
    });
  }
  return out;
}

inline Tensor conv2d(const Tensor& x, const Tensor& kernel, int stride = 1,
                     int pad = 0) {
  return conv2d(x, kernel, Tensor(), stride, pad);
}

// Max pooling over kernel x kernel windows; gradient routes to the first
// maximal element of each window (row-major scan order).
inline Tensor maxpool2d(const Tensor& x, int kernel, int stride = 0) {
  if (x.dim() != 4)
    detail::op_shape_error("maxpool2d",
                           "expected 4-d input, got " + shape_str(x.shape()));
  if (stride == 0) stride = kernel;
  if (kernel < 1 || stride < 1)
    detail::op_shape_error("maxpool2d", "kernel and stride must be >= 1");
  const int n = x.shape()[0], c = x.shape()[1], h = x.shape()[2],
            w = x.shape()[3];
  if (h < kernel || w < kernel)
    detail::op_shape_error("maxpool2d", "window " + std::to_string(kernel) +
                                            " larger than input " +
                                            shape_str(x.shape()));
  const int ho = (h - kernel) / stride + 1;
  const int wo = (w - kernel) / stride + 1;
  Tensor out({n, c, ho, wo});
  std::vector<std::int64_t> argmax(static_cast<std::size_t>(out.numel()));
  const double* px = x.data();
  double* po = out.data();
  std::int64_t oi = 0;
  for (int ni = 0; ni < n; ++ni)
    for (int ci = 0; ci < c; ++ci) {
      const std::int64_t base = (static_cast<std::int64_t>(ni) * c + ci) * h * w;
      for (int oh = 0; oh < ho; ++oh)
        for (int ow = 0; ow < wo; ++ow, ++oi) {
          double best = -std::numeric_limits<double>::infinity();
          std::int64_t best_idx = -1;
          for (int kh = 0; kh < kernel; ++kh)
            for (int kw = 0; kw < kernel; ++kw) {
              const std::int64_t idx =
                  base + (oh * stride + kh) * w + ow * stride + kw;
              if (px[idx] > best) {
                best = px[idx];
                best_idx = idx;
              }
            }
          po[oi] = best;
          argmax[oi] = best_idx;
        }
    }

  if (x.requires_grad()) {
    auto xn = x.node(), on = out.node();
    const std::int64_t total = out.numel();
    detail::record_op(out, {xn}, [xn, on, argmax = std::move(argmax), total]() {
      ensure_grad(xn);
      for (std::int64_t i = 0; i < total; ++i)
        xn->grad[argmax[i]] += on->grad[i];
    });
  }
  return out;
}

// Nearest-neighbour 2x upsampling, the top-down half of the attention mask.
inline Tensor upsample2x(const Tensor& x) {
  if (x.dim() != 4)
    detail::op_shape_error("upsample2x",
                           "expected 4-d input, got " + shape_str(x.shape()));
  const int n = x.shape()[0], c = x.shape()[1], h = x.shape()[2],
            w = x.shape()[3];
  Tensor out({n, c, 2 * h, 2 * w});
  const double* px = x.data();
  double* po = out.data();
  for (int p = 0; p < n * c; ++p) {
    const double* xplane = px + static_cast<std::int64_t>(p) * h * w;
    double* oplane = po + static_cast<std::int64_t>(p) * 4 * h * w;
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        const double v = xplane[i * w + j];
        double* o0 = oplane + (2 * i) * 2 * w + 2 * j;
        o0[0] = v;
        o0[1] = v;
        o0[2 * w] = v;
        o0[2 * w + 1] = v;
      }
  }
  if (x.requires_grad()) {
    auto xn = x.node(), on = out.node();
    detail::record_op(out, {xn}, [xn, on, n, c, h, w]() {
      ensure_grad(xn);
      const double* g = on->grad.data();
      for (int p = 0; p < n * c; ++p) {
        const double* gplane = g + static_cast<std::int64_t>(p) * 4 * h * w;
        double* gx = xn->grad.data() + static_cast<std::int64_t>(p) * h * w;
        for (int i = 0; i < h; ++i)
          for (int j = 0; j < w; ++j) {
            const double* g0 = gplane + (2 * i) * 2 * w + 2 * j;
            gx[i * w + j] += g0[0] + g0[1] + g0[2 * w] + g0[2 * w + 1];
          }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

// Collapses all axes from start_axis on into one.
inline Tensor flatten(const Tensor& x, int start_axis = 1) {
  if (start_axis < 0 || start_axis >= x.dim())
    detail::op_shape_error("flatten", "start_axis " + std::to_string(start_axis) +
                                          " out of range for " +
                                          shape_str(x.shape()));
  Shape ns(x.shape().begin(), x.shape().begin() + start_axis);
  std::int64_t rest = 1;
  for (int i = start_axis; i < x.dim(); ++i) rest *= x.shape()[i];
  ns.push_back(static_cast<int>(rest));
  Tensor out = Tensor::from_data(ns, x.vec());
  if (x.requires_grad()) {
    auto xn = x.node(), on = out.node();
    detail::record_op(out, {xn}, [xn, on]() {
      ensure_grad(xn);
      for (std::size_t i = 0; i < xn->grad.size(); ++i)
        xn->grad[i] += on->grad[i];
    });
  }
  return out;
}

namespace detail {

// Axis split: numel = outer * axis_len * inner, inner contiguous.
inline void axis_split(const Shape& s, int axis, std::int64_t& outer,
                       std::int64_t& axis_len, std::int64_t& inner) {
  outer = 1;
  inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  axis_len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}

inline void check_axis(const char* op, const Tensor& t, int axis) {
  if (axis < 0 || axis >= t.dim())
    op_shape_error(op, "axis " + std::to_string(axis) + " out of range for " +
                           shape_str(t.shape()));
}

}  // namespace detail

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty())
    throw std::runtime_error("concat: needs at least one input");
  detail::check_axis("concat", parts[0], axis);
  Shape ns = parts[0].shape();
  int total_axis = 0;
  for (const Tensor& p : parts) {
    if (p.dim() != parts[0].dim())
      detail::op_shape_error("concat", "rank mismatch between inputs");
    for (int i = 0; i < p.dim(); ++i)
      if (i != axis && p.shape()[i] != ns[i])
        detail::op_shape_error(
            "concat", "shape " + shape_str(p.shape()) +
                          " incompatible with " + shape_str(parts[0].shape()) +
                          " along axis " + std::to_string(axis));
    total_axis += p.shape()[axis];
  }
  ns[axis] = total_axis;
  Tensor out(ns);

  std::int64_t outer, axis_len, inner;
  detail::axis_split(ns, axis, outer, axis_len, inner);
  std::int64_t offset = 0;  // in axis units
  for (const Tensor& p : parts) {
    const std::int64_t plen = p.shape()[axis];
    const double* src = p.data();
    for (std::int64_t o = 0; o < outer; ++o)
      std::copy(src + o * plen * inner, src + (o + 1) * plen * inner,
                out.data() + (o * axis_len + offset) * inner);
    offset += plen;
  }

  bool rq = false;
  for (const Tensor& p : parts) rq |= p.requires_grad();
  if (rq) {
    std::vector<std::shared_ptr<TensorNode>> ins;
    std::vector<std::int64_t> lens;
    for (const Tensor& p : parts) {
      ins.push_back(p.node());
      lens.push_back(p.shape()[axis]);
    }
    auto on = out.node();
    detail::record_op(out, ins,
                      [ins, on, lens, outer, axis_len, inner]() {
                        std::int64_t offset = 0;
                        for (std::size_t pi = 0; pi < ins.size(); ++pi) {
                          const auto& xn = ins[pi];
                          const std::int64_t plen = lens[pi];
                          if (xn->requires_grad) {
                            ensure_grad(xn);
                            for (std::int64_t o = 0; o < outer; ++o) {
                              const double* g = on->grad.data() +
                                                (o * axis_len + offset) * inner;
                              double* dst = xn->grad.data() + o * plen * inner;
                              for (std::int64_t i = 0; i < plen * inner; ++i)
                                dst[i] += g[i];
                            }
                          }
                          offset += plen;
                        }
                      });
  }
  return out;
}

// Contiguous sub-range along one axis.
inline Tensor slice(const Tensor& x, int axis, int start, int len) {
  detail::check_axis("slice", x, axis);
  if (start < 0 || len < 1 || start + len > x.shape()[axis])
    detail::op_shape_error("slice", "range [" + std::to_string(start) + "," +
                                        std::to_string(start + len) +
                                        ") out of bounds for axis " +
                                        std::to_string(axis) + " of " +
                                        shape_str(x.shape()));
  Shape ns = x.shape();
  ns[axis] = len;
  Tensor out(ns);
  std::int64_t outer, axis_len, inner;
  detail::axis_split(x.shape(), axis, outer, axis_len, inner);
  for (std::int64_t o = 0; o < outer; ++o)
    std::copy(x.data() + (o * axis_len + start) * inner,
              x.data() + (o * axis_len + start + len) * inner,
              out.data() + o * len * inner);
  if (x.requires_grad()) {
    auto xn = x.node(), on = out.node();
    detail::record_op(out, {xn},
                      [xn, on, outer, axis_len, inner, start, len]() {
                        ensure_grad(xn);
                        for (std::int64_t o = 0; o < outer; ++o) {
                          const double* g = on->grad.data() + o * len * inner;
                          double* dst =
                              xn->grad.data() + (o * axis_len + start) * inner;
                          for (std::int64_t i = 0; i < len * inner; ++i)
                            dst[i] += g[i];
                        }
                      });
  }
  return out;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

// Minimum along an axis (kept with length 1). Gradient routes to the first
// achieving element, so ties pick the lowest index.
inline Tensor reduce_min(const Tensor& x, int axis) {
  detail::check_axis("reduce_min", x, axis);
  std::int64_t outer, axis_len, inner;
  detail::axis_split(x.shape(), axis, outer, axis_len, inner);
  Shape ns = x.shape();
  ns[axis] = 1;
  Tensor out(ns);
  std::vector<std::int64_t> argmin(static_cast<std::size_t>(outer * inner));
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t i = 0; i < inner; ++i) {
      double best = x.data()[(o * axis_len) * inner + i];
      std::int64_t best_a = 0;
      for (std::int64_t a = 1; a < axis_len; ++a) {
        const double v = x.data()[(o * axis_len + a) * inner + i];
        if (v < best) {
          best = v;
          best_a = a;
        }
      }
      out.data()[o * inner + i] = best;
      argmin[o * inner + i] = (o * axis_len + best_a) * inner + i;
    }
  if (x.requires_grad()) {
    auto xn = x.node(), on = out.node();
    detail::record_op(out, {xn},
                      [xn, on, argmin = std::move(argmin)]() {
                        ensure_grad(xn);
                        for (std::size_t i = 0; i < argmin.size(); ++i)
                          xn->grad[argmin[i]] += on->grad[i];
                      });
  }
  return out;
}

inline Tensor reduce_sum(const Tensor& x) {
  double acc = 0.0;
  for (std::int64_t i = 0; i < x.numel(); ++i) acc += x[i];
  Tensor out = Tensor::scalar(acc);
  if (x.requires_grad()) {
    auto xn = x.node(), on = out.node();
    detail::record_op(out, {xn}, [xn, on]() {
      ensure_grad(xn);
      const double g = on->grad[0];
      for (double& v : xn->grad) v += g;
    });
  }
  return out;
}

inline Tensor reduce_mean(const Tensor& x) {
  const double inv = 1.0 / static_cast<double>(x.numel());
  double acc = 0.0;
  for (std::int64_t i = 0; i < x.numel(); ++i) acc += x[i];
  Tensor out = Tensor::scalar(acc * inv);
  if (x.requires_grad()) {
    auto xn = x.node(), on = out.node();
    detail::record_op(out, {xn}, [xn, on, inv]() {
      ensure_grad(xn);
      const double g = on->grad[0] * inv;
      for (double& v : xn->grad) v += g;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// softmax and weighted cross entropy
// ---------------------------------------------------------------------------

// Max-subtracted softmax along an axis. Rejects NaN input.
inline Tensor softmax(const Tensor& x, int axis) {
  detail::check_axis("softmax", x, axis);
  for (std::int64_t i = 0; i < x.numel(); ++i)
    if (std::isnan(x[i]))
      throw std::runtime_error("softmax: NaN input at index " +
                               std::to_string(i));
  std::int64_t outer, axis_len, inner;
  detail::axis_split(x.shape(), axis, outer, axis_len, inner);
  Tensor out(x.shape());
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t i = 0; i < inner; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::int64_t a = 0; a < axis_len; ++a)
        mx = std::max(mx, x.data()[(o * axis_len + a) * inner + i]);
      double sum = 0.0;
      for (std::int64_t a = 0; a < axis_len; ++a) {
        const double e = std::exp(x.data()[(o * axis_len + a) * inner + i] - mx);
        out.data()[(o * axis_len + a) * inner + i] = e;
        sum += e;
      }
      for (std::int64_t a = 0; a < axis_len; ++a)
        out.data()[(o * axis_len + a) * inner + i] /= sum;
    }
  if (x.requires_grad()) {
    auto xn = x.node(), on = out.node();
    detail::record_op(out, {xn}, [xn, on, outer, axis_len, inner]() {
      ensure_grad(xn);
      // gx = y * (g - sum(g*y)) along the axis
      for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t i = 0; i < inner; ++i) {
          double dot = 0.0;
          for (std::int64_t a = 0; a < axis_len; ++a) {
            const std::int64_t idx = (o * axis_len + a) * inner + i;
            dot += on->grad[idx] * on->data[idx];
          }
          for (std::int64_t a = 0; a < axis_len; ++a) {
            const std::int64_t idx = (o * axis_len + a) * inner + i;
            xn->grad[idx] += on->data[idx] * (on->grad[idx] - dot);
          }
        }
    });
  }
  return out;
}

// -w[y] * log(max(p[y], kLogFloor)) for one probability vector. Gradient is
// zero in the clamped region.
inline Tensor weighted_cross_entropy(const Tensor& probs, int true_class,
                                     const std::vector<double>& weights) {
  if (probs.dim() != 1)
    detail::op_shape_error("weighted_cross_entropy",
                           "expected 1-d probability vector, got " +
                               shape_str(probs.shape()));
  const int classes = probs.shape()[0];
  if (true_class < 0 || true_class >= classes)
    throw std::runtime_error("weighted_cross_entropy: class " +
                             std::to_string(true_class) +
                             " out of range for " + std::to_string(classes) +
                             " classes");
  if (static_cast<int>(weights.size()) != classes)
    detail::op_shape_error("weighted_cross_entropy",
                           "weight list length " +
                               std::to_string(weights.size()) +
                               " does not match class count " +
                               std::to_string(classes));
  const double w = weights[true_class];
  const double p = std::max(probs[true_class], kLogFloor);
  Tensor out = Tensor::scalar(-w * std::log(p));
  if (probs.requires_grad()) {
    auto pn = probs.node(), on = out.node();
    detail::record_op(out, {pn}, [pn, on, true_class, w]() {
      ensure_grad(pn);
      const double pv = pn->data[true_class];
      if (pv > kLogFloor) pn->grad[true_class] += on->grad[0] * (-w / pv);
    });
  }
  return out;
}

// Batch-mean weighted cross entropy over rows of probs [B,C].
inline Tensor weighted_cross_entropy_batch(const Tensor& probs,
                                           const std::vector<int>& labels,
                                           const std::vector<double>& weights) {
  if (probs.dim() != 2)
    detail::op_shape_error("weighted_cross_entropy_batch",
                           "expected [B,C] probabilities, got " +
                               shape_str(probs.shape()));
  const int b = probs.shape()[0], classes = probs.shape()[1];
  if (static_cast<int>(labels.size()) != b)
    detail::op_shape_error("weighted_cross_entropy_batch",
                           "label count " + std::to_string(labels.size()) +
                               " does not match batch size " +
                               std::to_string(b));
  if (static_cast<int>(weights.size()) != classes)
    detail::op_shape_error("weighted_cross_entropy_batch",
                           "weight list length does not match class count");
  double acc = 0.0;
  for (int i = 0; i < b; ++i) {
    const int y = labels[i];
    if (y < 0 || y >= classes)
      throw std::runtime_error("weighted_cross_entropy_batch: class " +
                               std::to_string(y) + " out of range at row " +
                               std::to_string(i));
    acc += -weights[y] * std::log(std::max(probs[i * classes + y], kLogFloor));
  }
  Tensor out = Tensor::scalar(acc / b);
  if (probs.requires_grad()) {
    auto pn = probs.node(), on = out.node();
    detail::record_op(out, {pn}, [pn, on, labels, weights, b, classes]() {
      ensure_grad(pn);
      const double g = on->grad[0] / b;
      for (int i = 0; i < b; ++i) {
        const int y = labels[i];
        const double pv = pn->data[i * classes + y];
        if (pv > kLogFloor) pn->grad[i * classes + y] += g * (-weights[y] / pv);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// generic dispatcher
// ---------------------------------------------------------------------------

enum class OpKind {
  Add,
  Mul,
  Matmul,
  Conv2d,
  Relu,
  Sigmoid,
  MaxPool2d,
  Flatten,
  Concat,
  Log,
  Exp,
};

struct OpAttrs {
  int stride = 1;
  int padding = 0;
  int kernel = 2;
  int axis = 0;
  int start_axis = 1;
};

inline Tensor forward_op(OpKind kind, const std::vector<Tensor>& inputs,
                         const OpAttrs& attrs = {}) {
  auto need = [&](std::size_t n) {
    if (inputs.size() != n)
      throw std::runtime_error("forward_op: expected " + std::to_string(n) +
                               " inputs, got " + std::to_string(inputs.size()));
  };
  switch (kind) {
    case OpKind::Add:
      need(2);
      return add(inputs[0], inputs[1]);
    case OpKind::Mul:
      need(2);
      return mul(inputs[0], inputs[1]);
    case OpKind::Matmul:
      need(2);
      return matmul(inputs[0], inputs[1]);
    case OpKind::Conv2d:
      if (inputs.size() == 3)
        return conv2d(inputs[0], inputs[1], inputs[2], attrs.stride,
                      attrs.padding);
      need(2);
      return conv2d(inputs[0], inputs[1], attrs.stride, attrs.padding);
    case OpKind::Relu:
      need(1);
      return relu(inputs[0]);
    case OpKind::Sigmoid:
      need(1);
      return sigmoid(inputs[0]);
    case OpKind::MaxPool2d:
      need(1);
      return maxpool2d(inputs[0], attrs.kernel, attrs.stride);
    case OpKind::Flatten:
      need(1);
      return flatten(inputs[0], attrs.start_axis);
    case OpKind::Concat:
      return concat(inputs, attrs.axis);
    case OpKind::Log:
      need(1);
      return log(inputs[0]);
    case OpKind::Exp:
      need(1);
      return exp(inputs[0]);
  }
  throw std::runtime_error("forward_op: unknown op kind");
}

// ---------------------------------------------------------------------------
// backward and the finite-difference oracle
// ---------------------------------------------------------------------------

// Seeds the scalar output with gradient 1 and replays the tape in reverse.
// The tape is left intact; call tape.clear() to reuse it.
inline void backward(const Tensor& output, GradTape& tape) {
  if (output.numel() != 1)
    throw std::runtime_error("backward: output must be scalar, got shape " +
                             shape_str(output.shape()));
  const auto& entries = tape.entries();
  std::ptrdiff_t start = -1;
  for (std::ptrdiff_t i = static_cast<std::ptrdiff_t>(entries.size()) - 1;
       i >= 0; --i)
    if (entries[i].output == output.node()) {
      start = i;
      break;
    }
  if (start < 0)
    throw std::runtime_error("backward: output is not recorded on this tape");
  ensure_grad(output.node());
  output.node()->grad[0] += 1.0;
  for (std::ptrdiff_t i = start; i >= 0; --i) {
    if (entries[i].output->grad.empty()) continue;  // no downstream use
    entries[i].fn();
  }
}

// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
// f must be scalar-valued. NaNs in either route surface as +inf and are noted
// in `detail` when provided.
inline double finite_diff_check(const std::function<Tensor(const Tensor&)>& f,
                                const Tensor& x, double h = 1e-5,
                                std::string* detail = nullptr) {
  Tensor xg = Tensor::from_data(x.shape(), x.vec(), /*requires_grad=*/true);
  GradTape tape;
  std::vector<double> analytic;
  {
    TapeScope scope(tape);
    Tensor y = f(xg);
    if (y.numel() != 1)
      throw std::runtime_error("finite_diff_check: f must be scalar-valued");
    backward(y, tape);
    analytic = xg.grad_vec();
  }

  double worst = 0.0;
  NoGradScope no_grad;
  Tensor probe = Tensor::from_data(x.shape(), x.vec());
  for (std::int64_t i = 0; i < probe.numel(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = f(probe).item();
    probe[i] = orig - h;
    const double fm = f(probe).item();
    probe[i] = orig;
    const double fd = (fp - fm) / (2.0 * h);
    double err;
    if (std::isnan(fd) || std::isnan(analytic[i])) {
      err = std::numeric_limits<double>::infinity();
      if (detail)
        *detail += "NaN at coordinate " + std::to_string(i) + "\n";
    } else {
      err = std::abs(analytic[i] - fd) / std::max(1.0, std::abs(analytic[i]));
    }
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace kinjoint
