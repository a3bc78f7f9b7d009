#pragma once

// Differentiable primitives. Every op documents its shape rule; every op with
// a backward rule has finite-difference coverage in tests/test_gradcheck.cpp.
//
// Layout conventions:
//   sequences for convolutions   [B, C, T]   (rank-2 [C, T] accepted as B = 1)
//   sequences for attention      [B, T, D]
//   feature matrices             [N, D]

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "jooci/tensor.hpp"

namespace jooci {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
Eigen::Map<RowMat<T>> mat(T* p, std::size_t r, std::size_t c) {
  return {p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)};
}

template <class T>
Eigen::Map<const RowMat<T>> cmat(const T* p, std::size_t r, std::size_t c) {
  return {p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)};
}

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + to_string(a.shape()) +
                                " vs " + to_string(b.shape()));
  }
}

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

// Views a [C,T] or [B,C,T] tensor as (B, C, T).
struct Seq3 {
  std::size_t b, c, t;
};

template <class T>
Seq3 as_seq3(const Tensor<T>& x, const char* op) {
  if (x.rank() == 3) return {x.dim(0), x.dim(1), x.dim(2)};
  if (x.rank() == 2) return {1, x.dim(0), x.dim(1)};
  throw std::invalid_argument(std::string(op) + ": expected [C,T] or [B,C,T], got " +
                              to_string(x.shape()));
}

template <class T>
Shape seq_shape(const Tensor<T>& like, std::size_t b, std::size_t c, std::size_t t) {
  if (like.rank() == 2) return {c, t};
  return {b, c, t};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Element-wise arithmetic

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  Tensor<T> out(a.shape());
  auto o = out.data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
  if (detail::should_record<T>({&a, &b})) {
    detail::record(out, [ai = a.impl(), bi = b.impl(), oi = out.impl()] {
      const auto& g = oi->grad;
      if (auto* ga = detail::grad_sink(ai))
        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
      if (auto* gb = detail::grad_sink(bi))
        for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i];
    });
  }
  return out;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor<T> out(a.shape());
  auto o = out.data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] - y[i];
  if (detail::should_record<T>({&a, &b})) {
    detail::record(out, [ai = a.impl(), bi = b.impl(), oi = out.impl()] {
      const auto& g = oi->grad;
      if (auto* ga = detail::grad_sink(ai))
        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
      if (auto* gb = detail::grad_sink(bi))
        for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
    });
  }
  return out;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor<T> out(a.shape());
  auto o = out.data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[i];
  if (detail::should_record<T>({&a, &b})) {
    detail::record(out, [ai = a.impl(), bi = b.impl(), oi = out.impl()] {
      const auto& g = oi->grad;
      if (auto* ga = detail::grad_sink(ai))
        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bi->data[i];
      if (auto* gb = detail::grad_sink(bi))
        for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * ai->data[i];
    });
  }
  return out;
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  Tensor<T> out(a.shape());
  auto o = out.data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * factor;
  if (detail::should_record<T>({&a})) {
    detail::record(out, [ai = a.impl(), oi = out.impl(), factor] {
      const auto& g = oi->grad;
      auto& ga = *detail::grad_sink(ai);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
    });
  }
  return out;
}

// Divides by a constant. Kept separate from scale() so that x / 10 is computed
// with a division, not a multiplication by a rounded reciprocal.
template <class T>
Tensor<T> divide(const Tensor<T>& a, T divisor) {
  Tensor<T> out(a.shape());
  auto o = out.data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] / divisor;
  if (detail::should_record<T>({&a})) {
    detail::record(out, [ai = a.impl(), oi = out.impl(), divisor] {
      const auto& g = oi->grad;
      auto& ga = *detail::grad_sink(ai);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / divisor;
    });
  }
  return out;
}

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = 0;
  for (T v : a.data()) acc += v;
  auto out = Tensor<T>::scalar(acc);
  if (detail::should_record<T>({&a})) {
    detail::record(out, [ai = a.impl(), oi = out.impl()] {
      const T g = oi->grad[0];
      for (auto& v : *detail::grad_sink(ai)) v += g;
    });
  }
  return out;
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  return divide(sum(a), static_cast<T>(a.numel()));
}

// ---------------------------------------------------------------------------
// Activations

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  Tensor<T> out(a.shape());
  auto o = out.data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] > T(0) ? x[i] : T(0);
  if (detail::should_record<T>({&a})) {
    detail::record(out, [ai = a.impl(), oi = out.impl()] {
      const auto& g = oi->grad;
      auto& ga = *detail::grad_sink(ai);
      for (std::size_t i = 0; i < g.size(); ++i)
        if (ai->data[i] > T(0)) ga[i] += g[i];
    });
  }
  return out;
}

template <class T>
Tensor<T> tanh(const Tensor<T>& a) {
  Tensor<T> out(a.shape());
  auto o = out.data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::tanh(x[i]);
  if (detail::should_record<T>({&a})) {
    detail::record(out, [ai = a.impl(), oi = out.impl()] {
      const auto& g = oi->grad;
      auto& ga = *detail::grad_sink(ai);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T y = oi->data[i];
        ga[i] += g[i] * (T(1) - y * y);
      }
    });
  }
  return out;
}

// Exact (erf) GELU.
template <class T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  constexpr T inv_sqrt2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
  Tensor<T> out(a.shape());
  auto o = out.data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i)
    o[i] = T(0.5) * x[i] * (T(1) + std::erf(x[i] * inv_sqrt2));
  if (detail::should_record<T>({&a})) {
    detail::record(out, [ai = a.impl(), oi = out.impl()] {
      const auto& g = oi->grad;
      auto& ga = *detail::grad_sink(ai);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T v = ai->data[i];
        const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
        const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
        ga[i] += g[i] * (cdf + v * pdf);
      }
    });
  }
  return out;
}

// Softmax over the last dimension.
template <class T>
Tensor<T> softmax(const Tensor<T>& a) {
  detail::require(a.rank() >= 1, "softmax: scalar input");
  const std::size_t n = a.shape().back();
  const std::size_t rows = a.numel() / n;
  Tensor<T> out(a.shape());
  auto o = out.data();
  auto x = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data() + r * n;
    T* orow = o.data() + r * n;
    T mx = *std::max_element(xr, xr + n);
    T z = 0;
    for (std::size_t j = 0; j < n; ++j) z += (orow[j] = std::exp(xr[j] - mx));
    for (std::size_t j = 0; j < n; ++j) orow[j] /= z;
  }
  if (detail::should_record<T>({&a})) {
    detail::record(out, [ai = a.impl(), oi = out.impl(), n, rows] {
      const auto& g = oi->grad;
      auto& ga = *detail::grad_sink(ai);
      for (std::size_t r = 0; r < rows; ++r) {
        const T* y = oi->data.data() + r * n;
        const T* gr = g.data() + r * n;
        T dot = 0;
        for (std::size_t j = 0; j < n; ++j) dot += gr[j] * y[j];
        for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += y[j] * (gr[j] - dot);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gradient routing

// Identity forward; backward multiplies the upstream gradient by -lambda.
template <class T>
Tensor<T> grad_reverse(const Tensor<T>& a, T lambda = T(1)) {
  Tensor<T> out(a.shape(), std::vector<T>(a.data().begin(), a.data().end()));
  if (detail::should_record<T>({&a})) {
    const T factor = -lambda;
    detail::record(out, [ai = a.impl(), oi = out.impl(), factor] {
      const auto& g = oi->grad;
      auto& ga = *detail::grad_sink(ai);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
    });
  }
  return out;
}

// Identity forward; nothing flows back to the input.
template <class T>
Tensor<T> stop_gradient(const Tensor<T>& a) {
  return a.clone();
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  detail::require(numel(shape) == a.numel(),
                  "reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
  Tensor<T> out(std::move(shape), std::vector<T>(a.data().begin(), a.data().end()));
  if (detail::should_record<T>({&a})) {
    detail::record(out, [ai = a.impl(), oi = out.impl()] {
      const auto& g = oi->grad;
      auto& ga = *detail::grad_sink(ai);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
  }
  return out;
}

// Swaps the last two dimensions of a rank-2 or rank-3 tensor.
template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  detail::require(a.rank() == 2 || a.rank() == 3,
                  "transpose: expected rank 2 or 3, got " + to_string(a.shape()));
  const std::size_t batch = a.rank() == 3 ? a.dim(0) : 1;
  const std::size_t rows = a.dim(a.rank() - 2);
  const std::size_t cols = a.dim(a.rank() - 1);
  Shape shape = a.shape();
  std::swap(shape[shape.size() - 1], shape[shape.size() - 2]);
  Tensor<T> out(shape);
  auto x = a.data();
  auto o = out.data();
  for (std::size_t b = 0; b < batch; ++b) {
    const T* src = x.data() + b * rows * cols;
    T* dst = o.data() + b * rows * cols;
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * cols + j];
  }
  if (detail::should_record<T>({&a})) {
    detail::record(out, [ai = a.impl(), oi = out.impl(), batch, rows, cols] {
      const auto& g = oi->grad;
      auto& ga = *detail::grad_sink(ai);
      for (std::size_t b = 0; b < batch; ++b) {
        const T* src = g.data() + b * rows * cols;
        T* dst = ga.data() + b * rows * cols;
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < cols; ++j) dst[i * cols + j] += src[j * rows + i];
      }
    });
  }
  return out;
}

namespace detail {
// Splits a shape around `axis` into (outer, axis extent, inner).
inline void split_axis(const Shape& s, std::size_t axis, std::size_t& outer, std::size_t& inner) {
  outer = 1;
  inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}
}  // namespace detail

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  detail::require(!parts.empty(), "concat: no inputs");
  const Shape& ref = parts.front().shape();
  detail::require(axis < ref.size(), "concat: axis out of range");
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::require(p.rank() == ref.size(), "concat: rank mismatch");
    for (std::size_t i = 0; i < ref.size(); ++i)
      if (i != axis && p.dim(i) != ref[i])
        throw std::invalid_argument("concat: dimension " + std::to_string(i) + " mismatch " +
                                    to_string(p.shape()) + " vs " + to_string(ref));
    total += p.dim(axis);
  }
  Shape shape = ref;
  shape[axis] = total;
  std::size_t outer, inner;
  detail::split_axis(shape, axis, outer, inner);
  Tensor<T> out(shape);
  auto o = out.data();
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t len = p.dim(axis) * inner;
    auto x = p.data();
    for (std::size_t r = 0; r < outer; ++r)
      std::copy_n(x.data() + r * len, len, o.data() + r * total * inner + offset);
    offset += len;
  }
  bool track = Tape<T>::active() != nullptr &&
               std::any_of(parts.begin(), parts.end(), [](const auto& p) { return p.requires_grad(); });
  if (track) {
    std::vector<std::shared_ptr<TensorImpl<T>>> impls;
    for (const auto& p : parts) impls.push_back(p.impl());
    detail::record(out, [impls, oi = out.impl(), axis, outer, inner, total] {
      const auto& g = oi->grad;
      std::size_t off = 0;
      for (const auto& pi : impls) {
        const std::size_t len = pi->shape[axis] * inner;
        if (auto* gp = detail::grad_sink(pi)) {
          for (std::size_t r = 0; r < outer; ++r)
            for (std::size_t j = 0; j < len; ++j) (*gp)[r * len + j] += g[r * total * inner + off + j];
        }
        off += len;
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t start, std::size_t length) {
  detail::require(axis < a.rank(), "slice: axis out of range");
  detail::require(start + length <= a.dim(axis),
                  "slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                      ") exceeds dimension " + std::to_string(a.dim(axis)));
  Shape shape = a.shape();
  const std::size_t extent = shape[axis];
  shape[axis] = length;
  std::size_t outer, inner;
  detail::split_axis(shape, axis, outer, inner);
  Tensor<T> out(shape);
  auto x = a.data();
  auto o = out.data();
  for (std::size_t r = 0; r < outer; ++r)
    std::copy_n(x.data() + (r * extent + start) * inner, length * inner, o.data() + r * length * inner);
  if (detail::should_record<T>({&a})) {
    detail::record(out, [ai = a.impl(), oi = out.impl(), outer, inner, extent, start, length] {
      const auto& g = oi->grad;
      auto& ga = *detail::grad_sink(ai);
      for (std::size_t r = 0; r < outer; ++r)
        for (std::size_t j = 0; j < length * inner; ++j)
          ga[(r * extent + start) * inner + j] += g[r * length * inner + j];
    });
  }
  return out;
}

// Right-pads the time axis of [B,C,T] with zeros.
template <class T>
Tensor<T> pad_time(const Tensor<T>& a, std::size_t right) {
  if (right == 0) return a;
  const auto s = detail::as_seq3(a, "pad_time");
  const std::size_t tp = s.t + right;
  Tensor<T> out(detail::seq_shape(a, s.b, s.c, tp));
  auto x = a.data();
  auto o = out.data();
  for (std::size_t r = 0; r < s.b * s.c; ++r) std::copy_n(x.data() + r * s.t, s.t, o.data() + r * tp);
  if (detail::should_record<T>({&a})) {
    detail::record(out, [ai = a.impl(), oi = out.impl(), s, tp] {
      const auto& g = oi->grad;
      auto& ga = *detail::grad_sink(ai);
      for (std::size_t r = 0; r < s.b * s.c; ++r)
        for (std::size_t t = 0; t < s.t; ++t) ga[r * s.t + t] += g[r * tp + t];
    });
  }
  return out;
}

// Nearest-neighbour upsampling of [B,C,S] along time by `factor`, keeping the
// first `out_len` frames (out_len <= S * factor).
template <class T>
Tensor<T> repeat_time(const Tensor<T>& a, std::size_t factor, std::size_t out_len) {
  const auto s = detail::as_seq3(a, "repeat_time");
  detail::require(factor >= 1 && out_len <= s.t * factor,
                  "repeat_time: output length " + std::to_string(out_len) + " exceeds " +
                      std::to_string(s.t) + " x " + std::to_string(factor));
  Tensor<T> out(detail::seq_shape(a, s.b, s.c, out_len));
  auto x = a.data();
  auto o = out.data();
  for (std::size_t r = 0; r < s.b * s.c; ++r)
    for (std::size_t t = 0; t < out_len; ++t) o[r * out_len + t] = x[r * s.t + t / factor];
  if (detail::should_record<T>({&a})) {
    detail::record(out, [ai = a.impl(), oi = out.impl(), s, factor, out_len] {
      const auto& g = oi->grad;
      auto& ga = *detail::grad_sink(ai);
      for (std::size_t r = 0; r < s.b * s.c; ++r)
        for (std::size_t t = 0; t < out_len; ++t) ga[r * s.t + t / factor] += g[r * out_len + t];
    });
  }
  return out;
}

// Rows of a [N, D] (or [B, T, D] viewed as [B*T, D]) tensor at `rows`.
template <class T>
Tensor<T> gather_rows(const Tensor<T>& a, const std::vector<std::size_t>& rows) {
  detail::require(a.rank() >= 2, "gather_rows: expected rank >= 2");
  const std::size_t d = a.shape().back();
  const std::size_t n = a.numel() / d;
  Tensor<T> out(Shape{rows.size(), d});
  auto x = a.data();
  auto o = out.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    detail::require(rows[i] < n, "gather_rows: row " + std::to_string(rows[i]) + " out of range");
    std::copy_n(x.data() + rows[i] * d, d, o.data() + i * d);
  }
  if (detail::should_record<T>({&a})) {
    detail::record(out, [ai = a.impl(), oi = out.impl(), rows, d] {
      const auto& g = oi->grad;
      auto& ga = *detail::grad_sink(ai);
      for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) ga[rows[i] * d + j] += g[i * d + j];
    });
  }
  return out;
}

// Replaces the rows of [B,T,D] flagged in `mask` (B*T entries) with `fill` [D].
template <class T>
Tensor<T> masked_replace(const Tensor<T>& a, const std::vector<std::uint8_t>& mask,
                         const Tensor<T>& fill) {
  detail::require(a.rank() >= 2, "masked_replace: expected rank >= 2");
  const std::size_t d = a.shape().back();
  const std::size_t n = a.numel() / d;
  detail::require(mask.size() == n, "masked_replace: mask has " + std::to_string(mask.size()) +
                                        " entries for " + std::to_string(n) + " rows");
  detail::require(fill.numel() == d, "masked_replace: fill vector has wrong size");
  Tensor<T> out(a.shape());
  auto x = a.data();
  auto f = fill.data();
  auto o = out.data();
  for (std::size_t r = 0; r < n; ++r) {
    const T* src = mask[r] ? f.data() : x.data() + r * d;
    std::copy_n(src, d, o.data() + r * d);
  }
  if (detail::should_record<T>({&a, &fill})) {
    detail::record(out, [ai = a.impl(), fi = fill.impl(), oi = out.impl(), mask, d, n] {
      const auto& g = oi->grad;
      auto* ga = detail::grad_sink(ai);
      auto* gf = detail::grad_sink(fi);
      for (std::size_t r = 0; r < n; ++r) {
        if (mask[r]) {
          if (gf)
            for (std::size_t j = 0; j < d; ++j) (*gf)[j] += g[r * d + j];
        } else if (ga) {
          for (std::size_t j = 0; j < d; ++j) (*ga)[r * d + j] += g[r * d + j];
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dense layers

// y[..., out] = x[..., in] * W^T + b, with W [out, in] and optional b [out].
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias = {}) {
  detail::require(weight.rank() == 2, "linear: weight must be [out, in]");
  const std::size_t in = weight.dim(1);
  const std::size_t outd = weight.dim(0);
  detail::require(x.rank() >= 1 && x.shape().back() == in,
                  "linear: input feature dimension " + std::to_string(x.rank() ? x.shape().back() : 0) +
                      " != weight in-dimension " + std::to_string(in));
  const bool has_bias = bias.defined();
  if (has_bias) detail::require(bias.numel() == outd, "linear: bias size mismatch");
  const std::size_t rows = x.numel() / in;
  Shape shape = x.shape();
  shape.back() = outd;
  Tensor<T> out(shape);
  {
    auto X = detail::cmat(x.data().data(), rows, in);
    auto W = detail::cmat(weight.data().data(), outd, in);
    auto Y = detail::mat(out.data().data(), rows, outd);
    Y.noalias() = X * W.transpose();
    if (has_bias) Y.rowwise() += detail::cmat(bias.data().data(), 1, outd).row(0);
  }
  if (detail::should_record<T>({&x, &weight, &bias})) {
    detail::record(out, [xi = x.impl(), wi = weight.impl(), bi = has_bias ? bias.impl() : nullptr,
                         oi = out.impl(), rows, in, outd] {
      auto G = detail::cmat(oi->grad.data(), rows, outd);
      if (auto* gx = detail::grad_sink(xi))
        detail::mat(gx->data(), rows, in).noalias() += G * detail::cmat(wi->data.data(), outd, in);
      if (auto* gw = detail::grad_sink(wi))
        detail::mat(gw->data(), outd, in).noalias() += G.transpose() * detail::cmat(xi->data.data(), rows, in);
      if (auto* gb = detail::grad_sink(bi)) detail::mat(gb->data(), 1, outd).row(0) += G.colwise().sum();
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolution and pooling

struct Conv1dOptions {
  std::size_t stride = 1;
  std::size_t dilation = 1;
  std::size_t pad_left = 0;
  std::size_t pad_right = 0;
  std::size_t groups = 1;
};

inline std::size_t conv1d_output_length(std::size_t length, std::size_t kernel,
                                        const Conv1dOptions& opt) {
  const std::size_t padded = length + opt.pad_left + opt.pad_right;
  const std::size_t span = opt.dilation * (kernel - 1) + 1;
  if (padded < span) return 0;
  return (padded - span) / opt.stride + 1;
}

namespace detail {

// Ungrouped convolution as one matrix product per batch item:
// cols [C_in*K, T_out] gathers the taps, Y = W [C_out, C_in*K] * cols.
template <class T>
void im2col(const T* x, std::size_t cin, std::size_t t_in, std::size_t k, std::size_t tout,
            const Conv1dOptions& opt, T* cols) {
  for (std::size_t ci = 0; ci < cin; ++ci)
    for (std::size_t j = 0; j < k; ++j) {
      T* row = cols + (ci * k + j) * tout;
      const long off = static_cast<long>(j * opt.dilation) - static_cast<long>(opt.pad_left);
      for (std::size_t t = 0; t < tout; ++t) {
        const long src = static_cast<long>(t * opt.stride) + off;
        row[t] = (src >= 0 && src < static_cast<long>(t_in)) ? x[ci * t_in + src] : T(0);
      }
    }
}

template <class T>
void col2im_add(const T* cols, std::size_t cin, std::size_t t_in, std::size_t k, std::size_t tout,
                const Conv1dOptions& opt, T* gx) {
  for (std::size_t ci = 0; ci < cin; ++ci)
    for (std::size_t j = 0; j < k; ++j) {
      const T* row = cols + (ci * k + j) * tout;
      const long off = static_cast<long>(j * opt.dilation) - static_cast<long>(opt.pad_left);
      for (std::size_t t = 0; t < tout; ++t) {
        const long src = static_cast<long>(t * opt.stride) + off;
        if (src >= 0 && src < static_cast<long>(t_in)) gx[ci * t_in + src] += row[t];
      }
    }
}

template <class T>
Tensor<T> conv1d_gemm(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                      const Conv1dOptions& opt, Seq3 s, std::size_t cout, std::size_t k,
                      std::size_t tout) {
  const bool has_bias = bias.defined();
  const std::size_t rows = s.c * k;
  Tensor<T> out(seq_shape(input, s.b, cout, tout));
  Buffer<T> cols(rows * tout);
  auto W = cmat(weight.data().data(), cout, rows);
  for (std::size_t b = 0; b < s.b; ++b) {
    im2col(input.data().data() + b * s.c * s.t, s.c, s.t, k, tout, opt, cols.data());
    auto Y = mat(out.data().data() + b * cout * tout, cout, tout);
    Y.noalias() = W * cmat(cols.data(), rows, tout);
    if (has_bias) Y.colwise() += cmat(bias.data().data(), cout, 1).col(0);
  }
  if (should_record<T>({&input, &weight, &bias})) {
    record(out, [xi = input.impl(), wi = weight.impl(), bi = has_bias ? bias.impl() : nullptr,
                 oi = out.impl(), s, opt, cout, k, tout, rows] {
      auto* gx = grad_sink(xi);
      auto* gw = grad_sink(wi);
      auto* gb = grad_sink(bi);
      Buffer<T> buf(rows * tout);
      for (std::size_t b = 0; b < s.b; ++b) {
        auto G = cmat(oi->grad.data() + b * cout * tout, cout, tout);
        if (gb) mat(gb->data(), cout, 1).col(0) += G.rowwise().sum();
        if (gw) {
          im2col(xi->data.data() + b * s.c * s.t, s.c, s.t, k, tout, opt, buf.data());
          mat(gw->data(), cout, rows).noalias() += G * cmat(buf.data(), rows, tout).transpose();
        }
        if (gx) {
          mat(buf.data(), rows, tout).noalias() = cmat(wi->data.data(), cout, rows).transpose() * G;
          col2im_add(buf.data(), s.c, s.t, k, tout, opt, gx->data() + b * s.c * s.t);
        }
      }
    });
  }
  return out;
}

}  // namespace detail

// input [B, C_in, T] (or [C_in, T]), weight [C_out, C_in/groups, K], bias [C_out].
template <class T>
Tensor<T> conv1d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias = {},
                 Conv1dOptions opt = {}) {
  const auto s = detail::as_seq3(input, "conv1d");
  detail::require(weight.rank() == 3, "conv1d: weight must be [C_out, C_in/groups, K]");
  detail::require(opt.stride >= 1 && opt.dilation >= 1 && opt.groups >= 1,
                  "conv1d: stride, dilation and groups must be >= 1");
  const std::size_t cout = weight.dim(0);
  const std::size_t cin_g = weight.dim(1);
  const std::size_t k = weight.dim(2);
  const std::size_t groups = opt.groups;
  if (s.c % groups != 0)
    throw std::invalid_argument("conv1d: input channels " + std::to_string(s.c) +
                                " not divisible by groups " + std::to_string(groups));
  if (cout % groups != 0)
    throw std::invalid_argument("conv1d: output channels " + std::to_string(cout) +
                                " not divisible by groups " + std::to_string(groups));
  if (cin_g * groups != s.c)
    throw std::invalid_argument("conv1d: input channels " + std::to_string(s.c) +
                                " do not match weight in-channels " + std::to_string(cin_g) +
                                " x groups " + std::to_string(groups));
  const std::size_t span = opt.dilation * (k - 1) + 1;
  if (s.t + opt.pad_left + opt.pad_right < span)
    throw std::invalid_argument("conv1d: input length " + std::to_string(s.t) +
                                " shorter than kernel span " + std::to_string(span));
  const bool has_bias = bias.defined();
  if (has_bias) detail::require(bias.numel() == cout, "conv1d: bias size mismatch");
  const std::size_t tout = conv1d_output_length(s.t, k, opt);
  if (groups == 1) return detail::conv1d_gemm(input, weight, bias, opt, s, cout, k, tout);
  const std::size_t cout_g = cout / groups;
  Tensor<T> out(detail::seq_shape(input, s.b, cout, tout));
  auto x = input.data();
  auto w = weight.data();
  auto o = out.data();

  // Valid output range for tap j: t such that 0 <= t*stride + j*dil - pad_left < T.
  auto tap_range = [s, opt, tout](std::size_t j, std::size_t& lo, std::size_t& hi) {
    const long off = static_cast<long>(j * opt.dilation) - static_cast<long>(opt.pad_left);
    const long st = static_cast<long>(opt.stride);
    long first = off >= 0 ? 0 : (-off + st - 1) / st;
    long last = (static_cast<long>(s.t) - 1 - off);
    last = last < 0 ? -1 : last / st;
    lo = static_cast<std::size_t>(std::max<long>(first, 0));
    hi = static_cast<std::size_t>(std::min<long>(last + 1, static_cast<long>(tout)));
    if (hi < lo) hi = lo;
  };

  for (std::size_t b = 0; b < s.b; ++b) {
    for (std::size_t co = 0; co < cout; ++co) {
      T* orow = o.data() + (b * cout + co) * tout;
      std::fill_n(orow, tout, has_bias ? bias[co] : T(0));
      const std::size_t g = co / cout_g;
      for (std::size_t ci = 0; ci < cin_g; ++ci) {
        const T* xrow = x.data() + (b * s.c + g * cin_g + ci) * s.t;
        const T* wrow = w.data() + (co * cin_g + ci) * k;
        for (std::size_t j = 0; j < k; ++j) {
          std::size_t lo, hi;
          tap_range(j, lo, hi);
          const T wv = wrow[j];
          const long off = static_cast<long>(j * opt.dilation) - static_cast<long>(opt.pad_left);
          const T* xs = xrow + off;
          if (opt.stride == 1) {
            for (std::size_t t = lo; t < hi; ++t) orow[t] += wv * xs[t];
          } else {
            for (std::size_t t = lo; t < hi; ++t) orow[t] += wv * xs[t * opt.stride];
          }
        }
      }
    }
  }
  if (detail::should_record<T>({&input, &weight, &bias})) {
    detail::record(out, [xi = input.impl(), wi = weight.impl(), bi = has_bias ? bias.impl() : nullptr,
                         oi = out.impl(), s, opt, cout, cin_g, cout_g, k, tout, tap_range] {
      const auto& g = oi->grad;
      auto* gx = detail::grad_sink(xi);
      auto* gw = detail::grad_sink(wi);
      auto* gb = detail::grad_sink(bi);
      for (std::size_t b = 0; b < s.b; ++b) {
        for (std::size_t co = 0; co < cout; ++co) {
          const T* grow = g.data() + (b * cout + co) * tout;
          if (gb) {
            T acc = 0;
            for (std::size_t t = 0; t < tout; ++t) acc += grow[t];
            (*gb)[co] += acc;
          }
          const std::size_t grp = co / cout_g;
          for (std::size_t ci = 0; ci < cin_g; ++ci) {
            const std::size_t xoff = (b * s.c + grp * cin_g + ci) * s.t;
            const T* xrow = xi->data.data() + xoff;
            const T* wrow = wi->data.data() + (co * cin_g + ci) * k;
            for (std::size_t j = 0; j < k; ++j) {
              std::size_t lo, hi;
              tap_range(j, lo, hi);
              const long off = static_cast<long>(j * opt.dilation) - static_cast<long>(opt.pad_left);
              if (gw) {
                T acc = 0;
                const T* xs = xrow + off;
                for (std::size_t t = lo; t < hi; ++t) acc += grow[t] * xs[t * opt.stride];
                (*gw)[(co * cin_g + ci) * k + j] += acc;
              }
              if (gx) {
                const T wv = wrow[j];
                T* gxs = gx->data() + xoff + off;
                for (std::size_t t = lo; t < hi; ++t) gxs[t * opt.stride] += wv * grow[t];
              }
            }
          }
        }
      }
    });
  }
  detail::check_finite(out, "conv1d");
  return out;
}

template <class T>
Tensor<T> avg_pool1d(const Tensor<T>& input, std::size_t kernel, std::size_t stride) {
  const auto s = detail::as_seq3(input, "avg_pool1d");
  detail::require(kernel >= 1 && stride >= 1, "avg_pool1d: kernel and stride must be >= 1");
  if (kernel > s.t)
    throw std::invalid_argument("avg_pool1d: kernel " + std::to_string(kernel) +
                                " larger than input length " + std::to_string(s.t));
  const std::size_t tout = (s.t - kernel) / stride + 1;
  Tensor<T> out(detail::seq_shape(input, s.b, s.c, tout));
  auto x = input.data();
  auto o = out.data();
  const T inv = T(1) / static_cast<T>(kernel);
  for (std::size_t r = 0; r < s.b * s.c; ++r)
    for (std::size_t t = 0; t < tout; ++t) {
      T acc = 0;
      for (std::size_t j = 0; j < kernel; ++j) acc += x[r * s.t + t * stride + j];
      o[r * tout + t] = acc / static_cast<T>(kernel);
    }
  if (detail::should_record<T>({&input})) {
    detail::record(out, [xi = input.impl(), oi = out.impl(), s, kernel, stride, tout, inv] {
      const auto& g = oi->grad;
      auto& gx = *detail::grad_sink(xi);
      for (std::size_t r = 0; r < s.b * s.c; ++r)
        for (std::size_t t = 0; t < tout; ++t)
          for (std::size_t j = 0; j < kernel; ++j) gx[r * s.t + t * stride + j] += g[r * tout + t] * inv;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalisation

// Normalises over the last dimension, then applies gamma/beta.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5)) {
  const std::size_t d = x.shape().back();
  detail::require(gamma.numel() == d && beta.numel() == d, "layer_norm: affine size mismatch");
  const std::size_t rows = x.numel() / d;
  Tensor<T> out(x.shape());
  Buffer<T> xhat(x.numel()), inv_std(rows);
  auto xs = x.data();
  auto o = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xs.data() + r * d;
    T mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<T>(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<T>(d);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (xr[j] - mu) * is;
      xhat[r * d + j] = h;
      o[r * d + j] = h * gamma[j] + beta[j];
    }
  }
  if (detail::should_record<T>({&x, &gamma, &beta})) {
    detail::record(out, [xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), oi = out.impl(),
                         xhat = std::move(xhat), inv_std = std::move(inv_std), rows, d] {
      const auto& g = oi->grad;
      auto* gx = detail::grad_sink(xi);
      auto* gg = detail::grad_sink(gi);
      auto* gb = detail::grad_sink(bi);
      for (std::size_t r = 0; r < rows; ++r) {
        const T* gr = g.data() + r * d;
        const T* hr = xhat.data() + r * d;
        if (gg)
          for (std::size_t j = 0; j < d; ++j) (*gg)[j] += gr[j] * hr[j];
        if (gb)
          for (std::size_t j = 0; j < d; ++j) (*gb)[j] += gr[j];
        if (gx) {
          T m1 = 0, m2 = 0;
          for (std::size_t j = 0; j < d; ++j) {
            const T dh = gr[j] * gi->data[j];
            m1 += dh;
            m2 += dh * hr[j];
          }
          m1 /= static_cast<T>(d);
          m2 /= static_cast<T>(d);
          for (std::size_t j = 0; j < d; ++j) {
            const T dh = gr[j] * gi->data[j];
            (*gx)[r * d + j] += inv_std[r] * (dh - m1 - hr[j] * m2);
          }
        }
      }
    });
  }
  return out;
}

namespace detail {

// Shared kernel for batch and instance normalisation over [outer, C, inner]
// where statistics are pooled per channel over the `pooled` (outer, inner)
// pairs belonging to one normalisation group.
template <class T>
Tensor<T> channel_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                       std::size_t b, std::size_t c, std::size_t t, bool per_item,
                       const std::vector<T>* fixed_mean, const std::vector<T>* fixed_var, T eps,
                       std::vector<T>* batch_mean, std::vector<T>* batch_var) {
  const std::size_t groups = per_item ? b * c : c;
  const std::size_t count = per_item ? t : b * t;
  std::vector<T> mu(groups), is(groups);
  auto xs = x.data();
  auto index = [per_item, c, t](std::size_t grp, std::size_t n) {
    if (per_item) return grp * t + n;
    const std::size_t ch = grp;
    const std::size_t item = n / t;
    const std::size_t tt = n % t;
    return (item * c + ch) * t + tt;
  };
  if (batch_mean) batch_mean->assign(groups, T(0));
  if (batch_var) batch_var->assign(groups, T(0));
  for (std::size_t grp = 0; grp < groups; ++grp) {
    T m, v;
    if (fixed_mean) {
      m = (*fixed_mean)[grp];
      v = (*fixed_var)[grp];
    } else {
      m = 0;
      for (std::size_t n = 0; n < count; ++n) m += xs[index(grp, n)];
      m /= static_cast<T>(count);
      v = 0;
      for (std::size_t n = 0; n < count; ++n) {
        const T dv = xs[index(grp, n)] - m;
        v += dv * dv;
      }
      v /= static_cast<T>(count);
    }
    if (batch_mean) (*batch_mean)[grp] = m;
    if (batch_var) (*batch_var)[grp] = v;
    mu[grp] = m;
    is[grp] = T(1) / std::sqrt(v + eps);
  }
  Tensor<T> out(x.shape());
  auto o = out.data();
  Buffer<T> xhat(x.numel());
  for (std::size_t grp = 0; grp < groups; ++grp) {
    const std::size_t ch = per_item ? grp % c : grp;
    for (std::size_t n = 0; n < count; ++n) {
      const std::size_t i = index(grp, n);
      const T h = (xs[i] - mu[grp]) * is[grp];
      xhat[i] = h;
      o[i] = h * gamma[ch] + beta[ch];
    }
  }
  if (detail::should_record<T>({&x, &gamma, &beta})) {
    const bool stats_are_constant = fixed_mean != nullptr;
    detail::record(out, [xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), oi = out.impl(),
                         xhat = std::move(xhat), is = std::move(is), groups, count, per_item, c, t,
                         stats_are_constant, index] {
      const auto& g = oi->grad;
      auto* gx = detail::grad_sink(xi);
      auto* gg = detail::grad_sink(gi);
      auto* gb = detail::grad_sink(bi);
      for (std::size_t grp = 0; grp < groups; ++grp) {
        const std::size_t ch = per_item ? grp % c : grp;
        const T gam = gi->data[ch];
        T m1 = 0, m2 = 0;
        for (std::size_t n = 0; n < count; ++n) {
          const std::size_t i = index(grp, n);
          if (gg) (*gg)[ch] += g[i] * xhat[i];
          if (gb) (*gb)[ch] += g[i];
          const T dh = g[i] * gam;
          m1 += dh;
          m2 += dh * xhat[i];
        }
        if (!gx) continue;
        m1 /= static_cast<T>(count);
        m2 /= static_cast<T>(count);
        for (std::size_t n = 0; n < count; ++n) {
          const std::size_t i = index(grp, n);
          const T dh = g[i] * gam;
          (*gx)[i] += stats_are_constant ? is[grp] * dh : is[grp] * (dh - m1 - xhat[i] * m2);
        }
      }
      (void)t;
    });
  }
  return out;
}

}  // namespace detail

// Per-(item, channel) normalisation over time, i.e. GroupNorm with one group
// per channel. input [B, C, T].
template <class T>
Tensor<T> instance_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                        T eps = T(1e-5)) {
  const auto s = detail::as_seq3(x, "instance_norm");
  detail::require(gamma.numel() == s.c && beta.numel() == s.c, "instance_norm: affine size mismatch");
  return detail::channel_norm<T>(x, gamma, beta, s.b, s.c, s.t, true, nullptr, nullptr, eps, nullptr,
                              nullptr);
}

// Running statistics for batch normalisation; not trainable.
template <class T>
struct BatchNormState {
  std::vector<T> running_mean;
  std::vector<T> running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);

  explicit BatchNormState(std::size_t channels = 0)
      : running_mean(channels, T(0)), running_var(channels, T(1)) {}
};

// Batch normalisation over [B, C, T] (statistics over B and T) or [B, C]
// (statistics over B). Training mode uses batch statistics and updates the
// running estimates with `state.momentum`; eval mode uses the running values.
template <class T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     BatchNormState<T>& state, bool training) {
  std::size_t b, c, t;
  if (x.rank() == 3) {
    b = x.dim(0), c = x.dim(1), t = x.dim(2);
  } else if (x.rank() == 2) {
    b = x.dim(0), c = x.dim(1), t = 1;
  } else {
    throw std::invalid_argument("batch_norm: expected [B,C] or [B,C,T], got " + to_string(x.shape()));
  }
  detail::require(gamma.numel() == c && beta.numel() == c && state.running_mean.size() == c,
                  "batch_norm: channel count mismatch");
  if (!training) {
    return detail::channel_norm<T>(x, gamma, beta, b, c, t, false, &state.running_mean,
                                &state.running_var, state.eps, nullptr, nullptr);
  }
  const std::size_t count = b * t;
  detail::require(count > 1, "batch_norm: training mode needs more than one value per channel");
  std::vector<T> bm, bv;
  auto out = detail::channel_norm<T>(x, gamma, beta, b, c, t, false, nullptr, nullptr, state.eps, &bm, &bv);
  const T unbias = static_cast<T>(count) / static_cast<T>(count - 1);
  for (std::size_t ch = 0; ch < c; ++ch) {
    state.running_mean[ch] = (T(1) - state.momentum) * state.running_mean[ch] + state.momentum * bm[ch];
    state.running_var[ch] =
        (T(1) - state.momentum) * state.running_var[ch] + state.momentum * bv[ch] * unbias;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Attention

namespace detail {

template <class T>
void attention_probs_kernel(const T* q, const T* k, std::size_t tq, std::size_t tk, std::size_t d,
                            std::size_t head_off, std::size_t dh, T scale, T* probs) {
  for (std::size_t i = 0; i < tq; ++i) {
    T* pr = probs + i * tk;
    const T* qi = q + i * d + head_off;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < tk; ++j) {
      const T* kj = k + j * d + head_off;
      T acc = 0;
      for (std::size_t e = 0; e < dh; ++e) acc += qi[e] * kj[e];
      pr[j] = acc * scale;
      mx = std::max(mx, pr[j]);
    }
    T z = 0;
    for (std::size_t j = 0; j < tk; ++j) z += (pr[j] = std::exp(pr[j] - mx));
    for (std::size_t j = 0; j < tk; ++j) pr[j] /= z;
  }
}

}  // namespace detail

// Softmax attention weights per head: q [B,Tq,D], k [B,Tk,D] -> [B,H,Tq,Tk].
template <class T>
Tensor<T> attention_weights(const Tensor<T>& q, const Tensor<T>& k, std::size_t heads) {
  detail::require(q.rank() == 3 && k.rank() == 3, "attention_weights: expected [B,T,D] inputs");
  const std::size_t b = q.dim(0), tq = q.dim(1), d = q.dim(2), tk = k.dim(1);
  detail::require(k.dim(0) == b && k.dim(2) == d && d % heads == 0,
                  "attention_weights: incompatible query/key shapes");
  const std::size_t dh = d / heads;
  const T sc = T(1) / std::sqrt(static_cast<T>(dh));
  Tensor<T> out(Shape{b, heads, tq, tk});
  for (std::size_t bb = 0; bb < b; ++bb)
    for (std::size_t h = 0; h < heads; ++h)
      detail::attention_probs_kernel(q.data().data() + bb * tq * d, k.data().data() + bb * tk * d, tq,
                                     tk, d, h * dh, dh, sc, out.data().data() + (bb * heads + h) * tq * tk);
  return out;
}

// Scaled dot-product attention over `heads` equal slices of D.
// q [B,Tq,D], k and v [B,Tk,D] -> [B,Tq,D].
template <class T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads) {
  detail::require(q.rank() == 3 && k.rank() == 3 && v.rank() == 3, "attention: expected [B,T,D] inputs");
  const std::size_t b = q.dim(0), tq = q.dim(1), d = q.dim(2), tk = k.dim(1);
  detail::require(k.shape() == v.shape(), "attention: key/value shape mismatch");
  detail::require(k.dim(0) == b && k.dim(2) == d, "attention: query/key shape mismatch " +
                                                     to_string(q.shape()) + " vs " + to_string(k.shape()));
  detail::require(heads >= 1 && d % heads == 0,
                  "attention: model dimension " + std::to_string(d) + " not divisible by " +
                      std::to_string(heads) + " heads");
  const std::size_t dh = d / heads;
  const T sc = T(1) / std::sqrt(static_cast<T>(dh));
  Buffer<T> probs(b * heads * tq * tk);
  Tensor<T> out(Shape{b, tq, d});
  auto o = out.data();
  for (std::size_t bb = 0; bb < b; ++bb) {
    const T* qb = q.data().data() + bb * tq * d;
    const T* kb = k.data().data() + bb * tk * d;
    const T* vb = v.data().data() + bb * tk * d;
    for (std::size_t h = 0; h < heads; ++h) {
      T* p = probs.data() + (bb * heads + h) * tq * tk;
      detail::attention_probs_kernel(qb, kb, tq, tk, d, h * dh, dh, sc, p);
      for (std::size_t i = 0; i < tq; ++i) {
        T* oi = o.data() + (bb * tq + i) * d + h * dh;
        for (std::size_t j = 0; j < tk; ++j) {
          const T pij = p[i * tk + j];
          const T* vj = vb + j * d + h * dh;
          for (std::size_t e = 0; e < dh; ++e) oi[e] += pij * vj[e];
        }
      }
    }
  }
  if (detail::should_record<T>({&q, &k, &v})) {
    detail::record(out, [qi = q.impl(), ki = k.impl(), vi = v.impl(), oi = out.impl(),
                         probs = std::move(probs), b, tq, tk, d, heads, dh, sc] {
      const auto& g = oi->grad;
      auto* gq = detail::grad_sink(qi);
      auto* gk = detail::grad_sink(ki);
      auto* gv = detail::grad_sink(vi);
      Buffer<T> dp(tq * tk);
      for (std::size_t bb = 0; bb < b; ++bb) {
        const T* qb = qi->data.data() + bb * tq * d;
        const T* kb = ki->data.data() + bb * tk * d;
        const T* vb = vi->data.data() + bb * tk * d;
        const T* gb = g.data() + bb * tq * d;
        for (std::size_t h = 0; h < heads; ++h) {
          const T* p = probs.data() + (bb * heads + h) * tq * tk;
          const std::size_t ho = h * dh;
          // dV = P^T dO ; dP = dO V^T
          for (std::size_t i = 0; i < tq; ++i) {
            const T* goi = gb + i * d + ho;
            for (std::size_t j = 0; j < tk; ++j) {
              const T* vj = vb + j * d + ho;
              T acc = 0;
              for (std::size_t e = 0; e < dh; ++e) acc += goi[e] * vj[e];
              dp[i * tk + j] = acc;
              if (gv) {
                T* gvj = gv->data() + (bb * tk + j) * d + ho;
                const T pij = p[i * tk + j];
                for (std::size_t e = 0; e < dh; ++e) gvj[e] += pij * goi[e];
              }
            }
          }
          // dS = P * (dP - rowsum(dP * P)), then scaled
          for (std::size_t i = 0; i < tq; ++i) {
            T dot = 0;
            for (std::size_t j = 0; j < tk; ++j) dot += dp[i * tk + j] * p[i * tk + j];
            for (std::size_t j = 0; j < tk; ++j) dp[i * tk + j] = p[i * tk + j] * (dp[i * tk + j] - dot) * sc;
          }
          for (std::size_t i = 0; i < tq; ++i) {
            for (std::size_t j = 0; j < tk; ++j) {
              const T ds = dp[i * tk + j];
              if (gq) {
                T* gqi = gq->data() + (bb * tq + i) * d + ho;
                const T* kj = kb + j * d + ho;
                for (std::size_t e = 0; e < dh; ++e) gqi[e] += ds * kj[e];
              }
              if (gk) {
                T* gkj = gk->data() + (bb * tk + j) * d + ho;
                const T* qi2 = qb + i * d + ho;
                for (std::size_t e = 0; e < dh; ++e) gkj[e] += ds * qi2[e];
              }
            }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Similarities and losses

namespace detail {
inline constexpr double kCosineEps = 1e-8;

template <class T>
void cosine_kernel(const T* u, const T* v, std::size_t d, T& sim, T& nu, T& nv, T& dot) {
  dot = 0;
  T su = 0, sv = 0;
  for (std::size_t i = 0; i < d; ++i) {
    dot += u[i] * v[i];
    su += u[i] * u[i];
    sv += v[i] * v[i];
  }
  nu = std::sqrt(su);
  nv = std::sqrt(sv);
  sim = dot / ((nu + T(kCosineEps)) * (nv + T(kCosineEps)));
}

// Adds d(sim)/du * g into gu.
template <class T>
void cosine_backward(const T* u, const T* v, std::size_t d, T nu, T nv, T dot, T g, T* gu) {
  const T du = nu + T(kCosineEps);
  const T dv = nv + T(kCosineEps);
  const T a = g / (du * dv);
  const T b = nu > T(0) ? g * dot / (du * du * dv * nu) : T(0);
  for (std::size_t i = 0; i < d; ++i) gu[i] += a * v[i] - b * u[i];
}
}  // namespace detail

// u . v / ((|u| + 1e-8)(|v| + 1e-8)); zero vectors yield 0 with zero gradient.
template <class T>
Tensor<T> cosine_similarity(const Tensor<T>& u, const Tensor<T>& v) {
  detail::require_same_shape(u, v, "cosine_similarity");
  T sim, nu, nv, dot;
  const std::size_t d = u.numel();
  detail::cosine_kernel(u.data().data(), v.data().data(), d, sim, nu, nv, dot);
  auto out = Tensor<T>::scalar(sim);
  if (detail::should_record<T>({&u, &v})) {
    detail::record(out, [ui = u.impl(), vi = v.impl(), oi = out.impl(), d, nu, nv, dot] {
      const T g = oi->grad[0];
      if (auto* gu = detail::grad_sink(ui))
        detail::cosine_backward(ui->data.data(), vi->data.data(), d, nu, nv, dot, g, gu->data());
      if (auto* gv = detail::grad_sink(vi))
        detail::cosine_backward(vi->data.data(), ui->data.data(), d, nv, nu, dot, g, gv->data());
    });
  }
  return out;
}

// Row-wise cosine similarity: a, b [N, D] -> [N].
template <class T>
Tensor<T> rowwise_cosine(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "rowwise_cosine");
  detail::require(a.rank() == 2, "rowwise_cosine: expected [N, D]");
  const std::size_t n = a.dim(0), d = a.dim(1);
  Tensor<T> out(Shape{n});
  std::vector<T> nus(n), nvs(n), dots(n);
  for (std::size_t r = 0; r < n; ++r)
    detail::cosine_kernel(a.data().data() + r * d, b.data().data() + r * d, d, out[r], nus[r], nvs[r],
                          dots[r]);
  if (detail::should_record<T>({&a, &b})) {
    detail::record(out, [ai = a.impl(), bi = b.impl(), oi = out.impl(), n, d, nus, nvs, dots] {
      const auto& g = oi->grad;
      auto* ga = detail::grad_sink(ai);
      auto* gb = detail::grad_sink(bi);
      for (std::size_t r = 0; r < n; ++r) {
        const T* ar = ai->data.data() + r * d;
        const T* br = bi->data.data() + r * d;
        if (ga) detail::cosine_backward(ar, br, d, nus[r], nvs[r], dots[r], g[r], ga->data() + r * d);
        if (gb) detail::cosine_backward(br, ar, d, nvs[r], nus[r], dots[r], g[r], gb->data() + r * d);
      }
    });
  }
  return out;
}

// All-pairs cosine similarity: a [M, E], b [K, E] -> [M, K].
template <class T>
Tensor<T> cosine_matrix(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(1),
                  "cosine_matrix: expected [M,E] and [K,E], got " + to_string(a.shape()) + " and " +
                      to_string(b.shape()));
  const std::size_t m = a.dim(0), kk = b.dim(0), e = a.dim(1);
  std::vector<T> na(m), nb(kk);
  auto norms = [e](const T* p, std::size_t rows, std::vector<T>& n) {
    for (std::size_t r = 0; r < rows; ++r) {
      T s = 0;
      for (std::size_t j = 0; j < e; ++j) s += p[r * e + j] * p[r * e + j];
      n[r] = std::sqrt(s);
    }
  };
  norms(a.data().data(), m, na);
  norms(b.data().data(), kk, nb);
  Tensor<T> out(Shape{m, kk});
  Buffer<T> dots(m * kk);
  for (std::size_t i = 0; i < m; ++i) {
    const T* ai = a.data().data() + i * e;
    for (std::size_t j = 0; j < kk; ++j) {
      const T* bj = b.data().data() + j * e;
      T acc = 0;
      for (std::size_t x = 0; x < e; ++x) acc += ai[x] * bj[x];
      dots[i * kk + j] = acc;
      out[i * kk + j] = acc / ((na[i] + T(detail::kCosineEps)) * (nb[j] + T(detail::kCosineEps)));
    }
  }
  if (detail::should_record<T>({&a, &b})) {
    detail::record(out, [ai = a.impl(), bi = b.impl(), oi = out.impl(), m, kk, e, na = std::move(na),
                         nb = std::move(nb), dots = std::move(dots)] {
      const auto& g = oi->grad;
      auto* ga = detail::grad_sink(ai);
      auto* gb = detail::grad_sink(bi);
      for (std::size_t i = 0; i < m; ++i) {
        const T* arow = ai->data.data() + i * e;
        for (std::size_t j = 0; j < kk; ++j) {
          const T* brow = bi->data.data() + j * e;
          const T gij = g[i * kk + j];
          if (gij == T(0)) continue;
          if (ga) detail::cosine_backward(arow, brow, e, na[i], nb[j], dots[i * kk + j], gij, ga->data() + i * e);
          if (gb) detail::cosine_backward(brow, arow, e, nb[j], na[i], dots[i * kk + j], gij, gb->data() + j * e);
        }
      }
    });
  }
  return out;
}

inline constexpr int kIgnoreLabel = -1;

// Mean over rows of -log softmax(logits[r])[target[r]], computed with max
// subtraction. logits [N, C] (or [C] with one target). Rows whose target is
// kIgnoreLabel are skipped; an all-ignored batch yields 0.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& targets) {
  const std::size_t c = logits.shape().empty() ? 0 : logits.shape().back();
  detail::require(c > 0, "cross_entropy: logits need a class dimension");
  const std::size_t n = logits.numel() / c;
  detail::require(targets.size() == n, "cross_entropy: " + std::to_string(targets.size()) +
                                           " targets for " + std::to_string(n) + " rows");
  Buffer<T> probs(logits.numel());
  T total = 0;
  std::size_t valid = 0;
  auto x = logits.data();
  for (std::size_t r = 0; r < n; ++r) {
    const int tgt = targets[r];
    if (tgt == kIgnoreLabel) continue;
    if (tgt < 0 || static_cast<std::size_t>(tgt) >= c)
      throw std::invalid_argument("cross_entropy: target " + std::to_string(tgt) +
                                  " outside [0, " + std::to_string(c) + ")");
    const T* xr = x.data() + r * c;
    T mx = *std::max_element(xr, xr + c);
    T z = 0;
    for (std::size_t j = 0; j < c; ++j) z += (probs[r * c + j] = std::exp(xr[j] - mx));
    for (std::size_t j = 0; j < c; ++j) probs[r * c + j] /= z;
    total += std::log(z) - (xr[tgt] - mx);
    ++valid;
  }
  auto out = Tensor<T>::scalar(valid ? total / static_cast<T>(valid) : T(0));
  if (valid && detail::should_record<T>({&logits})) {
    detail::record(out, [li = logits.impl(), oi = out.impl(), probs = std::move(probs), targets, n, c, valid] {
      const T g = oi->grad[0] / static_cast<T>(valid);
      auto& gl = *detail::grad_sink(li);
      for (std::size_t r = 0; r < n; ++r) {
        const int tgt = targets[r];
        if (tgt == kIgnoreLabel) continue;
        for (std::size_t j = 0; j < c; ++j) gl[r * c + j] += g * probs[r * c + j];
        gl[r * c + tgt] -= g;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Composite-specific primitives

// Interleaves groups of `group` content frames with one other frame each:
// content [B,C,group*S], other [B,C,S] -> [B,C,(group+1)*S] laid out as
// [c_1..c_group, o_1, c_{group+1}..c_{2 group}, o_2, ...].
template <class T>
Tensor<T> split_and_append(const Tensor<T>& content, const Tensor<T>& other, std::size_t group) {
  const auto sc = detail::as_seq3(content, "split_and_append");
  const auto so = detail::as_seq3(other, "split_and_append");
  detail::require(sc.b == so.b && sc.c == so.c,
                  "split_and_append: batch/channel mismatch " + to_string(content.shape()) + " vs " +
                      to_string(other.shape()));
  if (sc.t != group * so.t)
    throw std::invalid_argument("split_and_append: content length " + std::to_string(sc.t) +
                                " != " + std::to_string(group) + " x other length " + std::to_string(so.t));
  const std::size_t tout = sc.t + so.t;
  Tensor<T> out(detail::seq_shape(content, sc.b, sc.c, tout));
  auto cx = content.data();
  auto ox = other.data();
  auto o = out.data();
  for (std::size_t r = 0; r < sc.b * sc.c; ++r)
    for (std::size_t s = 0; s < so.t; ++s) {
      std::copy_n(cx.data() + r * sc.t + s * group, group, o.data() + r * tout + s * (group + 1));
      o[r * tout + s * (group + 1) + group] = ox[r * so.t + s];
    }
  if (detail::should_record<T>({&content, &other})) {
    detail::record(out, [ci = content.impl(), oi2 = other.impl(), outi = out.impl(), sc, so, group, tout] {
      const auto& g = outi->grad;
      auto* gc = detail::grad_sink(ci);
      auto* go = detail::grad_sink(oi2);
      for (std::size_t r = 0; r < sc.b * sc.c; ++r)
        for (std::size_t s = 0; s < so.t; ++s) {
          const T* gs = g.data() + r * tout + s * (group + 1);
          if (gc)
            for (std::size_t j = 0; j < group; ++j) (*gc)[r * sc.t + s * group + j] += gs[j];
          if (go) (*go)[r * so.t + s] += gs[group];
        }
    });
  }
  return out;
}

// Attention-weighted statistics: h [B,C,S], alpha [B,1,S] (rows summing to 1)
// -> [B, 2C] = [sum_t a_t h_t, sqrt(max(sum_t a_t h_t^2 - mean^2, floor))].
template <class T>
Tensor<T> weighted_stats(const Tensor<T>& h, const Tensor<T>& alpha, T variance_floor = T(1e-12)) {
  detail::require(h.rank() == 3 && alpha.rank() == 3, "weighted_stats: expected rank-3 inputs");
  const std::size_t b = h.dim(0), c = h.dim(1), s = h.dim(2);
  detail::require(alpha.dim(0) == b && alpha.dim(1) == 1 && alpha.dim(2) == s,
                  "weighted_stats: alpha must be [B,1,S]");
  detail::require(s >= 1, "weighted_stats: empty sequence");
  Tensor<T> out(Shape{b, 2 * c});
  std::vector<T> var(b * c);
  auto hs = h.data();
  auto as = alpha.data();
  auto o = out.data();
  for (std::size_t bb = 0; bb < b; ++bb)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* hr = hs.data() + (bb * c + ch) * s;
      const T* ar = as.data() + bb * s;
      T m = 0, m2 = 0;
      for (std::size_t t = 0; t < s; ++t) {
        m += ar[t] * hr[t];
        m2 += ar[t] * hr[t] * hr[t];
      }
      const T v = m2 - m * m;
      var[bb * c + ch] = v;
      o[bb * 2 * c + ch] = m;
      o[bb * 2 * c + c + ch] = std::sqrt(std::max(v, variance_floor));
    }
  if (detail::should_record<T>({&h, &alpha})) {
    detail::record(out, [hi = h.impl(), ai = alpha.impl(), oi = out.impl(), var = std::move(var), b, c, s,
                         variance_floor] {
      const auto& g = oi->grad;
      auto* gh = detail::grad_sink(hi);
      auto* ga = detail::grad_sink(ai);
      for (std::size_t bb = 0; bb < b; ++bb)
        for (std::size_t ch = 0; ch < c; ++ch) {
          const T* hr = hi->data.data() + (bb * c + ch) * s;
          const T* ar = ai->data.data() + bb * s;
          const T m = oi->data[bb * 2 * c + ch];
          const T sd = oi->data[bb * 2 * c + c + ch];
          const T gm = g[bb * 2 * c + ch];
          // d sd / d v = 1/(2 sd) above the floor, 0 below.
          const T gv = var[bb * c + ch] > variance_floor ? g[bb * 2 * c + c + ch] / (T(2) * sd) : T(0);
          // v = m2 - m^2: dv/dm2 = 1, dv/dm = -2m
          const T gm_total = gm - T(2) * m * gv;
          for (std::size_t t = 0; t < s; ++t) {
            if (gh) (*gh)[(bb * c + ch) * s + t] += ar[t] * (gm_total + T(2) * gv * hr[t]);
            if (ga) (*ga)[bb * s + t] += gm_total * hr[t] + gv * hr[t] * hr[t];
          }
        }
    });
  }
  return out;
}

// sum_l weights[l] * layers[l]; all layers share one shape, weights [L].
template <class T>
Tensor<T> weighted_sum(const std::vector<Tensor<T>>& layers, const Tensor<T>& weights) {
  detail::require(!layers.empty(), "weighted_sum: no layers");
  detail::require(weights.numel() == layers.size(),
                  "weighted_sum: " + std::to_string(weights.numel()) + " weights for " +
                      std::to_string(layers.size()) + " layers");
  const Shape& shape = layers.front().shape();
  for (const auto& l : layers)
    if (l.shape() != shape)
      throw std::invalid_argument("weighted_sum: layer shape " + to_string(l.shape()) + " != " +
                                  to_string(shape));
  Tensor<T> out(shape);
  auto o = out.data();
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const T w = weights[l];
    auto x = layers[l].data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] += w * x[i];
  }
  bool track = Tape<T>::active() != nullptr &&
               (weights.requires_grad() ||
                std::any_of(layers.begin(), layers.end(), [](const auto& l) { return l.requires_grad(); }));
  if (track) {
    std::vector<std::shared_ptr<TensorImpl<T>>> impls;
    for (const auto& l : layers) impls.push_back(l.impl());
    detail::record(out, [impls, wi = weights.impl(), oi = out.impl()] {
      const auto& g = oi->grad;
      auto* gw = detail::grad_sink(wi);
      for (std::size_t l = 0; l < impls.size(); ++l) {
        const auto& x = impls[l]->data;
        if (gw) {
          T acc = 0;
          for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * x[i];
          (*gw)[l] += acc;
        }
        if (auto* gx = detail::grad_sink(impls[l])) {
          const T w = wi->data[l];
          for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += w * g[i];
        }
      }
    });
  }
  return out;
}

}  // namespace jooci
