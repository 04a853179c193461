#pragma once

#include <cblas.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <initializer_list>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "crossray/tensor.hpp"

namespace crossray {

namespace detail {

template <std::floating_point T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, T alpha, const T* a,
          const T* b, T beta, T* c) {
  const auto ta = trans_a ? CblasTrans : CblasNoTrans;
  const auto tb = trans_b ? CblasTrans : CblasNoTrans;
  const auto lda = static_cast<int>(trans_a ? m : k);
  const auto ldb = static_cast<int>(trans_b ? k : n);
  const auto mi = static_cast<int>(m), ni = static_cast<int>(n), ki = static_cast<int>(k);
  if constexpr (std::is_same_v<T, float>) {
    cblas_sgemm(CblasRowMajor, ta, tb, mi, ni, ki, alpha, a, lda, b, ldb, beta, c, ni);
  } else if constexpr (std::is_same_v<T, double>) {
    cblas_dgemm(CblasRowMajor, ta, tb, mi, ni, ki, alpha, a, lda, b, ldb, beta, c, ni);
  } else {
    // Generic fallback for long double.
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        T acc = 0;
        for (std::size_t p = 0; p < k; ++p) {
          const T av = trans_a ? a[p * m + i] : a[i * k + p];
          const T bv = trans_b ? b[j * k + p] : b[p * n + j];
          acc += av * bv;
        }
        c[i * n + j] = alpha * acc + (beta == T(0) ? T(0) : beta * c[i * n + j]);
      }
    }
  }
}

template <std::floating_point T>
void require_finite(OpKind kind, const std::vector<T>& values) {
  // Non-finite iff all exponent bits are set; integer or-reduction vectorises.
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  constexpr U mask = sizeof(T) == 4 ? U(0x7f800000u) : U(0x7ff0000000000000ull);
  U bad = 0;
  for (T v : values) bad |= static_cast<U>((std::bit_cast<U>(v) & mask) == mask);
  if (bad) throw NonFiniteError(std::string(op_name(kind)) + ": non-finite output");
}

/// Validates the output, and records a node if any input is tape-tracked.
template <std::floating_point T>
Tensor<T> finish(OpKind kind, std::initializer_list<const Tensor<T>*> inputs, Tensor<T> out,
                 typename Tape<T>::Backward backward) {
  require_finite(kind, *out.storage());
  Tape<T>* tape = nullptr;
  for (const auto* in : inputs) {
    if (!in->tracked()) continue;
    if (tape != nullptr && in->tape() != tape) {
      throw Error(std::string(op_name(kind)) + ": inputs recorded on different tapes");
    }
    tape = in->tape();
  }
  if (tape == nullptr) return out;
  std::vector<NodeId> ids;
  ids.reserve(inputs.size());
  for (const auto* in : inputs) ids.push_back(in->tracked() ? in->node() : kNoNode);
  const NodeId id = tape->record(kind, std::move(ids), out.shape(), std::move(backward));
  return out.attached(tape, id);
}

template <std::floating_point T>
Tensor<T> finish_list(OpKind kind, const std::vector<Tensor<T>>& inputs, Tensor<T> out,
                      typename Tape<T>::Backward backward) {
  require_finite(kind, *out.storage());
  Tape<T>* tape = nullptr;
  for (const auto& in : inputs) {
    if (!in.tracked()) continue;
    if (tape != nullptr && in.tape() != tape) {
      throw Error(std::string(op_name(kind)) + ": inputs recorded on different tapes");
    }
    tape = in.tape();
  }
  if (tape == nullptr) return out;
  std::vector<NodeId> ids;
  for (const auto& in : inputs) ids.push_back(in.tracked() ? in.node() : kNoNode);
  const NodeId id = tape->record(kind, std::move(ids), out.shape(), std::move(backward));
  return out.attached(tape, id);
}

[[noreturn]] inline void shape_error(OpKind kind, const std::string& what) {
  throw ShapeError(std::string(op_name(kind)) + ": " + what);
}

struct BroadcastPlan {
  Shape out;
  std::vector<std::size_t> stride_a;
  std::vector<std::size_t> stride_b;
  bool same = false;
};

inline BroadcastPlan plan_broadcast(OpKind kind, const Shape& a, const Shape& b) {
  BroadcastPlan p;
  if (a == b) {
    p.out = a;
    p.same = true;
    return p;
  }
  const std::size_t rank = std::max(a.size(), b.size());
  p.out.assign(rank, 1);
  Shape pa(rank, 1), pb(rank, 1);
  std::copy(a.begin(), a.end(), pa.begin() + static_cast<std::ptrdiff_t>(rank - a.size()));
  std::copy(b.begin(), b.end(), pb.begin() + static_cast<std::ptrdiff_t>(rank - b.size()));
  for (std::size_t i = 0; i < rank; ++i) {
    if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1) {
      shape_error(kind, "cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    p.out[i] = std::max(pa[i], pb[i]);
  }
  auto strides = [rank](const Shape& s) {
    std::vector<std::size_t> st(rank, 0);
    std::size_t acc = 1;
    for (std::size_t i = rank; i-- > 0;) {
      st[i] = s[i] == 1 ? 0 : acc;
      acc *= s[i];
    }
    return st;
  };
  p.stride_a = strides(pa);
  p.stride_b = strides(pb);
  return p;
}

/// Calls f(out_index, a_index, b_index) for every output element.
template <class F>
void for_each_broadcast(const BroadcastPlan& p, F&& f) {
  const std::size_t total = shape_numel(p.out);
  if (p.same) {
    for (std::size_t i = 0; i < total; ++i) f(i, i, i);
    return;
  }
  const std::size_t rank = p.out.size();
  const std::size_t inner = p.out[rank - 1];
  const std::size_t sa = p.stride_a[rank - 1], sb = p.stride_b[rank - 1];
  std::vector<std::size_t> idx(rank, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t base = 0; base < total; base += inner) {
    for (std::size_t j = 0; j < inner; ++j) f(base + j, ia + j * sa, ib + j * sb);
    // Advance the odometer over all but the innermost dimension.
    for (std::size_t d = rank - 1; d-- > 0;) {
      ++idx[d];
      ia += p.stride_a[d];
      ib += p.stride_b[d];
      if (idx[d] < p.out[d]) break;
      ia -= p.stride_a[d] * idx[d];
      ib -= p.stride_b[d] * idx[d];
      idx[d] = 0;
    }
  }
}

/// View of a tensor as outer x len x inner around `axis`.
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

inline std::size_t resolve_axis(OpKind kind, int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) shape_error(kind, "axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  return static_cast<std::size_t>(a);
}

template <std::floating_point T, class Fwd, class Deriv>
Tensor<T> unary(OpKind kind, const Tensor<T>& x, Fwd fwd, Deriv deriv) {
  std::vector<T> out(x.numel());
  auto xs = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xs[i]);
  Tensor<T> result(x.shape(), std::move(out));
  auto xin = x.storage();
  auto yout = result.storage();
  return finish<T>(kind, {&x}, result, [xin, yout, deriv](std::span<const T> g, const GradSlots<T>& gi) {
    if (gi[0] == nullptr) return;
    const T* __restrict xs = xin->data();
    const T* __restrict ys = yout->data();
    const T* __restrict gs = g.data();
    T* __restrict dst = gi[0];
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += gs[i] * deriv(xs[i], ys[i]);
  });
}

struct ConvGeom {
  std::size_t batch = 1, cin = 0, h = 0, w = 0, cout = 0;
};

template <std::floating_point T>
void im2col3(const T* x, std::size_t c, std::size_t h, std::size_t w, T* col) {
  const std::size_t hw = h * w;
  for (std::size_t ci = 0; ci < c; ++ci) {
    for (std::size_t ky = 0; ky < 3; ++ky) {
      for (std::size_t kx = 0; kx < 3; ++kx) {
        T* row = col + ((ci * 9) + ky * 3 + kx) * hw;
        for (std::size_t y = 0; y < h; ++y) {
          const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + ky) - 1;
          for (std::size_t xx = 0; xx < w; ++xx) {
            const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(xx + kx) - 1;
            const bool inside = sy >= 0 && sy < static_cast<std::ptrdiff_t>(h) && sx >= 0 &&
                                sx < static_cast<std::ptrdiff_t>(w);
            row[y * w + xx] = inside ? x[ci * hw + static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx)] : T(0);
          }
        }
      }
    }
  }
}

template <std::floating_point T>
void col2im3(const T* col, std::size_t c, std::size_t h, std::size_t w, T* dx) {
  const std::size_t hw = h * w;
  for (std::size_t ci = 0; ci < c; ++ci) {
    for (std::size_t ky = 0; ky < 3; ++ky) {
      for (std::size_t kx = 0; kx < 3; ++kx) {
        const T* row = col + ((ci * 9) + ky * 3 + kx) * hw;
        for (std::size_t y = 0; y < h; ++y) {
          const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + ky) - 1;
          if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t xx = 0; xx < w; ++xx) {
            const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(xx + kx) - 1;
            if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(w)) continue;
            dx[ci * hw + static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx)] += row[y * w + xx];
          }
        }
      }
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// (M x K) . (K x N) -> (M x N)
template <std::floating_point T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  constexpr auto kind = OpKind::kMatmul;
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    detail::shape_error(kind, "incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n);
  detail::gemm<T>(false, false, m, n, k, T(1), a.data(), b.data(), T(0), out.data());
  auto as = a.storage();
  auto bs = b.storage();
  return detail::finish<T>(kind, {&a, &b}, Tensor<T>({m, n}, std::move(out)),
                           [as, bs, m, n, k](std::span<const T> g, const GradSlots<T>& gi) {
                             if (gi[0]) detail::gemm<T>(false, true, m, k, n, T(1), g.data(), bs->data(), T(1), gi[0]);
                             if (gi[1]) detail::gemm<T>(true, false, k, n, m, T(1), as->data(), g.data(), T(1), gi[1]);
                           });
}

template <std::floating_point T>
Tensor<T> transpose(const Tensor<T>& x) {
  constexpr auto kind = OpKind::kTranspose;
  if (x.rank() != 2) detail::shape_error(kind, "expected a matrix, got " + shape_str(x.shape()));
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<T> out(r * c);
  auto xs = x.values();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = xs[i * c + j];
  return detail::finish<T>(kind, {&x}, Tensor<T>({c, r}, std::move(out)),
                           [r, c](std::span<const T> g, const GradSlots<T>& gi) {
                             if (!gi[0]) return;
                             for (std::size_t i = 0; i < r; ++i)
                               for (std::size_t j = 0; j < c; ++j) gi[0][i * c + j] += g[j * r + i];
                           });
}

/// 3x3 convolution, stride 1, zero padding 1. `x` is C x H x W or N x C x H x W,
/// `weight` is O x C x 3 x 3, `bias` (optional) has O entries.
template <std::floating_point T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const std::optional<Tensor<T>>& bias = std::nullopt) {
  constexpr auto kind = OpKind::kConv2d;
  detail::ConvGeom geo;
  if (x.rank() == 3) {
    geo.cin = x.dim(0), geo.h = x.dim(1), geo.w = x.dim(2);
  } else if (x.rank() == 4) {
    geo.batch = x.dim(0), geo.cin = x.dim(1), geo.h = x.dim(2), geo.w = x.dim(3);
  } else {
    detail::shape_error(kind, "input must be CxHxW or NxCxHxW, got " + shape_str(x.shape()));
  }
  if (weight.rank() != 4 || weight.dim(1) != geo.cin || weight.dim(2) != 3 || weight.dim(3) != 3) {
    detail::shape_error(kind, "weight " + shape_str(weight.shape()) + " incompatible with input " + shape_str(x.shape()));
  }
  geo.cout = weight.dim(0);
  if (bias && (bias->numel() != geo.cout)) {
    detail::shape_error(kind, "bias " + shape_str(bias->shape()) + " does not match " + std::to_string(geo.cout) + " output channels");
  }
  const std::size_t hw = geo.h * geo.w, kdim = geo.cin * 9;
  std::vector<T> out(geo.batch * geo.cout * hw);
  std::vector<T> col(kdim * hw);
  for (std::size_t n = 0; n < geo.batch; ++n) {
    detail::im2col3(x.data() + n * geo.cin * hw, geo.cin, geo.h, geo.w, col.data());
    T* o = out.data() + n * geo.cout * hw;
    detail::gemm<T>(false, false, geo.cout, hw, kdim, T(1), weight.data(), col.data(), T(0), o);
    if (bias) {
      for (std::size_t co = 0; co < geo.cout; ++co) {
        const T bv = (*bias)[co];
        for (std::size_t i = 0; i < hw; ++i) o[co * hw + i] += bv;
      }
    }
  }
  Shape out_shape = x.rank() == 3 ? Shape{geo.cout, geo.h, geo.w} : Shape{geo.batch, geo.cout, geo.h, geo.w};
  auto xs = x.storage();
  auto ws = weight.storage();
  auto backward = [xs, ws, geo](std::span<const T> g, const GradSlots<T>& gi) {
    const std::size_t hw = geo.h * geo.w, kdim = geo.cin * 9;
    std::vector<T> col(kdim * hw), dcol;
    if (gi[0]) dcol.resize(kdim * hw);
    for (std::size_t n = 0; n < geo.batch; ++n) {
      const T* gn = g.data() + n * geo.cout * hw;
      if (gi[1]) {
        detail::im2col3(xs->data() + n * geo.cin * hw, geo.cin, geo.h, geo.w, col.data());
        detail::gemm<T>(false, true, geo.cout, kdim, hw, T(1), gn, col.data(), T(1), gi[1]);
      }
      if (gi[0]) {
        detail::gemm<T>(true, false, kdim, hw, geo.cout, T(1), ws->data(), gn, T(0), dcol.data());
        detail::col2im3(dcol.data(), geo.cin, geo.h, geo.w, gi[0] + n * geo.cin * hw);
      }
      if (gi.size() > 2 && gi[2]) {
        for (std::size_t co = 0; co < geo.cout; ++co) {
          T acc = 0;
          for (std::size_t i = 0; i < hw; ++i) acc += gn[co * hw + i];
          gi[2][co] += acc;
        }
      }
    }
  };
  Tensor<T> result(std::move(out_shape), std::move(out));
  if (bias) return detail::finish<T>(kind, {&x, &weight, &*bias}, std::move(result), backward);
  return detail::finish<T>(kind, {&x, &weight}, std::move(result), backward);
}

template <std::floating_point T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  return conv2d(x, weight, std::optional<Tensor<T>>(bias));
}

// ---------------------------------------------------------------------------
// Elementwise

template <std::floating_point T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const auto plan = detail::plan_broadcast(OpKind::kAdd, a.shape(), b.shape());
  std::vector<T> out(shape_numel(plan.out));
  auto av = a.values(), bv = b.values();
  detail::for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = av[i] + bv[j]; });
  return detail::finish<T>(OpKind::kAdd, {&a, &b}, Tensor<T>(plan.out, std::move(out)),
                           [plan](std::span<const T> g, const GradSlots<T>& gi) {
                             detail::for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t j) {
                               if (gi[0]) gi[0][i] += g[o];
                               if (gi[1]) gi[1][j] += g[o];
                             });
                           });
}

template <std::floating_point T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  const auto plan = detail::plan_broadcast(OpKind::kSub, a.shape(), b.shape());
  std::vector<T> out(shape_numel(plan.out));
  auto av = a.values(), bv = b.values();
  detail::for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = av[i] - bv[j]; });
  return detail::finish<T>(OpKind::kSub, {&a, &b}, Tensor<T>(plan.out, std::move(out)),
                           [plan](std::span<const T> g, const GradSlots<T>& gi) {
                             detail::for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t j) {
                               if (gi[0]) gi[0][i] += g[o];
                               if (gi[1]) gi[1][j] -= g[o];
                             });
                           });
}

template <std::floating_point T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  const auto plan = detail::plan_broadcast(OpKind::kMul, a.shape(), b.shape());
  std::vector<T> out(shape_numel(plan.out));
  auto av = a.values(), bv = b.values();
  detail::for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = av[i] * bv[j]; });
  auto as = a.storage();
  auto bs = b.storage();
  return detail::finish<T>(OpKind::kMul, {&a, &b}, Tensor<T>(plan.out, std::move(out)),
                           [plan, as, bs](std::span<const T> g, const GradSlots<T>& gi) {
                             detail::for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t j) {
                               if (gi[0]) gi[0][i] += g[o] * (*bs)[j];
                               if (gi[1]) gi[1][j] += g[o] * (*as)[i];
                             });
                           });
}

template <std::floating_point T>
Tensor<T> scalar_mul(const Tensor<T>& x, T c) {
  return detail::unary<T>(
      OpKind::kScalarMul, x, [c](T v) { return c * v; }, [c](T, T) { return c; });
}

template <std::floating_point T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary<T>(
      OpKind::kRelu, x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <std::floating_point T>
Tensor<T> softplus(const Tensor<T>& x) {
  return detail::unary<T>(
      OpKind::kSoftplus, x,
      [](T v) { return v > T(0) ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); },
      [](T v, T) { return v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v)); });
}

template <std::floating_point T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary<T>(
      OpKind::kSigmoid, x,
      [](T v) { return v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v)); },
      [](T, T s) { return s * (T(1) - s); });
}

template <std::floating_point T>
Tensor<T> sin(const Tensor<T>& x) {
  return detail::unary<T>(
      OpKind::kSin, x, [](T v) { return std::sin(v); }, [](T v, T) { return std::cos(v); });
}

template <std::floating_point T>
Tensor<T> cos(const Tensor<T>& x) {
  return detail::unary<T>(
      OpKind::kCos, x, [](T v) { return std::cos(v); }, [](T v, T) { return -std::sin(v); });
}

template <std::floating_point T>
Tensor<T> exp(const Tensor<T>& x) {
  return detail::unary<T>(
      OpKind::kExp, x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

// ---------------------------------------------------------------------------
// Reductions and layout

/// Sum of all entries (shape {1}), or along `axis` with that dimension removed.
template <std::floating_point T>
Tensor<T> sum(const Tensor<T>& x, std::optional<int> axis = std::nullopt) {
  constexpr auto kind = OpKind::kSum;
  if (!axis) {
    T acc = 0;
    for (T v : x.values()) acc += v;
    const std::size_t n = x.numel();
    return detail::finish<T>(kind, {&x}, Tensor<T>::scalar(acc), [n](std::span<const T> g, const GradSlots<T>& gi) {
      if (!gi[0]) return;
      for (std::size_t i = 0; i < n; ++i) gi[0][i] += g[0];
    });
  }
  const std::size_t ax = detail::resolve_axis(kind, *axis, x.rank());
  const auto sp = detail::split_axis(x.shape(), ax);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
  if (out_shape.empty()) out_shape = {1};
  std::vector<T> out(sp.outer * sp.inner, T(0));
  auto xs = x.values();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t l = 0; l < sp.len; ++l)
      for (std::size_t i = 0; i < sp.inner; ++i) out[o * sp.inner + i] += xs[(o * sp.len + l) * sp.inner + i];
  return detail::finish<T>(kind, {&x}, Tensor<T>(out_shape, std::move(out)),
                           [sp](std::span<const T> g, const GradSlots<T>& gi) {
                             if (!gi[0]) return;
                             for (std::size_t o = 0; o < sp.outer; ++o)
                               for (std::size_t l = 0; l < sp.len; ++l)
                                 for (std::size_t i = 0; i < sp.inner; ++i)
                                   gi[0][(o * sp.len + l) * sp.inner + i] += g[o * sp.inner + i];
                           });
}

template <std::floating_point T>
Tensor<T> mean(const Tensor<T>& x, std::optional<int> axis = std::nullopt) {
  constexpr auto kind = OpKind::kMean;
  std::size_t count = x.numel();
  std::size_t inner = 1, len = 1, outer = 1;
  Shape out_shape{1};
  if (axis) {
    const std::size_t ax = detail::resolve_axis(kind, *axis, x.rank());
    const auto sp = detail::split_axis(x.shape(), ax);
    outer = sp.outer, len = sp.len, inner = sp.inner;
    count = sp.len;
    out_shape = x.shape();
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
    if (out_shape.empty()) out_shape = {1};
  } else {
    len = x.numel();
  }
  const T scale = T(1) / static_cast<T>(count);
  std::vector<T> out(outer * inner, T(0));
  auto xs = x.values();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += xs[(o * len + l) * inner + i];
  for (auto& v : out) v *= scale;
  return detail::finish<T>(kind, {&x}, Tensor<T>(out_shape, std::move(out)),
                           [outer, len, inner, scale](std::span<const T> g, const GradSlots<T>& gi) {
                             if (!gi[0]) return;
                             for (std::size_t o = 0; o < outer; ++o)
                               for (std::size_t l = 0; l < len; ++l)
                                 for (std::size_t i = 0; i < inner; ++i)
                                   gi[0][(o * len + l) * inner + i] += g[o * inner + i] * scale;
                           });
}

template <std::floating_point T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  constexpr auto kind = OpKind::kReshape;
  if (shape_numel(shape) != x.numel()) {
    detail::shape_error(kind, "cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  return detail::finish<T>(kind, {&x}, x.with_shape(std::move(shape)), [](std::span<const T> g, const GradSlots<T>& gi) {
    if (!gi[0]) return;
    for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i];
  });
}

template <std::floating_point T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, int axis) {
  constexpr auto kind = OpKind::kConcat;
  if (xs.empty()) detail::shape_error(kind, "empty input list");
  const std::size_t rank = xs[0].rank();
  const std::size_t ax = detail::resolve_axis(kind, axis, rank);
  Shape out_shape = xs[0].shape();
  out_shape[ax] = 0;
  std::vector<std::size_t> lens;
  for (const auto& t : xs) {
    if (t.rank() != rank) detail::shape_error(kind, "rank mismatch " + shape_str(xs[0].shape()) + " vs " + shape_str(t.shape()));
    for (std::size_t d = 0; d < rank; ++d) {
      if (d != ax && t.dim(d) != xs[0].dim(d)) {
        detail::shape_error(kind, "shape mismatch " + shape_str(xs[0].shape()) + " vs " + shape_str(t.shape()));
      }
    }
    lens.push_back(t.dim(ax));
    out_shape[ax] += t.dim(ax);
  }
  const auto sp = detail::split_axis(out_shape, ax);
  std::vector<T> out(shape_numel(out_shape));
  std::size_t offset = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    auto v = xs[k].values();
    const std::size_t chunk = lens[k] * sp.inner;
    for (std::size_t o = 0; o < sp.outer; ++o) {
      std::copy_n(v.data() + o * chunk, chunk, out.data() + o * sp.len * sp.inner + offset * sp.inner);
    }
    offset += lens[k];
  }
  return detail::finish_list<T>(kind, xs, Tensor<T>(out_shape, std::move(out)),
                                [sp, lens](std::span<const T> g, const GradSlots<T>& gi) {
                                  std::size_t offset = 0;
                                  for (std::size_t k = 0; k < lens.size(); ++k) {
                                    const std::size_t chunk = lens[k] * sp.inner;
                                    if (gi[k]) {
                                      for (std::size_t o = 0; o < sp.outer; ++o) {
                                        const T* src = g.data() + o * sp.len * sp.inner + offset * sp.inner;
                                        T* dst = gi[k] + o * chunk;
                                        for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
                                      }
                                    }
                                    offset += lens[k];
                                  }
                                });
}

/// C x H x W -> C x out_h x out_w, averaging over bins [floor(i*H/oh), ceil((i+1)*H/oh)).
template <std::floating_point T>
Tensor<T> adaptive_avg_pool(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
  constexpr auto kind = OpKind::kAdaptiveAvgPool;
  if (out_h < 1 || out_w < 1) detail::shape_error(kind, "output grid must be at least 1x1");
  if (x.rank() != 3) detail::shape_error(kind, "expected CxHxW, got " + shape_str(x.shape()));
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (out_h > h || out_w > w) {
    detail::shape_error(kind, "output grid larger than input " + shape_str(x.shape()));
  }
  auto bins = [](std::size_t n, std::size_t k) {
    std::vector<std::pair<std::size_t, std::size_t>> b(k);
    for (std::size_t i = 0; i < k; ++i) b[i] = {(i * n) / k, ((i + 1) * n + k - 1) / k};
    return b;
  };
  const auto by = bins(h, out_h), bx = bins(w, out_w);
  std::vector<T> out(c * out_h * out_w);
  auto xs = x.values();
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t oy = 0; oy < out_h; ++oy)
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        T acc = 0;
        for (std::size_t y = by[oy].first; y < by[oy].second; ++y)
          for (std::size_t xx = bx[ox].first; xx < bx[ox].second; ++xx) acc += xs[(ci * h + y) * w + xx];
        const auto count = static_cast<T>((by[oy].second - by[oy].first) * (bx[ox].second - bx[ox].first));
        out[(ci * out_h + oy) * out_w + ox] = acc / count;
      }
  return detail::finish<T>(kind, {&x}, Tensor<T>({c, out_h, out_w}, std::move(out)),
                           [by, bx, c, h, w, out_h, out_w](std::span<const T> g, const GradSlots<T>& gi) {
                             if (!gi[0]) return;
                             for (std::size_t ci = 0; ci < c; ++ci)
                               for (std::size_t oy = 0; oy < out_h; ++oy)
                                 for (std::size_t ox = 0; ox < out_w; ++ox) {
                                   const auto count = static_cast<T>((by[oy].second - by[oy].first) *
                                                                     (bx[ox].second - bx[ox].first));
                                   const T gv = g[(ci * out_h + oy) * out_w + ox] / count;
                                   for (std::size_t y = by[oy].first; y < by[oy].second; ++y)
                                     for (std::size_t xx = bx[ox].first; xx < bx[ox].second; ++xx)
                                       gi[0][(ci * h + y) * w + xx] += gv;
                                 }
                           });
}

/// C x N (or C x H x W, flattened spatially) -> C x C sample covariance,
/// mean-centred per channel, divisor N - 1.
template <std::floating_point T>
Tensor<T> spatial_covariance(const Tensor<T>& x) {
  constexpr auto kind = OpKind::kSpatialCovariance;
  if (x.rank() < 2) detail::shape_error(kind, "expected C x N or C x H x W, got " + shape_str(x.shape()));
  const std::size_t c = x.dim(0), n = x.numel() / c;
  if (n < 2) detail::shape_error(kind, "need at least 2 spatial positions, got " + shape_str(x.shape()));
  auto centered = std::make_shared<std::vector<T>>(x.numel());
  auto xs = x.values();
  for (std::size_t ci = 0; ci < c; ++ci) {
    T mu = 0;
    for (std::size_t i = 0; i < n; ++i) mu += xs[ci * n + i];
    mu /= static_cast<T>(n);
    for (std::size_t i = 0; i < n; ++i) (*centered)[ci * n + i] = xs[ci * n + i] - mu;
  }
  std::vector<T> out(c * c);
  const T scale = T(1) / static_cast<T>(n - 1);
  detail::gemm<T>(false, true, c, c, n, scale, centered->data(), centered->data(), T(0), out.data());
  // Symmetrize exactly; gemm may round the two triangles differently.
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t j = i + 1; j < c; ++j) out[j * c + i] = out[i * c + j];
  return detail::finish<T>(kind, {&x}, Tensor<T>({c, c}, std::move(out)),
                           [centered, c, n, scale](std::span<const T> g, const GradSlots<T>& gi) {
                             if (!gi[0]) return;
                             std::vector<T> gs(c * c);
                             for (std::size_t i = 0; i < c; ++i)
                               for (std::size_t j = 0; j < c; ++j) gs[i * c + j] = g[i * c + j] + g[j * c + i];
                             detail::gemm<T>(false, false, c, n, c, scale, gs.data(), centered->data(), T(1), gi[0]);
                           });
}

template <std::floating_point T>
Tensor<T> l1_norm(const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.values()) acc += std::abs(v);
  auto xs = x.storage();
  return detail::finish<T>(OpKind::kL1Norm, {&x}, Tensor<T>::scalar(acc),
                           [xs](std::span<const T> g, const GradSlots<T>& gi) {
                             if (!gi[0]) return;
                             for (std::size_t i = 0; i < xs->size(); ++i) {
                               const T v = (*xs)[i];
                               gi[0][i] += g[0] * (v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)));
                             }
                           });
}

template <std::floating_point T>
Tensor<T> squared_l2_norm(const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.values()) acc += v * v;
  auto xs = x.storage();
  return detail::finish<T>(OpKind::kSquaredL2Norm, {&x}, Tensor<T>::scalar(acc),
                           [xs](std::span<const T> g, const GradSlots<T>& gi) {
                             if (!gi[0]) return;
                             for (std::size_t i = 0; i < xs->size(); ++i) gi[0][i] += T(2) * g[0] * (*xs)[i];
                           });
}

/// Continuous (row, col) sampling position; integer values address pixel centres.
using PixelCoord = std::array<double, 2>;

/// Bilinear samples of an H x W or C x H x W map at `coords` -> C x N
/// (C = 1 for a 2-D map). Coordinates are clamped to the map.
template <std::floating_point T>
Tensor<T> bilinear_sample(const Tensor<T>& map, const std::vector<PixelCoord>& coords) {
  constexpr auto kind = OpKind::kBilinearSample;
  if (coords.empty()) detail::shape_error(kind, "empty coordinate list");
  std::size_t c = 1, h = 0, w = 0;
  if (map.rank() == 2) {
    h = map.dim(0), w = map.dim(1);
  } else if (map.rank() == 3) {
    c = map.dim(0), h = map.dim(1), w = map.dim(2);
  } else {
    detail::shape_error(kind, "expected HxW or CxHxW map, got " + shape_str(map.shape()));
  }
  struct Tap {
    std::size_t i00, i01, i10, i11;
    double w00, w01, w10, w11;
  };
  std::vector<Tap> taps(coords.size());
  for (std::size_t k = 0; k < coords.size(); ++k) {
    const double r = std::clamp(coords[k][0], 0.0, static_cast<double>(h - 1));
    const double q = std::clamp(coords[k][1], 0.0, static_cast<double>(w - 1));
    const auto r0 = static_cast<std::size_t>(std::floor(r));
    const auto q0 = static_cast<std::size_t>(std::floor(q));
    const std::size_t r1 = std::min(r0 + 1, h - 1), q1 = std::min(q0 + 1, w - 1);
    const double fr = r - static_cast<double>(r0), fq = q - static_cast<double>(q0);
    taps[k] = {r0 * w + q0, r0 * w + q1, r1 * w + q0, r1 * w + q1,
               (1 - fr) * (1 - fq), (1 - fr) * fq, fr * (1 - fq), fr * fq};
  }
  const std::size_t n = coords.size(), hw = h * w;
  std::vector<T> out(c * n);
  auto ms = map.values();
  for (std::size_t ci = 0; ci < c; ++ci) {
    const T* m = ms.data() + ci * hw;
    for (std::size_t k = 0; k < n; ++k) {
      const auto& t = taps[k];
      out[ci * n + k] = static_cast<T>(t.w00) * m[t.i00] + static_cast<T>(t.w01) * m[t.i01] +
                        static_cast<T>(t.w10) * m[t.i10] + static_cast<T>(t.w11) * m[t.i11];
    }
  }
  return detail::finish<T>(kind, {&map}, Tensor<T>({c, n}, std::move(out)),
                           [taps, c, n, hw](std::span<const T> g, const GradSlots<T>& gi) {
                             if (!gi[0]) return;
                             for (std::size_t ci = 0; ci < c; ++ci) {
                               T* d = gi[0] + ci * hw;
                               for (std::size_t k = 0; k < n; ++k) {
                                 const auto& t = taps[k];
                                 const T gv = g[ci * n + k];
                                 d[t.i00] += static_cast<T>(t.w00) * gv;
                                 d[t.i01] += static_cast<T>(t.w01) * gv;
                                 d[t.i10] += static_cast<T>(t.w10) * gv;
                                 d[t.i11] += static_cast<T>(t.w11) * gv;
                               }
                             }
                           });
}

// ---------------------------------------------------------------------------
// Generic dispatch over the closed op vocabulary.

struct OpAttrs {
  Shape shape;                      // reshape target
  std::optional<int> axis;          // sum/mean/concat
  double scalar = 1.0;              // scalar-mul factor
  std::size_t out_h = 1, out_w = 1; // adaptive-average-pool grid
  std::vector<PixelCoord> coords;   // bilinear-sample positions
};

template <std::floating_point T>
Tensor<T> apply_op(OpKind kind, const std::vector<Tensor<T>>& in, const OpAttrs& attrs = {}) {
  auto need = [&](std::size_t lo, std::size_t hi) {
    if (in.size() < lo || in.size() > hi) {
      detail::shape_error(kind, "expected " + std::to_string(lo) + (lo == hi ? "" : "-" + std::to_string(hi)) +
                                    " inputs, got " + std::to_string(in.size()));
    }
  };
  switch (kind) {
    case OpKind::kMatmul: need(2, 2); return matmul(in[0], in[1]);
    case OpKind::kConv2d:
      need(2, 3);
      return conv2d(in[0], in[1], in.size() == 3 ? std::optional<Tensor<T>>(in[2]) : std::nullopt);
    case OpKind::kAdd: need(2, 2); return add(in[0], in[1]);
    case OpKind::kSub: need(2, 2); return sub(in[0], in[1]);
    case OpKind::kMul: need(2, 2); return mul(in[0], in[1]);
    case OpKind::kScalarMul: need(1, 1); return scalar_mul(in[0], static_cast<T>(attrs.scalar));
    case OpKind::kRelu: need(1, 1); return relu(in[0]);
    case OpKind::kSoftplus: need(1, 1); return softplus(in[0]);
    case OpKind::kSigmoid: need(1, 1); return sigmoid(in[0]);
    case OpKind::kSin: need(1, 1); return sin(in[0]);
    case OpKind::kCos: need(1, 1); return cos(in[0]);
    case OpKind::kExp: need(1, 1); return exp(in[0]);
    case OpKind::kMean: need(1, 1); return mean(in[0], attrs.axis);
    case OpKind::kSum: need(1, 1); return sum(in[0], attrs.axis);
    case OpKind::kReshape: need(1, 1); return reshape(in[0], attrs.shape);
    case OpKind::kConcat: need(1, in.size() + 1); return concat(in, attrs.axis.value_or(0));
    case OpKind::kAdaptiveAvgPool: need(1, 1); return adaptive_avg_pool(in[0], attrs.out_h, attrs.out_w);
    case OpKind::kSpatialCovariance: need(1, 1); return spatial_covariance(in[0]);
    case OpKind::kL1Norm: need(1, 1); return l1_norm(in[0]);
    case OpKind::kSquaredL2Norm: need(1, 1); return squared_l2_norm(in[0]);
    case OpKind::kBilinearSample: need(1, 1); return bilinear_sample(in[0], attrs.coords);
    case OpKind::kTranspose: need(1, 1); return transpose(in[0]);
    case OpKind::kLeaf: break;
  }
  throw Error(std::string("apply_op: unsupported kind ") + op_name(kind));
}

// ---------------------------------------------------------------------------
// Reverse pass

/// Gradients of a scalar `loss` for every leaf on `tape`; leaves the loss
/// does not reach get a zero tensor.
template <std::floating_point T>
std::map<NodeId, Tensor<T>> backprop(Tape<T>& tape, const Tensor<T>& loss) {
  if (!loss.tracked() || loss.tape() != &tape) throw Error("backprop: loss is not recorded on this tape");
  if (loss.numel() != 1) throw ShapeError("backprop: loss must be scalar, got " + shape_str(loss.shape()));
  std::vector<std::vector<T>> grads(tape.size());
  grads[static_cast<std::size_t>(loss.node())].assign(1, T(1));
  for (NodeId id = loss.node(); id >= 0; --id) {
    auto& g = grads[static_cast<std::size_t>(id)];
    const auto& node = tape.node(id);
    if (g.empty() || node.kind == OpKind::kLeaf) continue;
    GradSlots<T> slots;
    slots.reserve(node.inputs.size());
    for (NodeId in : node.inputs) {
      if (in == kNoNode) {
        slots.push_back(nullptr);
        continue;
      }
      if (in >= id) throw Error("backprop: tape is not topologically ordered");
      auto& gin = grads[static_cast<std::size_t>(in)];
      if (gin.empty()) gin.assign(tape.node(in).numel, T(0));
      slots.push_back(gin.data());
    }
    node.backward(g, slots);
    std::vector<T>().swap(g);
  }
  std::map<NodeId, Tensor<T>> out;
  for (NodeId id = 0; id < static_cast<NodeId>(tape.size()); ++id) {
    const auto& node = tape.node(id);
    if (node.kind != OpKind::kLeaf) continue;
    auto& g = grads[static_cast<std::size_t>(id)];
    if (g.empty()) {
      out.emplace(id, Tensor<T>(node.shape));
    } else {
      out.emplace(id, Tensor<T>(node.shape, std::move(g)));
    }
  }
  return out;
}

}  // namespace crossray
