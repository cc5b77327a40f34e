#pragma once

// Differentiable operations over TensorT. Every op computes its value
// eagerly, verifies the result is finite (finite inputs never silently turn
// into NaN/Inf; the op throws instead), and when any operand lives on a tape
// records one node whose closure adds the local gradient contribution into
// its parents. Broadcasting is limited to a scalar (1-element) right operand;
// anything else must be reshaped explicitly by the caller.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "sdpl/gemm.hpp"
#include "sdpl/tensor.hpp"

namespace sdpl {

namespace detail {

template <typename T>
TapeT<T>* joint_tape(const TensorT<T>* a, const TensorT<T>* b = nullptr,
                     const TensorT<T>* c = nullptr) {
  TapeT<T>* tape = nullptr;
  for (const TensorT<T>* t : {a, b, c}) {
    if (!t || !t->on_tape()) continue;
    if (tape && tape != t->tape())
      fail(ErrorCode::DetachedGraph, "operands recorded on different tapes");
    tape = t->tape();
  }
  return tape;
}

template <typename T>
void check_finite(const std::vector<T>& v, const char* op) {
  T acc = T(0);
  for (size_t i = 0; i < v.size(); ++i) acc += v[i] - v[i];  // NaN/Inf poison acc
  if (!(acc == T(0)))
    fail(ErrorCode::DomainError, std::string(op) + " produced a non-finite value");
}

template <typename T>
TensorT<T> wrap(Shape shape, std::vector<T> values, TapeT<T>* tape,
                std::vector<int> parents, typename TapeT<T>::BackFn back) {
  auto data = std::make_shared<std::vector<T>>(std::move(values));
  if (!tape) return TensorT<T>::from_node(shape, data, nullptr, -1);
  int node = tape->add_node(std::move(parents), shape.numel(), std::move(back));
  return TensorT<T>::from_node(shape, data, tape, node);
}

// integer power by repeated multiplication; exact for small exponents
template <typename T>
T ipow(T base, long e) {
  if (e < 0) return T(1) / ipow(base, -e);
  T r = T(1);
  for (long i = 0; i < e; ++i) r *= base;
  return r;
}

template <typename T>
bool is_integral_value(T x) {
  return std::isfinite(x) && x == std::floor(x) && std::abs(x) <= T(64);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  const bool scalar_b = (b.numel() == 1 && a.shape() != b.shape());
  if (!scalar_b && a.shape() != b.shape())
    fail(ErrorCode::ShapeMismatch, "add " + a.shape().str() + " vs " + b.shape().str());
  auto av = a.data();
  auto bv = b.data();
  std::vector<T> out(av.size());
  if (scalar_b) {
    const T s = bv[0];
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + s;
  } else {
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  }
  detail::check_finite(out, "add");
  auto* tape = detail::joint_tape(&a, &b);
  if (!tape) return TensorT<T>::constant(a.shape(), std::move(out));
  std::vector<int> parents;
  int sa = -1, sb = -1;
  if (a.on_tape()) { sa = (int)parents.size(); parents.push_back(a.node()); }
  if (b.on_tape()) { sb = (int)parents.size(); parents.push_back(b.node()); }
  auto back = [sa, sb, scalar_b](std::span<const T> g, const typename TapeT<T>::GradFetch& fetch) {
    if (sa >= 0) {
      auto ga = fetch(sa);
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (sb >= 0) {
      auto gb = fetch(sb);
      if (scalar_b) {
        T s = T(0);
        for (size_t i = 0; i < g.size(); ++i) s += g[i];
        gb[0] += s;
      } else {
        for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    }
  };
  return detail::wrap(a.shape(), std::move(out), tape, std::move(parents), back);
}

template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
  const bool scalar_b = (b.numel() == 1 && a.shape() != b.shape());
  if (!scalar_b && a.shape() != b.shape())
    fail(ErrorCode::ShapeMismatch, "sub " + a.shape().str() + " vs " + b.shape().str());
  auto av = a.data();
  auto bv = b.data();
  std::vector<T> out(av.size());
  if (scalar_b) {
    const T s = bv[0];
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] - s;
  } else {
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  }
  detail::check_finite(out, "sub");
  auto* tape = detail::joint_tape(&a, &b);
  if (!tape) return TensorT<T>::constant(a.shape(), std::move(out));
  std::vector<int> parents;
  int sa = -1, sb = -1;
  if (a.on_tape()) { sa = (int)parents.size(); parents.push_back(a.node()); }
  if (b.on_tape()) { sb = (int)parents.size(); parents.push_back(b.node()); }
  auto back = [sa, sb, scalar_b](std::span<const T> g, const typename TapeT<T>::GradFetch& fetch) {
    if (sa >= 0) {
      auto ga = fetch(sa);
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (sb >= 0) {
      auto gb = fetch(sb);
      if (scalar_b) {
        T s = T(0);
        for (size_t i = 0; i < g.size(); ++i) s += g[i];
        gb[0] -= s;
      } else {
        for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    }
  };
  return detail::wrap(a.shape(), std::move(out), tape, std::move(parents), back);
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  const bool scalar_b = (b.numel() == 1 && a.shape() != b.shape());
  if (!scalar_b && a.shape() != b.shape())
    fail(ErrorCode::ShapeMismatch, "mul " + a.shape().str() + " vs " + b.shape().str());
  auto av = a.data();
  auto bv = b.data();
  std::vector<T> out(av.size());
  if (scalar_b) {
    const T s = bv[0];
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * s;
  } else {
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  }
  detail::check_finite(out, "mul");
  auto* tape = detail::joint_tape(&a, &b);
  if (!tape) return TensorT<T>::constant(a.shape(), std::move(out));
  std::vector<int> parents;
  int sa = -1, sb = -1;
  if (a.on_tape()) { sa = (int)parents.size(); parents.push_back(a.node()); }
  if (b.on_tape()) { sb = (int)parents.size(); parents.push_back(b.node()); }
  auto sa_data = a.storage();
  auto sb_data = b.storage();
  auto back = [sa, sb, scalar_b, sa_data, sb_data](std::span<const T> g,
                                                   const typename TapeT<T>::GradFetch& fetch) {
    const auto& avd = *sa_data;
    const auto& bvd = *sb_data;
    if (sa >= 0) {
      auto ga = fetch(sa);
      if (scalar_b) {
        const T s = bvd[0];
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
      } else {
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bvd[i];
      }
    }
    if (sb >= 0) {
      auto gb = fetch(sb);
      if (scalar_b) {
        T s = T(0);
        for (size_t i = 0; i < g.size(); ++i) s += g[i] * avd[i];
        gb[0] += s;
      } else {
        for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * avd[i];
      }
    }
  };
  return detail::wrap(a.shape(), std::move(out), tape, std::move(parents), back);
}

template <typename T>
TensorT<T> add(const TensorT<T>& a, T b) { return add(a, TensorT<T>::scalar(b)); }
template <typename T>
TensorT<T> sub(const TensorT<T>& a, T b) { return sub(a, TensorT<T>::scalar(b)); }
template <typename T>
TensorT<T> mul(const TensorT<T>& a, T b) { return mul(a, TensorT<T>::scalar(b)); }
template <typename T>
TensorT<T> neg(const TensorT<T>& a) { return mul(a, T(-1)); }

/// a^b with b either a scalar exponent or a 1-element tensor (learnable
/// exponent). A non-integral or tensor exponent requires strictly positive a.
template <typename T>
TensorT<T> pow(const TensorT<T>& a, const TensorT<T>& b) {
  if (b.numel() != 1) fail(ErrorCode::ShapeMismatch, "pow exponent must be scalar");
  auto av = a.data();
  const T p = b.data()[0];
  const bool int_p = detail::is_integral_value(p);
  const bool need_log = b.on_tape();
  if (need_log || !int_p) {
    const T floor_allowed = need_log ? T(0) : T(-0);  // tensor exponent: a > 0
    for (T x : av) {
      if (need_log ? !(x > T(0)) : !(x >= floor_allowed))
        fail(ErrorCode::DomainError, "pow base outside domain");
    }
  }
  const long pl = int_p ? static_cast<long>(p) : 0;
  std::vector<T> out(av.size());
  if (int_p) {
    for (size_t i = 0; i < out.size(); ++i) out[i] = detail::ipow(av[i], pl);
  } else {
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::pow(av[i], p);
  }
  detail::check_finite(out, "pow");
  auto* tape = detail::joint_tape(&a, &b);
  if (!tape) return TensorT<T>::constant(a.shape(), std::move(out));
  std::vector<int> parents;
  int sa = -1, sb = -1;
  if (a.on_tape()) { sa = (int)parents.size(); parents.push_back(a.node()); }
  if (b.on_tape()) { sb = (int)parents.size(); parents.push_back(b.node()); }
  auto a_data = a.storage();
  auto y_data = std::make_shared<std::vector<T>>(out);
  auto back = [sa, sb, p, int_p, pl, a_data, y_data](std::span<const T> g,
                                                     const typename TapeT<T>::GradFetch& fetch) {
    const auto& av2 = *a_data;
    if (sa >= 0) {
      auto ga = fetch(sa);
      if (int_p) {
        for (size_t i = 0; i < g.size(); ++i)
          ga[i] += g[i] * p * detail::ipow(av2[i], pl - 1);
      } else {
        for (size_t i = 0; i < g.size(); ++i)
          ga[i] += g[i] * p * std::pow(av2[i], p - T(1));
      }
    }
    if (sb >= 0) {
      auto gb = fetch(sb);
      const auto& yv = *y_data;
      T s = T(0);
      for (size_t i = 0; i < g.size(); ++i) s += g[i] * yv[i] * std::log(av2[i]);
      gb[0] += s;
    }
  };
  return detail::wrap(a.shape(), std::move(out), tape, std::move(parents), back);
}

template <typename T>
TensorT<T> pow(const TensorT<T>& a, T p) { return pow(a, TensorT<T>::scalar(p)); }

template <typename T>
TensorT<T> exp(const TensorT<T>& a) {
  auto av = a.data();
  std::vector<T> out(av.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::exp(av[i]);
  detail::check_finite(out, "exp");
  auto* tape = detail::joint_tape(&a);
  if (!tape) return TensorT<T>::constant(a.shape(), std::move(out));
  auto y_data = std::make_shared<std::vector<T>>(out);
  auto back = [y_data](std::span<const T> g, const typename TapeT<T>::GradFetch& fetch) {
    auto ga = fetch(0);
    const auto& yv = *y_data;
    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * yv[i];
  };
  return detail::wrap(a.shape(), std::move(out), tape, {a.node()}, back);
}

template <typename T>
TensorT<T> log(const TensorT<T>& a) {
  auto av = a.data();
  for (T x : av)
    if (!(x > T(0))) fail(ErrorCode::DomainError, "log of non-positive value");
  std::vector<T> out(av.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::log(av[i]);
  detail::check_finite(out, "log");
  auto* tape = detail::joint_tape(&a);
  if (!tape) return TensorT<T>::constant(a.shape(), std::move(out));
  auto a_data = a.storage();
  auto back = [a_data](std::span<const T> g, const typename TapeT<T>::GradFetch& fetch) {
    auto ga = fetch(0);
    const auto& av2 = *a_data;
    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / av2[i];
  };
  return detail::wrap(a.shape(), std::move(out), tape, {a.node()}, back);
}

/// max(a, floor); gradient passes where a >= floor.
template <typename T>
TensorT<T> clamp_min(const TensorT<T>& a, T floor_v) {
  auto av = a.data();
  std::vector<T> out(av.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] >= floor_v ? av[i] : floor_v;
  auto* tape = detail::joint_tape(&a);
  if (!tape) return TensorT<T>::constant(a.shape(), std::move(out));
  auto a_data = a.storage();
  auto back = [a_data, floor_v](std::span<const T> g, const typename TapeT<T>::GradFetch& fetch) {
    auto ga = fetch(0);
    const auto& av2 = *a_data;
    for (size_t i = 0; i < g.size(); ++i)
      if (av2[i] >= floor_v) ga[i] += g[i];
  };
  return detail::wrap(a.shape(), std::move(out), tape, {a.node()}, back);
}

template <typename T>
TensorT<T> relu(const TensorT<T>& a) { return clamp_min(a, T(0)); }

template <typename T>
TensorT<T> sum(const TensorT<T>& a) {
  auto av = a.data();
  T s = T(0);
  for (T x : av) s += x;
  std::vector<T> out{s};
  detail::check_finite(out, "sum");
  auto* tape = detail::joint_tape(&a);
  if (!tape) return TensorT<T>::constant(Shape{1}, std::move(out));
  const size_t n = av.size();
  auto back = [n](std::span<const T> g, const typename TapeT<T>::GradFetch& fetch) {
    auto ga = fetch(0);
    for (size_t i = 0; i < n; ++i) ga[i] += g[0];
  };
  return detail::wrap(Shape{1}, std::move(out), tape, {a.node()}, back);
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

/// y[N,M] = x[N,K] * W[M,K]^T (+ bias[M])
template <typename T>
TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& weight, const TensorT<T>* bias) {
  if (x.shape().rank() != 2 || weight.shape().rank() != 2)
    fail(ErrorCode::ShapeMismatch, "linear expects rank-2 x and weight");
  const i64 N = x.shape()[0], K = x.shape()[1];
  const i64 M = weight.shape()[0];
  if (weight.shape()[1] != K)
    fail(ErrorCode::ShapeMismatch,
         "linear inner dims " + x.shape().str() + " vs " + weight.shape().str());
  if (bias && (bias->shape().rank() != 1 || (*bias).shape()[0] != M))
    fail(ErrorCode::ShapeMismatch, "linear bias shape");

  std::vector<T> out(static_cast<size_t>(N * M));
  detail::gemm_nt(x.data().data(), weight.data().data(), out.data(), N, M, K, false);
  if (bias) {
    auto bv = bias->data();
    for (i64 n = 0; n < N; ++n)
      for (i64 m = 0; m < M; ++m) out[static_cast<size_t>(n * M + m)] += bv[static_cast<size_t>(m)];
  }
  detail::check_finite(out, "linear");
  auto* tape = detail::joint_tape(&x, &weight, bias);
  if (!tape) return TensorT<T>::constant(Shape{N, M}, std::move(out));

  std::vector<int> parents;
  int sx = -1, sw = -1, sb = -1;
  if (x.on_tape()) { sx = (int)parents.size(); parents.push_back(x.node()); }
  if (weight.on_tape()) { sw = (int)parents.size(); parents.push_back(weight.node()); }
  if (bias && bias->on_tape()) { sb = (int)parents.size(); parents.push_back(bias->node()); }
  auto x_data = x.storage();
  auto w_data = weight.storage();
  auto back = [sx, sw, sb, N, M, K, x_data, w_data](std::span<const T> g,
                                                    const typename TapeT<T>::GradFetch& fetch) {
    if (sx >= 0) {  // dx[N,K] += g[N,M] * W[M,K]
      auto gx = fetch(sx);
      detail::gemm_nn(g.data(), w_data->data(), gx.data(), N, K, M, true);
    }
    if (sw >= 0) {  // dW[M,K] += g[N,M]^T * x[N,K]
      auto gw = fetch(sw);
      detail::gemm_tn(g.data(), x_data->data(), gw.data(), M, K, N, true);
    }
    if (sb >= 0) {
      auto gb = fetch(sb);
      for (i64 n = 0; n < N; ++n)
        for (i64 m = 0; m < M; ++m) gb[static_cast<size_t>(m)] += g[static_cast<size_t>(n * M + m)];
    }
  };
  return detail::wrap(Shape{N, M}, std::move(out), tape, std::move(parents), back);
}

template <typename T>
TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& weight, const TensorT<T>& bias) {
  return linear(x, weight, &bias);
}
template <typename T>
TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& weight) {
  return linear(x, weight, static_cast<const TensorT<T>*>(nullptr));
}

/// Per-pixel channel mixing: y[N,Co,H,W] = W[Co,Ci] applied at every site.
template <typename T>
TensorT<T> conv1x1(const TensorT<T>& x, const TensorT<T>& weight) {
  if (x.shape().rank() != 4 || weight.shape().rank() != 2)
    fail(ErrorCode::ShapeMismatch, "conv1x1 expects [N,C,H,W] and [Co,Ci]");
  const i64 N = x.shape()[0], Ci = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  const i64 Co = weight.shape()[0];
  if (weight.shape()[1] != Ci)
    fail(ErrorCode::ShapeMismatch, "conv1x1 channels " + x.shape().str() + " vs " +
                                       weight.shape().str());
  const i64 HW = H * W;
  std::vector<T> out(static_cast<size_t>(N * Co * HW));
  const T* xd = x.data().data();
  const T* wd = weight.data().data();
#pragma omp parallel for schedule(static) if (N > 1)
  for (i64 n = 0; n < N; ++n)
    detail::gemm_nn(wd, xd + n * Ci * HW, out.data() + n * Co * HW, Co, HW, Ci, false);
  detail::check_finite(out, "conv1x1");
  auto* tape = detail::joint_tape(&x, &weight);
  if (!tape) return TensorT<T>::constant(Shape{N, Co, H, W}, std::move(out));

  std::vector<int> parents;
  int sx = -1, sw = -1;
  if (x.on_tape()) { sx = (int)parents.size(); parents.push_back(x.node()); }
  if (weight.on_tape()) { sw = (int)parents.size(); parents.push_back(weight.node()); }
  auto x_data = x.storage();
  auto w_data = weight.storage();
  auto back = [sx, sw, N, Ci, Co, HW, x_data, w_data](std::span<const T> g,
                                                      const typename TapeT<T>::GradFetch& fetch) {
    if (sx >= 0) {  // dx_n[Ci,HW] += W^T[Ci,Co] * g_n[Co,HW]
      auto gx = fetch(sx);
#pragma omp parallel for schedule(static) if (N > 1)
      for (i64 n = 0; n < N; ++n)
        detail::gemm_tn(w_data->data(), g.data() + n * Co * HW, gx.data() + n * Ci * HW,
                        Ci, HW, Co, true);
    }
    if (sw >= 0) {  // dW[Co,Ci] += sum_n g_n[Co,HW] * x_n[Ci,HW]^T
      auto gw = fetch(sw);
      std::vector<T> gt(static_cast<size_t>(HW * Co));
      std::vector<T> dwt(static_cast<size_t>(Ci * Co), T(0));
      for (i64 n = 0; n < N; ++n) {
        detail::transpose(g.data() + n * Co * HW, gt.data(), Co, HW);
        detail::gemm_nn(x_data->data() + n * Ci * HW, gt.data(), dwt.data(), Ci, Co, HW,
                        true);
      }
      for (i64 co = 0; co < Co; ++co)
        for (i64 ci = 0; ci < Ci; ++ci)
          gw[static_cast<size_t>(co * Ci + ci)] += dwt[static_cast<size_t>(ci * Co + co)];
    }
  };
  return detail::wrap(Shape{N, Co, H, W}, std::move(out), tape, std::move(parents), back);
}

namespace detail {

// kernel-column bounds: ow in [lo, hi) has iw = ow*stride + kw - 1 inside [0, W)
inline void kernel_span(i64 kw, i64 W, i64 stride, i64 Wo, i64& lo, i64& hi) {
  lo = kw == 0 ? 1 : 0;
  hi = std::min(Wo, (W - kw) / stride + 1);
  if (hi < lo) hi = lo;
}

// 3x3, pad 1. cols is [Ci*9, Ho*Wo].
template <typename T>
void im2col3x3(const T* x, i64 Ci, i64 H, i64 W, i64 stride, i64 Ho, i64 Wo, T* cols) {
  for (i64 ci = 0; ci < Ci; ++ci) {
    const T* xc = x + ci * H * W;
    for (i64 kh = 0; kh < 3; ++kh) {
      for (i64 kw = 0; kw < 3; ++kw) {
        T* row = cols + ((ci * 3 + kh) * 3 + kw) * Ho * Wo;
        i64 lo, hi;
        kernel_span(kw, W, stride, Wo, lo, hi);
        for (i64 oh = 0; oh < Ho; ++oh) {
          const i64 ih = oh * stride + kh - 1;
          T* dst = row + oh * Wo;
          if (ih < 0 || ih >= H) {
            std::fill(dst, dst + Wo, T(0));
            continue;
          }
          const T* src = xc + ih * W + (kw - 1);
          for (i64 ow = 0; ow < lo; ++ow) dst[ow] = T(0);
          if (stride == 1) {
            for (i64 ow = lo; ow < hi; ++ow) dst[ow] = src[ow];
          } else {
            for (i64 ow = lo; ow < hi; ++ow) dst[ow] = src[ow * stride];
          }
          for (i64 ow = hi; ow < Wo; ++ow) dst[ow] = T(0);
        }
      }
    }
  }
}

template <typename T>
void col2im3x3_add(const T* cols, i64 Ci, i64 H, i64 W, i64 stride, i64 Ho, i64 Wo, T* dx) {
  for (i64 ci = 0; ci < Ci; ++ci) {
    T* xc = dx + ci * H * W;
    for (i64 kh = 0; kh < 3; ++kh) {
      for (i64 kw = 0; kw < 3; ++kw) {
        const T* row = cols + ((ci * 3 + kh) * 3 + kw) * Ho * Wo;
        i64 lo, hi;
        kernel_span(kw, W, stride, Wo, lo, hi);
        for (i64 oh = 0; oh < Ho; ++oh) {
          const i64 ih = oh * stride + kh - 1;
          if (ih < 0 || ih >= H) continue;
          const T* src = row + oh * Wo;
          T* dst = xc + ih * W + (kw - 1);
          if (stride == 1) {
            for (i64 ow = lo; ow < hi; ++ow) dst[ow] += src[ow];
          } else {
            for (i64 ow = lo; ow < hi; ++ow) dst[ow * stride] += src[ow];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// 3x3 convolution, padding 1, given stride. Used by the reference backbone.
template <typename T>
TensorT<T> conv3x3(const TensorT<T>& x, const TensorT<T>& weight, const TensorT<T>* bias,
                   i64 stride) {
  if (x.shape().rank() != 4 || weight.shape().rank() != 4 || weight.shape()[2] != 3 ||
      weight.shape()[3] != 3)
    fail(ErrorCode::ShapeMismatch, "conv3x3 expects [N,Ci,H,W] and [Co,Ci,3,3]");
  if (stride < 1) fail(ErrorCode::ConfigMismatch, "conv3x3 stride must be >= 1");
  const i64 N = x.shape()[0], Ci = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  const i64 Co = weight.shape()[0];
  if (weight.shape()[1] != Ci) fail(ErrorCode::ShapeMismatch, "conv3x3 channel mismatch");
  if (bias && (bias->shape().rank() != 1 || (*bias).shape()[0] != Co))
    fail(ErrorCode::ShapeMismatch, "conv3x3 bias shape");
  const i64 Ho = (H + 2 - 3) / stride + 1;
  const i64 Wo = (W + 2 - 3) / stride + 1;
  const i64 CK = Ci * 9, P = Ho * Wo;

  std::vector<T> out(static_cast<size_t>(N * Co * P));
  {
    const T* xd = x.data().data();
    const T* wd = weight.data().data();
#pragma omp parallel for schedule(static) if (N > 1)
    for (i64 n = 0; n < N; ++n) {
      std::vector<T> cols(static_cast<size_t>(CK * P));
      detail::im2col3x3(xd + n * Ci * H * W, Ci, H, W, stride, Ho, Wo, cols.data());
      detail::gemm_nn(wd, cols.data(), out.data() + n * Co * P, Co, P, CK, false);
    }
  }
  if (bias) {
    auto bv = bias->data();
    for (i64 n = 0; n < N; ++n)
      for (i64 co = 0; co < Co; ++co) {
        T* dst = out.data() + (n * Co + co) * P;
        const T b = bv[static_cast<size_t>(co)];
        for (i64 p = 0; p < P; ++p) dst[p] += b;
      }
  }
  detail::check_finite(out, "conv3x3");
  auto* tape = detail::joint_tape(&x, &weight, bias);
  if (!tape) return TensorT<T>::constant(Shape{N, Co, Ho, Wo}, std::move(out));

  std::vector<int> parents;
  int sx = -1, sw = -1, sb = -1;
  if (x.on_tape()) { sx = (int)parents.size(); parents.push_back(x.node()); }
  if (weight.on_tape()) { sw = (int)parents.size(); parents.push_back(weight.node()); }
  if (bias && bias->on_tape()) { sb = (int)parents.size(); parents.push_back(bias->node()); }
  auto x_data = x.storage();
  auto w_data = weight.storage();
  auto back = [=](std::span<const T> g, const typename TapeT<T>::GradFetch& fetch) {
    if (sx >= 0) {
      auto gx = fetch(sx);
#pragma omp parallel for schedule(static) if (N > 1)
      for (i64 n = 0; n < N; ++n) {
        std::vector<T> dcols(static_cast<size_t>(CK * P));
        detail::gemm_tn(w_data->data(), g.data() + n * Co * P, dcols.data(), CK, P, Co, false);
        detail::col2im3x3_add(dcols.data(), Ci, H, W, stride, Ho, Wo,
                              gx.data() + n * Ci * H * W);
      }
    }
    if (sw >= 0) {
      // serial over the batch: every image accumulates into the same dW.
      // accumulate transposed (dWt[CK,Co] += cols * gT) so only the small
      // gradient block is transposed per image.
      auto gw = fetch(sw);
      std::vector<T> cols(static_cast<size_t>(CK * P));
      std::vector<T> gt(static_cast<size_t>(P * Co));
      std::vector<T> dwt(static_cast<size_t>(CK * Co), T(0));
      for (i64 n = 0; n < N; ++n) {
        detail::im2col3x3(x_data->data() + n * Ci * H * W, Ci, H, W, stride, Ho, Wo,
                          cols.data());
        detail::transpose(g.data() + n * Co * P, gt.data(), Co, P);
        detail::gemm_nn(cols.data(), gt.data(), dwt.data(), CK, Co, P, true);
      }
      for (i64 co = 0; co < Co; ++co)
        for (i64 ck = 0; ck < CK; ++ck)
          gw[static_cast<size_t>(co * CK + ck)] += dwt[static_cast<size_t>(ck * Co + co)];
    }
    if (sb >= 0) {
      auto gb = fetch(sb);
      for (i64 n = 0; n < N; ++n)
        for (i64 co = 0; co < Co; ++co) {
          const T* src = g.data() + (n * Co + co) * P;
          T s = T(0);
          for (i64 p = 0; p < P; ++p) s += src[p];
          gb[static_cast<size_t>(co)] += s;
        }
    }
  };
  return detail::wrap(Shape{N, Co, Ho, Wo}, std::move(out), tape, std::move(parents), back);
}

template <typename T>
TensorT<T> conv3x3(const TensorT<T>& x, const TensorT<T>& weight, const TensorT<T>& bias,
                   i64 stride) {
  return conv3x3(x, weight, &bias, stride);
}

// ---------------------------------------------------------------------------
// pooling
// ---------------------------------------------------------------------------

/// Mean over the spatial dims: [N,C,H,W] -> [N,C].
template <typename T>
TensorT<T> global_avg_pool(const TensorT<T>& x) {
  if (x.shape().rank() != 4) fail(ErrorCode::ShapeMismatch, "global_avg_pool expects rank 4");
  const i64 N = x.shape()[0], C = x.shape()[1], HW = x.shape()[2] * x.shape()[3];
  std::vector<T> out(static_cast<size_t>(N * C));
  const T* xd = x.data().data();
  for (i64 nc = 0; nc < N * C; ++nc) {
    T s = T(0);
    const T* src = xd + nc * HW;
    for (i64 p = 0; p < HW; ++p) s += src[p];
    out[static_cast<size_t>(nc)] = s / static_cast<T>(HW);
  }
  detail::check_finite(out, "global_avg_pool");
  auto* tape = detail::joint_tape(&x);
  if (!tape) return TensorT<T>::constant(Shape{N, C}, std::move(out));
  auto back = [N, C, HW](std::span<const T> g, const typename TapeT<T>::GradFetch& fetch) {
    auto gx = fetch(0);
    for (i64 nc = 0; nc < N * C; ++nc) {
      const T gv = g[static_cast<size_t>(nc)] / static_cast<T>(HW);
      T* dst = gx.data() + nc * HW;
      for (i64 p = 0; p < HW; ++p) dst[p] += gv;
    }
  };
  return detail::wrap(Shape{N, C}, std::move(out), tape, {x.node()}, back);
}

/// Non-overlapping factor x factor mean pooling; extents must divide evenly.
template <typename T>
TensorT<T> avg_pool2d(const TensorT<T>& x, i64 factor) {
  if (x.shape().rank() != 4) fail(ErrorCode::ShapeMismatch, "avg_pool2d expects rank 4");
  const i64 N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  if (factor < 1 || H % factor != 0 || W % factor != 0)
    fail(ErrorCode::ConfigMismatch, "avg_pool2d factor must divide extents");
  const i64 Ho = H / factor, Wo = W / factor;
  const T inv = T(1) / static_cast<T>(factor * factor);
  std::vector<T> out(static_cast<size_t>(N * C * Ho * Wo), T(0));
  const T* xd = x.data().data();
  for (i64 nc = 0; nc < N * C; ++nc) {
    const T* src = xd + nc * H * W;
    T* dst = out.data() + nc * Ho * Wo;
    for (i64 h = 0; h < H; ++h)
      for (i64 w = 0; w < W; ++w) dst[(h / factor) * Wo + w / factor] += src[h * W + w];
    for (i64 p = 0; p < Ho * Wo; ++p) dst[p] *= inv;
  }
  detail::check_finite(out, "avg_pool2d");
  auto* tape = detail::joint_tape(&x);
  if (!tape) return TensorT<T>::constant(Shape{N, C, Ho, Wo}, std::move(out));
  auto back = [N, C, H, W, Ho, Wo, factor, inv](std::span<const T> g,
                                                const typename TapeT<T>::GradFetch& fetch) {
    auto gx = fetch(0);
    for (i64 nc = 0; nc < N * C; ++nc) {
      const T* src = g.data() + nc * Ho * Wo;
      T* dst = gx.data() + nc * H * W;
      for (i64 h = 0; h < H; ++h)
        for (i64 w = 0; w < W; ++w)
          dst[h * W + w] += src[(h / factor) * Wo + w / factor] * inv;
    }
  };
  return detail::wrap(Shape{N, C, Ho, Wo}, std::move(out), tape, {x.node()}, back);
}

// ---------------------------------------------------------------------------
// softmax / cross-entropy
// ---------------------------------------------------------------------------

/// Softmax along the last axis, stabilized by max subtraction.
template <typename T>
TensorT<T> softmax(const TensorT<T>& x) {
  if (x.shape().rank() < 1 || x.shape()[x.shape().rank() - 1] < 1)
    fail(ErrorCode::ShapeMismatch, "softmax needs a non-empty last axis");
  const i64 K = x.shape()[x.shape().rank() - 1];
  const i64 R = x.numel() / K;
  auto xd = x.data();
  std::vector<T> out(xd.size());
  for (i64 r = 0; r < R; ++r) {
    const T* row = xd.data() + r * K;
    T* orow = out.data() + r * K;
    T m = row[0];
    for (i64 k = 1; k < K; ++k) m = std::max(m, row[k]);
    T z = T(0);
    for (i64 k = 0; k < K; ++k) {
      orow[k] = std::exp(row[k] - m);
      z += orow[k];
    }
    for (i64 k = 0; k < K; ++k) orow[k] /= z;
  }
  detail::check_finite(out, "softmax");
  auto* tape = detail::joint_tape(&x);
  if (!tape) return TensorT<T>::constant(x.shape(), std::move(out));
  auto y_data = std::make_shared<std::vector<T>>(out);
  auto back = [R, K, y_data](std::span<const T> g, const typename TapeT<T>::GradFetch& fetch) {
    auto gx = fetch(0);
    const auto& yv = *y_data;
    for (i64 r = 0; r < R; ++r) {
      const T* yrow = yv.data() + r * K;
      const T* grow = g.data() + r * K;
      T dot = T(0);
      for (i64 k = 0; k < K; ++k) dot += grow[k] * yrow[k];
      T* dst = gx.data() + r * K;
      for (i64 k = 0; k < K; ++k) dst[k] += yrow[k] * (grow[k] - dot);
    }
  };
  return detail::wrap(x.shape(), std::move(out), tape, {x.node()}, back);
}

/// Mean over the batch of -log softmax(logits)[label].
template <typename T>
TensorT<T> cross_entropy(const TensorT<T>& logits, std::span<const int> labels) {
  if (logits.shape().rank() != 2) fail(ErrorCode::ShapeMismatch, "cross_entropy expects [N,C]");
  const i64 N = logits.shape()[0], C = logits.shape()[1];
  if (static_cast<i64>(labels.size()) != N)
    fail(ErrorCode::ShapeMismatch, "cross_entropy labels size");
  for (int y : labels)
    if (y < 0 || y >= C) fail(ErrorCode::LabelOutOfRange, "label " + std::to_string(y));

  auto xd = logits.data();
  auto probs = std::make_shared<std::vector<T>>(xd.size());
  T loss = T(0);
  for (i64 n = 0; n < N; ++n) {
    const T* row = xd.data() + n * C;
    T* prow = probs->data() + n * C;
    T m = row[0];
    for (i64 c = 1; c < C; ++c) m = std::max(m, row[c]);
    T z = T(0);
    for (i64 c = 0; c < C; ++c) {
      prow[c] = std::exp(row[c] - m);
      z += prow[c];
    }
    const T lse = m + std::log(z);
    for (i64 c = 0; c < C; ++c) prow[c] /= z;
    loss += lse - row[labels[static_cast<size_t>(n)]];
  }
  loss /= static_cast<T>(N);
  std::vector<T> out{loss};
  detail::check_finite(out, "cross_entropy");
  auto* tape = detail::joint_tape(&logits);
  if (!tape) return TensorT<T>::constant(Shape{1}, std::move(out));
  std::vector<int> lab(labels.begin(), labels.end());
  auto back = [N, C, probs, lab](std::span<const T> g, const typename TapeT<T>::GradFetch& fetch) {
    auto gx = fetch(0);
    const T scale = g[0] / static_cast<T>(N);
    for (i64 n = 0; n < N; ++n) {
      const T* prow = probs->data() + n * C;
      T* dst = gx.data() + n * C;
      for (i64 c = 0; c < C; ++c) dst[c] += scale * prow[c];
      dst[lab[static_cast<size_t>(n)]] -= scale;
    }
  };
  return detail::wrap(Shape{1}, std::move(out), tape, {logits.node()}, back);
}

// ---------------------------------------------------------------------------
// structured helpers
// ---------------------------------------------------------------------------

/// Scales row n of x[N,C] by s[n].
template <typename T>
TensorT<T> rowscale(const TensorT<T>& x, const TensorT<T>& s) {
  if (x.shape().rank() != 2 || s.shape().rank() != 1 || s.shape()[0] != x.shape()[0])
    fail(ErrorCode::ShapeMismatch, "rowscale expects [N,C] and [N]");
  const i64 N = x.shape()[0], C = x.shape()[1];
  auto xd = x.data();
  auto sd = s.data();
  std::vector<T> out(xd.size());
  for (i64 n = 0; n < N; ++n)
    for (i64 c = 0; c < C; ++c) out[static_cast<size_t>(n * C + c)] = xd[static_cast<size_t>(n * C + c)] * sd[static_cast<size_t>(n)];
  detail::check_finite(out, "rowscale");
  auto* tape = detail::joint_tape(&x, &s);
  if (!tape) return TensorT<T>::constant(x.shape(), std::move(out));
  std::vector<int> parents;
  int sx = -1, ss = -1;
  if (x.on_tape()) { sx = (int)parents.size(); parents.push_back(x.node()); }
  if (s.on_tape()) { ss = (int)parents.size(); parents.push_back(s.node()); }
  auto x_data = x.storage();
  auto s_data = s.storage();
  auto back = [sx, ss, N, C, x_data, s_data](std::span<const T> g,
                                             const typename TapeT<T>::GradFetch& fetch) {
    if (sx >= 0) {
      auto gx = fetch(sx);
      for (i64 n = 0; n < N; ++n) {
        const T sv = (*s_data)[static_cast<size_t>(n)];
        for (i64 c = 0; c < C; ++c) gx[static_cast<size_t>(n * C + c)] += g[static_cast<size_t>(n * C + c)] * sv;
      }
    }
    if (ss >= 0) {
      auto gs = fetch(ss);
      for (i64 n = 0; n < N; ++n) {
        T acc = T(0);
        for (i64 c = 0; c < C; ++c) acc += g[static_cast<size_t>(n * C + c)] * (*x_data)[static_cast<size_t>(n * C + c)];
        gs[static_cast<size_t>(n)] += acc;
      }
    }
  };
  return detail::wrap(x.shape(), std::move(out), tape, std::move(parents), back);
}

/// Extracts column j of x[N,K] as a vector [N].
template <typename T>
TensorT<T> column(const TensorT<T>& x, i64 j) {
  if (x.shape().rank() != 2) fail(ErrorCode::ShapeMismatch, "column expects rank 2");
  const i64 N = x.shape()[0], K = x.shape()[1];
  if (j < 0 || j >= K) fail(ErrorCode::IndexOutOfRange, "column " + std::to_string(j));
  auto xd = x.data();
  std::vector<T> out(static_cast<size_t>(N));
  for (i64 n = 0; n < N; ++n) out[static_cast<size_t>(n)] = xd[static_cast<size_t>(n * K + j)];
  auto* tape = detail::joint_tape(&x);
  if (!tape) return TensorT<T>::constant(Shape{N}, std::move(out));
  auto back = [N, K, j](std::span<const T> g, const typename TapeT<T>::GradFetch& fetch) {
    auto gx = fetch(0);
    for (i64 n = 0; n < N; ++n) gx[static_cast<size_t>(n * K + j)] += g[static_cast<size_t>(n)];
  };
  return detail::wrap(Shape{N}, std::move(out), tape, {x.node()}, back);
}

// ---------------------------------------------------------------------------
// batch normalization (1d, over features)
// ---------------------------------------------------------------------------

template <typename T>
struct BnStateT {
  std::vector<T> mean, var;
  bool initialized = false;
};

/// Training mode normalizes with batch statistics and updates the running
/// stats (momentum 0.1 convention: new = (1-m)*old + m*batch). Eval mode uses
/// running stats and requires at least one prior training step.
template <typename T>
TensorT<T> batch_norm(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                      BnStateT<T>& state, bool training, T momentum = T(0.1),
                      T eps = T(1e-5)) {
  if (x.shape().rank() != 2) fail(ErrorCode::ShapeMismatch, "batch_norm expects [N,F]");
  const i64 N = x.shape()[0], F = x.shape()[1];
  if (gamma.shape() != Shape{F} || beta.shape() != Shape{F})
    fail(ErrorCode::ShapeMismatch, "batch_norm affine shape");
  if (static_cast<i64>(state.mean.size()) != F || static_cast<i64>(state.var.size()) != F)
    fail(ErrorCode::ShapeMismatch, "batch_norm state size");
  if (!training && !state.initialized)
    fail(ErrorCode::BatchNormUninitialized, "eval-mode batch_norm before any training step");

  auto xd = x.data();
  auto gd = gamma.data();
  auto bd = beta.data();
  auto xhat = std::make_shared<std::vector<T>>(xd.size());
  auto inv = std::make_shared<std::vector<T>>(static_cast<size_t>(F));
  std::vector<T> out(xd.size());

  if (training) {
    for (i64 f = 0; f < F; ++f) {
      T mu = T(0);
      for (i64 n = 0; n < N; ++n) mu += xd[static_cast<size_t>(n * F + f)];
      mu /= static_cast<T>(N);
      T v = T(0);
      for (i64 n = 0; n < N; ++n) {
        const T d = xd[static_cast<size_t>(n * F + f)] - mu;
        v += d * d;
      }
      v /= static_cast<T>(N);
      const T iv = T(1) / std::sqrt(v + eps);
      (*inv)[static_cast<size_t>(f)] = iv;
      for (i64 n = 0; n < N; ++n) {
        const T h = (xd[static_cast<size_t>(n * F + f)] - mu) * iv;
        (*xhat)[static_cast<size_t>(n * F + f)] = h;
        out[static_cast<size_t>(n * F + f)] = gd[static_cast<size_t>(f)] * h + bd[static_cast<size_t>(f)];
      }
      const T v_running = N > 1 ? v * static_cast<T>(N) / static_cast<T>(N - 1) : v;
      state.mean[static_cast<size_t>(f)] = (T(1) - momentum) * state.mean[static_cast<size_t>(f)] + momentum * mu;
      state.var[static_cast<size_t>(f)] = (T(1) - momentum) * state.var[static_cast<size_t>(f)] + momentum * v_running;
    }
    state.initialized = true;
  } else {
    for (i64 f = 0; f < F; ++f)
      (*inv)[static_cast<size_t>(f)] = T(1) / std::sqrt(state.var[static_cast<size_t>(f)] + eps);
    for (i64 n = 0; n < N; ++n)
      for (i64 f = 0; f < F; ++f) {
        const T h = (xd[static_cast<size_t>(n * F + f)] - state.mean[static_cast<size_t>(f)]) * (*inv)[static_cast<size_t>(f)];
        (*xhat)[static_cast<size_t>(n * F + f)] = h;
        out[static_cast<size_t>(n * F + f)] = gd[static_cast<size_t>(f)] * h + bd[static_cast<size_t>(f)];
      }
  }
  detail::check_finite(out, "batch_norm");
  auto* tape = detail::joint_tape(&x, &gamma, &beta);
  if (!tape) return TensorT<T>::constant(x.shape(), std::move(out));

  std::vector<int> parents;
  int sx = -1, sg = -1, sb = -1;
  if (x.on_tape()) { sx = (int)parents.size(); parents.push_back(x.node()); }
  if (gamma.on_tape()) { sg = (int)parents.size(); parents.push_back(gamma.node()); }
  if (beta.on_tape()) { sb = (int)parents.size(); parents.push_back(beta.node()); }
  auto g_data = gamma.storage();
  auto back = [sx, sg, sb, N, F, training, xhat, inv, g_data](
                  std::span<const T> g, const typename TapeT<T>::GradFetch& fetch) {
    if (sg >= 0) {
      auto gg = fetch(sg);
      for (i64 f = 0; f < F; ++f) {
        T s = T(0);
        for (i64 n = 0; n < N; ++n) s += g[static_cast<size_t>(n * F + f)] * (*xhat)[static_cast<size_t>(n * F + f)];
        gg[static_cast<size_t>(f)] += s;
      }
    }
    if (sb >= 0) {
      auto gb = fetch(sb);
      for (i64 f = 0; f < F; ++f) {
        T s = T(0);
        for (i64 n = 0; n < N; ++n) s += g[static_cast<size_t>(n * F + f)];
        gb[static_cast<size_t>(f)] += s;
      }
    }
    if (sx >= 0) {
      auto gx = fetch(sx);
      if (training) {
        for (i64 f = 0; f < F; ++f) {
          const T gam = (*g_data)[static_cast<size_t>(f)];
          const T iv = (*inv)[static_cast<size_t>(f)];
          T mean_dh = T(0), mean_dh_h = T(0);
          for (i64 n = 0; n < N; ++n) {
            const T dh = g[static_cast<size_t>(n * F + f)] * gam;
            mean_dh += dh;
            mean_dh_h += dh * (*xhat)[static_cast<size_t>(n * F + f)];
          }
          mean_dh /= static_cast<T>(N);
          mean_dh_h /= static_cast<T>(N);
          for (i64 n = 0; n < N; ++n) {
            const T dh = g[static_cast<size_t>(n * F + f)] * gam;
            gx[static_cast<size_t>(n * F + f)] +=
                iv * (dh - mean_dh - (*xhat)[static_cast<size_t>(n * F + f)] * mean_dh_h);
          }
        }
      } else {
        for (i64 n = 0; n < N; ++n)
          for (i64 f = 0; f < F; ++f)
            gx[static_cast<size_t>(n * F + f)] +=
                g[static_cast<size_t>(n * F + f)] * (*g_data)[static_cast<size_t>(f)] * (*inv)[static_cast<size_t>(f)];
      }
    }
  };
  return detail::wrap(x.shape(), std::move(out), tape, std::move(parents), back);
}

// ---------------------------------------------------------------------------
// plain data helpers (no gradient tracking)
// ---------------------------------------------------------------------------

/// Reverses the width axis of [C,H,W] or [N,C,H,W] image tensors.
template <typename T>
TensorT<T> flip_width(const TensorT<T>& x) {
  const int r = x.shape().rank();
  if (r != 3 && r != 4) fail(ErrorCode::ShapeMismatch, "flip_width expects image rank 3 or 4");
  const i64 W = x.shape()[r - 1];
  const i64 rows = x.numel() / W;
  auto xd = x.data();
  std::vector<T> out(xd.size());
  for (i64 q = 0; q < rows; ++q)
    for (i64 w = 0; w < W; ++w) out[static_cast<size_t>(q * W + w)] = xd[static_cast<size_t>(q * W + (W - 1 - w))];
  return TensorT<T>::constant(x.shape(), std::move(out));
}

/// Stacks same-shape [C,H,W] images into one [N,C,H,W] batch.
template <typename T>
TensorT<T> stack_images(std::span<const TensorT<T>> images) {
  if (images.empty()) fail(ErrorCode::ShapeMismatch, "stack_images on empty list");
  const Shape s0 = images[0].shape();
  if (s0.rank() != 3) fail(ErrorCode::ShapeMismatch, "stack_images expects [C,H,W] items");
  std::vector<T> out;
  out.reserve(static_cast<size_t>(s0.numel()) * images.size());
  for (const auto& im : images) {
    if (im.shape() != s0) fail(ErrorCode::ShapeMismatch, "stack_images shape mismatch");
    auto d = im.data();
    out.insert(out.end(), d.begin(), d.end());
  }
  return TensorT<T>::constant(Shape{static_cast<i64>(images.size()), s0[0], s0[1], s0[2]},
                              std::move(out));
}

}  // namespace sdpl
