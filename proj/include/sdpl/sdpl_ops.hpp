#pragma once

// SDPL building blocks: masked GeM pooling over partition regions, the
// weight-estimation module that scores the three shifted partition sets,
// adaptive / hard fusion, and the per-part classifier head.

#include <array>
#include <optional>
#include <span>
#include <vector>

#include "sdpl/geometry.hpp"
#include "sdpl/ops.hpp"
#include "sdpl/util.hpp"

namespace sdpl {

// ---------------------------------------------------------------------------
// masked pooling
// ---------------------------------------------------------------------------

/// Mean over the masked cells of each channel: [N,C,H,W] x mask -> [N,C].
template <typename T>
TensorT<T> masked_mean(const TensorT<T>& x, const RegionMask& mask) {
  if (x.shape().rank() != 4) fail(ErrorCode::ShapeMismatch, "masked_mean expects rank 4");
  const i64 N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  if (mask.height != H || mask.width != W)
    fail(ErrorCode::ShapeMismatch, "mask " + std::to_string(mask.height) + "x" +
                                       std::to_string(mask.width) + " vs feature " +
                                       x.shape().str());
  if (mask.cell_count == 0) fail(ErrorCode::EmptyMask, "masked_mean over an empty mask");
  const T inv = T(1) / static_cast<T>(mask.cell_count);
  const i64 HW = H * W;
  // branch-free gather over a cell index list
  auto idx = std::make_shared<std::vector<int32_t>>();
  idx->reserve(static_cast<size_t>(mask.cell_count));
  for (i64 p = 0; p < HW; ++p)
    if (mask.cells[static_cast<size_t>(p)]) idx->push_back(static_cast<int32_t>(p));
  auto xd = x.data();
  std::vector<T> out(static_cast<size_t>(N * C));
  for (i64 nc = 0; nc < N * C; ++nc) {
    const T* src = xd.data() + nc * HW;
    T s = T(0);
    for (const int32_t p : *idx) s += src[p];
    out[static_cast<size_t>(nc)] = s * inv;
  }
  detail::check_finite(out, "masked_mean");
  auto* tape = detail::joint_tape(&x);
  if (!tape) return TensorT<T>::constant(Shape{N, C}, std::move(out));
  auto back = [N, C, HW, inv, idx](std::span<const T> g,
                                   const typename TapeT<T>::GradFetch& fetch) {
    auto gx = fetch(0);
    for (i64 nc = 0; nc < N * C; ++nc) {
      const T gv = g[static_cast<size_t>(nc)] * inv;
      T* dst = gx.data() + nc * HW;
      for (const int32_t p : *idx) dst[p] += gv;
    }
  };
  return detail::wrap(Shape{N, C}, std::move(out), tape, {x.node()}, back);
}

// ---------------------------------------------------------------------------
// GeM
// ---------------------------------------------------------------------------

template <typename T>
struct GemParamsT {
  T p = T(3);
  T eps = T(1e-6);
};
using GemParams = GemParamsT<float>;

/// Generalized-mean pooling over the masked cells:
/// y = (mean(max(x, eps)^p))^(1/p) per channel. Differentiable in the feature
/// and, when p is a tensor, in the exponent.
template <typename T>
TensorT<T> gem_pool(const TensorT<T>& feature, const RegionMask& mask,
                    const TensorT<T>& p, T eps) {
  auto clamped = clamp_min(feature, eps);
  auto powered = pow(clamped, p);
  auto mean = masked_mean(powered, mask);
  auto inv_p = pow(p, T(-1));
  return pow(mean, inv_p);
}

template <typename T>
TensorT<T> gem_pool(const TensorT<T>& feature, const RegionMask& mask,
                    const GemParamsT<T>& params) {
  if (!(params.p > T(0)) || !(params.eps > T(0)))
    fail(ErrorCode::DomainError, "gem_pool requires p > 0 and eps > 0");
  return gem_pool(feature, mask, TensorT<T>::scalar(params.p), params.eps);
}

/// Pools one feature map against many masks, sharing the clamp/power pass.
/// Bit-identical to calling gem_pool per mask.
template <typename T>
std::vector<TensorT<T>> gem_pool_multi(const TensorT<T>& feature,
                                       std::span<const PartRegion> parts,
                                       const TensorT<T>& p, T eps) {
  auto powered = pow(clamp_min(feature, eps), p);
  auto inv_p = pow(p, T(-1));
  std::vector<TensorT<T>> pooled;
  pooled.reserve(parts.size());
  for (const auto& part : parts)
    pooled.push_back(pow(masked_mean(powered, part.mask), inv_p));
  return pooled;
}

// ---------------------------------------------------------------------------
// part sets and fusion
// ---------------------------------------------------------------------------

/// Ordered per-part pooled vectors, one [N,C] tensor per part.
template <typename T>
struct PartSetT {
  std::vector<TensorT<T>> parts;

  size_t size() const { return parts.size(); }
  i64 channels() const { return parts.empty() ? 0 : parts[0].shape()[1]; }
};
using PartSet = PartSetT<float>;

/// Fixed fusion coefficients (centered, top-left, bottom-right).
struct FusionWeights {
  std::array<double, 3> beta{1.0, 0.0, 0.0};

  void validate() const {
    double s = 0.0;
    for (double b : beta) {
      if (b < 0.0 || b > 1.0) fail(ErrorCode::ConfigMismatch, "fusion weight outside [0,1]");
      s += b;
    }
    if (std::abs(s - 1.0) > 1e-6)
      fail(ErrorCode::ConfigMismatch, "fusion weights must sum to 1");
  }
};

namespace detail {
template <typename T>
void check_fusable(const std::array<PartSetT<T>, 3>& sets) {
  for (const auto& s : sets) {
    if (s.size() != sets[0].size())
      fail(ErrorCode::CardinalityMismatch, "part sets differ in part count");
    for (const auto& t : s.parts)
      if (t.shape() != sets[0].parts[0].shape())
        fail(ErrorCode::CardinalityMismatch, "part sets differ in shape");
  }
  if (sets[0].size() == 0) fail(ErrorCode::CardinalityMismatch, "empty part sets");
}
}  // namespace detail

/// z^n = sum_j beta[:,j] * g_j^n with per-sample weights [N,3].
template <typename T>
PartSetT<T> fuse(const std::array<PartSetT<T>, 3>& sets, const TensorT<T>& beta) {
  detail::check_fusable(sets);
  if (beta.shape().rank() != 2 || beta.shape()[1] != 3 ||
      beta.shape()[0] != sets[0].parts[0].shape()[0])
    fail(ErrorCode::CardinalityMismatch, "fusion weights must be [N,3]");
  std::array<TensorT<T>, 3> cols{column(beta, 0), column(beta, 1), column(beta, 2)};
  PartSetT<T> out;
  out.parts.reserve(sets[0].size());
  for (size_t n = 0; n < sets[0].size(); ++n) {
    auto z = rowscale(sets[0].parts[n], cols[0]);
    z = add(z, rowscale(sets[1].parts[n], cols[1]));
    z = add(z, rowscale(sets[2].parts[n], cols[2]));
    out.parts.push_back(std::move(z));
  }
  return out;
}

/// Hard fusion with fixed weights.
template <typename T>
PartSetT<T> fuse(const std::array<PartSetT<T>, 3>& sets, const FusionWeights& w) {
  detail::check_fusable(sets);
  w.validate();
  PartSetT<T> out;
  out.parts.reserve(sets[0].size());
  for (size_t n = 0; n < sets[0].size(); ++n) {
    auto z = mul(sets[0].parts[n], static_cast<T>(w.beta[0]));
    z = add(z, mul(sets[1].parts[n], static_cast<T>(w.beta[1])));
    z = add(z, mul(sets[2].parts[n], static_cast<T>(w.beta[2])));
    out.parts.push_back(std::move(z));
  }
  return out;
}

// ---------------------------------------------------------------------------
// weight estimation module
// ---------------------------------------------------------------------------

/// conv1x1 (C -> C/2) -> ReLU -> global average pool -> FC -> ReLU -> FC ->
/// ReLU -> FC(3) -> softmax. Rows of the output sum to 1.
template <typename T>
struct WeightEstimatorT {
  int in_channels = 0;
  int hidden = 512;
  ParameterT<T> conv_w;
  ParameterT<T> fc1_w, fc1_b;
  ParameterT<T> fc2_w, fc2_b;
  ParameterT<T> fc3_w, fc3_b;

  static WeightEstimatorT init(int channels, int hidden, std::mt19937_64& rng) {
    if (channels < 2) fail(ErrorCode::ConfigMismatch, "weight estimator needs >= 2 channels");
    WeightEstimatorT m;
    m.in_channels = channels;
    m.hidden = hidden;
    const int mid = channels / 2;
    m.conv_w = he_init("westim.conv_w", Shape{mid, channels}, channels, rng);
    m.fc1_w = he_init("westim.fc1_w", Shape{hidden, mid}, mid, rng);
    m.fc1_b = ParameterT<T>::create("westim.fc1_b", Shape{hidden},
                                    std::vector<T>(static_cast<size_t>(hidden), T(0)), false);
    m.fc2_w = he_init("westim.fc2_w", Shape{hidden, hidden}, hidden, rng);
    m.fc2_b = ParameterT<T>::create("westim.fc2_b", Shape{hidden},
                                    std::vector<T>(static_cast<size_t>(hidden), T(0)), false);
    std::vector<T> w3(static_cast<size_t>(3 * hidden));
    for (auto& v : w3) v = static_cast<T>(rng_normal(rng) * 0.01);
    m.fc3_w = ParameterT<T>::create("westim.fc3_w", Shape{3, hidden}, std::move(w3));
    m.fc3_b = ParameterT<T>::create("westim.fc3_b", Shape{3}, {T(0), T(0), T(0)}, false);
    return m;
  }

  TensorT<T> forward(const PassContext<T>& ctx, const TensorT<T>& feature) const {
    if (feature.shape().rank() != 4 || feature.shape()[1] != in_channels)
      fail(ErrorCode::ShapeMismatch, "weight estimator expects [N," +
                                         std::to_string(in_channels) + ",H,W]");
    auto t = relu(conv1x1(feature, ctx.view(conv_w)));
    auto v = global_avg_pool(t);
    v = relu(linear(v, ctx.view(fc1_w), ctx.view(fc1_b)));
    v = relu(linear(v, ctx.view(fc2_w), ctx.view(fc2_b)));
    v = linear(v, ctx.view(fc3_w), ctx.view(fc3_b));
    return softmax(v);
  }

  static ParameterT<T> he_init(std::string name, Shape shape, int fan_in,
                               std::mt19937_64& rng) {
    const double limit = std::sqrt(6.0 / fan_in);
    std::vector<T> w(static_cast<size_t>(shape.numel()));
    for (auto& v : w) v = static_cast<T>(rng_uniform(rng, -limit, limit));
    return ParameterT<T>::create(std::move(name), shape, std::move(w));
  }
};

// ---------------------------------------------------------------------------
// classifier head
// ---------------------------------------------------------------------------

/// Per-part classifier: compress FC (C -> bottleneck) -> batch norm ->
/// dropout (train only) -> class FC without bias. The eval-mode embedding is
/// the bottleneck representation right before the class layer.
template <typename T>
struct ClassifierHeadT {
  int in_channels = 0;
  int bottleneck = 512;
  int num_classes = 0;
  T dropout_rate = T(0.5);
  ParameterT<T> compress_w, compress_b;
  ParameterT<T> bn_gamma, bn_beta;
  std::shared_ptr<BnStateT<T>> bn;
  ParameterT<T> cls_w;

  static ClassifierHeadT init(const std::string& prefix, int in_channels, int bottleneck,
                              int num_classes, std::mt19937_64& rng) {
    ClassifierHeadT h;
    h.in_channels = in_channels;
    h.bottleneck = bottleneck;
    h.num_classes = num_classes;
    h.compress_w = WeightEstimatorT<T>::he_init(prefix + ".compress_w",
                                                Shape{bottleneck, in_channels}, in_channels, rng);
    h.compress_b = ParameterT<T>::create(prefix + ".compress_b", Shape{bottleneck},
                                         std::vector<T>(static_cast<size_t>(bottleneck), T(0)),
                                         false);
    h.bn_gamma = ParameterT<T>::create(prefix + ".bn_gamma", Shape{bottleneck},
                                       std::vector<T>(static_cast<size_t>(bottleneck), T(1)),
                                       false);
    h.bn_beta = ParameterT<T>::create(prefix + ".bn_beta", Shape{bottleneck},
                                      std::vector<T>(static_cast<size_t>(bottleneck), T(0)),
                                      false);
    h.bn = std::make_shared<BnStateT<T>>();
    h.bn->mean.assign(static_cast<size_t>(bottleneck), T(0));
    h.bn->var.assign(static_cast<size_t>(bottleneck), T(1));
    std::vector<T> cw(static_cast<size_t>(num_classes) * bottleneck);
    for (auto& v : cw) v = static_cast<T>(rng_normal(rng) * 0.001);
    h.cls_w = ParameterT<T>::create(prefix + ".cls_w", Shape{num_classes, bottleneck},
                                    std::move(cw));
    return h;
  }

  /// Bottleneck representation (post batch-norm, pre classification layer).
  TensorT<T> embed(const PassContext<T>& ctx, const TensorT<T>& part) const {
    if (part.shape().rank() != 2 || part.shape()[1] != in_channels)
      fail(ErrorCode::ShapeMismatch, "classifier head expects [N," +
                                         std::to_string(in_channels) + "]");
    auto v = linear(part, ctx.view(compress_w), ctx.view(compress_b));
    return batch_norm(v, ctx.view(bn_gamma), ctx.view(bn_beta), *bn, ctx.training);
  }

  TensorT<T> logits(const PassContext<T>& ctx, const TensorT<T>& part) const {
    auto v = embed(ctx, part);
    if (ctx.training && dropout_rate > T(0)) {
      if (!ctx.rng) fail(ErrorCode::ConfigMismatch, "training pass requires an RNG");
      const T keep = T(1) - dropout_rate;
      std::vector<T> mask(static_cast<size_t>(v.numel()));
      for (auto& m : mask)
        m = rng_uniform(*ctx.rng) < static_cast<double>(keep) ? T(1) / keep : T(0);
      v = mul(v, TensorT<T>::constant(v.shape(), std::move(mask)));
    }
    return linear(v, ctx.view(cls_w));
  }
};

}  // namespace sdpl
