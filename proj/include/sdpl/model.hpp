#pragma once

// Full SDPL forward pass: shared mini-backbone -> dense partitions at up to
// three diagonally shifted segmentation centers -> masked GeM -> adaptive or
// hard fusion -> one classifier head per part. Both views run through the
// same parameters; the image descriptor concatenates the per-part bottleneck
// representations in canonical part order.

#include <array>
#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include "sdpl/config.hpp"
#include "sdpl/sdpl_ops.hpp"

namespace sdpl {

template <typename T>
struct ConvBlockT {
  ParameterT<T> w, b;
  int stride = 1;
};

template <typename T>
class SdplModelT {
 public:
  SdplModelT(SdplConfig cfg, uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    build(seed);
  }

  const SdplConfig& config() const { return cfg_; }
  int part_count() const { return static_cast<int>(shift_parts_[0].size()); }
  int descriptor_dim() const { return part_count() * cfg_.bottleneck; }
  const std::vector<std::vector<PartRegion>>& partitions() const { return shift_parts_; }

  struct TrainOut {
    TensorT<T> loss;
    std::vector<TensorT<T>> logits_drone, logits_sat;
  };

  /// Paired-batch training pass; loss sums the per-part cross entropies over
  /// both views. Mutates batch-norm running stats and draws dropout from rng.
  TrainOut forward_train(TapeT<T>& tape, const TensorT<T>& drone, const TensorT<T>& sat,
                         std::span<const int> labels, std::mt19937_64& rng) {
    check_batch(drone);
    check_batch(sat);
    if (drone.shape()[0] != sat.shape()[0] ||
        static_cast<i64>(labels.size()) != drone.shape()[0])
      fail(ErrorCode::ShapeMismatch, "paired batch sizes differ");
    PassContext<T> ctx{&tape, true, &rng};

    auto parts_d = view_parts(ctx, drone);
    auto parts_s = view_parts(ctx, sat);
    TrainOut out;
    TensorT<T> loss;
    for (size_t n = 0; n < parts_d.parts.size(); ++n) {
      auto ld = heads_[n].logits(ctx, parts_d.parts[n]);
      auto ls = heads_[n].logits(ctx, parts_s.parts[n]);
      auto ce = add(cross_entropy(ld, labels), cross_entropy(ls, labels));
      loss = loss.defined() ? add(loss, ce) : ce;
      out.logits_drone.push_back(std::move(ld));
      out.logits_sat.push_back(std::move(ls));
    }
    out.loss = std::move(loss);
    return out;
  }

  /// Eval-mode descriptors, one row per image, length part_count * bottleneck.
  TensorT<T> forward_embed(const TensorT<T>& images) const {
    return embed_selected(images, all_part_indices());
  }

  /// Concatenates only parts whose outer ring index is <= scale.
  TensorT<T> embed_scale_subset(const TensorT<T>& images, int scale) const {
    if (scale < 1 || scale > cfg_.n_sps)
      fail(ErrorCode::InvalidScale, "scale " + std::to_string(scale));
    std::vector<int> keep;
    for (int n = 0; n < part_count(); ++n)
      if (shift_parts_[0][static_cast<size_t>(n)].segment.outer <= scale) keep.push_back(n);
    return embed_selected(images, keep);
  }

  /// Part indices selected by embed_scale_subset for a given scale.
  std::vector<int> scale_subset_indices(int scale) const {
    if (scale < 1 || scale > cfg_.n_sps)
      fail(ErrorCode::InvalidScale, "scale " + std::to_string(scale));
    std::vector<int> keep;
    for (int n = 0; n < part_count(); ++n)
      if (shift_parts_[0][static_cast<size_t>(n)].segment.outer <= scale) keep.push_back(n);
    return keep;
  }

  std::vector<ParameterT<T>*> parameters() {
    std::vector<ParameterT<T>*> ps;
    for (auto& b : blocks_) {
      ps.push_back(&b.w);
      ps.push_back(&b.b);
    }
    if (gem_p_) ps.push_back(&*gem_p_);
    if (westim_) {
      ps.push_back(&westim_->conv_w);
      ps.push_back(&westim_->fc1_w);
      ps.push_back(&westim_->fc1_b);
      ps.push_back(&westim_->fc2_w);
      ps.push_back(&westim_->fc2_b);
      ps.push_back(&westim_->fc3_w);
      ps.push_back(&westim_->fc3_b);
    }
    for (auto& h : heads_) {
      ps.push_back(&h.compress_w);
      ps.push_back(&h.compress_b);
      ps.push_back(&h.bn_gamma);
      ps.push_back(&h.bn_beta);
      ps.push_back(&h.cls_w);
    }
    return ps;
  }

  std::span<ClassifierHeadT<T>> heads() { return heads_; }
  std::span<const ClassifierHeadT<T>> heads() const { return heads_; }
  const std::optional<WeightEstimatorT<T>>& weight_estimator() const { return westim_; }

  /// Per-sample fusion weights for a batch of images (adaptive mode only).
  TensorT<T> estimate_weights(const TensorT<T>& images) const {
    if (!westim_) fail(ErrorCode::ConfigMismatch, "model has no weight estimator");
    PassContext<T> ctx{};
    return westim_->forward(ctx, backbone_forward(ctx, images));
  }

 private:
  void build(uint64_t seed) {
    const int grid = cfg_.feature_grid();

    if (cfg_.backbone.kind == "conv") {
      auto rng = seeded_rng(seed, "backbone");
      int ci = 3;
      for (size_t i = 0; i < cfg_.backbone.channels.size(); ++i) {
        const int co = cfg_.backbone.channels[i];
        ConvBlockT<T> blk;
        blk.stride = cfg_.backbone.strides[i];
        blk.w = WeightEstimatorT<T>::he_init("backbone." + std::to_string(i) + ".w",
                                             Shape{co, ci, 3, 3}, ci * 9, rng);
        blk.b = ParameterT<T>::create("backbone." + std::to_string(i) + ".b", Shape{co},
                                      std::vector<T>(static_cast<size_t>(co), T(0)), false);
        blocks_.push_back(std::move(blk));
        ci = co;
      }
    }

    if (cfg_.gem.learnable_p) {
      auto p = ParameterT<T>::create("gem.p", Shape{1}, {static_cast<T>(cfg_.gem.p)}, false);
      gem_p_ = std::move(p);
    }

    // Partitions: centered first, then top-left and bottom-right shifts.
    auto make_parts = [&](int delta_h) {
      const auto layout = RingLayout::shifted(grid, grid, cfg_.n_sps, delta_h);
      return cfg_.partition == PartitionMode::dps ? dps_partition(layout)
                                                  : sps_partition(layout);
    };
    if (cfg_.fusion == FusionMode::none) {
      shift_parts_.push_back(make_parts(cfg_.center_delta_h));
    } else {
      shift_parts_.push_back(make_parts(0));
      shift_parts_.push_back(make_parts(cfg_.delta_h1));
      shift_parts_.push_back(make_parts(cfg_.delta_h2));
      if (cfg_.fusion == FusionMode::adaptive) {
        auto rng = seeded_rng(seed, "westim");
        westim_ = WeightEstimatorT<T>::init(cfg_.feature_channels(), cfg_.weight_est_hidden, rng);
      }
    }

    const int parts = part_count();
    for (int n = 0; n < parts; ++n) {
      auto rng = seeded_rng(seed, "head." + std::to_string(n));
      heads_.push_back(ClassifierHeadT<T>::init("head." + std::to_string(n),
                                                cfg_.feature_channels(), cfg_.bottleneck,
                                                cfg_.num_classes, rng));
    }
  }

  void check_batch(const TensorT<T>& images) const {
    if (images.shape().rank() != 4 || images.shape()[1] != 3 ||
        images.shape()[2] != cfg_.image_size || images.shape()[3] != cfg_.image_size)
      fail(ErrorCode::ConfigMismatch,
           "expected images [N,3," + std::to_string(cfg_.image_size) + "," +
               std::to_string(cfg_.image_size) + "], got " + images.shape().str());
  }

  TensorT<T> backbone_forward(const PassContext<T>& ctx, const TensorT<T>& images) const {
    if (cfg_.backbone.kind == "avgpool")
      return avg_pool2d(images, cfg_.backbone.avgpool_factor);
    auto x = images;
    for (const auto& blk : blocks_)
      x = relu(conv3x3(x, ctx.view(blk.w), ctx.view(blk.b), blk.stride));
    return x;
  }

  TensorT<T> gem_exponent(const PassContext<T>& ctx) const {
    return gem_p_ ? ctx.view(*gem_p_) : TensorT<T>::scalar(static_cast<T>(cfg_.gem.p));
  }

  PartSetT<T> view_parts(const PassContext<T>& ctx, const TensorT<T>& images) const {
    auto feature = backbone_forward(ctx, images);
    const auto p = gem_exponent(ctx);
    const T eps = static_cast<T>(cfg_.gem.eps);
    if (cfg_.fusion == FusionMode::none) {
      PartSetT<T> s;
      s.parts = gem_pool_multi(feature, shift_parts_[0], p, eps);
      return s;
    }
    std::array<PartSetT<T>, 3> sets;
    for (size_t j = 0; j < 3; ++j)
      sets[j].parts = gem_pool_multi(feature, shift_parts_[j], p, eps);
    if (cfg_.fusion == FusionMode::adaptive)
      return fuse(sets, westim_->forward(ctx, feature));
    FusionWeights w;
    w.beta = cfg_.hard_beta;
    return fuse(sets, w);
  }

  TensorT<T> embed_selected(const TensorT<T>& images, const std::vector<int>& keep) const {
    check_batch(images);
    const i64 N = images.shape()[0];
    const i64 D = static_cast<i64>(keep.size()) * cfg_.bottleneck;
    std::vector<T> out(static_cast<size_t>(N * D));
    PassContext<T> ctx{};  // eval, no tape

    const i64 chunk = 16;
    auto img = images.data();
    const i64 img_elems = 3LL * cfg_.image_size * cfg_.image_size;
    for (i64 start = 0; start < N; start += chunk) {
      const i64 b = std::min(chunk, N - start);
      std::vector<T> slice(img.begin() + start * img_elems,
                           img.begin() + (start + b) * img_elems);
      auto batch = TensorT<T>::constant(Shape{b, 3, cfg_.image_size, cfg_.image_size},
                                        std::move(slice));
      auto parts = view_parts(ctx, batch);
      for (size_t ki = 0; ki < keep.size(); ++ki) {
        auto e = heads_[static_cast<size_t>(keep[ki])].embed(ctx, parts.parts[static_cast<size_t>(keep[ki])]);
        auto ed = e.data();
        for (i64 r = 0; r < b; ++r) {
          const T* src = ed.data() + r * cfg_.bottleneck;
          T* dst = out.data() + (start + r) * D + static_cast<i64>(ki) * cfg_.bottleneck;
          if (cfg_.normalize_parts) {
            T norm = T(0);
            for (int c = 0; c < cfg_.bottleneck; ++c) norm += src[c] * src[c];
            norm = std::sqrt(norm);
            const T inv = norm > T(0) ? T(1) / norm : T(0);
            for (int c = 0; c < cfg_.bottleneck; ++c) dst[c] = src[c] * inv;
          } else {
            for (int c = 0; c < cfg_.bottleneck; ++c) dst[c] = src[c];
          }
        }
      }
    }
    return TensorT<T>::constant(Shape{N, D}, std::move(out));
  }

  std::vector<int> all_part_indices() const {
    std::vector<int> v(static_cast<size_t>(part_count()));
    for (int i = 0; i < part_count(); ++i) v[static_cast<size_t>(i)] = i;
    return v;
  }

  SdplConfig cfg_;
  std::vector<ConvBlockT<T>> blocks_;
  std::optional<ParameterT<T>> gem_p_;
  std::optional<WeightEstimatorT<T>> westim_;
  std::vector<ClassifierHeadT<T>> heads_;
  std::vector<std::vector<PartRegion>> shift_parts_;
};

using SdplModel = SdplModelT<float>;

}  // namespace sdpl
