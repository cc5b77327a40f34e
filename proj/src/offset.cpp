#include "sdpl/offset.hpp"

#include <algorithm>
#include <sstream>

namespace sdpl {

namespace {

// out[i] for a 1-D axis of length n under pad p:
//   p > 0: out[i] = src[p-1-i] for i < p (mirror of the low strip), else src[i-p]
//   p < 0: mirrored at the high edge, content moves toward the low edge
i64 source_index(i64 i, i64 n, int p) {
  if (p > 0) return i < p ? p - 1 - i : i - p;
  if (p < 0) {
    const i64 q = -static_cast<i64>(p);
    return i >= n - q ? 2 * n - q - 1 - i : i + q;
  }
  return i;
}

}  // namespace

TensorT<float> mirror_shift(const TensorT<float>& image, PadSpec spec) {
  if (image.shape().rank() != 3)
    fail(ErrorCode::ShapeMismatch, "mirror_shift expects [C,H,W]");
  const i64 C = image.shape()[0], H = image.shape()[1], W = image.shape()[2];
  if (std::abs(spec.p_h) >= H || std::abs(spec.p_w) >= W)
    fail(ErrorCode::PadTooLarge, "pad " + spec.label() + " on " + image.shape().str());
  if (spec.is_baseline()) return image;

  auto src = image.data();
  std::vector<float> out(src.size());
  for (i64 c = 0; c < C; ++c) {
    const float* plane = src.data() + c * H * W;
    float* dst = out.data() + c * H * W;
    for (i64 r = 0; r < H; ++r) {
      const float* row = plane + source_index(r, H, spec.p_h) * W;
      for (i64 w = 0; w < W; ++w) dst[r * W + w] = row[source_index(w, W, spec.p_w)];
    }
  }
  return TensorT<float>::constant(image.shape(), std::move(out));
}

std::vector<PadSpec> pad_patterns(int magnitude) {
  const int p = magnitude;
  return {{p, 0}, {p, p}, {-p, -p}, {p, -p}, {-p, p}};
}

std::vector<DegradationRow> sweep(const SdplModel& model, const Dataset& query_images,
                                  std::span<const DescriptorRecord> gallery,
                                  std::span<const PadSpec> specs) {
  if (query_images.records.empty()) fail(ErrorCode::EmptyGallery, "no query images");
  const std::array<int, 3> ks{1, 5, 10};

  auto evaluate_at = [&](PadSpec spec) {
    std::vector<TensorT<float>> perturbed;
    perturbed.reserve(query_images.records.size());
    for (const auto& rec : query_images.records)
      perturbed.push_back(mirror_shift(rec.image, spec));
    auto batch = stack_images<float>(perturbed);
    auto desc = model.forward_embed(batch);
    auto dd = desc.data();
    const i64 dim = desc.shape()[1];
    std::vector<DescriptorRecord> queries(query_images.records.size());
    for (size_t q = 0; q < queries.size(); ++q) {
      queries[q].id = query_images.records[q].id;
      queries[q].class_label = query_images.records[q].class_id;
      queries[q].vec.assign(dd.begin() + static_cast<i64>(q) * dim,
                            dd.begin() + static_cast<i64>(q + 1) * dim);
    }
    return evaluate_protocol(queries, gallery, ks);
  };

  std::vector<DegradationRow> rows;
  const MetricsReport base = evaluate_at(PadSpec{0, 0});
  rows.push_back(DegradationRow{PadSpec{0, 0}, base.recall_at.at(1), base.ap, 0.0, 0.0});
  for (const auto& spec : specs) {
    if (spec.is_baseline()) continue;  // baseline is always row 0
    const MetricsReport r = evaluate_at(spec);
    rows.push_back(DegradationRow{spec, r.recall_at.at(1), r.ap,
                                  r.recall_at.at(1) - base.recall_at.at(1),
                                  r.ap - base.ap});
  }
  return rows;
}

std::string sweep_to_csv(std::span<const DegradationRow> rows) {
  std::ostringstream os;
  os.precision(10);
  os << "p_h,p_w,recall@1,ap,delta_recall,delta_ap\n";
  for (const auto& r : rows)
    os << r.spec.p_h << "," << r.spec.p_w << "," << r.recall1 << "," << r.ap << ","
       << r.delta_recall1 << "," << r.delta_ap << "\n";
  return os.str();
}

}  // namespace sdpl
