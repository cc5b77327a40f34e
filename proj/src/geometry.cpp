#include "sdpl/geometry.hpp"

#include <algorithm>
#include <cmath>

namespace sdpl {

namespace {

// Boundary ties (cell-center hits) round away from the layout center so that
// centered masks are symmetric under 180-degree rotation and the +dh / -dh
// layouts are exact rotations of each other.
int round_tie_down(double x) { return static_cast<int>(std::ceil(x - 0.5)); }
int round_tie_up(double x) { return static_cast<int>(std::floor(x + 0.5)); }

struct Box {
  int r0 = 0, r1 = 0, c0 = 0, c1 = 0;  // half-open cell ranges
  bool contains(int r, int c) const { return r >= r0 && r < r1 && c >= c0 && c < c1; }
  int row_extent() const { return r1 - r0; }
};

// Axis-aligned square of ring k (k = 0 empty, k = n_sps the full grid).
Box square(const RingLayout& layout, int k) {
  if (k <= 0) return Box{0, 0, 0, 0};
  if (k >= layout.n_sps) return Box{0, layout.height, 0, layout.width};
  const double er = k * layout.height / (2.0 * layout.n_sps);
  const double ec = k * layout.width / (2.0 * layout.n_sps);
  Box b;
  b.r0 = std::max(0, round_tie_down(layout.center_row - er));
  b.r1 = std::min(layout.height, round_tie_up(layout.center_row + er));
  b.c0 = std::max(0, round_tie_down(layout.center_col - ec));
  b.c1 = std::min(layout.width, round_tie_up(layout.center_col + ec));
  return b;
}

RegionMask band_mask(const RingLayout& layout, const Box& outer, const Box& inner) {
  RegionMask m;
  m.height = layout.height;
  m.width = layout.width;
  m.cells.assign(static_cast<size_t>(layout.height) * layout.width, 0);
  for (int r = outer.r0; r < outer.r1; ++r)
    for (int c = outer.c0; c < outer.c1; ++c)
      if (!inner.contains(r, c)) {
        m.cells[static_cast<size_t>(r) * layout.width + c] = 1;
        ++m.cell_count;
      }
  return m;
}

}  // namespace

RingLayout RingLayout::make(int height, int width, int n_sps, double center_row,
                            double center_col) {
  if (height < 2 || width < 2 || height % 2 != 0 || width % 2 != 0)
    fail(ErrorCode::InvalidCount, "grid extents must be even and >= 2");
  if (n_sps < 1 || n_sps > std::min(height, width) / 2)
    fail(ErrorCode::InvalidCount,
         "n_sps " + std::to_string(n_sps) + " outside [1, min(H,W)/2]");
  if (center_row < 0.0 || center_row > height || center_col < 0.0 || center_col > width)
    fail(ErrorCode::IndexOutOfRange, "segmentation center outside the grid");
  return RingLayout{n_sps, height, width, center_row, center_col};
}

RingLayout RingLayout::centered(int height, int width, int n_sps) {
  return make(height, width, n_sps, height / 2.0, width / 2.0);
}

RingLayout RingLayout::shifted(int height, int width, int n_sps, int delta_h) {
  auto [r, c] = shifted_center(height, width, delta_h, n_sps);
  return make(height, width, n_sps, r, c);
}

i64 dps_segment_count(int n_sps) {
  if (n_sps < 1) fail(ErrorCode::InvalidCount, "n_sps must be >= 1");
  return static_cast<i64>(n_sps) * (n_sps + 1) / 2;
}

std::pair<double, double> shifted_center(int height, int width, int delta_h, int n_sps) {
  if (n_sps < 1) fail(ErrorCode::InvalidCount, "n_sps must be >= 1");
  const double threshold = height / (2.0 * n_sps);
  if (std::abs(delta_h) > threshold)
    fail(ErrorCode::OffsetExceedsThreshold,
         "|delta_h| = " + std::to_string(std::abs(delta_h)) + " exceeds " +
             std::to_string(threshold));
  const double row = height / 2.0 + delta_h;
  const double col = width / 2.0 - static_cast<double>(width) * delta_h / height;
  return {row, col};
}

RegionMask ring_mask(const RingLayout& layout, int k) {
  if (k < 1 || k > layout.n_sps)
    fail(ErrorCode::IndexOutOfRange, "ring index " + std::to_string(k));
  return band_mask(layout, square(layout, k), square(layout, k - 1));
}

RegionMask segment_mask(const RingLayout& layout, Segment seg) {
  if (seg.inner < 1 || seg.outer > layout.n_sps || seg.inner > seg.outer)
    fail(ErrorCode::IndexOutOfRange,
         "segment (" + std::to_string(seg.inner) + "," + std::to_string(seg.outer) + ")");
  return band_mask(layout, square(layout, seg.outer), square(layout, seg.inner - 1));
}

std::vector<PartRegion> dps_partition(const RingLayout& layout) {
  std::vector<PartRegion> parts;
  parts.reserve(static_cast<size_t>(dps_segment_count(layout.n_sps)));
  for (int span = 0; span < layout.n_sps; ++span) {
    for (int i = 1; i + span <= layout.n_sps; ++i) {
      Segment seg{i, i + span};
      PartRegion p;
      p.segment = seg;
      p.mask = segment_mask(layout, seg);
      p.outer_size = square(layout, seg.outer).row_extent();
      parts.push_back(std::move(p));
    }
  }
  return parts;
}

std::vector<PartRegion> sps_partition(const RingLayout& layout) {
  std::vector<PartRegion> parts;
  parts.reserve(static_cast<size_t>(layout.n_sps));
  for (int k = 1; k <= layout.n_sps; ++k) {
    PartRegion p;
    p.segment = Segment{k, k};
    p.mask = ring_mask(layout, k);
    p.outer_size = square(layout, k).row_extent();
    parts.push_back(std::move(p));
  }
  return parts;
}

}  // namespace sdpl
