#pragma once

// Square-ring partition geometry. A RingLayout places n_sps nested axis-
// aligned squares around a segmentation center; ring k is the band between
// square k-1 and square k, with the outermost ring defined as the grid minus
// square n_sps-1 so the rings always tile the whole grid. The dense partition
// enumerates every contiguous ring segment [i..j].

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "sdpl/error.hpp"

namespace sdpl {

using i64 = std::int64_t;

/// Contiguous ring segment [inner..outer], 1-based, inner <= outer.
struct Segment {
  int inner = 1;
  int outer = 1;
  bool operator==(const Segment&) const = default;
};

struct RegionMask {
  int height = 0;
  int width = 0;
  std::vector<uint8_t> cells;  // row-major booleans
  i64 cell_count = 0;

  bool at(int r, int c) const { return cells[static_cast<size_t>(r) * width + c] != 0; }
};

struct RingLayout {
  int n_sps = 1;
  int height = 0;
  int width = 0;
  double center_row = 0.0;
  double center_col = 0.0;

  static RingLayout centered(int height, int width, int n_sps);
  /// Layout with the diagonally shifted center for row offset delta_h.
  static RingLayout shifted(int height, int width, int n_sps, int delta_h);
  /// Validating constructor used by both factories.
  static RingLayout make(int height, int width, int n_sps, double center_row,
                         double center_col);
};

/// Number of dense parts for n_sps base rings: n(n+1)/2.
i64 dps_segment_count(int n_sps);

/// Diagonal shift: the column offset is derived as -w * delta_h / h so the
/// center always moves along the anti-diagonal.
struct ShiftConfig {
  int delta_h = 0;
  double delta_w = 0.0;

  /// Validates |delta_h| <= h / (2 * n_sps) and derives delta_w.
  static ShiftConfig make(int height, int width, int n_sps, int delta_h);
};

/// Diagonally shifted segmentation center (row, col) = (h/2 + dh, w/2 - w*dh/h).
/// |delta_h| must stay within h / (2 * n_sps).
std::pair<double, double> shifted_center(int height, int width, int delta_h, int n_sps);

RegionMask ring_mask(const RingLayout& layout, int k);
RegionMask segment_mask(const RingLayout& layout, Segment seg);

struct PartRegion {
  Segment segment;
  RegionMask mask;
  int outer_size = 0;  // row extent of the segment's outer square
};

/// All dense parts in canonical order: base rings first, then recombinations
/// by increasing span, each group by increasing inner index.
std::vector<PartRegion> dps_partition(const RingLayout& layout);

/// Base rings only (the square-ring partition counterpart).
std::vector<PartRegion> sps_partition(const RingLayout& layout);

}  // namespace sdpl
