#pragma once

// Mirror-shift query perturbations and the degradation sweep. A positive pad
// along an axis reflects the strip at the low edge outward and crops back
// from that edge, so content moves toward the high edge; negative pads mirror
// the high edge. Both axes act independently and the resolution is preserved.

#include <span>
#include <string>
#include <vector>

#include "sdpl/model.hpp"
#include "sdpl/retrieval.hpp"
#include "sdpl/synth.hpp"

namespace sdpl {

struct PadSpec {
  int p_h = 0;  // rows; +p shifts content down
  int p_w = 0;  // cols; +p shifts content right

  bool is_baseline() const { return p_h == 0 && p_w == 0; }
  std::string label() const {
    return "(" + std::to_string(p_h) + "," + std::to_string(p_w) + ")";
  }
};

/// Applies the mirror-shift to a [C,H,W] image. Bit-identical for (0,0).
TensorT<float> mirror_shift(const TensorT<float>& image, PadSpec spec);

struct DegradationRow {
  PadSpec spec;
  double recall1 = 0.0;
  double ap = 0.0;
  double delta_recall1 = 0.0;  // vs the (0,0) baseline of the same sweep
  double delta_ap = 0.0;
};

/// Perturbs every query image per spec, re-embeds, evaluates against the
/// fixed gallery, and reports metric deltas. The (0,0) baseline row is always
/// computed first and included in the result.
std::vector<DegradationRow> sweep(const SdplModel& model, const Dataset& query_images,
                                  std::span<const DescriptorRecord> gallery,
                                  std::span<const PadSpec> specs);

/// The five sign patterns of one pad magnitude: (+P,0), (+P,+P), (-P,-P),
/// (+P,-P), (-P,+P).
std::vector<PadSpec> pad_patterns(int magnitude);

std::string sweep_to_csv(std::span<const DegradationRow> rows);

}  // namespace sdpl
