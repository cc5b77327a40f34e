#pragma once

// Seeded synthetic cross-view scenes: each class is a deterministic layout of
// colored primitives on a unit canvas. The satellite view is the canonical
// top-down render; drone views re-render the same layout under a small
// seeded affine jitter, so cross-view matching is learnable but not trivial.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "sdpl/tensor.hpp"

namespace sdpl {

struct Primitive {
  enum Kind { rect, circle };
  Kind kind = rect;
  double cx = 0.5, cy = 0.5;  // center on the unit canvas
  double sx = 0.1, sy = 0.1;  // half extents (radius for circles)
  std::array<float, 3> color{1.0f, 1.0f, 1.0f};
};

struct SceneSpec {
  int class_id = 0;
  uint64_t seed = 0;
  std::vector<Primitive> layout;  // painter order, background first

  /// Deterministic layout for (class_id, seed).
  static SceneSpec generate(int class_id, uint64_t seed);
};

struct View {
  enum Kind { satellite, drone };
  Kind kind = satellite;
  int k = 0;  // drone variant index

  static View sat() { return View{satellite, 0}; }
  static View drone_k(int k) { return View{drone, k}; }
};

struct ViewJitter {
  double dx = 0.0, dy = 0.0;  // translation, fraction of canvas
  double scale = 1.0;
  std::array<float, 3> color_gain{1.0f, 1.0f, 1.0f};
};

/// The affine jitter drone view k applies (satellite is the identity).
ViewJitter view_jitter(const SceneSpec& scene, View view);

/// Renders a view of the scene at image_size x image_size; output values are
/// 8-bit quantized so a PPM round trip is exact.
TensorT<float> render_view(const SceneSpec& scene, View view, int image_size);

struct DatasetRecord {
  int class_id = 0;
  View view;
  std::string id;  // unique within the dataset, e.g. "0007/drone/d3"
  TensorT<float> image;
};

struct Dataset {
  int image_size = 0;
  std::vector<DatasetRecord> records;

  std::vector<int> class_ids() const;
  std::vector<size_t> satellite_indices() const;
  std::vector<size_t> drone_indices() const;
};

struct SplitSpec {
  int train_classes = 30;
  int test_classes = 20;
  int drone_views = 8;
  int image_size = 64;
  uint64_t seed = 0;
};

/// Writes <out>/train/<class>/{drone,satellite}/*.ppm, same for test, plus
/// split.json listing the class ids per split. Byte-identical for a fixed spec.
void generate_dataset(const SplitSpec& spec, const std::filesystem::path& out_root);

/// In-memory dataset for one split without touching the filesystem.
Dataset synthesize_split(const SplitSpec& spec, bool train_split);

/// Loads a split directory (<root>/<class>/{drone,satellite}/images) in
/// deterministic lexicographic order.
Dataset load_directory(const std::filesystem::path& root);

}  // namespace sdpl
