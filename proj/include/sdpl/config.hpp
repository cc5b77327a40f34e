#pragma once

#include <array>
#include <string>
#include <vector>

#include <json.hpp>

#include "sdpl/error.hpp"

namespace sdpl {

enum class FusionMode { adaptive, hard, none };
enum class PartitionMode { dps, sps };

std::string to_string(FusionMode m);
std::string to_string(PartitionMode m);
FusionMode fusion_mode_from_string(const std::string& s);
PartitionMode partition_mode_from_string(const std::string& s);

struct BackboneConfig {
  std::string kind = "conv";  // "conv" | "avgpool"
  std::vector<int> channels{8, 16, 32, 64};
  std::vector<int> strides{2, 2, 1, 1};
  int avgpool_factor = 4;

  int downsample() const;
  int out_channels() const;
};

struct GemConfig {
  double p = 3.0;
  double eps = 1e-6;
  bool learnable_p = false;
};

/// Full model configuration. JSON round-trips with every field explicit;
/// unknown keys are rejected at every level.
struct SdplConfig {
  int n_sps = 4;
  int delta_h1 = 2;    // top-left shift (rows move down, cols move left)
  int delta_h2 = -2;   // bottom-right shift
  FusionMode fusion = FusionMode::adaptive;
  std::array<double, 3> hard_beta{0.8, 0.1, 0.1};
  PartitionMode partition = PartitionMode::dps;
  int center_delta_h = 0;  // base-partition offset for fusion-free variants
  GemConfig gem;
  int num_classes = 30;
  int image_size = 64;
  int bottleneck = 512;
  int weight_est_hidden = 512;
  bool normalize_parts = false;
  BackboneConfig backbone;

  int feature_grid() const;
  int feature_channels() const;
  int part_count() const;
  double shift_threshold() const;

  void validate() const;

  nlohmann::json to_json() const;
  static SdplConfig from_json(const nlohmann::json& j);
};

}  // namespace sdpl
