#include "sdpl/config.hpp"

#include <cmath>

#include "sdpl/geometry.hpp"

namespace sdpl {

namespace {

using nlohmann::json;

void expect_keys(const json& j, std::initializer_list<const char*> allowed,
                 const char* where) {
  if (!j.is_object()) fail(ErrorCode::SchemaMismatch, std::string(where) + " must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* k : allowed)
      if (it.key() == k) { known = true; break; }
    if (!known)
      fail(ErrorCode::SchemaMismatch,
           std::string("unknown key \"") + it.key() + "\" in " + where);
  }
}

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    fail(ErrorCode::SchemaMismatch, std::string("bad value for \"") + key + "\"");
  }
}

}  // namespace

std::string to_string(FusionMode m) {
  switch (m) {
    case FusionMode::adaptive: return "adaptive";
    case FusionMode::hard: return "hard";
    case FusionMode::none: return "none";
  }
  return "?";
}

std::string to_string(PartitionMode m) {
  return m == PartitionMode::dps ? "dps" : "sps";
}

FusionMode fusion_mode_from_string(const std::string& s) {
  if (s == "adaptive") return FusionMode::adaptive;
  if (s == "hard") return FusionMode::hard;
  if (s == "none") return FusionMode::none;
  fail(ErrorCode::SchemaMismatch, "fusion mode \"" + s + "\"");
}

PartitionMode partition_mode_from_string(const std::string& s) {
  if (s == "dps") return PartitionMode::dps;
  if (s == "sps") return PartitionMode::sps;
  fail(ErrorCode::SchemaMismatch, "partition mode \"" + s + "\"");
}

int BackboneConfig::downsample() const {
  if (kind == "avgpool") return avgpool_factor;
  int d = 1;
  for (int s : strides) d *= s;
  return d;
}

int BackboneConfig::out_channels() const {
  if (kind == "avgpool") return 3;
  return channels.empty() ? 0 : channels.back();
}

int SdplConfig::feature_grid() const {
  const int d = backbone.downsample();
  if (d <= 0 || image_size % d != 0)
    fail(ErrorCode::ConfigMismatch, "backbone downsample does not divide image size");
  return image_size / d;
}

int SdplConfig::feature_channels() const { return backbone.out_channels(); }

int SdplConfig::part_count() const {
  return partition == PartitionMode::dps ? static_cast<int>(dps_segment_count(n_sps))
                                         : n_sps;
}

double SdplConfig::shift_threshold() const {
  return feature_grid() / (2.0 * n_sps);
}

void SdplConfig::validate() const {
  if (n_sps < 1) fail(ErrorCode::InvalidCount, "n_sps must be >= 1");
  if (num_classes < 2) fail(ErrorCode::ConfigMismatch, "num_classes must be >= 2");
  if (image_size < 4) fail(ErrorCode::ConfigMismatch, "image_size too small");
  if (bottleneck < 1 || weight_est_hidden < 1)
    fail(ErrorCode::ConfigMismatch, "bottleneck / hidden dims must be positive");
  if (!(gem.p > 0.0) || !(gem.eps > 0.0))
    fail(ErrorCode::ConfigMismatch, "gem p and eps must be positive");
  if (backbone.kind != "conv" && backbone.kind != "avgpool")
    fail(ErrorCode::ConfigMismatch, "backbone kind must be conv or avgpool");
  if (backbone.kind == "conv") {
    if (backbone.channels.empty() || backbone.channels.size() != backbone.strides.size())
      fail(ErrorCode::ConfigMismatch, "backbone channels/strides lengths differ");
    for (int c : backbone.channels)
      if (c < 1) fail(ErrorCode::ConfigMismatch, "backbone channel must be >= 1");
    for (int s : backbone.strides)
      if (s < 1) fail(ErrorCode::ConfigMismatch, "backbone stride must be >= 1");
  } else if (backbone.avgpool_factor < 1) {
    fail(ErrorCode::ConfigMismatch, "avgpool factor must be >= 1");
  }

  const int grid = feature_grid();  // also checks divisibility
  if (grid % 2 != 0 || grid < 2 * n_sps)
    fail(ErrorCode::ConfigMismatch, "feature grid must be even and >= 2*n_sps");

  const double thr = shift_threshold();
  if (fusion == FusionMode::none) {
    if (std::abs(center_delta_h) > thr)
      fail(ErrorCode::OffsetExceedsThreshold, "center_delta_h exceeds grid/(2*n_sps)");
  } else {
    if (delta_h1 < 0 || delta_h1 > thr)
      fail(ErrorCode::OffsetExceedsThreshold, "delta_h1 must lie in [0, grid/(2*n_sps)]");
    if (delta_h2 > 0 || -delta_h2 > thr)
      fail(ErrorCode::OffsetExceedsThreshold, "delta_h2 must lie in [-grid/(2*n_sps), 0]");
    if (fusion == FusionMode::hard) {
      double s = 0.0;
      for (double b : hard_beta) {
        if (b < 0.0 || b > 1.0) fail(ErrorCode::ConfigMismatch, "hard_beta outside [0,1]");
        s += b;
      }
      if (std::abs(s - 1.0) > 1e-6)
        fail(ErrorCode::ConfigMismatch, "hard_beta must sum to 1");
    }
  }
}

nlohmann::json SdplConfig::to_json() const {
  json b;
  b["kind"] = backbone.kind;
  b["channels"] = backbone.channels;
  b["strides"] = backbone.strides;
  b["avgpool_factor"] = backbone.avgpool_factor;
  json g;
  g["p"] = gem.p;
  g["eps"] = gem.eps;
  g["learnable_p"] = gem.learnable_p;
  json j;
  j["n_sps"] = n_sps;
  j["delta_h1"] = delta_h1;
  j["delta_h2"] = delta_h2;
  j["fusion"] = to_string(fusion);
  j["hard_beta"] = hard_beta;
  j["partition"] = to_string(partition);
  j["center_delta_h"] = center_delta_h;
  j["gem"] = g;
  j["num_classes"] = num_classes;
  j["image_size"] = image_size;
  j["bottleneck"] = bottleneck;
  j["weight_est_hidden"] = weight_est_hidden;
  j["normalize_parts"] = normalize_parts;
  j["backbone"] = b;
  return j;
}

SdplConfig SdplConfig::from_json(const nlohmann::json& j) {
  expect_keys(j,
              {"n_sps", "delta_h1", "delta_h2", "fusion", "hard_beta", "partition",
               "center_delta_h", "gem", "num_classes", "image_size", "bottleneck",
               "weight_est_hidden", "normalize_parts", "backbone"},
              "config");
  SdplConfig c;
  c.n_sps = get_or(j, "n_sps", c.n_sps);
  c.delta_h1 = get_or(j, "delta_h1", c.delta_h1);
  c.delta_h2 = get_or(j, "delta_h2", c.delta_h2);
  if (j.contains("fusion")) c.fusion = fusion_mode_from_string(j.at("fusion").get<std::string>());
  if (j.contains("hard_beta")) {
    auto v = j.at("hard_beta").get<std::vector<double>>();
    if (v.size() != 3) fail(ErrorCode::SchemaMismatch, "hard_beta must have 3 entries");
    for (size_t i = 0; i < 3; ++i) c.hard_beta[i] = v[i];
  }
  if (j.contains("partition"))
    c.partition = partition_mode_from_string(j.at("partition").get<std::string>());
  c.center_delta_h = get_or(j, "center_delta_h", c.center_delta_h);
  if (j.contains("gem")) {
    const auto& g = j.at("gem");
    expect_keys(g, {"p", "eps", "learnable_p"}, "gem");
    c.gem.p = get_or(g, "p", c.gem.p);
    c.gem.eps = get_or(g, "eps", c.gem.eps);
    c.gem.learnable_p = get_or(g, "learnable_p", c.gem.learnable_p);
  }
  c.num_classes = get_or(j, "num_classes", c.num_classes);
  c.image_size = get_or(j, "image_size", c.image_size);
  c.bottleneck = get_or(j, "bottleneck", c.bottleneck);
  c.weight_est_hidden = get_or(j, "weight_est_hidden", c.weight_est_hidden);
  c.normalize_parts = get_or(j, "normalize_parts", c.normalize_parts);
  if (j.contains("backbone")) {
    const auto& b = j.at("backbone");
    expect_keys(b, {"kind", "channels", "strides", "avgpool_factor"}, "backbone");
    c.backbone.kind = get_or<std::string>(b, "kind", c.backbone.kind);
    c.backbone.channels = get_or(b, "channels", c.backbone.channels);
    c.backbone.strides = get_or(b, "strides", c.backbone.strides);
    c.backbone.avgpool_factor = get_or(b, "avgpool_factor", c.backbone.avgpool_factor);
  }
  c.validate();
  return c;
}

}  // namespace sdpl
