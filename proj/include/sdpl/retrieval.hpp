#pragma once

// Euclidean-distance retrieval and its metrics. Distances accumulate in
// 64-bit regardless of descriptor storage width; ties break on ascending
// gallery id so rankings are deterministic under any storage order.

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "sdpl/error.hpp"
#include "sdpl/tensor.hpp"

namespace sdpl {

struct DescriptorRecord {
  std::string id;
  int class_label = 0;
  std::vector<float> vec;
};

struct MetricsReport {
  std::map<int, double> recall_at;
  double ap = 0.0;
  i64 num_queries = 0;
  i64 num_gallery = 0;
};

/// Gallery indices ordered by ascending distance to the query (ties by id).
std::vector<size_t> rank(const DescriptorRecord& query,
                         std::span<const DescriptorRecord> gallery);

/// 1 if any relevant item appears in the top k of the ranking.
double recall_at_k(std::span<const size_t> ranking, std::span<const uint8_t> relevant,
                   int k);

/// Interpolation-free AP: mean of precision-at-hit over the relevant items.
double average_precision(std::span<const size_t> ranking,
                         std::span<const uint8_t> relevant);

MetricsReport evaluate_protocol(std::span<const DescriptorRecord> queries,
                                std::span<const DescriptorRecord> gallery,
                                std::span<const int> ks);

/// Accepts any positive query/gallery sizes; rejects degenerate protocols.
void validate_protocol_shape(i64 num_queries, i64 num_gallery);

// Descriptor files: one rank-2 tensor (count x dim) in the SDPT format plus a
// JSON sidecar listing {id, class_label, offset} per row.
void write_descriptors(const std::filesystem::path& prefix,
                       std::span<const DescriptorRecord> records);
std::vector<DescriptorRecord> read_descriptors(const std::filesystem::path& prefix);

std::string report_to_csv(const MetricsReport& report);
std::string report_to_json(const MetricsReport& report);

}  // namespace sdpl
