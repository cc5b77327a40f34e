#include "sdpl/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "sdpl/serialize.hpp"

namespace sdpl {

std::vector<size_t> rank(const DescriptorRecord& query,
                         std::span<const DescriptorRecord> gallery) {
  if (gallery.empty()) fail(ErrorCode::EmptyGallery, "gallery is empty");
  const size_t dim = query.vec.size();
  std::vector<double> dist(gallery.size());
  for (size_t g = 0; g < gallery.size(); ++g) {
    if (gallery[g].vec.size() != dim)
      fail(ErrorCode::DimensionMismatch,
           "descriptor length " + std::to_string(gallery[g].vec.size()) + " vs query " +
               std::to_string(dim));
    double s = 0.0;
    for (size_t i = 0; i < dim; ++i) {
      const double d = static_cast<double>(query.vec[i]) - static_cast<double>(gallery[g].vec[i]);
      s += d * d;
    }
    dist[g] = s;
  }
  std::vector<size_t> order(gallery.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    if (dist[a] != dist[b]) return dist[a] < dist[b];
    return gallery[a].id < gallery[b].id;
  });
  return order;
}

double recall_at_k(std::span<const size_t> ranking, std::span<const uint8_t> relevant,
                   int k) {
  if (k < 1) fail(ErrorCode::InvalidCount, "k must be >= 1");
  const size_t top = std::min(static_cast<size_t>(k), ranking.size());
  for (size_t i = 0; i < top; ++i)
    if (relevant[ranking[i]]) return 1.0;
  return 0.0;
}

double average_precision(std::span<const size_t> ranking,
                         std::span<const uint8_t> relevant) {
  i64 total_relevant = 0;
  for (uint8_t r : relevant) total_relevant += r ? 1 : 0;
  if (total_relevant == 0) fail(ErrorCode::NoRelevantItem, "no relevant gallery item");
  double ap = 0.0;
  i64 hits = 0;
  for (size_t i = 0; i < ranking.size(); ++i) {
    if (!relevant[ranking[i]]) continue;
    ++hits;
    ap += static_cast<double>(hits) / static_cast<double>(i + 1);
  }
  return ap / static_cast<double>(total_relevant);
}

MetricsReport evaluate_protocol(std::span<const DescriptorRecord> queries,
                                std::span<const DescriptorRecord> gallery,
                                std::span<const int> ks) {
  if (queries.empty()) fail(ErrorCode::EmptyGallery, "query set is empty");
  validate_protocol_shape(static_cast<i64>(queries.size()), static_cast<i64>(gallery.size()));

  MetricsReport report;
  report.num_queries = static_cast<i64>(queries.size());
  report.num_gallery = static_cast<i64>(gallery.size());
  for (int k : ks) report.recall_at[k] = 0.0;

  std::vector<double> per_query_ap(queries.size());
  std::vector<std::map<int, double>> per_query_recall(queries.size());

  for (size_t q = 0; q < queries.size(); ++q) {
    const auto order = rank(queries[q], gallery);
    std::vector<uint8_t> relevant(gallery.size());
    for (size_t g = 0; g < gallery.size(); ++g)
      relevant[g] = gallery[g].class_label == queries[q].class_label ? 1 : 0;
    per_query_ap[q] = average_precision(order, relevant);
    for (int k : ks) per_query_recall[q][k] = recall_at_k(order, relevant, k);
  }

  for (size_t q = 0; q < queries.size(); ++q) {
    report.ap += per_query_ap[q];
    for (int k : ks) report.recall_at[k] += per_query_recall[q][k];
  }
  report.ap /= static_cast<double>(queries.size());
  for (int k : ks) report.recall_at[k] /= static_cast<double>(queries.size());
  return report;
}

void validate_protocol_shape(i64 num_queries, i64 num_gallery) {
  if (num_queries < 1) fail(ErrorCode::EmptyGallery, "protocol needs at least one query");
  if (num_gallery < 1) fail(ErrorCode::EmptyGallery, "protocol needs at least one gallery item");
}

void write_descriptors(const std::filesystem::path& prefix,
                       std::span<const DescriptorRecord> records) {
  if (records.empty()) fail(ErrorCode::EmptyGallery, "no descriptors to write");
  const i64 dim = static_cast<i64>(records[0].vec.size());
  std::vector<float> flat;
  flat.reserve(records.size() * static_cast<size_t>(dim));
  nlohmann::json sidecar;
  sidecar["dim"] = dim;
  sidecar["metric"] = "euclidean";
  auto& list = sidecar["records"];
  list = nlohmann::json::array();
  for (size_t i = 0; i < records.size(); ++i) {
    if (static_cast<i64>(records[i].vec.size()) != dim)
      fail(ErrorCode::DimensionMismatch, "descriptor lengths differ");
    flat.insert(flat.end(), records[i].vec.begin(), records[i].vec.end());
    nlohmann::json e;
    e["id"] = records[i].id;
    e["class_label"] = records[i].class_label;
    e["offset"] = i;
    list.push_back(std::move(e));
  }
  save_tensor_file(prefix.string() + ".sdpt", Shape{static_cast<i64>(records.size()), dim},
                   flat);
  std::ofstream os(prefix.string() + ".json");
  if (!os) fail(ErrorCode::IoError, "cannot write descriptor sidecar");
  os << sidecar.dump(2) << "\n";
}

std::vector<DescriptorRecord> read_descriptors(const std::filesystem::path& prefix) {
  const auto stored = load_tensor_file(prefix.string() + ".sdpt");
  if (stored.shape.rank() != 2)
    fail(ErrorCode::SchemaMismatch, "descriptor tensor must be rank 2");
  std::ifstream is(prefix.string() + ".json");
  if (!is) fail(ErrorCode::IoError, "cannot open descriptor sidecar");
  nlohmann::json sidecar;
  try {
    is >> sidecar;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::SchemaMismatch, std::string("descriptor sidecar: ") + e.what());
  }
  const i64 rows = stored.shape[0], dim = stored.shape[1];
  if (!sidecar.contains("records") || static_cast<i64>(sidecar["records"].size()) != rows)
    fail(ErrorCode::SchemaMismatch, "sidecar record count does not match tensor rows");
  std::vector<DescriptorRecord> out(static_cast<size_t>(rows));
  for (const auto& e : sidecar["records"]) {
    const i64 off = e.at("offset").get<i64>();
    if (off < 0 || off >= rows) fail(ErrorCode::SchemaMismatch, "sidecar offset out of range");
    auto& rec = out[static_cast<size_t>(off)];
    rec.id = e.at("id").get<std::string>();
    rec.class_label = e.at("class_label").get<int>();
    rec.vec.assign(stored.values.begin() + off * dim, stored.values.begin() + (off + 1) * dim);
  }
  return out;
}

std::string report_to_csv(const MetricsReport& report) {
  std::ostringstream os;
  os << "metric,value\n";
  for (const auto& [k, v] : report.recall_at) {
    os.precision(10);
    os << "recall@" << k << "," << v << "\n";
  }
  os.precision(10);
  os << "ap," << report.ap << "\n";
  os << "num_queries," << report.num_queries << "\n";
  os << "num_gallery," << report.num_gallery << "\n";
  return os.str();
}

std::string report_to_json(const MetricsReport& report) {
  nlohmann::json j;
  for (const auto& [k, v] : report.recall_at) j["recall"][std::to_string(k)] = v;
  j["ap"] = report.ap;
  j["num_queries"] = report.num_queries;
  j["num_gallery"] = report.num_gallery;
  return j.dump(2) + "\n";
}

}  // namespace sdpl
