#include <doctest.h>

#include "oracles.hpp"
#include "sdpl/retrieval.hpp"

#include <filesystem>

using namespace sdpl;

namespace {

bool throws_code(ErrorCode code, const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code() == code;
  }
  return false;
}

DescriptorRecord rec(std::string id, int label, std::vector<float> v) {
  return DescriptorRecord{std::move(id), label, std::move(v)};
}

std::vector<DescriptorRecord> random_gallery(std::mt19937_64& rng, int count, int dim,
                                             int labels) {
  std::vector<DescriptorRecord> g;
  for (int i = 0; i < count; ++i) {
    std::vector<float> v(static_cast<size_t>(dim));
    for (auto& x : v) x = static_cast<float>(rng_uniform(rng, -1, 1));
    g.push_back(rec("g" + std::to_string(100 + i),
                    static_cast<int>(rng_below(rng, static_cast<uint64_t>(labels))), v));
  }
  return g;
}

}  // namespace

TEST_SUITE("retrieval") {

TEST_CASE("self match ranks first with distance zero") {
  std::vector<DescriptorRecord> gallery{rec("a", 0, {1, 2, 3}), rec("b", 1, {0, 0, 0}),
                                        rec("c", 2, {5, 5, 5})};
  auto order = rank(rec("q", 0, {1, 2, 3}), gallery);
  CHECK(order[0] == 0);
}

TEST_CASE("nearer item first") {
  std::vector<DescriptorRecord> gallery{rec("far", 0, {2, 0}), rec("near", 1, {1, 0})};
  auto order = rank(rec("q", 9, {0, 0}), gallery);
  CHECK(gallery[order[0]].id == "near");
  CHECK(gallery[order[1]].id == "far");
}

TEST_CASE("errors: empty gallery and dimension mismatch") {
  std::vector<DescriptorRecord> empty;
  CHECK(throws_code(ErrorCode::EmptyGallery, [&] { rank(rec("q", 0, {1}), empty); }));
  std::vector<DescriptorRecord> g{rec("a", 0, {1, 2})};
  CHECK(throws_code(ErrorCode::DimensionMismatch, [&] { rank(rec("q", 0, {1}), g); }));
}

TEST_CASE("ranking matches the brute-force oracle on random instances") {
  auto rng = seeded_rng(51, "rank-oracle");
  for (int trial = 0; trial < 30; ++trial) {
    const int count = 3 + static_cast<int>(rng_below(rng, 18));
    auto gallery = random_gallery(rng, count, 4, 5);
    std::vector<float> qv(4);
    for (auto& x : qv) x = static_cast<float>(rng_uniform(rng, -1, 1));
    const auto q = rec("q", 0, qv);

    auto got = rank(q, gallery);
    std::vector<oracles::BruteItem> brute;
    for (const auto& g : gallery) brute.push_back({g.id, g.class_label, g.vec});
    auto expect = oracles::brute_rank({q.id, q.class_label, q.vec}, brute);
    CHECK(got == expect);
  }
}

TEST_CASE("recall hand cases") {
  // relevant at rank 1
  std::vector<size_t> order{0, 1, 2};
  std::vector<uint8_t> rel{1, 0, 0};
  CHECK(recall_at_k(order, rel, 1) == 1.0);

  // relevant at rank 2
  std::vector<uint8_t> rel2{0, 1, 0};
  CHECK(recall_at_k(order, rel2, 1) == 0.0);
  CHECK(recall_at_k(order, rel2, 5) == 1.0);
}

TEST_CASE("average precision hand cases") {
  std::vector<size_t> order{0, 1, 2, 3};
  std::vector<uint8_t> first{1, 0, 0, 0};
  CHECK(average_precision(order, first) == doctest::Approx(1.0).epsilon(1e-15));

  std::vector<uint8_t> second{0, 1, 0, 0};
  CHECK(average_precision(order, second) == doctest::Approx(0.5).epsilon(1e-15));

  std::vector<uint8_t> two{1, 0, 1, 0};
  CHECK(average_precision(order, two) == doctest::Approx(5.0 / 6.0).epsilon(1e-15));

  std::vector<uint8_t> none{0, 0, 0, 0};
  CHECK(throws_code(ErrorCode::NoRelevantItem, [&] { average_precision(order, none); }));
}

TEST_CASE("identity protocol scores perfectly") {
  auto rng = seeded_rng(52, "identity");
  auto items = random_gallery(rng, 8, 6, 8);
  for (int i = 0; i < 8; ++i) items[static_cast<size_t>(i)].class_label = i;  // unique labels
  const std::array<int, 3> ks{1, 5, 10};
  auto report = evaluate_protocol(items, items, ks);
  CHECK(report.recall_at.at(1) == 1.0);
  CHECK(report.ap == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("protocol shapes, including the benchmark-scale one, validate") {
  validate_protocol_shape(37854, 951);
  validate_protocol_shape(701, 51354);
  CHECK(throws_code(ErrorCode::EmptyGallery, [] { validate_protocol_shape(0, 10); }));
  CHECK(throws_code(ErrorCode::EmptyGallery, [] { validate_protocol_shape(10, 0); }));
}

TEST_CASE("protocol metrics equal the brute-force PR recomputation") {
  auto rng = seeded_rng(53, "protocol-oracle");
  for (int trial = 0; trial < 20; ++trial) {
    const int nq = 2 + static_cast<int>(rng_below(rng, 6));
    const int ng = 4 + static_cast<int>(rng_below(rng, 16));
    auto gallery = random_gallery(rng, ng, 3, 4);
    auto queries = random_gallery(rng, nq, 3, 4);
    // every query adopts some existing gallery label, so a match always exists
    for (auto& q : queries)
      q.class_label = gallery[rng_below(rng, gallery.size())].class_label;

    const std::array<int, 3> ks{1, 5, 10};
    auto report = evaluate_protocol(queries, gallery, ks);

    std::vector<oracles::BruteItem> bg;
    for (const auto& g : gallery) bg.push_back({g.id, g.class_label, g.vec});
    double ap = 0, r1 = 0, r5 = 0, r10 = 0;
    for (const auto& q : queries) {
      auto order = oracles::brute_rank({q.id, q.class_label, q.vec}, bg);
      std::vector<bool> rel(gallery.size());
      for (size_t g = 0; g < gallery.size(); ++g)
        rel[g] = gallery[g].class_label == q.class_label;
      ap += oracles::brute_average_precision(order, rel);
      r1 += oracles::brute_recall_at_k(order, rel, 1);
      r5 += oracles::brute_recall_at_k(order, rel, 5);
      r10 += oracles::brute_recall_at_k(order, rel, 10);
    }
    const double n = static_cast<double>(nq);
    CHECK(std::abs(report.ap - ap / n) <= 1e-12);
    CHECK(std::abs(report.recall_at.at(1) - r1 / n) <= 1e-12);
    CHECK(std::abs(report.recall_at.at(5) - r5 / n) <= 1e-12);
    CHECK(std::abs(report.recall_at.at(10) - r10 / n) <= 1e-12);
  }
}

TEST_CASE("property: metrics are invariant to translation, scaling, and storage order") {
  auto rng = seeded_rng(54, "invariance");
  auto gallery = random_gallery(rng, 12, 5, 3);
  auto queries = random_gallery(rng, 4, 5, 3);
  for (auto& q : queries)
    q.class_label = gallery[rng_below(rng, gallery.size())].class_label;
  const std::array<int, 2> ks{1, 5};
  const auto base = evaluate_protocol(queries, gallery, ks);

  // translate every descriptor by the same offset
  auto shift = [&](std::vector<DescriptorRecord> rs, float offset, float scale) {
    for (auto& r : rs)
      for (auto& v : r.vec) v = v * scale + offset;
    return rs;
  };
  auto r_shift = evaluate_protocol(shift(queries, 0.75f, 1.0f), shift(gallery, 0.75f, 1.0f), ks);
  CHECK(r_shift.ap == doctest::Approx(base.ap).epsilon(1e-12));
  CHECK(r_shift.recall_at.at(1) == doctest::Approx(base.recall_at.at(1)).epsilon(1e-12));

  // positive rescale
  auto r_scale = evaluate_protocol(shift(queries, 0.0f, 2.5f), shift(gallery, 0.0f, 2.5f), ks);
  CHECK(r_scale.ap == doctest::Approx(base.ap).epsilon(1e-12));

  // permuted gallery storage
  auto permuted = gallery;
  rng_shuffle(permuted, rng);
  auto r_perm = evaluate_protocol(queries, permuted, ks);
  CHECK(r_perm.ap == doctest::Approx(base.ap).epsilon(1e-12));
  CHECK(r_perm.recall_at.at(5) == doctest::Approx(base.recall_at.at(5)).epsilon(1e-12));

  // recall is monotone in k and saturates at 1 when a match exists
  double prev = 0.0;
  for (int k = 1; k <= static_cast<int>(gallery.size()); ++k) {
    const std::array<int, 1> kk{k};
    const double r = evaluate_protocol(queries, gallery, kk).recall_at.at(k);
    CHECK(r >= prev);
    prev = r;
  }
  CHECK(prev == 1.0);
}

TEST_CASE("descriptor files round-trip through the tensor format") {
  auto rng = seeded_rng(55, "descio");
  auto records = random_gallery(rng, 6, 7, 3);
  const auto prefix = std::filesystem::temp_directory_path() / "sdpl_desc_test";
  write_descriptors(prefix, records);
  auto back = read_descriptors(prefix);
  REQUIRE(back.size() == records.size());
  for (size_t i = 0; i < records.size(); ++i) {
    CHECK(back[i].id == records[i].id);
    CHECK(back[i].class_label == records[i].class_label);
    CHECK(back[i].vec == records[i].vec);
  }
}

}  // TEST_SUITE
