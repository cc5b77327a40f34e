#include <doctest.h>

#include "oracles.hpp"
#include "sdpl/sdpl_ops.hpp"

using namespace sdpl;
using oracles::DTensor;

namespace {

bool throws_code(ErrorCode code, const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code() == code;
  }
  return false;
}

RegionMask full_mask(int h, int w) {
  RegionMask m;
  m.height = h;
  m.width = w;
  m.cells.assign(static_cast<size_t>(h) * w, 1);
  m.cell_count = static_cast<i64>(h) * w;
  return m;
}

PartSetT<double> const_set(int parts, i64 n, i64 c, double value) {
  PartSetT<double> s;
  for (int p = 0; p < parts; ++p) s.parts.push_back(DTensor::full(Shape{n, c}, value));
  return s;
}

}  // namespace

TEST_SUITE("sdpl_ops") {

TEST_CASE("gem of a constant map is that constant for any p") {
  for (double p : {1.0, 2.0, 3.0, 7.5}) {
    auto f = DTensor::full(Shape{2, 3, 4, 4}, 0.7);
    auto y = gem_pool(f, full_mask(4, 4), GemParamsT<double>{p, 1e-6});
    for (double v : y.data()) CHECK(v == doctest::Approx(0.7).epsilon(1e-9));
  }
}

TEST_CASE("gem with p=1 is the masked arithmetic mean") {
  auto rng = seeded_rng(31, "gem-mean");
  auto vals = oracles::random_values(rng, 2 * 2 * 3 * 3, 0.05, 2.0);
  auto f = DTensor::constant(Shape{2, 2, 3, 3}, vals);
  RegionMask m = full_mask(3, 3);
  m.cells[0] = 0;
  m.cells[4] = 0;
  m.cell_count = 7;
  auto y = gem_pool(f, m, GemParamsT<double>{1.0, 1e-6});
  auto mean = masked_mean(f, m);
  for (i64 i = 0; i < y.numel(); ++i)
    CHECK(y.data()[static_cast<size_t>(i)] ==
          doctest::Approx(mean.data()[static_cast<size_t>(i)]).epsilon(1e-6));
}

TEST_CASE("gem hand value: [1,2,3,4] with p=3 is cbrt(25)") {
  auto f = DTensor::constant(Shape{1, 1, 2, 2}, {1, 2, 3, 4});
  auto y = gem_pool(f, full_mask(2, 2), GemParamsT<double>{3.0, 1e-6});
  CHECK(y.data()[0] == doctest::Approx(2.9240177382128660) .epsilon(1e-12));
}

TEST_CASE("gem rejects empty masks and bad params") {
  RegionMask empty;
  empty.height = 2;
  empty.width = 2;
  empty.cells.assign(4, 0);
  empty.cell_count = 0;
  auto f = DTensor::full(Shape{1, 1, 2, 2}, 1.0);
  CHECK(throws_code(ErrorCode::EmptyMask,
                    [&] { gem_pool(f, empty, GemParamsT<double>{3.0, 1e-6}); }));
  CHECK(throws_code(ErrorCode::DomainError,
                    [&] { gem_pool(f, full_mask(2, 2), GemParamsT<double>{-1.0, 1e-6}); }));
  CHECK(throws_code(ErrorCode::ShapeMismatch,
                    [&] { gem_pool(f, full_mask(3, 3), GemParamsT<double>{3.0, 1e-6}); }));
}

TEST_CASE("gem gradient in feature and exponent") {
  auto rng = seeded_rng(32, "gem-fd");
  RegionMask m = full_mask(3, 3);
  m.cells[2] = 0;
  m.cells[7] = 0;
  m.cell_count = 7;
  oracles::FdProblem prob;
  prob.shapes = {Shape{1, 2, 3, 3}, Shape{1}};
  prob.values = {oracles::random_values(rng, 18, 0.1, 2.0), {2.6}};
  auto w = oracles::random_values(rng, 2, -1, 1);
  prob.objective = [&m, w](const std::vector<DTensor>& in) {
    auto y = gem_pool(in[0], m, in[1], 1e-6);
    return sum(mul(y, DTensor::constant(y.shape(), w)));
  };
  CHECK(oracles::fd_relative_error(prob) <= 1e-4);
}

TEST_CASE("property: gem is monotone in every masked cell") {
  auto rng = seeded_rng(33, "gem-mono");
  for (int trial = 0; trial < 10; ++trial) {
    auto vals = oracles::random_values(rng, 9, 0.05, 1.5);
    auto f0 = DTensor::constant(Shape{1, 1, 3, 3}, vals);
    const auto m = full_mask(3, 3);
    const double base =
        gem_pool(f0, m, GemParamsT<double>{3.0, 1e-6}).data()[0];
    const size_t cell = rng_below(rng, 9);
    auto bumped = vals;
    bumped[cell] += 0.25;
    auto f1 = DTensor::constant(Shape{1, 1, 3, 3}, bumped);
    const double up = gem_pool(f1, m, GemParamsT<double>{3.0, 1e-6}).data()[0];
    CHECK(up >= base);
  }
}

TEST_CASE("gem_pool_multi is bit-identical to per-mask gem_pool") {
  auto rng = seeded_rng(34, "gem-multi");
  const auto layout = RingLayout::centered(8, 8, 2);
  const auto parts = dps_partition(layout);
  auto vals = oracles::random_values(rng, 2 * 3 * 8 * 8, 0.05, 2.0);
  auto f = DTensor::constant(Shape{2, 3, 8, 8}, vals);
  auto p = DTensor::scalar(3.0);
  auto multi = gem_pool_multi(f, parts, p, 1e-6);
  for (size_t i = 0; i < parts.size(); ++i) {
    auto single = gem_pool(f, parts[i].mask, p, 1e-6);
    CHECK(single.vec() == multi[i].vec());
  }
}

TEST_CASE("weight estimation rows sum to one and trace Table-style shapes") {
  auto rng = seeded_rng(35, "westim");
  auto we = WeightEstimatorT<double>::init(8, 6, rng);
  PassContext<double> ctx{};
  auto f = DTensor::constant(Shape{2, 8, 4, 4},
                             oracles::random_values(rng, 2 * 8 * 16, -1, 1));
  auto beta = we.forward(ctx, f);
  REQUIRE(beta.shape() == Shape{2, 3});
  for (i64 n = 0; n < 2; ++n) {
    double s = 0;
    for (i64 j = 0; j < 3; ++j) {
      const double b = beta.data()[static_cast<size_t>(n * 3 + j)];
      CHECK(b >= 0.0);
      s += b;
    }
    CHECK(std::abs(s - 1.0) <= 1e-6);
  }
}

TEST_CASE("zero final layer yields uniform fusion weights") {
  auto rng = seeded_rng(36, "westim-zero");
  auto we = WeightEstimatorT<double>::init(4, 5, rng);
  std::fill(we.fc3_w.value->begin(), we.fc3_w.value->end(), 0.0);
  std::fill(we.fc3_b.value->begin(), we.fc3_b.value->end(), 0.0);
  PassContext<double> ctx{};
  auto f = DTensor::constant(Shape{1, 4, 2, 2}, oracles::random_values(rng, 16, -1, 1));
  auto beta = we.forward(ctx, f);
  for (double b : beta.data()) CHECK(b == doctest::Approx(1.0 / 3).epsilon(1e-12));
}

TEST_CASE("weight estimation full-size shape trace") {
  // the paper-scale configuration: 2048 channels on a 32x32 map
  auto rng = seeded_rng(37, "westim-big");
  auto we = WeightEstimatorT<float>::init(2048, 512, rng);
  PassContext<float> ctx{};
  auto f = TensorT<float>::full(Shape{1, 2048, 32, 32}, 0.1f);
  auto beta = we.forward(ctx, f);
  CHECK(beta.shape() == Shape{1, 3});
}

TEST_CASE("fusion selector, convexity fixed point, and hard baseline weights") {
  auto rng = seeded_rng(38, "fuse");
  std::array<PartSetT<double>, 3> sets;
  for (int j = 0; j < 3; ++j) {
    sets[static_cast<size_t>(j)].parts.clear();
    for (int p = 0; p < 2; ++p)
      sets[static_cast<size_t>(j)].parts.push_back(
          DTensor::constant(Shape{2, 3}, oracles::random_values(rng, 6, 0.1, 2.0)));
  }

  FusionWeights selector;
  selector.beta = {1.0, 0.0, 0.0};
  auto z = fuse(sets, selector);
  for (size_t p = 0; p < 2; ++p) CHECK(z.parts[p].vec() == sets[0].parts[p].vec());

  std::array<PartSetT<double>, 3> same{const_set(2, 2, 3, 0.4), const_set(2, 2, 3, 0.4),
                                       const_set(2, 2, 3, 0.4)};
  FusionWeights thirds;
  thirds.beta = {1.0 / 3, 1.0 / 3, 1.0 / 3};
  auto fixed = fuse(same, thirds);
  for (double v : fixed.parts[0].data()) CHECK(v == doctest::Approx(0.4).epsilon(1e-12));

  FusionWeights hard;
  hard.beta = {0.8, 0.1, 0.1};
  auto zb = fuse(sets, hard);
  for (size_t p = 0; p < 2; ++p)
    for (i64 i = 0; i < 6; ++i) {
      const double expect = 0.8 * sets[0].parts[p].data()[static_cast<size_t>(i)] +
                            0.1 * sets[1].parts[p].data()[static_cast<size_t>(i)] +
                            0.1 * sets[2].parts[p].data()[static_cast<size_t>(i)];
      CHECK(zb.parts[p].data()[static_cast<size_t>(i)] == doctest::Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("fusion is linear in the part sets and symmetric under joint permutation") {
  auto rng = seeded_rng(39, "fuse-props");
  std::array<PartSetT<double>, 3> sets;
  for (auto& s : sets)
    s.parts.push_back(DTensor::constant(Shape{2, 4}, oracles::random_values(rng, 8, -1, 1)));
  FusionWeights w;
  w.beta = {0.5, 0.3, 0.2};

  // linearity: fuse(a*S) == a*fuse(S)
  const double a = 1.75;
  std::array<PartSetT<double>, 3> scaled;
  for (int j = 0; j < 3; ++j)
    scaled[static_cast<size_t>(j)].parts.push_back(mul(sets[static_cast<size_t>(j)].parts[0], a));
  auto lhs = fuse(scaled, w).parts[0];
  auto rhs = mul(fuse(sets, w).parts[0], a);
  for (i64 i = 0; i < 8; ++i)
    CHECK(lhs.data()[static_cast<size_t>(i)] ==
          doctest::Approx(rhs.data()[static_cast<size_t>(i)]).epsilon(1e-12));

  // permuting (set, weight) pairs together leaves the output unchanged
  std::array<PartSetT<double>, 3> permuted{sets[2], sets[0], sets[1]};
  FusionWeights wp;
  wp.beta = {0.2, 0.5, 0.3};
  auto zp = fuse(permuted, wp).parts[0];
  auto z0 = fuse(sets, w).parts[0];
  for (i64 i = 0; i < 8; ++i)
    CHECK(zp.data()[static_cast<size_t>(i)] ==
          doctest::Approx(z0.data()[static_cast<size_t>(i)]).epsilon(1e-12));
}

TEST_CASE("fusion cardinality checks") {
  std::array<PartSetT<double>, 3> sets{const_set(2, 1, 3, 1.0), const_set(3, 1, 3, 1.0),
                                       const_set(2, 1, 3, 1.0)};
  FusionWeights w;
  CHECK(throws_code(ErrorCode::CardinalityMismatch, [&] { fuse(sets, w); }));
}

TEST_CASE("classifier head: eval determinism, dropout off in eval, width") {
  auto rng = seeded_rng(40, "head");
  auto head = ClassifierHeadT<double>::init("head.0", 6, 8, 701, rng);
  CHECK(head.cls_w.shape == Shape{701, 8});

  // batch norm must see one training step before eval
  PassContext<double> eval_ctx{};
  auto part = DTensor::constant(Shape{2, 6}, oracles::random_values(rng, 12, -1, 1));
  CHECK(throws_code(ErrorCode::BatchNormUninitialized,
                    [&] { head.embed(eval_ctx, part); }));

  auto train_rng = seeded_rng(41, "head-train");
  PassContext<double> train_ctx{nullptr, true, &train_rng};
  head.logits(train_ctx, part);  // initializes running stats

  auto l1 = head.logits(eval_ctx, part);
  auto l2 = head.logits(eval_ctx, part);
  CHECK(l1.vec() == l2.vec());  // dropout is identity in eval

  // identical rows in, identical logits out
  auto same = DTensor::constant(Shape{2, 6}, {1, 2, 3, 4, 5, 6, 1, 2, 3, 4, 5, 6});
  auto l3 = head.logits(eval_ctx, same);
  for (i64 c = 0; c < 701; ++c)
    CHECK(l3.data()[static_cast<size_t>(c)] == l3.data()[static_cast<size_t>(701 + c)]);
}

TEST_CASE("cross entropy hand values") {
  auto uniform = DTensor::zeros(Shape{3, 10});
  std::vector<int> labels{1, 5, 9};
  auto loss = cross_entropy(uniform, labels);
  CHECK(loss.item() == doctest::Approx(std::log(10.0)).epsilon(1e-12));

  std::vector<double> confident(2 * 4, 0.0);
  confident[0 * 4 + 2] = 50.0;
  confident[1 * 4 + 0] = 50.0;
  auto sharp = DTensor::constant(Shape{2, 4}, confident);
  std::vector<int> right{2, 0};
  CHECK(cross_entropy(sharp, right).item() <= 1e-12);

  std::vector<int> bad{2, 4};
  CHECK(throws_code(ErrorCode::LabelOutOfRange, [&] { cross_entropy(sharp, bad); }));
}

TEST_CASE("cross entropy gradient check on random 2x5 logits") {
  auto rng = seeded_rng(42, "ce-fd");
  std::vector<int> labels{3, 1};
  oracles::FdProblem prob;
  prob.shapes = {Shape{2, 5}};
  prob.values = {oracles::random_values(rng, 10, -2, 2)};
  prob.objective = [labels](const std::vector<DTensor>& in) {
    return cross_entropy(in[0], labels);
  };
  CHECK(oracles::fd_relative_error(prob) <= 1e-5);
}

TEST_CASE("summed per-part loss is invariant to part order") {
  auto rng = seeded_rng(43, "loss-perm");
  std::vector<DTensor> logits;
  for (int p = 0; p < 4; ++p)
    logits.push_back(DTensor::constant(Shape{2, 5}, oracles::random_values(rng, 10, -2, 2)));
  std::vector<int> labels{0, 3};
  auto total = [&](const std::vector<size_t>& order) {
    double s = 0;
    for (size_t i : order) s += cross_entropy(logits[i], labels).item();
    return s;
  };
  const double forward_order = total({0, 1, 2, 3});
  const double shuffled = total({2, 0, 3, 1});
  CHECK(forward_order == doctest::Approx(shuffled).epsilon(1e-12));
}

}  // TEST_SUITE
