#include "sdpl/gradcheck.hpp"

namespace sdpl {

namespace {

using gradcheck_detail::DTensor;
using gradcheck_detail::fd_check;
using gradcheck_detail::rand_vec;

// weighted scalar projection keeps the check sensitive to every output element
DTensor project(const DTensor& y, const std::vector<double>& w) {
  return sum(mul(y, DTensor::constant(y.shape(), w)));
}

RegionMask random_mask(std::mt19937_64& rng, int h, int w) {
  RegionMask m;
  m.height = h;
  m.width = w;
  m.cells.assign(static_cast<size_t>(h) * w, 0);
  for (auto& c : m.cells) c = rng_uniform(rng) < 0.6 ? 1 : 0;
  m.cell_count = 0;
  for (auto c : m.cells) m.cell_count += c;
  if (m.cell_count == 0) {
    m.cells[0] = 1;
    m.cell_count = 1;
  }
  return m;
}

struct Suite {
  int trials;
  std::mt19937_64 rng;
  std::vector<GradCheckReport> reports;

  void run(const std::string& name, const std::function<double(std::mt19937_64&)>& one) {
    GradCheckReport r;
    r.op = name;
    r.trials = trials;
    for (int t = 0; t < trials; ++t) r.max_rel_err = std::max(r.max_rel_err, one(rng));
    reports.push_back(std::move(r));
  }
};

}  // namespace

std::vector<GradCheckReport> run_gradient_suite(int trials, uint64_t seed) {
  Suite s{trials, seeded_rng(seed, "gradcheck"), {}};

  s.run("elementwise", [](std::mt19937_64& rng) {
    const i64 n = 2 + static_cast<i64>(rng_below(rng, 6));
    const Shape shape{n};
    auto w1 = rand_vec(rng, n, -1, 1);
    auto w2 = rand_vec(rng, n, -1, 1);
    const double p = rng_uniform(rng, 0.5, 3.5);
    auto fn = [&](const std::vector<DTensor>& in) {
      auto t = add(in[0], in[1]);
      t = mul(t, sub(in[0], mul(in[1], 0.5)));
      t = add(t, pow(in[2], p));
      t = add(t, exp(mul(in[0], 0.3)));
      t = add(t, log(in[2]));
      return project(t, w1) ;
    };
    (void)w2;
    return fd_check({shape, shape, shape},
                    {rand_vec(rng, n, -1, 1), rand_vec(rng, n, -1, 1),
                     rand_vec(rng, n, 0.4, 2.0)},
                    fn);
  });

  s.run("pow_learnable_exponent", [](std::mt19937_64& rng) {
    const i64 n = 2 + static_cast<i64>(rng_below(rng, 6));
    auto w = rand_vec(rng, n, -1, 1);
    auto fn = [&](const std::vector<DTensor>& in) { return project(pow(in[0], in[1]), w); };
    return fd_check({Shape{n}, Shape{1}},
                    {rand_vec(rng, n, 0.4, 2.0), {rng_uniform(rng, 0.7, 3.3)}}, fn);
  });

  s.run("linear", [](std::mt19937_64& rng) {
    const i64 N = 2 + static_cast<i64>(rng_below(rng, 2));
    const i64 K = 3 + static_cast<i64>(rng_below(rng, 2));
    const i64 M = 2 + static_cast<i64>(rng_below(rng, 3));
    auto w = rand_vec(rng, N * M, -1, 1);
    auto fn = [&](const std::vector<DTensor>& in) {
      return project(linear(in[0], in[1], in[2]), w);
    };
    return fd_check({Shape{N, K}, Shape{M, K}, Shape{M}},
                    {rand_vec(rng, N * K, -1, 1), rand_vec(rng, M * K, -1, 1),
                     rand_vec(rng, M, -1, 1)},
                    fn);
  });

  s.run("conv1x1", [](std::mt19937_64& rng) {
    const i64 N = 1 + static_cast<i64>(rng_below(rng, 2));
    const i64 Ci = 2 + static_cast<i64>(rng_below(rng, 2));
    const i64 Co = 2 + static_cast<i64>(rng_below(rng, 2));
    const i64 H = 2, W = 2;
    auto w = rand_vec(rng, N * Co * H * W, -1, 1);
    auto fn = [&](const std::vector<DTensor>& in) {
      return project(conv1x1(in[0], in[1]), w);
    };
    return fd_check({Shape{N, Ci, H, W}, Shape{Co, Ci}},
                    {rand_vec(rng, N * Ci * H * W, -1, 1), rand_vec(rng, Co * Ci, -1, 1)},
                    fn);
  });

  s.run("conv3x3", [](std::mt19937_64& rng) {
    const i64 Ci = 1 + static_cast<i64>(rng_below(rng, 2));
    const i64 Co = 1 + static_cast<i64>(rng_below(rng, 2));
    const i64 H = 4, W = 4;
    const i64 stride = 1 + static_cast<i64>(rng_below(rng, 2));
    const i64 Ho = (H + 2 - 3) / stride + 1, Wo = (W + 2 - 3) / stride + 1;
    auto w = rand_vec(rng, Co * Ho * Wo, -1, 1);
    auto fn = [&](const std::vector<DTensor>& in) {
      return project(conv3x3(in[0], in[1], in[2], stride), w);
    };
    return fd_check({Shape{1, Ci, H, W}, Shape{Co, Ci, 3, 3}, Shape{Co}},
                    {rand_vec(rng, Ci * H * W, -1, 1), rand_vec(rng, Co * Ci * 9, -1, 1),
                     rand_vec(rng, Co, -1, 1)},
                    fn);
  });

  s.run("softmax", [](std::mt19937_64& rng) {
    const i64 N = 1 + static_cast<i64>(rng_below(rng, 3));
    const i64 K = 2 + static_cast<i64>(rng_below(rng, 4));
    auto w = rand_vec(rng, N * K, -1, 1);
    auto fn = [&](const std::vector<DTensor>& in) { return project(softmax(in[0]), w); };
    return fd_check({Shape{N, K}}, {rand_vec(rng, N * K, -2, 2)}, fn);
  });

  s.run("gem_pool", [](std::mt19937_64& rng) {
    const i64 N = 1 + static_cast<i64>(rng_below(rng, 2));
    const i64 C = 2 + static_cast<i64>(rng_below(rng, 2));
    const i64 H = 3, W = 3;
    const auto mask = random_mask(rng, static_cast<int>(H), static_cast<int>(W));
    auto w = rand_vec(rng, N * C, -1, 1);
    auto fn = [&](const std::vector<DTensor>& in) {
      return project(gem_pool(in[0], mask, in[1], 1e-6), w);
    };
    return fd_check({Shape{N, C, H, W}, Shape{1}},
                    {rand_vec(rng, N * C * H * W, 0.1, 2.0), {rng_uniform(rng, 1.5, 4.0)}},
                    fn);
  });

  s.run("weight_estimation", [](std::mt19937_64& rng) {
    const int C = 6, hidden = 5;
    auto init_rng = seeded_rng(rng(), "westim");
    auto we = WeightEstimatorT<double>::init(C, hidden, init_rng);
    const i64 N = 1 + static_cast<i64>(rng_below(rng, 2));
    const i64 H = 2, W = 2;
    auto w = rand_vec(rng, N * 3, -1, 1);
    std::vector<Shape> shapes{Shape{N, C, H, W},       we.conv_w.shape, we.fc1_w.shape,
                              we.fc1_b.shape,          we.fc2_w.shape,  we.fc2_b.shape,
                              we.fc3_w.shape,          we.fc3_b.shape};
    // biases drawn nonzero: a dead relu layer over zero biases would put the
    // next pre-activation exactly on the kink, where central differences and
    // any subgradient choice legitimately disagree
    std::vector<std::vector<double>> values{rand_vec(rng, N * C * H * W, -1, 1),
                                            *we.conv_w.value,
                                            *we.fc1_w.value,
                                            rand_vec(rng, hidden, -0.3, 0.3),
                                            *we.fc2_w.value,
                                            rand_vec(rng, hidden, -0.3, 0.3),
                                            *we.fc3_w.value,
                                            rand_vec(rng, 3, -0.3, 0.3)};
    auto fn = [&](const std::vector<DTensor>& in) {
      auto t = relu(conv1x1(in[0], in[1]));
      auto v = global_avg_pool(t);
      v = relu(linear(v, in[2], in[3]));
      v = relu(linear(v, in[4], in[5]));
      v = linear(v, in[6], in[7]);
      return project(softmax(v), w);
    };
    return fd_check(shapes, values, fn);
  });

  s.run("fusion", [](std::mt19937_64& rng) {
    const i64 N = 2, C = 3, P = 2;
    auto w = rand_vec(rng, N * C, -1, 1);
    auto w2 = rand_vec(rng, N * C, -1, 1);
    auto fn = [&](const std::vector<DTensor>& in) {
      std::array<PartSetT<double>, 3> sets;
      for (int j = 0; j < 3; ++j)
        for (i64 p = 0; p < P; ++p) sets[static_cast<size_t>(j)].parts.push_back(in[static_cast<size_t>(j * P + p)]);
      auto beta = softmax(in[6]);
      auto z = fuse(sets, beta);
      return add(project(z.parts[0], w), project(z.parts[1], w2));
    };
    std::vector<Shape> shapes;
    std::vector<std::vector<double>> values;
    for (int i = 0; i < 6; ++i) {
      shapes.push_back(Shape{N, C});
      values.push_back(rand_vec(rng, N * C, -1, 1));
    }
    shapes.push_back(Shape{N, 3});
    values.push_back(rand_vec(rng, N * 3, -1, 1));
    return fd_check(shapes, values, fn);
  });

  s.run("classifier", [](std::mt19937_64& rng) {
    const i64 N = 3, Cin = 4, B = 5, K = 4;
    auto w = rand_vec(rng, N * K, -1, 1);
    auto fn = [&](const std::vector<DTensor>& in) {
      auto v = linear(in[0], in[1], in[2]);
      BnStateT<double> bn;
      bn.mean.assign(static_cast<size_t>(B), 0.0);
      bn.var.assign(static_cast<size_t>(B), 1.0);
      v = batch_norm(v, in[3], in[4], bn, /*training=*/true);
      return project(linear(v, in[5]), w);
    };
    return fd_check({Shape{N, Cin}, Shape{B, Cin}, Shape{B}, Shape{B}, Shape{B},
                     Shape{K, B}},
                    {rand_vec(rng, N * Cin, -1, 1), rand_vec(rng, B * Cin, -1, 1),
                     rand_vec(rng, B, -1, 1), rand_vec(rng, B, 0.5, 1.5),
                     rand_vec(rng, B, -0.5, 0.5), rand_vec(rng, K * B, -1, 1)},
                    fn);
  });

  s.run("cross_entropy", [](std::mt19937_64& rng) {
    const i64 N = 2 + static_cast<i64>(rng_below(rng, 2));
    const i64 C = 3 + static_cast<i64>(rng_below(rng, 3));
    std::vector<int> labels(static_cast<size_t>(N));
    for (auto& l : labels) l = static_cast<int>(rng_below(rng, static_cast<uint64_t>(C)));
    auto fn = [&](const std::vector<DTensor>& in) { return cross_entropy(in[0], labels); };
    return fd_check({Shape{N, C}}, {rand_vec(rng, N * C, -2, 2)}, fn);
  });

  s.run("gem_conv_composite", [](std::mt19937_64& rng) {
    const i64 N = 1, Ci = 3, Co = 2, H = 3, W = 3;
    const auto mask = random_mask(rng, static_cast<int>(H), static_cast<int>(W));
    auto w = rand_vec(rng, N * Co, -1, 1);
    auto fn = [&](const std::vector<DTensor>& in) {
      auto f = conv1x1(in[0], in[1]);
      return project(gem_pool(f, mask, DTensor::scalar(3.0), 1e-6), w);
    };
    return fd_check({Shape{N, Ci, H, W}, Shape{Co, Ci}},
                    {rand_vec(rng, N * Ci * H * W, 0.2, 1.5),
                     rand_vec(rng, Co * Ci, 0.1, 1.0)},
                    fn);
  });

  return s.reports;
}

}  // namespace sdpl
