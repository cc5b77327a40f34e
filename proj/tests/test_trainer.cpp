#include <doctest.h>

#include "oracles.hpp"
#include "sdpl/trainer.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>

using namespace sdpl;
namespace fs = std::filesystem;

namespace {

bool throws_code(ErrorCode code, const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code() == code;
  }
  return false;
}

SdplConfig tiny_config(int classes) {
  SdplConfig c;
  c.image_size = 16;
  c.backbone.channels = {4, 8};
  c.backbone.strides = {2, 2};
  c.n_sps = 2;
  c.delta_h1 = 1;
  c.delta_h2 = -1;
  c.bottleneck = 16;
  c.weight_est_hidden = 8;
  c.num_classes = classes;
  return c;
}

Dataset tiny_dataset(int classes, int views) {
  SplitSpec spec;
  spec.train_classes = classes;
  spec.test_classes = 0;
  spec.drone_views = views;
  spec.image_size = 16;
  spec.seed = 400;
  return synthesize_split(spec, true);
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

std::vector<std::vector<float>> snapshot(SdplModel& model) {
  std::vector<std::vector<float>> out;
  for (auto* p : model.parameters()) out.push_back(*p->value);
  return out;
}

}  // namespace

TEST_SUITE("trainer") {

TEST_CASE("sgd_step hand examples") {
  // zero grad, zero velocity, no decay: a fixed point
  auto p = ParameterT<double>::create("p", Shape{1}, {5.0});
  std::vector<double> v{0.0};
  sgd_step(p, v, 0.1, 0.9, 0.0);
  CHECK((*p.value)[0] == 5.0);

  // single step without momentum: 5 - 0.1*1 = 4.9
  (*p.grad)[0] = 1.0;
  sgd_step(p, v, 0.1, 0.0, 0.0);
  CHECK((*p.value)[0] == doctest::Approx(4.9).epsilon(1e-12));

  // two momentum steps from zero against the hand-rolled recurrence
  auto q = ParameterT<double>::create("q", Shape{1}, {0.0});
  std::vector<double> qv{0.0};
  (*q.grad)[0] = 1.0;
  sgd_step(q, qv, 0.1, 0.9, 0.0);
  CHECK((*q.value)[0] == doctest::Approx(-0.1).epsilon(1e-12));
  sgd_step(q, qv, 0.1, 0.9, 0.0);
  CHECK((*q.value)[0] == doctest::Approx(-0.29).epsilon(1e-12));

  const auto trace = oracles::sgd_recurrence(0.0, {1.0, 1.0}, 0.1, 0.9, 0.0);
  CHECK((*q.value)[0] == doctest::Approx(trace.param).epsilon(1e-12));
}

TEST_CASE("weight decay folds into the velocity") {
  auto p = ParameterT<double>::create("p", Shape{1}, {2.0});
  std::vector<double> v{0.0};
  sgd_step(p, v, 0.1, 0.0, 0.5);  // grad 0, wd 0.5: v = 1.0, p = 2 - 0.1
  CHECK((*p.value)[0] == doctest::Approx(1.9).epsilon(1e-12));
}

TEST_CASE("learning-rate schedule matches the closed form up to 1000 epochs") {
  OptimConfig cfg;
  CHECK(lr_at(cfg, 0) == doctest::Approx(1e-3).epsilon(1e-12));
  CHECK(lr_at(cfg, 49) == doctest::Approx(1e-3).epsilon(1e-12));
  CHECK(lr_at(cfg, 50) == doctest::Approx(7.5e-4).epsilon(1e-12));
  for (i64 e = 0; e <= 1000; ++e) {
    const double expect = 1e-3 * std::pow(0.75, static_cast<double>(e / 50));
    CHECK(lr_at(cfg, e) == doctest::Approx(expect).epsilon(1e-12));
  }

  OptimConfig once = cfg;
  once.one_shot_decay = true;
  CHECK(lr_at(once, 49) == doctest::Approx(1e-3).epsilon(1e-12));
  CHECK(lr_at(once, 500) == doctest::Approx(7.5e-4).epsilon(1e-12));
}

TEST_CASE("zero epochs leaves the model at initialization") {
  auto cfg = tiny_config(2);
  SdplModel model(cfg, 20);
  const auto before = snapshot(model);
  OptimConfig opt;
  opt.epochs = 0;
  opt.batch = 2;
  Trainer trainer(model, opt, 1);
  trainer.run(tiny_dataset(2, 2), 0);
  const auto after = snapshot(model);
  CHECK(before == after);
}

TEST_CASE("weight decay skips batch-norm parameters") {
  auto cfg = tiny_config(2);
  SdplModel model(cfg, 21);

  // zero all gradients, positive weight decay: only decay-eligible move
  std::vector<std::vector<float>> velocity;
  auto params = model.parameters();
  for (auto* p : params) velocity.emplace_back(static_cast<size_t>(p->numel()), 0.0f);
  const auto before = snapshot(model);
  for (size_t i = 0; i < params.size(); ++i)
    sgd_step(*params[i], velocity[i], 0.1f, 0.0f, 0.5f);
  const auto after = snapshot(model);
  for (size_t i = 0; i < params.size(); ++i) {
    const bool moved = before[i] != after[i];
    const std::string& name = params[i]->name;
    const bool is_bn = name.find("bn_gamma") != std::string::npos ||
                       name.find("bn_beta") != std::string::npos;
    const bool is_bias = name.ends_with(".b") || name.ends_with("_b");
    if (is_bn || is_bias)
      CHECK_FALSE(moved);
    else
      CHECK(moved);
  }
}

TEST_CASE("training reduces the loss on a small synthetic set") {
  auto cfg = tiny_config(3);
  SdplModel model(cfg, 22);
  OptimConfig opt;
  opt.epochs = 8;
  opt.batch = 3;
  opt.lr0 = 5e-3;
  Trainer trainer(model, opt, 5);
  trainer.run(tiny_dataset(3, 4), opt.epochs);
  REQUIRE(trainer.log().size() == 8);
  CHECK(trainer.log().back().mean_loss < trainer.log().front().mean_loss);
}

TEST_CASE("same seed, same run: training is fully deterministic") {
  auto data = tiny_dataset(2, 2);
  auto run_once = [&] {
    auto cfg = tiny_config(2);
    SdplModel model(cfg, 23);
    OptimConfig opt;
    opt.epochs = 2;
    opt.batch = 2;
    Trainer trainer(model, opt, 9);
    trainer.run(data, 2);
    return snapshot(model);
  };
  CHECK(run_once() == run_once());
}

TEST_CASE("checkpoint round trip is byte-identical") {
  auto cfg = tiny_config(2);
  SdplModel model(cfg, 24);
  OptimConfig opt;
  opt.epochs = 1;
  opt.batch = 2;
  Trainer trainer(model, opt, 3);
  trainer.run(tiny_dataset(2, 2), 1);

  const auto p1 = fs::temp_directory_path() / "sdpl_ckpt_a.sdpc";
  const auto p2 = fs::temp_directory_path() / "sdpl_ckpt_b.sdpc";
  save_checkpoint(p1, model, &trainer);
  auto loaded = load_checkpoint(p1);
  auto resumed = resume_trainer(loaded);
  save_checkpoint(p2, *loaded.model, resumed.get());
  CHECK(slurp(p1) == slurp(p2));
}

TEST_CASE("corrupt and mismatched checkpoints are rejected") {
  auto cfg = tiny_config(2);
  SdplModel model(cfg, 25);
  OptimConfig opt;
  Trainer trainer(model, opt, 4);
  const auto path = fs::temp_directory_path() / "sdpl_ckpt_cut.sdpc";
  save_checkpoint(path, model, &trainer);

  const auto full = slurp(path);
  const auto cut_path = fs::temp_directory_path() / "sdpl_ckpt_cut2.sdpc";
  std::ofstream(cut_path, std::ios::binary) << full.substr(0, full.size() * 2 / 3);
  CHECK(throws_code(ErrorCode::CorruptCheckpoint, [&] { load_checkpoint(cut_path); }));

  auto bad = full;
  bad[5] = 9;  // version field
  const auto bad_path = fs::temp_directory_path() / "sdpl_ckpt_ver.sdpc";
  std::ofstream(bad_path, std::ios::binary) << bad;
  CHECK(throws_code(ErrorCode::VersionMismatch, [&] { load_checkpoint(bad_path); }));
}

TEST_CASE("train two epochs equals train one, checkpoint, resume one") {
  auto data = tiny_dataset(2, 3);

  auto cfg = tiny_config(2);
  SdplModel straight(cfg, 26);
  OptimConfig opt;
  opt.epochs = 2;
  opt.batch = 2;
  Trainer t_straight(straight, opt, 8);
  t_straight.run(data, 2);

  SdplModel split_model(cfg, 26);
  Trainer t_first(split_model, opt, 8);
  t_first.run(data, 1);
  const auto mid = fs::temp_directory_path() / "sdpl_resume.sdpc";
  save_checkpoint(mid, split_model, &t_first);

  auto loaded = load_checkpoint(mid);
  auto t_second = resume_trainer(loaded);
  CHECK(t_second->epoch() == 1);
  t_second->run(data, 2);

  auto a = snapshot(straight);
  auto b = snapshot(*loaded.model);
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);  // bit-exact

  // batch-norm buffers travel too
  auto ha = straight.heads();
  auto hb = loaded.model->heads();
  for (size_t i = 0; i < ha.size(); ++i) {
    CHECK(ha[i].bn->mean == hb[i].bn->mean);
    CHECK(ha[i].bn->var == hb[i].bn->var);
  }
}

TEST_CASE("flips disabled makes two same-seed runs identical, and the flag matters") {
  auto data = tiny_dataset(2, 2);
  auto run_with = [&](double flip_prob, uint64_t seed) {
    auto cfg = tiny_config(2);
    SdplModel model(cfg, 27);
    OptimConfig opt;
    opt.epochs = 1;
    opt.batch = 2;
    opt.flip_prob = flip_prob;
    Trainer trainer(model, opt, seed);
    trainer.run(data, 1);
    return snapshot(model);
  };
  CHECK(run_with(0.0, 2) == run_with(0.0, 2));
  CHECK(run_with(0.5, 2) == run_with(0.5, 2));
  CHECK(run_with(0.0, 2) != run_with(1.0, 2));
}

TEST_CASE("optimizer config validation") {
  OptimConfig bad;
  bad.lr0 = 0.0;
  CHECK(throws_code(ErrorCode::ConfigMismatch, [&] { bad.validate(); }));
  OptimConfig bad2;
  bad2.flip_prob = 1.5;
  CHECK(throws_code(ErrorCode::ConfigMismatch, [&] { bad2.validate(); }));

  nlohmann::json j = OptimConfig{}.to_json();
  j["mystery"] = 1;
  CHECK(throws_code(ErrorCode::SchemaMismatch, [&] { OptimConfig::from_json(j); }));
}

}  // TEST_SUITE
