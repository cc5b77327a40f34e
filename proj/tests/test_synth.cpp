#include <doctest.h>
#include <json.hpp>

#include "oracles.hpp"
#include "sdpl/image_io.hpp"
#include "sdpl/synth.hpp"

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

fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_SUITE("synth") {

TEST_CASE("rendering is deterministic per (scene, view)") {
  const auto scene = SceneSpec::generate(3, 42);
  auto a = render_view(scene, View::drone_k(2), 32);
  auto b = render_view(scene, View::drone_k(2), 32);
  CHECK(a.vec() == b.vec());

  auto c = render_view(scene, View::drone_k(3), 32);
  CHECK(a.vec() != c.vec());
}

TEST_CASE("distinct classes render distinct satellites") {
  const auto a = render_view(SceneSpec::generate(0, 7), View::sat(), 32);
  const auto b = render_view(SceneSpec::generate(1, 7), View::sat(), 32);
  CHECK(a.vec() != b.vec());
}

TEST_CASE("drone jitter stays within ten percent and matches the rendered centroid") {
  // scene with a single bright primitive at the canvas center on black
  SceneSpec scene;
  scene.class_id = 0;
  scene.seed = 99;
  Primitive bg;
  bg.cx = bg.cy = 0.5;
  bg.sx = bg.sy = 4.0;
  bg.color = {0.0f, 0.0f, 0.0f};
  Primitive dot;
  dot.kind = Primitive::circle;
  dot.cx = dot.cy = 0.5;
  dot.sx = dot.sy = 0.08;
  dot.color = {1.0f, 1.0f, 1.0f};
  scene.layout = {bg, dot};

  const int S = 64;
  for (int k = 0; k < 6; ++k) {
    const auto j = view_jitter(scene, View::drone_k(k));
    CHECK(std::abs(j.dx) <= 0.10);
    CHECK(std::abs(j.dy) <= 0.10);
    CHECK(j.scale >= 0.9);
    CHECK(j.scale <= 1.1);

    const auto img = render_view(scene, View::drone_k(k), S);
    auto d = img.data();
    double mass = 0, mx = 0, my = 0;
    for (int r = 0; r < S; ++r)
      for (int c = 0; c < S; ++c) {
        const double v = d[static_cast<size_t>(r * S + c)];
        mass += v;
        mx += v * (c + 0.5);
        my += v * (r + 0.5);
      }
    REQUIRE(mass > 0);
    const double cx = mx / mass / S, cy = my / mass / S;
    // a centered primitive lands at 0.5 + translation; scale does not move it
    CHECK(std::abs(cx - (0.5 + j.dx)) <= 0.02);
    CHECK(std::abs(cy - (0.5 + j.dy)) <= 0.02);
  }
}

TEST_CASE("ppm round trip is bit-exact") {
  const auto scene = SceneSpec::generate(5, 11);
  const auto img = render_view(scene, View::sat(), 24);
  const auto path = fs::temp_directory_path() / "sdpl_roundtrip.ppm";
  write_ppm(path, img);
  const auto back = read_image(path);
  CHECK(back.shape() == img.shape());
  CHECK(back.vec() == img.vec());
}

TEST_CASE("generate + load round trip") {
  const auto dir = fresh_dir("sdpl_synth_io");
  SplitSpec spec;
  spec.train_classes = 2;
  spec.test_classes = 1;
  spec.drone_views = 2;
  spec.image_size = 16;
  spec.seed = 5;
  generate_dataset(spec, dir);

  auto train = load_directory(dir / "train");
  CHECK(train.records.size() == 2 * (2 + 1));
  CHECK(train.class_ids() == std::vector<int>{0, 1});
  CHECK(train.image_size == 16);

  // loader content matches the in-memory synthesis bit for bit
  auto mem = synthesize_split(spec, true);
  REQUIRE(mem.records.size() == train.records.size());
  for (size_t i = 0; i < mem.records.size(); ++i) {
    CHECK(mem.records[i].id == train.records[i].id);
    CHECK(mem.records[i].class_id == train.records[i].class_id);
    CHECK(mem.records[i].image.vec() == train.records[i].image.vec());
  }

  // split manifest lists disjoint class sets
  std::ifstream sf(dir / "split.json");
  REQUIRE(sf.good());
  nlohmann::json split;
  sf >> split;
  const auto train_ids = split["train_classes"].get<std::vector<int>>();
  const auto test_ids = split["test_classes"].get<std::vector<int>>();
  for (int t : test_ids)
    CHECK(std::find(train_ids.begin(), train_ids.end(), t) == train_ids.end());
}

TEST_CASE("regeneration is byte-identical") {
  SplitSpec spec;
  spec.train_classes = 1;
  spec.test_classes = 1;
  spec.drone_views = 2;
  spec.image_size = 16;
  spec.seed = 12;
  const auto d1 = fresh_dir("sdpl_regen_a");
  const auto d2 = fresh_dir("sdpl_regen_b");
  generate_dataset(spec, d1);
  generate_dataset(spec, d2);
  for (const auto& entry : fs::recursive_directory_iterator(d1)) {
    if (!entry.is_regular_file()) continue;
    const auto rel = fs::relative(entry.path(), d1);
    std::ifstream a(entry.path(), std::ios::binary), b(d2 / rel, std::ios::binary);
    REQUIRE(b.good());
    std::string sa((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
    std::string sb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
    CHECK(sa == sb);
  }
}

TEST_CASE("loader fails fast on structural problems") {
  const auto dir = fresh_dir("sdpl_bad_io");
  CHECK(throws_code(ErrorCode::InconsistentViewStructure, [&] { load_directory(dir); }));

  fs::create_directories(dir / "0001" / "drone");
  CHECK(throws_code(ErrorCode::InconsistentViewStructure, [&] { load_directory(dir); }));

  fs::create_directories(dir / "0001" / "satellite");
  CHECK(throws_code(ErrorCode::InconsistentViewStructure, [&] { load_directory(dir); }));

  // malformed image payload
  std::ofstream(dir / "0001" / "drone" / "bad.ppm") << "P6\n4 4\n255\nxx";
  std::ofstream(dir / "0001" / "satellite" / "s.ppm") << "P6\n1 1\n255\n"
                                                      << std::string(3, '\0');
  CHECK(throws_code(ErrorCode::MalformedImage, [&] { load_directory(dir); }));
}

}  // TEST_SUITE
