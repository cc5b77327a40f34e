#include "sdpl/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "sdpl/image_io.hpp"
#include "sdpl/util.hpp"

namespace sdpl {

namespace {

std::array<float, 3> random_color(std::mt19937_64& rng, double lo, double hi) {
  return {static_cast<float>(rng_uniform(rng, lo, hi)),
          static_cast<float>(rng_uniform(rng, lo, hi)),
          static_cast<float>(rng_uniform(rng, lo, hi))};
}

std::string class_dir_name(int class_id) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%04d", class_id);
  return buf;
}

bool hit(const Primitive& p, double x, double y) {
  const double dx = x - p.cx, dy = y - p.cy;
  if (p.kind == Primitive::rect) return std::abs(dx) <= p.sx && std::abs(dy) <= p.sy;
  const double nx = dx / p.sx, ny = dy / p.sy;
  return nx * nx + ny * ny <= 1.0;
}

}  // namespace

SceneSpec SceneSpec::generate(int class_id, uint64_t seed) {
  SceneSpec scene;
  scene.class_id = class_id;
  scene.seed = seed;
  auto rng = seeded_rng(seed, "scene." + std::to_string(class_id));

  Primitive bg;
  bg.kind = Primitive::rect;
  bg.cx = bg.cy = 0.5;
  bg.sx = bg.sy = 4.0;  // covers any jittered field of view
  bg.color = random_color(rng, 0.08, 0.30);
  scene.layout.push_back(bg);

  const int n_context = 6 + static_cast<int>(rng_below(rng, 4));
  for (int i = 0; i < n_context; ++i) {
    Primitive p;
    p.kind = rng_uniform(rng) < 0.5 ? Primitive::rect : Primitive::circle;
    p.cx = rng_uniform(rng, 0.06, 0.94);
    p.cy = rng_uniform(rng, 0.06, 0.94);
    p.sx = rng_uniform(rng, 0.05, 0.16);
    p.sy = rng_uniform(rng, 0.05, 0.16);
    p.color = random_color(rng, 0.2, 1.0);
    scene.layout.push_back(p);
  }

  // central target: two stacked shapes, always near the canvas center
  for (int i = 0; i < 2; ++i) {
    Primitive p;
    p.kind = i == 0 ? Primitive::rect : Primitive::circle;
    p.cx = rng_uniform(rng, 0.46, 0.54);
    p.cy = rng_uniform(rng, 0.46, 0.54);
    p.sx = rng_uniform(rng, 0.09, 0.16);
    p.sy = rng_uniform(rng, 0.09, 0.16);
    p.color = random_color(rng, 0.4, 1.0);
    scene.layout.push_back(p);
  }
  return scene;
}

ViewJitter view_jitter(const SceneSpec& scene, View view) {
  ViewJitter j;
  if (view.kind == View::satellite) return j;
  auto rng = seeded_rng(scene.seed,
                        "drone." + std::to_string(scene.class_id) + "." + std::to_string(view.k));
  j.dx = rng_uniform(rng, -0.10, 0.10);
  j.dy = rng_uniform(rng, -0.10, 0.10);
  j.scale = rng_uniform(rng, 0.9, 1.1);
  for (auto& g : j.color_gain) g = static_cast<float>(rng_uniform(rng, 0.9, 1.1));
  return j;
}

TensorT<float> render_view(const SceneSpec& scene, View view, int image_size) {
  const ViewJitter j = view_jitter(scene, view);
  const i64 S = image_size;
  std::vector<float> out(static_cast<size_t>(3 * S * S));
  const i64 pixels = S * S;
  for (i64 r = 0; r < S; ++r) {
    for (i64 c = 0; c < S; ++c) {
      // image point -> scene point (inverse of scale-about-center + shift)
      const double px = (c + 0.5) / static_cast<double>(S);
      const double py = (r + 0.5) / static_cast<double>(S);
      const double qx = (px - 0.5 - j.dx) / j.scale + 0.5;
      const double qy = (py - 0.5 - j.dy) / j.scale + 0.5;
      const Primitive* top = nullptr;
      for (auto it = scene.layout.rbegin(); it != scene.layout.rend(); ++it)
        if (hit(*it, qx, qy)) {
          top = &*it;
          break;
        }
      for (int ch = 0; ch < 3; ++ch) {
        float v = top ? top->color[static_cast<size_t>(ch)] * j.color_gain[static_cast<size_t>(ch)] : 0.0f;
        v = std::min(1.0f, std::max(0.0f, v));
        // 8-bit quantization keeps renders identical across a PPM round trip
        out[static_cast<size_t>(ch * pixels + r * S + c)] =
            static_cast<float>(std::lround(v * 255.0f)) / 255.0f;
      }
    }
  }
  return TensorT<float>::constant(Shape{3, S, S}, std::move(out));
}

std::vector<int> Dataset::class_ids() const {
  std::vector<int> ids;
  for (const auto& r : records)
    if (std::find(ids.begin(), ids.end(), r.class_id) == ids.end()) ids.push_back(r.class_id);
  return ids;
}

std::vector<size_t> Dataset::satellite_indices() const {
  std::vector<size_t> v;
  for (size_t i = 0; i < records.size(); ++i)
    if (records[i].view.kind == View::satellite) v.push_back(i);
  return v;
}

std::vector<size_t> Dataset::drone_indices() const {
  std::vector<size_t> v;
  for (size_t i = 0; i < records.size(); ++i)
    if (records[i].view.kind == View::drone) v.push_back(i);
  return v;
}

Dataset synthesize_split(const SplitSpec& spec, bool train_split) {
  Dataset ds;
  ds.image_size = spec.image_size;
  const int first = train_split ? 0 : spec.train_classes;
  const int count = train_split ? spec.train_classes : spec.test_classes;
  for (int c = first; c < first + count; ++c) {
    const auto scene = SceneSpec::generate(c, spec.seed);
    const std::string cls = class_dir_name(c);
    for (int k = 0; k < spec.drone_views; ++k) {
      char name[16];
      std::snprintf(name, sizeof(name), "d%02d", k);
      ds.records.push_back(DatasetRecord{c, View::drone_k(k), cls + "/drone/" + name,
                                         render_view(scene, View::drone_k(k), spec.image_size)});
    }
    ds.records.push_back(DatasetRecord{c, View::sat(), cls + "/satellite/s00",
                                       render_view(scene, View::sat(), spec.image_size)});
  }
  return ds;
}

void generate_dataset(const SplitSpec& spec, const std::filesystem::path& out_root) {
  if (spec.train_classes < 1 || spec.test_classes < 0 || spec.drone_views < 1)
    fail(ErrorCode::ConfigMismatch, "split spec must have positive sizes");
  namespace fs = std::filesystem;
  for (const bool train_split : {true, false}) {
    const int first = train_split ? 0 : spec.train_classes;
    const int count = train_split ? spec.train_classes : spec.test_classes;
    const fs::path split_dir = out_root / (train_split ? "train" : "test");
    for (int c = first; c < first + count; ++c) {
      const auto scene = SceneSpec::generate(c, spec.seed);
      const fs::path cdir = split_dir / class_dir_name(c);
      fs::create_directories(cdir / "drone");
      fs::create_directories(cdir / "satellite");
      for (int k = 0; k < spec.drone_views; ++k) {
        char name[16];
        std::snprintf(name, sizeof(name), "d%02d.ppm", k);
        write_ppm(cdir / "drone" / name, render_view(scene, View::drone_k(k), spec.image_size));
      }
      write_ppm(cdir / "satellite" / "s00.ppm", render_view(scene, View::sat(), spec.image_size));
    }
  }

  nlohmann::json split;
  std::vector<int> train_ids, test_ids;
  for (int c = 0; c < spec.train_classes; ++c) train_ids.push_back(c);
  for (int c = spec.train_classes; c < spec.train_classes + spec.test_classes; ++c)
    test_ids.push_back(c);
  split["train_classes"] = train_ids;
  split["test_classes"] = test_ids;
  split["drone_views"] = spec.drone_views;
  split["image_size"] = spec.image_size;
  split["seed"] = spec.seed;
  std::ofstream os(out_root / "split.json");
  if (!os) fail(ErrorCode::IoError, "cannot write split.json");
  os << split.dump(2) << "\n";
}

Dataset load_directory(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) fail(ErrorCode::IoError, root.string() + " is not a directory");

  std::vector<fs::path> class_dirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) class_dirs.push_back(e.path());
  if (class_dirs.empty())
    fail(ErrorCode::InconsistentViewStructure, "no class directories under " + root.string());
  std::sort(class_dirs.begin(), class_dirs.end());

  Dataset ds;
  for (const auto& cdir : class_dirs) {
    int class_id = 0;
    try {
      class_id = std::stoi(cdir.filename().string());
    } catch (const std::exception&) {
      fail(ErrorCode::InconsistentViewStructure,
           "class directory \"" + cdir.filename().string() + "\" is not numeric");
    }
    for (const char* view_name : {"drone", "satellite"}) {
      const fs::path vdir = cdir / view_name;
      if (!fs::is_directory(vdir))
        fail(ErrorCode::InconsistentViewStructure,
             cdir.filename().string() + " is missing a " + view_name + " directory");
      std::vector<fs::path> files;
      for (const auto& e : fs::directory_iterator(vdir))
        if (e.is_regular_file()) files.push_back(e.path());
      if (files.empty())
        fail(ErrorCode::InconsistentViewStructure,
             vdir.string() + " contains no images");
      std::sort(files.begin(), files.end());
      const bool is_drone = std::string(view_name) == "drone";
      int k = 0;
      for (const auto& f : files) {
        DatasetRecord rec;
        rec.class_id = class_id;
        rec.view = is_drone ? View::drone_k(k++) : View::sat();
        rec.id = cdir.filename().string() + "/" + view_name + "/" + f.stem().string();
        rec.image = read_image(f);
        const int s = static_cast<int>(rec.image.shape()[1]);
        if (rec.image.shape()[1] != rec.image.shape()[2])
          fail(ErrorCode::InconsistentViewStructure, "non-square image " + f.string());
        if (ds.image_size == 0) ds.image_size = s;
        if (s != ds.image_size)
          fail(ErrorCode::InconsistentViewStructure, "mixed image sizes under " + root.string());
        ds.records.push_back(std::move(rec));
      }
    }
  }
  return ds;
}

}  // namespace sdpl
