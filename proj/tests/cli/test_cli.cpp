// End-to-end checks of the sdpl executable: exit codes, artifact layout,
// reproducibility under a fixed seed, and flag-over-config precedence.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

namespace fs = std::filesystem;

namespace {

const std::string kCli = SDPL_CLI_PATH;

int run(const std::string& args) {
  const std::string cmd = kCli + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

nlohmann::json load_json(const fs::path& p) {
  std::ifstream is(p);
  nlohmann::json j;
  is >> j;
  return j;
}

// tiny but complete workflow configuration shared by the pipeline tests
const char* kTinyModel = R"({
  "model": {
    "n_sps": 2, "delta_h1": 1, "delta_h2": -1,
    "backbone": {"kind": "conv", "channels": [4, 8], "strides": [2, 2]},
    "bottleneck": 16, "weight_est_hidden": 8
  },
  "optim": {"epochs": 2, "batch": 4, "lr0": 0.005}
})";

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("usage contract: no arguments exits 1, bad flags exit 1") {
  CHECK(run("") == 1);
  CHECK(run("masks --bogus-flag") == 1);
  CHECK(run("definitely-not-a-subcommand") == 1);
}

TEST_CASE("masks subcommand writes the dense partition with index") {
  const auto out = fresh_dir("sdpl_cli_masks");
  CHECK(run("masks --n-sps 4 --grid 32 --out " + out.string()) == 0);
  int pgm = 0;
  for (const auto& e : fs::directory_iterator(out))
    if (e.path().extension() == ".pgm") ++pgm;
  CHECK(pgm == 10);
  auto index = load_json(out / "index.json");
  CHECK(index["masks"].size() == 10);
  CHECK(index["masks"][0]["outer_size"] == 8);
  CHECK(index["masks"][0]["cell_count"] == 64);
  CHECK(fs::exists(out / "manifest.json"));
}

TEST_CASE("grad-check exits zero at default tolerance and nonzero at an absurd one") {
  CHECK(run("grad-check --trials 3 --seed 5") == 0);
  CHECK(run("grad-check --trials 3 --seed 5 --tol 1e-18") == 2);
}

TEST_CASE("full pipeline: synth-data, train, embed, eval, shift-eval, report") {
  const auto data = fresh_dir("sdpl_cli_data");
  const auto run_dir = fresh_dir("sdpl_cli_run");
  CHECK(run("synth-data --out " + data.string() +
            " --train-classes 3 --test-classes 2 --drone-views 2 --image-size 16 --seed 7") ==
        0);
  CHECK(fs::exists(data / "split.json"));
  CHECK(fs::exists(data / "train" / "0000" / "drone" / "d00.ppm"));

  const auto cfg_path = run_dir / "config.json";
  std::ofstream(cfg_path) << kTinyModel;
  CHECK(run("train --data " + (data / "train").string() + " --out " + run_dir.string() +
            " --config " + cfg_path.string() + " --seed 3") == 0);
  CHECK(fs::exists(run_dir / "checkpoint.sdpc"));
  CHECK(fs::exists(run_dir / "train_log.jsonl"));
  CHECK(fs::exists(run_dir / "manifest.json"));

  const auto ckpt = (run_dir / "checkpoint.sdpc").string();
  const auto qd = (run_dir / "q").string();
  const auto gd = (run_dir / "g").string();
  CHECK(run("embed --checkpoint " + ckpt + " --data " + (data / "test").string() +
            " --view drone --out " + qd) == 0);
  CHECK(run("embed --checkpoint " + ckpt + " --data " + (data / "test").string() +
            " --view satellite --out " + gd) == 0);
  CHECK(fs::exists(run_dir / "q.sdpt"));
  CHECK(fs::exists(run_dir / "q.json"));

  const auto eval_dir = run_dir / "eval";
  CHECK(run("eval --query " + qd + " --gallery " + gd + " --out " + eval_dir.string()) == 0);
  auto report = load_json(eval_dir / "report.json");
  CHECK(report.contains("ap"));
  CHECK(report["num_queries"] == 4);   // 2 test classes x 2 drone views
  CHECK(report["num_gallery"] == 2);

  const auto sweep_dir = run_dir / "sweep";
  CHECK(run("shift-eval --checkpoint " + ckpt + " --data " + (data / "test").string() +
            " --out " + sweep_dir.string() + " --pads 2,4") == 0);
  const auto sweep_csv = slurp(sweep_dir / "sweep.csv");
  // header + baseline + 2 magnitudes x 5 patterns
  CHECK(std::count(sweep_csv.begin(), sweep_csv.end(), '\n') == 12);

  const auto rep_dir = run_dir / "report";
  CHECK(run("report --baseline " + (eval_dir / "report.json").string() + " --run 2,0=" +
            (eval_dir / "report.json").string() + " --out " + rep_dir.string()) == 0);
  const auto merged = slurp(rep_dir / "report.csv");
  CHECK(std::count(merged.begin(), merged.end(), '\n') == 3);  // header + baseline + 1 run
}

TEST_CASE("reproducibility: same seed gives byte-identical numeric artifacts") {
  const auto d1 = fresh_dir("sdpl_cli_repro_a");
  const auto d2 = fresh_dir("sdpl_cli_repro_b");
  const std::string args =
      " --train-classes 2 --test-classes 1 --drone-views 2 --image-size 16 --seed 11";
  CHECK(run("synth-data --out " + d1.string() + args) == 0);
  CHECK(run("synth-data --out " + d2.string() + args) == 0);
  CHECK(slurp(d1 / "train" / "0000" / "satellite" / "s00.ppm") ==
        slurp(d2 / "train" / "0000" / "satellite" / "s00.ppm"));

  const auto r1 = fresh_dir("sdpl_cli_repro_run_a");
  const auto r2 = fresh_dir("sdpl_cli_repro_run_b");
  std::ofstream(r1 / "cfg.json") << kTinyModel;
  std::ofstream(r2 / "cfg.json") << kTinyModel;
  CHECK(run("train --data " + (d1 / "train").string() + " --out " + r1.string() +
            " --config " + (r1 / "cfg.json").string() + " --seed 13 --epochs 1") == 0);
  CHECK(run("train --data " + (d2 / "train").string() + " --out " + r2.string() +
            " --config " + (r2 / "cfg.json").string() + " --seed 13 --epochs 1") == 0);
  CHECK(slurp(r1 / "checkpoint.sdpc") == slurp(r2 / "checkpoint.sdpc"));
}

TEST_CASE("precedence: flags beat config, config beats environment") {
  const auto data = fresh_dir("sdpl_cli_prec_data");
  CHECK(run("synth-data --out " + data.string() +
            " --train-classes 2 --test-classes 1 --drone-views 2 --image-size 16 --seed 1") ==
        0);

  const auto out = fresh_dir("sdpl_cli_prec_run");
  std::ofstream(out / "cfg.json") << R"({
    "model": {"n_sps": 2, "delta_h1": 1, "delta_h2": -1,
              "backbone": {"kind": "conv", "channels": [4, 8], "strides": [2, 2]},
              "bottleneck": 16, "weight_est_hidden": 8},
    "optim": {"epochs": 5, "batch": 2, "seed": 21}
  })";

  // --epochs overrides the config value of 5; config seed 21 wins over env
  const std::string cmd = "SDPL_SEED=99 " + kCli + " train --data " +
                          (data / "train").string() + " --out " + out.string() +
                          " --config " + (out / "cfg.json").string() +
                          " --epochs 1 >/dev/null 2>&1";
  CHECK(WEXITSTATUS(std::system(cmd.c_str())) == 0);
  auto manifest = load_json(out / "manifest.json");
  CHECK(manifest["seed"] == 21);
  auto cfg = load_json(out / "config.json");
  CHECK(cfg["optim"]["epochs"] == 1);

  // with no config seed, the environment variable is the fallback
  const auto out2 = fresh_dir("sdpl_cli_prec_env");
  std::ofstream(out2 / "cfg.json") << kTinyModel;
  const std::string cmd2 = "SDPL_SEED=99 " + kCli + " train --data " +
                           (data / "train").string() + " --out " + out2.string() +
                           " --config " + (out2 / "cfg.json").string() +
                           " --epochs 1 >/dev/null 2>&1";
  CHECK(WEXITSTATUS(std::system(cmd2.c_str())) == 0);
  CHECK(load_json(out2 / "manifest.json")["seed"] == 99);
}

TEST_CASE("unknown config keys are rejected with a usage-class failure") {
  const auto data = fresh_dir("sdpl_cli_badcfg_data");
  CHECK(run("synth-data --out " + data.string() +
            " --train-classes 2 --test-classes 1 --drone-views 2 --image-size 16") == 0);
  const auto out = fresh_dir("sdpl_cli_badcfg");
  std::ofstream(out / "cfg.json") << R"({"model": {"n_spsss": 4}})";
  CHECK(run("train --data " + (data / "train").string() + " --out " + out.string() +
            " --config " + (out / "cfg.json").string()) == 2);
}

}  // TEST_SUITE
