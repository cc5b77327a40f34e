// sdpl command-line tool: data synthesis, training, embedding, retrieval
// evaluation, offset sweeps, mask export, gradient self-check and report
// merging. Every artifact-producing command writes a manifest.json recording
// the command, seed and a content hash of the effective configuration.
//
// Exit codes: 0 success, 1 usage error, 2 runtime failure.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "sdpl/gradcheck.hpp"
#include "sdpl/image_io.hpp"
#include "sdpl/model.hpp"
#include "sdpl/offset.hpp"
#include "sdpl/retrieval.hpp"
#include "sdpl/synth.hpp"
#include "sdpl/trainer.hpp"
#include "sdpl/util.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct ManifestInfo {
  std::string command;
  std::string config_path;
  uint64_t seed = 0;
  json effective_config;
  fs::path out_dir;
  std::string started_at;
};

void write_manifest(const ManifestInfo& info, const fs::path& file) {
  json m;
  m["command"] = info.command;
  m["config_path"] = info.config_path;
  m["seed"] = info.seed;
  m["config_hash"] = sdpl::git_blob_sha1(info.effective_config.dump());
  m["out_dir"] = info.out_dir.string();
  m["started_at"] = info.started_at;
  m["finished_at"] = sdpl::iso8601_now();
  std::ofstream os(file);
  if (!os) sdpl::fail(sdpl::ErrorCode::IoError, "cannot write " + file.string());
  os << m.dump(2) << "\n";
}

// Seed precedence: --seed flag > config file > SDPL_SEED env > 0.
uint64_t resolve_seed(const CLI::Option* seed_opt, uint64_t flag_value,
                      const std::optional<uint64_t>& config_value) {
  if (seed_opt && seed_opt->count() > 0) return flag_value;
  if (config_value) return *config_value;
  if (const char* env = std::getenv("SDPL_SEED")) {
    try {
      return std::stoull(env);
    } catch (const std::exception&) {
      sdpl::fail(sdpl::ErrorCode::UsageError, "SDPL_SEED is not an integer");
    }
  }
  return 0;
}

json load_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) sdpl::fail(sdpl::ErrorCode::IoError, "cannot open config " + path);
  try {
    json j;
    is >> j;
    return j;
  } catch (const json::exception& e) {
    sdpl::fail(sdpl::ErrorCode::SchemaMismatch, std::string("config parse: ") + e.what());
  }
}

std::vector<int> parse_int_list(const std::string& csv, const char* what) {
  std::vector<int> out;
  std::stringstream ss(csv);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      out.push_back(std::stoi(tok));
    } catch (const std::exception&) {
      sdpl::fail(sdpl::ErrorCode::UsageError, std::string("bad ") + what + " entry: " + tok);
    }
  }
  if (out.empty()) sdpl::fail(sdpl::ErrorCode::UsageError, std::string(what) + " list is empty");
  return out;
}

sdpl::Dataset view_subset(const sdpl::Dataset& data, sdpl::View::Kind kind) {
  sdpl::Dataset out;
  out.image_size = data.image_size;
  for (const auto& r : data.records)
    if (r.view.kind == kind) out.records.push_back(r);
  return out;
}

std::vector<sdpl::DescriptorRecord> embed_records(const sdpl::SdplModel& model,
                                                  const sdpl::Dataset& data, int scale) {
  std::vector<sdpl::TensorT<float>> imgs;
  imgs.reserve(data.records.size());
  for (const auto& r : data.records) imgs.push_back(r.image);
  auto batch = sdpl::stack_images<float>(imgs);
  auto desc = scale > 0 ? model.embed_scale_subset(batch, scale) : model.forward_embed(batch);
  auto d = desc.data();
  const sdpl::i64 dim = desc.shape()[1];
  std::vector<sdpl::DescriptorRecord> recs(data.records.size());
  for (size_t i = 0; i < recs.size(); ++i) {
    recs[i].id = data.records[i].id;
    recs[i].class_label = data.records[i].class_id;
    recs[i].vec.assign(d.begin() + static_cast<sdpl::i64>(i) * dim,
                       d.begin() + static_cast<sdpl::i64>(i + 1) * dim);
  }
  return recs;
}

// ---------------------------------------------------------------------------
// subcommands
// ---------------------------------------------------------------------------

int cmd_synth_data(const std::string& out_dir, sdpl::SplitSpec spec) {
  ManifestInfo info;
  info.command = "synth-data";
  info.seed = spec.seed;
  info.started_at = sdpl::iso8601_now();
  info.out_dir = out_dir;
  json cfg;
  cfg["train_classes"] = spec.train_classes;
  cfg["test_classes"] = spec.test_classes;
  cfg["drone_views"] = spec.drone_views;
  cfg["image_size"] = spec.image_size;
  cfg["seed"] = spec.seed;
  info.effective_config = cfg;

  sdpl::generate_dataset(spec, out_dir);
  write_manifest(info, fs::path(out_dir) / "manifest.json");
  std::cout << "wrote dataset to " << out_dir << "\n";
  return 0;
}

struct TrainArgs {
  std::string data_dir, out_dir, config_path, resume_path;
  json model_overrides;  // flag values layered over the config file
  json optim_overrides;
  uint64_t seed = 0;
  bool seed_given = false;
};

int cmd_train(const TrainArgs& args) {
  ManifestInfo info;
  info.command = "train";
  info.config_path = args.config_path;
  info.started_at = sdpl::iso8601_now();
  info.out_dir = args.out_dir;
  fs::create_directories(args.out_dir);

  auto train_data = sdpl::load_directory(args.data_dir);

  std::unique_ptr<sdpl::SdplModel> model;
  std::unique_ptr<sdpl::Trainer> trainer;
  json model_json, optim_json;
  uint64_t seed = 0;

  if (!args.resume_path.empty()) {
    auto ckpt = sdpl::load_checkpoint(args.resume_path);
    if (!ckpt.has_trainer_state)
      sdpl::fail(sdpl::ErrorCode::CorruptCheckpoint, "checkpoint has no trainer state");
    model_json = ckpt.model_config.to_json();
    optim_json = ckpt.optim_config.to_json();
    // flags may extend the run (e.g. more epochs) but not change the model
    for (auto& [k, v] : args.optim_overrides.items()) optim_json[k] = v;
    ckpt.optim_config = sdpl::OptimConfig::from_json(optim_json);
    seed = ckpt.optim_config.seed;
    model = std::move(ckpt.model);
    trainer = std::make_unique<sdpl::Trainer>(*model, ckpt.optim_config, seed);
    trainer->restore_state(ckpt.velocity, ckpt.epoch, ckpt.rng_state);
  } else {
    json file_cfg = args.config_path.empty() ? json::object() : load_json_file(args.config_path);
    model_json = file_cfg.contains("model") ? file_cfg["model"] : json::object();
    optim_json = file_cfg.contains("optim") ? file_cfg["optim"] : json::object();
    if (!file_cfg.empty() && !file_cfg.contains("model") && !file_cfg.contains("optim"))
      sdpl::fail(sdpl::ErrorCode::SchemaMismatch,
                 "train config must have top-level \"model\" / \"optim\" objects");
    for (auto& [k, v] : args.model_overrides.items()) model_json[k] = v;
    for (auto& [k, v] : args.optim_overrides.items()) optim_json[k] = v;
    if (!model_json.contains("num_classes")) {
      std::vector<int> ids;
      for (const auto& r : train_data.records)
        if (std::find(ids.begin(), ids.end(), r.class_id) == ids.end())
          ids.push_back(r.class_id);
      model_json["num_classes"] = ids.size();
    }
    if (!model_json.contains("image_size")) model_json["image_size"] = train_data.image_size;

    std::optional<uint64_t> cfg_seed;
    if (optim_json.contains("seed")) cfg_seed = optim_json["seed"].get<uint64_t>();
    seed = args.seed_given ? args.seed
                           : resolve_seed(nullptr, 0, cfg_seed);
    optim_json["seed"] = seed;

    auto model_cfg = sdpl::SdplConfig::from_json(model_json);
    auto optim_cfg = sdpl::OptimConfig::from_json(optim_json);
    model = std::make_unique<sdpl::SdplModel>(model_cfg, seed);
    trainer = std::make_unique<sdpl::Trainer>(*model, optim_cfg, seed);
  }

  info.seed = seed;
  json effective;
  effective["model"] = model->config().to_json();
  effective["optim"] = trainer->config().to_json();
  info.effective_config = effective;

  std::ofstream log_stream(fs::path(args.out_dir) / "train_log.jsonl",
                           args.resume_path.empty() ? std::ios::trunc : std::ios::app);
  const fs::path out_dir_path(args.out_dir);
  trainer->run(train_data, trainer->config().epochs, &log_stream, &out_dir_path);
  sdpl::save_checkpoint(out_dir_path / "checkpoint.sdpc", *model, trainer.get());

  std::ofstream cfg_out(out_dir_path / "config.json");
  cfg_out << effective.dump(2) << "\n";
  write_manifest(info, out_dir_path / "manifest.json");
  std::cout << "trained " << trainer->epoch() << " epochs; final mean loss "
            << (trainer->log().empty() ? 0.0 : trainer->log().back().mean_loss) << "\n";
  return 0;
}

int cmd_embed(const std::string& ckpt_path, const std::string& data_dir,
              const std::string& view, const std::string& out_prefix, int scale) {
  ManifestInfo info;
  info.command = "embed";
  info.started_at = sdpl::iso8601_now();
  info.out_dir = fs::path(out_prefix).parent_path();

  auto ckpt = sdpl::load_checkpoint(ckpt_path);
  auto data = sdpl::load_directory(data_dir);
  sdpl::Dataset subset;
  if (view == "drone")
    subset = view_subset(data, sdpl::View::drone);
  else if (view == "satellite")
    subset = view_subset(data, sdpl::View::satellite);
  else if (view == "both")
    subset = data;
  else
    sdpl::fail(sdpl::ErrorCode::UsageError, "--view must be drone, satellite or both");
  if (subset.records.empty())
    sdpl::fail(sdpl::ErrorCode::InconsistentViewStructure, "no records for view " + view);

  auto recs = embed_records(*ckpt.model, subset, scale);
  if (!info.out_dir.empty()) fs::create_directories(info.out_dir);
  sdpl::write_descriptors(out_prefix, recs);

  json cfg;
  cfg["checkpoint"] = ckpt_path;
  cfg["data"] = data_dir;
  cfg["view"] = view;
  cfg["scale"] = scale;
  cfg["model"] = ckpt.model->config().to_json();
  info.effective_config = cfg;
  info.seed = ckpt.optim_config.seed;
  write_manifest(info, out_prefix + ".manifest.json");
  std::cout << "embedded " << recs.size() << " images, dim " << recs[0].vec.size() << "\n";
  return 0;
}

int cmd_eval(const std::string& query_prefix, const std::string& gallery_prefix,
             const std::string& out_dir, const std::string& ks_csv) {
  ManifestInfo info;
  info.command = "eval";
  info.started_at = sdpl::iso8601_now();
  info.out_dir = out_dir;
  fs::create_directories(out_dir);

  const auto ks = parse_int_list(ks_csv, "ks");
  auto queries = sdpl::read_descriptors(query_prefix);
  auto gallery = sdpl::read_descriptors(gallery_prefix);
  auto report = sdpl::evaluate_protocol(queries, gallery, ks);

  std::ofstream(fs::path(out_dir) / "report.json") << sdpl::report_to_json(report);
  std::ofstream(fs::path(out_dir) / "report.csv") << sdpl::report_to_csv(report);

  json cfg;
  cfg["query"] = query_prefix;
  cfg["gallery"] = gallery_prefix;
  cfg["ks"] = ks;
  info.effective_config = cfg;
  write_manifest(info, fs::path(out_dir) / "manifest.json");
  std::cout << sdpl::report_to_csv(report);
  return 0;
}

int cmd_shift_eval(const std::string& ckpt_path, const std::string& data_dir,
                   const std::string& out_dir, const std::string& pads_csv,
                   uint64_t /*seed*/) {
  ManifestInfo info;
  info.command = "shift-eval";
  info.started_at = sdpl::iso8601_now();
  info.out_dir = out_dir;
  fs::create_directories(out_dir);

  auto ckpt = sdpl::load_checkpoint(ckpt_path);
  auto data = sdpl::load_directory(data_dir);
  auto queries = view_subset(data, sdpl::View::drone);
  auto gallery_imgs = view_subset(data, sdpl::View::satellite);
  if (queries.records.empty() || gallery_imgs.records.empty())
    sdpl::fail(sdpl::ErrorCode::InconsistentViewStructure,
               "shift-eval needs both drone and satellite records");

  auto gallery = embed_records(*ckpt.model, gallery_imgs, 0);

  std::vector<sdpl::PadSpec> specs;
  for (int p : parse_int_list(pads_csv, "pads"))
    for (const auto& s : sdpl::pad_patterns(p)) specs.push_back(s);
  auto rows = sdpl::sweep(*ckpt.model, queries, gallery, specs);

  std::ofstream(fs::path(out_dir) / "sweep.csv") << sdpl::sweep_to_csv(rows);
  json jr = json::array();
  for (const auto& r : rows) {
    json e;
    e["p_h"] = r.spec.p_h;
    e["p_w"] = r.spec.p_w;
    e["recall@1"] = r.recall1;
    e["ap"] = r.ap;
    e["delta_recall"] = r.delta_recall1;
    e["delta_ap"] = r.delta_ap;
    jr.push_back(std::move(e));
  }
  std::ofstream(fs::path(out_dir) / "sweep.json") << jr.dump(2) << "\n";

  json cfg;
  cfg["checkpoint"] = ckpt_path;
  cfg["data"] = data_dir;
  cfg["pads"] = pads_csv;
  cfg["sign_convention"] = "+p mirrors the low (top/left) edge; content shifts down/right";
  info.effective_config = cfg;
  info.seed = ckpt.optim_config.seed;
  write_manifest(info, fs::path(out_dir) / "manifest.json");
  std::cout << sdpl::sweep_to_csv(rows);
  return 0;
}

int cmd_masks(int n_sps, int grid, int delta_h, const std::string& out_dir) {
  ManifestInfo info;
  info.command = "masks";
  info.started_at = sdpl::iso8601_now();
  info.out_dir = out_dir;
  fs::create_directories(out_dir);

  const auto layout = sdpl::RingLayout::shifted(grid, grid, n_sps, delta_h);
  const auto parts = sdpl::dps_partition(layout);
  json index = json::array();
  for (const auto& p : parts) {
    char name[48];
    std::snprintf(name, sizeof(name), "seg_%d_%d.pgm", p.segment.inner, p.segment.outer);
    sdpl::write_mask_pgm(fs::path(out_dir) / name, p.mask);
    json e;
    e["segment"] = {p.segment.inner, p.segment.outer};
    e["cell_count"] = p.mask.cell_count;
    e["outer_size"] = p.outer_size;
    e["file"] = name;
    index.push_back(std::move(e));
  }
  json doc;
  doc["grid"] = grid;
  doc["n_sps"] = n_sps;
  doc["delta_h"] = delta_h;
  doc["center"] = {layout.center_row, layout.center_col};
  doc["masks"] = index;
  std::ofstream(fs::path(out_dir) / "index.json") << doc.dump(2) << "\n";

  info.effective_config = doc;
  write_manifest(info, fs::path(out_dir) / "manifest.json");
  std::cout << "wrote " << parts.size() << " masks to " << out_dir << "\n";
  return 0;
}

int cmd_grad_check(int trials, double tol, uint64_t seed) {
  const auto reports = sdpl::run_gradient_suite(trials, seed);
  bool ok = true;
  for (const auto& r : reports) {
    std::cout << r.op << " max_rel_err " << r.max_rel_err << " (" << r.trials
              << " trials)\n";
    ok = ok && r.max_rel_err <= tol;
  }
  std::cout << (ok ? "PASS" : "FAIL") << " tolerance " << tol << "\n";
  return ok ? 0 : 2;
}

int cmd_report(const std::string& baseline_path, const std::vector<std::string>& runs,
               const std::string& out_dir) {
  ManifestInfo info;
  info.command = "report";
  info.started_at = sdpl::iso8601_now();
  info.out_dir = out_dir;
  fs::create_directories(out_dir);

  auto load_report = [](const std::string& path) {
    json j = load_json_file(path);
    if (!j.contains("ap") || !j.contains("recall") || !j["recall"].contains("1"))
      sdpl::fail(sdpl::ErrorCode::SchemaMismatch, path + " is not an eval report");
    return std::pair<double, double>{j["recall"]["1"].get<double>(), j["ap"].get<double>()};
  };

  const auto [base_r1, base_ap] = load_report(baseline_path);
  std::ostringstream csv;
  csv.precision(10);
  csv << "p_h,p_w,recall@1,ap,delta_recall,delta_ap\n";
  csv << "0,0," << base_r1 << "," << base_ap << ",0,0\n";
  json merged = json::array();
  {
    json e;
    e["p_h"] = 0; e["p_w"] = 0;
    e["recall@1"] = base_r1; e["ap"] = base_ap;
    e["delta_recall"] = 0.0; e["delta_ap"] = 0.0;
    merged.push_back(std::move(e));
  }
  for (const auto& run : runs) {
    // format: "p_h,p_w=path/to/report.json"
    const auto eq = run.find('=');
    if (eq == std::string::npos)
      sdpl::fail(sdpl::ErrorCode::UsageError, "--run expects p_h,p_w=path, got " + run);
    const auto pads = parse_int_list(run.substr(0, eq), "run pads");
    if (pads.size() != 2) sdpl::fail(sdpl::ErrorCode::UsageError, "--run needs two pads");
    const auto [r1, ap] = load_report(run.substr(eq + 1));
    csv << pads[0] << "," << pads[1] << "," << r1 << "," << ap << "," << (r1 - base_r1)
        << "," << (ap - base_ap) << "\n";
    json e;
    e["p_h"] = pads[0]; e["p_w"] = pads[1];
    e["recall@1"] = r1; e["ap"] = ap;
    e["delta_recall"] = r1 - base_r1; e["delta_ap"] = ap - base_ap;
    merged.push_back(std::move(e));
  }
  std::ofstream(fs::path(out_dir) / "report.csv") << csv.str();
  std::ofstream(fs::path(out_dir) / "report.json") << merged.dump(2) << "\n";

  json cfg;
  cfg["baseline"] = baseline_path;
  cfg["runs"] = runs;
  info.effective_config = cfg;
  write_manifest(info, fs::path(out_dir) / "manifest.json");
  std::cout << csv.str();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sdpl - shifting-dense partition learning for cross-view image retrieval"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "cap the number of worker threads");

  // synth-data
  auto* synth = app.add_subcommand("synth-data", "generate a synthetic paired dataset");
  sdpl::SplitSpec split;
  std::string synth_out;
  uint64_t synth_seed = 0;
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--train-classes", split.train_classes, "training classes");
  synth->add_option("--test-classes", split.test_classes, "test classes");
  synth->add_option("--drone-views", split.drone_views, "drone views per class");
  synth->add_option("--image-size", split.image_size, "image resolution");
  auto* synth_seed_opt = synth->add_option("--seed", synth_seed, "dataset seed");

  // train
  auto* train = app.add_subcommand("train", "train a model on a dataset split");
  TrainArgs targs;
  int t_epochs = 0, t_batch = 0, t_decay_every = 0, t_nsps = 0, t_dh1 = 0, t_dh2 = 0,
      t_cdh = 0, t_ckpt_every = 0, t_image_size = 0, t_classes = 0;
  double t_lr0 = 0, t_mom = 0, t_wd = 0, t_decay = 0, t_flip = -1, t_gem_p = 0;
  bool t_oneshot = false, t_learnable_p = false, t_norm = false;
  std::string t_fusion, t_partition, t_beta;
  uint64_t t_seed = 0;
  train->add_option("--data", targs.data_dir, "training split directory")->required();
  train->add_option("--out", targs.out_dir, "output directory")->required();
  train->add_option("--config", targs.config_path, "JSON config with model/optim objects");
  train->add_option("--resume", targs.resume_path, "checkpoint to resume from");
  auto* o_epochs = train->add_option("--epochs", t_epochs, "total epochs");
  auto* o_batch = train->add_option("--batch", t_batch, "pairs per batch");
  auto* o_lr0 = train->add_option("--lr0", t_lr0, "initial learning rate");
  auto* o_mom = train->add_option("--momentum", t_mom, "SGD momentum");
  auto* o_wd = train->add_option("--weight-decay", t_wd, "weight decay");
  auto* o_decay = train->add_option("--decay-factor", t_decay, "lr decay factor");
  auto* o_decay_every = train->add_option("--decay-every", t_decay_every, "epochs per decay");
  auto* o_oneshot = train->add_flag("--one-shot-decay", t_oneshot, "decay once, not recurring");
  auto* o_flip = train->add_option("--flip-prob", t_flip, "horizontal flip probability");
  auto* o_ckpt_every = train->add_option("--checkpoint-every", t_ckpt_every,
                                         "intermediate checkpoint cadence");
  auto* o_fusion = train->add_option("--fusion", t_fusion, "adaptive | hard | none");
  auto* o_partition = train->add_option("--partition", t_partition, "dps | sps");
  auto* o_beta = train->add_option("--beta", t_beta, "hard fusion weights a,b,c");
  auto* o_nsps = train->add_option("--n-sps", t_nsps, "base ring count");
  auto* o_dh1 = train->add_option("--delta-h1", t_dh1, "top-left shift (cells)");
  auto* o_dh2 = train->add_option("--delta-h2", t_dh2, "bottom-right shift (cells)");
  auto* o_cdh = train->add_option("--center-delta-h", t_cdh, "base partition shift");
  auto* o_gem_p = train->add_option("--gem-p", t_gem_p, "GeM exponent");
  auto* o_lp = train->add_flag("--learnable-p", t_learnable_p, "learn the GeM exponent");
  auto* o_norm = train->add_flag("--normalize-parts", t_norm, "L2-normalize part descriptors");
  auto* o_imgsz = train->add_option("--image-size", t_image_size, "input image size");
  auto* o_classes = train->add_option("--num-classes", t_classes, "classifier width");
  auto* train_seed_opt = train->add_option("--seed", t_seed, "run seed");

  // embed
  auto* embed = app.add_subcommand("embed", "compute descriptors for a dataset split");
  std::string e_ckpt, e_data, e_view = "both", e_out;
  int e_scale = 0;
  embed->add_option("--checkpoint", e_ckpt, "model checkpoint")->required();
  embed->add_option("--data", e_data, "dataset split directory")->required();
  embed->add_option("--view", e_view, "drone | satellite | both");
  embed->add_option("--out", e_out, "output file prefix")->required();
  embed->add_option("--scale", e_scale, "scale subset 1..n_sps (0 = all parts)");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "rank descriptors and compute metrics");
  std::string v_query, v_gallery, v_out, v_ks = "1,5,10";
  eval_cmd->add_option("--query", v_query, "query descriptor prefix")->required();
  eval_cmd->add_option("--gallery", v_gallery, "gallery descriptor prefix")->required();
  eval_cmd->add_option("--out", v_out, "output directory")->required();
  eval_cmd->add_option("--ks", v_ks, "comma-separated recall cutoffs");

  // shift-eval
  auto* shift = app.add_subcommand("shift-eval", "offset-robustness degradation sweep");
  std::string s_ckpt, s_data, s_out, s_pads = "2,4,6,8,10";
  shift->add_option("--checkpoint", s_ckpt, "model checkpoint")->required();
  shift->add_option("--data", s_data, "test split directory")->required();
  shift->add_option("--out", s_out, "output directory")->required();
  shift->add_option("--pads", s_pads, "pad magnitudes, comma separated");

  // masks
  auto* masks = app.add_subcommand("masks", "export partition masks as PGM + index");
  int m_nsps = 4, m_grid = 32, m_dh = 0;
  std::string m_out;
  masks->add_option("--n-sps", m_nsps, "base ring count");
  masks->add_option("--grid", m_grid, "feature grid extent");
  masks->add_option("--delta-h", m_dh, "segmentation center shift");
  masks->add_option("--out", m_out, "output directory")->required();

  // grad-check
  auto* grad = app.add_subcommand("grad-check", "finite-difference gradient self-check");
  int g_trials = 100;
  double g_tol = 1e-4;
  uint64_t g_seed = 0;
  grad->add_option("--trials", g_trials, "trials per op");
  grad->add_option("--tol", g_tol, "max relative error");
  auto* grad_seed_opt = grad->add_option("--seed", g_seed, "suite seed");

  // report
  auto* report = app.add_subcommand("report", "merge eval reports into a delta table");
  std::string r_baseline, r_out;
  std::vector<std::string> r_runs;
  report->add_option("--baseline", r_baseline, "baseline eval report.json")->required();
  report->add_option("--run", r_runs, "sweep rows as p_h,p_w=report.json");
  report->add_option("--out", r_out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

#ifdef _OPENMP
  if (threads > 0) omp_set_num_threads(threads);
#else
  (void)threads;
#endif

  try {
    if (*synth) {
      split.seed = resolve_seed(synth_seed_opt, synth_seed, std::nullopt);
      return cmd_synth_data(synth_out, split);
    }
    if (*train) {
      json m, o;
      if (o_epochs->count()) o["epochs"] = t_epochs;
      if (o_batch->count()) o["batch"] = t_batch;
      if (o_lr0->count()) o["lr0"] = t_lr0;
      if (o_mom->count()) o["momentum"] = t_mom;
      if (o_wd->count()) o["weight_decay"] = t_wd;
      if (o_decay->count()) o["decay_factor"] = t_decay;
      if (o_decay_every->count()) o["decay_every"] = t_decay_every;
      if (o_oneshot->count()) o["one_shot_decay"] = t_oneshot;
      if (o_flip->count()) o["flip_prob"] = t_flip;
      if (o_ckpt_every->count()) o["checkpoint_every"] = t_ckpt_every;
      if (o_fusion->count()) m["fusion"] = t_fusion;
      if (o_partition->count()) m["partition"] = t_partition;
      if (o_beta->count()) {
        std::vector<double> beta;
        std::stringstream ss(t_beta);
        std::string tok;
        while (std::getline(ss, tok, ',')) {
          try {
            beta.push_back(std::stod(tok));
          } catch (const std::exception&) {
            sdpl::fail(sdpl::ErrorCode::UsageError, "bad --beta entry: " + tok);
          }
        }
        m["hard_beta"] = beta;
      }
      if (o_nsps->count()) m["n_sps"] = t_nsps;
      if (o_dh1->count()) m["delta_h1"] = t_dh1;
      if (o_dh2->count()) m["delta_h2"] = t_dh2;
      if (o_cdh->count()) m["center_delta_h"] = t_cdh;
      if (o_gem_p->count() || o_lp->count()) {
        json g = json::object();
        if (o_gem_p->count()) g["p"] = t_gem_p;
        if (o_lp->count()) g["learnable_p"] = t_learnable_p;
        m["gem"] = g;
      }
      if (o_norm->count()) m["normalize_parts"] = t_norm;
      if (o_imgsz->count()) m["image_size"] = t_image_size;
      if (o_classes->count()) m["num_classes"] = t_classes;
      targs.model_overrides = std::move(m);
      targs.optim_overrides = std::move(o);
      targs.seed = t_seed;
      targs.seed_given = train_seed_opt->count() > 0;
      return cmd_train(targs);
    }
    if (*embed) return cmd_embed(e_ckpt, e_data, e_view, e_out, e_scale);
    if (*eval_cmd) return cmd_eval(v_query, v_gallery, v_out, v_ks);
    if (*shift) return cmd_shift_eval(s_ckpt, s_data, s_out, s_pads, 0);
    if (*masks) return cmd_masks(m_nsps, m_grid, m_dh, m_out);
    if (*grad) {
      const uint64_t seed = resolve_seed(grad_seed_opt, g_seed, std::nullopt);
      return cmd_grad_check(g_trials, g_tol, seed);
    }
    if (*report) return cmd_report(r_baseline, r_runs, r_out);
  } catch (const sdpl::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.code() == sdpl::ErrorCode::UsageError ? 1 : 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
