#include "sdpl/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "sdpl/serialize.hpp"
#include "sdpl/util.hpp"

namespace sdpl {

namespace {

constexpr char kCheckpointMagic[4] = {'S', 'D', 'P', 'C'};
constexpr uint32_t kCheckpointVersion = 1;

struct TrainPair {
  size_t drone_rec = 0;
  size_t sat_rec = 0;
  int label = 0;
};

// One pair per drone view, each matched with its class satellite image.
// Class ids map to label indices by ascending order.
std::vector<TrainPair> build_pairs(const Dataset& data, int num_classes) {
  std::map<int, size_t> sat_of_class;
  for (size_t i = 0; i < data.records.size(); ++i)
    if (data.records[i].view.kind == View::satellite)
      sat_of_class.emplace(data.records[i].class_id, i);
  std::map<int, int> label_of_class;
  for (const auto& [cid, _] : sat_of_class)
    label_of_class.emplace(cid, static_cast<int>(label_of_class.size()));
  if (static_cast<int>(label_of_class.size()) != num_classes)
    fail(ErrorCode::ConfigMismatch,
         "dataset has " + std::to_string(label_of_class.size()) +
             " classes but the model expects " + std::to_string(num_classes));
  std::vector<TrainPair> pairs;
  for (size_t i = 0; i < data.records.size(); ++i) {
    const auto& rec = data.records[i];
    if (rec.view.kind != View::drone) continue;
    auto sat = sat_of_class.find(rec.class_id);
    if (sat == sat_of_class.end())
      fail(ErrorCode::InconsistentViewStructure,
           "class " + std::to_string(rec.class_id) + " has no satellite view");
    pairs.push_back(TrainPair{i, sat->second, label_of_class.at(rec.class_id)});
  }
  if (pairs.empty()) fail(ErrorCode::InconsistentViewStructure, "dataset yields no pairs");
  return pairs;
}

}  // namespace

void OptimConfig::validate() const {
  if (!(lr0 > 0) || !(momentum >= 0) || !(weight_decay >= 0) || !(decay_factor > 0))
    fail(ErrorCode::ConfigMismatch, "optimizer hyperparameters must be positive");
  if (decay_every < 1 || batch < 1 || epochs < 0)
    fail(ErrorCode::ConfigMismatch, "decay_every and batch must be >= 1, epochs >= 0");
  if (flip_prob < 0.0 || flip_prob > 1.0)
    fail(ErrorCode::ConfigMismatch, "flip_prob must lie in [0,1]");
}

nlohmann::json OptimConfig::to_json() const {
  nlohmann::json j;
  j["lr0"] = lr0;
  j["momentum"] = momentum;
  j["weight_decay"] = weight_decay;
  j["decay_factor"] = decay_factor;
  j["decay_every"] = decay_every;
  j["one_shot_decay"] = one_shot_decay;
  j["batch"] = batch;
  j["epochs"] = epochs;
  j["flip_prob"] = flip_prob;
  j["checkpoint_every"] = checkpoint_every;
  j["seed"] = seed;
  return j;
}

OptimConfig OptimConfig::from_json(const nlohmann::json& j) {
  OptimConfig c;
  if (!j.is_object()) fail(ErrorCode::SchemaMismatch, "optimizer config must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    if (k == "lr0") c.lr0 = it.value().get<double>();
    else if (k == "momentum") c.momentum = it.value().get<double>();
    else if (k == "weight_decay") c.weight_decay = it.value().get<double>();
    else if (k == "decay_factor") c.decay_factor = it.value().get<double>();
    else if (k == "decay_every") c.decay_every = it.value().get<int>();
    else if (k == "one_shot_decay") c.one_shot_decay = it.value().get<bool>();
    else if (k == "batch") c.batch = it.value().get<int>();
    else if (k == "epochs") c.epochs = it.value().get<int>();
    else if (k == "flip_prob") c.flip_prob = it.value().get<double>();
    else if (k == "checkpoint_every") c.checkpoint_every = it.value().get<int>();
    else if (k == "seed") c.seed = it.value().get<uint64_t>();
    else fail(ErrorCode::SchemaMismatch, "unknown optimizer key \"" + k + "\"");
  }
  c.validate();
  return c;
}

double lr_at(const OptimConfig& cfg, i64 epoch) {
  if (cfg.one_shot_decay)
    return epoch >= cfg.decay_every ? cfg.lr0 * cfg.decay_factor : cfg.lr0;
  return cfg.lr0 * std::pow(cfg.decay_factor, static_cast<double>(epoch / cfg.decay_every));
}

std::string epoch_log_jsonl(const EpochLog& e) {
  nlohmann::json j;
  j["epoch"] = e.epoch;
  j["lr"] = e.lr;
  j["mean_loss"] = e.mean_loss;
  j["wall_time"] = e.wall_seconds;
  return j.dump();
}

Trainer::Trainer(SdplModel& model, OptimConfig cfg, uint64_t seed)
    : model_(model), cfg_(std::move(cfg)), rng_(seeded_rng(seed, "trainer")) {
  cfg_.validate();
  cfg_.seed = seed;
  for (auto* p : model_.parameters())
    velocity_.emplace_back(static_cast<size_t>(p->numel()), 0.0f);
}

std::string Trainer::rng_state() const {
  std::ostringstream os;
  os << rng_;
  return os.str();
}

void Trainer::restore_state(std::vector<std::vector<float>> velocity, i64 epoch,
                            const std::string& rng_state) {
  if (velocity.size() != velocity_.size())
    fail(ErrorCode::CorruptCheckpoint, "velocity buffer count mismatch");
  for (size_t i = 0; i < velocity.size(); ++i)
    if (velocity[i].size() != velocity_[i].size())
      fail(ErrorCode::CorruptCheckpoint, "velocity buffer size mismatch");
  velocity_ = std::move(velocity);
  epoch_ = epoch;
  std::istringstream is(rng_state);
  is >> rng_;
  if (!is) fail(ErrorCode::CorruptCheckpoint, "bad RNG state");
}

void Trainer::run(const Dataset& train_data, i64 target_epochs, std::ostream* log_stream,
                  const std::filesystem::path* checkpoint_dir) {
  const auto pairs = build_pairs(train_data, model_.config().num_classes);
  const int S = model_.config().image_size;
  if (train_data.image_size != S)
    fail(ErrorCode::ConfigMismatch, "dataset image size " +
                                        std::to_string(train_data.image_size) +
                                        " does not match model " + std::to_string(S));
  auto params = model_.parameters();

  while (epoch_ < target_epochs) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = lr_at(cfg_, epoch_);

    std::vector<size_t> order(pairs.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng_shuffle(order, rng_);

    double loss_sum = 0.0;
    i64 batches = 0;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg_.batch)) {
      const size_t b = std::min(static_cast<size_t>(cfg_.batch), order.size() - start);
      std::vector<TensorT<float>> drone_imgs, sat_imgs;
      std::vector<int> labels;
      drone_imgs.reserve(b);
      sat_imgs.reserve(b);
      for (size_t i = 0; i < b; ++i) {
        const auto& pr = pairs[order[start + i]];
        const bool flip = cfg_.flip_prob > 0.0 && rng_uniform(rng_) < cfg_.flip_prob;
        auto d = train_data.records[pr.drone_rec].image;
        auto s = train_data.records[pr.sat_rec].image;
        if (flip) {  // flip both views together to keep geometric correspondence
          d = flip_width(d);
          s = flip_width(s);
        }
        drone_imgs.push_back(std::move(d));
        sat_imgs.push_back(std::move(s));
        labels.push_back(pr.label);
      }
      Tape tape;
      auto out = model_.forward_train(tape, stack_images<float>(drone_imgs),
                                      stack_images<float>(sat_imgs), labels, rng_);
      tape.backward(out.loss);
      for (size_t i = 0; i < params.size(); ++i) {
        sgd_step(*params[i], velocity_[i], static_cast<float>(lr),
                 static_cast<float>(cfg_.momentum), static_cast<float>(cfg_.weight_decay));
        params[i]->zero_grad();
      }
      loss_sum += static_cast<double>(out.loss.item());
      ++batches;
    }

    ++epoch_;
    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    EpochLog entry{epoch_, lr, loss_sum / static_cast<double>(batches), wall};
    log_.push_back(entry);
    if (log_stream) (*log_stream) << epoch_log_jsonl(entry) << "\n" << std::flush;
    if (checkpoint_dir && cfg_.checkpoint_every > 0 && epoch_ % cfg_.checkpoint_every == 0 &&
        epoch_ < target_epochs) {
      save_checkpoint(*checkpoint_dir / ("epoch_" + std::to_string(epoch_) + ".sdpc"),
                      model_, this);
    }
  }
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

namespace {

void write_named_tensor(std::ostream& os, const std::string& name, const Shape& shape,
                        std::span<const float> values) {
  write_string(os, name);
  write_tensor(os, shape, values);
}

struct NamedTensor {
  std::string name;
  StoredTensor tensor;
};

NamedTensor read_named_tensor(std::istream& is) {
  NamedTensor nt;
  nt.name = read_string(is);
  nt.tensor = read_tensor(is);
  return nt;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, SdplModel& model,
                     const Trainer* trainer) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(ErrorCode::IoError, "cannot open " + path.string() + " for writing");
  os.write(kCheckpointMagic, 4);
  write_u32(os, kCheckpointVersion);
  write_string(os, model.config().to_json().dump());
  write_string(os, trainer ? trainer->config().to_json().dump() : std::string("{}"));

  auto params = model.parameters();
  write_u32(os, static_cast<uint32_t>(params.size()));
  for (auto* p : params) write_named_tensor(os, p->name, p->shape, *p->value);

  write_u32(os, static_cast<uint32_t>(model.heads().size() * 3));
  int hi = 0;
  for (auto& h : model.heads()) {
    const std::string prefix = "head." + std::to_string(hi++);
    const i64 bn = static_cast<i64>(h.bn->mean.size());
    write_named_tensor(os, prefix + ".bn_mean", Shape{bn}, h.bn->mean);
    write_named_tensor(os, prefix + ".bn_var", Shape{bn}, h.bn->var);
    const float flag = h.bn->initialized ? 1.0f : 0.0f;
    write_named_tensor(os, prefix + ".bn_init", Shape{1}, std::span<const float>(&flag, 1));
  }

  if (trainer) {
    write_u8(os, 1);
    write_u32(os, static_cast<uint32_t>(trainer->velocity().size()));
    for (size_t i = 0; i < trainer->velocity().size(); ++i)
      write_named_tensor(os, params[i]->name,
                         Shape{static_cast<i64>(trainer->velocity()[i].size())},
                         trainer->velocity()[i]);
    write_u64(os, static_cast<uint64_t>(trainer->epoch()));
    write_string(os, trainer->rng_state());
  } else {
    write_u8(os, 0);
  }
  if (!os) fail(ErrorCode::IoError, "checkpoint write failed");
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorCode::IoError, "cannot open " + path.string());
  char magic[4];
  if (!is.read(magic, 4)) fail(ErrorCode::CorruptCheckpoint, "truncated checkpoint");
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0)
    fail(ErrorCode::CorruptCheckpoint, "bad checkpoint magic");
  const uint32_t version = read_u32(is);
  if (version != kCheckpointVersion)
    fail(ErrorCode::VersionMismatch, "checkpoint version " + std::to_string(version));

  LoadedCheckpoint out;
  try {
    out.model_config = SdplConfig::from_json(nlohmann::json::parse(read_string(is)));
    const auto ostr = read_string(is);
    const auto oj = nlohmann::json::parse(ostr);
    out.optim_config = oj.empty() ? OptimConfig{} : OptimConfig::from_json(oj);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::CorruptCheckpoint, std::string("config block: ") + e.what());
  }

  out.model = std::make_unique<SdplModel>(out.model_config, /*seed=*/0);
  auto params = out.model->parameters();
  const uint32_t n_params = read_u32(is);
  if (n_params != params.size())
    fail(ErrorCode::CorruptCheckpoint, "parameter count mismatch");
  for (auto* p : params) {
    auto nt = read_named_tensor(is);
    if (nt.name != p->name || nt.tensor.shape != p->shape)
      fail(ErrorCode::CorruptCheckpoint, "parameter " + p->name + " mismatch");
    p->value->assign(nt.tensor.values.begin(), nt.tensor.values.end());
  }

  const uint32_t n_buffers = read_u32(is);
  auto heads = out.model->heads();
  if (n_buffers != heads.size() * 3)
    fail(ErrorCode::CorruptCheckpoint, "buffer count mismatch");
  for (size_t h = 0; h < heads.size(); ++h) {
    auto mean = read_named_tensor(is);
    auto var = read_named_tensor(is);
    auto flag = read_named_tensor(is);
    const std::string prefix = "head." + std::to_string(h);
    if (mean.name != prefix + ".bn_mean" || var.name != prefix + ".bn_var" ||
        flag.name != prefix + ".bn_init")
      fail(ErrorCode::CorruptCheckpoint, "buffer order mismatch at " + prefix);
    heads[h].bn->mean.assign(mean.tensor.values.begin(), mean.tensor.values.end());
    heads[h].bn->var.assign(var.tensor.values.begin(), var.tensor.values.end());
    heads[h].bn->initialized = flag.tensor.values.at(0) != 0.0f;
  }

  const uint8_t has_state = read_u8(is);
  if (has_state) {
    out.has_trainer_state = true;
    const uint32_t n_vel = read_u32(is);
    if (n_vel != params.size()) fail(ErrorCode::CorruptCheckpoint, "velocity count mismatch");
    for (uint32_t i = 0; i < n_vel; ++i) {
      auto nt = read_named_tensor(is);
      out.velocity.push_back(std::move(nt.tensor.values));
    }
    out.epoch = static_cast<i64>(read_u64(is));
    out.rng_state = read_string(is);
  }
  return out;
}

std::unique_ptr<Trainer> resume_trainer(LoadedCheckpoint& ckpt) {
  if (!ckpt.model) fail(ErrorCode::CorruptCheckpoint, "checkpoint has no model");
  auto trainer = std::make_unique<Trainer>(*ckpt.model, ckpt.optim_config,
                                           ckpt.optim_config.seed);
  if (ckpt.has_trainer_state)
    trainer->restore_state(ckpt.velocity, ckpt.epoch, ckpt.rng_state);
  return trainer;
}

}  // namespace sdpl
