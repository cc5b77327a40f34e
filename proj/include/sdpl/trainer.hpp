#pragma once

// SGD training loop: momentum + weight decay (decay skips batch-norm and bias
// parameters), step-decayed learning rate, paired-batch sampling with
// seeded shuffling and consistent horizontal flips. Checkpoints capture the
// model, optimizer state, epoch counter and RNG so a resumed run continues
// the exact byte-for-byte trajectory of an uninterrupted one.

#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "sdpl/model.hpp"
#include "sdpl/synth.hpp"

namespace sdpl {

struct OptimConfig {
  double lr0 = 1e-3;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double decay_factor = 0.75;
  int decay_every = 50;
  bool one_shot_decay = false;  // decay once after decay_every instead of recurring
  int batch = 8;
  int epochs = 100;
  double flip_prob = 0.5;
  int checkpoint_every = 0;  // 0 = final checkpoint only
  uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static OptimConfig from_json(const nlohmann::json& j);
};

/// lr0 * factor^floor(epoch / every), or a single decay in one-shot mode.
double lr_at(const OptimConfig& cfg, i64 epoch);

/// v <- momentum * v + (grad + weight_decay * param); param <- param - lr * v.
/// Weight decay is dropped for parameters flagged decay = false.
template <typename T>
void sgd_step(ParameterT<T>& p, std::vector<T>& velocity, T lr, T momentum,
              T weight_decay) {
  auto& val = *p.value;
  auto& grad = *p.grad;
  if (velocity.size() != val.size() || grad.size() != val.size())
    fail(ErrorCode::ShapeMismatch, "sgd_step buffers for " + p.name);
  const T wd = p.decay ? weight_decay : T(0);
  for (size_t i = 0; i < val.size(); ++i) {
    velocity[i] = momentum * velocity[i] + (grad[i] + wd * val[i]);
    val[i] -= lr * velocity[i];
  }
}

struct EpochLog {
  i64 epoch = 0;
  double lr = 0.0;
  double mean_loss = 0.0;
  double wall_seconds = 0.0;
};

std::string epoch_log_jsonl(const EpochLog& e);

class Trainer {
 public:
  Trainer(SdplModel& model, OptimConfig cfg, uint64_t seed);

  /// Runs epochs until the model has seen `target_epochs` in total
  /// (no-op when already there). Appends JSONL entries to log_stream if set.
  void run(const Dataset& train_data, i64 target_epochs, std::ostream* log_stream = nullptr,
           const std::filesystem::path* checkpoint_dir = nullptr);

  i64 epoch() const { return epoch_; }
  const OptimConfig& config() const { return cfg_; }
  const std::vector<EpochLog>& log() const { return log_; }
  SdplModel& model() { return model_; }

  std::string rng_state() const;
  const std::vector<std::vector<float>>& velocity() const { return velocity_; }
  void restore_state(std::vector<std::vector<float>> velocity, i64 epoch,
                     const std::string& rng_state);

 private:
  SdplModel& model_;
  OptimConfig cfg_;
  std::vector<std::vector<float>> velocity_;  // aligned with model_.parameters()
  std::mt19937_64 rng_;
  i64 epoch_ = 0;
  std::vector<EpochLog> log_;
};

void save_checkpoint(const std::filesystem::path& path, SdplModel& model,
                     const Trainer* trainer);

struct LoadedCheckpoint {
  SdplConfig model_config;
  OptimConfig optim_config;
  std::unique_ptr<SdplModel> model;
  bool has_trainer_state = false;
  std::vector<std::vector<float>> velocity;
  i64 epoch = 0;
  std::string rng_state;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

/// Trainer bound to ckpt.model, continuing the stored trajectory.
std::unique_ptr<Trainer> resume_trainer(LoadedCheckpoint& ckpt);

}  // namespace sdpl
