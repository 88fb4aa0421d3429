#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cmdgoal/nn/optim.hpp"

namespace cmdgoal {

struct TrainConfig {
  nn::AdamConfig adam;
  std::size_t batch_size = 32;
  int max_epochs = 50;
  double clip_norm = 5.0;
  /// Stop after this many epochs without validation improvement (0 = off).
  int early_stop_patience = 0;
  /// Multiply the learning rate by plateau_factor after this many epochs
  /// without validation improvement (0 = off).
  int plateau_patience = 0;
  double plateau_factor = 0.1;
  int threads = 1;
  std::uint64_t seed = 0;
  /// Stop after this many optimizer steps (0 = no limit).
  std::size_t max_steps = 0;
  bool verbose = false;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

/// A differentiable per-example loss over a flat float parameter vector.
class Objective {
 public:
  virtual ~Objective() = default;
  virtual std::size_t num_params() const = 0;
  virtual std::size_t num_examples() const = 0;
  /// Loss of example i. When grad is non-null, adds d loss / d params into it.
  virtual double loss(std::span<const float> params, std::size_t i, float* grad) const = 0;
  /// Identifier used in divergence diagnostics.
  virtual std::string example_name(std::size_t i) const { return "#" + std::to_string(i); }
};

/// Validation score of a parameter vector; `maximize` selects the direction.
struct Validation {
  std::function<double(std::span<const float>)> score;
  bool maximize = false;
};

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  double val_score = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;  // mean pre-clip norm over the epoch
};

struct TrainResult {
  std::vector<float> best_params;
  int best_epoch = -1;
  double best_score = 0.0;
  std::vector<EpochLog> curve;
  std::size_t steps = 0;
};

/// Reduce-on-plateau rule: after `patience` consecutive epochs whose metric
/// does not improve on the best so far, update() returns true (reduce now)
/// and the count restarts.
class PlateauScheduler {
 public:
  PlateauScheduler(int patience, bool maximize) : patience_(patience), maximize_(maximize) {}
  bool update(double metric);
  int bad_epochs() const noexcept { return bad_; }

 private:
  int patience_;
  bool maximize_;
  bool has_best_ = false;
  double best_ = 0.0;
  int bad_ = 0;
};

/// Mean loss over the objective (no gradients).
double mean_loss(const Objective& obj, std::span<const float> params, int threads = 1);

/// Mini-batch Adam with global-norm clipping. The batch gradient is the mean
/// of per-example gradients, each computed into its own buffer and summed in
/// example order, so results do not depend on `threads`. Without a
/// validation the final parameters are returned as best. Throws
/// TrainingDiverged on a non-finite loss or gradient.
TrainResult train(const Objective& obj, std::vector<float> params, const TrainConfig& cfg,
                  const Validation* validation = nullptr);

void write_curve_csv(const std::vector<EpochLog>& curve, const std::string& path);

}  // namespace cmdgoal
