#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cmdgoal/checkpoint.hpp"
#include "cmdgoal/nn/layers.hpp"
#include "cmdgoal/scene.hpp"
#include "cmdgoal/trainer.hpp"

namespace cmdgoal {

struct GroundingConfig {
  std::size_t feature_dim = kDefaultObjectFeatureDim;
  int hidden = 1024;
  int embed = 1024;
  /// Records whose proposals all have zero IoU with the ground truth are
  /// skipped with a warning; when false they raise InvalidArgument.
  bool skip_unmatched = true;
  void validate() const;
};

nlohmann::json to_json(const GroundingConfig& c);
GroundingConfig grounding_config_from_json(const nlohmann::json& j);

/// Adam 5e-4, weight decay 1e-4, batch 32, 20 epochs, lr x0.1 after 3
/// epochs without a better validation IoU@0.5 rate.
TrainConfig default_grounding_train_config();

/// Two two-layer MLPs embed the command and each proposal's features; the
/// dot products are softmaxed over the proposals.
class GroundingModel {
 public:
  explicit GroundingModel(GroundingConfig cfg);

  const GroundingConfig& config() const noexcept { return cfg_; }
  const nn::ParamLayout& layout() const noexcept { return layout_; }
  std::size_t num_params() const noexcept { return layout_.total(); }
  std::vector<float> init_params(std::uint64_t seed) const;

  /// Probability per proposal. Throws InvalidArgument for an empty set and
  /// ShapeMismatch for wrong command or feature dims.
  std::vector<double> score(std::span<const float> params, std::span<const float> command,
                            const std::vector<SceneObject>& proposals) const;

  /// -log p(target); adds the gradient into grad when non-null.
  double loss(std::span<const float> params, std::span<const float> command, const std::vector<SceneObject>& proposals,
              std::size_t target, float* grad) const;

 private:
  GroundingConfig cfg_;
  nn::ParamLayout layout_;
  nn::Linear cmd1_, cmd2_, obj1_, obj2_;
};

/// Index of the proposal whose frontal box best overlaps the ground truth
/// (lowest index on ties), or nullopt when none overlaps or no box is given.
std::optional<std::size_t> best_iou_proposal(const SceneRecord& rec);

/// Fraction of records with a ground-truth box whose chosen proposal has IoU > 0.5.
double iou50_rate(std::span<const SceneRecord> records, const std::function<std::size_t(const SceneRecord&)>& choose);

struct LoadedGrounding {
  GroundingModel model;
  std::vector<float> params;
  std::size_t choose(const SceneRecord& rec) const;
};

double eval_iou50(const LoadedGrounding& g, std::span<const SceneRecord> records);

struct GroundingTrainResult {
  Checkpoint checkpoint;
  TrainResult train;
  std::size_t skipped = 0;
};

GroundingTrainResult train_grounding(const DatasetSplit& train, const DatasetSplit& val, const GroundingConfig& cfg,
                                     const TrainConfig& tcfg);

LoadedGrounding load_grounding(const Checkpoint& c);

/// Copies of the records with referred_index set to the model's choice.
std::vector<SceneRecord> apply_grounding(const LoadedGrounding& g, std::span<const SceneRecord> records);

}  // namespace cmdgoal
