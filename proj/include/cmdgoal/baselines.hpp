#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <json.hpp>

#include "cmdgoal/checkpoint.hpp"
#include "cmdgoal/layout.hpp"
#include "cmdgoal/metrics.hpp"
#include "cmdgoal/mixture.hpp"
#include "cmdgoal/nn/layers.hpp"
#include "cmdgoal/scene.hpp"
#include "cmdgoal/trainer.hpp"

namespace cmdgoal {

/// Truncated-Gaussian soft targets for the per-axis histogram model.
struct SoftTargetConfig {
  double sigma = 3.0;     // cells
  double truncation = 11; // cells
  int grid_w = 300;       // x axis (forward)
  int grid_h = 200;       // y axis (lateral)
  void validate() const;
};

/// t_i proportional to sum_j N(i - j; sigma) over |i - j| <= truncation,
/// normalized to sum 1 over the n_cells entries. Throws InvalidArgument on an
/// empty index set or indices outside [0, n_cells).
std::vector<double> nonparam_soft_targets(std::span<const int> gt_indices, int n_cells, const SoftTargetConfig& cfg);

/// Configuration shared by the trained baselines: a residual layout encoder
/// pooled to `embed_dim`, concatenated with the command, then an MLP head.
struct BaselineConfig {
  ModelKind kind = ModelKind::kUnimodal;
  int height = 200;
  int width = 300;
  int channels = 64;
  int stages = 4;  // stride-2 residual stages after the stem
  int norm_groups = 32;
  int embed_dim = 1024;
  int hidden = 512;
  int mdn_components = 3;
  /// Meters per unit of the scale activation.
  double sigma_unit = 10.0;
  SoftTargetConfig soft;
  bool no_referred_channel = false;

  static BaselineConfig full(ModelKind kind);
  /// 96x144 input, 32 channels, 3 stages.
  static BaselineConfig desk(ModelKind kind);
  void validate() const;
  /// Size of the raw head output.
  int output_dim() const;
};

nlohmann::json to_json(const BaselineConfig& c);
BaselineConfig baseline_config_from_json(const nlohmann::json& j);

/// Adam settings per model kind: batch 16, clip 5, 50 epochs, patience 10,
/// lr 3e-5 (single point, histogram, mdn) or 1e-4 (unimodal).
TrainConfig default_baseline_train_config(ModelKind kind);
/// Desk schedule: lr 1e-3 (unimodal) or 3e-4, otherwise the PDPC desk schedule.
TrainConfig desk_baseline_train_config(ModelKind kind);

/// Independent categorical distributions over histogram columns (x) and rows (y).
struct NonParamDistribution {
  int grid_w = 0;
  int grid_h = 0;
  std::vector<double> px;  // grid_w entries, column u
  std::vector<double> py;  // grid_h entries, row v
  /// Draws column and row independently and returns the cell centers in meters.
  std::vector<EgoPoint> sample(std::size_t n, Rng& rng) const;
};

using BaselinePrediction = std::variant<EgoPoint, Mixture2D, NonParamDistribution>;

class BaselineModel {
 public:
  explicit BaselineModel(BaselineConfig cfg);

  const BaselineConfig& config() const noexcept { return cfg_; }
  const nn::ParamLayout& layout() const noexcept { return layout_; }
  std::size_t num_params() const noexcept { return layout_.total(); }

  template <typename T>
  std::vector<T> init_params(std::uint64_t seed) const;

  /// Raw head output (output_dim values).
  template <typename T>
  std::vector<double> raw_output(std::span<const T> params, const LayoutTensor& layout,
                                 std::span<const float> command) const;

  /// Training loss of one record; adds the gradient into grad when non-null.
  template <typename T>
  double loss(std::span<const T> params, const LayoutTensor& layout, std::span<const float> command,
              std::span<const EgoPoint> targets, T* grad) const;

  /// Point for single_point (clamped to the map), Mixture2D for unimodal and
  /// mdn, NonParamDistribution for the histogram model.
  BaselinePrediction decode(const std::vector<double>& raw) const;

  /// Loss and its gradient with respect to the raw head output.
  double head_loss(const std::vector<double>& raw, std::span<const EgoPoint> targets,
                   std::vector<double>* draw) const;

  LayoutTensor rasterize(const SceneRecord& rec, const std::string& base_dir = {}) const;

 private:
  template <typename T>
  struct Cache;
  template <typename T>
  std::vector<double> run(std::span<const T> params, const LayoutTensor& layout, std::span<const float> command,
                          Cache<T>& c) const;

  BaselineConfig cfg_;
  nn::ParamLayout layout_;
  nn::ConvGnRelu stem_;
  std::vector<nn::ConvGnRelu> down_;
  std::vector<nn::ResidualBlock> res_;
  nn::Linear embed_;
  nn::Linear fc1_;
  nn::Linear fc2_;
};

struct LoadedBaseline {
  BaselineModel model;
  std::vector<float> params;
};

struct BaselineTrainResult {
  Checkpoint checkpoint;
  TrainResult train;
};

BaselineTrainResult train_baseline(const DatasetSplit& train, const DatasetSplit& val, const BaselineConfig& cfg,
                                   const TrainConfig& tcfg, const std::string& base_dir = {});

Checkpoint baseline_checkpoint(const BaselineModel& model, const std::vector<float>& params,
                               const TrainConfig& tcfg, int epoch);
/// Throws SchemaError for PDPC or grounding checkpoints.
LoadedBaseline load_baseline(const Checkpoint& c);

BaselinePrediction predict_baseline(const LoadedBaseline& m, const SceneRecord& rec, const std::string& base_dir = {});

/// Mean training loss of a split.
double baseline_mean_loss(const LoadedBaseline& m, const DatasetSplit& split, int threads = 1,
                          const std::string& base_dir = {});

/// Central finite differences of one record's loss in double precision.
struct BaselineAuditReport {
  std::size_t checked = 0;
  double rel_error = 0.0;
  double loss = 0.0;
};
BaselineAuditReport audit_baseline_gradient(const BaselineConfig& cfg, std::uint64_t seed, std::size_t coords = 60,
                                            double step = 1e-6);

// ---------------------------------------------------------------------------

enum class NaiveKind { kRandomPoint, kRandomRoadPoint, kPickEgo, kRandomObject, kPickReferred };

std::string_view to_string(NaiveKind k) noexcept;
/// Accepts '-' or '_' separators; throws InvalidArgument otherwise.
NaiveKind parse_naive_kind(std::string_view s);

struct NaiveOptions {
  /// Grid used for the drivable-surface mask.
  int mask_height = 200;
  int mask_width = 300;
  std::string base_dir;
};

/// One destination guess. Throws InvalidArgument when the record lacks what
/// the kind needs (objects, drivable pixels).
EgoPoint naive_baseline(const SceneRecord& rec, NaiveKind kind, Rng& rng, const NaiveOptions& opts = {});

/// Samplers for the evaluation harness. Point predictors repeat their point.
DestinationSampler naive_sampler(NaiveKind kind, NaiveOptions opts = {});
DestinationSampler baseline_sampler(const LoadedBaseline& m, std::string base_dir = {});
DestinationSampler mixture_sampler(std::function<Mixture2D(const SceneRecord&)> predict);

}  // namespace cmdgoal
