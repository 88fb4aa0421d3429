#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cmdgoal/checkpoint.hpp"
#include "cmdgoal/layout.hpp"
#include "cmdgoal/mixture.hpp"
#include "cmdgoal/nn/layers.hpp"
#include "cmdgoal/scene.hpp"
#include "cmdgoal/trainer.hpp"

namespace cmdgoal {

/// Architecture of the pyramid destination predictor.
///
/// Encoder: a stride-2 stem followed by stride-2 stages up to the coarsest
/// scale, with a residual block on every stage at or above the finest scale.
/// A top-down pyramid (1x1 laterals, nearest upsampling, 3x3 smoothing) gives
/// one C-channel map per scale. The shared blocks and heads are applied to
/// every scale with the same weights.
struct PdpcConfig {
  int height = 192;
  int width = 288;
  std::vector<int> scales{4, 8, 16, 32};
  int channels = 256;
  int shared_blocks = 5;
  int attention_after_block = 2;  // 1-based
  int norm_groups = 32;
  int command_hidden = 512;
  double scale_init = 1.0;
  /// Train and predict on layouts without the referred-object channel.
  bool no_referred_channel = false;

  static PdpcConfig full();
  /// 96x144 input, scales {4, 8}, 64 channels.
  static PdpcConfig desk();
  /// 24x36 input, scales {2, 4}, 8 channels; small enough for finite differences.
  static PdpcConfig audit();

  /// Throws InvalidArgument on any violated constraint.
  void validate() const;
  std::size_t num_components() const;
};

nlohmann::json to_json(const PdpcConfig& c);
PdpcConfig pdpc_config_from_json(const nlohmann::json& j);

/// Anchor of cell (w, h) at downsample rate k in layout pixels. Throws
/// InvalidArgument for indices outside a grid_w x grid_h grid.
PixelPoint grid_anchor(int w, int h, int k, int grid_w, int grid_h);

template <typename T>
struct AttentionResult {
  nn::Tensor<T> features;  // input scaled per cell by its weight
  std::vector<T> weights;  // softmax over cells, row-major h x w
};

/// Dot product of `query` with each cell's channel vector, softmax over all
/// cells, and the feature map multiplied by the result. Throws ShapeMismatch
/// when query.size() != features.c.
template <typename T>
AttentionResult<T> command_attention(const nn::Tensor<T>& features, std::span<const T> query);

/// Adjoint of command_attention: adds into dfeatures and dquery.
template <typename T>
void command_attention_backward(const nn::Tensor<T>& features, std::span<const T> query,
                                const std::vector<T>& weights, const nn::Tensor<T>& dout,
                                nn::Tensor<T>& dfeatures, std::span<T> dquery);

/// Raw head outputs at one scale, each row-major gh x gw per channel.
struct ScaleGrid {
  int k = 0;
  int grid_w = 0;
  int grid_h = 0;
  std::vector<double> offset;      // 2 channels: du, dv in layout pixels
  std::vector<double> sigma_pred;  // 2 channels, before activation
  std::vector<double> logit;       // 1 channel
  std::vector<double> attention;   // 1 channel
  double scale_factor = 1.0;       // s_i
};

struct PdpcOutput {
  Mixture2D mixture;
  std::vector<ScaleGrid> grids;
};

class PdpcModel {
 public:
  explicit PdpcModel(PdpcConfig cfg);

  const PdpcConfig& config() const noexcept { return cfg_; }
  const nn::ParamLayout& layout() const noexcept { return layout_; }
  std::size_t num_params() const noexcept { return layout_.total(); }

  /// He-normal convolution and linear weights, zero biases, unit group-norm
  /// gains, and every s_i = scale_init.
  template <typename T>
  std::vector<T> init_params(std::uint64_t seed) const;

  /// Throws ShapeMismatch on wrong layout/command dims and InvalidArgument on
  /// non-finite parameters or a non-positive s_i.
  template <typename T>
  PdpcOutput forward(std::span<const T> params, const LayoutTensor& layout, std::span<const float> command) const;

  /// Mean NLL of `targets`; when grad is non-null, adds the gradient into it.
  template <typename T>
  double loss(std::span<const T> params, const LayoutTensor& layout, std::span<const float> command,
              std::span<const EgoPoint> targets, T* grad) const;

  LayoutTensor rasterize(const SceneRecord& rec, const std::string& base_dir = {}) const;

 private:
  template <typename T>
  struct Cache;

  template <typename T>
  PdpcOutput run(std::span<const T> params, const LayoutTensor& layout, std::span<const float> command,
                 Cache<T>& cache) const;

  PdpcConfig cfg_;
  nn::ParamLayout layout_;
  std::vector<int> levels_;  // encoder downsample rates 2, 4, ..., max scale
  struct Modules {
    nn::ConvGnRelu stem;
    std::vector<nn::ConvGnRelu> down;        // one per level after the stem
    std::vector<nn::ResidualBlock> res;      // one per scale
    std::vector<nn::Conv2d> lateral;         // one per scale
    std::vector<nn::Conv2d> smooth;          // one per scale
    std::vector<nn::ConvGnRelu> shared;      // shared across scales
    nn::Linear cmd1;
    nn::Linear cmd2;
    nn::Conv2d head;  // channels 0-1 offset, 2-3 sigma, 4 weight logit
    std::size_t scale_factor_off = 0;
  } m_;
};

struct PdpcTrainResult {
  Checkpoint checkpoint;
  TrainResult train;
};

/// Full: Adam 3e-5, batch 32, clip 5, 50 epochs. Desk: Adam 1e-3, batch 16,
/// clip 5, at most 20 epochs, lr x0.3 after each epoch without a better
/// validation NLL, early stop after 4 such epochs.
TrainConfig default_pdpc_train_config(bool desk);

/// Trains on `train` with validation NLL on `val` (train NLL when val is empty).
PdpcTrainResult train_pdpc(const DatasetSplit& train, const DatasetSplit& val, const PdpcConfig& cfg,
                           const TrainConfig& tcfg, const std::string& base_dir = {});

Checkpoint pdpc_checkpoint(const PdpcModel& model, const std::vector<float>& params, const TrainConfig& tcfg,
                           int epoch);

struct LoadedPdpc {
  PdpcModel model;
  std::vector<float> params;
};

/// Throws SchemaError when the checkpoint is not a PDPC checkpoint.
LoadedPdpc load_pdpc(const Checkpoint& c);

/// Rasterizes with the model's dims, runs forward and keeps the top_k heaviest components.
Mixture2D predict(const LoadedPdpc& model, const SceneRecord& rec, std::optional<std::size_t> top_k = {},
                  const std::string& base_dir = {});

/// Mean NLL of a set of records under a model.
double mean_nll(const LoadedPdpc& model, const DatasetSplit& split, int threads = 1, const std::string& base_dir = {});

struct GradAuditReport {
  std::size_t checked = 0;
  double rel_error = 0.0;        // ||analytic - numeric|| / ||numeric|| over checked coords
  double max_abs_error = 0.0;
  double loss = 0.0;
};

/// Central finite differences of the end-to-end loss in double precision,
/// on a generated scene, over `coords` randomly chosen parameters plus every s_i.
GradAuditReport audit_pdpc_gradient(const PdpcConfig& cfg, std::uint64_t seed, std::size_t coords = 60,
                                    double step = 1e-6);

}  // namespace cmdgoal
