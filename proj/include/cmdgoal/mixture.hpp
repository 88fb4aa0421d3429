#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "cmdgoal/geometry.hpp"
#include "cmdgoal/rng.hpp"

namespace cmdgoal {

/// Lowest value log_pdf returns; about log of the smallest subnormal double.
/// Only reached when the density is exactly zero in log space (e.g. every
/// log-weight is -inf); finite log densities are returned unclamped.
inline constexpr double kLogDensityFloor = -745.0;

/// Axis-aligned standard deviations.
struct DiagScale {
  double sx = 1.0;
  double sy = 1.0;
};

/// Lower-triangular Cholesky factor L = [[l11, 0], [l21, l22]], Sigma = L L^T.
struct CholScale {
  double l11 = 1.0;
  double l21 = 0.0;
  double l22 = 1.0;
};

using ComponentScale = std::variant<DiagScale, CholScale>;

struct GaussComponent {
  EgoPoint mean;
  ComponentScale scale;
  double log_weight = 0.0;
};

/// Finite 2-D Gaussian mixture; weights are the softmax of the log-weights.
class Mixture2D {
 public:
  /// Throws InvalidArgument when empty, non-finite, or with non-positive scales.
  explicit Mixture2D(std::vector<GaussComponent> components);

  std::size_t size() const noexcept { return components_.size(); }
  const std::vector<GaussComponent>& components() const noexcept { return components_; }
  const GaussComponent& operator[](std::size_t i) const { return components_[i]; }

  /// Normalized weights; sum to 1.
  std::vector<double> weights() const;
  /// log-sum-exp of the raw log-weights.
  double log_normalizer() const noexcept { return log_norm_; }

 private:
  std::vector<GaussComponent> components_;
  double log_norm_;
};

/// log phi(y | mean, scale) of one component.
double component_log_pdf(const GaussComponent& c, EgoPoint y) noexcept;

/// Per-axis standard deviations (sqrt of the covariance diagonal).
std::array<double, 2> axis_stddev(const ComponentScale& s) noexcept;

/// log p(y) of the mixture via max-shifted log-sum-exp. Throws on non-finite y.
double log_pdf(const Mixture2D& m, EgoPoint y);

/// Mean negative log-likelihood over 1..N targets.
double nll_loss(const Mixture2D& m, std::span<const EgoPoint> targets);

/// Gradient of nll_loss for one component. `d_scale` holds the derivative
/// with respect to the stored scale values: (sx, sy, 0) for DiagScale and
/// (l11, l21, l22) for CholScale. Models chain their own scale activations.
struct ComponentGrad {
  double d_mean_x = 0.0;
  double d_mean_y = 0.0;
  std::array<double, 3> d_scale{};
  double d_log_weight = 0.0;
};

struct MixtureGrad {
  double loss = 0.0;
  std::vector<ComponentGrad> components;
};

MixtureGrad nll_grad(const Mixture2D& m, std::span<const EgoPoint> targets);

/// Draws n points: component index from the weights, then a Gaussian draw.
std::vector<EgoPoint> sample(const Mixture2D& m, std::size_t n, Rng& rng);
std::vector<EgoPoint> sample(const Mixture2D& m, std::size_t n, std::uint64_t seed);

/// Keeps the k heaviest components (ties: lower index first), renormalized,
/// in their original order.
Mixture2D top_k_truncate(const Mixture2D& m, std::size_t k);

/// Density evaluated at pixel centers and scaled so the maximum is 1.
struct Heatmap {
  int width = 0;
  int height = 0;
  std::vector<double> values;  // row-major
  std::size_t argmax() const;
  std::vector<std::uint8_t> to_gray8() const;
};

Heatmap render_heatmap(const Mixture2D& m, int height, int width);
void write_heatmap_png(const Heatmap& h, const std::string& path);

}  // namespace cmdgoal
