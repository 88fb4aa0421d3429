#include "cmdgoal/mixture.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "cmdgoal/error.hpp"
#include "cmdgoal/png_io.hpp"

namespace cmdgoal {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

double log_sum_exp(std::span<const double> v) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double x : v) mx = std::max(mx, x);
  if (!std::isfinite(mx)) return mx;
  double acc = 0.0;
  for (double x : v) acc += std::exp(x - mx);
  return mx + std::log(acc);
}

bool valid_scale(const ComponentScale& s) {
  if (const auto* d = std::get_if<DiagScale>(&s)) {
    return std::isfinite(d->sx) && std::isfinite(d->sy) && d->sx > 0.0 && d->sy > 0.0;
  }
  const auto& c = std::get<CholScale>(s);
  return std::isfinite(c.l11) && std::isfinite(c.l21) && std::isfinite(c.l22) && c.l11 > 0.0 &&
         c.l22 > 0.0;
}

/// log phi and its partial derivatives for one component at y.
struct ComponentEval {
  double log_phi;
  double d_mean_x;  // d log phi / d mean
  double d_mean_y;
  std::array<double, 3> d_scale;
};

ComponentEval eval_component(const GaussComponent& c, EgoPoint y) {
  const double dx = y.x - c.mean.x;
  const double dy = y.y - c.mean.y;
  if (const auto* d = std::get_if<DiagScale>(&c.scale)) {
    const double zx = dx / d->sx;
    const double zy = dy / d->sy;
    return {-kLog2Pi - std::log(d->sx) - std::log(d->sy) - 0.5 * (zx * zx + zy * zy),
            zx / d->sx,
            zy / d->sy,
            {(-1.0 + zx * zx) / d->sx, (-1.0 + zy * zy) / d->sy, 0.0}};
  }
  const auto& L = std::get<CholScale>(c.scale);
  // z = L^-1 d, v = L^-T z; d(-|z|^2/2)/dL_ab = v_a z_b on the lower triangle.
  const double z1 = dx / L.l11;
  const double z2 = (dy - L.l21 * z1) / L.l22;
  const double v2 = z2 / L.l22;
  const double v1 = (z1 - L.l21 * v2) / L.l11;
  return {-kLog2Pi - std::log(L.l11) - std::log(L.l22) - 0.5 * (z1 * z1 + z2 * z2),
          v1,
          v2,
          {-1.0 / L.l11 + v1 * z1, v2 * z1, -1.0 / L.l22 + v2 * z2}};
}

void check_point(EgoPoint y) {
  if (!std::isfinite(y.x) || !std::isfinite(y.y)) throw InvalidArgument("non-finite evaluation point");
}

}  // namespace

Mixture2D::Mixture2D(std::vector<GaussComponent> components) : components_(std::move(components)) {
  if (components_.empty()) throw InvalidArgument("mixture needs at least one component");
  std::vector<double> lw(components_.size());
  for (std::size_t i = 0; i < components_.size(); ++i) {
    const auto& c = components_[i];
    if (!std::isfinite(c.mean.x) || !std::isfinite(c.mean.y) || !std::isfinite(c.log_weight)) {
      throw InvalidArgument("mixture component " + std::to_string(i) + " has non-finite values");
    }
    if (!valid_scale(c.scale)) {
      throw InvalidArgument("mixture component " + std::to_string(i) + " has a non-positive scale");
    }
    lw[i] = c.log_weight;
  }
  log_norm_ = log_sum_exp(lw);
}

std::vector<double> Mixture2D::weights() const {
  std::vector<double> w(components_.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::exp(components_[i].log_weight - log_norm_);
  return w;
}

double component_log_pdf(const GaussComponent& c, EgoPoint y) noexcept {
  const double dx = y.x - c.mean.x;
  const double dy = y.y - c.mean.y;
  if (const auto* d = std::get_if<DiagScale>(&c.scale)) {
    const double zx = dx / d->sx;
    const double zy = dy / d->sy;
    return -kLog2Pi - std::log(d->sx * d->sy) - 0.5 * (zx * zx + zy * zy);
  }
  const auto& L = std::get<CholScale>(c.scale);
  const double z1 = dx / L.l11;
  const double z2 = (dy - L.l21 * z1) / L.l22;
  return -kLog2Pi - std::log(L.l11 * L.l22) - 0.5 * (z1 * z1 + z2 * z2);
}

std::array<double, 2> axis_stddev(const ComponentScale& s) noexcept {
  if (const auto* d = std::get_if<DiagScale>(&s)) return {d->sx, d->sy};
  const auto& L = std::get<CholScale>(s);
  return {L.l11, std::sqrt(L.l21 * L.l21 + L.l22 * L.l22)};
}

double log_pdf(const Mixture2D& m, EgoPoint y) {
  check_point(y);
  // Single-pass (streaming) log-sum-exp.
  double mx = -std::numeric_limits<double>::infinity();
  double acc = 0.0;
  for (const auto& c : m.components()) {
    const double x = c.log_weight + component_log_pdf(c, y);
    if (!(x > -std::numeric_limits<double>::infinity())) continue;
    if (x > mx) {
      acc = acc * std::exp(mx - x) + 1.0;
      mx = x;
    } else {
      acc += std::exp(x - mx);
    }
  }
  if (!std::isfinite(mx)) return kLogDensityFloor;
  const double out = mx + std::log(acc) - m.log_normalizer();
  return std::isfinite(out) ? out : kLogDensityFloor;
}

double nll_loss(const Mixture2D& m, std::span<const EgoPoint> targets) {
  if (targets.empty()) throw InvalidArgument("nll_loss needs at least one target");
  double acc = 0.0;
  for (const auto& y : targets) acc -= log_pdf(m, y);
  return acc / static_cast<double>(targets.size());
}

MixtureGrad nll_grad(const Mixture2D& m, std::span<const EgoPoint> targets) {
  if (targets.empty()) throw InvalidArgument("nll_grad needs at least one target");
  const std::size_t n = m.size();
  const double inv_n = 1.0 / static_cast<double>(targets.size());
  const std::vector<double> pi = m.weights();
  MixtureGrad g;
  g.components.assign(n, ComponentGrad{});
  std::vector<ComponentEval> evals(n);
  std::vector<double> joint(n);
  for (const auto& y : targets) {
    check_point(y);
    for (std::size_t i = 0; i < n; ++i) {
      evals[i] = eval_component(m[i], y);
      joint[i] = m[i].log_weight + evals[i].log_phi;
    }
    const double lse = log_sum_exp(joint);
    g.loss -= (lse - m.log_normalizer()) * inv_n;
    for (std::size_t i = 0; i < n; ++i) {
      const double r = std::exp(joint[i] - lse);  // responsibility
      auto& gi = g.components[i];
      gi.d_log_weight -= (r - pi[i]) * inv_n;
      gi.d_mean_x -= r * evals[i].d_mean_x * inv_n;
      gi.d_mean_y -= r * evals[i].d_mean_y * inv_n;
      for (int k = 0; k < 3; ++k) gi.d_scale[k] -= r * evals[i].d_scale[k] * inv_n;
    }
  }
  return g;
}

std::vector<EgoPoint> sample(const Mixture2D& m, std::size_t n, Rng& rng) {
  if (n == 0) throw InvalidArgument("sample count must be positive");
  const auto w = m.weights();
  std::vector<double> cdf(w.size());
  std::partial_sum(w.begin(), w.end(), cdf.begin());
  std::vector<EgoPoint> out;
  out.reserve(n);
  for (std::size_t s = 0; s < n; ++s) {
    const double u = rng.uniform() * cdf.back();
    auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
    const std::size_t idx = std::min<std::size_t>(it - cdf.begin(), cdf.size() - 1);
    const auto& c = m[idx];
    const double e1 = rng.normal();
    const double e2 = rng.normal();
    if (const auto* d = std::get_if<DiagScale>(&c.scale)) {
      out.push_back({c.mean.x + d->sx * e1, c.mean.y + d->sy * e2});
    } else {
      const auto& L = std::get<CholScale>(c.scale);
      out.push_back({c.mean.x + L.l11 * e1, c.mean.y + L.l21 * e1 + L.l22 * e2});
    }
  }
  return out;
}

std::vector<EgoPoint> sample(const Mixture2D& m, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  return sample(m, n, rng);
}

Mixture2D top_k_truncate(const Mixture2D& m, std::size_t k) {
  if (k < 1 || k > m.size()) {
    throw InvalidArgument("top-k must lie in [1, " + std::to_string(m.size()) + "], got " +
                          std::to_string(k));
  }
  if (k == m.size()) return m;
  std::vector<std::size_t> order(m.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return m[a].log_weight > m[b].log_weight;
  });
  order.resize(k);
  std::sort(order.begin(), order.end());
  std::vector<GaussComponent> kept;
  kept.reserve(k);
  std::vector<double> lw;
  for (std::size_t i : order) {
    kept.push_back(m[i]);
    lw.push_back(m[i].log_weight);
  }
  const double norm = log_sum_exp(lw);
  for (auto& c : kept) c.log_weight -= norm;
  return Mixture2D(std::move(kept));
}

std::size_t Heatmap::argmax() const {
  return static_cast<std::size_t>(std::max_element(values.begin(), values.end()) - values.begin());
}

std::vector<std::uint8_t> Heatmap::to_gray8() const {
  std::vector<std::uint8_t> px(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    px[i] = static_cast<std::uint8_t>(std::lround(std::clamp(values[i], 0.0, 1.0) * 255.0));
  }
  return px;
}

Heatmap render_heatmap(const Mixture2D& m, int height, int width) {
  const PixelFrame frame(width, height);
  Heatmap h{width, height, std::vector<double>(static_cast<std::size_t>(width) * height)};
  double peak = kLogDensityFloor;
  for (int v = 0; v < height; ++v) {
    for (int u = 0; u < width; ++u) {
      const double lp = log_pdf(m, pixel_to_ego({u + 0.5, v + 0.5}, frame));
      h.values[static_cast<std::size_t>(v) * width + u] = lp;
      peak = std::max(peak, lp);
    }
  }
  for (double& x : h.values) x = std::exp(x - peak);
  return h;
}

void write_heatmap_png(const Heatmap& h, const std::string& path) {
  write_png_gray(path, h.width, h.height, h.to_gray8());
}

}  // namespace cmdgoal
