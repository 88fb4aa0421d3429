#include "cmdgoal/audit.hpp"

#include <cmath>

namespace cmdgoal {

Mixture2D random_mixture(Rng& rng, std::size_t max_components, bool cholesky) {
  const std::size_t n = 1 + rng.below(max_components);
  std::vector<GaussComponent> comps;
  for (std::size_t i = 0; i < n; ++i) {
    GaussComponent c;
    c.mean = {rng.uniform(0.0, 80.0), rng.uniform(-30.0, 30.0)};
    if (cholesky) {
      c.scale = CholScale{rng.uniform(0.3, 5.0), rng.uniform(-2.0, 2.0), rng.uniform(0.3, 5.0)};
    } else {
      c.scale = DiagScale{rng.uniform(0.3, 5.0), rng.uniform(0.3, 5.0)};
    }
    c.log_weight = rng.uniform(-3.0, 3.0);
    comps.push_back(c);
  }
  return Mixture2D(std::move(comps));
}

namespace {

// Flat view: per component (mx, my, s0, s1, s2, log_weight); s2 unused for diagonal scales.
std::vector<double> flatten(const Mixture2D& m) {
  std::vector<double> v;
  for (const auto& c : m.components()) {
    v.push_back(c.mean.x);
    v.push_back(c.mean.y);
    if (const auto* d = std::get_if<DiagScale>(&c.scale)) {
      v.insert(v.end(), {d->sx, d->sy, 0.0});
    } else {
      const auto& l = std::get<CholScale>(c.scale);
      v.insert(v.end(), {l.l11, l.l21, l.l22});
    }
    v.push_back(c.log_weight);
  }
  return v;
}

Mixture2D unflatten(const std::vector<double>& v, bool cholesky) {
  std::vector<GaussComponent> comps;
  for (std::size_t i = 0; i + 5 < v.size(); i += 6) {
    GaussComponent c;
    c.mean = {v[i], v[i + 1]};
    c.scale = cholesky ? ComponentScale{CholScale{v[i + 2], v[i + 3], v[i + 4]}} : ComponentScale{DiagScale{v[i + 2], v[i + 3]}};
    c.log_weight = v[i + 5];
    comps.push_back(c);
  }
  return Mixture2D(std::move(comps));
}

}  // namespace

MixtureAuditReport audit_mixture_gradient(std::uint64_t seed, std::size_t max_components, double step) {
  Rng rng(seed);
  MixtureAuditReport rep;
  rep.cholesky = rng.bernoulli(0.5);
  const Mixture2D m = random_mixture(rng, max_components, rep.cholesky);
  rep.components = m.size();
  std::vector<EgoPoint> targets;
  const std::size_t nt = 1 + rng.below(3);
  for (std::size_t i = 0; i < nt; ++i) {
    // Near a random component so the density is not negligible everywhere.
    const auto& c = m[rng.below(m.size())];
    targets.push_back({c.mean.x + rng.normal(0.0, 3.0), c.mean.y + rng.normal(0.0, 3.0)});
  }
  rep.targets = nt;
  const MixtureGrad g = nll_grad(m, targets);
  std::vector<double> v = flatten(m);
  double diff_sq = 0.0;
  double ref_sq = 0.0;
  for (std::size_t j = 0; j < v.size(); ++j) {
    if (!rep.cholesky && j % 6 == 4) continue;
    const double orig = v[j];
    v[j] = orig + step;
    const double lp = nll_loss(unflatten(v, rep.cholesky), targets);
    v[j] = orig - step;
    const double lm = nll_loss(unflatten(v, rep.cholesky), targets);
    v[j] = orig;
    const double numeric = (lp - lm) / (2.0 * step);
    const auto& cg = g.components[j / 6];
    double analytic = 0.0;
    switch (j % 6) {
      case 0: analytic = cg.d_mean_x; break;
      case 1: analytic = cg.d_mean_y; break;
      case 2: analytic = cg.d_scale[0]; break;
      case 3: analytic = cg.d_scale[1]; break;
      case 4: analytic = cg.d_scale[2]; break;
      default: analytic = cg.d_log_weight; break;
    }
    diff_sq += (analytic - numeric) * (analytic - numeric);
    ref_sq += numeric * numeric;
  }
  rep.rel_error = std::sqrt(diff_sq) / std::max(std::sqrt(ref_sq), 1e-300);
  return rep;
}

}  // namespace cmdgoal
