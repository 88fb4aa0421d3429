#pragma once

#include <cstdint>

#include "cmdgoal/mixture.hpp"

namespace cmdgoal {

struct MixtureAuditReport {
  std::size_t components = 0;
  std::size_t targets = 0;
  bool cholesky = false;
  double rel_error = 0.0;  // ||analytic - numeric|| / ||numeric|| over every parameter
};

/// Random mixture (1..max_components, diagonal or Cholesky scales), 1..3
/// targets near it, and central differences of nll_loss with respect to every
/// mean, scale entry and log-weight.
MixtureAuditReport audit_mixture_gradient(std::uint64_t seed, std::size_t max_components = 8, double step = 1e-6);

/// Random mixture used by property checks: 1..max_components components,
/// means inside the map, scales in [0.3, 5] m, log-weights in [-3, 3].
Mixture2D random_mixture(Rng& rng, std::size_t max_components, bool cholesky);

}  // namespace cmdgoal
