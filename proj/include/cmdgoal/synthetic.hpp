#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "cmdgoal/mixture.hpp"
#include "cmdgoal/scene.hpp"

namespace cmdgoal {

/// Parameters of the procedural scene generator.
///
/// Each scene has a straight or curved road, the ego in its right lane and
/// 1..max_objects objects beside the road. One object is referred to; the
/// command names its class and the road side it stands on. Destinations are
/// drawn from a two-component isotropic Gaussian mixture:
///   mode A: referred center + (mode_a_forward_m, -side * mode_a_inward_m)
///   mode B: (mode_b_forward_m, side * mode_b_lateral_m), beside the ego
/// where side = +1 for the ego's left and -1 for its right.
struct SynthConfig {
  std::size_t num_records = 100;
  int min_objects = 1;
  int max_objects = 8;
  double sigma_m = 1.5;
  double mode_a_weight = 0.65;
  double mode_a_forward_m = 6.0;
  double mode_a_inward_m = 2.0;
  double mode_b_forward_m = 8.0;
  double mode_b_lateral_m = 3.5;
  double referred_min_x = 10.0;
  double referred_max_x = 70.0;
  double curved_fraction = 0.5;
  double max_curvature = 0.004;
  double min_road_width = 7.0;
  double max_road_width = 12.0;
  /// Probability of adding 1-2 objects with the referred class on the same side.
  double distractor_prob = 0.6;
  int min_destinations = 3;
  int max_destinations = 3;
  std::size_t feature_dim = kDefaultObjectFeatureDim;  // 0 disables object features
  double feature_noise = 0.5;
  std::string id_prefix = "syn";

  /// Throws InvalidArgument for empty or inverted ranges.
  void validate() const;
};

nlohmann::json to_json(const SynthConfig& c);
SynthConfig synth_config_from_json(const nlohmann::json& j);

/// The exact generating destination law for each record (same order as the split).
struct GeneratorTruth {
  std::vector<Mixture2D> mixtures;
};

struct SyntheticData {
  DatasetSplit split;
  GeneratorTruth truth;
};

SyntheticData gen_synthetic_dataset(const SynthConfig& cfg, std::uint64_t seed,
                                    SplitName name = SplitName::kTrain);

/// Unit-norm pseudo-random vector determined by `key` (FNV-1a hash seeding
/// a Box-Muller stream). Used for synthetic command and object features.
std::vector<float> hashed_unit_vector(const std::string& key, std::size_t dim);

/// Deterministic command encoding of (intent, referred class, side).
std::vector<float> encode_command(IntentLabel intent, ObjectClass referred, int side);

/// Typical footprint (length, width) of a detector class, meters.
std::pair<double, double> class_footprint(ObjectClass c) noexcept;

}  // namespace cmdgoal
