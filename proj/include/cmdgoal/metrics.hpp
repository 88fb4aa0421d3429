#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cmdgoal/geometry.hpp"
#include "cmdgoal/rng.hpp"
#include "cmdgoal/scene.hpp"

namespace cmdgoal {

/// Per-record statistics: mean nearest-GT distance of the samples and the
/// fraction of samples within each radius of k_list.
struct SampleStats {
  double avg_dist = 0.0;
  std::vector<double> within;
};

SampleStats per_sample_stats(std::span<const EgoPoint> samples, std::span<const EgoPoint> gts,
                             std::span<const double> k_list);

struct Aggregate {
  double ade = 0.0;
  double mde = 0.0;
  std::vector<double> pa;  // percent, one per k
  std::size_t n_records = 0;
};

Aggregate aggregate_metrics(std::span<const SampleStats> stats);

double median(std::vector<double> v);

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};

/// Percentile bootstrap over records.
Interval bootstrap_ci(std::span<const SampleStats> stats,
                      const std::function<double(std::span<const SampleStats>)>& statistic,
                      std::size_t resamples = 1000, double level = 0.95, std::uint64_t seed = 0);

/// One aggregate per intent category, in IntentLabel order; empty categories are nullopt.
std::array<std::optional<Aggregate>, kNumIntents> per_intent_breakdown(std::span<const SampleStats> stats,
                                                                        std::span<const IntentLabel> intents);

struct MethodRow {
  std::string method;
  std::size_t n_records = 0;
  double ade = 0.0;
  Interval ade_ci;
  double mde = 0.0;
  std::vector<double> pa;
  std::vector<Interval> pa_ci;
  std::vector<std::optional<Aggregate>> per_intent;  // empty or kNumIntents entries
  std::string note;
};

struct MetricsReport {
  std::vector<double> k_list{2.0, 4.0};
  std::size_t n_samples = 1000;
  std::uint64_t seed = 0;
  std::size_t bootstrap_resamples = 1000;
  std::vector<MethodRow> rows;
};

/// Draws `n` destination samples for one record.
using DestinationSampler =
    std::function<std::vector<EgoPoint>(const SceneRecord& rec, std::size_t n, Rng& rng)>;

struct EvalOptions {
  std::vector<double> k_list{2.0, 4.0};
  std::size_t n_samples = 1000;
  std::uint64_t seed = 0;
  std::size_t bootstrap_resamples = 1000;
  bool per_intent = true;
  int threads = 1;
};

/// Runs a sampler over every record (record i uses the stream Rng(seed).fork(i))
/// and summarizes it into one report row.
MethodRow evaluate_method(const std::string& method, std::span<const SceneRecord> records,
                          const DestinationSampler& sampler, const EvalOptions& opts,
                          std::vector<SampleStats>* per_record = nullptr);

}  // namespace cmdgoal
