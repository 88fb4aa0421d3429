#include "cmdgoal/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "cmdgoal/error.hpp"
#include "cmdgoal/parallel.hpp"

namespace cmdgoal {

SampleStats per_sample_stats(std::span<const EgoPoint> samples, std::span<const EgoPoint> gts,
                             std::span<const double> k_list) {
  if (samples.empty()) throw InvalidArgument("per_sample_stats needs at least one sample");
  if (gts.empty()) throw InvalidArgument("per_sample_stats needs at least one ground truth");
  SampleStats s;
  s.within.assign(k_list.size(), 0.0);
  std::vector<std::size_t> hits(k_list.size(), 0);
  double sum = 0.0;
  for (const auto& p : samples) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& g : gts) best = std::min(best, std::hypot(p.x - g.x, p.y - g.y));
    sum += best;
    for (std::size_t k = 0; k < k_list.size(); ++k) {
      if (best <= k_list[k]) ++hits[k];
    }
  }
  const double n = static_cast<double>(samples.size());
  s.avg_dist = sum / n;
  for (std::size_t k = 0; k < k_list.size(); ++k) s.within[k] = hits[k] / n;
  return s;
}

double median(std::vector<double> v) {
  if (v.empty()) throw InvalidArgument("median of empty set");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

Aggregate aggregate_metrics(std::span<const SampleStats> stats) {
  if (stats.empty()) throw InvalidArgument("aggregate_metrics needs at least one record");
  Aggregate a;
  a.n_records = stats.size();
  const std::size_t nk = stats.front().within.size();
  a.pa.assign(nk, 0.0);
  std::vector<double> avgs;
  avgs.reserve(stats.size());
  double sum = 0.0;
  for (const auto& s : stats) {
    if (s.within.size() != nk) throw InvalidArgument("inconsistent k_list across records");
    sum += s.avg_dist;
    avgs.push_back(s.avg_dist);
    for (std::size_t k = 0; k < nk; ++k) a.pa[k] += s.within[k];
  }
  const double n = static_cast<double>(stats.size());
  a.ade = sum / n;
  a.mde = median(std::move(avgs));
  for (auto& p : a.pa) p = 100.0 * p / n;
  return a;
}

Interval bootstrap_ci(std::span<const SampleStats> stats,
                      const std::function<double(std::span<const SampleStats>)>& statistic,
                      std::size_t resamples, double level, std::uint64_t seed) {
  if (stats.size() < 2) throw InvalidArgument("bootstrap needs at least 2 records");
  if (resamples == 0) throw InvalidArgument("bootstrap needs at least one resample");
  if (!(level > 0.0 && level < 1.0)) throw InvalidArgument("confidence level must lie in (0, 1)");
  Rng rng(seed);
  std::vector<SampleStats> draw(stats.size());
  std::vector<double> values(resamples);
  for (std::size_t r = 0; r < resamples; ++r) {
    for (auto& d : draw) d = stats[rng.below(stats.size())];
    values[r] = statistic(draw);
  }
  std::sort(values.begin(), values.end());
  // Linear interpolation between order statistics.
  auto quantile = [&](double q) {
    const double pos = q * (values.size() - 1);
    const auto i = static_cast<std::size_t>(std::floor(pos));
    const std::size_t j = std::min(i + 1, values.size() - 1);
    return values[i] + (pos - i) * (values[j] - values[i]);
  };
  const double alpha = 0.5 * (1.0 - level);
  return {quantile(alpha), quantile(1.0 - alpha)};
}

std::array<std::optional<Aggregate>, kNumIntents> per_intent_breakdown(std::span<const SampleStats> stats,
                                                                        std::span<const IntentLabel> intents) {
  if (stats.size() != intents.size()) throw InvalidArgument("every record needs an intent label");
  std::array<std::vector<SampleStats>, kNumIntents> groups;
  for (std::size_t i = 0; i < stats.size(); ++i) {
    const int idx = static_cast<int>(intents[i]);
    if (idx < 0 || idx >= kNumIntents) throw InvalidArgument("record without a valid intent label");
    groups[idx].push_back(stats[i]);
  }
  std::array<std::optional<Aggregate>, kNumIntents> out;
  for (int i = 0; i < kNumIntents; ++i) {
    if (!groups[i].empty()) out[i] = aggregate_metrics(groups[i]);
  }
  return out;
}

MethodRow evaluate_method(const std::string& method, std::span<const SceneRecord> records,
                          const DestinationSampler& sampler, const EvalOptions& opts,
                          std::vector<SampleStats>* per_record) {
  if (records.empty()) throw InvalidArgument("evaluation needs at least one record");
  std::vector<SampleStats> stats(records.size());
  parallel_for(records.size(), opts.threads, [&](std::size_t i) {
    Rng rng = Rng(opts.seed).fork(i);
    const auto samples = sampler(records[i], opts.n_samples, rng);
    stats[i] = per_sample_stats(samples, records[i].destinations, opts.k_list);
  });
  const Aggregate agg = aggregate_metrics(stats);
  MethodRow row;
  row.method = method;
  row.n_records = records.size();
  row.ade = agg.ade;
  row.mde = agg.mde;
  row.pa = agg.pa;
  if (records.size() >= 2 && opts.bootstrap_resamples > 0) {
    row.ade_ci = bootstrap_ci(stats, [](auto s) { return aggregate_metrics(s).ade; },
                              opts.bootstrap_resamples, 0.95, opts.seed);
    for (std::size_t k = 0; k < opts.k_list.size(); ++k) {
      row.pa_ci.push_back(bootstrap_ci(stats, [k](auto s) { return aggregate_metrics(s).pa[k]; },
                                       opts.bootstrap_resamples, 0.95, opts.seed));
    }
  } else {
    row.ade_ci = {row.ade, row.ade};
    for (double p : row.pa) row.pa_ci.push_back({p, p});
  }
  if (opts.per_intent) {
    std::vector<IntentLabel> intents;
    intents.reserve(records.size());
    for (const auto& r : records) intents.push_back(r.intent);
    const auto table = per_intent_breakdown(stats, intents);
    row.per_intent.assign(table.begin(), table.end());
  }
  if (per_record) *per_record = std::move(stats);
  return row;
}

}  // namespace cmdgoal
