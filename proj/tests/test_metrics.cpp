#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cmdgoal/error.hpp"
#include "cmdgoal/metrics.hpp"
#include "cmdgoal/mixture.hpp"

using namespace cmdgoal;

namespace {

struct BruteStats {
  double avg;
  std::vector<double> within;
};

BruteStats brute(const std::vector<EgoPoint>& samples, const std::vector<EgoPoint>& gts, const std::vector<double>& ks) {
  BruteStats b{0.0, std::vector<double>(ks.size(), 0.0)};
  for (const auto& s : samples) {
    double d = std::numeric_limits<double>::infinity();
    for (const auto& g : gts) d = std::min(d, std::sqrt((s.x - g.x) * (s.x - g.x) + (s.y - g.y) * (s.y - g.y)));
    b.avg += d;
    for (std::size_t k = 0; k < ks.size(); ++k) b.within[k] += d <= ks[k] ? 1.0 : 0.0;
  }
  b.avg /= samples.size();
  for (auto& w : b.within) w /= samples.size();
  return b;
}

std::vector<SampleStats> random_stats(Rng& rng, std::size_t n) {
  std::vector<SampleStats> out(n);
  for (auto& s : out) {
    s.avg_dist = std::abs(rng.normal(10, 4));
    const double a = rng.uniform(), b = rng.uniform();
    s.within = {std::min(a, b), std::max(a, b)};
  }
  return out;
}

SceneRecord record_with(std::vector<EgoPoint> gts, IntentLabel intent) {
  SceneRecord r;
  r.id = "r";
  r.destinations = std::move(gts);
  r.intent = intent;
  return r;
}

}  // namespace

TEST_SUITE("metrics") {
  TEST_CASE("3-4-5 example") {
    const std::vector<EgoPoint> s{{3, 4}, {0, 0}};
    const std::vector<EgoPoint> g{{0, 0}};
    const std::vector<double> ks{2, 4};
    const auto st = per_sample_stats(s, g, ks);
    CHECK(st.avg_dist == 2.5);
    CHECK(st.within[0] == 0.5);
    CHECK(st.within[1] == 0.5);
    const auto agg = aggregate_metrics(std::vector<SampleStats>{st});
    CHECK(agg.pa[0] == 50.0);
  }

  TEST_CASE("samples on a ground truth") {
    const std::vector<EgoPoint> s{{3, 4}, {3, 4}, {10, 1}};
    const std::vector<EgoPoint> g{{10, 1}, {3, 4}};
    const std::vector<double> ks{0.5, 2};
    const auto st = per_sample_stats(s, g, ks);
    CHECK(st.avg_dist == 0.0);
    CHECK(st.within == std::vector<double>{1.0, 1.0});
    CHECK_THROWS_AS(per_sample_stats({}, g, ks), InvalidArgument);
    CHECK_THROWS_AS(per_sample_stats(s, {}, ks), InvalidArgument);
  }

  TEST_CASE("brute force agreement on random cases") {
    Rng rng(1);
    const std::vector<double> ks{2, 4, 7.5};
    for (int c = 0; c < 1000; ++c) {
      std::vector<EgoPoint> s(1 + rng.below(50)), g(1 + rng.below(3));
      for (auto& p : s) p = {rng.uniform(-7, 113), rng.uniform(-40, 40)};
      for (auto& p : g) p = {rng.uniform(-7, 113), rng.uniform(-40, 40)};
      if (c % 3 == 0) s[0] = g[0];
      if (c % 5 == 0) s.back() = {g[0].x + 2.0, g[0].y};
      const auto st = per_sample_stats(s, g, ks);
      const auto b = brute(s, g, ks);
      CHECK(st.avg_dist == doctest::Approx(b.avg).epsilon(1e-12));
      CHECK(st.within == b.within);
    }
  }

  TEST_CASE("aggregate worked values") {
    std::vector<SampleStats> st;
    for (double v : {4.0, 1.0, 3.0, 2.0}) st.push_back({v, {0.25, 0.5}});
    const auto a = aggregate_metrics(st);
    CHECK(a.ade == 2.5);
    CHECK(a.mde == 2.5);
    CHECK(a.pa == std::vector<double>{25.0, 50.0});
    CHECK(a.n_records == 4);
    std::vector<SampleStats> same(5, SampleStats{3.25, {0.1, 0.2}});
    const auto b = aggregate_metrics(same);
    CHECK(b.ade == doctest::Approx(3.25));
    CHECK(b.mde == 3.25);
    CHECK_THROWS_AS(aggregate_metrics(std::vector<SampleStats>{}), InvalidArgument);
    CHECK(median({5, 1, 3}) == 3.0);
  }

  TEST_CASE("aggregate agrees with brute force") {
    Rng rng(2);
    for (int c = 0; c < 1000; ++c) {
      const auto st = random_stats(rng, 1 + rng.below(40));
      std::vector<double> avgs;
      double sum = 0.0, w0 = 0.0, w1 = 0.0;
      for (const auto& s : st) {
        avgs.push_back(s.avg_dist);
        sum += s.avg_dist;
        w0 += s.within[0];
        w1 += s.within[1];
      }
      std::sort(avgs.begin(), avgs.end());
      const std::size_t n = avgs.size();
      const double med = n % 2 ? avgs[n / 2] : 0.5 * (avgs[n / 2 - 1] + avgs[n / 2]);
      const auto a = aggregate_metrics(st);
      CHECK(a.ade == doctest::Approx(sum / n).epsilon(1e-12));
      CHECK(a.mde == med);
      CHECK(a.pa[0] == doctest::Approx(100 * w0 / n).epsilon(1e-12));
      CHECK(a.pa[1] == doctest::Approx(100 * w1 / n).epsilon(1e-12));
      CHECK(a.ade >= 0.0);
      CHECK(a.mde <= avgs.back());
      CHECK(a.pa[0] <= a.pa[1]);
    }
  }

  TEST_CASE("permutation invariance") {
    Rng rng(3);
    std::vector<EgoPoint> s(40);
    for (auto& p : s) p = {rng.uniform(0, 50), rng.uniform(-10, 10)};
    const std::vector<EgoPoint> g{{10, 0}, {30, 5}};
    const std::vector<double> ks{2, 4};
    const auto a = per_sample_stats(s, g, ks);
    std::reverse(s.begin(), s.end());
    const auto b = per_sample_stats(s, g, ks);
    CHECK(a.avg_dist == doctest::Approx(b.avg_dist).epsilon(1e-14));
    CHECK(a.within == b.within);

    auto st = random_stats(rng, 31);
    const auto x = aggregate_metrics(st);
    std::rotate(st.begin(), st.begin() + 7, st.end());
    const auto y = aggregate_metrics(st);
    CHECK(x.ade == doctest::Approx(y.ade).epsilon(1e-14));
    CHECK(x.mde == y.mde);
  }

  TEST_CASE("bootstrap intervals") {
    std::vector<SampleStats> constant(20, SampleStats{4.0, {0.5, 1.0}});
    auto ade = [](std::span<const SampleStats> s) { return aggregate_metrics(s).ade; };
    const auto ci = bootstrap_ci(constant, ade, 200);
    CHECK(ci.lo == doctest::Approx(4.0));
    CHECK(ci.hi == doctest::Approx(4.0));
    CHECK_THROWS_AS(bootstrap_ci(std::vector<SampleStats>(1, constant[0]), ade), InvalidArgument);

    Rng rng(4);
    const auto st = random_stats(rng, 50);
    const auto a = bootstrap_ci(st, ade, 300, 0.95, 9);
    const auto b = bootstrap_ci(st, ade, 300, 0.95, 9);
    CHECK(a.lo == b.lo);
    CHECK(a.hi == b.hi);

    int contains = 0;
    for (int d = 0; d < 100; ++d) {
      const auto s = random_stats(rng, 30);
      const auto c = bootstrap_ci(s, ade, 300, 0.95, d);
      const double est = ade(s);
      contains += c.lo <= est && est <= c.hi;
    }
    CHECK(contains == 100);
  }

  TEST_CASE("bootstrap width shrinks with the square root of n") {
    Rng rng(5);
    auto ade = [](std::span<const SampleStats> s) { return aggregate_metrics(s).ade; };
    auto gaussian = [&](std::size_t n) {
      std::vector<SampleStats> v(n);
      for (auto& s : v) s = {rng.normal(20, 5), {0.0}};
      return v;
    };
    double ratio = 0.0;
    const int reps = 10;
    for (int r = 0; r < reps; ++r) {
      const auto small = bootstrap_ci(gaussian(100), ade, 1000, 0.95, r);
      const auto big = bootstrap_ci(gaussian(400), ade, 1000, 0.95, r);
      ratio += (big.hi - big.lo) / (small.hi - small.lo);
    }
    ratio /= reps;
    CHECK(ratio == doctest::Approx(0.5).epsilon(0.3));
  }

  TEST_CASE("per-intent breakdown") {
    Rng rng(6);
    const auto st = random_stats(rng, 60);
    std::vector<IntentLabel> one(60, IntentLabel::kPark);
    const auto b1 = per_intent_breakdown(st, one);
    CHECK(b1.size() == 18);
    const auto global = aggregate_metrics(st);
    REQUIRE(b1[static_cast<int>(IntentLabel::kPark)].has_value());
    CHECK(b1[static_cast<int>(IntentLabel::kPark)]->ade == doctest::Approx(global.ade).epsilon(1e-12));
    CHECK_FALSE(b1[0].has_value());

    std::vector<IntentLabel> mixed(60);
    for (auto& i : mixed) i = static_cast<IntentLabel>(rng.below(kNumIntents));
    const auto b2 = per_intent_breakdown(st, mixed);
    double weighted = 0.0;
    std::size_t total = 0;
    for (const auto& a : b2) {
      if (!a) continue;
      weighted += a->ade * a->n_records;
      total += a->n_records;
    }
    CHECK(total == 60);
    CHECK(std::abs(weighted / 60 - global.ade) < 1e-9);
    CHECK_THROWS_AS(per_intent_breakdown(st, std::span<const IntentLabel>(mixed).first(59)), InvalidArgument);
  }

  TEST_CASE("single-point predictor reduces to mean nearest distance") {
    Rng rng(7);
    std::vector<SceneRecord> recs;
    for (int i = 0; i < 25; ++i) {
      recs.push_back(record_with({{rng.uniform(0, 60), rng.uniform(-20, 20)}, {rng.uniform(0, 60), 0}},
                                 IntentLabel::kStop));
    }
    DestinationSampler point = [](const SceneRecord&, std::size_t n, Rng&) {
      return std::vector<EgoPoint>(n, EgoPoint{10, 0});
    };
    EvalOptions eo;
    eo.n_samples = 7;
    eo.bootstrap_resamples = 50;
    const auto row = evaluate_method("point", recs, point, eo);
    double expect = 0.0;
    for (const auto& r : recs) {
      expect += std::min(std::hypot(r.destinations[0].x - 10, r.destinations[0].y),
                         std::hypot(r.destinations[1].x - 10, r.destinations[1].y));
    }
    CHECK(row.ade == doctest::Approx(expect / 25).epsilon(1e-12));
    CHECK(row.per_intent.size() == 18);
    CHECK(row.ade_ci.lo <= row.ade);
    CHECK(row.ade <= row.ade_ci.hi);
  }

  TEST_CASE("evaluation is deterministic and thread independent") {
    Rng rng(8);
    std::vector<SceneRecord> recs;
    for (int i = 0; i < 30; ++i) recs.push_back(record_with({{rng.uniform(0, 60), rng.uniform(-20, 20)}}, IntentLabel::kWait));
    const Mixture2D m({{{20, 0}, DiagScale{3, 3}, 0.0}, {{40, 5}, DiagScale{2, 2}, 0.0}});
    DestinationSampler s = [&](const SceneRecord&, std::size_t n, Rng& r) { return sample(m, n, r); };
    EvalOptions eo;
    eo.n_samples = 200;
    eo.bootstrap_resamples = 100;
    eo.seed = 5;
    const auto a = evaluate_method("m", recs, s, eo);
    eo.threads = 3;
    const auto b = evaluate_method("m", recs, s, eo);
    CHECK(a.ade == b.ade);
    CHECK(a.mde == b.mde);
    CHECK(a.pa == b.pa);
    CHECK(a.ade_ci.lo == b.ade_ci.lo);
    CHECK_THROWS_AS(evaluate_method("m", std::vector<SceneRecord>{}, s, eo), InvalidArgument);
  }
}
