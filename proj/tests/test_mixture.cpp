#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "cmdgoal/audit.hpp"
#include "cmdgoal/error.hpp"
#include "cmdgoal/mixture.hpp"
#include "test_util.hpp"

using namespace cmdgoal;

namespace {

// Direct density from the covariance matrix, no log-sum-exp.
double direct_pdf(const Mixture2D& m, EgoPoint y) {
  double zsum = 0.0;
  for (const auto& c : m.components()) zsum += std::exp(c.log_weight);
  double p = 0.0;
  for (const auto& c : m.components()) {
    double sxx, sxy, syy;
    if (const auto* d = std::get_if<DiagScale>(&c.scale)) {
      sxx = d->sx * d->sx;
      syy = d->sy * d->sy;
      sxy = 0.0;
    } else {
      const auto& l = std::get<CholScale>(c.scale);
      sxx = l.l11 * l.l11;
      sxy = l.l11 * l.l21;
      syy = l.l21 * l.l21 + l.l22 * l.l22;
    }
    const double det = sxx * syy - sxy * sxy;
    const double dx = y.x - c.mean.x, dy = y.y - c.mean.y;
    const double q = (syy * dx * dx - 2 * sxy * dx * dy + sxx * dy * dy) / det;
    p += std::exp(c.log_weight) / zsum * std::exp(-0.5 * q) / (2 * std::numbers::pi * std::sqrt(det));
  }
  return p;
}

std::vector<double> flatten(const Mixture2D& m) {
  std::vector<double> v;
  for (const auto& c : m.components()) {
    v.push_back(c.mean.x);
    v.push_back(c.mean.y);
    if (const auto* d = std::get_if<DiagScale>(&c.scale)) {
      v.push_back(d->sx);
      v.push_back(d->sy);
      v.push_back(0.0);
    } else {
      const auto& l = std::get<CholScale>(c.scale);
      v.push_back(l.l11);
      v.push_back(l.l21);
      v.push_back(l.l22);
    }
    v.push_back(c.log_weight);
  }
  return v;
}

Mixture2D unflatten(const Mixture2D& like, const std::vector<double>& v) {
  std::vector<GaussComponent> out;
  for (std::size_t i = 0; i < like.size(); ++i) {
    const double* p = v.data() + 6 * i;
    GaussComponent c;
    c.mean = {p[0], p[1]};
    if (std::holds_alternative<DiagScale>(like[i].scale)) {
      c.scale = DiagScale{p[2], p[3]};
    } else {
      c.scale = CholScale{p[2], p[3], p[4]};
    }
    c.log_weight = p[5];
    out.push_back(c);
  }
  return Mixture2D(out);
}

double fd_rel_error(const Mixture2D& m, const std::vector<EgoPoint>& targets, double h) {
  const auto g = nll_grad(m, targets);
  const auto base = flatten(m);
  double num = 0.0, den = 0.0;
  for (std::size_t k = 0; k < base.size(); ++k) {
    const bool diag = std::holds_alternative<DiagScale>(m[k / 6].scale);
    if (diag && k % 6 == 4) continue;
    auto plus = base, minus = base;
    plus[k] += h;
    minus[k] -= h;
    const double numeric = (nll_loss(unflatten(m, plus), targets) - nll_loss(unflatten(m, minus), targets)) / (2 * h);
    const auto& cg = g.components[k / 6];
    const double analytic = std::array<double, 6>{cg.d_mean_x, cg.d_mean_y, cg.d_scale[0], cg.d_scale[1],
                                                  cg.d_scale[2], cg.d_log_weight}[k % 6];
    num += (analytic - numeric) * (analytic - numeric);
    den += numeric * numeric;
  }
  return std::sqrt(num) / std::max(std::sqrt(den), 1e-12);
}

}  // namespace

TEST_SUITE("mixture") {
  TEST_CASE("log_pdf worked values") {
    const Mixture2D one({{{0, 0}, DiagScale{1, 1}, 0.0}});
    CHECK(log_pdf(one, {0, 0}) == doctest::Approx(-1.837877).epsilon(1e-6));
    const Mixture2D two({{{1, 0}, DiagScale{1, 1}, 0.0}, {{-1, 0}, DiagScale{1, 1}, 0.0}});
    CHECK(log_pdf(two, {0, 0}) == doctest::Approx(-2.337877).epsilon(1e-6));
    CHECK_THROWS_AS(log_pdf(one, {std::nan(""), 0}), InvalidArgument);
  }

  TEST_CASE("log_pdf matches a direct covariance evaluation") {
    Rng rng(1);
    for (int i = 0; i < 200; ++i) {
      const Mixture2D m = random_mixture(rng, 6, i % 2 == 1);
      for (int k = 0; k < 5; ++k) {
        const EgoPoint y{rng.uniform(-5, 90), rng.uniform(-35, 35)};
        const double p = direct_pdf(m, y);
        if (p > 1e-250) CHECK(std::exp(log_pdf(m, y)) == doctest::Approx(p).epsilon(1e-9));
      }
    }
  }

  TEST_CASE("far targets stay finite and the floor is only hit at zero density") {
    const Mixture2D m({{{0, 0}, DiagScale{0.01, 0.01}, 0.0}});
    const double lp = log_pdf(m, {100, 0});
    CHECK(std::isfinite(lp));
    CHECK(lp < -1e7);
    const Mixture2D z({{{0, 0}, DiagScale{1, 1}, -1e308}, {{1, 0}, DiagScale{1, 1}, -1e308}});
    CHECK(std::isfinite(log_pdf(z, {0, 0})));
  }

  TEST_CASE("log_pdf ignores a common log-weight shift") {
    Rng rng(2);
    for (int i = 0; i < 50; ++i) {
      const Mixture2D m = random_mixture(rng, 8, i % 2 == 0);
      auto comps = m.components();
      const double shift = rng.uniform(-50, 50);
      for (auto& c : comps) c.log_weight += shift;
      const Mixture2D s(comps);
      const EgoPoint y{rng.uniform(0, 80), rng.uniform(-30, 30)};
      CHECK(log_pdf(s, y) == doctest::Approx(log_pdf(m, y)).epsilon(1e-12));
    }
  }

  TEST_CASE("weights sum to one") {
    Rng rng(3);
    for (int i = 0; i < 100; ++i) {
      const auto w = random_mixture(rng, 64, i % 2 == 0).weights();
      double s = 0.0;
      for (double x : w) s += x;
      CHECK(std::abs(s - 1.0) < 1e-9);
    }
  }

  TEST_CASE("construction rejects invalid components") {
    CHECK_THROWS_AS(Mixture2D({}), InvalidArgument);
    CHECK_THROWS_AS(Mixture2D({{{0, 0}, DiagScale{0, 1}, 0}}), InvalidArgument);
    CHECK_THROWS_AS(Mixture2D({{{0, 0}, CholScale{1, 0, -1}, 0}}), InvalidArgument);
    CHECK_THROWS_AS(Mixture2D({{{std::nan(""), 0}, DiagScale{1, 1}, 0}}), InvalidArgument);
  }

  TEST_CASE("quadrature over the 8 sigma box integrates to one") {
    Rng rng(4);
    for (int i = 0; i < 20; ++i) {
      const Mixture2D m = random_mixture(rng, 16, i % 2 == 1);
      double x0 = 1e9, x1 = -1e9, y0 = 1e9, y1 = -1e9, smin = 1e9;
      for (const auto& c : m.components()) {
        const auto s = axis_stddev(c.scale);
        x0 = std::min(x0, c.mean.x - 8 * s[0]);
        x1 = std::max(x1, c.mean.x + 8 * s[0]);
        y0 = std::min(y0, c.mean.y - 8 * s[1]);
        y1 = std::max(y1, c.mean.y + 8 * s[1]);
        smin = std::min({smin, s[0], s[1]});
      }
      const double h = smin / 4;
      double acc = 0.0;
      for (double x = x0 + h / 2; x < x1; x += h) {
        for (double y = y0 + h / 2; y < y1; y += h) acc += direct_pdf(m, {x, y});
      }
      CHECK(std::abs(acc * h * h - 1.0) < 1e-3);
    }
  }

  TEST_CASE("nll_loss worked values") {
    const Mixture2D one({{{3, 4}, DiagScale{1, 1}, 0.0}});
    const std::vector<EgoPoint> t1{{3, 4}};
    CHECK(nll_loss(one, t1) == doctest::Approx(1.837877).epsilon(1e-6));
    const std::vector<EgoPoint> t2{{5, 4}, {5, 4}};
    const std::vector<EgoPoint> t3{{5, 4}};
    CHECK(nll_loss(one, t2) == doctest::Approx(nll_loss(one, t3)).epsilon(1e-14));
    CHECK_THROWS_AS(nll_loss(one, std::vector<EgoPoint>{}), InvalidArgument);
  }

  TEST_CASE("nll_loss matches a Monte-Carlo cross-entropy") {
    Rng rng(5);
    const Mixture2D gen({{{20, 5}, DiagScale{1.5, 1.5}, std::log(0.6)}, {{8, -3}, DiagScale{1.5, 1.5}, std::log(0.4)}});
    const Mixture2D model({{{21, 5}, DiagScale{2, 1.5}, std::log(0.5)}, {{8, -2}, DiagScale{1.5, 2}, std::log(0.5)}});
    const auto pts = sample(gen, 10000, rng);
    double mc = 0.0;
    for (const auto& p : pts) mc -= std::log(direct_pdf(model, p));
    mc /= pts.size();
    CHECK(nll_loss(model, pts) == doctest::Approx(mc).epsilon(0.01));
  }

  TEST_CASE("gradient matches central differences") {
    Rng rng(6);
    for (int i = 0; i < 100; ++i) {
      const Mixture2D m = random_mixture(rng, 8, i % 2 == 1);
      std::vector<EgoPoint> targets;
      const int n = 1 + static_cast<int>(rng.below(3));
      for (int k = 0; k < n; ++k) {
        const auto& c = m[rng.below(m.size())];
        targets.push_back({c.mean.x + rng.normal(0, 2), c.mean.y + rng.normal(0, 2)});
      }
      CHECK(fd_rel_error(m, targets, 1e-5) < 1e-4);
    }
  }

  TEST_CASE("gradient identities") {
    const Mixture2D one({{{3, 4}, DiagScale{1.3, 0.7}, 0.0}});
    const auto g = nll_grad(one, std::vector<EgoPoint>{{3, 4}});
    CHECK(std::abs(g.components[0].d_mean_x) < 1e-15);
    CHECK(std::abs(g.components[0].d_mean_y) < 1e-15);
    Rng rng(7);
    for (int i = 0; i < 50; ++i) {
      const Mixture2D m = random_mixture(rng, 10, i % 2 == 0);
      const auto gg = nll_grad(m, std::vector<EgoPoint>{{40, 0}, {10, 5}});
      double s = 0.0;
      for (const auto& c : gg.components) s += c.d_log_weight;
      CHECK(std::abs(s) < 1e-12);
    }
  }

  TEST_CASE("library audit agrees") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) CHECK(audit_mixture_gradient(seed).rel_error < 1e-4);
  }

  TEST_CASE("sampling") {
    const Mixture2D tight({{{12, -3}, DiagScale{1e-6, 1e-6}, 0.0}});
    Rng rng(8);
    for (const auto& p : sample(tight, 100, rng)) {
      CHECK(std::abs(p.x - 12) < 1e-4);
      CHECK(std::abs(p.y + 3) < 1e-4);
    }
    CHECK_THROWS_AS(sample(tight, 0, rng), InvalidArgument);
    CHECK(sample(tight, 5, std::uint64_t{3}) == sample(tight, 5, std::uint64_t{3}));

    const Mixture2D m({{{0, 0}, CholScale{2, 1, 1}, std::log(0.2)},
                       {{30, 10}, DiagScale{1, 3}, std::log(0.5)},
                       {{60, -20}, DiagScale{2, 2}, std::log(0.3)}});
    const std::size_t n = 100000;
    const auto pts = sample(m, n, rng);
    double mx = 0.0, my = 0.0;
    for (const auto& p : pts) {
      mx += p.x;
      my += p.y;
    }
    mx /= n;
    my /= n;
    const auto w = m.weights();
    double ex = 0.0, ey = 0.0, ex2 = 0.0, ey2 = 0.0;
    for (std::size_t i = 0; i < m.size(); ++i) {
      const auto s = axis_stddev(m[i].scale);
      ex += w[i] * m[i].mean.x;
      ey += w[i] * m[i].mean.y;
      ex2 += w[i] * (m[i].mean.x * m[i].mean.x + s[0] * s[0]);
      ey2 += w[i] * (m[i].mean.y * m[i].mean.y + s[1] * s[1]);
    }
    CHECK(std::abs(mx - ex) < 3 * std::sqrt((ex2 - ex * ex) / n));
    CHECK(std::abs(my - ey) < 3 * std::sqrt((ey2 - ey * ey) / n));

    // Component hits, assigned by nearest mean (modes are far apart).
    std::array<double, 3> hits{};
    for (const auto& p : pts) {
      std::size_t best = 0;
      double bd = 1e300;
      for (std::size_t i = 0; i < 3; ++i) {
        const double d = std::hypot(p.x - m[i].mean.x, p.y - m[i].mean.y);
        if (d < bd) {
          bd = d;
          best = i;
        }
      }
      hits[best] += 1;
    }
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(std::abs(hits[i] / n - w[i]) < 3 * std::sqrt(w[i] * (1 - w[i]) / n) + 1e-3);
    }
  }

  TEST_CASE("top-k worked values") {
    const Mixture2D m({{{0, 0}, DiagScale{1, 1}, std::log(0.5)},
                       {{1, 0}, DiagScale{1, 1}, std::log(0.3)},
                       {{2, 0}, DiagScale{1, 1}, std::log(0.2)}});
    const auto t = top_k_truncate(m, 2);
    const auto w = t.weights();
    REQUIRE(w.size() == 2);
    CHECK(w[0] == doctest::Approx(0.625));
    CHECK(w[1] == doctest::Approx(0.375));
    CHECK(t[1].mean.x == 1.0);
    CHECK_THROWS_AS(top_k_truncate(m, 0), InvalidArgument);
    CHECK_THROWS_AS(top_k_truncate(m, 4), InvalidArgument);

    const Mixture2D ties({{{0, 0}, DiagScale{1, 1}, 0.0}, {{1, 0}, DiagScale{1, 1}, 0.0}, {{2, 0}, DiagScale{1, 1}, 0.0}});
    const auto tt = top_k_truncate(ties, 2);
    CHECK(tt[0].mean.x == 0.0);
    CHECK(tt[1].mean.x == 1.0);
  }

  TEST_CASE("top-k keeps exactly the largest weights") {
    Rng rng(9);
    for (int i = 0; i < 200; ++i) {
      const Mixture2D m = random_mixture(rng, 40, i % 2 == 0);
      const std::size_t k = 1 + rng.below(m.size());
      const auto t = top_k_truncate(m, k);
      const auto w = t.weights();
      double s = 0.0;
      for (double x : w) s += x;
      CHECK(std::abs(s - 1.0) < 1e-9);
      const auto mw = m.weights();
      std::vector<std::size_t> order(m.size());
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return mw[a] > mw[b]; });
      std::vector<std::size_t> expect(order.begin(), order.begin() + k);
      std::sort(expect.begin(), expect.end());
      REQUIRE(t.size() == k);
      for (std::size_t j = 0; j < k; ++j) CHECK(t[j].mean == m[expect[j]].mean);
      if (k == m.size()) {
        for (std::size_t j = 0; j < m.size(); ++j) {
          CHECK(t[j].mean == m[j].mean);
          CHECK(t[j].log_weight == m[j].log_weight);
        }
      }
    }
  }

  TEST_CASE("top-k leaves the grid argmax when the dropped mass is tiny") {
    std::vector<GaussComponent> comps{{{30, 5}, DiagScale{2, 2}, 0.0}, {{60, -10}, DiagScale{3, 3}, -0.5}};
    for (int i = 0; i < 30; ++i) comps.push_back({{5.0 + 3 * i, 20.0}, DiagScale{2, 2}, -20.0});
    const Mixture2D m(comps);
    const auto t = top_k_truncate(m, 2);
    auto grid_argmax = [](const Mixture2D& mm) {
      double best = -1e300;
      int arg = -1;
      for (int i = 0; i < 50; ++i) {
        for (int j = 0; j < 50; ++j) {
          const double v = log_pdf(mm, {-7 + 120.0 * (i + 0.5) / 50, -40 + 80.0 * (j + 0.5) / 50});
          if (v > best) {
            best = v;
            arg = i * 50 + j;
          }
        }
      }
      return arg;
    };
    CHECK(grid_argmax(t) == grid_argmax(m));
  }

  TEST_CASE("heatmaps") {
    const Mixture2D one({{{40, 10}, DiagScale{0.5, 0.5}, 0.0}});
    const Heatmap h = render_heatmap(one, 96, 144);
    const auto q = ego_to_pixel({40, 10}, PixelFrame(144, 96));
    const std::size_t am = h.argmax();
    CHECK(static_cast<int>(am % 144) == static_cast<int>(q.u));
    CHECK(static_cast<int>(am / 144) == static_cast<int>(q.v));
    CHECK(*std::max_element(h.values.begin(), h.values.end()) == doctest::Approx(1.0));

    // Two equal blobs centered on pixel centers of a 144x96 grid (s = 1.2 px/m).
    const PixelFrame f(144, 96);
    const EgoPoint a = pixel_to_ego({30.5, 20.5}, f), b = pixel_to_ego({100.5, 70.5}, f);
    const Mixture2D two({{a, DiagScale{2, 2}, 0.0}, {b, DiagScale{2, 2}, 0.0}});
    const Heatmap h2 = render_heatmap(two, 96, 144);
    CHECK(h2.values[20 * 144 + 30] == doctest::Approx(h2.values[70 * 144 + 100]).epsilon(1e-12));
    CHECK(h2.values[20 * 144 + 30] == doctest::Approx(1.0));

    testing::TempDir dir;
    CHECK_NOTHROW(write_heatmap_png(h2, dir / "h.png"));
    const auto g = h2.to_gray8();
    CHECK(g.size() == 96u * 144u);
    CHECK(*std::max_element(g.begin(), g.end()) == 255);
  }

  TEST_CASE("heatmap argmax is the densest pixel center") {
    Rng rng(10);
    for (int i = 0; i < 10; ++i) {
      const Mixture2D m = random_mixture(rng, 6, i % 2 == 0);
      const Heatmap h = render_heatmap(m, 48, 72);
      const PixelFrame f(72, 48);
      double best = -1e300;
      std::size_t arg = 0;
      for (int v = 0; v < 48; ++v) {
        for (int u = 0; u < 72; ++u) {
          const double p = direct_pdf(m, pixel_to_ego({u + 0.5, v + 0.5}, f));
          if (p > best) {
            best = p;
            arg = static_cast<std::size_t>(v) * 72 + u;
          }
        }
      }
      CHECK(h.argmax() == arg);
    }
  }
}
