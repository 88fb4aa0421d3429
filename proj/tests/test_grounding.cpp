#include <doctest.h>

#include <cmath>

#include "cmdgoal/error.hpp"
#include "cmdgoal/geometry.hpp"
#include "cmdgoal/grounding.hpp"
#include "cmdgoal/synthetic.hpp"
#include "test_util.hpp"

using namespace cmdgoal;

namespace {

constexpr std::size_t kDim = 16;

GroundingConfig small_config() {
  GroundingConfig c;
  c.feature_dim = kDim;
  c.hidden = 32;
  c.embed = 24;
  return c;
}

SyntheticData records(std::size_t n, std::uint64_t seed) {
  SynthConfig c;
  c.num_records = n;
  c.feature_dim = kDim;
  return gen_synthetic_dataset(c, seed);
}

SceneObject proposal(AlignedBox2D b) {
  SceneObject o;
  o.frontal_box = b;
  o.features.assign(kDim, 0.0f);
  return o;
}

}  // namespace

TEST_SUITE("grounding") {
  TEST_CASE("scores are a distribution over proposals") {
    const GroundingModel m(small_config());
    const auto p = m.init_params(1);
    const auto d = records(5, 2);
    for (const auto& rec : d.split.records) {
      const auto s = m.score(p, rec.command_embedding, rec.objects);
      REQUIRE(s.size() == rec.objects.size());
      double sum = 0.0;
      for (double v : s) {
        CHECK(v >= 0.0);
        sum += v;
      }
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
      const std::vector<SceneObject> one{rec.objects[0]};
      CHECK(m.score(p, rec.command_embedding, one)[0] == doctest::Approx(1.0));
    }
  }

  TEST_CASE("permuting proposals permutes the scores") {
    const GroundingModel m(small_config());
    const auto p = m.init_params(3);
    const auto rec = records(1, 4).split.records[0];
    const auto s = m.score(p, rec.command_embedding, rec.objects);
    std::vector<SceneObject> rev(rec.objects.rbegin(), rec.objects.rend());
    const auto r = m.score(p, rec.command_embedding, rev);
    const std::size_t n = s.size();
    for (std::size_t i = 0; i < n; ++i) CHECK(r[n - 1 - i] == doctest::Approx(s[i]).epsilon(1e-9));
  }

  TEST_CASE("bad inputs") {
    const GroundingModel m(small_config());
    const auto p = m.init_params(1);
    const auto rec = records(1, 5).split.records[0];
    CHECK_THROWS_AS(m.score(p, rec.command_embedding, {}), InvalidArgument);
    auto objs = rec.objects;
    objs[0].features.resize(kDim + 1);
    CHECK_THROWS_AS(m.score(p, rec.command_embedding, objs), ShapeMismatch);
    std::vector<float> cmd(rec.command_embedding.size() - 1);
    CHECK_THROWS_AS(m.score(p, cmd, rec.objects), ShapeMismatch);
    CHECK_THROWS_AS(m.loss(p, rec.command_embedding, rec.objects, rec.objects.size(), nullptr), InvalidArgument);
    GroundingConfig bad = small_config();
    bad.hidden = 0;
    CHECK_THROWS_AS(bad.validate(), InvalidArgument);
  }

  TEST_CASE("loss is the negative log score and its gradient matches differences") {
    const GroundingModel m(small_config());
    auto p = m.init_params(6);
    const auto rec = records(1, 7).split.records[0];
    const auto s = m.score(p, rec.command_embedding, rec.objects);
    std::vector<float> g(p.size(), 0.0f);
    const double l = m.loss(p, rec.command_embedding, rec.objects, 0, g.data());
    CHECK(l == doctest::Approx(-std::log(s[0])).epsilon(1e-6));
    Rng rng(8);
    double num = 0.0, den = 0.0;
    for (int k = 0; k < 60; ++k) {
      const std::size_t j = rng.below(p.size());
      const float o = p[j];
      const float h = 1e-2f;
      p[j] = o + h;
      const double lp = m.loss(p, rec.command_embedding, rec.objects, 0, nullptr);
      p[j] = o - h;
      const double lm = m.loss(p, rec.command_embedding, rec.objects, 0, nullptr);
      p[j] = o;
      const double fd = (lp - lm) / (static_cast<double>(o + h) - static_cast<double>(o - h));
      num += (fd - g[j]) * (fd - g[j]);
      den += fd * fd;
    }
    CHECK(std::sqrt(num / den) < 1e-2);
  }

  TEST_CASE("best overlapping proposal") {
    SceneRecord r;
    r.objects = {proposal({0, 0, 10, 10}), proposal({5, 0, 15, 10}), proposal({2, 0, 12, 10}),
                 proposal({-2, 0, 8, 10})};
    CHECK_FALSE(best_iou_proposal(r).has_value());
    r.gt_referred_frontal_box = AlignedBox2D{2, 0, 12, 10};
    CHECK(best_iou_proposal(r) == 2u);
    // Boxes 0 and 2 tie against this target; the lower index wins.
    r.gt_referred_frontal_box = AlignedBox2D{1, 0, 11, 10};
    CHECK(best_iou_proposal(r) == 0u);
    r.gt_referred_frontal_box = AlignedBox2D{100, 100, 110, 110};
    CHECK_FALSE(best_iou_proposal(r).has_value());
  }

  TEST_CASE("IoU@0.5 rate against oracles") {
    const auto d = records(200, 9);
    const auto& recs = d.split.records;
    const double oracle = iou50_rate(recs, [](const SceneRecord& r) { return *best_iou_proposal(r); });
    std::size_t good = 0;
    for (const auto& r : recs) good += iou_2d(r.objects[*best_iou_proposal(r)].frontal_box, *r.gt_referred_frontal_box) > 0.5;
    CHECK(oracle == doctest::Approx(static_cast<double>(good) / recs.size()));
    CHECK(oracle > 0.95);
    CHECK(iou50_rate(recs, [](const SceneRecord& r) { return r.objects.size(); }) == 0.0);

    // A uniform chooser hits each record with probability (#boxes over 0.5) / (#boxes).
    double expect = 0.0;
    for (const auto& r : recs) {
      std::size_t k = 0;
      for (const auto& o : r.objects) k += iou_2d(o.frontal_box, *r.gt_referred_frontal_box) > 0.5;
      expect += static_cast<double>(k) / r.objects.size() / recs.size();
    }
    Rng rng(10);
    double mc = 0.0;
    const int reps = 200;
    for (int t = 0; t < reps; ++t) {
      mc += iou50_rate(recs, [&rng](const SceneRecord& r) { return rng.below(r.objects.size()); }) / reps;
    }
    CHECK(std::abs(mc - expect) < 0.01);

    std::vector<SceneRecord> none(recs.begin(), recs.begin() + 3);
    for (auto& r : none) r.gt_referred_frontal_box.reset();
    CHECK(iou50_rate(none, [](const SceneRecord&) { return std::size_t{0}; }) == 0.0);
  }

  TEST_CASE("training fits a small set and round trips") {
    const auto d = records(10, 11);
    TrainConfig tc = default_grounding_train_config();
    tc.adam.lr = 3e-3;
    tc.batch_size = 10;
    tc.max_epochs = 150;
    tc.plateau_patience = 0;
    const auto r = train_grounding(d.split, {}, small_config(), tc);
    CHECK(r.skipped == 0);
    testing::TempDir dir;
    save_checkpoint(r.checkpoint, dir / "g.ckpt");
    const auto g = load_grounding(load_checkpoint(dir / "g.ckpt"));
    CHECK(eval_iou50(g, d.split.records) == 1.0);
    const auto applied = apply_grounding(g, d.split.records);
    for (std::size_t i = 0; i < applied.size(); ++i) {
      CHECK(applied[i].referred_index == g.choose(d.split.records[i]));
    }
    Checkpoint wrong = r.checkpoint;
    wrong.model_kind = ModelKind::kPdpc;
    CHECK_THROWS_AS(load_grounding(wrong), SchemaError);
  }

  TEST_CASE("unmatched records") {
    auto d = records(4, 12);
    d.split.records[1].gt_referred_frontal_box = AlignedBox2D{-500, -500, -400, -400};
    TrainConfig tc = default_grounding_train_config();
    tc.max_epochs = 1;
    tc.batch_size = 4;
    const auto r = train_grounding(d.split, {}, small_config(), tc);
    CHECK(r.skipped == 1);
    auto strict = small_config();
    strict.skip_unmatched = false;
    CHECK_THROWS_AS(train_grounding(d.split, {}, strict, tc), InvalidArgument);
  }

  TEST_CASE("config json and defaults") {
    const auto c = small_config();
    CHECK(to_json(grounding_config_from_json(to_json(c))) == to_json(c));
    const auto t = default_grounding_train_config();
    CHECK(t.adam.lr == doctest::Approx(5e-4));
    CHECK(t.batch_size == 32);
    CHECK(t.max_epochs == 20);
    CHECK(t.plateau_patience == 3);
    CHECK(t.plateau_factor == doctest::Approx(0.1));
  }
}
