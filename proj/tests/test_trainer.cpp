#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>

#include "cmdgoal/error.hpp"
#include "cmdgoal/rng.hpp"
#include "cmdgoal/trainer.hpp"
#include "test_util.hpp"

using namespace cmdgoal;

namespace {

// Least squares: example i wants params close to target_i.
class Quadratic : public Objective {
 public:
  explicit Quadratic(std::vector<std::vector<float>> targets) : targets_(std::move(targets)) {}
  std::size_t num_params() const override { return targets_.front().size(); }
  std::size_t num_examples() const override { return targets_.size(); }
  double loss(std::span<const float> p, std::size_t i, float* grad) const override {
    double l = 0.0;
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double d = p[j] - targets_[i][j];
      l += 0.5 * d * d;
      if (grad) grad[j] += static_cast<float>(d);
    }
    if (poison_ && i == 0) return std::numeric_limits<double>::quiet_NaN();
    return l;
  }
  bool poison_ = false;

 private:
  std::vector<std::vector<float>> targets_;
};

Quadratic make_problem(std::size_t n, std::size_t p, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::vector<float>> t(n, std::vector<float>(p));
  for (auto& v : t) {
    for (auto& x : v) x = static_cast<float>(rng.normal(1.0, 0.5));
  }
  return Quadratic(std::move(t));
}

}  // namespace

TEST_SUITE("trainer") {
  TEST_CASE("plateau scheduler on a scripted trace") {
    PlateauScheduler s(3, true);
    const double trace[] = {0.1, 0.2, 0.2, 0.15, 0.19, 0.3, 0.3, 0.3, 0.3, 0.31, 0.2, 0.2, 0.2};
    const bool fires[] = {false, false, false, false, true, false, false, false, true, false, false, false, true};
    for (std::size_t i = 0; i < std::size(trace); ++i) {
      CAPTURE(i);
      CHECK(s.update(trace[i]) == fires[i]);
    }
    PlateauScheduler m(2, false);
    CHECK_FALSE(m.update(5.0));
    CHECK_FALSE(m.update(6.0));
    CHECK(m.update(5.0));
    CHECK_FALSE(m.update(4.0));
  }

  TEST_CASE("training reduces the loss and is deterministic") {
    const auto obj = make_problem(40, 12, 1);
    TrainConfig cfg;
    cfg.adam.lr = 0.05;
    cfg.batch_size = 8;
    cfg.max_epochs = 30;
    cfg.seed = 4;
    const std::vector<float> init(12, 0.0f);
    const double before = mean_loss(obj, init);
    const auto a = train(obj, init, cfg, nullptr);
    CHECK(mean_loss(obj, a.best_params) < 0.5 * before);
    CHECK(a.curve.size() == 30);
    CHECK(a.steps == 150);
    const auto b = train(obj, init, cfg, nullptr);
    CHECK(a.best_params == b.best_params);
    cfg.threads = 3;
    const auto c = train(obj, init, cfg, nullptr);
    CHECK(a.best_params == c.best_params);
  }

  TEST_CASE("validation selects the best epoch and early stopping") {
    const auto obj = make_problem(16, 4, 2);
    TrainConfig cfg;
    cfg.adam.lr = 0.1;
    cfg.batch_size = 4;
    cfg.max_epochs = 40;
    cfg.early_stop_patience = 3;
    int calls = 0;
    // Score peaks at epoch 5 and declines afterwards.
    Validation v{[&](std::span<const float>) {
                   const int e = calls++;
                   return -std::abs(e - 5.0);
                 },
                 true};
    const auto r = train(obj, std::vector<float>(4, 0.0f), cfg, &v);
    CHECK(r.best_epoch == 5);
    CHECK(r.curve.size() == 9);
    CHECK(r.best_score == 0.0);
  }

  TEST_CASE("plateau decay lowers the learning rate") {
    const auto obj = make_problem(8, 3, 3);
    TrainConfig cfg;
    cfg.adam.lr = 0.01;
    cfg.batch_size = 8;
    cfg.max_epochs = 6;
    cfg.plateau_patience = 2;
    cfg.plateau_factor = 0.5;
    Validation v{[](std::span<const float>) { return 1.0; }, false};
    const auto r = train(obj, std::vector<float>(3, 0.0f), cfg, &v);
    CHECK(r.curve[0].lr == doctest::Approx(0.01));
    CHECK(r.curve[2].lr == doctest::Approx(0.01));
    CHECK(r.curve[3].lr == doctest::Approx(0.005));
    CHECK(r.curve[5].lr == doctest::Approx(0.0025));
  }

  TEST_CASE("divergence and bad inputs") {
    auto obj = make_problem(4, 2, 4);
    obj.poison_ = true;
    TrainConfig cfg;
    cfg.batch_size = 2;
    CHECK_THROWS_AS(train(obj, std::vector<float>(2, 0.0f), cfg, nullptr), TrainingDiverged);
    obj.poison_ = false;
    CHECK_THROWS_AS(train(obj, std::vector<float>(3, 0.0f), cfg, nullptr), ShapeMismatch);
    cfg.batch_size = 0;
    CHECK_THROWS_AS(train(obj, std::vector<float>(2, 0.0f), cfg, nullptr), InvalidArgument);
  }

  TEST_CASE("max_steps and gradient clipping") {
    const auto obj = make_problem(10, 5, 5);
    TrainConfig cfg;
    cfg.batch_size = 2;
    cfg.max_steps = 7;
    const auto r = train(obj, std::vector<float>(5, 0.0f), cfg, nullptr);
    CHECK(r.steps == 7);
    std::vector<float> g{3.0f, 4.0f};
    CHECK(nn::clip_global_norm(g, 1.0) == doctest::Approx(5.0));
    CHECK(std::hypot(g[0], g[1]) == doctest::Approx(1.0).epsilon(1e-5));
  }

  TEST_CASE("config json and curve csv") {
    TrainConfig cfg;
    cfg.adam.lr = 1.25e-4;
    cfg.seed = 0xFFFFFFFFFFFFFFFFull;
    cfg.plateau_patience = 3;
    const auto back = train_config_from_json(to_json(cfg));
    CHECK(back.adam.lr == cfg.adam.lr);
    CHECK(back.seed == cfg.seed);
    CHECK(back.plateau_patience == 3);
    testing::TempDir dir;
    write_curve_csv({{0, 1.0, 2.0, 0.1, 3.0}, {1, 0.5, 1.5, 0.1, 2.0}}, dir / "c.csv");
    const std::string csv = testing::slurp(dir / "c.csv");
    CHECK(csv.rfind("epoch,train_loss,val_score,lr,grad_norm\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
  }
}
