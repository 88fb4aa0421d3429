#include "cmdgoal/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "cmdgoal/error.hpp"
#include "cmdgoal/log.hpp"
#include "cmdgoal/parallel.hpp"
#include "cmdgoal/rng.hpp"
#include "cmdgoal/runtime.hpp"

namespace cmdgoal {

nlohmann::json to_json(const TrainConfig& c) {
  return {{"lr", c.adam.lr},
          {"beta1", c.adam.beta1},
          {"beta2", c.adam.beta2},
          {"eps", c.adam.eps},
          {"weight_decay", c.adam.weight_decay},
          {"batch_size", c.batch_size},
          {"max_epochs", c.max_epochs},
          {"clip_norm", c.clip_norm},
          {"early_stop_patience", c.early_stop_patience},
          {"plateau_patience", c.plateau_patience},
          {"plateau_factor", c.plateau_factor},
          {"seed", std::to_string(c.seed)},
          {"max_steps", c.max_steps}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.adam.lr = j.value("lr", c.adam.lr);
  c.adam.beta1 = j.value("beta1", c.adam.beta1);
  c.adam.beta2 = j.value("beta2", c.adam.beta2);
  c.adam.eps = j.value("eps", c.adam.eps);
  c.adam.weight_decay = j.value("weight_decay", c.adam.weight_decay);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  c.early_stop_patience = j.value("early_stop_patience", c.early_stop_patience);
  c.plateau_patience = j.value("plateau_patience", c.plateau_patience);
  c.plateau_factor = j.value("plateau_factor", c.plateau_factor);
  if (j.contains("seed")) c.seed = std::stoull(j.at("seed").get<std::string>());
  c.max_steps = j.value("max_steps", c.max_steps);
  return c;
}

bool PlateauScheduler::update(double metric) {
  const bool improved = !has_best_ || (maximize_ ? metric > best_ : metric < best_);
  if (improved) {
    has_best_ = true;
    best_ = metric;
    bad_ = 0;
    return false;
  }
  if (++bad_ >= patience_) {
    bad_ = 0;
    return true;
  }
  return false;
}

double mean_loss(const Objective& obj, std::span<const float> params, int threads) {
  const std::size_t n = obj.num_examples();
  if (n == 0) throw InvalidArgument("mean_loss over an empty objective");
  std::vector<double> losses(n);
  parallel_for(n, threads, [&](std::size_t i) { losses[i] = obj.loss(params, i, nullptr); });
  return std::accumulate(losses.begin(), losses.end(), 0.0) / static_cast<double>(n);
}

TrainResult train(const Objective& obj, std::vector<float> params, const TrainConfig& cfg,
                  const Validation* validation) {
  tune_allocator();
  const std::size_t n = obj.num_examples();
  const std::size_t p = obj.num_params();
  if (n == 0) throw InvalidArgument("training set is empty");
  if (params.size() != p) throw ShapeMismatch("initial parameter count does not match the objective");
  if (cfg.batch_size == 0) throw InvalidArgument("batch size must be positive");

  nn::Adam adam(p, cfg.adam);
  PlateauScheduler plateau(cfg.plateau_patience, validation ? validation->maximize : false);
  Rng shuffle_rng(cfg.seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);

  const int workers = std::max(1, cfg.threads);
  std::vector<std::vector<float>> sample_grads(static_cast<std::size_t>(workers), std::vector<float>(p));
  std::vector<double> sample_losses(static_cast<std::size_t>(workers));
  std::vector<float> grad(p);

  TrainResult result;
  std::optional<double> best;
  int since_best = 0;

  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[shuffle_rng.below(i + 1)]);
    double epoch_loss = 0.0;
    double norm_sum = 0.0;
    std::size_t batches = 0;
    bool stop = false;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t end = std::min(n, start + cfg.batch_size);
      std::fill(grad.begin(), grad.end(), 0.0f);
      double batch_loss = 0.0;
      // Waves of `workers` examples, each into its own buffer, summed in order.
      for (std::size_t w0 = start; w0 < end; w0 += workers) {
        const std::size_t wn = std::min<std::size_t>(workers, end - w0);
        parallel_for(wn, workers, [&](std::size_t k) {
          auto& g = sample_grads[k];
          std::fill(g.begin(), g.end(), 0.0f);
          sample_losses[k] = obj.loss(params, order[w0 + k], g.data());
        });
        for (std::size_t k = 0; k < wn; ++k) {
          if (!std::isfinite(sample_losses[k])) {
            throw TrainingDiverged("non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                                   std::to_string(adam.steps()) + " on example " +
                                   obj.example_name(order[w0 + k]));
          }
          batch_loss += sample_losses[k];
          const auto& g = sample_grads[k];
          for (std::size_t j = 0; j < p; ++j) grad[j] += g[j];
        }
      }
      const float inv = 1.0f / static_cast<float>(end - start);
      for (auto& g : grad) g *= inv;
      const double norm = nn::clip_global_norm(grad, cfg.clip_norm);
      if (!std::isfinite(norm)) {
        throw TrainingDiverged("non-finite gradient norm at epoch " + std::to_string(epoch) + ", step " +
                               std::to_string(adam.steps()));
      }
      adam.step(params, grad);
      epoch_loss += batch_loss;
      norm_sum += norm;
      ++batches;
      ++result.steps;
      if (cfg.max_steps > 0 && result.steps >= cfg.max_steps) {
        stop = true;
        break;
      }
    }

    EpochLog log_entry;
    log_entry.epoch = epoch;
    log_entry.train_loss = epoch_loss / static_cast<double>(std::min(n, batches * cfg.batch_size));
    log_entry.lr = adam.lr();
    log_entry.grad_norm = norm_sum / std::max<std::size_t>(1, batches);
    const double score = validation ? validation->score(params) : log_entry.train_loss;
    log_entry.val_score = score;
    result.curve.push_back(log_entry);

    const bool maximize = validation && validation->maximize;
    const bool improved = !best || (maximize ? score > *best : score < *best);
    if (improved) {
      best = score;
      result.best_params = params;
      result.best_epoch = epoch;
      result.best_score = score;
      since_best = 0;
    } else {
      ++since_best;
    }
    if (cfg.verbose) {
      std::ostringstream os;
      os << "epoch " << epoch << " train_loss " << log_entry.train_loss << " val " << score << " lr "
         << adam.lr();
      log(LogLevel::kWarn, os.str());
    }
    if (cfg.plateau_patience > 0 && plateau.update(score)) adam.set_lr(adam.lr() * cfg.plateau_factor);
    if (cfg.early_stop_patience > 0 && since_best >= cfg.early_stop_patience) break;
    if (stop) break;
  }
  if (!validation) {
    // Without a held-out set the latest parameters are reported.
    result.best_params = params;
    result.best_epoch = result.curve.empty() ? -1 : result.curve.back().epoch;
    result.best_score = result.curve.empty() ? 0.0 : result.curve.back().val_score;
  }
  return result;
}

void write_curve_csv(const std::vector<EpochLog>& curve, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  f << "epoch,train_loss,val_score,lr,grad_norm\n" << std::setprecision(10);
  for (const auto& e : curve) {
    f << e.epoch << ',' << e.train_loss << ',' << e.val_score << ',' << e.lr << ',' << e.grad_norm << '\n';
  }
}

}  // namespace cmdgoal
