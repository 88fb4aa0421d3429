#include "cmdgoal/grounding.hpp"

#include <algorithm>
#include <cmath>

#include "cmdgoal/error.hpp"
#include "cmdgoal/log.hpp"

namespace cmdgoal {

void GroundingConfig::validate() const {
  if (feature_dim == 0) throw InvalidArgument("grounding feature_dim must be positive");
  if (hidden <= 0 || embed <= 0) throw InvalidArgument("grounding hidden and embed sizes must be positive");
}

nlohmann::json to_json(const GroundingConfig& c) {
  return {{"feature_dim", c.feature_dim}, {"hidden", c.hidden}, {"embed", c.embed}, {"skip_unmatched", c.skip_unmatched}};
}

GroundingConfig grounding_config_from_json(const nlohmann::json& j) {
  GroundingConfig c;
  try {
    c.feature_dim = j.value("feature_dim", c.feature_dim);
    c.hidden = j.value("hidden", c.hidden);
    c.embed = j.value("embed", c.embed);
    c.skip_unmatched = j.value("skip_unmatched", c.skip_unmatched);
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("grounding config: ") + e.what());
  }
  c.validate();
  return c;
}

TrainConfig default_grounding_train_config() {
  TrainConfig t;
  t.adam.lr = 5e-4;
  t.adam.weight_decay = 1e-4;
  t.batch_size = 32;
  t.max_epochs = 20;
  t.plateau_patience = 3;
  t.plateau_factor = 0.1;
  t.clip_norm = std::numeric_limits<double>::infinity();
  return t;
}

GroundingModel::GroundingModel(GroundingConfig cfg) : cfg_(cfg) {
  cfg_.validate();
  cmd1_ = nn::Linear::make(layout_, "cmd.fc1", kCommandDim, cfg_.hidden);
  cmd2_ = nn::Linear::make(layout_, "cmd.fc2", cfg_.hidden, cfg_.embed);
  obj1_ = nn::Linear::make(layout_, "obj.fc1", static_cast<int>(cfg_.feature_dim), cfg_.hidden);
  obj2_ = nn::Linear::make(layout_, "obj.fc2", cfg_.hidden, cfg_.embed);
}

std::vector<float> GroundingModel::init_params(std::uint64_t seed) const {
  std::vector<float> p(num_params(), 0.0f);
  std::span<float> ps(p);
  Rng rng = Rng(seed).fork(0x67726e64);
  cmd1_.init(ps, rng);
  // Unit-variance embeddings keep the initial dot products O(1).
  cmd2_.init(ps, rng, std::sqrt(0.5 / cfg_.embed));
  obj1_.init(ps, rng);
  obj2_.init(ps, rng, std::sqrt(0.5 / cfg_.embed));
  return p;
}

namespace {

struct Embedded {
  std::vector<float> cmd_hidden, cmd;
  std::vector<std::vector<float>> obj_hidden, obj;
  std::vector<double> prob;
};

void relu(std::vector<float>& v) {
  for (auto& x : v) x = x > 0.0f ? x : 0.0f;
}

Embedded embed_all(const GroundingConfig& cfg, const nn::Linear& cmd1, const nn::Linear& cmd2,
                          const nn::Linear& obj1, const nn::Linear& obj2, std::span<const float> params,
                          std::span<const float> command, const std::vector<SceneObject>& proposals) {
  if (proposals.empty()) throw InvalidArgument("empty proposal set");
  if (command.size() != static_cast<std::size_t>(kCommandDim)) throw ShapeMismatch("command embedding must have 768 dims");
  const float* p = params.data();
  Embedded e;
  e.cmd_hidden.assign(cfg.hidden, 0.0f);
  e.cmd.assign(cfg.embed, 0.0f);
  cmd1.forward(p, command.data(), e.cmd_hidden.data());
  relu(e.cmd_hidden);
  cmd2.forward(p, e.cmd_hidden.data(), e.cmd.data());
  std::vector<double> logits;
  for (const auto& o : proposals) {
    if (o.features.size() != cfg.feature_dim) {
      throw ShapeMismatch("proposal features have " + std::to_string(o.features.size()) + " dims, expected " +
                          std::to_string(cfg.feature_dim));
    }
    std::vector<float> h(cfg.hidden), z(cfg.embed);
    obj1.forward(p, o.features.data(), h.data());
    relu(h);
    obj2.forward(p, h.data(), z.data());
    double dot = 0.0;
    for (int i = 0; i < cfg.embed; ++i) dot += static_cast<double>(z[i]) * e.cmd[i];
    logits.push_back(dot);
    e.obj_hidden.push_back(std::move(h));
    e.obj.push_back(std::move(z));
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (auto& l : logits) sum += (l = std::exp(l - mx));
  for (auto& l : logits) l /= sum;
  e.prob = std::move(logits);
  return e;
}

}  // namespace

std::vector<double> GroundingModel::score(std::span<const float> params, std::span<const float> command,
                                          const std::vector<SceneObject>& proposals) const {
  return embed_all(cfg_, cmd1_, cmd2_, obj1_, obj2_, params, command, proposals).prob;
}

double GroundingModel::loss(std::span<const float> params, std::span<const float> command,
                            const std::vector<SceneObject>& proposals, std::size_t target, float* grad) const {
  if (target >= proposals.size()) throw InvalidArgument("target proposal out of range");
  const Embedded e = embed_all(cfg_, cmd1_, cmd2_, obj1_, obj2_, params, command, proposals);
  const double l = -std::log(std::max(e.prob[target], 1e-300));
  if (!grad) return l;
  const float* p = params.data();
  std::vector<float> dcmd(cfg_.embed, 0.0f);
  std::vector<float> dz(cfg_.embed), dh(cfg_.hidden);
  for (std::size_t k = 0; k < proposals.size(); ++k) {
    const float dlogit = static_cast<float>(e.prob[k] - (k == target ? 1.0 : 0.0));
    for (int i = 0; i < cfg_.embed; ++i) {
      dcmd[i] += dlogit * e.obj[k][i];
      dz[i] = dlogit * e.cmd[i];
    }
    obj2_.backward(p, e.obj_hidden[k].data(), dz.data(), dh.data(), grad);
    for (int i = 0; i < cfg_.hidden; ++i) {
      if (!(e.obj_hidden[k][i] > 0.0f)) dh[i] = 0.0f;
    }
    obj1_.backward(p, proposals[k].features.data(), dh.data(), static_cast<float*>(nullptr), grad);
  }
  cmd2_.backward(p, e.cmd_hidden.data(), dcmd.data(), dh.data(), grad);
  for (int i = 0; i < cfg_.hidden; ++i) {
    if (!(e.cmd_hidden[i] > 0.0f)) dh[i] = 0.0f;
  }
  cmd1_.backward(p, command.data(), dh.data(), static_cast<float*>(nullptr), grad);
  return l;
}

std::optional<std::size_t> best_iou_proposal(const SceneRecord& rec) {
  if (!rec.gt_referred_frontal_box) return std::nullopt;
  std::optional<std::size_t> best;
  double best_iou = 0.0;
  for (std::size_t i = 0; i < rec.objects.size(); ++i) {
    const double v = iou_2d(rec.objects[i].frontal_box, *rec.gt_referred_frontal_box);
    if (v > best_iou) {
      best_iou = v;
      best = i;
    }
  }
  return best;
}

double iou50_rate(std::span<const SceneRecord> records, const std::function<std::size_t(const SceneRecord&)>& choose) {
  std::size_t n = 0;
  std::size_t hit = 0;
  for (const auto& rec : records) {
    if (!rec.gt_referred_frontal_box || rec.objects.empty()) continue;
    ++n;
    const std::size_t k = choose(rec);
    if (k < rec.objects.size() && iou_2d(rec.objects[k].frontal_box, *rec.gt_referred_frontal_box) > 0.5) ++hit;
  }
  return n == 0 ? 0.0 : static_cast<double>(hit) / static_cast<double>(n);
}

std::size_t LoadedGrounding::choose(const SceneRecord& rec) const {
  const std::vector<double> p = model.score(params, rec.command_embedding, rec.objects);
  return static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
}

double eval_iou50(const LoadedGrounding& g, std::span<const SceneRecord> records) {
  return iou50_rate(records, [&g](const SceneRecord& rec) { return g.choose(rec); });
}

namespace {

class GroundingObjective : public Objective {
 public:
  GroundingObjective(const GroundingModel& model, const DatasetSplit& data, bool skip_unmatched)
      : model_(model), data_(data) {
    for (std::size_t i = 0; i < data.records.size(); ++i) {
      const auto target = best_iou_proposal(data.records[i]);
      if (!target) {
        if (!skip_unmatched) {
          throw InvalidArgument("record " + data.records[i].id + " has no proposal overlapping its ground-truth box");
        }
        log_warn("skipping record " + data.records[i].id + ": no proposal overlaps the ground-truth box");
        ++skipped_;
        continue;
      }
      index_.push_back(i);
      target_.push_back(*target);
    }
  }
  std::size_t num_params() const override { return model_.num_params(); }
  std::size_t num_examples() const override { return index_.size(); }
  std::string example_name(std::size_t i) const override { return data_.records[index_[i]].id; }
  double loss(std::span<const float> params, std::size_t i, float* grad) const override {
    const SceneRecord& rec = data_.records[index_[i]];
    return model_.loss(params, rec.command_embedding, rec.objects, target_[i], grad);
  }
  std::size_t skipped() const noexcept { return skipped_; }

 private:
  const GroundingModel& model_;
  const DatasetSplit& data_;
  std::vector<std::size_t> index_;
  std::vector<std::size_t> target_;
  std::size_t skipped_ = 0;
};

}  // namespace

GroundingTrainResult train_grounding(const DatasetSplit& train_split, const DatasetSplit& val,
                                     const GroundingConfig& cfg, const TrainConfig& tcfg) {
  const GroundingModel model(cfg);
  const GroundingObjective objective(model, train_split, cfg.skip_unmatched);
  if (objective.num_examples() == 0) throw InvalidArgument("no trainable grounding records");
  Validation validation;
  validation.maximize = true;
  const DatasetSplit& monitor = val.records.empty() ? train_split : val;
  validation.score = [&](std::span<const float> params) {
    const LoadedGrounding g{model, std::vector<float>(params.begin(), params.end())};
    return eval_iou50(g, monitor.records);
  };
  GroundingTrainResult out;
  out.skipped = objective.skipped();
  out.train = train(objective, model.init_params(tcfg.seed), tcfg, &validation);
  out.checkpoint.model_kind = ModelKind::kGrounding;
  out.checkpoint.config = {{"model", to_json(cfg)}, {"train", to_json(tcfg)}};
  out.checkpoint.parameters = pack_parameters(model.layout(), out.train.best_params);
  out.checkpoint.rng_seed = tcfg.seed;
  out.checkpoint.epoch = out.train.best_epoch;
  return out;
}

LoadedGrounding load_grounding(const Checkpoint& c) {
  if (c.model_kind != ModelKind::kGrounding) {
    throw SchemaError("checkpoint holds a " + std::string(to_string(c.model_kind)) + " model, not grounding");
  }
  if (!c.config.contains("model")) throw SchemaError("grounding checkpoint lacks a model config");
  GroundingModel model(grounding_config_from_json(c.config.at("model")));
  std::vector<float> params = unpack_parameters(model.layout(), c.parameters);
  return {std::move(model), std::move(params)};
}

std::vector<SceneRecord> apply_grounding(const LoadedGrounding& g, std::span<const SceneRecord> records) {
  std::vector<SceneRecord> out(records.begin(), records.end());
  for (auto& rec : out) {
    if (!rec.objects.empty()) rec.referred_index = g.choose(rec);
  }
  return out;
}

}  // namespace cmdgoal
