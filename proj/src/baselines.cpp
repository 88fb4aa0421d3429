#include "cmdgoal/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "cmdgoal/error.hpp"
#include "cmdgoal/parallel.hpp"
#include "cmdgoal/synthetic.hpp"

namespace cmdgoal {

using nn::Tensor;

namespace {

// Point outputs are an affine map of the raw head onto the map extent.
constexpr double kCenterX = 0.5 * (kMapMinX + kMapMaxX);
constexpr double kCenterY = 0.5 * (kMapMinY + kMapMaxY);
constexpr double kHalfX = 0.5 * kMapLengthM;
constexpr double kHalfY = 0.5 * kMapWidthM;

double log_softmax_into(std::span<const double> logits, std::vector<double>& p) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  p.resize(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) sum += (p[i] = std::exp(logits[i] - mx));
  for (auto& v : p) v /= sum;
  return mx + std::log(sum);
}

int cell_index(double coord_px, int n) {
  return std::clamp(static_cast<int>(std::floor(coord_px)), 0, n - 1);
}

}  // namespace

void SoftTargetConfig::validate() const {
  if (!(sigma > 0.0)) throw InvalidArgument("soft target sigma must be positive");
  if (!(truncation >= 0.0)) throw InvalidArgument("soft target truncation must be non-negative");
  PixelFrame(grid_w, grid_h);
}

std::vector<double> nonparam_soft_targets(std::span<const int> gt_indices, int n_cells, const SoftTargetConfig& cfg) {
  cfg.validate();
  if (gt_indices.empty()) throw InvalidArgument("soft targets need at least one ground-truth index");
  if (n_cells <= 0) throw InvalidArgument("soft targets need a positive cell count");
  std::vector<double> t(n_cells, 0.0);
  const double norm = 1.0 / (std::sqrt(2.0 * std::numbers::pi) * cfg.sigma);
  for (int j : gt_indices) {
    if (j < 0 || j >= n_cells) throw InvalidArgument("ground-truth index " + std::to_string(j) + " outside the grid");
    const int lo = std::max(0, static_cast<int>(std::ceil(j - cfg.truncation)));
    const int hi = std::min(n_cells - 1, static_cast<int>(std::floor(j + cfg.truncation)));
    for (int i = lo; i <= hi; ++i) {
      const double d = i - j;
      t[i] += norm * std::exp(-d * d / (2.0 * cfg.sigma * cfg.sigma));
    }
  }
  const double total = std::accumulate(t.begin(), t.end(), 0.0);
  for (auto& v : t) v /= total;
  return t;
}

BaselineConfig BaselineConfig::full(ModelKind kind) {
  BaselineConfig c;
  c.kind = kind;
  return c;
}

BaselineConfig BaselineConfig::desk(ModelKind kind) {
  BaselineConfig c;
  c.kind = kind;
  c.height = 96;
  c.width = 144;
  c.channels = 32;
  c.stages = 3;
  c.norm_groups = 8;
  c.embed_dim = 256;
  c.hidden = 256;
  return c;
}

void BaselineConfig::validate() const {
  if (kind == ModelKind::kPdpc || kind == ModelKind::kGrounding) {
    throw InvalidArgument(std::string(to_string(kind)) + " is not a baseline model");
  }
  PixelFrame(width, height);
  if (channels <= 0 || norm_groups <= 0 || channels % norm_groups != 0) {
    throw InvalidArgument("baseline channels must be a positive multiple of norm_groups");
  }
  if (stages < 0) throw InvalidArgument("stages must be non-negative");
  if (embed_dim <= 0 || hidden <= 0) throw InvalidArgument("embed_dim and hidden must be positive");
  if (mdn_components <= 0) throw InvalidArgument("mdn_components must be positive");
  if (!(sigma_unit > 0.0)) throw InvalidArgument("sigma_unit must be positive");
  soft.validate();
}

int BaselineConfig::output_dim() const {
  switch (kind) {
    case ModelKind::kSinglePoint: return 2;
    case ModelKind::kUnimodal: return 4;
    case ModelKind::kMdn: return 6 * mdn_components;
    case ModelKind::kNonParam: return soft.grid_w + soft.grid_h;
    default: throw InvalidArgument("not a baseline model");
  }
}

nlohmann::json to_json(const BaselineConfig& c) {
  return {{"kind", std::string(to_string(c.kind))},
          {"height", c.height},
          {"width", c.width},
          {"channels", c.channels},
          {"stages", c.stages},
          {"norm_groups", c.norm_groups},
          {"embed_dim", c.embed_dim},
          {"hidden", c.hidden},
          {"mdn_components", c.mdn_components},
          {"sigma_unit", c.sigma_unit},
          {"soft_sigma", c.soft.sigma},
          {"soft_truncation", c.soft.truncation},
          {"grid_w", c.soft.grid_w},
          {"grid_h", c.soft.grid_h},
          {"no_referred_channel", c.no_referred_channel}};
}

BaselineConfig baseline_config_from_json(const nlohmann::json& j) {
  BaselineConfig c;
  try {
    c.kind = parse_model_kind(j.at("kind").get<std::string>());
    c.height = j.value("height", c.height);
    c.width = j.value("width", c.width);
    c.channels = j.value("channels", c.channels);
    c.stages = j.value("stages", c.stages);
    c.norm_groups = j.value("norm_groups", c.norm_groups);
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.hidden = j.value("hidden", c.hidden);
    c.mdn_components = j.value("mdn_components", c.mdn_components);
    c.sigma_unit = j.value("sigma_unit", c.sigma_unit);
    c.soft.sigma = j.value("soft_sigma", c.soft.sigma);
    c.soft.truncation = j.value("soft_truncation", c.soft.truncation);
    c.soft.grid_w = j.value("grid_w", c.soft.grid_w);
    c.soft.grid_h = j.value("grid_h", c.soft.grid_h);
    c.no_referred_channel = j.value("no_referred_channel", c.no_referred_channel);
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("baseline config: ") + e.what());
  }
  c.validate();
  return c;
}

TrainConfig default_baseline_train_config(ModelKind kind) {
  TrainConfig t;
  t.adam.lr = kind == ModelKind::kUnimodal ? 1e-4 : 3e-5;
  t.batch_size = 16;
  t.max_epochs = 50;
  t.clip_norm = 5.0;
  t.early_stop_patience = 10;
  return t;
}

TrainConfig desk_baseline_train_config(ModelKind kind) {
  TrainConfig t = default_baseline_train_config(kind);
  t.adam.lr = kind == ModelKind::kUnimodal ? 1e-3 : 3e-4;
  t.max_epochs = 20;
  t.plateau_patience = 1;
  t.plateau_factor = 0.3;
  t.early_stop_patience = 4;
  return t;
}

std::vector<EgoPoint> NonParamDistribution::sample(std::size_t n, Rng& rng) const {
  const PixelFrame frame(grid_w, grid_h);
  auto draw = [&rng](const std::vector<double>& p) {
    double u = rng.uniform();
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (u < p[i]) return static_cast<int>(i);
      u -= p[i];
    }
    return static_cast<int>(p.size()) - 1;
  };
  std::vector<EgoPoint> out;
  out.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    const int u = draw(px);
    const int v = draw(py);
    out.push_back(pixel_to_ego({u + 0.5, v + 0.5}, frame));
  }
  return out;
}

// ---------------------------------------------------------------------------

BaselineModel::BaselineModel(BaselineConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  const int C = cfg_.channels;
  const int G = cfg_.norm_groups;
  stem_ = nn::ConvGnRelu::make(layout_, "enc.stem", kLayoutChannels, C, 2, G);
  for (int s = 0; s < cfg_.stages; ++s) {
    down_.push_back(nn::ConvGnRelu::make(layout_, "enc.down" + std::to_string(s), C, C, 2, G));
    res_.push_back(nn::ResidualBlock::make(layout_, "enc.res" + std::to_string(s), C, G));
  }
  embed_ = nn::Linear::make(layout_, "embed", C, cfg_.embed_dim);
  fc1_ = nn::Linear::make(layout_, "head.fc1", cfg_.embed_dim + kCommandDim, cfg_.hidden);
  fc2_ = nn::Linear::make(layout_, "head.fc2", cfg_.hidden, cfg_.output_dim());
}

template <typename T>
std::vector<T> BaselineModel::init_params(std::uint64_t seed) const {
  std::vector<T> p(num_params(), T(0));
  std::span<T> ps(p);
  Rng rng = Rng(seed).fork(0xba5e);
  stem_.init(ps, rng);
  for (std::size_t s = 0; s < down_.size(); ++s) {
    down_[s].init(ps, rng);
    res_[s].init(ps, rng);
  }
  embed_.init(ps, rng);
  fc1_.init(ps, rng);
  // Small final layer so training starts near the map center with unit scale.
  fc2_.init(ps, rng, 0.1);
  return p;
}

template <typename T>
struct BaselineModel::Cache {
  Tensor<T> input;
  nn::ConvGnReluCache<T> stem;
  std::vector<nn::ConvGnReluCache<T>> down;
  std::vector<nn::ResidualCache<T>> res;
  const Tensor<T>* top = nullptr;
  std::vector<T> pooled, embed, concat, hidden, out;
};

LayoutTensor BaselineModel::rasterize(const SceneRecord& rec, const std::string& base_dir) const {
  RasterOptions opts;
  opts.no_referred_channel = cfg_.no_referred_channel;
  opts.base_dir = base_dir;
  return rasterize_scene(rec, cfg_.height, cfg_.width, opts);
}

template <typename T>
std::vector<double> BaselineModel::run(std::span<const T> params, const LayoutTensor& layout,
                                       std::span<const float> command, Cache<T>& c) const {
  if (params.size() != num_params()) throw ShapeMismatch("parameter vector size does not match the model");
  if (layout.height() != cfg_.height || layout.width() != cfg_.width) {
    throw ShapeMismatch("layout dims do not match the baseline config");
  }
  if (command.size() != static_cast<std::size_t>(kCommandDim)) throw ShapeMismatch("command embedding must have 768 dims");
  const T* p = params.data();
  c.input.resize(kLayoutChannels, cfg_.height, cfg_.width);
  std::transform(layout.data().begin(), layout.data().end(), c.input.v.begin(),
                 [](float v) { return static_cast<T>(v); });
  c.down.resize(down_.size());
  c.res.resize(res_.size());
  const Tensor<T>* x = &stem_.forward(p, c.input, c.stem);
  for (std::size_t s = 0; s < down_.size(); ++s) {
    x = &down_[s].forward(p, *x, c.down[s]);
    x = &res_[s].forward(p, *x, c.res[s]);
  }
  c.top = x;
  c.pooled.assign(x->c, T(0));
  for (int ch = 0; ch < x->c; ++ch) {
    double sum = 0.0;
    const T* src = x->channel(ch);
    for (std::size_t i = 0; i < x->plane(); ++i) sum += src[i];
    c.pooled[ch] = static_cast<T>(sum / static_cast<double>(x->plane()));
  }
  c.embed.assign(cfg_.embed_dim, T(0));
  embed_.forward(p, c.pooled.data(), c.embed.data());
  c.concat = c.embed;
  c.concat.insert(c.concat.end(), command.begin(), command.end());
  c.hidden.assign(cfg_.hidden, T(0));
  fc1_.forward(p, c.concat.data(), c.hidden.data());
  for (auto& h : c.hidden) h = h > T(0) ? h : T(0);
  c.out.assign(cfg_.output_dim(), T(0));
  fc2_.forward(p, c.hidden.data(), c.out.data());
  std::vector<double> raw(c.out.begin(), c.out.end());
  for (double v : raw) {
    if (!std::isfinite(v)) throw InvalidArgument("non-finite baseline output");
  }
  return raw;
}

template <typename T>
std::vector<double> BaselineModel::raw_output(std::span<const T> params, const LayoutTensor& layout,
                                              std::span<const float> command) const {
  Cache<T> c;
  return run(params, layout, command, c);
}

BaselinePrediction BaselineModel::decode(const std::vector<double>& raw) const {
  if (raw.size() != static_cast<std::size_t>(cfg_.output_dim())) throw ShapeMismatch("raw output size mismatch");
  const double su = cfg_.sigma_unit;
  switch (cfg_.kind) {
    case ModelKind::kSinglePoint:
      return EgoPoint{std::clamp(kCenterX + kHalfX * raw[0], kMapMinX, kMapMaxX),
                      std::clamp(kCenterY + kHalfY * raw[1], kMapMinY, kMapMaxY)};
    case ModelKind::kUnimodal:
      return Mixture2D({{{kCenterX + kHalfX * raw[0], kCenterY + kHalfY * raw[1]},
                         DiagScale{su * nn::positive_scale(raw[2]), su * nn::positive_scale(raw[3])},
                         0.0}});
    case ModelKind::kMdn: {
      std::vector<GaussComponent> comps;
      for (int m = 0; m < cfg_.mdn_components; ++m) {
        const double* r = raw.data() + 6 * m;
        comps.push_back({{kCenterX + kHalfX * r[0], kCenterY + kHalfY * r[1]},
                         CholScale{su * nn::positive_scale(r[2]), su * r[3], su * nn::positive_scale(r[4])},
                         r[5]});
      }
      return Mixture2D(std::move(comps));
    }
    case ModelKind::kNonParam: {
      NonParamDistribution d;
      d.grid_w = cfg_.soft.grid_w;
      d.grid_h = cfg_.soft.grid_h;
      log_softmax_into(std::span<const double>(raw.data(), d.grid_w), d.px);
      log_softmax_into(std::span<const double>(raw.data() + d.grid_w, d.grid_h), d.py);
      return d;
    }
    default:
      throw InvalidArgument("not a baseline model");
  }
}

double BaselineModel::head_loss(const std::vector<double>& raw, std::span<const EgoPoint> targets,
                                std::vector<double>* draw) const {
  if (targets.empty()) throw InvalidArgument("baseline loss needs at least one destination");
  if (draw) draw->assign(raw.size(), 0.0);
  const double su = cfg_.sigma_unit;
  switch (cfg_.kind) {
    case ModelKind::kSinglePoint: {
      // Unclamped point so the loss keeps a gradient outside the map.
      const EgoPoint mu{kCenterX + kHalfX * raw[0], kCenterY + kHalfY * raw[1]};
      double best = std::numeric_limits<double>::infinity();
      EgoPoint nearest{};
      for (const auto& t : targets) {
        const double d = std::hypot(mu.x - t.x, mu.y - t.y);
        if (d < best) {
          best = d;
          nearest = t;
        }
      }
      if (draw && best > 0.0) {
        (*draw)[0] = kHalfX * (mu.x - nearest.x) / best;
        (*draw)[1] = kHalfY * (mu.y - nearest.y) / best;
      }
      return best;
    }
    case ModelKind::kUnimodal:
    case ModelKind::kMdn: {
      const Mixture2D m = std::get<Mixture2D>(decode(raw));
      if (!draw) return nll_loss(m, targets);
      const MixtureGrad g = nll_grad(m, targets);
      if (cfg_.kind == ModelKind::kUnimodal) {
        const auto& cg = g.components[0];
        (*draw)[0] = cg.d_mean_x * kHalfX;
        (*draw)[1] = cg.d_mean_y * kHalfY;
        (*draw)[2] = cg.d_scale[0] * su * nn::elu_grad(raw[2]);
        (*draw)[3] = cg.d_scale[1] * su * nn::elu_grad(raw[3]);
      } else {
        for (int k = 0; k < cfg_.mdn_components; ++k) {
          const auto& cg = g.components[k];
          const double* r = raw.data() + 6 * k;
          double* d = draw->data() + 6 * k;
          d[0] = cg.d_mean_x * kHalfX;
          d[1] = cg.d_mean_y * kHalfY;
          d[2] = cg.d_scale[0] * su * nn::elu_grad(r[2]);
          d[3] = cg.d_scale[1] * su;
          d[4] = cg.d_scale[2] * su * nn::elu_grad(r[4]);
          d[5] = cg.d_log_weight;
        }
      }
      return g.loss;
    }
    case ModelKind::kNonParam: {
      const int gw = cfg_.soft.grid_w;
      const int gh = cfg_.soft.grid_h;
      const PixelFrame frame(gw, gh);
      std::vector<int> iu, iv;
      for (const auto& t : targets) {
        const PixelPoint q = ego_to_pixel(t, frame);
        iu.push_back(cell_index(q.u, gw));
        iv.push_back(cell_index(q.v, gh));
      }
      double total = 0.0;
      std::size_t off = 0;
      for (const auto& [idx, n] : {std::pair{&iu, gw}, std::pair{&iv, gh}}) {
        const std::vector<double> t = nonparam_soft_targets(*idx, n, cfg_.soft);
        std::vector<double> p;
        const std::span<const double> logits(raw.data() + off, n);
        const double lse = log_softmax_into(logits, p);
        for (int i = 0; i < n; ++i) {
          if (t[i] > 0.0) total += t[i] * (std::log(t[i]) - (logits[i] - lse));
          if (draw) (*draw)[off + i] = p[i] - t[i];
        }
        off += n;
      }
      return total;
    }
    default:
      throw InvalidArgument("not a baseline model");
  }
}

template <typename T>
double BaselineModel::loss(std::span<const T> params, const LayoutTensor& layout, std::span<const float> command,
                           std::span<const EgoPoint> targets, T* grad) const {
  Cache<T> c;
  const std::vector<double> raw = run(params, layout, command, c);
  std::vector<double> draw;
  const double l = head_loss(raw, targets, grad ? &draw : nullptr);
  if (!grad) return l;
  const T* p = params.data();
  std::vector<T> dout(draw.begin(), draw.end());
  std::vector<T> dhidden(cfg_.hidden);
  fc2_.backward(p, c.hidden.data(), dout.data(), dhidden.data(), grad);
  for (std::size_t i = 0; i < dhidden.size(); ++i) {
    if (!(c.hidden[i] > T(0))) dhidden[i] = T(0);
  }
  std::vector<T> dconcat(c.concat.size());
  fc1_.backward(p, c.concat.data(), dhidden.data(), dconcat.data(), grad);
  std::vector<T> dpooled(c.pooled.size());
  embed_.backward(p, c.pooled.data(), dconcat.data(), dpooled.data(), grad);
  const Tensor<T>& top = *c.top;
  Tensor<T> dx(top.c, top.h, top.w);
  const T inv = static_cast<T>(1.0 / static_cast<double>(top.plane()));
  for (int ch = 0; ch < top.c; ++ch) {
    T* d = dx.channel(ch);
    std::fill(d, d + top.plane(), dpooled[ch] * inv);
  }
  for (std::size_t s = down_.size(); s-- > 0;) {
    Tensor<T> dpre;
    res_[s].backward(p, c.res[s], dx, dpre, grad);
    Tensor<T> dprev;
    down_[s].backward(p, c.down[s], dpre, &dprev, grad);
    dx = std::move(dprev);
  }
  stem_.backward(p, c.stem, dx, static_cast<Tensor<T>*>(nullptr), grad);
  return l;
}

template std::vector<float> BaselineModel::init_params(std::uint64_t) const;
template std::vector<double> BaselineModel::init_params(std::uint64_t) const;
template std::vector<double> BaselineModel::raw_output(std::span<const float>, const LayoutTensor&,
                                                       std::span<const float>) const;
template std::vector<double> BaselineModel::raw_output(std::span<const double>, const LayoutTensor&,
                                                       std::span<const float>) const;
template double BaselineModel::loss(std::span<const float>, const LayoutTensor&, std::span<const float>,
                                    std::span<const EgoPoint>, float*) const;
template double BaselineModel::loss(std::span<const double>, const LayoutTensor&, std::span<const float>,
                                    std::span<const EgoPoint>, double*) const;

// ---------------------------------------------------------------------------

namespace {

constexpr std::size_t kLayoutCacheBytes = std::size_t{1} << 30;

class BaselineObjective : public Objective {
 public:
  BaselineObjective(const BaselineModel& model, const DatasetSplit& data, std::string base_dir)
      : model_(model), data_(data), base_dir_(std::move(base_dir)) {
    const auto& cfg = model.config();
    if (data.records.size() * kLayoutChannels * cfg.height * cfg.width * sizeof(float) <= kLayoutCacheBytes) {
      cache_.resize(data.records.size());
      for (std::size_t i = 0; i < cache_.size(); ++i) cache_[i] = model.rasterize(data.records[i], base_dir_);
    }
  }
  std::size_t num_params() const override { return model_.num_params(); }
  std::size_t num_examples() const override { return data_.records.size(); }
  std::string example_name(std::size_t i) const override { return data_.records[i].id; }
  double loss(std::span<const float> params, std::size_t i, float* grad) const override {
    const SceneRecord& rec = data_.records[i];
    if (!cache_.empty()) return model_.loss<float>(params, cache_[i], rec.command_embedding, rec.destinations, grad);
    const LayoutTensor t = model_.rasterize(rec, base_dir_);
    return model_.loss<float>(params, t, rec.command_embedding, rec.destinations, grad);
  }

 private:
  const BaselineModel& model_;
  const DatasetSplit& data_;
  std::string base_dir_;
  std::vector<LayoutTensor> cache_;
};

}  // namespace

Checkpoint baseline_checkpoint(const BaselineModel& model, const std::vector<float>& params,
                               const TrainConfig& tcfg, int epoch) {
  Checkpoint c;
  c.model_kind = model.config().kind;
  c.config = {{"model", to_json(model.config())}, {"train", to_json(tcfg)}};
  c.parameters = pack_parameters(model.layout(), params);
  c.rng_seed = tcfg.seed;
  c.epoch = epoch;
  return c;
}

LoadedBaseline load_baseline(const Checkpoint& c) {
  if (c.model_kind == ModelKind::kPdpc || c.model_kind == ModelKind::kGrounding) {
    throw SchemaError("checkpoint holds a " + std::string(to_string(c.model_kind)) + " model, not a baseline");
  }
  if (!c.config.contains("model")) throw SchemaError("baseline checkpoint lacks a model config");
  BaselineConfig cfg = baseline_config_from_json(c.config.at("model"));
  if (cfg.kind != c.model_kind) throw SchemaError("checkpoint kind disagrees with its config");
  BaselineModel model(cfg);
  std::vector<float> params = unpack_parameters(model.layout(), c.parameters);
  return {std::move(model), std::move(params)};
}

BaselineTrainResult train_baseline(const DatasetSplit& train_split, const DatasetSplit& val, const BaselineConfig& cfg,
                                   const TrainConfig& tcfg, const std::string& base_dir) {
  if (train_split.records.empty()) throw InvalidArgument("training split is empty");
  const BaselineModel model(cfg);
  const BaselineObjective objective(model, train_split, base_dir);
  std::optional<BaselineObjective> val_objective;
  Validation validation;
  if (!val.records.empty()) {
    val_objective.emplace(model, val, base_dir);
    validation.score = [&](std::span<const float> params) { return mean_loss(*val_objective, params, tcfg.threads); };
  }
  TrainResult tr = train(objective, model.init_params<float>(tcfg.seed), tcfg,
                         val.records.empty() ? nullptr : &validation);
  BaselineTrainResult out;
  out.checkpoint = baseline_checkpoint(model, tr.best_params, tcfg, tr.best_epoch);
  out.train = std::move(tr);
  return out;
}

BaselinePrediction predict_baseline(const LoadedBaseline& m, const SceneRecord& rec, const std::string& base_dir) {
  const LayoutTensor t = m.model.rasterize(rec, base_dir);
  return m.model.decode(m.model.raw_output<float>(m.params, t, rec.command_embedding));
}

double baseline_mean_loss(const LoadedBaseline& m, const DatasetSplit& split, int threads, const std::string& base_dir) {
  const BaselineObjective objective(m.model, split, base_dir);
  return mean_loss(objective, m.params, threads);
}

BaselineAuditReport audit_baseline_gradient(const BaselineConfig& cfg, std::uint64_t seed, std::size_t coords,
                                            double step) {
  const BaselineModel model(cfg);
  SynthConfig sc;
  sc.num_records = 1;
  sc.feature_dim = 0;
  const SyntheticData data = gen_synthetic_dataset(sc, seed);
  const SceneRecord& rec = data.split.records.front();
  const LayoutTensor t = model.rasterize(rec);
  std::vector<double> params = model.init_params<double>(seed);
  Rng rng = Rng(seed).fork(0xa0d17);
  for (auto& v : params) v += 0.05 * rng.normal();
  std::vector<double> grad(params.size(), 0.0);
  BaselineAuditReport rep;
  rep.loss = model.loss<double>(params, t, rec.command_embedding, rec.destinations, grad.data());
  double diff_sq = 0.0;
  double ref_sq = 0.0;
  // Always include the last layer, where every head-specific term enters.
  std::vector<std::size_t> idx;
  const auto& head = model.layout().find("head.fc2.bias");
  for (std::size_t i = 0; i < std::min<std::size_t>(head.size, 24); ++i) idx.push_back(head.offset + i);
  for (std::size_t i = 0; i < coords; ++i) idx.push_back(rng.below(params.size()));
  for (std::size_t j : idx) {
    const double orig = params[j];
    params[j] = orig + step;
    const double lp = model.loss<double>(params, t, rec.command_embedding, rec.destinations, nullptr);
    params[j] = orig - step;
    const double lm = model.loss<double>(params, t, rec.command_embedding, rec.destinations, nullptr);
    params[j] = orig;
    const double numeric = (lp - lm) / (2.0 * step);
    diff_sq += (grad[j] - numeric) * (grad[j] - numeric);
    ref_sq += numeric * numeric;
  }
  rep.checked = idx.size();
  rep.rel_error = std::sqrt(diff_sq) / std::max(std::sqrt(ref_sq), 1e-300);
  return rep;
}

// ---------------------------------------------------------------------------

std::string_view to_string(NaiveKind k) noexcept {
  switch (k) {
    case NaiveKind::kRandomPoint: return "random_point";
    case NaiveKind::kRandomRoadPoint: return "random_road_point";
    case NaiveKind::kPickEgo: return "pick_ego";
    case NaiveKind::kRandomObject: return "random_object";
    case NaiveKind::kPickReferred: return "pick_referred";
  }
  return "?";
}

NaiveKind parse_naive_kind(std::string_view s) {
  std::string norm(s);
  std::replace(norm.begin(), norm.end(), '-', '_');
  for (NaiveKind k : {NaiveKind::kRandomPoint, NaiveKind::kRandomRoadPoint, NaiveKind::kPickEgo,
                      NaiveKind::kRandomObject, NaiveKind::kPickReferred}) {
    if (norm == to_string(k)) return k;
  }
  throw InvalidArgument("unknown naive baseline '" + std::string(s) + "'");
}

namespace {

std::vector<std::size_t> road_pixels(const SceneRecord& rec, const NaiveOptions& opts) {
  RasterOptions ro;
  ro.base_dir = opts.base_dir;
  const LayoutTensor t = rasterize_scene(rec, opts.mask_height, opts.mask_width, ro);
  const std::vector<std::uint8_t> mask = road_mask(t);
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i]) idx.push_back(i);
  }
  if (idx.empty()) throw InvalidArgument("record " + rec.id + " has no drivable pixels");
  return idx;
}

EgoPoint draw_naive(const SceneRecord& rec, NaiveKind kind, Rng& rng, const NaiveOptions& opts,
                    const std::vector<std::size_t>* road) {
  switch (kind) {
    case NaiveKind::kRandomPoint:
      return {rng.uniform(kMapMinX, kMapMaxX), rng.uniform(kMapMinY, kMapMaxY)};
    case NaiveKind::kRandomRoadPoint: {
      const std::size_t i = (*road)[rng.below(road->size())];
      const double u = static_cast<double>(i % opts.mask_width) + rng.uniform();
      const double v = static_cast<double>(i / opts.mask_width) + rng.uniform();
      return pixel_to_ego({u, v}, PixelFrame(opts.mask_width, opts.mask_height));
    }
    case NaiveKind::kPickEgo:
      return rec.ego_box.center;
    case NaiveKind::kRandomObject:
      if (rec.objects.empty()) throw InvalidArgument("record " + rec.id + " has no objects to pick from");
      return rec.objects[rng.below(rec.objects.size())].box.center;
    case NaiveKind::kPickReferred:
      if (const SceneObject* o = rec.referred()) return o->box.center;
      throw InvalidArgument("record " + rec.id + " has no referred object");
  }
  throw InvalidArgument("unknown naive baseline");
}

}  // namespace

EgoPoint naive_baseline(const SceneRecord& rec, NaiveKind kind, Rng& rng, const NaiveOptions& opts) {
  std::vector<std::size_t> road;
  if (kind == NaiveKind::kRandomRoadPoint) road = road_pixels(rec, opts);
  return draw_naive(rec, kind, rng, opts, &road);
}

DestinationSampler naive_sampler(NaiveKind kind, NaiveOptions opts) {
  return [kind, opts](const SceneRecord& rec, std::size_t n, Rng& rng) {
    std::vector<std::size_t> road;
    if (kind == NaiveKind::kRandomRoadPoint) road = road_pixels(rec, opts);
    std::vector<EgoPoint> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(draw_naive(rec, kind, rng, opts, &road));
    return out;
  };
}

DestinationSampler baseline_sampler(const LoadedBaseline& m, std::string base_dir) {
  return [&m, base_dir](const SceneRecord& rec, std::size_t n, Rng& rng) {
    const BaselinePrediction pred = predict_baseline(m, rec, base_dir);
    if (const auto* p = std::get_if<EgoPoint>(&pred)) return std::vector<EgoPoint>(n, *p);
    if (const auto* mix = std::get_if<Mixture2D>(&pred)) return sample(*mix, n, rng);
    return std::get<NonParamDistribution>(pred).sample(n, rng);
  };
}

DestinationSampler mixture_sampler(std::function<Mixture2D(const SceneRecord&)> predict) {
  return [predict = std::move(predict)](const SceneRecord& rec, std::size_t n, Rng& rng) {
    return sample(predict(rec), n, rng);
  };
}

}  // namespace cmdgoal
