#include "cmdgoal/pdpc.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cmdgoal/error.hpp"
#include "cmdgoal/parallel.hpp"
#include "cmdgoal/synthetic.hpp"

namespace cmdgoal {

using nn::Tensor;

PdpcConfig PdpcConfig::full() { return PdpcConfig{}; }

PdpcConfig PdpcConfig::desk() {
  PdpcConfig c;
  c.height = 96;
  c.width = 144;
  c.scales = {4, 8};
  c.channels = 64;
  return c;
}

PdpcConfig PdpcConfig::audit() {
  PdpcConfig c;
  c.height = 24;
  c.width = 36;
  c.scales = {2, 4};
  c.channels = 8;
  c.norm_groups = 4;
  c.command_hidden = 16;
  return c;
}

void PdpcConfig::validate() const {
  PixelFrame(width, height);  // throws on bad aspect
  if (scales.empty()) throw InvalidArgument("at least one scale is required");
  for (std::size_t i = 0; i < scales.size(); ++i) {
    const int k = scales[i];
    if (k < 2 || (k & (k - 1)) != 0) throw InvalidArgument("scale " + std::to_string(k) + " is not a power of two >= 2");
    if (i > 0 && k != 2 * scales[i - 1]) throw InvalidArgument("scales must be consecutive powers of two");
    if (height % k != 0 || width % k != 0) {
      throw InvalidArgument("input " + std::to_string(height) + "x" + std::to_string(width) +
                            " not divisible by scale " + std::to_string(k));
    }
  }
  if (channels <= 0) throw InvalidArgument("channels must be positive");
  if (norm_groups <= 0 || channels % norm_groups != 0) throw InvalidArgument("channels not divisible by norm_groups");
  if (shared_blocks < 1) throw InvalidArgument("shared_blocks must be >= 1");
  if (attention_after_block < 1 || attention_after_block > shared_blocks) {
    throw InvalidArgument("attention_after_block must lie in [1, shared_blocks]");
  }
  if (command_hidden <= 0) throw InvalidArgument("command_hidden must be positive");
  if (!(scale_init > 0.0) || !std::isfinite(scale_init)) throw InvalidArgument("scale_init must be positive");
}

std::size_t PdpcConfig::num_components() const {
  std::size_t n = 0;
  for (int k : scales) n += static_cast<std::size_t>(height / k) * (width / k);
  return n;
}

nlohmann::json to_json(const PdpcConfig& c) {
  return {{"height", c.height},
          {"width", c.width},
          {"scales", c.scales},
          {"channels", c.channels},
          {"shared_blocks", c.shared_blocks},
          {"attention_after_block", c.attention_after_block},
          {"norm_groups", c.norm_groups},
          {"command_hidden", c.command_hidden},
          {"scale_init", c.scale_init},
          {"no_referred_channel", c.no_referred_channel}};
}

PdpcConfig pdpc_config_from_json(const nlohmann::json& j) {
  PdpcConfig c;
  try {
    c.height = j.value("height", c.height);
    c.width = j.value("width", c.width);
    if (j.contains("scales")) c.scales = j.at("scales").get<std::vector<int>>();
    c.channels = j.value("channels", c.channels);
    c.shared_blocks = j.value("shared_blocks", c.shared_blocks);
    c.attention_after_block = j.value("attention_after_block", c.attention_after_block);
    c.norm_groups = j.value("norm_groups", c.norm_groups);
    c.command_hidden = j.value("command_hidden", c.command_hidden);
    c.scale_init = j.value("scale_init", c.scale_init);
    c.no_referred_channel = j.value("no_referred_channel", c.no_referred_channel);
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("pdpc config: ") + e.what());
  }
  c.validate();
  return c;
}

PixelPoint grid_anchor(int w, int h, int k, int grid_w, int grid_h) {
  if (k <= 0) throw InvalidArgument("downsample rate must be positive");
  if (w < 0 || h < 0 || w >= grid_w || h >= grid_h) {
    throw InvalidArgument("cell (" + std::to_string(w) + ", " + std::to_string(h) + ") outside " +
                          std::to_string(grid_w) + "x" + std::to_string(grid_h) + " grid");
  }
  return {static_cast<double>(w * k + k / 2), static_cast<double>(h * k + k / 2)};
}

// ---------------------------------------------------------------------------

template <typename T>
AttentionResult<T> command_attention(const Tensor<T>& features, std::span<const T> query) {
  if (query.size() != static_cast<std::size_t>(features.c)) {
    throw ShapeMismatch("attention query has " + std::to_string(query.size()) + " dims, features have " +
                        std::to_string(features.c) + " channels");
  }
  const std::size_t n = features.plane();
  std::vector<double> logits(n, 0.0);
  for (int c = 0; c < features.c; ++c) {
    const T* f = features.channel(c);
    const double q = query[c];
    for (std::size_t i = 0; i < n; ++i) logits[i] += q * f[i];
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (auto& l : logits) sum += (l = std::exp(l - mx));
  AttentionResult<T> r;
  r.weights.resize(n);
  for (std::size_t i = 0; i < n; ++i) r.weights[i] = static_cast<T>(logits[i] / sum);
  r.features.resize(features.c, features.h, features.w);
  for (int c = 0; c < features.c; ++c) {
    const T* f = features.channel(c);
    T* o = r.features.channel(c);
    for (std::size_t i = 0; i < n; ++i) o[i] = f[i] * r.weights[i];
  }
  return r;
}

template <typename T>
void command_attention_backward(const Tensor<T>& features, std::span<const T> query, const std::vector<T>& weights,
                                const Tensor<T>& dout, Tensor<T>& dfeatures, std::span<T> dquery) {
  const std::size_t n = features.plane();
  std::vector<double> g(n, 0.0);
  for (int c = 0; c < features.c; ++c) {
    const T* f = features.channel(c);
    const T* d = dout.channel(c);
    for (std::size_t i = 0; i < n; ++i) g[i] += static_cast<double>(d[i]) * f[i];
  }
  double mean_g = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean_g += weights[i] * g[i];
  std::vector<double> dlogit(n);
  for (std::size_t i = 0; i < n; ++i) dlogit[i] = weights[i] * (g[i] - mean_g);
  if (!dfeatures.same_shape(features)) dfeatures.resize(features.c, features.h, features.w);
  for (int c = 0; c < features.c; ++c) {
    const T* f = features.channel(c);
    const T* d = dout.channel(c);
    T* df = dfeatures.channel(c);
    const double q = query[c];
    double dq = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      df[i] += static_cast<T>(d[i] * weights[i] + q * dlogit[i]);
      dq += dlogit[i] * f[i];
    }
    dquery[c] += static_cast<T>(dq);
  }
}

template AttentionResult<float> command_attention(const Tensor<float>&, std::span<const float>);
template AttentionResult<double> command_attention(const Tensor<double>&, std::span<const double>);
template void command_attention_backward(const Tensor<float>&, std::span<const float>, const std::vector<float>&,
                                         const Tensor<float>&, Tensor<float>&, std::span<float>);
template void command_attention_backward(const Tensor<double>&, std::span<const double>, const std::vector<double>&,
                                         const Tensor<double>&, Tensor<double>&, std::span<double>);

// ---------------------------------------------------------------------------

namespace {

int level_index(int k) {
  int li = 0;
  while ((2 << li) < k) ++li;
  return li;  // k = 2 << li
}

}  // namespace

PdpcModel::PdpcModel(PdpcConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  const int C = cfg_.channels;
  const int G = cfg_.norm_groups;
  for (int k = 2; k <= cfg_.scales.back(); k *= 2) levels_.push_back(k);
  m_.stem = nn::ConvGnRelu::make(layout_, "enc.stem", kLayoutChannels, C, 2, G);
  for (std::size_t li = 1; li < levels_.size(); ++li) {
    m_.down.push_back(nn::ConvGnRelu::make(layout_, "enc.down" + std::to_string(levels_[li]), C, C, 2, G));
  }
  for (int k : cfg_.scales) m_.res.push_back(nn::ResidualBlock::make(layout_, "enc.res" + std::to_string(k), C, G));
  for (int k : cfg_.scales) {
    m_.lateral.push_back(nn::Conv2d::make(layout_, "fpn.lateral" + std::to_string(k), C, C, 1, 1, 0));
  }
  for (int k : cfg_.scales) {
    m_.smooth.push_back(nn::Conv2d::make(layout_, "fpn.smooth" + std::to_string(k), C, C, 3, 1, 1));
  }
  for (int b = 0; b < cfg_.shared_blocks; ++b) {
    m_.shared.push_back(nn::ConvGnRelu::make(layout_, "shared" + std::to_string(b + 1), C, C, 1, G));
  }
  m_.cmd1 = nn::Linear::make(layout_, "cmd.fc1", kCommandDim, cfg_.command_hidden);
  m_.cmd2 = nn::Linear::make(layout_, "cmd.fc2", cfg_.command_hidden, C);
  m_.head = nn::Conv2d::make(layout_, "head", C, 5, 3, 1, 1);
  m_.scale_factor_off = layout_.add("scale_factor", {static_cast<int>(cfg_.scales.size())});
}

template <typename T>
std::vector<T> PdpcModel::init_params(std::uint64_t seed) const {
  std::vector<T> p(num_params(), T(0));
  std::span<T> ps(p);
  Rng rng = Rng(seed).fork(0x70647063);
  m_.stem.init(ps, rng);
  for (const auto& d : m_.down) d.init(ps, rng);
  for (const auto& r : m_.res) r.init(ps, rng);
  for (const auto& l : m_.lateral) l.init(ps, rng);
  for (const auto& s : m_.smooth) s.init(ps, rng);
  for (const auto& b : m_.shared) b.init(ps, rng);
  m_.cmd1.init(ps, rng);
  m_.cmd2.init(ps, rng);
  m_.head.init(ps, rng);
  nn::fill_value(ps.subspan(m_.scale_factor_off, cfg_.scales.size()), cfg_.scale_init);
  return p;
}

template <typename T>
struct PdpcModel::Cache {
  Tensor<T> input;
  nn::ConvGnReluCache<T> stem;
  std::vector<nn::ConvGnReluCache<T>> down;
  std::vector<const Tensor<T>*> level_out;
  std::vector<nn::ResidualCache<T>> res;
  struct Scale {
    nn::ConvCache<T> lateral;
    Tensor<T> pyramid;
    nn::ConvCache<T> smooth;
    Tensor<T> smoothed;
    std::vector<nn::ConvGnReluCache<T>> blocks;
    AttentionResult<T> attention;
    nn::ConvCache<T> head;
    Tensor<T> out;  // 5 x gh x gw
  };
  std::vector<Scale> scales;
  std::vector<T> cmd, hidden, query;
};

LayoutTensor PdpcModel::rasterize(const SceneRecord& rec, const std::string& base_dir) const {
  RasterOptions opts;
  opts.no_referred_channel = cfg_.no_referred_channel;
  opts.base_dir = base_dir;
  return rasterize_scene(rec, cfg_.height, cfg_.width, opts);
}

template <typename T>
PdpcOutput PdpcModel::run(std::span<const T> params, const LayoutTensor& layout, std::span<const float> command,
                          Cache<T>& c) const {
  if (params.size() != num_params()) throw ShapeMismatch("parameter vector size does not match the model");
  if (layout.height() != cfg_.height || layout.width() != cfg_.width) {
    throw ShapeMismatch("layout is " + std::to_string(layout.height()) + "x" + std::to_string(layout.width()) +
                        ", model expects " + std::to_string(cfg_.height) + "x" + std::to_string(cfg_.width));
  }
  if (command.size() != static_cast<std::size_t>(kCommandDim)) {
    throw ShapeMismatch("command embedding has " + std::to_string(command.size()) + " dims, expected " +
                        std::to_string(kCommandDim));
  }
  for (const T v : params) {
    if (!std::isfinite(static_cast<double>(v))) throw InvalidArgument("non-finite model parameters");
  }
  const std::size_t ns = cfg_.scales.size();
  for (std::size_t si = 0; si < ns; ++si) {
    if (!(params[m_.scale_factor_off + si] > T(0))) {
      throw InvalidArgument("scale factor " + std::to_string(si) + " is not positive");
    }
  }
  const T* p = params.data();

  c.input.resize(kLayoutChannels, cfg_.height, cfg_.width);
  std::transform(layout.data().begin(), layout.data().end(), c.input.v.begin(),
                 [](float v) { return static_cast<T>(v); });

  // Encoder.
  const int kmin = cfg_.scales.front();
  c.down.resize(m_.down.size());
  c.res.resize(ns);
  c.level_out.assign(levels_.size(), nullptr);
  for (std::size_t li = 0; li < levels_.size(); ++li) {
    const Tensor<T>* x = li == 0 ? &m_.stem.forward(p, c.input, c.stem)
                                 : &m_.down[li - 1].forward(p, *c.level_out[li - 1], c.down[li - 1]);
    if (levels_[li] >= kmin) {
      const std::size_t si = li - level_index(kmin);
      x = &m_.res[si].forward(p, *x, c.res[si]);
    }
    c.level_out[li] = x;
  }

  // Command projection.
  c.cmd.assign(command.begin(), command.end());
  c.hidden.assign(cfg_.command_hidden, T(0));
  c.query.assign(cfg_.channels, T(0));
  m_.cmd1.forward(p, c.cmd.data(), c.hidden.data());
  for (auto& h : c.hidden) h = h > T(0) ? h : T(0);
  m_.cmd2.forward(p, c.hidden.data(), c.query.data());

  // Pyramid, top-down.
  c.scales.resize(ns);
  for (std::size_t si = ns; si-- > 0;) {
    auto& sc = c.scales[si];
    const std::size_t li = level_index(cfg_.scales[si]);
    m_.lateral[si].forward(p, *c.level_out[li], sc.pyramid, sc.lateral);
    if (si + 1 < ns) nn::add_upsampled2x(c.scales[si + 1].pyramid, sc.pyramid);
  }

  std::vector<GaussComponent> comps;
  comps.reserve(cfg_.num_components());
  PdpcOutput out{Mixture2D({{{0.0, 0.0}, DiagScale{}, 0.0}}), {}};
  const PixelFrame frame(cfg_.width, cfg_.height);
  const double s = frame.scale();
  for (std::size_t si = 0; si < ns; ++si) {
    auto& sc = c.scales[si];
    m_.smooth[si].forward(p, sc.pyramid, sc.smoothed, sc.smooth);
    sc.blocks.resize(m_.shared.size());
    const Tensor<T>* x = &sc.smoothed;
    for (std::size_t b = 0; b < m_.shared.size(); ++b) {
      x = &m_.shared[b].forward(p, *x, sc.blocks[b]);
      if (static_cast<int>(b) + 1 == cfg_.attention_after_block) {
        sc.attention = command_attention<T>(*x, std::span<const T>(c.query));
        x = &sc.attention.features;
      }
    }
    m_.head.forward(p, *x, sc.out, sc.head);

    ScaleGrid grid;
    grid.k = cfg_.scales[si];
    grid.grid_w = sc.out.w;
    grid.grid_h = sc.out.h;
    const std::size_t plane = sc.out.plane();
    grid.offset.assign(sc.out.channel(0), sc.out.channel(0) + 2 * plane);
    grid.sigma_pred.assign(sc.out.channel(2), sc.out.channel(2) + 2 * plane);
    grid.logit.assign(sc.out.channel(4), sc.out.channel(4) + plane);
    grid.attention.assign(sc.attention.weights.begin(), sc.attention.weights.end());
    grid.scale_factor = static_cast<double>(p[m_.scale_factor_off + si]);
    for (int h = 0; h < grid.grid_h; ++h) {
      for (int w = 0; w < grid.grid_w; ++w) {
        const std::size_t i = static_cast<std::size_t>(h) * grid.grid_w + w;
        const PixelPoint a = grid_anchor(w, h, grid.k, grid.grid_w, grid.grid_h);
        const PixelPoint mu{a.u + grid.offset[i], a.v + grid.offset[plane + i]};
        const double sx = grid.scale_factor * nn::positive_scale(grid.sigma_pred[i]) / s;
        const double sy = grid.scale_factor * nn::positive_scale(grid.sigma_pred[plane + i]) / s;
        comps.push_back({pixel_to_ego(mu, frame), DiagScale{sx, sy}, grid.logit[i]});
      }
    }
    out.grids.push_back(std::move(grid));
  }
  out.mixture = Mixture2D(std::move(comps));
  return out;
}

template <typename T>
PdpcOutput PdpcModel::forward(std::span<const T> params, const LayoutTensor& layout,
                              std::span<const float> command) const {
  Cache<T> cache;
  return run(params, layout, command, cache);
}

template <typename T>
double PdpcModel::loss(std::span<const T> params, const LayoutTensor& layout, std::span<const float> command,
                       std::span<const EgoPoint> targets, T* grad) const {
  Cache<T> c;
  const PdpcOutput out = run(params, layout, command, c);
  if (!grad) return nll_loss(out.mixture, targets);
  const MixtureGrad mg = nll_grad(out.mixture, targets);
  const T* p = params.data();
  const double s = PixelFrame(cfg_.width, cfg_.height).scale();
  const std::size_t ns = cfg_.scales.size();

  std::vector<T> dquery(cfg_.channels, T(0));
  std::vector<Tensor<T>> dpyr(ns);
  std::size_t comp = 0;
  for (std::size_t si = 0; si < ns; ++si) {
    auto& sc = c.scales[si];
    const ScaleGrid& grid = out.grids[si];
    const std::size_t plane = sc.out.plane();
    Tensor<T> dout(5, grid.grid_h, grid.grid_w);
    T* doff = dout.channel(0);
    T* dsig = dout.channel(2);
    T* dlogit = dout.channel(4);
    double dscale = 0.0;
    for (std::size_t i = 0; i < plane; ++i, ++comp) {
      const ComponentGrad& g = mg.components[comp];
      doff[i] = static_cast<T>(g.d_mean_x / s);
      doff[plane + i] = static_cast<T>(-g.d_mean_y / s);
      const double p0 = grid.sigma_pred[i];
      const double p1 = grid.sigma_pred[plane + i];
      dsig[i] = static_cast<T>(g.d_scale[0] * grid.scale_factor * nn::elu_grad(p0) / s);
      dsig[plane + i] = static_cast<T>(g.d_scale[1] * grid.scale_factor * nn::elu_grad(p1) / s);
      dscale += (g.d_scale[0] * nn::positive_scale(p0) + g.d_scale[1] * nn::positive_scale(p1)) / s;
      dlogit[i] = static_cast<T>(g.d_log_weight);
    }
    grad[m_.scale_factor_off + si] += static_cast<T>(dscale);

    Tensor<T> dx;
    m_.head.backward(p, sc.head, dout, &dx, grad);

    for (std::size_t b = m_.shared.size(); b-- > 0;) {
      if (static_cast<int>(b) + 1 == cfg_.attention_after_block) {
        Tensor<T> datt;
        command_attention_backward<T>(sc.blocks[b].out, std::span<const T>(c.query), sc.attention.weights, dx, datt,
                                      std::span<T>(dquery));
        dx = std::move(datt);
      }
      Tensor<T> dprev;
      m_.shared[b].backward(p, sc.blocks[b], dx, &dprev, grad);
      dx = std::move(dprev);
    }
    m_.smooth[si].backward(p, sc.smooth, dx, &dpyr[si], grad);
  }

  // Pyramid adjoint, fine to coarse.
  std::vector<Tensor<T>> dlevel(levels_.size());
  for (std::size_t li = 0; li < levels_.size(); ++li) {
    dlevel[li].resize(c.level_out[li]->c, c.level_out[li]->h, c.level_out[li]->w);
  }
  for (std::size_t si = 0; si < ns; ++si) {
    if (si + 1 < ns) nn::add_downsampled_sum2x(dpyr[si], dpyr[si + 1]);
    const std::size_t li = level_index(cfg_.scales[si]);
    Tensor<T> dx;
    m_.lateral[si].backward(p, c.scales[si].lateral, dpyr[si], &dx, grad);
    for (std::size_t i = 0; i < dx.v.size(); ++i) dlevel[li].v[i] += dx.v[i];
  }

  // Encoder, coarse to fine.
  const int kmin = cfg_.scales.front();
  for (std::size_t li = levels_.size(); li-- > 0;) {
    Tensor<T> dx = std::move(dlevel[li]);
    if (levels_[li] >= kmin) {
      const std::size_t si = li - level_index(kmin);
      Tensor<T> dpre;
      m_.res[si].backward(p, c.res[si], dx, dpre, grad);
      dx = std::move(dpre);
    }
    if (li == 0) {
      m_.stem.backward(p, c.stem, dx, static_cast<Tensor<T>*>(nullptr), grad);
    } else {
      Tensor<T> dprev;
      m_.down[li - 1].backward(p, c.down[li - 1], dx, &dprev, grad);
      for (std::size_t i = 0; i < dprev.v.size(); ++i) dlevel[li - 1].v[i] += dprev.v[i];
    }
  }

  // Command MLP.
  std::vector<T> dhidden(cfg_.command_hidden, T(0));
  m_.cmd2.backward(p, c.hidden.data(), dquery.data(), dhidden.data(), grad);
  for (std::size_t i = 0; i < dhidden.size(); ++i) {
    if (!(c.hidden[i] > T(0))) dhidden[i] = T(0);
  }
  m_.cmd1.backward(p, c.cmd.data(), dhidden.data(), static_cast<T*>(nullptr), grad);
  return mg.loss;
}

template std::vector<float> PdpcModel::init_params(std::uint64_t) const;
template std::vector<double> PdpcModel::init_params(std::uint64_t) const;
template PdpcOutput PdpcModel::forward(std::span<const float>, const LayoutTensor&, std::span<const float>) const;
template PdpcOutput PdpcModel::forward(std::span<const double>, const LayoutTensor&, std::span<const float>) const;
template double PdpcModel::loss(std::span<const float>, const LayoutTensor&, std::span<const float>,
                                std::span<const EgoPoint>, float*) const;
template double PdpcModel::loss(std::span<const double>, const LayoutTensor&, std::span<const float>,
                                std::span<const EgoPoint>, double*) const;

// ---------------------------------------------------------------------------

namespace {

/// Layouts are cached when they fit in this many bytes, rasterized per use otherwise.
constexpr std::size_t kLayoutCacheBytes = std::size_t{1} << 30;

class PdpcObjective : public Objective {
 public:
  PdpcObjective(const PdpcModel& model, const DatasetSplit& data, std::string base_dir)
      : model_(model), data_(data), base_dir_(std::move(base_dir)) {
    const auto& cfg = model.config();
    const std::size_t bytes = data.records.size() * kLayoutChannels * cfg.height * cfg.width * sizeof(float);
    if (bytes <= kLayoutCacheBytes) {
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
  const PdpcModel& model_;
  const DatasetSplit& data_;
  std::string base_dir_;
  std::vector<LayoutTensor> cache_;
};

}  // namespace

Checkpoint pdpc_checkpoint(const PdpcModel& model, const std::vector<float>& params, const TrainConfig& tcfg,
                           int epoch) {
  Checkpoint c;
  c.model_kind = ModelKind::kPdpc;
  c.config = {{"model", to_json(model.config())}, {"train", to_json(tcfg)}};
  c.parameters = pack_parameters(model.layout(), params);
  c.rng_seed = tcfg.seed;
  c.epoch = epoch;
  return c;
}

LoadedPdpc load_pdpc(const Checkpoint& c) {
  if (c.model_kind != ModelKind::kPdpc) {
    throw SchemaError("checkpoint holds a " + std::string(to_string(c.model_kind)) + " model, not pdpc");
  }
  if (!c.config.contains("model")) throw SchemaError("pdpc checkpoint lacks a model config");
  PdpcModel model(pdpc_config_from_json(c.config.at("model")));
  std::vector<float> params = unpack_parameters(model.layout(), c.parameters);
  return {std::move(model), std::move(params)};
}

TrainConfig default_pdpc_train_config(bool desk) {
  TrainConfig t;
  t.clip_norm = 5.0;
  if (!desk) {
    t.adam.lr = 3e-5;
    t.batch_size = 32;
    t.max_epochs = 50;
    return t;
  }
  t.adam.lr = 1e-3;
  t.batch_size = 16;
  t.max_epochs = 20;
  t.plateau_patience = 1;
  t.plateau_factor = 0.3;
  t.early_stop_patience = 4;
  return t;
}

PdpcTrainResult train_pdpc(const DatasetSplit& train_split, const DatasetSplit& val, const PdpcConfig& cfg,
                           const TrainConfig& tcfg, const std::string& base_dir) {
  if (train_split.records.empty()) throw InvalidArgument("training split is empty");
  const PdpcModel model(cfg);
  const PdpcObjective objective(model, train_split, base_dir);
  std::optional<PdpcObjective> val_objective;
  Validation validation;
  if (!val.records.empty()) {
    val_objective.emplace(model, val, base_dir);
    validation.score = [&](std::span<const float> params) { return mean_loss(*val_objective, params, tcfg.threads); };
  }
  TrainResult tr = train(objective, model.init_params<float>(tcfg.seed), tcfg,
                         val.records.empty() ? nullptr : &validation);
  PdpcTrainResult out;
  out.checkpoint = pdpc_checkpoint(model, tr.best_params, tcfg, tr.best_epoch);
  out.train = std::move(tr);
  return out;
}

Mixture2D predict(const LoadedPdpc& m, const SceneRecord& rec, std::optional<std::size_t> top_k,
                  const std::string& base_dir) {
  const LayoutTensor t = m.model.rasterize(rec, base_dir);
  PdpcOutput out = m.model.forward<float>(m.params, t, rec.command_embedding);
  if (top_k) return top_k_truncate(out.mixture, *top_k);
  return std::move(out.mixture);
}

double mean_nll(const LoadedPdpc& m, const DatasetSplit& split, int threads, const std::string& base_dir) {
  const PdpcObjective objective(m.model, split, base_dir);
  return mean_loss(objective, m.params, threads);
}

GradAuditReport audit_pdpc_gradient(const PdpcConfig& cfg, std::uint64_t seed, std::size_t coords, double step) {
  const PdpcModel model(cfg);
  SynthConfig sc;
  sc.num_records = 1;
  sc.feature_dim = 0;
  const SyntheticData data = gen_synthetic_dataset(sc, seed);
  const SceneRecord& rec = data.split.records.front();
  const LayoutTensor t = model.rasterize(rec);

  std::vector<double> params = model.init_params<double>(seed);
  // Perturb biases and norm parameters away from their initial constants so
  // their gradients are exercised at a generic point.
  Rng rng = Rng(seed).fork(0xa0d17);
  for (auto& v : params) v += 0.05 * rng.normal();
  for (std::size_t si = 0; si < cfg.scales.size(); ++si) {
    params[model.layout().find("scale_factor").offset + si] = 1.0 + 0.2 * rng.uniform();
  }
  std::vector<double> grad(params.size(), 0.0);
  GradAuditReport rep;
  rep.loss = model.loss<double>(params, t, rec.command_embedding, rec.destinations, grad.data());

  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < coords; ++i) idx.push_back(rng.below(params.size()));
  const auto& sf = model.layout().find("scale_factor");
  for (std::size_t i = 0; i < sf.size; ++i) idx.push_back(sf.offset + i);

  double diff_sq = 0.0;
  double ref_sq = 0.0;
  for (std::size_t j : idx) {
    const double orig = params[j];
    params[j] = orig + step;
    const double lp = model.loss<double>(params, t, rec.command_embedding, rec.destinations, nullptr);
    params[j] = orig - step;
    const double lm = model.loss<double>(params, t, rec.command_embedding, rec.destinations, nullptr);
    params[j] = orig;
    const double numeric = (lp - lm) / (2.0 * step);
    const double d = grad[j] - numeric;
    diff_sq += d * d;
    ref_sq += numeric * numeric;
    rep.max_abs_error = std::max(rep.max_abs_error, std::abs(d));
  }
  rep.checked = idx.size();
  rep.rel_error = std::sqrt(diff_sq) / std::max(std::sqrt(ref_sq), 1e-300);
  return rep;
}

}  // namespace cmdgoal
