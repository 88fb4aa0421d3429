#include <doctest.h>

#include <cmath>
#include <cstring>
#include <limits>

#include "cmdgoal/checkpoint.hpp"
#include "cmdgoal/nn/layers.hpp"
#include "cmdgoal/error.hpp"
#include "cmdgoal/pdpc.hpp"
#include "cmdgoal/synthetic.hpp"
#include "test_util.hpp"

using namespace cmdgoal;

namespace {

SyntheticData records(std::size_t n, std::uint64_t seed) {
  SynthConfig c;
  c.num_records = n;
  c.feature_dim = 0;
  return gen_synthetic_dataset(c, seed);
}

void zero_slice(const nn::ParamLayout& pl, const std::string& name, std::vector<double>& p) {
  const auto& s = pl.find(name);
  std::fill(p.begin() + s.offset, p.begin() + s.offset + s.size, 0.0);
}

// Float results of one conv + group norm + linear forward/backward pass, with
// parameters and gradients placed `shift` floats into their buffers and
// `pad` floats of unrelated heap allocated first to move the activations.
std::vector<float> layer_pass(int shift, int pad) {
  nn::ParamLayout pl;
  const auto conv = nn::Conv2d::make(pl, "c", 5, 16, 3, 2, 1);
  const auto norm = nn::GroupNorm::make(pl, "n", 16, 4);
  const auto lin = nn::Linear::make(pl, "l", 16 * 6 * 9, 23);
  Rng rng(17);
  std::vector<float> pbuf(pl.total() + shift), gbuf(pl.total() + shift, 0.0f);
  std::span<float> params(pbuf.data() + shift, pl.total());
  conv.init(params, rng);
  norm.init(params);
  lin.init(params, rng);
  for (int c = 0; c < 16; ++c) {
    params[norm.gamma_off + c] = static_cast<float>(1.0 + 0.1 * rng.normal());
    params[norm.beta_off + c] = static_cast<float>(0.1 * rng.normal());
  }
  std::vector<float> filler(static_cast<std::size_t>(pad) + 1, 1.0f);
  nn::Tensor<float> x(5, 12, 18);
  for (auto& v : x.v) v = static_cast<float>(rng.normal());
  nn::Tensor<float> a, b, dy(23, 1, 1), da, db, dx;
  for (auto& v : dy.v) v = static_cast<float>(rng.normal());
  nn::ConvCache<float> cc;
  nn::GroupNormCache<float> nc;
  std::vector<float> out(23), dflat(lin.in);
  conv.forward(params.data(), x, a, cc);
  norm.forward(params.data(), a, b, nc);
  lin.forward(params.data(), b.data(), out.data());
  float* g = gbuf.data() + shift;
  lin.backward(params.data(), b.data(), dy.data(), dflat.data(), g);
  db.resize(b.c, b.h, b.w);
  std::copy(dflat.begin(), dflat.end(), db.v.begin());
  norm.backward(params.data(), nc, db, da, g);
  conv.backward(params.data(), cc, da, &dx, g);
  std::vector<float> all(out);
  all.insert(all.end(), b.v.begin(), b.v.end());
  all.insert(all.end(), dx.v.begin(), dx.v.end());
  all.insert(all.end(), g, g + pl.total());
  return all;
}

}  // namespace

TEST_SUITE("pdpc") {
  TEST_CASE("component counts") {
    CHECK(PdpcConfig::full().num_components() == 4590);
    CHECK(PdpcConfig::full().num_components() == 48 * 72 + 24 * 36 + 12 * 18 + 6 * 9);
    CHECK(PdpcConfig::desk().num_components() == 24 * 36 + 12 * 18);
    CHECK(PdpcConfig::audit().num_components() == 12 * 18 + 6 * 9);
  }

  TEST_CASE("config validation") {
    CHECK_NOTHROW(PdpcConfig::full().validate());
    CHECK_NOTHROW(PdpcConfig::desk().validate());
    auto c = PdpcConfig::desk();
    c.scales = {4, 16};
    CHECK_THROWS_AS(c.validate(), InvalidArgument);
    c = PdpcConfig::desk();
    c.scales = {4, 8, 16, 32, 64};
    CHECK_THROWS_AS(c.validate(), InvalidArgument);
    c = PdpcConfig::desk();
    c.attention_after_block = 6;
    CHECK_THROWS_AS(c.validate(), InvalidArgument);
    c.attention_after_block = 0;
    CHECK_THROWS_AS(c.validate(), InvalidArgument);
    c = PdpcConfig::desk();
    c.norm_groups = 7;
    CHECK_THROWS_AS(c.validate(), InvalidArgument);
    c = PdpcConfig::desk();
    c.height = 100;
    CHECK_THROWS_AS(c.validate(), InvalidArgument);
    const auto back = pdpc_config_from_json(to_json(PdpcConfig::desk()));
    CHECK(to_json(back) == to_json(PdpcConfig::desk()));
  }

  TEST_CASE("anchors") {
    CHECK(grid_anchor(0, 0, 4, 72, 48) == PixelPoint{2, 2});
    CHECK(grid_anchor(5, 0, 8, 36, 24).u == 44);
    CHECK(grid_anchor(0, 0, 2, 18, 12).u == 1);
    CHECK_THROWS_AS(grid_anchor(72, 0, 4, 72, 48), InvalidArgument);
    CHECK_THROWS_AS(grid_anchor(0, -1, 4, 72, 48), InvalidArgument);
    for (int k : {4, 8, 16, 32}) {
      const int gw = 288 / k, gh = 192 / k;
      for (int h = 0; h < gh; ++h) {
        for (int w = 0; w + 1 < gw; ++w) {
          CHECK(grid_anchor(w + 1, h, k, gw, gh).u - grid_anchor(w, h, k, gw, gh).u == k);
        }
      }
      CHECK(grid_anchor(gw - 1, gh - 1, k, gw, gh).u == 288 - k / 2);
    }
  }

  TEST_CASE("command attention") {
    nn::Tensor<double> f(3, 2, 4);
    for (int c = 0; c < 3; ++c) {
      for (int i = 0; i < 8; ++i) f.channel(c)[i] = 0.5 + c;
    }
    const std::vector<double> q{0.3, -1.0, 2.0};
    const auto r = command_attention<double>(f, q);
    for (double w : r.weights) CHECK(w == doctest::Approx(1.0 / 8));
    CHECK(r.features.at(1, 1, 2) == doctest::Approx(1.5 / 8));

    Rng rng(1);
    for (auto& v : f.v) v = rng.normal();
    const auto a = command_attention<double>(f, q);
    double s = 0.0;
    for (double w : a.weights) s += w;
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    // Doubling cell 3's alignment (all channels scaled by 2 when its logit is positive).
    double logit = 0.0;
    for (int c = 0; c < 3; ++c) logit += q[c] * f.channel(c)[3];
    if (logit < 0) {
      for (int c = 0; c < 3; ++c) f.channel(c)[3] = -f.channel(c)[3];
    }
    const auto before = command_attention<double>(f, q).weights[3];
    for (int c = 0; c < 3; ++c) f.channel(c)[3] *= 2;
    CHECK(command_attention<double>(f, q).weights[3] > before);
    const std::vector<double> bad{1.0, 2.0};
    CHECK_THROWS_AS(command_attention<double>(f, bad), ShapeMismatch);
  }

  TEST_CASE("attention backward matches finite differences") {
    Rng rng(2);
    nn::Tensor<double> f(4, 3, 5), dout(4, 3, 5);
    for (auto& v : f.v) v = rng.normal();
    for (auto& v : dout.v) v = rng.normal();
    std::vector<double> q{0.4, -0.2, 0.9, 0.1};
    auto objective = [&](const nn::Tensor<double>& ff, const std::vector<double>& qq) {
      const auto r = command_attention<double>(ff, qq);
      double s = 0.0;
      for (std::size_t i = 0; i < r.features.v.size(); ++i) s += r.features.v[i] * dout.v[i];
      return s;
    };
    const auto r = command_attention<double>(f, q);
    nn::Tensor<double> df(4, 3, 5);
    std::vector<double> dq(4, 0.0);
    command_attention_backward<double>(f, q, r.weights, dout, df, dq);
    const double h = 1e-6;
    for (std::size_t i = 0; i < f.v.size(); i += 7) {
      auto fp = f, fm = f;
      fp.v[i] += h;
      fm.v[i] -= h;
      CHECK(df.v[i] == doctest::Approx((objective(fp, q) - objective(fm, q)) / (2 * h)).epsilon(1e-6));
    }
    for (std::size_t i = 0; i < q.size(); ++i) {
      auto qp = q, qm = q;
      qp[i] += h;
      qm[i] -= h;
      CHECK(dq[i] == doctest::Approx((objective(f, qp) - objective(f, qm)) / (2 * h)).epsilon(1e-6));
    }
  }

  TEST_CASE("forward output contract") {
    const PdpcModel model(PdpcConfig::audit());
    const auto d = records(3, 5);
    auto params = model.init_params<double>(3);
    for (const auto& rec : d.split.records) {
      const auto layout = model.rasterize(rec);
      const auto out = model.forward<double>(params, layout, rec.command_embedding);
      CHECK(out.mixture.size() == model.config().num_components());
      double s = 0.0;
      for (double w : out.mixture.weights()) s += w;
      CHECK(std::abs(s - 1.0) < 1e-9);
      REQUIRE(out.grids.size() == 2);
      for (const auto& g : out.grids) {
        double a = 0.0;
        for (double w : g.attention) a += w;
        CHECK(a == doctest::Approx(1.0));
      }
      const double scale = layout.frame().scale();
      for (const auto& c : out.mixture.components()) {
        const auto& ds = std::get<DiagScale>(c.scale);
        CHECK(ds.sx >= 1e-5 / scale);
        CHECK(ds.sy >= 1e-5 / scale);
      }
    }
  }

  TEST_CASE("zero head gives means at the anchors in scale-major row order") {
    const PdpcModel model(PdpcConfig::audit());
    auto params = model.init_params<double>(4);
    zero_slice(model.layout(), "head.weight", params);
    zero_slice(model.layout(), "head.bias", params);
    const auto rec = records(1, 6).split.records[0];
    const auto layout = model.rasterize(rec);
    const auto out = model.forward<double>(params, layout, rec.command_embedding);
    const PixelFrame frame = layout.frame();
    std::size_t i = 0;
    for (int k : model.config().scales) {
      const int gw = 36 / k, gh = 24 / k;
      for (int h = 0; h < gh; ++h) {
        for (int w = 0; w < gw; ++w, ++i) {
          const EgoPoint e = pixel_to_ego(grid_anchor(w, h, k, gw, gh), frame);
          CHECK(out.mixture[i].mean == e);
          CHECK(out.mixture[i].log_weight == 0.0);
          const auto& ds = std::get<DiagScale>(out.mixture[i].scale);
          CHECK(ds.sx == doctest::Approx((1 + 1e-5) / frame.scale()));
        }
      }
    }

    // Scaling s_i scales sigma of that scale only.
    const auto& sf = model.layout().find("scale_factor");
    params[sf.offset + 1] = 2.5;
    const auto out2 = model.forward<double>(params, layout, rec.command_embedding);
    const std::size_t first_coarse = 12 * 18;
    CHECK(std::get<DiagScale>(out2.mixture[0].scale).sx == std::get<DiagScale>(out.mixture[0].scale).sx);
    CHECK(std::get<DiagScale>(out2.mixture[first_coarse].scale).sx ==
          doctest::Approx(2.5 * std::get<DiagScale>(out.mixture[first_coarse].scale).sx));
  }

  TEST_CASE("forward rejects bad inputs") {
    const PdpcModel model(PdpcConfig::audit());
    auto params = model.init_params<double>(1);
    const auto rec = records(1, 7).split.records[0];
    const auto layout = model.rasterize(rec);
    const std::vector<float> short_cmd(10, 0.0f);
    CHECK_THROWS_AS(model.forward<double>(params, layout, short_cmd), ShapeMismatch);
    const LayoutTensor wrong(48, 72);
    CHECK_THROWS_AS(model.forward<double>(params, wrong, rec.command_embedding), ShapeMismatch);
    auto nan_params = params;
    nan_params[3] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(model.forward<double>(nan_params, layout, rec.command_embedding), InvalidArgument);
    auto neg = params;
    neg[model.layout().find("scale_factor").offset] = -1.0;
    CHECK_THROWS_AS(model.forward<double>(neg, layout, rec.command_embedding), InvalidArgument);
    const std::vector<double> few(5, 0.0);
    CHECK_THROWS_AS(model.forward<double>(few, layout, rec.command_embedding), ShapeMismatch);
  }

  TEST_CASE("no-referred-channel model runs on the ablated input") {
    auto cfg = PdpcConfig::audit();
    cfg.no_referred_channel = true;
    const PdpcModel model(cfg);
    const auto rec = records(1, 8).split.records[0];
    const auto layout = model.rasterize(rec);
    const float* ch4 = layout.channel(kReferredChannel);
    CHECK(std::all_of(ch4, ch4 + 24 * 36, [](float v) { return v == 0.0f; }));
    const auto params = model.init_params<double>(2);
    CHECK(model.forward<double>(params, layout, rec.command_embedding).mixture.size() == 270);
  }

  TEST_CASE("loss agrees with nll of the forward mixture and float with double") {
    const PdpcModel model(PdpcConfig::audit());
    const auto rec = records(1, 9).split.records[0];
    const auto layout = model.rasterize(rec);
    const auto pd = model.init_params<double>(5);
    const auto pf = model.init_params<float>(5);
    const double l = model.loss<double>(pd, layout, rec.command_embedding, rec.destinations, nullptr);
    const auto out = model.forward<double>(pd, layout, rec.command_embedding);
    CHECK(l == doctest::Approx(nll_loss(out.mixture, rec.destinations)).epsilon(1e-12));
    const double lf = model.loss<float>(pf, layout, rec.command_embedding, rec.destinations, nullptr);
    CHECK(lf == doctest::Approx(l).epsilon(1e-4));
  }

  TEST_CASE("end-to-end gradient matches central differences") {
    const PdpcModel model(PdpcConfig::audit());
    const auto rec = records(1, 10).split.records[0];
    const auto layout = model.rasterize(rec);
    auto p = model.init_params<double>(6);
    Rng rng(7);
    for (auto& v : p) v += 0.05 * rng.normal();
    const auto& sf = model.layout().find("scale_factor");
    for (std::size_t i = 0; i < sf.size; ++i) p[sf.offset + i] = 1.0 + 0.2 * rng.uniform();
    std::vector<double> g(p.size(), 0.0);
    model.loss<double>(p, layout, rec.command_embedding, rec.destinations, g.data());
    double num = 0.0, den = 0.0;
    const double h = 1e-6;
    auto check = [&](std::size_t i) {
      auto pp = p, pm = p;
      pp[i] += h;
      pm[i] -= h;
      const double fd = (model.loss<double>(pp, layout, rec.command_embedding, rec.destinations, nullptr) -
                         model.loss<double>(pm, layout, rec.command_embedding, rec.destinations, nullptr)) /
                        (2 * h);
      num += (fd - g[i]) * (fd - g[i]);
      den += fd * fd;
    };
    for (int k = 0; k < 80; ++k) check(rng.below(p.size()));
    for (std::size_t i = 0; i < sf.size; ++i) check(sf.offset + i);
    CHECK(std::sqrt(num / den) < 1e-3);
    CHECK(audit_pdpc_gradient(PdpcConfig::audit(), 11).rel_error < 1e-3);
  }

  TEST_CASE("training on one record lowers its loss") {
    auto d = records(1, 12);
    TrainConfig tc;
    tc.adam.lr = 1e-3;
    tc.batch_size = 1;
    tc.max_epochs = 200;
    const PdpcModel model(PdpcConfig::audit());
    const auto init = model.init_params<float>(tc.seed);
    const auto layout = model.rasterize(d.split.records[0]);
    const double before =
        model.loss<float>(init, layout, d.split.records[0].command_embedding, d.split.records[0].destinations, nullptr);
    const auto r = train_pdpc(d.split, {}, PdpcConfig::audit(), tc);
    CHECK(r.train.steps == 200);
    const auto m = load_pdpc(r.checkpoint);
    const double after = model.loss<float>(m.params, layout, d.split.records[0].command_embedding,
                                           d.split.records[0].destinations, nullptr);
    CHECK(after < before);
  }

  TEST_CASE("checkpoint round trip and predict contract") {
    testing::TempDir dir;
    const PdpcModel model(PdpcConfig::audit());
    const auto params = model.init_params<float>(8);
    TrainConfig tc;
    const Checkpoint c = pdpc_checkpoint(model, params, tc, 3);
    save_checkpoint(c, dir / "p.ckpt");
    const auto loaded = load_pdpc(load_checkpoint(dir / "p.ckpt"));
    CHECK(loaded.params == params);
    CHECK(to_json(loaded.model.config()) == to_json(model.config()));

    const auto rec = records(1, 13).split.records[0];
    const auto full = predict(loaded, rec);
    const auto same = predict(loaded, rec, full.size());
    REQUIRE(full.size() == same.size());
    for (std::size_t i = 0; i < full.size(); ++i) {
      CHECK(full[i].mean == same[i].mean);
      CHECK(full[i].log_weight == same[i].log_weight);
    }
    const auto top = predict(loaded, rec, 32);
    CHECK(top.size() == 32);
    double s = 0.0;
    for (double w : top.weights()) s += w;
    CHECK(std::abs(s - 1.0) < 1e-9);

    Checkpoint wrong = c;
    wrong.model_kind = ModelKind::kUnimodal;
    CHECK_THROWS_AS(load_pdpc(wrong), SchemaError);
  }

  TEST_CASE("top-32 trims far outliers of a briefly trained model") {
    SynthConfig sc;
    sc.num_records = 40;
    sc.feature_dim = 0;
    const auto d = gen_synthetic_dataset(sc, 14);
    DatasetSplit train = d.split;
    train.records.resize(30);
    TrainConfig tc;
    tc.adam.lr = 3e-3;
    tc.batch_size = 8;
    tc.max_epochs = 8;
    const auto r = train_pdpc(train, {}, PdpcConfig::audit(), tc);
    const auto m = load_pdpc(r.checkpoint);
    double full_out = 0.0, top_out = 0.0;
    for (std::size_t i = 30; i < 40; ++i) {
      const auto& rec = d.split.records[i];
      const auto& truth = d.truth.mixtures[i];
      auto outliers = [&](const Mixture2D& mix) {
        const auto pts = sample(mix, 2000, std::uint64_t{i});
        double n = 0.0;
        for (const auto& p : pts) {
          bool far = true;
          for (const auto& c : truth.components()) far &= std::hypot(p.x - c.mean.x, p.y - c.mean.y) > 30.0;
          n += far;
        }
        return n / pts.size();
      };
      full_out += outliers(predict(m, rec));
      top_out += outliers(predict(m, rec, 32));
    }
    CHECK(top_out < full_out);
  }

  TEST_CASE("layer results do not depend on buffer alignment") {
    const std::vector<float> ref = layer_pass(0, 0);
    for (int shift = 1; shift < 16; ++shift) {
      for (int pad : {1, 3, 4, 7, 12, 16}) {
        CAPTURE(shift);
        CAPTURE(pad);
        const std::vector<float> r = layer_pass(shift, pad * shift);
        REQUIRE(r.size() == ref.size());
        CHECK(std::memcmp(r.data(), ref.data(), r.size() * sizeof(float)) == 0);
      }
    }
  }
}
