#pragma once

// Layers with explicit forward/backward passes over a flat parameter vector.
// Forward never mutates parameters; per-call state lives in the caches, so one
// model can serve concurrent forward/backward calls on different samples.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cmdgoal/nn/tensor.hpp"
#include "cmdgoal/rng.hpp"

namespace cmdgoal::nn {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

template <typename T>
void fill_normal(std::span<T> dst, Rng& rng, double stddev) {
  for (auto& x : dst) x = static_cast<T>(rng.normal() * stddev);
}

template <typename T>
void fill_value(std::span<T> dst, double value) {
  std::fill(dst.begin(), dst.end(), static_cast<T>(value));
}

// ---------------------------------------------------------------------------

template <typename T>
struct ConvCache {
  int in_h = 0;
  int in_w = 0;
  std::vector<T> cols;  // (in*k*k) x (out_h*out_w)
};

struct Conv2d {
  int in = 0;
  int out = 0;
  int k = 3;
  int stride = 1;
  int pad = 1;
  std::size_t w_off = 0;
  std::size_t b_off = 0;

  static Conv2d make(ParamLayout& pl, const std::string& name, int in, int out, int k, int stride,
                     int pad) {
    Conv2d c{in, out, k, stride, pad, 0, 0};
    c.w_off = pl.add(name + ".weight", {out, in, k, k});
    c.b_off = pl.add(name + ".bias", {out});
    return c;
  }

  int out_h(int h) const noexcept { return (h + 2 * pad - k) / stride + 1; }
  int out_w(int w) const noexcept { return (w + 2 * pad - k) / stride + 1; }
  std::size_t weight_count() const noexcept { return static_cast<std::size_t>(out) * in * k * k; }

  /// He-normal weights scaled by `gain`, zero bias.
  template <typename T>
  void init(std::span<T> params, Rng& rng, double gain = 1.0) const {
    const double fan_in = static_cast<double>(in) * k * k;
    fill_normal(params.subspan(w_off, weight_count()), rng, gain * std::sqrt(2.0 / fan_in));
    fill_value(params.subspan(b_off, out), 0.0);
  }

  template <typename T>
  void forward(const T* p, const Tensor<T>& x, Tensor<T>& y, ConvCache<T>& cache) const {
    if (x.c != in) throw ShapeMismatch("conv input channels " + std::to_string(x.c) + " != " + std::to_string(in));
    const int oh = out_h(x.h);
    const int ow = out_w(x.w);
    const int K = in * k * k;
    const int N = oh * ow;
    cache.in_h = x.h;
    cache.in_w = x.w;
    cache.cols.resize(static_cast<std::size_t>(K) * N);
    for (int ci = 0; ci < in; ++ci) {
      const T* src = x.channel(ci);
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          T* row = cache.cols.data() + static_cast<std::size_t>((ci * k + ky) * k + kx) * N;
          const auto [ox0, ox1] = valid_range(kx, ow, x.w);
          for (int oy = 0; oy < oh; ++oy) {
            T* dst = row + oy * ow;
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= x.h) {
              std::fill(dst, dst + ow, T(0));
              continue;
            }
            std::fill(dst, dst + ox0, T(0));
            std::fill(dst + ox1, dst + ow, T(0));
            const T* srow = src + static_cast<std::size_t>(iy) * x.w - pad + kx;
            if (stride == 1) {
              std::copy(srow + ox0, srow + ox1, dst + ox0);
            } else {
              for (int ox = ox0; ox < ox1; ++ox) dst[ox] = srow[ox * stride];
            }
          }
        }
      }
    }
    y.resize(out, oh, ow);
    Eigen::Map<const RowMat<T>> W(p + w_off, out, K);
    Eigen::Map<const RowMat<T>> cols(cache.cols.data(), K, N);
    Eigen::Map<RowMat<T>> Y(y.data(), out, N);
    Y.noalias() = W * cols;
    Y.colwise() += Eigen::Map<const Vec<T>>(p + b_off, out);
  }

  /// Accumulates parameter gradients into g; writes the input gradient to dx when non-null.
  template <typename T>
  void backward(const T* p, const ConvCache<T>& cache, const Tensor<T>& dy, Tensor<T>* dx, T* g) const {
    const int oh = dy.h;
    const int ow = dy.w;
    const int K = in * k * k;
    const int N = oh * ow;
    Eigen::Map<const RowMat<T>> dY(dy.data(), out, N);
    Eigen::Map<const RowMat<T>> cols(cache.cols.data(), K, N);
    Eigen::Map<RowMat<T>> dW(g + w_off, out, K);
    dW.noalias() += dY * cols.transpose();
    for (int o = 0; o < out; ++o) {
      const T* row = dy.data() + static_cast<std::size_t>(o) * N;
      T acc = T(0);
      for (int i = 0; i < N; ++i) acc += row[i];
      g[b_off + o] += acc;
    }
    if (!dx) return;
    Eigen::Map<const RowMat<T>> W(p + w_off, out, K);
    RowMat<T> dcols = W.transpose() * dY;
    dx->resize(in, cache.in_h, cache.in_w);
    for (int ci = 0; ci < in; ++ci) {
      T* dst = dx->channel(ci);
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          const T* row = dcols.data() + static_cast<std::size_t>((ci * k + ky) * k + kx) * N;
          const auto [ox0, ox1] = valid_range(kx, ow, cache.in_w);
          for (int oy = 0; oy < oh; ++oy) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= cache.in_h) continue;
            const T* src = row + oy * ow;
            T* drow = dst + static_cast<std::size_t>(iy) * cache.in_w - pad + kx;
            if (stride == 1) {
              for (int ox = ox0; ox < ox1; ++ox) drow[ox] += src[ox];
            } else {
              for (int ox = ox0; ox < ox1; ++ox) drow[ox * stride] += src[ox];
            }
          }
        }
      }
    }
  }

 private:
  /// Output columns [lo, hi) whose input column ox*stride - pad + kx is inside [0, in_w).
  std::pair<int, int> valid_range(int kx, int ow, int in_w) const noexcept {
    int lo = 0;
    while (lo < ow && lo * stride - pad + kx < 0) ++lo;
    int hi = ow;
    while (hi > lo && (hi - 1) * stride - pad + kx >= in_w) --hi;
    return {lo, hi};
  }
};

// ---------------------------------------------------------------------------

template <typename T>
struct GroupNormCache {
  Tensor<T> xhat;
  std::vector<T> inv_std;  // per group
};

struct GroupNorm {
  int channels = 0;
  int groups = 1;
  double eps = 1e-5;
  std::size_t gamma_off = 0;
  std::size_t beta_off = 0;

  static GroupNorm make(ParamLayout& pl, const std::string& name, int channels, int groups) {
    if (groups <= 0 || channels % groups != 0) {
      throw InvalidArgument(name + ": channels (" + std::to_string(channels) +
                            ") not divisible by group count (" + std::to_string(groups) + ")");
    }
    GroupNorm n{channels, groups, 1e-5, 0, 0};
    n.gamma_off = pl.add(name + ".gamma", {channels});
    n.beta_off = pl.add(name + ".beta", {channels});
    return n;
  }

  template <typename T>
  void init(std::span<T> params) const {
    fill_value(params.subspan(gamma_off, channels), 1.0);
    fill_value(params.subspan(beta_off, channels), 0.0);
  }

  template <typename T>
  void forward(const T* p, const Tensor<T>& x, Tensor<T>& y, GroupNormCache<T>& cache) const {
    const int cpg = channels / groups;
    const std::size_t plane = x.plane();
    const std::size_t n = cpg * plane;
    cache.xhat.resize(x.c, x.h, x.w);
    cache.inv_std.assign(groups, T(0));
    y.resize(x.c, x.h, x.w);
    for (int gi = 0; gi < groups; ++gi) {
      const T* src = x.data() + gi * n;
      double mean = 0.0;
      for (std::size_t i = 0; i < n; ++i) mean += src[i];
      mean /= static_cast<double>(n);
      double var = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double d = src[i] - mean;
        var += d * d;
      }
      var /= static_cast<double>(n);
      const double inv = 1.0 / std::sqrt(var + eps);
      cache.inv_std[gi] = static_cast<T>(inv);
      T* xh = cache.xhat.data() + gi * n;
      for (std::size_t i = 0; i < n; ++i) xh[i] = static_cast<T>((src[i] - mean) * inv);
      for (int c = gi * cpg; c < (gi + 1) * cpg; ++c) {
        const T* xc = cache.xhat.channel(c);
        T* yc = y.channel(c);
        const T gamma = p[gamma_off + c];
        const T beta = p[beta_off + c];
        for (std::size_t i = 0; i < plane; ++i) yc[i] = xc[i] * gamma + beta;
      }
    }
  }

  template <typename T>
  void backward(const T* p, const GroupNormCache<T>& cache, const Tensor<T>& dy, Tensor<T>& dx, T* g) const {
    const int cpg = channels / groups;
    const std::size_t plane = dy.plane();
    const std::size_t n = cpg * plane;
    dx.resize(dy.c, dy.h, dy.w);
    for (int gi = 0; gi < groups; ++gi) {
      double sum_d = 0.0;
      double sum_dx = 0.0;
      for (int c = gi * cpg; c < (gi + 1) * cpg; ++c) {
        const T* dyc = dy.channel(c);
        const T* xc = cache.xhat.channel(c);
        double dgamma = 0.0;
        double dbeta = 0.0;
        for (std::size_t i = 0; i < plane; ++i) {
          dgamma += static_cast<double>(dyc[i] * xc[i]);
          dbeta += dyc[i];
        }
        g[gamma_off + c] += static_cast<T>(dgamma);
        g[beta_off + c] += static_cast<T>(dbeta);
        // d xhat = gamma * dy, so its sums follow from the ones above.
        sum_d += p[gamma_off + c] * dbeta;
        sum_dx += p[gamma_off + c] * dgamma;
      }
      const double inv = cache.inv_std[gi];
      const double mean_d = sum_d / n;
      const double mean_dx = sum_dx / n;
      for (int c = gi * cpg; c < (gi + 1) * cpg; ++c) {
        const T* dyc = dy.channel(c);
        const T* xc = cache.xhat.channel(c);
        T* dxc = dx.channel(c);
        const double gamma = p[gamma_off + c];
        for (std::size_t i = 0; i < plane; ++i) {
          dxc[i] = static_cast<T>(inv * (dyc[i] * gamma - mean_d - xc[i] * mean_dx));
        }
      }
    }
  }
};

// ---------------------------------------------------------------------------

template <typename T>
void relu_inplace(Tensor<T>& x) {
  for (auto& v : x.v) v = v > T(0) ? v : T(0);
}

/// dy *= (y > 0), with y the ReLU output.
template <typename T>
void relu_backward_inplace(const Tensor<T>& y, Tensor<T>& dy) {
  for (std::size_t i = 0; i < dy.v.size(); ++i) {
    if (!(y.v[i] > T(0))) dy.v[i] = T(0);
  }
}

template <typename T>
struct ConvGnReluCache {
  ConvCache<T> conv;
  Tensor<T> pre;  // conv output
  GroupNormCache<T> norm;
  Tensor<T> out;  // post-ReLU
};

/// conv -> group norm -> ReLU.
struct ConvGnRelu {
  Conv2d conv;
  GroupNorm norm;

  static ConvGnRelu make(ParamLayout& pl, const std::string& name, int in, int out, int stride,
                         int groups) {
    return {Conv2d::make(pl, name + ".conv", in, out, 3, stride, 1),
            GroupNorm::make(pl, name + ".gn", out, groups)};
  }

  template <typename T>
  void init(std::span<T> params, Rng& rng) const {
    conv.init(params, rng);
    norm.init(params);
  }

  template <typename T>
  const Tensor<T>& forward(const T* p, const Tensor<T>& x, ConvGnReluCache<T>& c) const {
    conv.forward(p, x, c.pre, c.conv);
    norm.forward(p, c.pre, c.out, c.norm);
    relu_inplace(c.out);
    return c.out;
  }

  /// dy is consumed (overwritten).
  template <typename T>
  void backward(const T* p, const ConvGnReluCache<T>& c, Tensor<T>& dy, Tensor<T>* dx, T* g) const {
    relu_backward_inplace(c.out, dy);
    Tensor<T> dpre;
    norm.backward(p, c.norm, dy, dpre, g);
    conv.backward(p, c.conv, dpre, dx, g);
  }
};

template <typename T>
struct ResidualCache {
  ConvGnReluCache<T> first;
  ConvCache<T> conv2;
  Tensor<T> pre2;
  GroupNormCache<T> norm2;
  Tensor<T> out;
};

/// y = ReLU(GN(conv(ConvGnRelu(x))) + x); channel count preserved.
struct ResidualBlock {
  ConvGnRelu first;
  Conv2d conv2;
  GroupNorm norm2;

  static ResidualBlock make(ParamLayout& pl, const std::string& name, int ch, int groups) {
    return {ConvGnRelu::make(pl, name + ".a", ch, ch, 1, groups),
            Conv2d::make(pl, name + ".b.conv", ch, ch, 3, 1, 1),
            GroupNorm::make(pl, name + ".b.gn", ch, groups)};
  }

  template <typename T>
  void init(std::span<T> params, Rng& rng) const {
    first.init(params, rng);
    conv2.init(params, rng);
    norm2.init(params);
  }

  template <typename T>
  const Tensor<T>& forward(const T* p, const Tensor<T>& x, ResidualCache<T>& c) const {
    const Tensor<T>& a = first.forward(p, x, c.first);
    conv2.forward(p, a, c.pre2, c.conv2);
    norm2.forward(p, c.pre2, c.out, c.norm2);
    for (std::size_t i = 0; i < c.out.v.size(); ++i) c.out.v[i] += x.v[i];
    relu_inplace(c.out);
    return c.out;
  }

  /// dy is consumed. dx receives the full input gradient (skip + branch).
  template <typename T>
  void backward(const T* p, const ResidualCache<T>& c, Tensor<T>& dy, Tensor<T>& dx, T* g) const {
    relu_backward_inplace(c.out, dy);
    Tensor<T> dpre2;
    norm2.backward(p, c.norm2, dy, dpre2, g);
    Tensor<T> da;
    conv2.backward(p, c.conv2, dpre2, &da, g);
    first.backward(p, c.first, da, &dx, g);
    for (std::size_t i = 0; i < dx.v.size(); ++i) dx.v[i] += dy.v[i];
  }
};

// ---------------------------------------------------------------------------

/// Fully connected layer, y = W x + b with W stored [out][in].
struct Linear {
  int in = 0;
  int out = 0;
  std::size_t w_off = 0;
  std::size_t b_off = 0;

  static Linear make(ParamLayout& pl, const std::string& name, int in, int out) {
    Linear l{in, out, 0, 0};
    l.w_off = pl.add(name + ".weight", {out, in});
    l.b_off = pl.add(name + ".bias", {out});
    return l;
  }

  template <typename T>
  void init(std::span<T> params, Rng& rng, double gain = 1.0) const {
    fill_normal(params.subspan(w_off, static_cast<std::size_t>(in) * out), rng,
                gain * std::sqrt(2.0 / in));
    fill_value(params.subspan(b_off, out), 0.0);
  }

  template <typename T>
  void forward(const T* p, const T* x, T* y) const {
    Eigen::Map<const RowMat<T>> W(p + w_off, out, in);
    Eigen::Map<Vec<T>> Y(y, out);
    Y.noalias() = W * Eigen::Map<const Vec<T>>(x, in);
    Y += Eigen::Map<const Vec<T>>(p + b_off, out);
  }

  template <typename T>
  void backward(const T* p, const T* x, const T* dy, T* dx, T* g) const {
    Eigen::Map<const Vec<T>> dY(dy, out);
    Eigen::Map<RowMat<T>> dW(g + w_off, out, in);
    dW.noalias() += dY * Eigen::Map<const Vec<T>>(x, in).transpose();
    Eigen::Map<Vec<T>>(g + b_off, out) += dY;
    if (dx) {
      Eigen::Map<const RowMat<T>> W(p + w_off, out, in);
      Eigen::Map<Vec<T>>(dx, in).noalias() = W.transpose() * dY;
    }
  }
};

/// Nearest-neighbour 2x upsampling of `src` added onto `dst` (dst dims = 2x src).
template <typename T>
void add_upsampled2x(const Tensor<T>& src, Tensor<T>& dst) {
  for (int c = 0; c < dst.c; ++c) {
    for (int y = 0; y < dst.h; ++y) {
      for (int x = 0; x < dst.w; ++x) dst.at(c, y, x) += src.at(c, y / 2, x / 2);
    }
  }
}

/// Adjoint of add_upsampled2x: dsrc += sum of the 2x2 block in ddst.
template <typename T>
void add_downsampled_sum2x(const Tensor<T>& ddst, Tensor<T>& dsrc) {
  for (int c = 0; c < ddst.c; ++c) {
    for (int y = 0; y < ddst.h; ++y) {
      for (int x = 0; x < ddst.w; ++x) dsrc.at(c, y / 2, x / 2) += ddst.at(c, y, x);
    }
  }
}

inline double elu(double x) noexcept { return x > 0.0 ? x : std::expm1(x); }
inline double elu_grad(double x) noexcept { return x > 0.0 ? 1.0 : std::exp(x); }

/// Positive scale activation 1 + ELU(x) + 1e-5.
inline double positive_scale(double x) noexcept { return 1.0 + elu(x) + 1e-5; }

}  // namespace cmdgoal::nn
