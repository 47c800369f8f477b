#pragma once

// Non-attention building blocks. Every layer has
//   forward(x, ctx, cache) const  -- cache == nullptr for plain inference
//   backward(dy, cache)           -- accumulates parameter gradients, returns dx
// Token tensors are 2-D: (batch * tokens_per_image) x channels, with spatial
// layout carried separately by a Grid.

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <utility>

#include "bvit/bittensor.hpp"
#include "bvit/quant.hpp"
#include "bvit/tensor.hpp"

namespace bvit {

enum class Mode { train, infer };

template <class T>
struct Ctx {
  Mode mode = Mode::infer;
  SteProbe<T>* probe = nullptr;
  /// Multiply the alpha_p gradient by the LSQ scale 1/sqrt(#entries).
  bool lsq_grad_scale = true;

  bool training() const noexcept { return mode == Mode::train; }
  bool replaying() const noexcept { return probe != nullptr && probe->replaying(); }
};

/// Spatial layout of a token batch. Rows of image b start at b * tokens(); a
/// class token, when present, is the first row of each image and the spatial
/// tokens follow in row-major (i, j) order.
struct Grid {
  std::size_t batch = 1;
  std::size_t h = 1;
  std::size_t w = 1;
  bool cls = false;

  std::size_t spatial() const noexcept { return h * w; }
  std::size_t tokens() const noexcept { return spatial() + (cls ? 1 : 0); }
  std::size_t rows() const noexcept { return batch * tokens(); }
  std::size_t row(std::size_t b, std::size_t i, std::size_t j) const noexcept {
    return b * tokens() + (cls ? 1 : 0) + i * w + j;
  }
  friend bool operator==(const Grid&, const Grid&) = default;
};

namespace detail {

inline void check_rows(std::size_t rows, const Grid& g, const char* who) {
  if (rows != g.rows())
    throw ShapeError(std::string(who) + ": " + std::to_string(rows) + " rows do not match grid of " +
                     std::to_string(g.batch) + "x" + std::to_string(g.tokens()) + " tokens");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Batch normalization over the (batch x token) axis.

template <class T>
struct BatchNorm {
  Param<T> gamma;
  Param<T> shift;
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T eps = T(1e-5);
  T momentum = T(0.1);

  struct Cache {
    bool train = false;
    Tensor<T> xhat;
    Tensor<T> inv_std;
    Tensor<T> batch_mean;
    Tensor<T> batch_var;
  };

  BatchNorm() = default;
  explicit BatchNorm(std::size_t channels)
      : gamma({channels}, T{1}), shift({channels}, T{}), running_mean({channels}, T{}), running_var({channels}, T{1}) {}

  std::size_t channels() const noexcept { return gamma.value.size(); }

  Tensor<T> forward(const Tensor<T>& x, const Ctx<T>& ctx, Cache* cache) const {
    const std::size_t c = channels();
    if (x.rank() != 2 || x.cols() != c)
      throw ShapeError("batchnorm: input " + shape_str(x.shape()) + " vs " + std::to_string(c) + " channels");
    const std::size_t n = x.rows();
    Tensor<T> mean({c}), var({c}), inv_std({c});
    const bool train = ctx.training();
    if (train) {
      if (n == 0) throw ShapeError("batchnorm: empty batch in train mode");
      accumulate_column_sums(x, mean);
      for (auto& m : mean.values()) m /= static_cast<T>(n);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t k = 0; k < c; ++k) {
          const T d = x(r, k) - mean[k];
          var[k] += d * d;
        }
      for (auto& v : var.values()) v /= static_cast<T>(n);
    } else {
      for (std::size_t k = 0; k < c; ++k)
        if (running_var[k] < T{}) throw StateError("batchnorm: negative running variance in channel " + std::to_string(k));
      mean = running_mean;
      var = running_var;
    }
    for (std::size_t k = 0; k < c; ++k) inv_std[k] = T{1} / std::sqrt(var[k] + eps);

    Tensor<T> y(x.shape());
    Tensor<T> xhat;
    if (cache) xhat = Tensor<T>(x.shape());
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t k = 0; k < c; ++k) {
        const T h = (x(r, k) - mean[k]) * inv_std[k];
        y(r, k) = h * gamma.value[k] + shift.value[k];
        if (cache) xhat(r, k) = h;
      }
    if (cache) {
      cache->train = train;
      cache->xhat = std::move(xhat);
      cache->inv_std = std::move(inv_std);
      cache->batch_mean = std::move(mean);
      cache->batch_var = std::move(var);
    }
    return y;
  }

  /// Also folds the cached batch statistics into the running estimates, so a
  /// training step updates them exactly once and forward stays const.
  Tensor<T> backward(const Tensor<T>& dy, const Cache& cache) {
    if (cache.xhat.empty() && dy.size() != 0) throw InternalError("batchnorm: backward without recorded forward");
    const std::size_t n = dy.rows(), c = channels();
    Tensor<T> dx(dy.shape());
    Tensor<T> sum_dxhat({c}), sum_dxhat_xhat({c});
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t k = 0; k < c; ++k) {
        const T g = dy(r, k);
        gamma.grad[k] += g * cache.xhat(r, k);
        shift.grad[k] += g;
        const T dxh = g * gamma.value[k];
        sum_dxhat[k] += dxh;
        sum_dxhat_xhat[k] += dxh * cache.xhat(r, k);
      }
    if (cache.train) {
      const T nn = static_cast<T>(n);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t k = 0; k < c; ++k) {
          const T dxh = dy(r, k) * gamma.value[k];
          dx(r, k) = cache.inv_std[k] / nn * (nn * dxh - sum_dxhat[k] - cache.xhat(r, k) * sum_dxhat_xhat[k]);
        }
      const T unbias = n > 1 ? nn / (nn - T{1}) : T{1};
      for (std::size_t k = 0; k < c; ++k) {
        running_mean[k] = (T{1} - momentum) * running_mean[k] + momentum * cache.batch_mean[k];
        running_var[k] = (T{1} - momentum) * running_var[k] + momentum * cache.batch_var[k] * unbias;
      }
    } else {
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t k = 0; k < c; ++k) dx(r, k) = dy(r, k) * gamma.value[k] * cache.inv_std[k];
    }
    return dx;
  }
};

// ---------------------------------------------------------------------------
// RPReLU: out = (x - gamma) + zeta for x > gamma, slope * (x - gamma) + zeta otherwise.

template <class T>
struct RPReLU {
  Param<T> gamma;
  Param<T> zeta;
  Param<T> slope;

  struct Cache {
    Tensor<T> x;
  };

  RPReLU() = default;
  explicit RPReLU(std::size_t channels, T init_slope = T(0.25))
      : gamma({channels}, T{}), zeta({channels}, T{}), slope({channels}, init_slope) {}

  std::size_t channels() const noexcept { return gamma.value.size(); }

  Tensor<T> forward(const Tensor<T>& x, const Ctx<T>& ctx, Cache* cache) const {
    const std::size_t c = channels();
    if (x.rank() != 2 || x.cols() != c) throw ShapeError("rprelu: input " + shape_str(x.shape()) + " vs " + std::to_string(c) + " channels");
    Tensor<T> y(x.shape());
    for (std::size_t r = 0; r < x.rows(); ++r)
      for (std::size_t k = 0; k < c; ++k) {
        const T d = x(r, k) - gamma.value[k];
        y(r, k) = (d > T{} ? d : slope.value[k] * d) + zeta.value[k];
        if (ctx.probe) ctx.probe->note_kink(std::abs(d));
      }
    if (cache) cache->x = x;
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, const Cache& cache) {
    if (cache.x.size() != dy.size()) throw InternalError("rprelu: backward without recorded forward");
    const std::size_t c = channels();
    Tensor<T> dx(dy.shape());
    for (std::size_t r = 0; r < dy.rows(); ++r)
      for (std::size_t k = 0; k < c; ++k) {
        const T g = dy(r, k);
        const T d = cache.x(r, k) - gamma.value[k];
        const T local = d > T{} ? T{1} : slope.value[k];
        dx(r, k) = g * local;
        gamma.grad[k] -= g * local;
        zeta.grad[k] += g;
        if (!(d > T{})) slope.grad[k] += g * d;
      }
    return dx;
  }
};

template <class T>
Tensor<T> rprelu(const Tensor<T>& x, const RPReLU<T>& p) {
  return p.forward(x, Ctx<T>{}, nullptr);
}

// ---------------------------------------------------------------------------
// Shortcut R(X): identity, n-fold channel concatenation, or mean of n
// contiguous channel chunks.

enum class ShortcutKind { identity, duplicate, average };

inline ShortcutKind shortcut_kind(std::size_t c_in, std::size_t c_out) {
  if (c_in == 0 || c_out == 0) throw ConfigError("shortcut: zero channel count");
  if (c_in == c_out) return ShortcutKind::identity;
  if (c_out % c_in == 0) return ShortcutKind::duplicate;
  if (c_in % c_out == 0) return ShortcutKind::average;
  throw ConfigError("shortcut: no integer relation between " + std::to_string(c_in) + " input and " +
                    std::to_string(c_out) + " output channels");
}

template <class T>
Tensor<T> shortcut_R(const Tensor<T>& x, std::size_t c_in, std::size_t c_out) {
  if (x.rank() != 2 || x.cols() != c_in) throw ShapeError("shortcut: input " + shape_str(x.shape()) + " vs c_in " + std::to_string(c_in));
  switch (shortcut_kind(c_in, c_out)) {
    case ShortcutKind::identity:
      return x;
    case ShortcutKind::duplicate: {
      Tensor<T> y = Tensor<T>::matrix(x.rows(), c_out);
      for (std::size_t r = 0; r < x.rows(); ++r)
        for (std::size_t k = 0; k < c_out; ++k) y(r, k) = x(r, k % c_in);
      return y;
    }
    case ShortcutKind::average: {
      const std::size_t n = c_in / c_out;
      Tensor<T> y = Tensor<T>::matrix(x.rows(), c_out);
      for (std::size_t r = 0; r < x.rows(); ++r)
        for (std::size_t k = 0; k < c_out; ++k) {
          T s{};
          for (std::size_t i = 0; i < n; ++i) s += x(r, i * c_out + k);
          y(r, k) = s / static_cast<T>(n);
        }
      return y;
    }
  }
  return x;
}

template <class T>
Tensor<T> shortcut_R_backward(const Tensor<T>& dy, std::size_t c_in, std::size_t c_out) {
  switch (shortcut_kind(c_in, c_out)) {
    case ShortcutKind::identity:
      return dy;
    case ShortcutKind::duplicate: {
      Tensor<T> dx = Tensor<T>::matrix(dy.rows(), c_in);
      for (std::size_t r = 0; r < dy.rows(); ++r)
        for (std::size_t k = 0; k < c_out; ++k) dx(r, k % c_in) += dy(r, k);
      return dx;
    }
    case ShortcutKind::average: {
      const std::size_t n = c_in / c_out;
      Tensor<T> dx = Tensor<T>::matrix(dy.rows(), c_in);
      for (std::size_t r = 0; r < dy.rows(); ++r)
        for (std::size_t k = 0; k < c_out; ++k)
          for (std::size_t i = 0; i < n; ++i) dx(r, i * c_out + k) = dy(r, k) / static_cast<T>(n);
      return dx;
    }
  }
  return dy;
}

// ---------------------------------------------------------------------------
// Binary fully-connected layer: RPReLU(BN(alpha_W * Rsign(X) (x) sign(W - mu)) + R(X)).

template <class T>
struct BiFC {
  std::size_t din = 0;
  std::size_t dout = 0;
  /// Latent real weights (D_in x D_out). Empty for inference-only layers.
  Param<T> latent;
  BinWeight<T> frozen;
  RSignParams<T> rsign;
  BatchNorm<T> bn;
  RPReLU<T> act;

  struct Cache {
    Tensor<T> xs;  // x + beta
    Tensor<T> xq;  // sign(xs) or its surrogate
    Tensor<T> wc;  // W - mu
    Tensor<T> wq;  // sign(wc) or its surrogate
    T alpha{};
    typename BatchNorm<T>::Cache bn;
    typename RPReLU<T>::Cache act;
  };

  BiFC() = default;
  BiFC(std::size_t in, std::size_t out) : din(in), dout(out), rsign(in), bn(out), act(out) { shortcut_kind(in, out); }

  bool trainable() const noexcept { return !latent.value.empty(); }

  /// Binarized weight used by forward: derived from the latent weights when
  /// present, otherwise the stored packed weight.
  BinWeight<T> binary_weight() const { return trainable() ? binarize_weights(latent.value) : frozen; }

  void set_latent(Tensor<T> w) {
    if (w.rank() != 2 || w.rows() != din || w.cols() != dout)
      throw ShapeError("BiFC: latent weight " + shape_str(w.shape()) + " does not match " + std::to_string(din) + "x" + std::to_string(dout));
    latent = Param<T>(std::move(w));
  }

  void set_frozen(BinWeight<T> w) {
    if (w.din() != din || w.dout() != dout) throw ShapeError("BiFC: packed weight dims do not match layer");
    frozen = std::move(w);
    latent = Param<T>{};
  }

  Tensor<T> forward(const Tensor<T>& x, const Ctx<T>& ctx, Cache* cache) const {
    if (x.rank() != 2 || x.cols() != din) throw ShapeError("BiFC: input " + shape_str(x.shape()) + " vs D_in " + std::to_string(din));
    Tensor<T> xs = add_row_vector(x, rsign.beta.value.values());
    Tensor<T> y;
    Tensor<T> xq, wc, wq;
    T alpha{};
    if (ctx.replaying()) {
      xq = ctx.probe->sign_site(xs);
      if (trainable()) {
        const Tensor<T> mu = ctx.probe->detached(column_means(latent.value));
        wc = center_columns(latent.value, mu);
        wq = ctx.probe->sign_site(wc);
        alpha = ctx.probe->detached(mean_abs(latent.value));
      } else {
        wq = unpack<T>(frozen.bits);
        alpha = frozen.alpha;
      }
      y = matmul(xq, wq);
      for (auto& v : y.values()) v *= alpha;
    } else {
      BinWeight<T> local;
      const BinWeight<T>* w = &frozen;
      if (trainable()) {
        local = binarize_weights(latent.value);
        w = &local;
      }
      if (ctx.probe) {
        ctx.probe->sign_site(xs);
        if (trainable()) {
          ctx.probe->detached(w->mu);
          ctx.probe->sign_site(center_columns(latent.value, w->mu));
          ctx.probe->detached(w->alpha);
        }
      }
      const BitMatrix xbits = pack_signs(xs);
      const IntMatrix g = binary_gemm_nt(xbits, w->bits_t);
      alpha = w->alpha;
      y = Tensor<T>(g.shape());
      for (std::size_t i = 0; i < g.size(); ++i) y[i] = alpha * static_cast<T>(g[i]);
      if (cache) {
        xq = unpack<T>(xbits);
        wq = unpack<T>(w->bits);
        if (trainable()) wc = center_columns(latent.value, w->mu);
      }
    }
    typename BatchNorm<T>::Cache* bn_cache = cache ? &cache->bn : nullptr;
    typename RPReLU<T>::Cache* act_cache = cache ? &cache->act : nullptr;
    Tensor<T> u = bn.forward(y, ctx, bn_cache);
    add_inplace(u, shortcut_R(x, din, dout));
    Tensor<T> out = act.forward(u, ctx, act_cache);
    if (cache) {
      cache->xs = std::move(xs);
      cache->xq = std::move(xq);
      cache->wc = std::move(wc);
      cache->wq = std::move(wq);
      cache->alpha = alpha;
    }
    return out;
  }

  Tensor<T> backward(const Tensor<T>& dy, Cache& cache) {
    if (cache.xq.empty()) throw InternalError("BiFC: backward without recorded forward");
    const Tensor<T> du = act.backward(dy, cache.act);
    Tensor<T> dlin = bn.backward(du, cache.bn);
    for (auto& v : dlin.values()) v *= cache.alpha;
    const Tensor<T> dxq = matmul_nt(dlin, cache.wq);
    if (trainable()) {
      const Tensor<T> dwq = matmul_tn(cache.xq, dlin);
      add_inplace(latent.grad, ste_backward(cache.wc, dwq));
    }
    Tensor<T> dxs = ste_backward(cache.xs, dxq);
    accumulate_column_sums(dxs, rsign.beta.grad);
    add_inplace(dxs, shortcut_R_backward(du, din, dout));
    return dxs;
  }
};

template <class T>
Tensor<T> bifc_forward(const Tensor<T>& x, const BiFC<T>& layer) {
  return layer.forward(x, Ctx<T>{}, nullptr);
}

// ---------------------------------------------------------------------------
// Full-precision linear layer (first patch embedding, classifier).

template <class T>
struct Linear {
  Param<T> weight;  // D_in x D_out
  Param<T> bias;

  struct Cache {
    Tensor<T> x;
  };

  Linear() = default;
  Linear(std::size_t in, std::size_t out) : weight({in, out}, T{}), bias({out}, T{}) {}

  std::size_t din() const { return weight.value.shape()[0]; }
  std::size_t dout() const { return weight.value.shape()[1]; }

  Tensor<T> forward(const Tensor<T>& x, const Ctx<T>&, Cache* cache) const {
    if (x.rank() != 2 || x.cols() != din()) throw ShapeError("linear: input " + shape_str(x.shape()) + " vs D_in " + std::to_string(din()));
    Tensor<T> y = add_row_vector(matmul(x, weight.value), bias.value.values());
    if (cache) cache->x = x;
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, const Cache& cache) {
    if (cache.x.empty() && dy.size() != 0) throw InternalError("linear: backward without recorded forward");
    add_inplace(weight.grad, matmul_tn(cache.x, dy));
    accumulate_column_sums(dy, bias.grad);
    return matmul_nt(dy, weight.value);
  }
};

// ---------------------------------------------------------------------------
// LayerScale residual: alpha (.) branch + bias + skip.

template <class T>
struct LayerScale {
  Param<T> alpha;
  Param<T> bias;

  struct Cache {
    Tensor<T> branch;
  };

  LayerScale() = default;
  explicit LayerScale(std::size_t channels, T init = T(0.1)) : alpha({channels}, init), bias({channels}, T{}) {}

  Tensor<T> forward(const Tensor<T>& branch, const Tensor<T>& skip, Cache* cache) const {
    const std::size_t c = alpha.value.size();
    if (!branch.same_shape(skip) || branch.rank() != 2 || branch.cols() != c)
      throw ShapeError("layerscale: branch " + shape_str(branch.shape()) + ", skip " + shape_str(skip.shape()) + ", " +
                       std::to_string(c) + " channels");
    Tensor<T> y(branch.shape());
    for (std::size_t r = 0; r < branch.rows(); ++r)
      for (std::size_t k = 0; k < c; ++k) y(r, k) = (alpha.value[k] * branch(r, k) + bias.value[k]) + skip(r, k);
    if (cache) cache->branch = branch;
    return y;
  }

  /// Returns d(branch); d(skip) is the upstream gradient itself.
  Tensor<T> backward(const Tensor<T>& dy, const Cache& cache) {
    const std::size_t c = alpha.value.size();
    Tensor<T> db(dy.shape());
    for (std::size_t r = 0; r < dy.rows(); ++r)
      for (std::size_t k = 0; k < c; ++k) {
        alpha.grad[k] += dy(r, k) * cache.branch(r, k);
        bias.grad[k] += dy(r, k);
        db(r, k) = dy(r, k) * alpha.value[k];
      }
    return db;
  }
};

template <class T>
Tensor<T> layerscale_residual(const Tensor<T>& branch, const Tensor<T>& skip, const LayerScale<T>& p) {
  return p.forward(branch, skip, nullptr);
}

// ---------------------------------------------------------------------------
// Stride-1 average pooling with "same" output size; edge windows average the
// valid elements only. Class-token rows produce zero.

template <class T>
Tensor<T> avg_pool_same(const Tensor<T>& x, const Grid& g, std::size_t kh, std::size_t kw) {
  detail::check_rows(x.rows(), g, "avg_pool_same");
  if (g.h < 1 || g.w < 1) throw ShapeError("avg_pool_same: empty spatial grid");
  const std::size_t c = x.cols();
  const long rh = static_cast<long>(kh / 2), rw = static_cast<long>(kw / 2);
  const long H = static_cast<long>(g.h), W = static_cast<long>(g.w);
  Tensor<T> y(x.shape());
  for (std::size_t b = 0; b < g.batch; ++b)
    for (long i = 0; i < H; ++i)
      for (long j = 0; j < W; ++j) {
        const long i0 = std::max(0L, i - rh), i1 = std::min(H - 1, i + rh);
        const long j0 = std::max(0L, j - rw), j1 = std::min(W - 1, j + rw);
        const T inv = T{1} / static_cast<T>((i1 - i0 + 1) * (j1 - j0 + 1));
        T* out = &y(g.row(b, i, j), 0);
        for (long a = i0; a <= i1; ++a)
          for (long e = j0; e <= j1; ++e) {
            const T* in = &x(g.row(b, a, e), 0);
            for (std::size_t k = 0; k < c; ++k) out[k] += in[k];
          }
        for (std::size_t k = 0; k < c; ++k) out[k] *= inv;
      }
  return y;
}

template <class T>
Tensor<T> avg_pool_same_backward(const Tensor<T>& dy, const Grid& g, std::size_t kh, std::size_t kw) {
  detail::check_rows(dy.rows(), g, "avg_pool_same_backward");
  const std::size_t c = dy.cols();
  const long rh = static_cast<long>(kh / 2), rw = static_cast<long>(kw / 2);
  const long H = static_cast<long>(g.h), W = static_cast<long>(g.w);
  Tensor<T> dx(dy.shape());
  for (std::size_t b = 0; b < g.batch; ++b)
    for (long i = 0; i < H; ++i)
      for (long j = 0; j < W; ++j) {
        const long i0 = std::max(0L, i - rh), i1 = std::min(H - 1, i + rh);
        const long j0 = std::max(0L, j - rw), j1 = std::min(W - 1, j + rw);
        const T inv = T{1} / static_cast<T>((i1 - i0 + 1) * (j1 - j0 + 1));
        const T* up = &dy(g.row(b, i, j), 0);
        for (long a = i0; a <= i1; ++a)
          for (long e = j0; e <= j1; ++e) {
            T* d = &dx(g.row(b, a, e), 0);
            for (std::size_t k = 0; k < c; ++k) d[k] += up[k] * inv;
          }
      }
  return dx;
}

/// Kernel shapes (height x width) of the four pooling branches beside each FFN.
inline constexpr std::pair<std::size_t, std::size_t> kPoolBranches[4] = {{1, 3}, {3, 1}, {1, 5}, {5, 1}};

template <class T>
Tensor<T> multi_pool_branches(const Tensor<T>& x, const Grid& g) {
  Tensor<T> y(x.shape());
  for (auto [kh, kw] : kPoolBranches) add_inplace(y, avg_pool_same(x, g, kh, kw));
  return y;
}

template <class T>
Tensor<T> multi_pool_branches_backward(const Tensor<T>& dy, const Grid& g) {
  Tensor<T> dx(dy.shape());
  for (auto [kh, kw] : kPoolBranches) add_inplace(dx, avg_pool_same_backward(dy, g, kh, kw));
  return dx;
}

/// Single feature map overload: x is H x W x C.
template <class T>
Tensor<T> multi_pool_branches(const Tensor<T>& map) {
  if (map.rank() != 3 || map.shape()[0] < 1 || map.shape()[1] < 1) throw ShapeError("multi_pool_branches: expected a non-empty HxWxC map, got " + shape_str(map.shape()));
  const Grid g{1, map.shape()[0], map.shape()[1], false};
  return multi_pool_branches(map.reshaped({g.spatial(), map.shape()[2]}), g).reshaped(map.shape());
}

/// Non-overlapping R x R average pooling (spatial reduction). Output grid is
/// (h / R) x (w / R) without a class token.
template <class T>
Tensor<T> avg_pool_stride(const Tensor<T>& x, const Grid& g, std::size_t r, Grid* out_grid) {
  detail::check_rows(x.rows(), g, "avg_pool_stride");
  if (g.cls) throw ShapeError("avg_pool_stride: class token present");
  if (r == 0 || g.h % r || g.w % r)
    throw ShapeError("avg_pool_stride: reduction " + std::to_string(r) + " does not divide " + std::to_string(g.h) + "x" + std::to_string(g.w));
  const Grid og{g.batch, g.h / r, g.w / r, false};
  const std::size_t c = x.cols();
  const T inv = T{1} / static_cast<T>(r * r);
  Tensor<T> y = Tensor<T>::matrix(og.rows(), c);
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t i = 0; i < og.h; ++i)
      for (std::size_t j = 0; j < og.w; ++j) {
        T* out = &y(og.row(b, i, j), 0);
        for (std::size_t a = 0; a < r; ++a)
          for (std::size_t e = 0; e < r; ++e) {
            const T* in = &x(g.row(b, i * r + a, j * r + e), 0);
            for (std::size_t k = 0; k < c; ++k) out[k] += in[k];
          }
        for (std::size_t k = 0; k < c; ++k) out[k] *= inv;
      }
  if (out_grid) *out_grid = og;
  return y;
}

template <class T>
Tensor<T> avg_pool_stride_backward(const Tensor<T>& dy, const Grid& g, std::size_t r) {
  const Grid og{g.batch, g.h / r, g.w / r, false};
  const std::size_t c = dy.cols();
  const T inv = T{1} / static_cast<T>(r * r);
  Tensor<T> dx = Tensor<T>::matrix(g.rows(), c);
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t i = 0; i < og.h; ++i)
      for (std::size_t j = 0; j < og.w; ++j) {
        const T* up = &dy(og.row(b, i, j), 0);
        for (std::size_t a = 0; a < r; ++a)
          for (std::size_t e = 0; e < r; ++e) {
            T* d = &dx(g.row(b, i * r + a, j * r + e), 0);
            for (std::size_t k = 0; k < c; ++k) d[k] = up[k] * inv;
          }
      }
  return dx;
}

// ---------------------------------------------------------------------------
// Patch extraction. A P x P patch at (pi, pj) flattens to P*P*C values in
// (row-in-patch, col-in-patch, channel) order.

template <class T>
Tensor<T> patchify(const Tensor<T>& x, const Grid& g, std::size_t p, Grid* out_grid) {
  detail::check_rows(x.rows(), g, "patchify");
  if (g.cls) throw ShapeError("patchify: class token present");
  if (p == 0 || g.h % p || g.w % p)
    throw ShapeError("patch_embed: patch " + std::to_string(p) + " does not divide " + std::to_string(g.h) + "x" + std::to_string(g.w));
  const Grid og{g.batch, g.h / p, g.w / p, false};
  const std::size_t c = x.cols();
  Tensor<T> y = Tensor<T>::matrix(og.rows(), p * p * c);
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t i = 0; i < og.h; ++i)
      for (std::size_t j = 0; j < og.w; ++j) {
        T* out = &y(og.row(b, i, j), 0);
        for (std::size_t a = 0; a < p; ++a)
          for (std::size_t e = 0; e < p; ++e) std::copy_n(&x(g.row(b, i * p + a, j * p + e), 0), c, out + (a * p + e) * c);
      }
  if (out_grid) *out_grid = og;
  return y;
}

template <class T>
Tensor<T> unpatchify(const Tensor<T>& dy, const Grid& g, std::size_t p) {
  const Grid og{g.batch, g.h / p, g.w / p, false};
  const std::size_t c = dy.cols() / (p * p);
  Tensor<T> dx = Tensor<T>::matrix(g.rows(), c);
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t i = 0; i < og.h; ++i)
      for (std::size_t j = 0; j < og.w; ++j) {
        const T* up = &dy(og.row(b, i, j), 0);
        for (std::size_t a = 0; a < p; ++a)
          for (std::size_t e = 0; e < p; ++e) std::copy_n(up + (a * p + e) * c, c, &dx(g.row(b, i * p + a, j * p + e), 0));
      }
  return dx;
}

enum class Precision { full, binary };

/// Non-overlapping P x P patch embedding, full precision or binary.
template <class T>
struct PatchEmbed {
  std::size_t patch = 1;
  Precision precision = Precision::full;
  Linear<T> fp;
  BiFC<T> bin;

  struct Cache {
    Grid in_grid;
    typename Linear<T>::Cache fp;
    typename BiFC<T>::Cache bin;
  };

  PatchEmbed() = default;
  PatchEmbed(std::size_t p, std::size_t in_channels, std::size_t out_dim, Precision prec) : patch(p), precision(prec) {
    if (p == 0) throw ConfigError("patch_embed: patch size must be >= 1");
    if (prec == Precision::full)
      fp = Linear<T>(p * p * in_channels, out_dim);
    else
      bin = BiFC<T>(p * p * in_channels, out_dim);
  }

  std::size_t out_dim() const { return precision == Precision::full ? fp.dout() : bin.dout; }

  Tensor<T> forward(const Tensor<T>& x, const Grid& g, Grid& out_grid, const Ctx<T>& ctx, Cache* cache) const {
    const Tensor<T> patches = patchify(x, g, patch, &out_grid);
    if (cache) cache->in_grid = g;
    return precision == Precision::full ? fp.forward(patches, ctx, cache ? &cache->fp : nullptr)
                                        : bin.forward(patches, ctx, cache ? &cache->bin : nullptr);
  }

  Tensor<T> backward(const Tensor<T>& dy, Cache& cache) {
    const Tensor<T> dp = precision == Precision::full ? fp.backward(dy, cache.fp) : bin.backward(dy, cache.bin);
    return unpatchify(dp, cache.in_grid, patch);
  }
};

/// Functional form: embeds an H x W x C map (rank 3) into (H/P * W/P) tokens of dim D.
template <class T>
std::pair<Tensor<T>, Grid> patch_embed(const Tensor<T>& map, const PatchEmbed<T>& layer) {
  if (map.rank() != 3) throw ShapeError("patch_embed: expected an HxWxC map, got " + shape_str(map.shape()));
  const Grid g{1, map.shape()[0], map.shape()[1], false};
  Grid og;
  Tensor<T> y = layer.forward(map.reshaped({g.rows(), map.shape()[2]}), g, og, Ctx<T>{}, nullptr);
  return {std::move(y), og};
}

// ---------------------------------------------------------------------------
// Pooling before the classifier.

/// Per-channel mean over all N tokens of a single N x D matrix.
template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& tokens) {
  if (tokens.rank() != 2 || tokens.rows() == 0) throw ShapeError("global_avg_pool: need at least one token, got " + shape_str(tokens.shape()));
  Tensor<T> out = Tensor<T>::matrix(1, tokens.cols());
  for (std::size_t r = 0; r < tokens.rows(); ++r)
    for (std::size_t k = 0; k < tokens.cols(); ++k) out(0, k) += tokens(r, k);
  for (auto& v : out.values()) v /= static_cast<T>(tokens.rows());
  return out;
}

/// Batched: one pooled row per image, averaging all tokens of that image.
template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x, const Grid& g) {
  detail::check_rows(x.rows(), g, "global_avg_pool");
  if (g.tokens() == 0) throw ShapeError("global_avg_pool: N = 0");
  const std::size_t n = g.tokens(), c = x.cols();
  Tensor<T> out = Tensor<T>::matrix(g.batch, c);
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t k = 0; k < c; ++k) out(b, k) += x(b * n + t, k);
    for (std::size_t k = 0; k < c; ++k) out(b, k) /= static_cast<T>(n);
  }
  return out;
}

template <class T>
Tensor<T> global_avg_pool_backward(const Tensor<T>& dy, const Grid& g) {
  const std::size_t n = g.tokens(), c = dy.cols();
  Tensor<T> dx = Tensor<T>::matrix(g.rows(), c);
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t k = 0; k < c; ++k) dx(b * n + t, k) = dy(b, k) / static_cast<T>(n);
  return dx;
}

template <class T>
Tensor<T> cls_pool(const Tensor<T>& x, const Grid& g) {
  detail::check_rows(x.rows(), g, "cls_pool");
  if (!g.cls) throw ShapeError("cls_pool: grid has no class token");
  Tensor<T> out = Tensor<T>::matrix(g.batch, x.cols());
  for (std::size_t b = 0; b < g.batch; ++b) std::copy_n(&x(b * g.tokens(), 0), x.cols(), &out(b, 0));
  return out;
}

template <class T>
Tensor<T> cls_pool_backward(const Tensor<T>& dy, const Grid& g) {
  Tensor<T> dx = Tensor<T>::matrix(g.rows(), dy.cols());
  for (std::size_t b = 0; b < g.batch; ++b) std::copy_n(&dy(b, 0), dy.cols(), &dx(b * g.tokens(), 0));
  return dx;
}

}  // namespace bvit
