#pragma once

// Binary multi-head attention, optionally with spatial reduction of the
// key/value tokens.
//
//   Q = BiFC_Q(H), K = BiFC_K(X_kv), V = BiFC_V(X_kv)
//   X_kv = H, or BiFC_R(AvgPool_R(H)) when R > 1
//   A_h = Rsign(Q_h) Rsign(K_h)^T
//   P_h = alpha_p * round(clip(softmax(A_h / sqrt(D_h)) / alpha_p, 0, 1))
//   head_h = RPReLU(BN_at(P_h Rsign(V_h)) + Q_h + Up(K_h) + Up(V_h))
//   out = BiFC_O(concat(head_1..head_H))
//
// Up is nearest-neighbour upsampling from the reduced grid (identity for R = 1).

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "bvit/bittensor.hpp"
#include "bvit/layers.hpp"
#include "bvit/quant.hpp"
#include "bvit/tensor.hpp"

namespace bvit {

/// Nearest-neighbour resize of an h x w x C map to H x W x C (H >= h, W >= w):
/// out[i, j] = x[floor(i * h / H), floor(j * w / W)].
template <class T>
Tensor<T> upsample_nn(const Tensor<T>& x, std::size_t H, std::size_t W) {
  if (x.rank() != 3) throw ShapeError("upsample_nn: expected an hxwxC map, got " + shape_str(x.shape()));
  const std::size_t h = x.shape()[0], w = x.shape()[1], c = x.shape()[2];
  if (H < h || W < w)
    throw ShapeError("upsample_nn: target " + std::to_string(H) + "x" + std::to_string(W) + " is smaller than source " +
                     std::to_string(h) + "x" + std::to_string(w));
  Tensor<T> y({H, W, c});
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j) {
      const std::size_t si = i * h / H, sj = j * w / W;
      std::copy_n(&x.storage()[(si * w + sj) * c], c, &y.storage()[(i * W + j) * c]);
    }
  return y;
}

/// Token-batch form; `from` and `to` share batch size and class-token layout.
template <class T>
Tensor<T> upsample_nn(const Tensor<T>& x, const Grid& from, const Grid& to) {
  detail::check_rows(x.rows(), from, "upsample_nn");
  if (from == to) return x;
  if (to.h < from.h || to.w < from.w || from.cls != to.cls || from.batch != to.batch)
    throw ShapeError("upsample_nn: incompatible grids");
  Tensor<T> y = Tensor<T>::matrix(to.rows(), x.cols());
  for (std::size_t b = 0; b < to.batch; ++b) {
    if (to.cls) std::copy_n(&x(b * from.tokens(), 0), x.cols(), &y(b * to.tokens(), 0));
    for (std::size_t i = 0; i < to.h; ++i)
      for (std::size_t j = 0; j < to.w; ++j)
        std::copy_n(&x(from.row(b, i * from.h / to.h, j * from.w / to.w), 0), x.cols(), &y(to.row(b, i, j), 0));
  }
  return y;
}

template <class T>
Tensor<T> upsample_nn_backward(const Tensor<T>& dy, const Grid& from, const Grid& to) {
  if (from == to) return dy;
  Tensor<T> dx = Tensor<T>::matrix(from.rows(), dy.cols());
  for (std::size_t b = 0; b < to.batch; ++b) {
    if (to.cls)
      for (std::size_t k = 0; k < dy.cols(); ++k) dx(b * from.tokens(), k) += dy(b * to.tokens(), k);
    for (std::size_t i = 0; i < to.h; ++i)
      for (std::size_t j = 0; j < to.w; ++j) {
        T* d = &dx(from.row(b, i * from.h / to.h, j * from.w / to.w), 0);
        const T* u = &dy(to.row(b, i, j), 0);
        for (std::size_t k = 0; k < dy.cols(); ++k) d[k] += u[k];
      }
  }
  return dx;
}

struct BiMHAConfig {
  std::size_t dim = 0;
  std::size_t heads = 1;
  std::size_t reduction = 1;

  std::size_t head_dim() const { return dim / heads; }
  bool has_sr_projection() const { return reduction > 1; }

  void validate() const {
    if (dim == 0 || heads == 0 || dim % heads)
      throw ConfigError("attention: dim " + std::to_string(dim) + " is not divisible by " + std::to_string(heads) + " heads");
    if (reduction == 0) throw ConfigError("attention: reduction ratio must be >= 1");
  }
};

template <class T>
Tensor<T> sign_values(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] >= T{} ? T{1} : T{-1};
  return y;
}

template <class T>
struct Attention {
  BiMHAConfig cfg;
  BiFC<T> q, k, v, o;
  BiFC<T> sr;  // only meaningful when cfg.reduction > 1
  RSignParams<T> rs_q, rs_k, rs_v;
  BatchNorm<T> bn_at;
  RPReLU<T> act_at;
  AttnProbScale<T> scale;

  struct HeadCache {
    Tensor<T> probs;      // softmax output, N x M
    Tensor<T> rounded;    // round(clip(probs / alpha_p)) or its surrogate
    Tensor<T> quantized;  // alpha_p * rounded
  };

  struct Cache {
    Grid grid, kv_grid;
    typename BiFC<T>::Cache q, k, v, o, sr;
    Tensor<T> qs, ks, vs;  // projections plus score thresholds
    Tensor<T> qq, kq, vq;  // their signs (or surrogates)
    std::vector<HeadCache> heads;  // indexed b * H + h
    typename BatchNorm<T>::Cache bn;
    typename RPReLU<T>::Cache act;
    T alpha_p{};
  };

  Attention() = default;
  explicit Attention(BiMHAConfig c, T alpha_p_init = T{1})
      : cfg(c), rs_q(c.dim), rs_k(c.dim), rs_v(c.dim), bn_at(c.dim), act_at(c.dim), scale(alpha_p_init) {
    cfg.validate();
    q = BiFC<T>(c.dim, c.dim);
    k = BiFC<T>(c.dim, c.dim);
    v = BiFC<T>(c.dim, c.dim);
    o = BiFC<T>(c.dim, c.dim);
    if (c.has_sr_projection()) sr = BiFC<T>(c.dim, c.dim);
  }

  Tensor<T> forward(const Tensor<T>& hn, const Grid& g, const Ctx<T>& ctx, Cache* cache) const {
    const std::size_t D = cfg.dim, H = cfg.heads, dh = cfg.head_dim(), R = cfg.reduction;
    detail::check_rows(hn.rows(), g, "attention");
    if (hn.cols() != D) throw ShapeError("attention: input has " + std::to_string(hn.cols()) + " channels, expected " + std::to_string(D));
    if (R > 1 && (g.cls || g.h % R || g.w % R))
      throw ShapeError("attention: reduction " + std::to_string(R) + " does not divide the " + std::to_string(g.h) + "x" +
                       std::to_string(g.w) + " token grid");

    const Tensor<T> Q = q.forward(hn, ctx, cache ? &cache->q : nullptr);
    Grid kg = g;
    Tensor<T> kv_in;
    if (R > 1) {
      const Tensor<T> pooled = avg_pool_stride(hn, g, R, &kg);
      kv_in = sr.forward(pooled, ctx, cache ? &cache->sr : nullptr);
    }
    const Tensor<T>& kvx = R > 1 ? kv_in : hn;
    const Tensor<T> K = k.forward(kvx, ctx, cache ? &cache->k : nullptr);
    const Tensor<T> V = v.forward(kvx, ctx, cache ? &cache->v : nullptr);

    Tensor<T> qs = add_row_vector(Q, rs_q.beta.value.values());
    Tensor<T> ks = add_row_vector(K, rs_k.beta.value.values());
    Tensor<T> vs = add_row_vector(V, rs_v.beta.value.values());

    const bool replay = ctx.replaying();
    Tensor<T> qq, kq, vq;
    if (ctx.probe) {
      qq = ctx.probe->sign_site(qs);
      kq = ctx.probe->sign_site(ks);
      vq = ctx.probe->sign_site(vs);
    } else if (cache) {
      qq = sign_values(qs);
      kq = sign_values(ks);
      vq = sign_values(vs);
    }

    const T alpha = scale.value();
    if (!(alpha > T{})) throw ParameterError("attention: alpha_p must be > 0");
    const T inv_sqrt = T{1} / std::sqrt(static_cast<T>(dh));
    const std::size_t N = g.tokens(), M = kg.tokens();

    Tensor<T> heads_out = Tensor<T>::matrix(g.rows(), D);
    if (cache) cache->heads.assign(g.batch * H, {});
    for (std::size_t b = 0; b < g.batch; ++b)
      for (std::size_t h = 0; h < H; ++h) {
        Tensor<T> scores;
        if (replay) {
          scores = matmul_nt(block(qq, b * N, N, h * dh, dh), block(kq, b * M, M, h * dh, dh));
        } else {
          const IntMatrix a = binary_gemm_nt(pack_signs_block(qs, b * N, N, h * dh, dh), pack_signs_block(ks, b * M, M, h * dh, dh));
          scores = Tensor<T>(a.shape());
          for (std::size_t i = 0; i < a.size(); ++i) scores[i] = static_cast<T>(a[i]);
        }
        for (auto& s : scores.values()) s *= inv_sqrt;
        Tensor<T> probs = softmax_rows(scores);

        Tensor<T> clipped(probs.shape());
        for (std::size_t i = 0; i < probs.size(); ++i) {
          const T ratio = probs[i] / alpha;
          clipped[i] = clip01(ratio);
          if (ctx.probe) ctx.probe->note_kink(std::abs(ratio - T{1}));
        }
        Tensor<T> rounded;
        if (ctx.probe) {
          rounded = ctx.probe->round_site(clipped);
        } else {
          rounded = Tensor<T>(clipped.shape());
          for (std::size_t i = 0; i < clipped.size(); ++i) rounded[i] = std::round(clipped[i]);
        }
        Tensor<T> quantized(rounded.shape());
        for (std::size_t i = 0; i < rounded.size(); ++i) quantized[i] = alpha * rounded[i];

        Tensor<T> head;
        if (replay) {
          head = matmul(quantized, block(vq, b * M, M, h * dh, dh));
        } else {
          BitMatrix mask(N, M);
          for (std::size_t i = 0; i < N; ++i)
            for (std::size_t j = 0; j < M; ++j)
              if (rounded(i, j) != T{}) mask.set(i, j, true);
          const BitMatrix vt = pack_signs_block(vs, b * M, M, h * dh, dh).transposed();
          const IntMatrix pv = masked_pm1_gemm(mask, vt);
          head = Tensor<T>(pv.shape());
          for (std::size_t i = 0; i < pv.size(); ++i) head[i] = alpha * static_cast<T>(pv[i]);
        }
        set_block(heads_out, b * N, h * dh, head);
        if (cache) cache->heads[b * H + h] = {std::move(probs), std::move(rounded), std::move(quantized)};
      }

    Tensor<T> pre = bn_at.forward(heads_out, ctx, cache ? &cache->bn : nullptr);
    add_inplace(pre, Q);
    add_inplace(pre, upsample_nn(K, kg, g));
    add_inplace(pre, upsample_nn(V, kg, g));
    const Tensor<T> act = act_at.forward(pre, ctx, cache ? &cache->act : nullptr);
    Tensor<T> out = o.forward(act, ctx, cache ? &cache->o : nullptr);

    if (cache) {
      cache->grid = g;
      cache->kv_grid = kg;
      cache->qs = std::move(qs);
      cache->ks = std::move(ks);
      cache->vs = std::move(vs);
      cache->qq = std::move(qq);
      cache->kq = std::move(kq);
      cache->vq = std::move(vq);
      cache->alpha_p = alpha;
    }
    return out;
  }

  Tensor<T> backward(const Tensor<T>& dout, Cache& c, const Ctx<T>& ctx) {
    if (c.qq.empty()) throw InternalError("attention: backward without recorded forward");
    const std::size_t D = cfg.dim, H = cfg.heads, dh = cfg.head_dim(), R = cfg.reduction;
    const Grid& g = c.grid;
    const Grid& kg = c.kv_grid;
    const std::size_t N = g.tokens(), M = kg.tokens();
    const T alpha = c.alpha_p;
    const T inv_sqrt = T{1} / std::sqrt(static_cast<T>(dh));

    const Tensor<T> dact = o.backward(dout, c.o);
    const Tensor<T> dpre = act_at.backward(dact, c.act);
    Tensor<T> dQ = dpre;
    Tensor<T> dK = upsample_nn_backward(dpre, kg, g);
    Tensor<T> dV = dK;
    const Tensor<T> dheads = bn_at.backward(dpre, c.bn);

    Tensor<T> dqq(c.qq.shape()), dkq(c.kq.shape()), dvq(c.vq.shape());
    T dalpha{};
    for (std::size_t b = 0; b < g.batch; ++b)
      for (std::size_t h = 0; h < H; ++h) {
        const HeadCache& hc = c.heads[b * H + h];
        const Tensor<T> dhead = block(dheads, b * N, N, h * dh, dh);
        const Tensor<T> vqh = block(c.vq, b * M, M, h * dh, dh);
        const Tensor<T> dP = matmul_nt(dhead, vqh);
        add_block(dvq, b * M, h * dh, matmul_tn(hc.quantized, dhead));

        Tensor<T> dprobs(dP.shape());
        for (std::size_t i = 0; i < dP.size(); ++i) {
          const T ratio = hc.probs[i] / alpha;
          const bool inside = ratio > T{} && ratio < T{1};
          dalpha += dP[i] * (inside ? hc.rounded[i] - ratio : hc.rounded[i]);
          dprobs[i] = inside ? dP[i] : T{};
        }
        Tensor<T> dscores = softmax_rows_backward(hc.probs, dprobs);
        for (auto& v : dscores.values()) v *= inv_sqrt;
        add_block(dqq, b * N, h * dh, matmul(dscores, block(c.kq, b * M, M, h * dh, dh)));
        add_block(dkq, b * M, h * dh, matmul_tn(dscores, block(c.qq, b * N, N, h * dh, dh)));
      }
    if (ctx.lsq_grad_scale) dalpha *= lsq_grad_scale<T>(N * M);
    scale.alpha_p.grad[0] += dalpha;

    const Tensor<T> dqs = ste_backward(c.qs, dqq);
    const Tensor<T> dks = ste_backward(c.ks, dkq);
    const Tensor<T> dvs = ste_backward(c.vs, dvq);
    accumulate_column_sums(dqs, rs_q.beta.grad);
    accumulate_column_sums(dks, rs_k.beta.grad);
    accumulate_column_sums(dvs, rs_v.beta.grad);
    add_inplace(dQ, dqs);
    add_inplace(dK, dks);
    add_inplace(dV, dvs);

    Tensor<T> dkv = k.backward(dK, c.k);
    add_inplace(dkv, v.backward(dV, c.v));
    Tensor<T> dhn = q.backward(dQ, c.q);
    if (R > 1) {
      add_inplace(dhn, avg_pool_stride_backward(sr.backward(dkv, c.sr), g, R));
    } else {
      add_inplace(dhn, dkv);
    }
    (void)D;
    return dhn;
  }
};

/// Bi-MHA over a single image's tokens (no spatial reduction).
template <class T>
Tensor<T> bi_mha_forward(const Tensor<T>& h_norm, const Attention<T>& attn) {
  if (attn.cfg.reduction != 1) throw ConfigError("bi_mha_forward: attention has a spatial reduction; use bi_sr_mha_forward");
  const Grid g{1, h_norm.rows(), 1, false};
  return attn.forward(h_norm, g, Ctx<T>{}, nullptr);
}

/// Bi-SR-MHA over a single image laid out on an H x W grid.
template <class T>
Tensor<T> bi_sr_mha_forward(const Tensor<T>& h_norm, std::size_t H, std::size_t W, const Attention<T>& attn) {
  const Grid g{1, H, W, false};
  return attn.forward(h_norm, g, Ctx<T>{}, nullptr);
}

}  // namespace bvit
