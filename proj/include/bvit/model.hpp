#pragma once

// Network assembly: baseline binary DeiT (single stage, class token) and the
// pyramid BinaryViT (four stages, global average pooling, pooling branches,
// LayerScale residuals).

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "bvit/attention.hpp"
#include "bvit/layers.hpp"
#include "bvit/tensor.hpp"

namespace bvit {

enum class Pooling { cls_token, global_avg };

struct StageConfig {
  std::size_t dim = 64;
  std::size_t reduction = 1;
  std::size_t heads = 1;
  std::size_t ffn_expansion = 4;
  std::size_t blocks = 1;
  /// Downsampling factor of the patch embedding that feeds this stage.
  std::size_t patch = 2;

  friend bool operator==(const StageConfig&, const StageConfig&) = default;
};

struct ModelConfig {
  std::string name = "custom";
  std::vector<StageConfig> stages;
  std::size_t img_size = 224;
  std::size_t in_channels = 3;
  std::size_t num_classes = 1000;
  Pooling pooling = Pooling::global_avg;
  bool use_multibranch = true;
  bool use_layerscale = true;
  Precision mid_patch_embed_precision = Precision::binary;
  /// Learnable position embeddings after every stage's patch embedding; the
  /// first stage always has one.
  bool stage_pos_embed = true;
  double layerscale_init = 0.1;
  /// Per-channel normalization applied to [0, 255] pixel values.
  std::vector<double> norm_mean{123.675, 116.28, 103.53};
  std::vector<double> norm_std{58.395, 57.12, 57.375};

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;

  std::size_t total_downsample() const {
    std::size_t d = 1;
    for (const auto& s : stages) d *= s.patch;
    return d;
  }

  /// Side length of the token grid of stage i.
  std::size_t grid_side(std::size_t stage) const {
    std::size_t side = img_size;
    for (std::size_t i = 0; i <= stage; ++i) side /= stages[i].patch;
    return side;
  }

  void validate() const {
    auto fail = [](const std::string& what) { throw ConfigError("model config: " + what); };
    if (stages.empty()) fail("at least one stage is required");
    if (img_size == 0 || in_channels == 0) fail("img_size and in_channels must be positive");
    if (num_classes == 0) fail("num_classes must be positive");
    if (norm_mean.size() != in_channels || norm_std.size() != in_channels) fail("norm_mean/norm_std must have in_channels entries");
    for (double s : norm_std)
      if (!(s > 0)) fail("norm_std entries must be positive");
    if (pooling == Pooling::cls_token && stages.size() != 1) fail("cls_token pooling requires a single-stage model");
    std::size_t side = img_size;
    for (std::size_t i = 0; i < stages.size(); ++i) {
      const auto& s = stages[i];
      const std::string at = "stage " + std::to_string(i + 1) + ": ";
      if (s.dim == 0 || s.heads == 0 || s.dim % s.heads) fail(at + "dim " + std::to_string(s.dim) + " not divisible by heads " + std::to_string(s.heads));
      if (s.patch == 0 || side % s.patch)
        fail(at + "img_size " + std::to_string(img_size) + " not divisible by the cumulative downsample " + std::to_string(total_downsample()));
      side /= s.patch;
      if (s.reduction == 0 || side % s.reduction)
        fail(at + "reduction " + std::to_string(s.reduction) + " does not divide the " + std::to_string(side) + "x" + std::to_string(side) + " grid");
      if (s.reduction > 1 && pooling == Pooling::cls_token) fail(at + "spatial reduction is incompatible with a class token");
      if (s.ffn_expansion == 0) fail(at + "ffn_expansion must be positive");
      if (i > 0 && mid_patch_embed_precision == Precision::binary) {
        const std::size_t in = s.patch * s.patch * stages[i - 1].dim;
        if (in != s.dim && s.dim % in && in % s.dim)
          fail(at + "binary patch embedding " + std::to_string(in) + " -> " + std::to_string(s.dim) + " has no integer channel ratio");
      }
    }
  }
};

namespace presets {

/// Four-stage pyramid: C 64/128/256/512, R 8/4/1/1, heads 1/2/4/8, E 8/8/4/4, blocks 3/4/8/4.
inline ModelConfig binaryvit() {
  ModelConfig c;
  c.name = "binaryvit";
  c.stages = {{64, 8, 1, 8, 3, 4}, {128, 4, 2, 8, 4, 2}, {256, 1, 4, 4, 8, 2}, {512, 1, 8, 4, 4, 2}};
  return c;
}

/// BinaryViT with full-precision downsampling patch embeddings.
inline ModelConfig binaryvit_star() {
  ModelConfig c = binaryvit();
  c.name = "binaryvit_star";
  c.mid_patch_embed_precision = Precision::full;
  return c;
}

/// Binary DeiT-S: 12 blocks, D = 384, 6 heads, patch 16, class-token pooling.
inline ModelConfig deit_s_baseline() {
  ModelConfig c;
  c.name = "deit_s_baseline";
  c.stages = {{384, 1, 6, 4, 12, 16}};
  c.pooling = Pooling::cls_token;
  c.use_multibranch = false;
  c.use_layerscale = false;
  return c;
}

/// Two-stage pyramid for desk-scale training on 32x32 inputs.
inline ModelConfig tiny_pyramid() {
  ModelConfig c;
  c.name = "tiny_pyramid";
  c.img_size = 32;
  c.num_classes = 10;
  c.stages = {{32, 2, 2, 2, 1, 4}, {64, 1, 4, 2, 1, 2}};
  return c;
}

}  // namespace presets

// ---------------------------------------------------------------------------

namespace detail {

class Init {
 public:
  explicit Init(std::uint64_t seed) : rng_(seed) {}

  /// Normal(0, std) truncated to +-2 std.
  template <class T>
  Tensor<T> trunc_normal(Shape shape, double std) {
    std::normal_distribution<double> nd(0.0, 1.0);
    Tensor<T> t(std::move(shape));
    for (auto& v : t.values()) {
      double z;
      do z = nd(rng_);
      while (std::abs(z) > 2.0);
      v = static_cast<T>(z * std);
    }
    return t;
  }

 private:
  std::mt19937_64 rng_;
};

}  // namespace detail

template <class T>
struct Block {
  bool layerscale = true;
  bool multibranch = true;
  BatchNorm<T> bn1;
  Attention<T> attn;
  LayerScale<T> ls1;
  BatchNorm<T> bn2;
  BiFC<T> ffn1, ffn2;
  LayerScale<T> ls2;

  struct Cache {
    Grid grid;
    typename BatchNorm<T>::Cache bn1, bn2;
    typename Attention<T>::Cache attn;
    typename LayerScale<T>::Cache ls1, ls2;
    typename BiFC<T>::Cache ffn1, ffn2;
  };

  Block() = default;
  Block(const StageConfig& s, const ModelConfig& m, std::size_t kv_tokens)
      : layerscale(m.use_layerscale),
        multibranch(m.use_multibranch),
        bn1(s.dim),
        attn(BiMHAConfig{s.dim, s.heads, s.reduction}, T(2.0 / static_cast<double>(kv_tokens))),
        bn2(s.dim),
        ffn1(s.dim, s.dim * s.ffn_expansion),
        ffn2(s.dim * s.ffn_expansion, s.dim) {
    if (layerscale) {
      ls1 = LayerScale<T>(s.dim, T(m.layerscale_init));
      ls2 = LayerScale<T>(s.dim, T(m.layerscale_init));
    }
  }

  Tensor<T> forward(const Tensor<T>& x, const Grid& g, const Ctx<T>& ctx, Cache* c) const {
    const Tensor<T> hn = bn1.forward(x, ctx, c ? &c->bn1 : nullptr);
    const Tensor<T> a = attn.forward(hn, g, ctx, c ? &c->attn : nullptr);
    const Tensor<T> f = layerscale ? ls1.forward(a, x, c ? &c->ls1 : nullptr) : add(a, x);
    const Tensor<T> fn = bn2.forward(f, ctx, c ? &c->bn2 : nullptr);
    Tensor<T> m = ffn2.forward(ffn1.forward(fn, ctx, c ? &c->ffn1 : nullptr), ctx, c ? &c->ffn2 : nullptr);
    if (multibranch) add_inplace(m, multi_pool_branches(fn, g));
    if (c) c->grid = g;
    return layerscale ? ls2.forward(m, f, c ? &c->ls2 : nullptr) : add(m, f);
  }

  Tensor<T> backward(const Tensor<T>& dy, Cache& c, const Ctx<T>& ctx) {
    const Tensor<T> dm = layerscale ? ls2.backward(dy, c.ls2) : dy;
    Tensor<T> dfn = ffn1.backward(ffn2.backward(dm, c.ffn2), c.ffn1);
    if (multibranch) add_inplace(dfn, multi_pool_branches_backward(dm, c.grid));
    Tensor<T> df = add(bn2.backward(dfn, c.bn2), dy);
    const Tensor<T> da = layerscale ? ls1.backward(df, c.ls1) : df;
    const Tensor<T> dhn = attn.backward(da, c.attn, ctx);
    return add(bn1.backward(dhn, c.bn1), df);
  }
};

template <class T>
struct Stage {
  PatchEmbed<T> embed;
  bool has_pos = false;
  Param<T> pos;  // tokens x dim
  std::vector<Block<T>> blocks;
};

/// Visitor protocol used for parameter iteration and serialization:
///   param(name, Param<T>&)       learnable full-precision tensor
///   buffer(name, Tensor<T>&)     non-learnable state (BN running stats)
///   binary(name, BiFC<T>&)       binary weight (latent or packed)
template <class T, class V>
void visit_layer(const std::string& p, BatchNorm<T>& bn, V& v) {
  v.param(p + ".gamma", bn.gamma);
  v.param(p + ".beta", bn.shift);
  v.buffer(p + ".running_mean", bn.running_mean);
  v.buffer(p + ".running_var", bn.running_var);
}

template <class T, class V>
void visit_layer(const std::string& p, RPReLU<T>& a, V& v) {
  v.param(p + ".gamma", a.gamma);
  v.param(p + ".zeta", a.zeta);
  v.param(p + ".slope", a.slope);
}

template <class T, class V>
void visit_layer(const std::string& p, BiFC<T>& f, V& v) {
  v.binary(p, f);
  v.param(p + ".rsign_beta", f.rsign.beta);
  visit_layer(p + ".bn", f.bn, v);
  visit_layer(p + ".act", f.act, v);
}

template <class T, class V>
void visit_layer(const std::string& p, Linear<T>& l, V& v) {
  v.param(p + ".weight", l.weight);
  v.param(p + ".bias", l.bias);
}

template <class T, class V>
void visit_layer(const std::string& p, LayerScale<T>& l, V& v) {
  v.param(p + ".alpha", l.alpha);
  v.param(p + ".bias", l.bias);
}

template <class T, class V>
void visit_layer(const std::string& p, Attention<T>& a, V& v) {
  visit_layer(p + ".q", a.q, v);
  visit_layer(p + ".k", a.k, v);
  visit_layer(p + ".v", a.v, v);
  if (a.cfg.has_sr_projection()) visit_layer(p + ".sr", a.sr, v);
  v.param(p + ".score_beta_q", a.rs_q.beta);
  v.param(p + ".score_beta_k", a.rs_k.beta);
  v.param(p + ".score_beta_v", a.rs_v.beta);
  v.param(p + ".alpha_p", a.scale.alpha_p);
  visit_layer(p + ".bn_at", a.bn_at, v);
  visit_layer(p + ".act_at", a.act_at, v);
  visit_layer(p + ".o", a.o, v);
}

template <class T, class V>
void visit_layer(const std::string& p, Block<T>& b, V& v) {
  visit_layer(p + ".bn1", b.bn1, v);
  visit_layer(p + ".attn", b.attn, v);
  if (b.layerscale) visit_layer(p + ".ls1", b.ls1, v);
  visit_layer(p + ".bn2", b.bn2, v);
  visit_layer(p + ".ffn1", b.ffn1, v);
  visit_layer(p + ".ffn2", b.ffn2, v);
  if (b.layerscale) visit_layer(p + ".ls2", b.ls2, v);
}

template <class T>
class Model {
 public:
  struct Cache {
    Grid input_grid;
    std::vector<typename PatchEmbed<T>::Cache> embed;
    std::vector<Grid> stage_grid;
    std::vector<std::vector<typename Block<T>::Cache>> blocks;
    typename BatchNorm<T>::Cache final_bn;
    Grid final_grid;
    typename Linear<T>::Cache head;
  };

  Model() = default;

  /// Structure for `cfg` with default-initialized parameters and no latent
  /// binary weights (the loader fills them in).
  explicit Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    std::size_t channels = cfg_.in_channels;
    std::size_t side = cfg_.img_size;
    for (std::size_t i = 0; i < cfg_.stages.size(); ++i) {
      const StageConfig& s = cfg_.stages[i];
      Stage<T> st;
      const Precision prec = i == 0 ? Precision::full : cfg_.mid_patch_embed_precision;
      st.embed = PatchEmbed<T>(s.patch, channels, s.dim, prec);
      side /= s.patch;
      const std::size_t tokens = side * side + (cfg_.pooling == Pooling::cls_token ? 1 : 0);
      st.has_pos = i == 0 || cfg_.stage_pos_embed;
      if (st.has_pos) st.pos = Param<T>({tokens, s.dim}, T{});
      const std::size_t kv_side = side / s.reduction;
      const std::size_t kv_tokens = s.reduction > 1 ? kv_side * kv_side : tokens;
      for (std::size_t b = 0; b < s.blocks; ++b) st.blocks.emplace_back(s, cfg_, kv_tokens);
      stages_.push_back(std::move(st));
      channels = s.dim;
    }
    if (cfg_.pooling == Pooling::cls_token) cls_token_ = Param<T>({channels}, T{});
    final_bn_ = BatchNorm<T>(channels);
    head_ = Linear<T>(channels, cfg_.num_classes);
  }

  const ModelConfig& config() const noexcept { return cfg_; }
  std::vector<Stage<T>>& stages() noexcept { return stages_; }
  const std::vector<Stage<T>>& stages() const noexcept { return stages_; }
  Param<T>& cls_token() noexcept { return cls_token_; }
  BatchNorm<T>& final_bn() noexcept { return final_bn_; }
  const BatchNorm<T>& final_bn() const noexcept { return final_bn_; }
  Linear<T>& head() noexcept { return head_; }
  const Linear<T>& head() const noexcept { return head_; }

  template <class V>
  void visit(V& v) {
    for (std::size_t i = 0; i < stages_.size(); ++i) {
      Stage<T>& st = stages_[i];
      const std::string p = "stage" + std::to_string(i);
      if (st.embed.precision == Precision::full)
        visit_layer(p + ".embed", st.embed.fp, v);
      else
        visit_layer(p + ".embed", st.embed.bin, v);
      if (st.has_pos) v.param(p + ".pos", st.pos);
      for (std::size_t b = 0; b < st.blocks.size(); ++b) visit_layer(p + ".block" + std::to_string(b), st.blocks[b], v);
    }
    if (cfg_.pooling == Pooling::cls_token) v.param("cls_token", cls_token_);
    visit_layer("final_bn", final_bn_, v);
    visit_layer("head", head_, v);
  }

  /// Calls f(name, Param&) for every learnable tensor, latent binary weights included.
  template <class F>
  void for_each_param(F&& f) {
    struct V {
      F& f;
      void param(const std::string& n, Param<T>& p) { f(n, p); }
      void buffer(const std::string&, Tensor<T>&) {}
      void binary(const std::string& n, BiFC<T>& l) {
        if (l.trainable()) f(n + ".weight", l.latent);
      }
    } v{f};
    visit(v);
  }

  /// Learnable parameter count; binary weights count one per element.
  std::size_t num_params() const {
    std::size_t n = 0;
    struct V {
      std::size_t& n;
      void param(const std::string&, Param<T>& p) { n += p.size(); }
      void buffer(const std::string&, Tensor<T>&) {}
      void binary(const std::string&, BiFC<T>& l) { n += l.din * l.dout; }
    } v{n};
    const_cast<Model*>(this)->visit(v);
    return n;
  }

  void zero_grad() {
    for_each_param([](const std::string&, Param<T>& p) { p.zero_grad(); });
  }

  /// Replaces every latent binary weight by its packed form.
  void freeze() {
    struct V {
      void param(const std::string&, Param<T>&) {}
      void buffer(const std::string&, Tensor<T>&) {}
      void binary(const std::string&, BiFC<T>& l) {
        if (l.trainable()) l.set_frozen(l.binary_weight());
      }
    } v;
    visit(v);
  }

  /// images: (batch, H, W, C), already normalized. Returns batch x classes logits.
  Tensor<T> forward(const Tensor<T>& images, const Ctx<T>& ctx, Cache* c = nullptr) const {
    if (images.rank() != 4 || images.shape()[1] != cfg_.img_size || images.shape()[2] != cfg_.img_size ||
        images.shape()[3] != cfg_.in_channels)
      throw ShapeError("model: expected images of shape [Bx" + std::to_string(cfg_.img_size) + "x" + std::to_string(cfg_.img_size) +
                       "x" + std::to_string(cfg_.in_channels) + "], got " + shape_str(images.shape()));
    Grid g{images.shape()[0], cfg_.img_size, cfg_.img_size, false};
    Tensor<T> x = images.reshaped({g.rows(), cfg_.in_channels});
    if (c) {
      c->input_grid = g;
      c->embed.assign(stages_.size(), {});
      c->stage_grid.assign(stages_.size(), {});
      c->blocks.assign(stages_.size(), {});
    }
    for (std::size_t i = 0; i < stages_.size(); ++i) {
      const Stage<T>& st = stages_[i];
      Grid og;
      x = st.embed.forward(x, g, og, ctx, c ? &c->embed[i] : nullptr);
      g = og;
      if (i == 0 && cfg_.pooling == Pooling::cls_token) x = prepend_cls(x, g);
      if (st.has_pos) add_pos(x, g, st.pos.value);
      if (c) {
        c->stage_grid[i] = g;
        c->blocks[i].assign(st.blocks.size(), {});
      }
      for (std::size_t b = 0; b < st.blocks.size(); ++b) x = st.blocks[b].forward(x, g, ctx, c ? &c->blocks[i][b] : nullptr);
    }
    x = final_bn_.forward(x, ctx, c ? &c->final_bn : nullptr);
    const Tensor<T> pooled = cfg_.pooling == Pooling::global_avg ? global_avg_pool(x, g) : cls_pool(x, g);
    if (c) c->final_grid = g;
    return head_.forward(pooled, ctx, c ? &c->head : nullptr);
  }

  /// Token grids visited by forward for a batch of one image, stage by stage.
  std::vector<Grid> stage_grids() const {
    std::vector<Grid> out;
    std::size_t side = cfg_.img_size;
    for (const auto& s : cfg_.stages) {
      side /= s.patch;
      out.push_back(Grid{1, side, side, cfg_.pooling == Pooling::cls_token});
    }
    return out;
  }

  /// Backpropagates dL/dlogits, accumulating into every parameter gradient.
  void backward(const Tensor<T>& dlogits, Cache& c, const Ctx<T>& ctx = Ctx<T>{Mode::train}) {
    if (c.stage_grid.size() != stages_.size()) throw InternalError("model: backward without recorded forward");
    const Grid& g = c.final_grid;
    const Tensor<T> dpooled = head_.backward(dlogits, c.head);
    Tensor<T> dx = cfg_.pooling == Pooling::global_avg ? global_avg_pool_backward(dpooled, g) : cls_pool_backward(dpooled, g);
    dx = final_bn_.backward(dx, c.final_bn);
    for (std::size_t i = stages_.size(); i-- > 0;) {
      Stage<T>& st = stages_[i];
      const Grid& sg = c.stage_grid[i];
      for (std::size_t b = st.blocks.size(); b-- > 0;) dx = st.blocks[b].backward(dx, c.blocks[i][b], ctx);
      if (st.has_pos) {
        const std::size_t n = sg.tokens();
        for (std::size_t bi = 0; bi < sg.batch; ++bi)
          for (std::size_t t = 0; t < n; ++t)
            for (std::size_t k = 0; k < dx.cols(); ++k) st.pos.grad(t, k) += dx(bi * n + t, k);
      }
      if (i == 0 && cfg_.pooling == Pooling::cls_token) dx = strip_cls(dx, sg);
      dx = st.embed.backward(dx, c.embed[i]);
    }
  }

 private:
  Tensor<T> prepend_cls(const Tensor<T>& x, Grid& g) const {
    Grid cg = g;
    cg.cls = true;
    Tensor<T> y = Tensor<T>::matrix(cg.rows(), x.cols());
    for (std::size_t b = 0; b < g.batch; ++b) {
      std::copy_n(cls_token_.value.storage().data(), x.cols(), &y(b * cg.tokens(), 0));
      std::copy_n(&x(b * g.tokens(), 0), g.tokens() * x.cols(), &y(b * cg.tokens() + 1, 0));
    }
    g = cg;
    return y;
  }

  Tensor<T> strip_cls(const Tensor<T>& dy, const Grid& cg) {
    Grid g = cg;
    g.cls = false;
    Tensor<T> dx = Tensor<T>::matrix(g.rows(), dy.cols());
    for (std::size_t b = 0; b < cg.batch; ++b) {
      for (std::size_t k = 0; k < dy.cols(); ++k) cls_token_.grad[k] += dy(b * cg.tokens(), k);
      std::copy_n(&dy(b * cg.tokens() + 1, 0), g.tokens() * dy.cols(), &dx(b * g.tokens(), 0));
    }
    return dx;
  }

  static void add_pos(Tensor<T>& x, const Grid& g, const Tensor<T>& pos) {
    const std::size_t n = g.tokens();
    if (pos.rows() != n || pos.cols() != x.cols()) throw ShapeError("position embedding " + shape_str(pos.shape()) + " does not match token grid");
    for (std::size_t b = 0; b < g.batch; ++b)
      for (std::size_t t = 0; t < n; ++t)
        for (std::size_t k = 0; k < x.cols(); ++k) x(b * n + t, k) += pos(t, k);
  }

  ModelConfig cfg_;
  std::vector<Stage<T>> stages_;
  Param<T> cls_token_;
  BatchNorm<T> final_bn_;
  Linear<T> head_;
};

/// Deterministic initialization from `seed`: truncated-normal (std 0.02)
/// latent binary weights, linear weights, position embeddings and class token.
template <class T = float>
Model<T> build_model(const ModelConfig& cfg, std::uint64_t seed) {
  Model<T> m(cfg);
  detail::Init init(seed);
  struct V {
    detail::Init& init;
    void param(const std::string& n, Param<T>& p) {
      const bool random = n.ends_with(".pos") || n == "cls_token" || (n.ends_with(".weight") && p.value.rank() == 2);
      if (random) p = Param<T>(init.trunc_normal<T>(p.value.shape(), 0.02));
    }
    void buffer(const std::string&, Tensor<T>&) {}
    void binary(const std::string&, BiFC<T>& l) { l.set_latent(init.trunc_normal<T>({l.din, l.dout}, 0.02)); }
  } v{init};
  m.visit(v);
  return m;
}

/// Converts a batch of interleaved 8-bit pixels (B x H x W x C) to the
/// normalized real tensor the model consumes.
template <class T = float>
Tensor<T> normalize_pixels(std::span<const std::uint8_t> pixels, std::size_t batch, const ModelConfig& cfg) {
  const std::size_t c = cfg.in_channels, n = cfg.img_size * cfg.img_size;
  if (pixels.size() != batch * n * c) throw ShapeError("normalize_pixels: expected " + std::to_string(batch * n * c) + " bytes, got " + std::to_string(pixels.size()));
  Tensor<T> out({batch, cfg.img_size, cfg.img_size, c});
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    const std::size_t ch = i % c;
    out[i] = static_cast<T>((static_cast<double>(pixels[i]) - cfg.norm_mean[ch]) / cfg.norm_std[ch]);
  }
  return out;
}

}  // namespace bvit
