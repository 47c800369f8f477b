#pragma once

// Finite-difference checks of the straight-through gradients. A forward pass
// is recorded with an SteProbe; perturbed passes replay it with the surrogate
// quantizers, so central differences of the replayed network must match the
// analytic backward pass.

#include <cmath>
#include <cstdint>
#include <algorithm>
#include <functional>
#include <iterator>
#include <numeric>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "bvit/attention.hpp"
#include "bvit/layers.hpp"
#include "bvit/model.hpp"
#include "bvit/quant.hpp"
#include "bvit/tensor.hpp"

namespace bvit {

struct GradCheckOptions {
  std::size_t points = 100;
  double h = 1e-5;
  double rel_tol = 1e-4;
  /// Relative errors use max(|analytic|, |numeric|, denom_floor) as denominator.
  double denom_floor = 1e-4;
  /// Recorded site inputs must be at least this far from every kink.
  double kink_margin = 1e-3;
  std::size_t max_attempts = 200;
};

struct GradTarget {
  std::string name;
  Tensor<double>* value = nullptr;
  const Tensor<double>* grad = nullptr;
};

struct GradCheckResult {
  std::string name;
  std::size_t points = 0;
  std::size_t failures = 0;
  double max_rel_err = 0;
  double min_kink = std::numeric_limits<double>::infinity();
  std::size_t attempts = 0;
  bool rejected = false;  // recorded point too close to a kink
  std::string worst;

  bool ok() const { return !rejected && points > 0 && failures == 0; }
};

using DTensor = Tensor<double>;

namespace detail {

inline DTensor random_normal(Shape s, std::mt19937_64& rng, double std = 1.0, double mean = 0.0) {
  std::normal_distribution<double> nd(mean, std);
  DTensor t(std::move(s));
  for (auto& v : t.values()) v = nd(rng);
  return t;
}

inline double weighted_sum(const DTensor& y, const DTensor& w) {
  double s = 0;
  for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * w[i];
  return s;
}

/// Collects every learnable tensor of a layer as a gradient-check target.
struct TargetCollector {
  std::vector<GradTarget>& out;
  void param(const std::string& n, Param<double>& p) { out.push_back({n, &p.value, &p.grad}); }
  void buffer(const std::string&, DTensor&) {}
  void binary(const std::string& n, BiFC<double>& l) {
    if (l.trainable()) out.push_back({n + ".weight", &l.latent.value, &l.latent.grad});
  }
};

inline void randomize_params(std::vector<GradTarget>& targets, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  for (auto& t : targets) {
    const std::string& n = t.name;
    auto set = [&](double mean, double std) {
      for (auto& v : t.value->values()) v = mean + std * nd(rng);
    };
    if (n.ends_with(".weight")) set(0.0, 0.6);
    else if (n.ends_with("alpha_p")) {
      std::uniform_real_distribution<double> u(0.15, 0.6);
      (*t.value)[0] = u(rng);
    } else if (n.ends_with(".slope")) set(0.25, 0.1);
    else if (n.ends_with(".gamma") && n.find(".act") == std::string::npos) set(1.0, 0.2);
    else set(0.0, 0.2);
  }
}

}  // namespace detail

/// Core check. `fwd(ctx, record)` returns the scalar loss (and keeps a cache
/// when `record`); `bwd()` fills the gradients of every target for the
/// recorded pass. Gradients must be zero before `bwd` runs.
template <class Fwd, class Bwd>
GradCheckResult grad_check(const std::string& name, Fwd&& fwd, Bwd&& bwd, const std::vector<GradTarget>& targets,
                           const GradCheckOptions& opt, std::mt19937_64& rng) {
  GradCheckResult res;
  res.name = name;
  SteProbe<double> probe;
  Ctx<double> ctx{Mode::train, &probe, false};
  probe.start_record();
  fwd(ctx, true);
  res.min_kink = probe.min_kink_distance();
  if (res.min_kink < opt.kink_margin) {
    res.rejected = true;
    return res;
  }
  bwd();

  std::size_t total = 0;
  for (const auto& t : targets) total += t.value->size();
  if (total == 0) return res;
  std::vector<std::size_t> all(total), chosen;
  std::iota(all.begin(), all.end(), std::size_t{0});
  std::sample(all.begin(), all.end(), std::back_inserter(chosen), opt.points, rng);
  for (std::size_t flat : chosen) {
    const GradTarget* t = nullptr;
    for (const auto& cand : targets) {
      if (flat < cand.value->size()) {
        t = &cand;
        break;
      }
      flat -= cand.value->size();
    }
    double& x = (*t->value)[flat];
    const double x0 = x;
    x = x0 + opt.h;
    probe.start_replay();
    const double lp = fwd(ctx, false);
    x = x0 - opt.h;
    probe.start_replay();
    const double lm = fwd(ctx, false);
    x = x0;
    const double numeric = (lp - lm) / (2 * opt.h);
    const double analytic = (*t->grad)[flat];
    const double denom = std::max({std::abs(analytic), std::abs(numeric), opt.denom_floor});
    const double err = std::abs(analytic - numeric) / denom;
    ++res.points;
    if (err > res.max_rel_err) {
      res.max_rel_err = err;
      res.worst = t->name + "[" + std::to_string(flat) + "] analytic " + std::to_string(analytic) + " numeric " + std::to_string(numeric);
    }
    if (err > opt.rel_tol) ++res.failures;
  }
  return res;
}

/// Retries `attempt(rng)` with fresh random draws until the recorded point is
/// far enough from every kink.
template <class Attempt>
GradCheckResult with_resampling(Attempt&& attempt, const GradCheckOptions& opt, std::mt19937_64& rng) {
  GradCheckResult r;
  for (std::size_t i = 1; i <= opt.max_attempts; ++i) {
    r = attempt(rng);
    r.attempts = i;
    if (!r.rejected) return r;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Per-layer checks. Each builds a small random instance, loss = sum(w * y).

inline GradCheckResult check_bifc(const GradCheckOptions& opt, std::mt19937_64& rng, std::size_t din = 12, std::size_t dout = 24) {
  return with_resampling(
      [&](std::mt19937_64& r) {
        BiFC<double> layer(din, dout);
        layer.set_latent(detail::random_normal({din, dout}, r, 0.6));
        std::vector<GradTarget> targets;
        detail::TargetCollector tc{targets};
        visit_layer("bifc", layer, tc);
        detail::randomize_params(targets, r);
        DTensor x = detail::random_normal({6, din}, r);
        DTensor dx;
        targets.push_back({"x", &x, &dx});
        const DTensor w = detail::random_normal({6, dout}, r);
        BiFC<double>::Cache cache;
        auto fwd = [&](const Ctx<double>& ctx, bool rec) { return detail::weighted_sum(layer.forward(x, ctx, rec ? &cache : nullptr), w); };
        auto bwd = [&] { dx = layer.backward(w, cache); };
        return grad_check("BiFC " + std::to_string(din) + "->" + std::to_string(dout), fwd, bwd, targets, opt, r);
      },
      opt, rng);
}

inline GradCheckResult check_rprelu(const GradCheckOptions& opt, std::mt19937_64& rng) {
  return with_resampling(
      [&](std::mt19937_64& r) {
        RPReLU<double> act(6);
        std::vector<GradTarget> targets;
        detail::TargetCollector tc{targets};
        visit_layer("act", act, tc);
        detail::randomize_params(targets, r);
        DTensor x = detail::random_normal({20, 6}, r);
        DTensor dx;
        targets.push_back({"x", &x, &dx});
        const DTensor w = detail::random_normal({20, 6}, r);
        RPReLU<double>::Cache cache;
        auto fwd = [&](const Ctx<double>& ctx, bool rec) { return detail::weighted_sum(act.forward(x, ctx, rec ? &cache : nullptr), w); };
        auto bwd = [&] { dx = act.backward(w, cache); };
        return grad_check("RPReLU", fwd, bwd, targets, opt, r);
      },
      opt, rng);
}

inline GradCheckResult check_batchnorm(const GradCheckOptions& opt, std::mt19937_64& rng) {
  return with_resampling(
      [&](std::mt19937_64& r) {
        BatchNorm<double> bn(4);
        std::vector<GradTarget> targets;
        detail::TargetCollector tc{targets};
        visit_layer("bn", bn, tc);
        detail::randomize_params(targets, r);
        DTensor x = detail::random_normal({30, 4}, r, 1.5, 0.3);
        DTensor dx;
        targets.push_back({"x", &x, &dx});
        const DTensor w = detail::random_normal({30, 4}, r);
        BatchNorm<double>::Cache cache;
        auto fwd = [&](const Ctx<double>& ctx, bool rec) { return detail::weighted_sum(bn.forward(x, ctx, rec ? &cache : nullptr), w); };
        auto bwd = [&] { dx = bn.backward(w, cache); };
        return grad_check("BatchNorm(train)", fwd, bwd, targets, opt, r);
      },
      opt, rng);
}

inline GradCheckResult check_layerscale(const GradCheckOptions& opt, std::mt19937_64& rng) {
  return with_resampling(
      [&](std::mt19937_64& r) {
        LayerScale<double> ls(6);
        std::vector<GradTarget> targets;
        detail::TargetCollector tc{targets};
        visit_layer("ls", ls, tc);
        detail::randomize_params(targets, r);
        DTensor branch = detail::random_normal({12, 6}, r), skip = detail::random_normal({12, 6}, r);
        DTensor dbranch, dskip;
        targets.push_back({"branch", &branch, &dbranch});
        targets.push_back({"skip", &skip, &dskip});
        const DTensor w = detail::random_normal({12, 6}, r);
        LayerScale<double>::Cache cache;
        auto fwd = [&](const Ctx<double>&, bool rec) { return detail::weighted_sum(ls.forward(branch, skip, rec ? &cache : nullptr), w); };
        auto bwd = [&] {
          dbranch = ls.backward(w, cache);
          dskip = w;
        };
        return grad_check("LayerScale", fwd, bwd, targets, opt, r);
      },
      opt, rng);
}

/// The attention-probability quantizer alone: y = alpha * round(clip(S / alpha, 0, 1)).
inline GradCheckResult check_attn_quantizer(const GradCheckOptions& opt, std::mt19937_64& rng) {
  return with_resampling(
      [&](std::mt19937_64& r) {
        DTensor s = softmax_rows(detail::random_normal({8, 16}, r, 2.0));
        AttnProbScale<double> scale(std::uniform_real_distribution<double>(0.05, 0.3)(r));
        DTensor ds;
        std::vector<GradTarget> targets{{"S", &s, &ds}, {"alpha_p", &scale.alpha_p.value, &scale.alpha_p.grad}};
        const DTensor w = detail::random_normal({8, 16}, r);
        auto fwd = [&](const Ctx<double>& ctx, bool) {
          const double a = scale.value();
          DTensor c(s.shape());
          for (std::size_t i = 0; i < s.size(); ++i) {
            c[i] = clip01(s[i] / a);
            ctx.probe->note_kink(std::abs(s[i] / a - 1.0));
          }
          const DTensor q = ctx.probe->round_site(c);
          double loss = 0;
          for (std::size_t i = 0; i < q.size(); ++i) loss += w[i] * a * q[i];
          return loss;
        };
        auto bwd = [&] {
          const double a = scale.value();
          scale.alpha_p.grad[0] += attn_scale_gradient(s, a, w, 1.0);
          ds = DTensor(s.shape());
          for (std::size_t i = 0; i < s.size(); ++i) {
            const double v = s[i] / a;
            ds[i] = (v > 0 && v < 1) ? w[i] : 0.0;
          }
        };
        return grad_check("AttnProbQuantizer", fwd, bwd, targets, opt, r);
      },
      opt, rng);
}

inline GradCheckResult check_multipool(const GradCheckOptions& opt, std::mt19937_64& rng) {
  return with_resampling(
      [&](std::mt19937_64& r) {
        const Grid g{2, 5, 6, false};
        DTensor x = detail::random_normal({g.rows(), 3}, r);
        DTensor dx;
        std::vector<GradTarget> targets{{"x", &x, &dx}};
        const DTensor w = detail::random_normal({g.rows(), 3}, r);
        auto fwd = [&](const Ctx<double>&, bool) { return detail::weighted_sum(multi_pool_branches(x, g), w); };
        auto bwd = [&] { dx = multi_pool_branches_backward(w, g); };
        return grad_check("MultiPoolBranches", fwd, bwd, targets, opt, r);
      },
      opt, rng);
}

inline GradCheckResult check_attention(const GradCheckOptions& opt, std::mt19937_64& rng, std::size_t reduction = 2) {
  return with_resampling(
      [&](std::mt19937_64& r) {
        const std::size_t D = 8;
        const Grid g{2, 4, 4, false};
        Attention<double> attn(BiMHAConfig{D, 2, reduction});
        for (BiFC<double>* l : {&attn.q, &attn.k, &attn.v, &attn.o, &attn.sr})
          if (l->din) l->set_latent(DTensor({D, D}));
        std::vector<GradTarget> targets;
        detail::TargetCollector tc{targets};
        visit_layer("attn", attn, tc);
        detail::randomize_params(targets, r);
        DTensor x = detail::random_normal({g.rows(), D}, r);
        DTensor dx;
        targets.push_back({"x", &x, &dx});
        const DTensor w = detail::random_normal({g.rows(), D}, r);
        Attention<double>::Cache cache;
        auto fwd = [&](const Ctx<double>& ctx, bool rec) { return detail::weighted_sum(attn.forward(x, g, ctx, rec ? &cache : nullptr), w); };
        auto bwd = [&] { dx = attn.backward(w, cache, Ctx<double>{Mode::train, nullptr, false}); };
        return grad_check(reduction > 1 ? "Bi-SR-MHA" : "Bi-MHA", fwd, bwd, targets, opt, r);
      },
      opt, rng);
}

/// Small two-stage model, end to end (images and every parameter).
inline GradCheckResult check_model(const GradCheckOptions& opt, std::mt19937_64& rng) {
  ModelConfig cfg;
  cfg.name = "gradcheck";
  cfg.img_size = 8;
  cfg.num_classes = 3;
  cfg.stages = {{8, 2, 2, 2, 1, 2}, {16, 1, 2, 2, 1, 2}};
  return with_resampling(
      [&](std::mt19937_64& r) {
        Model<double> m = build_model<double>(cfg, r());
        std::vector<GradTarget> targets;
        detail::TargetCollector tc{targets};
        m.visit(tc);
        detail::randomize_params(targets, r);
        DTensor x = detail::random_normal({2, 8, 8, 3}, r);
        DTensor dx;
        const DTensor w = detail::random_normal({2, cfg.num_classes}, r);
        Model<double>::Cache cache;
        auto fwd = [&](const Ctx<double>& ctx, bool rec) { return detail::weighted_sum(m.forward(x, ctx, rec ? &cache : nullptr), w); };
        auto bwd = [&] { m.backward(w, cache, Ctx<double>{Mode::train, nullptr, false}); };
        return grad_check("Model", fwd, bwd, targets, opt, r);
      },
      opt, rng);
}

inline std::vector<GradCheckResult> run_layer_gradchecks(const GradCheckOptions& opt, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<GradCheckResult> out;
  out.push_back(check_bifc(opt, rng));
  out.push_back(check_bifc(opt, rng, 24, 12));
  out.push_back(check_rprelu(opt, rng));
  out.push_back(check_batchnorm(opt, rng));
  out.push_back(check_layerscale(opt, rng));
  out.push_back(check_attn_quantizer(opt, rng));
  out.push_back(check_multipool(opt, rng));
  out.push_back(check_attention(opt, rng, 1));
  out.push_back(check_attention(opt, rng, 2));
  return out;
}

}  // namespace bvit
