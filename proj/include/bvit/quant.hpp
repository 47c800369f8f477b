#pragma once

// Quantizers and their straight-through gradients.

#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "bvit/bittensor.hpp"
#include "bvit/errors.hpp"
#include "bvit/tensor.hpp"

namespace bvit {

/// Learnable per-input-channel threshold applied before sign.
template <class T>
struct RSignParams {
  Param<T> beta;

  RSignParams() = default;
  explicit RSignParams(std::size_t channels) : beta({channels}, T{}) {}
  std::size_t channels() const noexcept { return beta.value.size(); }
};

/// Binarized weight matrix: sign(W - mu(W)) packed, plus the L1 scale.
/// `bits` is D_in x D_out; `bits_t` is its transpose (D_out x D_in), kept so
/// the GEMM can stream both operands row-major.
template <class T>
struct BinWeight {
  BitMatrix bits;
  BitMatrix bits_t;
  T alpha{};
  Tensor<T> mu;

  std::size_t din() const noexcept { return bits.rows(); }
  std::size_t dout() const noexcept { return bits.cols(); }
};

template <class T>
struct AttnProbScale {
  Param<T> alpha_p;

  AttnProbScale() : alpha_p({1}, T{1}) {}
  explicit AttnProbScale(T init) : alpha_p({1}, init) {}
  T value() const { return alpha_p.value[0]; }
};

/// sign(x + beta) with beta broadcast over rows.
template <class T>
BitMatrix rsign(const Tensor<T>& x, std::span<const T> beta) {
  if (x.rank() != 2 || x.cols() != beta.size())
    throw ShapeError("rsign: input " + shape_str(x.shape()) + " vs beta of length " + std::to_string(beta.size()));
  return pack_signs(add_row_vector(x, beta));
}

template <class T>
BitMatrix rsign(const Tensor<T>& x, const RSignParams<T>& p) {
  return rsign(x, p.beta.value.values());
}

/// Per-column mean of a D_in x D_out weight.
template <class T>
Tensor<T> column_means(const Tensor<T>& w) {
  Tensor<T> mu({w.cols()});
  accumulate_column_sums(w, mu);
  for (auto& v : mu.values()) v /= static_cast<T>(w.rows());
  return mu;
}

template <class T>
T mean_abs(const Tensor<T>& w) {
  T s{};
  for (T v : w.values()) s += std::abs(v);
  return s / static_cast<T>(w.size());
}

/// W - mu(W), mu broadcast over rows.
template <class T>
Tensor<T> center_columns(Tensor<T> w, const Tensor<T>& mu) {
  for (std::size_t r = 0; r < w.rows(); ++r) {
    auto row = w.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] -= mu[c];
  }
  return w;
}

template <class T>
BinWeight<T> binarize_weights(const Tensor<T>& w) {
  if (w.rank() != 2 || w.size() == 0) throw ShapeError("binarize_weights: expected a non-empty 2-D weight, got " + shape_str(w.shape()));
  BinWeight<T> out;
  out.mu = column_means(w);
  out.alpha = mean_abs(w);
  out.bits = pack_signs(center_columns(w, out.mu));
  out.bits_t = out.bits.transposed();
  return out;
}

/// Straight-through rule: pass the upstream gradient where |x| <= 1.
template <class T>
T ste_backward(T x, T upstream) {
  return std::abs(x) <= T{1} ? upstream : T{};
}

template <class T>
Tensor<T> ste_backward(const Tensor<T>& x, const Tensor<T>& upstream) {
  if (x.size() != upstream.size()) throw ShapeError("ste_backward: shape mismatch");
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = ste_backward(x[i], upstream[i]);
  return out;
}

template <class T>
T clip01(T v) {
  return v < T{} ? T{} : (v > T{1} ? T{1} : v);
}

/// alpha_p * round(clip(s / alpha_p, 0, 1)); std::round rounds half away from zero.
template <class T>
Tensor<T> quantize_attention_probs(const Tensor<T>& softmax_out, T alpha_p) {
  if (!(alpha_p > T{})) throw ParameterError("quantize_attention_probs: alpha_p must be > 0, got " + std::to_string(static_cast<double>(alpha_p)));
  Tensor<T> out(softmax_out.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = alpha_p * std::round(clip01(softmax_out[i] / alpha_p));
  return out;
}

template <class T>
Tensor<T> quantize_attention_probs(const Tensor<T>& softmax_out, const AttnProbScale<T>& s) {
  return quantize_attention_probs(softmax_out, s.value());
}

/// Local derivative d(alpha * round(clip(s / alpha, 0, 1))) / d alpha under the
/// straight-through rounding rule.
template <class T>
T attn_scale_local_grad(T s, T alpha_p) {
  const T v = s / alpha_p;
  const T rounded = std::round(clip01(v));
  return (v > T{} && v < T{1}) ? rounded - v : rounded;
}

/// LSQ gradient scale for an attention matrix with `elements` entries (Q_max = 1).
template <class T>
T lsq_grad_scale(std::size_t elements) {
  return T{1} / std::sqrt(static_cast<T>(elements));
}

/// dL/d alpha_p = g * sum(upstream * local_grad).
template <class T>
T attn_scale_gradient(const Tensor<T>& softmax_out, T alpha_p, const Tensor<T>& upstream, T g) {
  if (!softmax_out.same_shape(upstream)) throw ShapeError("attn_scale_gradient: shape mismatch");
  T acc{};
  for (std::size_t i = 0; i < softmax_out.size(); ++i) acc += upstream[i] * attn_scale_local_grad(softmax_out[i], alpha_p);
  return g * acc;
}

template <class T>
T attn_scale_gradient(const Tensor<T>& softmax_out, const AttnProbScale<T>& s, const Tensor<T>& upstream) {
  return attn_scale_gradient(softmax_out, s.value(), upstream, lsq_grad_scale<T>(softmax_out.size()));
}

template <class T>
T hardtanh(T x) {
  return x < T{-1} ? T{-1} : (x > T{1} ? T{1} : x);
}

/// Records the inputs of every quantization site in a forward pass and replays
/// them with the straight-through surrogate, so finite differences of the
/// replayed network reproduce the STE gradients:
///
///   sign site:  sign(x0) + (hardtanh(x) - hardtanh(x0))
///   round site: round(c0) + (c - c0)
///   detached:   the recorded statistic, independent of the current input
///
/// At the recorded point the replayed values equal the exact forward values.
/// Record mode also tracks the smallest distance of any site input to a kink
/// of the surrogate (|x| = 1 for signs, v = 1 for the clip, gamma for RPReLU).
template <class T>
class SteProbe {
 public:
  enum class Mode { record, replay };

  void start_record() {
    mode_ = Mode::record;
    sites_.clear();
    cursor_ = 0;
    min_kink_ = std::numeric_limits<T>::infinity();
  }

  void start_replay() {
    mode_ = Mode::replay;
    cursor_ = 0;
  }

  bool replaying() const noexcept { return mode_ == Mode::replay; }
  std::size_t site_count() const noexcept { return sites_.size(); }
  T min_kink_distance() const noexcept { return min_kink_; }

  void note_kink(T distance) {
    if (mode_ == Mode::record && distance < min_kink_) min_kink_ = distance;
  }

  Tensor<T> sign_site(const Tensor<T>& x) {
    if (mode_ == Mode::record) {
      Tensor<T> out(x.shape());
      for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = x[i] >= T{} ? T{1} : T{-1};
        note_kink(std::abs(std::abs(x[i]) - T{1}));
      }
      sites_.push_back({Kind::sign, x});
      return out;
    }
    const Tensor<T>& x0 = next(Kind::sign, x.shape());
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i)
      out[i] = (x0[i] >= T{} ? T{1} : T{-1}) + (hardtanh(x[i]) - hardtanh(x0[i]));
    return out;
  }

  Tensor<T> round_site(const Tensor<T>& c) {
    if (mode_ == Mode::record) {
      Tensor<T> out(c.shape());
      for (std::size_t i = 0; i < c.size(); ++i) out[i] = std::round(c[i]);
      sites_.push_back({Kind::round, c});
      return out;
    }
    const Tensor<T>& c0 = next(Kind::round, c.shape());
    Tensor<T> out(c.shape());
    for (std::size_t i = 0; i < c.size(); ++i) out[i] = std::round(c0[i]) + (c[i] - c0[i]);
    return out;
  }

  Tensor<T> detached(const Tensor<T>& stat) {
    if (mode_ == Mode::record) {
      sites_.push_back({Kind::detached, stat});
      return stat;
    }
    return next(Kind::detached, stat.shape());
  }

  T detached(T v) { return detached(Tensor<T>({1}, v))[0]; }

 private:
  enum class Kind { sign, round, detached };
  struct Site {
    Kind kind;
    Tensor<T> value;
  };

  const Tensor<T>& next(Kind kind, const Shape& shape) {
    if (cursor_ >= sites_.size()) throw InternalError("SteProbe: replay visited more sites than were recorded");
    const Site& s = sites_[cursor_++];
    if (s.kind != kind || s.value.shape() != shape)
      throw InternalError("SteProbe: replay diverged from the recorded forward at site " + std::to_string(cursor_ - 1));
    return s.value;
  }

  Mode mode_ = Mode::record;
  std::vector<Site> sites_;
  std::size_t cursor_ = 0;
  T min_kink_ = std::numeric_limits<T>::infinity();
};

}  // namespace bvit
