#pragma once

// Desk-scale training: soft cross-entropy (logit distillation or one-hot
// labels), Adam with cosine decay, a synthetic 10-class image task and a
// small full-precision teacher.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bvit/errors.hpp"
#include "bvit/layers.hpp"
#include "bvit/model.hpp"
#include "bvit/tensor.hpp"

namespace bvit {

/// log softmax(x / temperature).
inline std::vector<double> log_softmax(std::span<const double> x, double temperature = 1.0) {
  if (x.empty()) throw ShapeError("log_softmax: empty input");
  double mx = -INFINITY;
  for (double v : x) mx = std::max(mx, v / temperature);
  double z = 0;
  for (double v : x) z += std::exp(v / temperature - mx);
  const double lz = mx + std::log(z);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] / temperature - lz;
  return out;
}

/// -sum softmax(teacher / T) * log softmax(student / T).
inline double distill_loss(std::span<const double> student, std::span<const double> teacher, double temperature = 1.0) {
  if (student.size() != teacher.size())
    throw ShapeError("distill_loss: student has " + std::to_string(student.size()) + " logits, teacher " + std::to_string(teacher.size()));
  if (!(temperature > 0)) throw ParameterError("distill_loss: temperature must be > 0");
  const auto ls = log_softmax(student, temperature);
  const auto lt = log_softmax(teacher, temperature);
  double loss = 0;
  for (std::size_t i = 0; i < ls.size(); ++i) {
    const double p = std::exp(lt[i]);
    if (p > 0) loss -= p * ls[i];
  }
  return loss;
}

struct LossAndGrad {
  double loss = 0;  // batch mean
  Tensor<float> dlogits;
};

/// Mean soft cross-entropy of a batch of logits against target distributions
/// (rows of `targets`), with its gradient.
template <class T>
LossAndGrad soft_cross_entropy(const Tensor<T>& logits, const Tensor<T>& targets, double temperature = 1.0) {
  if (!logits.same_shape(targets)) throw ShapeError("soft_cross_entropy: logits " + shape_str(logits.shape()) + " vs targets " + shape_str(targets.shape()));
  if (!(temperature > 0)) throw ParameterError("soft_cross_entropy: temperature must be > 0");
  const std::size_t b = logits.rows(), k = logits.cols();
  LossAndGrad out;
  out.dlogits = Tensor<float>::matrix(b, k);
  std::vector<double> row(k);
  for (std::size_t r = 0; r < b; ++r) {
    for (std::size_t c = 0; c < k; ++c) row[c] = static_cast<double>(logits(r, c));
    const auto ls = log_softmax(row, temperature);
    for (std::size_t c = 0; c < k; ++c) {
      const double t = static_cast<double>(targets(r, c));
      if (t > 0) out.loss -= t * ls[c];
      out.dlogits(r, c) = static_cast<float>((std::exp(ls[c]) - t) / (temperature * static_cast<double>(b)));
    }
  }
  out.loss /= static_cast<double>(b);
  return out;
}

template <class T = float>
Tensor<T> one_hot(std::span<const int> labels, std::size_t classes) {
  Tensor<T> t = Tensor<T>::matrix(labels.size(), classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) throw ShapeError("one_hot: label out of range");
    t(i, static_cast<std::size_t>(labels[i])) = T{1};
  }
  return t;
}

template <class T>
Tensor<T> softmax_targets(const Tensor<T>& logits, double temperature) {
  Tensor<T> out(logits.shape());
  std::vector<double> row(logits.cols());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    for (std::size_t c = 0; c < row.size(); ++c) row[c] = static_cast<double>(logits(r, c));
    const auto ls = log_softmax(row, temperature);
    for (std::size_t c = 0; c < row.size(); ++c) out(r, c) = static_cast<T>(std::exp(ls[c]));
  }
  return out;
}

template <class T>
std::size_t count_correct(const Tensor<T>& logits, std::span<const int> labels) {
  std::size_t ok = 0;
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    const auto row = logits.row(r);
    const auto best = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    ok += best == labels[r];
  }
  return ok;
}

// ---------------------------------------------------------------------------

inline double cosine_lr(double base, std::size_t step, std::size_t total) {
  if (total == 0) return base;
  return 0.5 * base * (1.0 + std::cos(M_PI * static_cast<double>(step) / static_cast<double>(total)));
}

/// Adam without weight decay. Moments are matched to parameters by position,
/// so the parameter list must be enumerated in the same order every step.
template <class T>
class Adam {
 public:
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  void step(const std::vector<Param<T>*>& params, double lr) {
    if (m_.empty()) {
      for (auto* p : params) {
        m_.emplace_back(p->value.size(), 0.0);
        v_.emplace_back(p->value.size(), 0.0);
      }
    }
    if (m_.size() != params.size()) throw InternalError("adam: parameter list changed between steps");
    ++t_;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Param<T>& p = *params[i];
      if (m_[i].size() != p.value.size()) throw InternalError("adam: parameter shape changed between steps");
      for (std::size_t j = 0; j < p.value.size(); ++j) {
        const double g = static_cast<double>(p.grad[j]);
        m_[i][j] = beta1 * m_[i][j] + (1 - beta1) * g;
        v_[i][j] = beta2 * v_[i][j] + (1 - beta2) * g * g;
        const double update = lr * (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + eps);
        p.value[j] = static_cast<T>(static_cast<double>(p.value[j]) - update);
      }
    }
  }

  std::size_t steps() const noexcept { return t_; }

 private:
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

template <class T>
std::vector<Param<T>*> collect_params(Model<T>& m) {
  std::vector<Param<T>*> out;
  m.for_each_param([&](const std::string&, Param<T>& p) { out.push_back(&p); });
  return out;
}

/// Keeps the attention-probability scales strictly positive after an update.
template <class T>
void clamp_attention_scales(Model<T>& m, T floor = T(1e-4)) {
  m.for_each_param([&](const std::string& name, Param<T>& p) {
    if (name.ends_with(".alpha_p") && p.value[0] < floor) p.value[0] = floor;
  });
}

// ---------------------------------------------------------------------------
// Synthetic task: 10 classes = 5 colours x 2 stripe orientations, 32 x 32 RGB,
// random stripe phase, brightness jitter and pixel noise.

struct SyntheticDataset {
  std::size_t img_size = 32;
  std::size_t channels = 3;
  std::size_t classes = 10;
  std::vector<std::uint8_t> pixels;  // n x H x W x C
  std::vector<int> labels;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t image_bytes() const noexcept { return img_size * img_size * channels; }
  std::span<const std::uint8_t> image(std::size_t i) const { return {pixels.data() + i * image_bytes(), image_bytes()}; }
};

inline SyntheticDataset make_synthetic_dataset(std::size_t n, std::uint64_t seed, std::size_t img_size = 32) {
  static constexpr double kColours[5][3] = {{220, 40, 40}, {40, 200, 60}, {50, 70, 230}, {230, 210, 40}, {200, 60, 210}};
  constexpr std::size_t kPeriod = 4;
  SyntheticDataset ds;
  ds.img_size = img_size;
  ds.pixels.resize(n * ds.image_bytes());
  ds.labels.resize(n);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> label_dist(0, 9);
  std::uniform_int_distribution<std::size_t> phase_dist(0, kPeriod - 1);
  std::uniform_real_distribution<double> jitter(0.8, 1.2);
  std::normal_distribution<double> noise(0.0, 60.0);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = label_dist(rng);
    ds.labels[i] = label;
    const auto& colour = kColours[label / 2];
    const bool horizontal = label % 2 == 0;
    const std::size_t phase = phase_dist(rng);
    const double gain = jitter(rng);
    const double background = 90.0 * jitter(rng);
    std::uint8_t* img = ds.pixels.data() + i * ds.image_bytes();
    for (std::size_t y = 0; y < img_size; ++y)
      for (std::size_t x = 0; x < img_size; ++x) {
        const std::size_t coord = horizontal ? y : x;
        const bool on = (coord + phase) % kPeriod < kPeriod / 2;
        for (std::size_t c = 0; c < 3; ++c) {
          const double base = on ? colour[c] * gain : background;
          img[(y * img_size + x) * 3 + c] = static_cast<std::uint8_t>(std::clamp(base + noise(rng), 0.0, 255.0));
        }
      }
  }
  return ds;
}

template <class T = float>
Tensor<T> batch_images(const SyntheticDataset& ds, std::span<const std::size_t> idx, const ModelConfig& cfg) {
  if (ds.img_size != cfg.img_size || ds.channels != cfg.in_channels) throw ShapeError("dataset images do not match the model input");
  std::vector<std::uint8_t> raw;
  raw.reserve(idx.size() * ds.image_bytes());
  for (std::size_t i : idx) {
    const auto img = ds.image(i);
    raw.insert(raw.end(), img.begin(), img.end());
  }
  return normalize_pixels<T>(raw, idx.size(), cfg);
}

// ---------------------------------------------------------------------------
// Full-precision teacher: flatten -> Linear -> ReLU -> Linear.

struct Teacher {
  Linear<float> fc1, fc2;
  ModelConfig input;

  Tensor<float> forward(const Tensor<float>& images, std::pair<Linear<float>::Cache, Linear<float>::Cache>* cache,
                        Tensor<float>* hidden_pre = nullptr) const {
    const std::size_t b = images.shape()[0];
    const Tensor<float> x = images.reshaped({b, images.size() / b});
    Tensor<float> h = fc1.forward(x, Ctx<float>{}, cache ? &cache->first : nullptr);
    if (hidden_pre) *hidden_pre = h;
    for (auto& v : h.values()) v = std::max(v, 0.0f);
    return fc2.forward(h, Ctx<float>{}, cache ? &cache->second : nullptr);
  }
};

inline Teacher train_teacher(const SyntheticDataset& ds, const ModelConfig& cfg, std::size_t steps, std::uint64_t seed,
                             std::size_t hidden = 64, std::size_t batch = 32, double lr = 1e-3) {
  Teacher t;
  t.input = cfg;
  const std::size_t in = cfg.img_size * cfg.img_size * cfg.in_channels;
  detail::Init init(seed);
  t.fc1 = Linear<float>(in, hidden);
  t.fc2 = Linear<float>(hidden, cfg.num_classes);
  t.fc1.weight = Param<float>(init.trunc_normal<float>({in, hidden}, 0.02));
  t.fc2.weight = Param<float>(init.trunc_normal<float>({hidden, cfg.num_classes}, 0.02));
  std::vector<Param<float>*> params{&t.fc1.weight, &t.fc1.bias, &t.fc2.weight, &t.fc2.bias};
  Adam<float> opt;
  std::mt19937_64 rng(seed ^ 0x7eac4e5ULL);
  std::uniform_int_distribution<std::size_t> pick(0, ds.size() - 1);
  std::vector<std::size_t> idx(batch);
  std::vector<int> labels(batch);
  for (std::size_t s = 0; s < steps; ++s) {
    for (std::size_t i = 0; i < batch; ++i) {
      idx[i] = pick(rng);
      labels[i] = ds.labels[idx[i]];
    }
    const Tensor<float> x = batch_images<float>(ds, idx, cfg);
    std::pair<Linear<float>::Cache, Linear<float>::Cache> cache;
    Tensor<float> pre;
    const Tensor<float> logits = t.forward(x, &cache, &pre);
    const LossAndGrad lg = soft_cross_entropy(logits, one_hot<float>(labels, cfg.num_classes));
    for (auto* p : params) p->zero_grad();
    Tensor<float> dh = t.fc2.backward(lg.dlogits, cache.second);
    for (std::size_t i = 0; i < dh.size(); ++i)
      if (!(pre[i] > 0)) dh[i] = 0;
    t.fc1.backward(dh, cache.first);
    opt.step(params, cosine_lr(lr, s, steps));
  }
  return t;
}

// ---------------------------------------------------------------------------

struct TrainRecord {
  std::size_t step = 0;
  double loss = 0;
  double accuracy = 0;  // on the step's batch, train-mode forward
  double lr = 0;
};

struct TrainOptions {
  std::size_t steps = 2000;
  std::size_t batch = 32;
  double lr = 2e-3;
  std::uint64_t seed = 0;
  std::size_t dataset_size = 2000;
  bool shuffle = true;
  bool distill = false;
  double temperature = 1.0;
  std::size_t teacher_steps = 1000;
};

struct TrainResult {
  std::vector<TrainRecord> trace;
  double final_accuracy = 0;  // infer-mode accuracy over the whole training set
  std::optional<std::size_t> diverged_at;
  Model<float> model;
};

inline nlohmann::json to_json(const TrainRecord& r) {
  return {{"step", r.step}, {"loss", r.loss}, {"accuracy", r.accuracy}, {"lr", r.lr}};
}

inline void write_trace(std::ostream& os, const std::vector<TrainRecord>& trace) {
  for (const auto& r : trace) os << to_json(r).dump() << "\n";
}

/// Moving average of the loss over the preceding `window` steps (fewer at the start).
inline std::vector<double> smoothed_loss(const std::vector<TrainRecord>& trace, std::size_t window) {
  std::vector<double> out(trace.size());
  double acc = 0;
  for (std::size_t i = 0; i < trace.size(); ++i) {
    acc += trace[i].loss;
    if (i >= window) acc -= trace[i - window].loss;
    out[i] = acc / static_cast<double>(std::min(i + 1, window));
  }
  return out;
}

template <class T>
double evaluate_accuracy(const Model<T>& model, const SyntheticDataset& ds, std::size_t chunk = 100) {
  std::size_t ok = 0;
  for (std::size_t start = 0; start < ds.size(); start += chunk) {
    const std::size_t n = std::min(chunk, ds.size() - start);
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), start);
    const Tensor<T> logits = model.forward(batch_images<T>(ds, idx, model.config()), Ctx<T>{Mode::infer});
    ok += count_correct(logits, std::span<const int>(ds.labels).subspan(start, n));
  }
  return ds.size() ? static_cast<double>(ok) / static_cast<double>(ds.size()) : 0.0;
}

/// Trains a model built from `cfg` on the synthetic task. `on_step` (optional)
/// sees every record as it is produced.
template <class OnStep = std::nullptr_t>
TrainResult train_toy(const ModelConfig& cfg, const TrainOptions& opt, OnStep on_step = nullptr) {
  if (cfg.num_classes != 10) throw ConfigError("train_toy: the synthetic task has 10 classes, config has " + std::to_string(cfg.num_classes));
  if (opt.batch == 0 || opt.dataset_size == 0) throw ConfigError("train_toy: batch and dataset_size must be positive");
  const SyntheticDataset ds = make_synthetic_dataset(opt.dataset_size, opt.seed, cfg.img_size);
  TrainResult res;
  res.model = build_model<float>(cfg, opt.seed + 1);
  Model<float>& model = res.model;
  std::optional<Teacher> teacher;
  if (opt.distill) teacher = train_teacher(ds, cfg, opt.teacher_steps, opt.seed + 2);

  Adam<float> adam;
  std::mt19937_64 rng(opt.seed + 3);
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = ds.size();
  const Ctx<float> ctx{Mode::train};
  for (std::size_t step = 0; step < opt.steps; ++step) {
    std::vector<std::size_t> idx(opt.batch);
    for (auto& i : idx) {
      if (cursor == ds.size()) {
        if (opt.shuffle) std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      i = order[cursor++];
    }
    std::vector<int> labels(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) labels[i] = ds.labels[idx[i]];
    const Tensor<float> x = batch_images<float>(ds, idx, cfg);

    Model<float>::Cache cache;
    const Tensor<float> logits = model.forward(x, ctx, &cache);
    const Tensor<float> targets =
        teacher ? softmax_targets(teacher->forward(x, nullptr), opt.temperature) : one_hot<float>(labels, cfg.num_classes);
    const LossAndGrad lg = soft_cross_entropy(logits, targets, teacher ? opt.temperature : 1.0);
    const double lr = cosine_lr(opt.lr, step, opt.steps);
    TrainRecord rec{step, lg.loss, static_cast<double>(count_correct(logits, labels)) / static_cast<double>(labels.size()), lr};
    if (!std::isfinite(lg.loss)) {
      res.diverged_at = step;
      res.trace.push_back(rec);
      break;
    }
    model.zero_grad();
    model.backward(lg.dlogits, cache, ctx);
    adam.step(collect_params(model), lr);
    clamp_attention_scales(model);
    res.trace.push_back(rec);
    if constexpr (!std::is_same_v<OnStep, std::nullptr_t>) on_step(rec);
  }
  res.final_accuracy = evaluate_accuracy(model, ds);
  return res;
}

}  // namespace bvit
