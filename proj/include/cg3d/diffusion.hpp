// Copyright 2026 The cg3d Authors
// SPDX-License-Identifier: Apache-2.0

// Variance-exploding diffusion: x_t = x_0 + sigma(t) * eps with a geometric
// sigma schedule, an epsilon-predicting residual MLP, denoising score matching,
// ancestral sampling and the score-distillation gradient.
//
// The score is recovered from the noise prediction as s = -eps_hat / sigma, so
// lambda(t) * |s + eps / sigma|^2 == lambda(t) / sigma^2 * |eps_hat - eps|^2.

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cg3d/checkpoint.hpp"
#include "cg3d/render.hpp"
#include "cg3d/rng.hpp"
#include "cg3d/shapes.hpp"
#include "cg3d/tensor.hpp"

namespace cg3d {

struct DiffusionSchedule {
  std::size_t steps = 0;
  double sigma_min = 0.01;
  double sigma_max = 2.0;
  std::vector<double> sigmas;       // sigma(t) at index t - 1
  std::vector<double> dsm_weights;  // lambda(t) = sigma(t)^2
  std::vector<double> sds_weights;  // w(t) = 1

  static DiffusionSchedule geometric(std::size_t steps, double sigma_min = 0.01, double sigma_max = 2.0) {
    if (steps < 2) throw std::invalid_argument("schedule needs at least 2 steps");
    if (!(sigma_min > 0.0) || !(sigma_max > sigma_min)) {
      throw std::invalid_argument("schedule needs 0 < sigma_min < sigma_max");
    }
    DiffusionSchedule s;
    s.steps = steps;
    s.sigma_min = sigma_min;
    s.sigma_max = sigma_max;
    const double log_ratio = std::log(sigma_max / sigma_min);
    for (std::size_t i = 0; i < steps; ++i) {
      double sigma = sigma_min * std::exp(log_ratio * static_cast<double>(i) / static_cast<double>(steps - 1));
      if (i == 0) sigma = sigma_min;
      if (i + 1 == steps) sigma = sigma_max;
      s.sigmas.push_back(sigma);
      s.dsm_weights.push_back(sigma * sigma);
      s.sds_weights.push_back(1.0);
    }
    return s;
  }

  void check_step(std::size_t t) const {
    if (t < 1 || t > steps) {
      throw std::out_of_range("diffusion step " + std::to_string(t) + " outside [1, " +
                              std::to_string(steps) + "]");
    }
  }
  double sigma(std::size_t t) const { return check_step(t), sigmas[t - 1]; }
  double dsm_weight(std::size_t t) const { return check_step(t), dsm_weights[t - 1]; }
  double sds_weight(std::size_t t) const { return check_step(t), sds_weights[t - 1]; }
};

// nullopt means unconditional.
using ConditionLabel = std::optional<std::size_t>;

// Predicts eps for a batch x_t [B, D] at per-row noise levels.
using NoisePredictor = std::function<Tensor(const Tensor& x_t, std::span<const double> sigmas,
                                            std::span<const ConditionLabel> labels)>;

inline Tensor forward_noise(const Tensor& x0, std::size_t t, const Tensor& eps, const DiffusionSchedule& sched) {
  if (eps.shape() != x0.shape()) {
    throw ShapeError("eps shape " + to_string(eps.shape()) + " does not match x0 " + to_string(x0.shape()));
  }
  return add(x0, scale(eps, sched.sigma(t)));
}

// Samples live in [0, 1]; the network sees them centered here.
inline constexpr double kDataCenter = 0.5;
inline constexpr double kLogVarGain = 10.0;

struct DenoiserConfig {
  std::size_t sample_dim = 192;
  std::size_t hidden = 256;
  std::size_t vocab = kTrainingVocabulary;
  std::size_t embed_dim = 16;
  double sigma_data = 0.5;
};

// Two hidden layers with a residual connection:
//   h1 = relu(in W_in + b_in); h2 = h1 + relu(h1 W_hidden + b_hidden);
//   net = h2 W_out + b_out
// where in = [(x - 0.5) / sqrt(sigma^2 + sigma_data^2), sinusoidal(log sigma), one_hot(label)].
// net is added to the eps of a learned per-dimension Gaussian.
struct Denoiser {
  DenoiserConfig config;
  Tensor w_in, b_in, w_hidden, b_hidden, w_out, b_out;
  Tensor mean, log_var;  // per-dimension Gaussian skip, [D]

  std::size_t input_dim() const { return config.sample_dim + config.embed_dim + config.vocab; }

  static Denoiser init(const DenoiserConfig& cfg, Rng& rng) {
    if (cfg.sample_dim == 0 || cfg.hidden == 0 || cfg.embed_dim % 2 != 0) {
      throw std::invalid_argument("invalid denoiser config");
    }
    Denoiser d;
    d.config = cfg;
    const std::size_t in = d.input_dim(), h = cfg.hidden, out = cfg.sample_dim;
    auto gaussian = [&rng](Shape shape, double stddev) {
      std::vector<double> v = standard_normal(rng, num_elements(shape));
      for (double& x : v) x *= stddev;
      return Tensor(std::move(shape), std::move(v));
    };
    d.w_in = gaussian({in, h}, std::sqrt(2.0 / static_cast<double>(in)));
    d.b_in = Tensor::zeros({h});
    d.w_hidden = gaussian({h, h}, std::sqrt(1.0 / static_cast<double>(h)));
    d.b_hidden = Tensor::zeros({h});
    d.w_out = gaussian({h, out}, 0.1 / std::sqrt(static_cast<double>(h)));
    d.b_out = Tensor::zeros({out});
    d.mean = Tensor::full({out}, kDataCenter);
    d.log_var = Tensor::full({out}, std::log(cfg.sigma_data * cfg.sigma_data) / kLogVarGain);
    return d;
  }

  std::vector<Tensor*> parameters() { return {&w_in, &b_in, &w_hidden, &b_hidden, &w_out, &b_out, &mean, &log_var}; }
  std::vector<const Tensor*> parameters() const {
    return {&w_in, &b_in, &w_hidden, &b_hidden, &w_out, &b_out, &mean, &log_var};
  }

  Denoiser attach(Tape& tape) const {
    Denoiser d = *this;
    for (Tensor* p : d.parameters()) *p = tape.leaf(*p);
    return d;
  }

  Tensor features(const Tensor& x_t, std::span<const double> sigmas, std::span<const ConditionLabel> labels) const {
    const std::size_t dim = config.sample_dim;
    if (x_t.rank() != 2 || x_t.shape()[1] != dim) {
      throw ShapeError("denoiser expects [B, " + std::to_string(dim) + "], got " + to_string(x_t.shape()));
    }
    const std::size_t batch = x_t.shape()[0];
    if (sigmas.size() != batch || labels.size() != batch) throw ShapeError("per-row sigma/label count mismatch");
    const std::size_t width = input_dim();
    std::vector<double> in(batch * width, 0.0);
    for (std::size_t b = 0; b < batch; ++b) {
      double* row = &in[b * width];
      const double c_in = 1.0 / std::sqrt(sigmas[b] * sigmas[b] + config.sigma_data * config.sigma_data);
      for (std::size_t i = 0; i < dim; ++i) row[i] = c_in * (x_t[b * dim + i] - kDataCenter);
      const double ls = std::log(sigmas[b]);
      for (std::size_t k = 0; k < config.embed_dim / 2; ++k) {
        const double freq = std::ldexp(1.0, static_cast<int>(k) - 2);
        row[dim + 2 * k] = std::sin(ls * freq);
        row[dim + 2 * k + 1] = std::cos(ls * freq);
      }
      if (labels[b]) {
        if (*labels[b] >= config.vocab) {
          throw std::out_of_range("condition label " + std::to_string(*labels[b]) + " outside vocabulary");
        }
        row[dim + config.embed_dim + *labels[b]] = 1.0;
      }
    }
    return Tensor({batch, width}, std::move(in));
  }

  Tensor operator()(const Tensor& x_t, std::span<const double> sigmas, std::span<const ConditionLabel> labels) const {
    Tensor in = features(x_t.detach(), sigmas, labels);
    Tensor h1 = relu(add_bias(matmul(in, w_in), b_in));
    Tensor h2 = add(h1, relu(add_bias(matmul(h1, w_hidden), b_hidden)));
    Tensor net = add_bias(matmul(h2, w_out), b_out);
    // eps_hat = sigma (x_t - mean) / (sigma^2 + var) + c_out * net
    const std::size_t batch = x_t.shape()[0], dim = config.sample_dim;
    std::vector<double> s(batch * dim), s2(batch * dim), gain(batch * dim);
    const double sd2 = config.sigma_data * config.sigma_data;
    for (std::size_t b = 0; b < batch; ++b) {
      const double c_out = config.sigma_data / std::sqrt(sigmas[b] * sigmas[b] + sd2);
      for (std::size_t i = 0; i < dim; ++i) {
        s[b * dim + i] = sigmas[b];
        s2[b * dim + i] = sigmas[b] * sigmas[b];
        gain[b * dim + i] = c_out;
      }
    }
    const Shape shape = x_t.shape();
    Tensor centered = add_bias(x_t.detach(), neg(mean));
    Tensor denom = add_bias(Tensor(shape, std::move(s2)), exp(scale(log_var, kLogVarGain)));
    Tensor skip = div(mul(Tensor(shape, std::move(s)), centered), denom);
    return add(skip, mul(Tensor(shape, std::move(gain)), net));
  }

  NoisePredictor predictor() const {
    return [self = *this](const Tensor& x, std::span<const double> s, std::span<const ConditionLabel> l) {
      return self(x, s, l);
    };
  }

  std::vector<NamedTensor> records() const {
    return {{"config", Tensor({5}, {static_cast<double>(config.sample_dim), static_cast<double>(config.hidden),
                                    static_cast<double>(config.vocab), static_cast<double>(config.embed_dim),
                                    config.sigma_data})},
            {"w_in", w_in.detach()},
            {"b_in", b_in.detach()},
            {"w_hidden", w_hidden.detach()},
            {"b_hidden", b_hidden.detach()},
            {"w_out", w_out.detach()},
            {"b_out", b_out.detach()},
            {"mean", mean.detach()},
            {"log_var", log_var.detach()}};
  }

  static Denoiser from_records(const std::vector<NamedTensor>& records) {
    const Tensor& c = find_record(records, "config");
    if (c.size() != 5) throw FormatError("denoiser config record must have 5 entries");
    Denoiser d;
    d.config = {static_cast<std::size_t>(c[0]), static_cast<std::size_t>(c[1]), static_cast<std::size_t>(c[2]),
                static_cast<std::size_t>(c[3]), c[4]};
    d.w_in = find_record(records, "w_in");
    d.b_in = find_record(records, "b_in");
    d.w_hidden = find_record(records, "w_hidden");
    d.b_hidden = find_record(records, "b_hidden");
    d.w_out = find_record(records, "w_out");
    d.b_out = find_record(records, "b_out");
    d.mean = find_record(records, "mean");
    d.log_var = find_record(records, "log_var");
    const std::size_t in = d.input_dim(), h = d.config.hidden, out = d.config.sample_dim;
    if (d.w_in.shape() != Shape{in, h} || d.b_in.shape() != Shape{h} || d.w_hidden.shape() != Shape{h, h} ||
        d.b_hidden.shape() != Shape{h} || d.w_out.shape() != Shape{h, out} || d.b_out.shape() != Shape{out} ||
        d.mean.shape() != Shape{out} || d.log_var.shape() != Shape{out}) {
      throw FormatError("denoiser parameter shapes do not match config");
    }
    return d;
  }
};

struct Sample {
  std::vector<double> x;
  ConditionLabel label;
};

// Mean over the batch of lambda(t)/sigma(t)^2 * |eps_hat - eps|^2 with t drawn
// uniformly from the schedule and eps standard normal.
inline Tensor dsm_loss(const NoisePredictor& predict, std::span<const Sample> batch,
                       const DiffusionSchedule& sched, Rng& rng) {
  if (batch.empty()) throw std::invalid_argument("dsm_loss needs a non-empty batch");
  const std::size_t dim = batch[0].x.size();
  std::uniform_int_distribution<std::size_t> pick_t(1, sched.steps);
  std::vector<double> xt(batch.size() * dim), eps_all(batch.size() * dim), weights(batch.size() * dim);
  std::vector<double> sigmas(batch.size());
  std::vector<ConditionLabel> labels(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    if (batch[b].x.size() != dim) throw ShapeError("ragged batch");
    const std::size_t t = pick_t(rng);
    const double sigma = sched.sigma(t);
    const double w = sched.dsm_weight(t) / (sigma * sigma) / static_cast<double>(batch.size());
    std::vector<double> eps = standard_normal(rng, dim);
    for (std::size_t i = 0; i < dim; ++i) {
      xt[b * dim + i] = batch[b].x[i] + sigma * eps[i];
      eps_all[b * dim + i] = eps[i];
      weights[b * dim + i] = w;
    }
    sigmas[b] = sigma;
    labels[b] = batch[b].label;
  }
  const Shape shape{batch.size(), dim};
  Tensor eps_hat = predict(Tensor(shape, std::move(xt)), sigmas, labels);
  Tensor residual = sub(eps_hat, Tensor(shape, std::move(eps_all)));
  return dot(Tensor(shape, std::move(weights)), square(residual));
}

struct TrainConfig {
  std::size_t steps = 2000;
  std::size_t batch_size = 16;
  double learning_rate = 1e-3;
  double momentum = 0.9;
  double label_dropout = 0.1;  // fraction of rows trained unconditionally
  std::uint64_t seed = 0;
};

// SGD step size for a prior on `sample_dim`-sized samples: 1e-3 at the 2D
// prior's 192 dims, scaled inversely with the dimension because the loss sums
// over it.
inline double default_learning_rate(std::size_t sample_dim) {
  return 1e-3 * 192.0 / static_cast<double>(sample_dim);
}

struct TrainResult {
  Denoiser model;
  std::vector<double> losses;  // one per step
};

// SGD with momentum on the DSM loss; fully determined by `cfg.seed`.
inline TrainResult train_prior(Denoiser model, std::span<const Sample> dataset, const DiffusionSchedule& sched,
                               const TrainConfig& cfg, const std::function<void(std::size_t, double)>& on_step = {}) {
  if (dataset.empty()) throw std::invalid_argument("training dataset is empty");
  Rng rng = named_stream(cfg.seed, "train");
  std::uniform_int_distribution<std::size_t> pick(0, dataset.size() - 1);
  std::bernoulli_distribution drop(cfg.label_dropout);
  std::vector<std::vector<double>> velocity;
  for (const Tensor* p : std::as_const(model).parameters()) velocity.emplace_back(p->size(), 0.0);
  TrainResult result;
  std::vector<Sample> batch(cfg.batch_size);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    for (Sample& s : batch) {
      s = dataset[pick(rng)];
      if (drop(rng)) s.label = std::nullopt;
    }
    Tape tape;
    Denoiser live = model.attach(tape);
    Tensor loss;
    try {
      loss = dsm_loss(live.predictor(), batch, sched, rng);
    } catch (const NumericError& e) {
      throw NumericError("training diverged at step " + std::to_string(step) + ": " + e.what());
    }
    const Gradients grads = tape.backward(loss);
    auto params = model.parameters();
    auto live_params = std::as_const(live).parameters();
    for (std::size_t k = 0; k < params.size(); ++k) {
      const Tensor g = grads.of(*live_params[k]);
      std::vector<double> value = params[k]->values();
      std::vector<double>& v = velocity[k];
      for (std::size_t i = 0; i < value.size(); ++i) {
        v[i] = cfg.momentum * v[i] + g[i];
        value[i] -= cfg.learning_rate * v[i];
      }
      *params[k] = Tensor(params[k]->shape(), std::move(value));
    }
    result.losses.push_back(loss.item());
    if (on_step) on_step(step, loss.item());
  }
  result.model = std::move(model);
  return result;
}

// Single-sample noise prediction without recording.
inline std::vector<double> predict_eps(const NoisePredictor& predict, std::span<const double> z, double sigma,
                                       ConditionLabel label) {
  const double s[1] = {sigma};
  const ConditionLabel l[1] = {label};
  Tensor out = predict(Tensor({1, z.size()}, {z.begin(), z.end()}), s, l);
  if (out.size() != z.size()) throw ShapeError("noise predictor changed the sample size");
  return out.values();
}

// x0_hat = z_t - sigma_t * eps_hat(z_t).
inline std::vector<double> predict_x0(const NoisePredictor& predict, std::span<const double> z, std::size_t t,
                                      ConditionLabel label, const DiffusionSchedule& sched) {
  const double sigma = sched.sigma(t);
  std::vector<double> eps = predict_eps(predict, z, sigma, label);
  std::vector<double> x0(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) x0[i] = z[i] - sigma * eps[i];
  return x0;
}

// z_{t-1} = x0 + r (z_t - x0) + sigma_{t-1} sqrt(1 - r) eta, r = sigma_{t-1}^2 / sigma_t^2,
// written as z_t - (1 - r)(z_t - x0) + ... so r = 1 reproduces z_t exactly.
// At t = 1 the chain ends and x0 is returned.
inline std::vector<double> ancestral_update(std::span<const double> z, std::span<const double> x0, std::size_t t,
                                            const DiffusionSchedule& sched, std::span<const double> eta) {
  sched.check_step(t);
  if (t == 1) return {x0.begin(), x0.end()};
  const double s_t = sched.sigma(t), s_prev = sched.sigma(t - 1);
  const double ratio = (s_prev * s_prev) / (s_t * s_t);
  const double noise = s_prev * std::sqrt(std::max(0.0, 1.0 - ratio));
  std::vector<double> out(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = z[i] - (1.0 - ratio) * (z[i] - x0[i]) + noise * eta[i];
  return out;
}

inline std::vector<double> ancestral_step(const NoisePredictor& predict, std::span<const double> z, std::size_t t,
                                          ConditionLabel label, const DiffusionSchedule& sched, Rng& rng) {
  sched.check_step(t);
  std::vector<double> x0 = predict_x0(predict, z, t, label, sched);
  std::vector<double> eta = t > 1 ? standard_normal(rng, z.size()) : std::vector<double>{};
  return ancestral_update(z, x0, t, sched, eta);
}

// Unguided T-step chain from z_T ~ sigma_max * N(0, I).
inline std::vector<double> sample_chain(const NoisePredictor& predict, std::size_t dim, ConditionLabel label,
                                        const DiffusionSchedule& sched, Rng& rng) {
  std::vector<double> z = standard_normal(rng, dim);
  for (double& v : z) v *= sched.sigma_max;
  for (std::size_t t = sched.steps; t >= 1; --t) z = ancestral_step(predict, z, t, label, sched, rng);
  return z;
}

// Side length reduction between rendered views and the 2D prior's samples.
inline constexpr std::size_t kPriorPool = 8;

inline std::vector<double> to_prior_sample(const Tensor& image, std::size_t pool = kPriorPool) {
  return avg_pool2d(image.detach(), pool).values();
}

struct GridGradient {
  Tensor raw_density;
  Tensor raw_albedo;
};

// Score-distillation gradient w(t) * (eps_hat - eps)^T d(pooled render)/d(theta);
// eps_hat is treated as a constant.
inline GridGradient sds_gradient(const NoisePredictor& predict, const DensityGrid& grid, const Camera& cam,
                                 ConditionLabel label, std::size_t t, std::span<const double> eps,
                                 const DiffusionSchedule& sched, std::size_t pool = kPriorPool) {
  Tape tape;
  const DensityGrid live = grid.attach(tape);
  const Tensor pooled = avg_pool2d(render_view(live, cam).rgb, pool);
  if (eps.size() != pooled.size()) {
    throw ShapeError("eps has " + std::to_string(eps.size()) + " entries, pooled render has " +
                     std::to_string(pooled.size()));
  }
  const double sigma = sched.sigma(t);
  std::vector<double> xt(pooled.size());
  for (std::size_t i = 0; i < xt.size(); ++i) xt[i] = pooled[i] + sigma * eps[i];
  const std::vector<double> eps_hat = predict_eps(predict, xt, sigma, label);
  const double w = sched.sds_weight(t);
  std::vector<double> seed(xt.size());
  for (std::size_t i = 0; i < seed.size(); ++i) seed[i] = w * (eps_hat[i] - eps[i]);
  const Gradients g = tape.backward(pooled, seed);
  return {g.of(live.raw_density), g.of(live.raw_albedo)};
}

}  // namespace cg3d
