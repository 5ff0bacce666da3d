// Copyright 2026 The cg3d Authors
// SPDX-License-Identifier: Apache-2.0

// Critic-guided generation: score distillation with an annealed reward term,
// and reward-guided ancestral sampling of the native-3D prior.

#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cg3d/critic.hpp"
#include "cg3d/diffusion.hpp"
#include "cg3d/render.hpp"
#include "cg3d/rng.hpp"
#include "cg3d/shapes.hpp"
#include "cg3d/tensor.hpp"

namespace cg3d {

enum class AnnealShape { exponential, linear };

struct GuidanceConfig {
  double lambda_vlm_init = 10.0;
  double lambda_vlm_final = 0.1;
  AnnealShape anneal_shape = AnnealShape::exponential;
  std::size_t total_steps = 500;
  double lambda_ttg = 0.5;
  std::size_t views_per_reward = 4;
  std::size_t reward_every = 5;
  double learning_rate = 0.1;  // Adam step on raw grid parameters
  double elevation = default_elevation();
  bool single_view = false;  // the critic sees the front view repeated

  void validate() const {
    if (!(lambda_vlm_init >= 0.0) || !(lambda_vlm_final >= 0.0)) {
      throw std::invalid_argument("lambda_vlm must be >= 0");
    }
    if (lambda_vlm_init < lambda_vlm_final) {
      throw std::invalid_argument("lambda_vlm_init must be >= lambda_vlm_final");
    }
    if (total_steps < 1) throw std::invalid_argument("total_steps must be >= 1");
    if (!(lambda_ttg >= 0.0)) throw std::invalid_argument("lambda_ttg must be >= 0");
    if (views_per_reward < 1) throw std::invalid_argument("views_per_reward must be >= 1");
    if (reward_every < 1) throw std::invalid_argument("reward_every must be >= 1");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be > 0");
  }
};

// Cameras the critic sees during guidance.
inline std::vector<Camera> reward_cameras(const GuidanceConfig& cfg) {
  if (!cfg.single_view) return make_view_ring(cfg.views_per_reward, cfg.elevation);
  const std::size_t n = std::max<std::size_t>(2, cfg.views_per_reward);
  return std::vector<Camera>(n, make_view_ring(1, cfg.elevation)[0]);
}

inline double anneal_lambda(const GuidanceConfig& cfg, std::size_t step) {
  if (step >= cfg.total_steps) {
    throw std::out_of_range("anneal step " + std::to_string(step) + " outside [0, " +
                            std::to_string(cfg.total_steps) + ")");
  }
  const double a = cfg.lambda_vlm_init, b = cfg.lambda_vlm_final;
  if (cfg.total_steps == 1 || step == 0) return a;
  if (step + 1 == cfg.total_steps) return b;
  const double f = static_cast<double>(step) / static_cast<double>(cfg.total_steps - 1);
  if (cfg.anneal_shape == AnnealShape::exponential && b > 0.0) return a * std::pow(b / a, f);
  return a + (b - a) * f;
}

struct StepRecord {
  std::size_t step = 0;
  double sds_norm = 0.0;  // |grad L_SDS| over raw parameters
  double reward = std::numeric_limits<double>::quiet_NaN();
  bool reward_evaluated = false;
  double lambda = 0.0;
  Decision decision = Decision::no;
  bool guidance_skipped = false;
};

struct RunRecord {
  std::uint64_t seed = 0;
  std::vector<StepRecord> steps;
};

// Adam on a flat parameter vector.
struct Adam {
  double lr = 0.05, beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8;
  std::vector<double> m, v;
  std::size_t t = 0;

  void step(std::vector<double>& params, std::span<const double> grad) {
    if (m.empty()) m.assign(params.size(), 0.0), v.assign(params.size(), 0.0);
    ++t;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
      v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
      params[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + epsilon);
    }
  }
};

// Raw parameters flattened as [density..., albedo...].
inline std::vector<double> flatten(const DensityGrid& g) {
  std::vector<double> out = g.raw_density.values();
  const std::vector<double> a = g.raw_albedo.values();
  out.insert(out.end(), a.begin(), a.end());
  return out;
}

inline DensityGrid unflatten(std::size_t r, std::span<const double> flat) {
  const std::size_t n = r * r * r;
  if (flat.size() != 4 * n) throw ShapeError("flat grid has the wrong size");
  return {r, Tensor({r, r, r}, {flat.begin(), flat.begin() + n}), Tensor({r, r, r, 3}, {flat.begin() + n, flat.end()})};
}

inline std::vector<double> flatten(const GridGradient& g) {
  std::vector<double> out = g.raw_density.values();
  const std::vector<double> a = g.raw_albedo.values();
  out.insert(out.end(), a.begin(), a.end());
  return out;
}

// Faint gray haze with small random perturbations.
inline DensityGrid random_init_grid(std::size_t r, Rng& rng) {
  std::vector<double> d = standard_normal(rng, r * r * r);
  for (double& x : d) x = -3.0 + 0.5 * x;
  std::vector<double> a = standard_normal(rng, r * r * r * 3);
  for (double& x : a) x *= 0.1;
  return {r, Tensor({r, r, r}, std::move(d)), Tensor({r, r, r, 3}, std::move(a))};
}

struct RewardEval {
  CriticVerdict verdict;
  std::vector<double> grad;  // d reward / d flat raw params, empty unless requested
};

// Renders the ring, scores it and optionally differentiates the reward.
inline RewardEval evaluate_reward(const DensityGrid& grid, const CriticQuery& query,
                                  std::span<const Camera> cams, bool with_grad, const CriticConfig& critic = {}) {
  if (!with_grad) {
    const ViewSet views = render_views(grid, cams);
    return {toy_critic_eval(query, views, grid, critic), {}};
  }
  Tape tape;
  const DensityGrid live = grid.attach(tape);
  const ViewSet views = render_views(live, cams);
  CriticVerdict verdict = toy_critic_eval(query, views, live, critic);
  const Gradients g = tape.backward(verdict.reward);
  return {verdict, flatten(GridGradient{g.of(live.raw_density), g.of(live.raw_albedo)})};
}

// Coarse timesteps for the first third of the run, fine ones afterwards.
inline std::size_t sds_timestep(std::size_t step, std::size_t total, std::size_t T, Rng& rng) {
  const bool coarse = 3 * step < total;
  const std::size_t lo = coarse ? T / 2 : std::max<std::size_t>(1, T / 50);
  const std::size_t hi = coarse ? T : T / 2;
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

struct SdsStep {
  std::vector<double> grad;  // d(L_SDS - lambda * r_VLM) / d flat raw params
  double sds_norm = 0.0;     // |d L_SDS / d flat raw params|
  std::optional<RewardEval> reward;
};

// Gradient of one combined step. The reward enters only when `query` is given;
// with lambda = 0 it is scored but not differentiated.
inline SdsStep sds_step_gradient(const DensityGrid& grid, const NoisePredictor& prior, ConditionLabel label,
                                 const Camera& cam, std::size_t t, std::span<const double> eps,
                                 const DiffusionSchedule& sched, double lambda, const CriticQuery* query,
                                 std::span<const Camera> reward_cams, const CriticConfig& critic = {}) {
  SdsStep s;
  s.grad = flatten(sds_gradient(prior, grid, cam, label, t, eps, sched));
  double sq = 0.0;
  for (double g : s.grad) sq += g * g;
  s.sds_norm = std::sqrt(sq);
  if (query) {
    s.reward = evaluate_reward(grid, *query, reward_cams, lambda > 0.0, critic);
    if (lambda > 0.0)
      for (std::size_t i = 0; i < s.grad.size(); ++i) s.grad[i] -= lambda * s.reward->grad[i];
  }
  return s;
}

struct SdsResult {
  DensityGrid grid;
  RunRecord record;
};

// Minimizes L_SDS - lambda_vlm(step) * r_VLM over the raw grid parameters.
inline SdsResult sds_optimize(DensityGrid grid, const NoisePredictor& prior, ConditionLabel label,
                              const CriticQuery& query, const GuidanceConfig& cfg, const DiffusionSchedule& sched,
                              std::uint64_t seed, const CriticConfig& critic = {}) {
  cfg.validate();
  Rng rng = named_stream(seed, "sds");
  const std::vector<Camera> cams = reward_cameras(cfg);
  const std::vector<Camera> ring = make_view_ring(4, cfg.elevation);
  std::uniform_int_distribution<std::size_t> pick_cam(0, ring.size() - 1);
  const std::size_t r = grid.resolution;
  std::vector<double> params = flatten(grid);
  Adam adam;
  adam.lr = cfg.learning_rate;
  SdsResult out{grid, {seed, {}}};
  double last_reward = std::numeric_limits<double>::quiet_NaN();
  Decision last_decision = Decision::no;
  for (std::size_t step = 0; step < cfg.total_steps; ++step) {
    const Camera& cam = ring[pick_cam(rng)];
    const std::size_t t = sds_timestep(step, cfg.total_steps, sched.steps, rng);
    const std::vector<double> eps =
        standard_normal(rng, (cam.height / kPriorPool) * (cam.width / kPriorPool) * 3);
    const double lambda = anneal_lambda(cfg, step);
    const bool evaluate = step % cfg.reward_every == 0;
    SdsStep s = sds_step_gradient(out.grid, prior, label, cam, t, eps, sched, lambda,
                                  evaluate ? &query : nullptr, cams, critic);
    StepRecord rec;
    rec.step = step;
    rec.sds_norm = s.sds_norm;
    rec.lambda = lambda;
    if (s.reward) {
      last_reward = s.reward->verdict.reward_value();
      last_decision = hard_decision(s.reward->verdict);
      rec.reward_evaluated = true;
    }
    rec.reward = last_reward;
    rec.decision = last_decision;
    for (double g : s.grad) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient at SDS step " + std::to_string(step));
    }
    adam.step(params, s.grad);
    out.grid = unflatten(r, params);
    out.record.steps.push_back(rec);
  }
  return out;
}

// Native-3D latent: per-voxel occupancy, rendered with a fixed albedo.
inline DensityGrid grid_from_latent(std::size_t r, const Tensor& latent, const Vec3& albedo) {
  if (latent.size() != r * r * r) throw ShapeError("latent size does not match resolution");
  const Tensor raw = scale(add_scalar(reshape(latent, {r, r, r}), -0.5), kLatentGain);
  std::vector<double> alb(r * r * r * 3);
  for (std::size_t i = 0; i < r * r * r; ++i)
    for (int c = 0; c < 3; ++c) alb[i * 3 + c] = logit(albedo[c]);
  return {r, raw, Tensor({r, r, r, 3}, std::move(alb))};
}

struct GuidedResult {
  DensityGrid grid;
  std::vector<double> latent;  // z_0, the guided x0_hat of the last step
  RunRecord record;
};

struct LatentSpace {
  std::size_t resolution = 16;
  Vec3 albedo{0.7, 0.7, 0.7};
};

// Gradient of the reward with respect to the latent that decodes to the grid.
inline std::optional<std::vector<double>> latent_reward_gradient(std::span<const double> x0, const LatentSpace& space,
                                                                  const CriticQuery& query,
                                                                  std::span<const Camera> cams,
                                                                  const CriticConfig& critic, double* reward) {
  Tape tape;
  const Tensor latent = tape.leaf(Tensor({x0.size()}, {x0.begin(), x0.end()}));
  try {
    const DensityGrid g = grid_from_latent(space.resolution, latent, space.albedo);
    const ViewSet views = render_views(g, cams);
    const CriticVerdict v = toy_critic_eval(query, views, g, critic);
    *reward = v.reward_value();
    std::vector<double> grad = tape.backward(v.reward).of(latent).values();
    for (double d : grad)
      if (!std::isfinite(d)) return std::nullopt;
    return grad;
  } catch (const NumericError&) {
    return std::nullopt;
  }
}

struct GuidedStep {
  std::vector<double> next;
  StepRecord record;
};

// One ancestral step plus lambda_ttg times the reward gradient at x0_hat(z_t).
// A non-finite gradient leaves the plain step and marks the record skipped.
inline GuidedStep guided_step(const NoisePredictor& prior, std::span<const double> z, std::size_t t,
                              ConditionLabel label, const CriticQuery& query, double lambda_ttg,
                              const DiffusionSchedule& sched, Rng& rng, const LatentSpace& space,
                              std::span<const Camera> cams, const CriticConfig& critic = {}) {
  sched.check_step(t);
  const std::vector<double> x0 = predict_x0(prior, z, t, label, sched);
  const std::vector<double> eta = t > 1 ? standard_normal(rng, z.size()) : std::vector<double>{};
  GuidedStep s{ancestral_update(z, x0, t, sched, eta), {}};
  s.record.lambda = lambda_ttg;
  if (lambda_ttg > 0.0) {
    double reward = 0.0;
    const auto g = latent_reward_gradient(x0, space, query, cams, critic, &reward);
    if (g) {
      for (std::size_t i = 0; i < s.next.size(); ++i) s.next[i] += lambda_ttg * (*g)[i];
      s.record.reward = reward;
      s.record.reward_evaluated = true;
      s.record.decision = reward > 0.0 ? Decision::yes : Decision::no;
    } else {
      s.record.guidance_skipped = true;
    }
  }
  return s;
}

// Ancestral sampling with z_{t-1} = ancestral_step(z_t) + lambda_ttg * grad_z r_VLM(x0_hat(z_t)),
// eps_hat treated as a constant so grad_z = grad_x0. With lambda_ttg = 0 no
// reward is evaluated and the chain equals sample_chain bit for bit.
inline GuidedResult guided_sample(const NoisePredictor& prior, ConditionLabel label, const CriticQuery& query,
                                  const GuidanceConfig& cfg, const DiffusionSchedule& sched, Rng& rng,
                                  const LatentSpace& space = {}, const CriticConfig& critic = {}) {
  cfg.validate();
  const std::vector<Camera> cams = reward_cameras(cfg);
  const std::size_t dim = space.resolution * space.resolution * space.resolution;
  std::vector<double> z = standard_normal(rng, dim);
  for (double& v : z) v *= sched.sigma_max;
  GuidedResult out;
  int consecutive_skips = 0;
  for (std::size_t t = sched.steps; t >= 1; --t) {
    GuidedStep s = guided_step(prior, z, t, label, query, cfg.lambda_ttg, sched, rng, space, cams, critic);
    s.record.step = sched.steps - t;
    if (s.record.guidance_skipped) {
      if (++consecutive_skips == 2) {
        throw NumericError("non-finite guidance gradient twice in a row at sampling step t=" + std::to_string(t));
      }
    } else {
      consecutive_skips = 0;
    }
    out.record.steps.push_back(s.record);
    z = std::move(s.next);
  }
  out.grid = grid_from_latent(space.resolution, Tensor({dim}, z), space.albedo);
  out.latent = std::move(z);
  return out;
}

enum class AblationMode { full, no_geometry_query, single_view };

inline const char* to_string(AblationMode m) {
  switch (m) {
    case AblationMode::full: return "full";
    case AblationMode::no_geometry_query: return "no_geometry_query";
    case AblationMode::single_view: return "single_view";
  }
  return "?";
}

inline AblationMode parse_ablation_mode(const std::string& s) {
  for (AblationMode m : {AblationMode::full, AblationMode::no_geometry_query, AblationMode::single_view})
    if (s == to_string(m)) return m;
  throw std::invalid_argument("unknown ablation mode: " + s);
}

struct AblationRow {
  AblationMode mode = AblationMode::full;
  std::uint64_t seed = 0;
  double content = 0.0;
  double geometry = 0.0;
  double connectedness = 0.0;
  DensityGrid grid;
};

// Guided sampling per (mode, seed); seeds are shared across modes. Finals are
// scored on the 4-view ring against the query's template.
inline std::vector<AblationRow> ablation_run(std::span<const AblationMode> modes, std::span<const std::uint64_t> seeds,
                                             const NoisePredictor& prior, ConditionLabel label,
                                             const CriticQuery& query, const GuidanceConfig& cfg,
                                             const DiffusionSchedule& sched, const LatentSpace& space = {},
                                             const CriticConfig& critic = {}) {
  const std::vector<Camera> ring = make_view_ring(4, cfg.elevation);
  const SilhouetteTemplate tmpl = make_template(query.template_id, ring);
  std::vector<AblationRow> rows;
  for (AblationMode mode : modes) {
    GuidanceConfig mc = cfg;
    CriticQuery mq = query;
    if (mode == AblationMode::no_geometry_query) mq.include_geometry = false;
    if (mode == AblationMode::single_view) mc.single_view = true;
    for (std::uint64_t seed : seeds) {
      Rng rng = named_stream(seed, "sample");
      GuidedResult res = guided_sample(prior, label, mq, mc, sched, rng, space, critic);
      const ViewSet views = render_views(res.grid, ring);
      AblationRow row{mode, seed, content_score(views, tmpl).item(), geometry_score(views, res.grid, critic).item(),
                      connectedness(res.grid, critic).item(), res.grid};
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

}  // namespace cg3d
