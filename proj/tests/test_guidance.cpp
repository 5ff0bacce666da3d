#include <catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "cg3d/checkpoint.hpp"
#include "cg3d/guidance.hpp"
#include "support.hpp"

using namespace cg3d;
using namespace cg3d::testing;

namespace {

Denoiser small_prior(std::size_t dim, std::size_t hidden, std::uint64_t seed) {
  Rng rng = named_stream(seed, "init");
  return Denoiser::init({dim, hidden}, rng);
}

GuidanceConfig short_run(std::size_t steps, double lambda) {
  GuidanceConfig g;
  g.total_steps = steps;
  g.lambda_vlm_init = lambda;
  g.lambda_vlm_final = lambda;
  return g;
}

NoisePredictor point_predictor(double p) {
  return [p](const Tensor& x, std::span<const double> sigmas, std::span<const ConditionLabel>) {
    const std::size_t d = x.shape()[1];
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (x[i] - p) / sigmas[i / d];
    return Tensor(x.shape(), out);
  };
}

}  // namespace

TEST_CASE("anneal schedule endpoints and monotonicity", "[guidance]") {
  GuidanceConfig g;
  g.total_steps = 1001;
  CHECK(anneal_lambda(g, 0) == 10.0);
  CHECK(anneal_lambda(g, 1000) == 0.1);
  CHECK(anneal_lambda(g, 500) == Catch::Approx(1.0).epsilon(1e-12));
  for (std::size_t s = 1; s < g.total_steps; ++s) CHECK(anneal_lambda(g, s) <= anneal_lambda(g, s - 1));
  CHECK_THROWS_AS(anneal_lambda(g, 1001), std::out_of_range);

  g.anneal_shape = AnnealShape::linear;
  CHECK(anneal_lambda(g, 500) == Catch::Approx(5.05).epsilon(1e-12));
  g.lambda_vlm_init = 0.05;
  CHECK_THROWS_AS(g.validate(), std::invalid_argument);
}

TEST_CASE("lambda_vlm = 0 reproduces pure SDS bit for bit", "[guidance][identity]") {
  const Denoiser prior = small_prior(192, 16, 4);
  const DiffusionSchedule sched = DiffusionSchedule::geometric(100);
  const GuidanceConfig cfg = short_run(12, 0.0);
  Rng init = named_stream(9, "init");
  const DensityGrid start = random_init_grid(16, init);
  const CriticQuery q = build_query("a sphere", "sphere", true);
  const SdsResult guided = sds_optimize(start, prior.predictor(), 0, q, cfg, sched, 3);
  const std::vector<double> pure = pure_sds(start, prior.predictor(), 0, cfg, sched, 3);
  CHECK(same_bits(flatten(guided.grid), pure));
  CHECK(guided.record.steps[0].reward_evaluated);
}

TEST_CASE("combined step gradient is the sum of its parts", "[guidance]") {
  const Denoiser prior = small_prior(192, 16, 5);
  const DiffusionSchedule sched = DiffusionSchedule::geometric(100);
  const DensityGrid grid = random_grid(16, 21);
  const Camera cam = make_view_ring(4, default_elevation())[1];
  Rng rng(8);
  const std::vector<double> eps = standard_normal(rng, 8 * 8 * 3);
  const CriticQuery q = build_query("a sphere", "sphere", true);
  const auto cams = make_view_ring(4, default_elevation());
  const double lambda = 2.5;
  const SdsStep s = sds_step_gradient(grid, prior.predictor(), 0, cam, 40, eps, sched, lambda, &q, cams);
  const std::vector<double> gs = flatten(sds_gradient(prior.predictor(), grid, cam, 0, 40, eps, sched));
  const RewardEval re = evaluate_reward(grid, q, cams, true);
  REQUIRE(s.grad.size() == gs.size());
  double worst = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < gs.size(); ++i) {
    worst = std::max(worst, std::abs(s.grad[i] - (gs[i] - lambda * re.grad[i])));
    scale = std::max(scale, std::abs(s.grad[i]));
  }
  CHECK(worst <= 1e-10 * std::max(1.0, scale));
  CHECK(s.reward->verdict.reward_value() == re.verdict.reward_value());
}

TEST_CASE("reward alone raises the reward over the first 100 steps", "[guidance]") {
  const Denoiser prior = small_prior(192, 16, 6);
  DiffusionSchedule sched = DiffusionSchedule::geometric(100);
  for (double& w : sched.sds_weights) w = 0.0;
  GuidanceConfig cfg = short_run(100, 10.0);
  cfg.reward_every = 1;
  const CriticQuery q = build_query("a sphere", "sphere", true);
  Rng init = named_stream(1, "init");
  const DensityGrid start = random_init_grid(16, init);
  const SdsResult res = sds_optimize(start, prior.predictor(), 0, q, cfg, sched, 1);

  // Reward-only ascent with the same optimizer.
  const auto cams = reward_cameras(cfg);
  DensityGrid grid = start;
  std::vector<double> params = flatten(grid);
  Adam adam;
  adam.lr = cfg.learning_rate;
  std::vector<double> rewards;
  std::vector<std::size_t> components;
  for (std::size_t step = 0; step < 100; ++step) {
    const RewardEval re = evaluate_reward(grid, q, cams, true);
    rewards.push_back(re.verdict.reward_value());
    std::size_t count = 0;
    label_components(grid, CriticConfig{}.density_threshold, &count);
    components.push_back(count);
    std::vector<double> g(re.grad);
    for (double& v : g) v *= -10.0;
    adam.step(params, g);
    grid = unflatten(16, params);
  }

  REQUIRE(res.record.steps.size() == 100);
  for (std::size_t i = 0; i < 100; ++i) {
    CHECK(res.record.steps[i].sds_norm == 0.0);
    CHECK(res.record.steps[i].reward == rewards[i]);
  }
  CHECK(rewards.back() > rewards.front() + 1.0);
  // Empty grids are connected by convention, so the step where the first
  // voxel crosses the threshold may drop. Every other step must climb.
  std::size_t drops = 0;
  for (std::size_t i = 1; i < rewards.size(); ++i) {
    const bool emerging = components[i - 1] == 0 && components[i] > 0;
    INFO("step " << i << ": " << rewards[i - 1] << " -> " << rewards[i] << ", components " << components[i]);
    if (emerging) {
      drops += rewards[i] <= rewards[i - 1];
    } else {
      CHECK(rewards[i] > rewards[i - 1]);
    }
  }
  CHECK(drops <= 1);
}

TEST_CASE("lambda_ttg = 0 reproduces unguided sampling bit for bit", "[guidance][identity]") {
  const Denoiser prior = small_prior(4096, 16, 7);
  const DiffusionSchedule sched = DiffusionSchedule::geometric(10);
  GuidanceConfig cfg;
  cfg.lambda_ttg = 0.0;
  const CriticQuery q = build_query("a sphere", "sphere", true);
  const std::uint64_t before = checksum(prior.records());
  Rng a = named_stream(2, "sample"), b = named_stream(2, "sample");
  const GuidedResult guided = guided_sample(prior.predictor(), 0, q, cfg, sched, a);
  const std::vector<double> plain = sample_chain(prior.predictor(), 4096, 0, sched, b);
  CHECK(same_bits(guided.latent, plain));
  for (const StepRecord& s : guided.record.steps) CHECK_FALSE(s.reward_evaluated);

  cfg.lambda_ttg = 0.5;
  Rng c = named_stream(2, "sample");
  guided_sample(prior.predictor(), 0, q, cfg, sched, c);
  CHECK(checksum(prior.records()) == before);
}

TEST_CASE("guided step adds exactly lambda times the reward gradient", "[guidance]") {
  const Denoiser prior = small_prior(4096, 16, 8);
  const DiffusionSchedule sched = DiffusionSchedule::geometric(10);
  const CriticQuery q = build_query("a sphere", "sphere", true);
  const LatentSpace space;
  const auto cams = make_view_ring(4, default_elevation());
  Rng zr(3);
  std::vector<double> z = standard_normal(zr, 4096);
  for (double& v : z) v *= 0.3;
  const std::size_t t = 6;
  const double lambda = 0.75;

  Rng g_rng(11), p_rng(11);
  const GuidedStep guided = guided_step(prior.predictor(), z, t, 0, q, lambda, sched, g_rng, space, cams);
  const std::vector<double> plain = ancestral_step(prior.predictor(), z, t, 0, sched, p_rng);
  const std::vector<double> x0 = predict_x0(prior.predictor(), z, t, 0, sched);
  double reward = 0.0;
  const auto grad = latent_reward_gradient(x0, space, q, cams, {}, &reward);
  REQUIRE(grad);
  std::vector<double> expected(plain);
  for (std::size_t i = 0; i < expected.size(); ++i) expected[i] += lambda * (*grad)[i];
  CHECK(same_bits(guided.next, expected));
  CHECK(guided.record.reward == reward);
  double norm = 0.0;
  for (double g : *grad) norm += g * g;
  CHECK(norm > 0.0);
}

TEST_CASE("flat reward leaves the plain ancestral step", "[guidance]") {
  const NoisePredictor empty = point_predictor(-100.0);
  const DiffusionSchedule sched = DiffusionSchedule::geometric(10);
  const CriticQuery q = build_query("a sphere", "sphere", true);
  const auto cams = make_view_ring(4, default_elevation());
  std::vector<double> z(4096, -100.0);
  Rng g_rng(5), p_rng(5);
  const GuidedStep guided = guided_step(empty, z, 4, 0, q, 0.5, sched, g_rng, {}, cams);
  const std::vector<double> plain = ancestral_step(empty, z, 4, 0, sched, p_rng);
  CHECK(guided.record.reward_evaluated);
  CHECK(same_bits(guided.next, plain));
}

TEST_CASE("ablation runs are deterministic and share seeds across modes", "[guidance][ablation]") {
  const Denoiser prior = small_prior(4096, 16, 9);
  const DiffusionSchedule sched = DiffusionSchedule::geometric(4);
  const CriticQuery q = build_query("a sphere", "sphere", true);
  GuidanceConfig cfg;
  cfg.lambda_ttg = 0.0;
  const std::vector<AblationMode> modes{AblationMode::full, AblationMode::no_geometry_query, AblationMode::single_view};
  const std::vector<std::uint64_t> seeds{0, 1};
  const auto a = ablation_run(modes, seeds, prior.predictor(), 0, q, cfg, sched);
  const auto b = ablation_run(modes, seeds, prior.predictor(), 0, q, cfg, sched);
  REQUIRE(a.size() == 6);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].content == b[i].content);
    CHECK(a[i].geometry == b[i].geometry);
    CHECK(a[i].mode == modes[i / 2]);
    CHECK(a[i].seed == seeds[i % 2]);
  }
  // Without guidance the modes only differ in what the critic would have seen.
  CHECK(a[0].geometry == a[2].geometry);
  CHECK(a[0].geometry == a[4].geometry);

  CHECK(parse_ablation_mode("single_view") == AblationMode::single_view);
  CHECK_THROWS_AS(parse_ablation_mode("nope"), std::invalid_argument);
}

TEST_CASE("single-view reward cameras repeat the front view", "[guidance][ablation]") {
  GuidanceConfig cfg;
  cfg.single_view = true;
  const auto cams = reward_cameras(cfg);
  const Camera front = make_view_ring(1, cfg.elevation)[0];
  REQUIRE(cams.size() == 4);
  for (const Camera& c : cams) CHECK(c.azimuth == front.azimuth);

  const DensityGrid janus = canonical_shape(find_concept("janus_shell"), 32);
  const DensityGrid coherent = sphere_grid(32);
  const CriticQuery q = build_query("a sphere", "sphere", false);
  const double single_gap = evaluate_reward(janus, q, cams, false).verdict.reward_value() -
                            evaluate_reward(coherent, q, cams, false).verdict.reward_value();
  CHECK(std::abs(single_gap) <= 16.0 * 0.05);
  const CriticQuery dual = build_query("a sphere", "sphere", true);
  const auto ring = make_view_ring(4, cfg.elevation);
  CHECK(evaluate_reward(janus, dual, ring, false).verdict.reward_value() <
        evaluate_reward(coherent, dual, ring, false).verdict.reward_value());
}
